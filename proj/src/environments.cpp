#include "chaosrl/environments.hpp"

#include <cmath>
#include <queue>
#include <string>

namespace chaosrl {

namespace {

double draw_noise(NoiseDist dist, RngStream& rng) {
    switch (dist) {
        case NoiseDist::Gaussian:
            return rng.normal();
        case NoiseDist::Rademacher:
            return rng.u01() < 0.5 ? -1.0 : 1.0;
    }
    return 0.0;
}

// Analytic conditional moments for rewards that are a deterministic function
// of the entered state: mean/var follow from the transition row alone.  The
// tables are precomputed and captured by value so the lambdas stay valid
// after the MDP is copied or moved.
void attach_next_state_reward_moments(TabularMDP& mdp, const std::vector<double>& enter_reward) {
    Eigen::MatrixXd mean(mdp.n_states, mdp.n_actions), var(mdp.n_states, mdp.n_actions);
    for (int s = 0; s < mdp.n_states; ++s)
        for (int a = 0; a < mdp.n_actions; ++a) {
            double m = 0.0, m2 = 0.0;
            for (int y = 0; y < mdp.n_states; ++y) {
                const double pr = mdp.transition(mdp.row(s, a), y);
                const double r = enter_reward[static_cast<std::size_t>(y)];
                m += pr * r;
                m2 += pr * r * r;
            }
            mean(s, a) = m;
            var(s, a) = m2 - m * m;
        }
    mdp.analytic_mean = [mean](int s, int a) { return mean(s, a); };
    mdp.analytic_var = [var](int s, int a) { return var(s, a); };
}

}  // namespace

// --- regime-switch -------------------------------------------------------

void RegimeSwitchConfig::validate() const {
    if (n_states <= 0) throw ConfigError("regime config: n_states must be positive");
    if (p.size() != n_states || mu.size() != n_states || kappa.size() != n_states ||
        sigma.size() != n_states)
        throw ConfigError("regime config: parameter vectors must have length n_states");
    double sum = 0.0;
    for (int i = 0; i < n_states; ++i) {
        if (p[i] < 0.0) throw ConfigError("regime config: negative probability");
        if (sigma[i] < 0.0) throw ConfigError("regime config: negative noise scale");
        sum += p[i];
    }
    if (std::abs(sum - 1.0) > 1e-12) throw ConfigError("regime config: probabilities must sum to 1");
    if (horizon <= 0) throw ConfigError("regime config: horizon must be positive");
}

RegimeSwitchConfig toy_regime_config(double sigma, int horizon) {
    RegimeSwitchConfig cfg;
    cfg.n_states = 2;
    cfg.p = Eigen::VectorXd::Constant(2, 0.5);
    cfg.mu = Eigen::VectorXd(2);
    cfg.mu << 2.0, 10.0;
    cfg.kappa = Eigen::VectorXd(2);
    cfg.kappa << 2.0, -2.0;
    cfg.sigma = Eigen::VectorXd::Constant(2, sigma);
    cfg.horizon = horizon;
    return cfg;
}

TabularMDP build_mdp(const RegimeSwitchConfig& cfg) {
    cfg.validate();
    TabularMDP mdp;
    mdp.n_states = cfg.n_states;
    mdp.n_actions = 2;
    mdp.gamma = 1.0;
    mdp.horizon = cfg.horizon;
    double bound = 0.0;
    for (int n = 0; n < cfg.n_states; ++n)
        bound = std::max(bound, std::abs(cfg.mu[n]) + std::abs(cfg.kappa[n]) + 8.0 * cfg.sigma[n]);
    mdp.reward_bound = bound;

    mdp.transition.resize(static_cast<Eigen::Index>(cfg.n_states) * 2, cfg.n_states);
    for (int s = 0; s < cfg.n_states; ++s)
        for (int a = 0; a < 2; ++a) mdp.transition.row(mdp.row(s, a)) = cfg.p.transpose();
    mdp.start_dist = cfg.p;
    mdp.terminal.assign(static_cast<std::size_t>(cfg.n_states), 0);

    mdp.reward_sampler = [mu = cfg.mu, kappa = cfg.kappa, sigma = cfg.sigma,
                          noise = cfg.noise](int s, int a, int, RngStream& rng) {
        if (a == 0) return mu[s];
        double r = mu[s] + kappa[s];
        if (sigma[s] != 0.0) r += sigma[s] * draw_noise(noise, rng);
        return r;
    };
    mdp.analytic_mean = [mu = cfg.mu, kappa = cfg.kappa](int s, int a) {
        return a == 0 ? mu[s] : mu[s] + kappa[s];
    };
    mdp.analytic_var = [sigma = cfg.sigma](int s, int a) {
        return a == 0 ? 0.0 : sigma[s] * sigma[s];
    };
    mdp.validate();
    return mdp;
}

double closed_form_chaotic_variance(const RegimeSwitchConfig& cfg,
                                    const Eigen::VectorXd& policy_probs, double beta) {
    cfg.validate();
    if (policy_probs.size() != cfg.n_states)
        throw ConfigError("policy_probs must have one entry per regime");
    double acc = 0.0;
    for (int n = 0; n < cfg.n_states; ++n)
        acc += cfg.sigma[n] * cfg.sigma[n] * cfg.p[n] * policy_probs[n];
    return 0.5 * beta * cfg.horizon * acc;
}

double closed_form_variance_gap(const RegimeSwitchConfig& cfg) {
    cfg.validate();
    double drift = 0.0;
    for (int n = 0; n < cfg.n_states; ++n) drift += cfg.p[n] * cfg.kappa[n];
    if (std::abs(drift) > 1e-12)
        throw ConfigError("variance-gap formula needs equal policy means (sum p_n kappa_n = 0)");
    double acc = 0.0;
    for (int n = 0; n < cfg.n_states; ++n)
        acc += cfg.p[n] * (cfg.kappa[n] * cfg.kappa[n] + 2.0 * cfg.mu[n] * cfg.kappa[n] +
                           cfg.sigma[n] * cfg.sigma[n]);
    return cfg.horizon * acc;
}

// --- grid world ----------------------------------------------------------

void GridWorldConfig::validate() const {
    if (width <= 0 || height <= 0) throw ConfigError("grid config: degenerate dimensions");
    const int n = width * height;
    auto in_range = [n](int c) { return c >= 0 && c < n; };
    if (!in_range(start_cell) || !in_range(goal_cell))
        throw ConfigError("grid config: start/goal cell out of range");
    if (start_cell == goal_cell) throw ConfigError("grid config: start equals goal");
    for (const auto& [c, v] : penalty_cells) {
        if (!in_range(c)) throw ConfigError("grid config: penalty cell out of range");
        if (v >= 0.0) throw ConfigError("grid config: penalties must be negative");
    }
    if (p_error < 0.0 || p_error > 1.0) throw ConfigError("grid config: p_error outside [0,1]");
    if (episode_cap <= 0) throw ConfigError("grid config: episode cap must be positive");
}

GridWorldConfig default_grid_config() {
    GridWorldConfig cfg;
    cfg.width = 4;
    cfg.height = 4;
    cfg.start_cell = cfg.cell(0, 0);
    cfg.goal_cell = cfg.cell(3, 3);
    cfg.penalty_cells = {{cfg.cell(1, 2), -20.0}, {cfg.cell(1, 1), -6.0}, {cfg.cell(2, 2), -6.0}};
    cfg.p_error = 0.5;
    return cfg;
}

TabularMDP build_mdp(const GridWorldConfig& cfg) {
    cfg.validate();
    const int n = cfg.width * cfg.height;
    TabularMDP mdp;
    mdp.n_states = n;
    mdp.n_actions = 4;
    mdp.gamma = 1.0;
    mdp.horizon = 0;  // terminal-state episodic; cap applied by the caller

    std::vector<double> enter_reward(static_cast<std::size_t>(n), cfg.step_reward);
    for (const auto& [c, v] : cfg.penalty_cells) enter_reward[static_cast<std::size_t>(c)] += v;
    enter_reward[static_cast<std::size_t>(cfg.goal_cell)] += cfg.goal_bonus;
    double bound = 0.0;
    for (double r : enter_reward) bound = std::max(bound, std::abs(r));
    mdp.reward_bound = bound;

    // dx/dy per action: east, west, north, south.
    const int dx[4] = {1, -1, 0, 0};
    const int dy[4] = {0, 0, 1, -1};
    auto move = [&](int c, int dir) {
        const int x = c % cfg.width, y = c / cfg.width;
        const int nx = x + dx[dir], ny = y + dy[dir];
        if (nx < 0 || nx >= cfg.width || ny < 0 || ny >= cfg.height) return c;  // wall: stay
        return ny * cfg.width + nx;
    };

    mdp.transition = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n) * 4, n);
    for (int c = 0; c < n; ++c) {
        for (int a = 0; a < 4; ++a) {
            if (c == cfg.goal_cell) {
                mdp.transition(mdp.row(c, a), c) = 1.0;  // absorbing; never sampled
                continue;
            }
            for (int dir = 0; dir < 4; ++dir) {
                double q = cfg.p_error / 4.0;
                if (dir == a) q += 1.0 - cfg.p_error;
                mdp.transition(mdp.row(c, a), move(c, dir)) += q;
            }
        }
    }
    mdp.start_dist = Eigen::VectorXd::Zero(n);
    mdp.start_dist[cfg.start_cell] = 1.0;
    mdp.terminal.assign(static_cast<std::size_t>(n), 0);
    mdp.terminal[static_cast<std::size_t>(cfg.goal_cell)] = 1;

    mdp.reward_sampler = [enter_reward](int, int, int s_next, RngStream&) {
        return enter_reward[static_cast<std::size_t>(s_next)];
    };
    attach_next_state_reward_moments(mdp, enter_reward);
    mdp.validate();

    // Reachability of every cell from the start under the 4 moves.
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    std::queue<int> bfs;
    bfs.push(cfg.start_cell);
    seen[static_cast<std::size_t>(cfg.start_cell)] = 1;
    while (!bfs.empty()) {
        const int c = bfs.front();
        bfs.pop();
        if (c == cfg.goal_cell) continue;
        for (int dir = 0; dir < 4; ++dir) {
            const int t = move(c, dir);
            if (!seen[static_cast<std::size_t>(t)]) {
                seen[static_cast<std::size_t>(t)] = 1;
                bfs.push(t);
            }
        }
    }
    for (int c = 0; c < n; ++c)
        if (!seen[static_cast<std::size_t>(c)])
            throw ConfigError("grid config: cell " + std::to_string(c) + " unreachable from start");
    return mdp;
}

// --- portfolio -----------------------------------------------------------

PortfolioConfig::PortfolioConfig() {
    mu = Eigen::VectorXd(3);
    mu << 0.2, 0.6, 1.0;
    sigma = Eigen::VectorXd(3);
    sigma << 0.5, 1.0, 1.5;
    band_rows = Eigen::MatrixXd(4, 3);
    band_rows << 0.05, 0.25, 0.7,            // q^R = q_max
        0.1, 0.45, 0.45,                     // 2 < q^R < q_max
        1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0,     // 0 < q^R <= 2
        0.5, 0.45, 0.05;                     // q^R = 0
}

void PortfolioConfig::validate() const {
    const int n = static_cast<int>(mu.size());
    if (n <= 0 || sigma.size() != n) throw ConfigError("portfolio config: mu/sigma length mismatch");
    if (band_rows.rows() != 4 || band_rows.cols() != n)
        throw ConfigError("portfolio config: band_rows must be 4 x n_states");
    for (int b = 0; b < 4; ++b) {
        double sum = 0.0;
        for (int y = 0; y < n; ++y) {
            if (band_rows(b, y) < 0.0) throw ConfigError("portfolio config: negative probability");
            sum += band_rows(b, y);
        }
        if (std::abs(sum - 1.0) > 1e-12)
            throw ConfigError("portfolio config: band row " + std::to_string(b) +
                              " does not sum to 1");
    }
    for (int s = 0; s < n; ++s)
        if (sigma[s] < 0.0) throw ConfigError("portfolio config: negative volatility");
    if (q_max <= 0) throw ConfigError("portfolio config: budget must be positive");
    if (horizon <= 0) throw ConfigError("portfolio config: horizon must be positive");
    if (start_state < 0 || start_state >= n)
        throw ConfigError("portfolio config: start state out of range");
}

std::vector<std::pair<int, int>> portfolio_actions(int q_max) {
    std::vector<std::pair<int, int>> acts;
    for (int q_rf = 0; q_rf <= q_max; ++q_rf)
        for (int q_r = 0; q_r + q_rf <= q_max; ++q_r) acts.emplace_back(q_rf, q_r);
    return acts;
}

TabularMDP build_mdp(const PortfolioConfig& cfg) {
    cfg.validate();
    const auto acts = portfolio_actions(cfg.q_max);
    const int n = static_cast<int>(cfg.mu.size());
    const int na = static_cast<int>(acts.size());

    TabularMDP mdp;
    mdp.n_states = n;
    mdp.n_actions = na;
    mdp.gamma = 1.0;
    mdp.horizon = cfg.horizon;
    double bound = 0.0;
    for (int s = 0; s < n; ++s)
        bound = std::max(bound, cfg.q_max * (std::abs(cfg.mu[s]) + 8.0 * cfg.sigma[s]));
    mdp.reward_bound = bound;

    auto band = [q_max = cfg.q_max](int q_r) {
        if (q_r == q_max) return 0;
        if (q_r > 2) return 1;
        if (q_r > 0) return 2;
        return 3;
    };
    mdp.transition.resize(static_cast<Eigen::Index>(n) * na, n);
    for (int s = 0; s < n; ++s)
        for (int a = 0; a < na; ++a)
            mdp.transition.row(mdp.row(s, a)) = cfg.band_rows.row(band(acts[a].second));
    mdp.start_dist = Eigen::VectorXd::Zero(n);
    mdp.start_dist[cfg.start_state] = 1.0;
    mdp.terminal.assign(static_cast<std::size_t>(n), 0);

    mdp.reward_sampler = [acts, mu = cfg.mu, sigma = cfg.sigma](int s, int a, int,
                                                                RngStream& rng) {
        const auto [q_rf, q_r] = acts[static_cast<std::size_t>(a)];
        double r = (q_rf + q_r) * mu[s];
        if (q_r > 0 && sigma[s] != 0.0) r += q_r * sigma[s] * rng.normal();
        return r;
    };
    mdp.analytic_mean = [acts, mu = cfg.mu](int s, int a) {
        const auto [q_rf, q_r] = acts[static_cast<std::size_t>(a)];
        return (q_rf + q_r) * mu[s];
    };
    mdp.analytic_var = [acts, sigma = cfg.sigma](int s, int a) {
        const double q_r = acts[static_cast<std::size_t>(a)].second;
        return q_r * q_r * sigma[s] * sigma[s];
    };
    mdp.validate();
    return mdp;
}

}  // namespace chaosrl
