#include "chaosrl/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <queue>
#include <sstream>

#include "chaosrl/doob.hpp"

namespace chaosrl {

namespace {

constexpr double kRowSumTol = 1e-12;
constexpr double kResidualTol = 1e-10;

// Reachability over positive-probability edges, optionally transposed.
std::vector<char> reachable_from(const Eigen::MatrixXd& P, int src, bool transpose) {
    const int n = static_cast<int>(P.rows());
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    std::queue<int> q;
    seen[static_cast<std::size_t>(src)] = 1;
    q.push(src);
    while (!q.empty()) {
        const int x = q.front();
        q.pop();
        for (int y = 0; y < n; ++y) {
            const double p = transpose ? P(y, x) : P(x, y);
            if (p > 0.0 && !seen[static_cast<std::size_t>(y)]) {
                seen[static_cast<std::size_t>(y)] = 1;
                q.push(y);
            }
        }
    }
    return seen;
}

// Period of an irreducible chain: gcd over edges of d(u) + 1 - d(v), with d
// the BFS distance from state 0.
int chain_period(const Eigen::MatrixXd& P) {
    const int n = static_cast<int>(P.rows());
    std::vector<int> dist(static_cast<std::size_t>(n), -1);
    std::queue<int> q;
    dist[0] = 0;
    q.push(0);
    while (!q.empty()) {
        const int x = q.front();
        q.pop();
        for (int y = 0; y < n; ++y)
            if (P(x, y) > 0.0 && dist[static_cast<std::size_t>(y)] < 0) {
                dist[static_cast<std::size_t>(y)] = dist[static_cast<std::size_t>(x)] + 1;
                q.push(y);
            }
    }
    int g = 0;
    for (int x = 0; x < n; ++x)
        for (int y = 0; y < n; ++y)
            if (P(x, y) > 0.0)
                g = std::gcd(g, dist[static_cast<std::size_t>(x)] + 1 -
                                    dist[static_cast<std::size_t>(y)]);
    return g == 0 ? 1 : std::abs(g);
}

Eigen::MatrixXd chain_cdf(const Eigen::MatrixXd& P) {
    Eigen::MatrixXd cdf = P;
    for (Eigen::Index x = 0; x < P.rows(); ++x)
        for (Eigen::Index y = 1; y < P.cols(); ++y) cdf(x, y) += cdf(x, y - 1);
    return cdf;
}

int scan_cdf_row(const Eigen::MatrixXd& cdf, int row, double u) {
    const int n = static_cast<int>(cdf.cols());
    for (int y = 0; y < n; ++y)
        if (u < cdf(row, y)) return y;
    return n - 1;
}

}  // namespace

void ChainSpec::validate() const {
    const int ns = n();
    if (ns <= 0 || P.cols() != ns) throw ConfigError("chain kernel must be square and non-empty");
    if (R.rows() != ns || R.cols() != ns)
        throw ConfigError("chain reward table must match the kernel shape");
    if (noise_var.size() > 0 && (noise_var.rows() != ns || noise_var.cols() != ns))
        throw ConfigError("chain noise-variance table must match the kernel shape");
    if (noise_var.size() > 0 && (noise_var.array() < 0.0).any())
        throw ConfigError("chain noise variances must be nonnegative");
    for (int x = 0; x < ns; ++x) {
        if ((P.row(x).array() < 0.0).any())
            throw ConfigError("chain kernel has a negative entry");
        if (std::abs(P.row(x).sum() - 1.0) > kRowSumTol)
            throw ConfigError("chain kernel row " + std::to_string(x) + " does not sum to 1");
    }
    const auto fwd = reachable_from(P, 0, false);
    const auto bwd = reachable_from(P, 0, true);
    for (int x = 0; x < ns; ++x)
        if (!fwd[static_cast<std::size_t>(x)] || !bwd[static_cast<std::size_t>(x)])
            throw ConfigError("chain is reducible: state " + std::to_string(x) +
                              " does not communicate with state 0");
    if (chain_period(P) != 1) throw ConfigError("chain is periodic");
}

CltDecomposition solve_poisson(const ChainSpec& chain, int pin_state) {
    chain.validate();
    const int ns = chain.n();
    if (pin_state < 0 || pin_state >= ns) throw ConfigError("pin state out of range");

    CltDecomposition out;

    // Stationary distribution: (I - P^T) d = 0 together with sum d = 1.
    Eigen::MatrixXd A(ns + 1, ns);
    A.topRows(ns) = Eigen::MatrixXd::Identity(ns, ns) - chain.P.transpose();
    A.row(ns).setOnes();
    Eigen::VectorXd b = Eigen::VectorXd::Zero(ns + 1);
    b[ns] = 1.0;
    out.stationary = A.colPivHouseholderQr().solve(b);
    if (((chain.P.transpose() * out.stationary - out.stationary).array().abs() > kResidualTol)
            .any() ||
        std::abs(out.stationary.sum() - 1.0) > kResidualTol)
        throw NumericError("stationary distribution solve did not converge");

    // Conditional mean rewards and the long-run mean.
    const Eigen::VectorXd mu = (chain.P.array() * chain.R.array()).rowwise().sum();
    out.long_run_mean = out.stationary.dot(mu);

    // Poisson equation (P - I) f = long_run_mean - mu, pinned at f(pin) = 0.
    Eigen::MatrixXd M(ns + 1, ns);
    M.topRows(ns) = chain.P - Eigen::MatrixXd::Identity(ns, ns);
    M.row(ns).setZero();
    M(ns, pin_state) = 1.0;
    Eigen::VectorXd rhs(ns + 1);
    rhs.head(ns) = Eigen::VectorXd::Constant(ns, out.long_run_mean) - mu;
    rhs[ns] = 0.0;
    out.f_poisson = M.colPivHouseholderQr().solve(rhs);
    if (poisson_residual(chain, out) > kResidualTol)
        throw NumericError("poisson equation solve did not converge");

    // Chaotic part: reward variance given the current state (including any
    // additive noise); deterministic part: variance of f at the next state.
    Eigen::MatrixXd r2 = chain.R.array().square();
    if (chain.noise_var.size() > 0) r2.array() += chain.noise_var.array();
    const Eigen::VectorXd second = (chain.P.array() * r2.array()).rowwise().sum();
    out.sigma2_chaotic = out.stationary.dot((second.array() - mu.array().square()).matrix());

    const Eigen::VectorXd pf = chain.P * out.f_poisson;
    const Eigen::VectorXd pf2 = chain.P * out.f_poisson.array().square().matrix();
    out.sigma2_deter = out.stationary.dot((pf2.array() - pf.array().square()).matrix());
    return out;
}

double poisson_residual(const ChainSpec& chain, const CltDecomposition& d) {
    const Eigen::VectorXd mu = (chain.P.array() * chain.R.array()).rowwise().sum();
    const Eigen::VectorXd lhs = chain.P * d.f_poisson - d.f_poisson;
    const Eigen::VectorXd rhs =
        Eigen::VectorXd::Constant(chain.n(), d.long_run_mean) - mu;
    return (lhs - rhs).array().abs().maxCoeff();
}

std::string CltReport::text() const {
    std::ostringstream os;
    os << "empirical_variance=" << empirical_variance
       << " predicted_variance=" << predicted_variance << " rel_error=" << rel_error
       << " se_variance=" << se_variance << " n=" << n << " n_reps=" << n_reps;
    return os.str();
}

CltReport clt_empirical_check(const ChainSpec& chain, long n, int n_reps, RngStream& rng) {
    if (n < 10000) throw ConfigError("clt check needs a horizon of at least 1e4 steps");
    if (n_reps < 2) throw ConfigError("clt check needs at least 2 replications");
    const CltDecomposition dec = solve_poisson(chain);
    const Eigen::MatrixXd cdf = chain_cdf(chain.P);
    Eigen::MatrixXd noise_sd;
    const bool noisy = chain.noise_var.size() > 0 && (chain.noise_var.array() > 0.0).any();
    if (noisy) noise_sd = chain.noise_var.array().sqrt();

    // Cumulative start distribution for stationary initialization.
    Eigen::VectorXd start_cdf = dec.stationary;
    for (Eigen::Index i = 1; i < start_cdf.size(); ++i) start_cdf[i] += start_cdf[i - 1];

    std::vector<double> vals(static_cast<std::size_t>(n_reps));
    const int ns = chain.n();
    for (int rep = 0; rep < n_reps; ++rep) {
        const double u0 = rng.u01();
        int x = ns - 1;
        for (int i = 0; i < ns; ++i)
            if (u0 < start_cdf[i]) {
                x = i;
                break;
            }
        double sum = 0.0;
        for (long t = 0; t < n; ++t) {
            const int y = scan_cdf_row(cdf, x, rng.u01());
            double r = chain.R(x, y);
            if (noisy && noise_sd(x, y) > 0.0) r += noise_sd(x, y) * rng.normal();
            sum += r;
            x = y;
        }
        vals[static_cast<std::size_t>(rep)] =
            std::sqrt(static_cast<double>(n)) *
            (sum / static_cast<double>(n) - dec.long_run_mean);
    }

    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(n_reps);
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n_reps - 1);

    CltReport rep;
    rep.empirical_variance = var;
    rep.predicted_variance = dec.sigma2_chaotic + dec.sigma2_deter;
    rep.rel_error = std::abs(var - rep.predicted_variance) /
                    std::max(rep.predicted_variance, 1e-12);
    rep.se_variance = var * std::sqrt(2.0 / static_cast<double>(n_reps - 1));
    rep.n = n;
    rep.n_reps = n_reps;
    return rep;
}

std::string MartingaleReport::text() const {
    std::ostringstream os;
    os << "mean_sq_chaotic=" << mean_sq_chaotic << " mean_qv=" << mean_qv << " diff=" << diff
       << " se_pooled=" << se_pooled << " se_paired=" << se_paired << " z=" << z << " n=" << n
       << " pass=" << (pass ? 1 : 0);
    return os.str();
}

MartingaleReport martingale_check(const TabularMDP& mdp,
                                  const std::function<int(int, RngStream&)>& policy,
                                  const RewardMeanEstimator& est, long n_episodes,
                                  int max_episode_steps, RngStream& rng) {
    if (n_episodes < 2) throw NoDataError("martingale check needs at least 2 episodes");
    double sum_a = 0.0, sum_b = 0.0, sum_a2 = 0.0, sum_b2 = 0.0, sum_d = 0.0, sum_d2 = 0.0;
    std::vector<double> zeros;
    for (long i = 0; i < n_episodes; ++i) {
        const Episode ep = sample_episode(mdp, policy, max_episode_steps, rng);
        zeros.assign(static_cast<std::size_t>(ep.length()), 0.0);
        const DoobDecomposition d = doob_decompose(ep, est, mdp.gamma, 0.0, zeros);
        const double a = d.chaotic_total() * d.chaotic_total();
        const double b = d.quadratic_variation;
        sum_a += a;
        sum_b += b;
        sum_a2 += a * a;
        sum_b2 += b * b;
        sum_d += a - b;
        sum_d2 += (a - b) * (a - b);
    }
    const double dn = static_cast<double>(n_episodes);
    MartingaleReport rep;
    rep.n = n_episodes;
    rep.mean_sq_chaotic = sum_a / dn;
    rep.mean_qv = sum_b / dn;
    rep.diff = rep.mean_sq_chaotic - rep.mean_qv;
    const double var_a = std::max(0.0, (sum_a2 / dn - rep.mean_sq_chaotic * rep.mean_sq_chaotic) *
                                           dn / (dn - 1.0));
    const double var_b =
        std::max(0.0, (sum_b2 / dn - rep.mean_qv * rep.mean_qv) * dn / (dn - 1.0));
    const double mean_d = sum_d / dn;
    const double var_d = std::max(0.0, (sum_d2 / dn - mean_d * mean_d) * dn / (dn - 1.0));
    rep.se_pooled = std::sqrt((var_a + var_b) / dn);
    rep.se_paired = std::sqrt(var_d / dn);
    rep.z = rep.diff == 0.0 ? 0.0 : std::abs(rep.diff) / rep.se_pooled;
    rep.pass = rep.z <= 3.0;
    return rep;
}

// ---------------------------------------------------------------------------
// Trajectory enumeration.
// ---------------------------------------------------------------------------

Eigen::VectorXd TrajectorySet::policy_probs(const Eigen::MatrixXd& prob_table) const {
    Eigen::VectorXd p(env_probs.size());
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        double f = env_probs[i];
        for (const auto& tr : trajectories[static_cast<std::size_t>(i)].steps)
            f *= prob_table(tr.state, tr.action);
        p[i] = f;
    }
    return p;
}

TrajectorySet enumerate_trajectories(const TabularMDP& mdp, int max_len) {
    if (!mdp.analytic_mean)
        throw ConfigError("trajectory enumeration needs analytic mean rewards");
    if (!mdp.analytic_var)
        throw ConfigError("trajectory enumeration needs analytic reward variances");
    for (int s = 0; s < mdp.n_states; ++s)
        for (int a = 0; a < mdp.n_actions; ++a)
            if (!mdp.is_terminal(s) && mdp.analytic_var(s, a) != 0.0)
                throw ConfigError("trajectory enumeration needs deterministic rewards");
    if (max_len <= 0) throw ConfigError("trajectory enumeration needs a positive cap");

    constexpr std::size_t kMaxTrajectories = 5'000'000;
    TrajectorySet out;
    std::vector<double> probs;
    std::vector<Transition> stack;
    std::function<void(int, double)> dfs = [&](int s, double mass) {
        if (mdp.is_terminal(s) || static_cast<int>(stack.size()) >= max_len) {
            if (out.trajectories.size() >= kMaxTrajectories)
                throw ConfigError("trajectory enumeration exceeds the size guard");
            Episode ep;
            ep.start_state = stack.empty() ? s : stack.front().state;
            ep.terminated = mdp.is_terminal(s);
            ep.steps = stack;
            out.trajectories.push_back(std::move(ep));
            probs.push_back(mass);
            return;
        }
        for (int a = 0; a < mdp.n_actions; ++a) {
            const double r = mdp.analytic_mean(s, a);
            const int row = mdp.row(s, a);
            for (int s2 = 0; s2 < mdp.n_states; ++s2) {
                const double p = mdp.transition(row, s2);
                if (p <= 0.0) continue;
                stack.push_back(Transition{s, a, r, s2});
                dfs(s2, mass * p);
                stack.pop_back();
            }
        }
    };
    for (int s0 = 0; s0 < mdp.n_states; ++s0)
        if (mdp.start_dist[s0] > 0.0) dfs(s0, mdp.start_dist[s0]);
    out.env_probs = Eigen::Map<Eigen::VectorXd>(probs.data(),
                                                static_cast<Eigen::Index>(probs.size()));
    return out;
}

namespace {

// Per-trajectory aggregates: discounted return G, gamma^{2t}-weighted squared
// deviation sum Pn, and the signed gamma^{2t} deviation sum Z.
struct TrajAggregates {
    Eigen::VectorXd G, Pn, Z;
};

TrajAggregates traj_aggregates(const TrajectorySet& ts, const RewardMeanEstimator& est,
                               double gamma) {
    const Eigen::Index m = ts.env_probs.size();
    TrajAggregates a{Eigen::VectorXd::Zero(m), Eigen::VectorXd::Zero(m),
                     Eigen::VectorXd::Zero(m)};
    for (Eigen::Index i = 0; i < m; ++i) {
        double w = 1.0, w2 = 1.0, g = 0.0, pn = 0.0, z = 0.0;
        for (const auto& tr : ts.trajectories[static_cast<std::size_t>(i)].steps) {
            const double dev = tr.reward - est.mean(tr.state, tr.action);
            g += w * tr.reward;
            pn += w2 * dev * dev;
            z += w2 * dev;
            w *= gamma;
            w2 *= gamma * gamma;
        }
        a.G[i] = g;
        a.Pn[i] = pn;
        a.Z[i] = z;
    }
    return a;
}

}  // namespace

double enumerated_objective_value(const TrajectorySet& ts, const SoftmaxPolicy& policy,
                                  PgObjective obj, double beta,
                                  const RewardMeanEstimator& est, double gamma, double cvar_v) {
    const Eigen::VectorXd p = ts.policy_probs(policy.prob_table());
    const TrajAggregates a = traj_aggregates(ts, est, gamma);
    const double m1 = p.dot(a.G);
    switch (obj) {
        case PgObjective::Cmv:
            return m1 - 0.5 * beta * p.dot(a.Pn);
        case PgObjective::MeanVariance: {
            const double m2 = p.dot(a.G.array().square().matrix());
            return m1 - 0.5 * beta * (m2 - m1 * m1);
        }
        case PgObjective::Sharpe: {
            if (beta == 0.0) return m1;  // risk transform disabled
            const double mp = p.dot(a.Pn);
            if (!(mp > 0.0)) throw NumericError("sharpe objective has zero denominator");
            return m1 / std::sqrt(mp);
        }
        case PgObjective::Cvar: {
            if (beta == 0.0) return m1;  // risk transform disabled
            double tail = 0.0;
            for (Eigen::Index i = 0; i < p.size(); ++i)
                if (a.Z[i] >= cvar_v) tail += p[i] * (a.Z[i] - cvar_v);
            return m1 - tail;
        }
    }
    throw ConfigError("unknown objective");
}

Eigen::VectorXd enumerated_objective_gradient(const TrajectorySet& ts,
                                              const SoftmaxPolicy& policy, PgObjective obj,
                                              double beta, const RewardMeanEstimator& est,
                                              double gamma, double cvar_v) {
    const Eigen::MatrixXd table = policy.prob_table();
    const Eigen::VectorXd p = ts.policy_probs(table);
    const TrajAggregates a = traj_aggregates(ts, est, gamma);
    const Eigen::Index dim = policy.theta.size();
    const double m1 = p.dot(a.G);

    Eigen::VectorXd g = Eigen::VectorXd::Zero(dim);
    Eigen::VectorXd gp = Eigen::VectorXd::Zero(dim);  // sharpe penalty gradient
    Eigen::VectorXd score(dim);
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        score.setZero();
        for (const auto& tr : ts.trajectories[static_cast<std::size_t>(i)].steps)
            add_score(score, policy.n_actions(), tr.state, tr.action,
                      table.row(tr.state).transpose(), 1.0);
        double w = 0.0;
        switch (obj) {
            case PgObjective::Cmv:
                w = a.G[i] - 0.5 * beta * a.Pn[i];
                break;
            case PgObjective::MeanVariance:
                w = a.G[i] - 0.5 * beta * (a.G[i] * a.G[i] - 2.0 * m1 * a.G[i]);
                break;
            case PgObjective::Sharpe:
                w = a.G[i];
                gp += (p[i] * a.Pn[i]) * score;
                break;
            case PgObjective::Cvar: {
                const double tail =
                    (beta != 0.0 && a.Z[i] >= cvar_v) ? a.Z[i] - cvar_v : 0.0;
                w = a.G[i] - tail;
                break;
            }
        }
        g += (p[i] * w) * score;
    }
    if (obj == PgObjective::Sharpe && beta != 0.0) {
        const double mp = p.dot(a.Pn);
        if (!(mp > 0.0)) throw NumericError("sharpe objective has zero denominator");
        g = sharpe_direction(m1, mp, g, gp);
    }
    return g;
}

std::string FdCheckReport::text() const {
    std::ostringstream os;
    os << "mode=" << mode << " objective_value=" << objective_value
       << " max_abs_error=" << max_abs_error << " max_rel_error=" << max_rel_error
       << " n_samples=" << n_samples;
    return os.str();
}

namespace {

double weighted_quantile(std::vector<std::pair<double, double>> atoms, double level) {
    std::sort(atoms.begin(), atoms.end());
    double total = 0.0;
    for (const auto& a : atoms) total += a.second;
    double cum = 0.0;
    for (const auto& a : atoms) {
        cum += a.second;
        if (cum >= level * total) return a.first;
    }
    return atoms.back().first;
}

}  // namespace

FdCheckReport finite_diff_gradient_check(const SoftmaxPolicy& policy, const TabularMDP& mdp,
                                         PgObjective obj, double beta, double h,
                                         long n_episodes, RngStream& rng,
                                         const RewardMeanEstimator* est, int max_len) {
    if (!(h > 0.0)) throw ConfigError("finite-difference step must be positive");
    std::optional<RewardMeanEstimator> exact_holder;
    if (est == nullptr) {
        if (!mdp.analytic_mean)
            throw ConfigError("no estimator given and the MDP has no analytic means");
        exact_holder.emplace(
            RewardMeanEstimator::exact(mdp.n_states, mdp.n_actions, mdp.analytic_mean));
        est = &*exact_holder;
    }
    const int cap = max_len > 0 ? max_len : (mdp.horizon > 0 ? mdp.horizon : 12);
    const double gamma = mdp.gamma;
    const Eigen::Index dim = policy.theta.size();

    bool deterministic = static_cast<bool>(mdp.analytic_mean) &&
                         static_cast<bool>(mdp.analytic_var);
    if (deterministic)
        for (int s = 0; s < mdp.n_states && deterministic; ++s)
            for (int a = 0; a < mdp.n_actions; ++a)
                if (!mdp.is_terminal(s) && mdp.analytic_var(s, a) != 0.0) {
                    deterministic = false;
                    break;
                }

    FdCheckReport rep;
    rep.fd = Eigen::VectorXd::Zero(dim);

    if (deterministic) {
        rep.mode = "enumeration";
        const TrajectorySet ts = enumerate_trajectories(mdp, cap);
        rep.n_samples = static_cast<long>(ts.trajectories.size());

        double cvar_v = 0.0;
        if (obj == PgObjective::Cvar && beta != 0.0) {
            const Eigen::VectorXd p = ts.policy_probs(policy.prob_table());
            const TrajAggregates a = traj_aggregates(ts, *est, gamma);
            std::vector<std::pair<double, double>> atoms;
            atoms.reserve(static_cast<std::size_t>(p.size()));
            for (Eigen::Index i = 0; i < p.size(); ++i) atoms.emplace_back(a.Z[i], p[i]);
            cvar_v = weighted_quantile(std::move(atoms), beta);
        }

        rep.objective_value =
            enumerated_objective_value(ts, policy, obj, beta, *est, gamma, cvar_v);
        rep.analytic =
            enumerated_objective_gradient(ts, policy, obj, beta, *est, gamma, cvar_v);
        SoftmaxPolicy pert = policy;
        for (Eigen::Index k = 0; k < dim; ++k) {
            pert.theta = policy.theta;
            pert.theta[k] += h;
            const double jp =
                enumerated_objective_value(ts, pert, obj, beta, *est, gamma, cvar_v);
            pert.theta[k] = policy.theta[k] - h;
            const double jm =
                enumerated_objective_value(ts, pert, obj, beta, *est, gamma, cvar_v);
            rep.fd[k] = (jp - jm) / (2.0 * h);
        }
    } else {
        rep.mode = "crn-mc";
        if (n_episodes < 2) throw NoDataError("crn gradient check needs at least 2 episodes");
        if (n_episodes * static_cast<long>(dim) > 20'000'000L)
            throw ConfigError("crn gradient check batch too large");
        const Eigen::MatrixXd table = policy.prob_table();
        Eigen::MatrixXd cdf = table;
        for (Eigen::Index s = 0; s < cdf.rows(); ++s)
            for (Eigen::Index a2 = 1; a2 < cdf.cols(); ++a2) cdf(s, a2) += cdf(s, a2 - 1);
        auto pol = [&](int s, RngStream& r) { return scan_cdf_row(cdf, s, r.u01()); };

        const long n = n_episodes;
        Eigen::VectorXd G(n), Pn(n), Z(n);
        Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n, dim);
        Eigen::VectorXd grad_rtg = Eigen::VectorXd::Zero(dim);   // cmv / mean part
        Eigen::VectorXd grad_pen = Eigen::VectorXd::Zero(dim);   // sharpe penalty part
        std::vector<double> togo_r, togo_p;
        for (long i = 0; i < n; ++i) {
            const Episode ep = sample_episode(mdp, pol, cap, rng);
            const int T = ep.length();
            togo_r.assign(static_cast<std::size_t>(T), 0.0);
            togo_p.assign(static_cast<std::size_t>(T), 0.0);
            double rel_r = 0.0, rel_p = 0.0;
            for (int t = T - 1; t >= 0; --t) {
                const auto& tr = ep.steps[static_cast<std::size_t>(t)];
                const double dev = tr.reward - est->mean(tr.state, tr.action);
                rel_r = tr.reward + gamma * rel_r;
                rel_p = dev * dev + gamma * gamma * rel_p;
                togo_r[static_cast<std::size_t>(t)] = rel_r;
                togo_p[static_cast<std::size_t>(t)] = rel_p;
            }
            G[i] = rel_r;
            Pn[i] = rel_p;
            double z = 0.0, w2 = 1.0, w = 1.0;
            for (int t = 0; t < T; ++t) {
                const auto& tr = ep.steps[static_cast<std::size_t>(t)];
                const double dev = tr.reward - est->mean(tr.state, tr.action);
                z += w2 * dev;
                counts(i, static_cast<Eigen::Index>(tr.state) * mdp.n_actions + tr.action) +=
                    1.0;
                // Mean part uses relative-discount reward-to-go (as the CMV /
                // CVaR / MV estimators do); sharpe uses absolute-time weights
                // on both its gradients.
                double mean_w = togo_r[static_cast<std::size_t>(t)];
                if (obj == PgObjective::Cmv)
                    mean_w -= 0.5 * beta * togo_p[static_cast<std::size_t>(t)];
                else if (obj == PgObjective::Sharpe)
                    mean_w = w * togo_r[static_cast<std::size_t>(t)];
                add_score(grad_rtg, mdp.n_actions, tr.state, tr.action,
                          table.row(tr.state).transpose(), mean_w);
                if (obj == PgObjective::Sharpe)
                    add_score(grad_pen, mdp.n_actions, tr.state, tr.action,
                              table.row(tr.state).transpose(),
                              w2 * togo_p[static_cast<std::size_t>(t)]);
                w *= gamma;
                w2 *= gamma * gamma;
            }
            Z[i] = z;
        }
        const double dn = static_cast<double>(n);

        double cvar_v = 0.0;
        if (obj == PgObjective::Cvar && beta != 0.0) {
            std::vector<std::pair<double, double>> atoms;
            atoms.reserve(static_cast<std::size_t>(n));
            for (long i = 0; i < n; ++i) atoms.emplace_back(Z[i], 1.0);
            cvar_v = weighted_quantile(std::move(atoms), beta);
        }

        // Per-episode total scores from visit counts: S[k=(s,a)] =
        // count(s,a) - (sum_a' count(s,a')) pi(a|s).
        auto total_score = [&](long i, Eigen::VectorXd& s_out) {
            for (int st = 0; st < mdp.n_states; ++st) {
                const Eigen::Index base = static_cast<Eigen::Index>(st) * mdp.n_actions;
                const double row_n = counts.row(i).segment(base, mdp.n_actions).sum();
                for (int a2 = 0; a2 < mdp.n_actions; ++a2)
                    s_out[base + a2] = counts(i, base + a2) - row_n * table(st, a2);
            }
        };

        // Analytic side: the shipped estimator evaluated on this batch.
        Eigen::VectorXd score(dim);
        switch (obj) {
            case PgObjective::Cmv:
                rep.analytic = grad_rtg / dn;
                break;
            case PgObjective::MeanVariance: {
                const double mu_j = G.mean();
                Eigen::VectorXd num = Eigen::VectorXd::Zero(dim),
                                den = Eigen::VectorXd::Zero(dim);
                Eigen::VectorXd wsum = Eigen::VectorXd::Zero(dim),
                                ssum = Eigen::VectorXd::Zero(dim);
                for (long i = 0; i < n; ++i) {
                    total_score(i, score);
                    const double wv = G[i] * G[i] - 2.0 * mu_j * G[i];
                    const Eigen::ArrayXd s2 = score.array().square();
                    num.array() += wv * s2;
                    den.array() += s2;
                    wsum += wv * score;
                    ssum += score;
                }
                Eigen::VectorXd ell = Eigen::VectorXd::Zero(dim);
                for (Eigen::Index k = 0; k < dim; ++k)
                    if (den[k] > 0.0) ell[k] = num[k] / den[k];
                rep.analytic = grad_rtg / dn - 0.5 * beta *
                                                   (wsum - ell.cwiseProduct(ssum)) / dn;
                break;
            }
            case PgObjective::Sharpe: {
                if (beta == 0.0) {
                    rep.analytic = grad_rtg / dn;
                    break;
                }
                const double v = G.mean(), vv = Pn.mean();
                if (!(vv > 0.0))
                    throw NumericError("sharpe objective has zero denominator");
                rep.analytic = sharpe_direction(v, vv, grad_rtg / dn, grad_pen / dn);
                break;
            }
            case PgObjective::Cvar: {
                Eigen::VectorXd tail = Eigen::VectorXd::Zero(dim);
                if (beta != 0.0)
                    for (long i = 0; i < n; ++i)
                        if (Z[i] >= cvar_v) {
                            total_score(i, score);
                            tail += (Z[i] - cvar_v) * score;
                        }
                rep.analytic = (grad_rtg - tail) / dn;
                break;
            }
        }

        // Likelihood-ratio objective at a perturbed point, frozen batch.
        Eigen::VectorXd base_log(dim);
        for (int st = 0; st < mdp.n_states; ++st)
            for (int a2 = 0; a2 < mdp.n_actions; ++a2)
                base_log[static_cast<Eigen::Index>(st) * mdp.n_actions + a2] =
                    std::log(table(st, a2));
        SoftmaxPolicy pert = policy;
        auto objective_at = [&](const SoftmaxPolicy& pp) {
            const Eigen::MatrixXd t2 = pp.prob_table();
            Eigen::VectorXd delta(dim);
            for (int st = 0; st < mdp.n_states; ++st)
                for (int a2 = 0; a2 < mdp.n_actions; ++a2) {
                    const Eigen::Index k2 =
                        static_cast<Eigen::Index>(st) * mdp.n_actions + a2;
                    delta[k2] = std::log(t2(st, a2)) - base_log[k2];
                }
            const Eigen::ArrayXd wgt = (counts * delta).array().exp();
            const double m1 = (wgt * G.array()).sum() / dn;
            switch (obj) {
                case PgObjective::Cmv:
                    return m1 - 0.5 * beta * (wgt * Pn.array()).sum() / dn;
                case PgObjective::MeanVariance: {
                    const double m2 = (wgt * G.array().square()).sum() / dn;
                    return m1 - 0.5 * beta * (m2 - m1 * m1);
                }
                case PgObjective::Sharpe: {
                    if (beta == 0.0) return m1;
                    return m1 / std::sqrt((wgt * Pn.array()).sum() / dn);
                }
                case PgObjective::Cvar: {
                    if (beta == 0.0) return m1;
                    double tail = 0.0;
                    for (long i = 0; i < n; ++i)
                        if (Z[i] >= cvar_v) tail += wgt[i] * (Z[i] - cvar_v);
                    return m1 - tail / dn;
                }
            }
            throw ConfigError("unknown objective");
        };
        rep.objective_value = objective_at(policy);
        rep.n_samples = n;
        for (Eigen::Index k = 0; k < dim; ++k) {
            pert.theta = policy.theta;
            pert.theta[k] += h;
            const double jp = objective_at(pert);
            pert.theta[k] = policy.theta[k] - h;
            const double jm = objective_at(pert);
            rep.fd[k] = (jp - jm) / (2.0 * h);
        }
    }

    rep.max_abs_error = (rep.analytic - rep.fd).array().abs().maxCoeff();
    const double scale = std::max(rep.fd.array().abs().maxCoeff(), 1e-12);
    rep.max_rel_error = rep.max_abs_error / scale;
    return rep;
}

}  // namespace chaosrl
