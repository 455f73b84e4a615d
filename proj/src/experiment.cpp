#include "chaosrl/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "chaosrl/common.hpp"
#include "chaosrl/csv.hpp"
#include "chaosrl/heatmap.hpp"

namespace chaosrl {

namespace {

constexpr std::uint64_t kRolloutStreamTag = 0x726f6c6cULL;  // "roll"

Eigen::VectorXd to_vector(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Eigen::MatrixXd theta_table(const SoftmaxPolicy& pol) {
    Eigen::MatrixXd t(pol.n_states(), pol.n_actions());
    for (int s = 0; s < pol.n_states(); ++s)
        for (int a = 0; a < pol.n_actions(); ++a) t(s, a) = pol.theta[pol.idx(s, a)];
    return t;
}

bool is_value_based(const std::string& algo) { return algo == "cmv-q" || algo == "cmv-r"; }

bool is_batch_pg(const std::string& algo) {
    return algo == "cmv-reinforce" || algo == "mv-reinforce" || algo == "sharpe-pg" ||
           algo == "cvar-pg";
}

bool is_actor_critic(const std::string& algo) {
    return algo == "ac-episodic" || algo == "ac-average";
}

}  // namespace

// --- policy artifact ------------------------------------------------------

int PolicyArtifact::action(int s, RngStream& rng) const {
    if (s < 0 || s >= table.rows())
        throw InvalidActionError("policy artifact: state " + std::to_string(s) + " out of range");
    if (kind == "greedy-q") {
        int best = 0;
        for (int a = 1; a < table.cols(); ++a)
            if (table(s, a) > table(s, best)) best = a;
        return best;
    }
    if (kind == "softmax-theta") {
        Eigen::VectorXd logits = table.row(s).transpose();
        const double m = logits.maxCoeff();
        Eigen::VectorXd p = (logits.array() - m).exp();
        p /= p.sum();
        return rng.categorical(p);
    }
    throw ConfigError("policy artifact: unknown kind '" + kind + "'");
}

void write_policy_csv(const std::string& path, const PolicyArtifact& policy) {
    if (policy.kind != "greedy-q" && policy.kind != "softmax-theta")
        throw ConfigError("policy artifact: unknown kind '" + policy.kind + "'");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("policy: cannot open '" + path + "' for writing");
    os << "kind," << policy.kind << '\n';
    os << "state";
    for (int a = 0; a < policy.table.cols(); ++a) os << ",a" << a;
    os << '\n';
    for (int s = 0; s < policy.table.rows(); ++s) {
        os << s;
        for (int a = 0; a < policy.table.cols(); ++a) os << ',' << format_g17(policy.table(s, a));
        os << '\n';
    }
    if (!os) throw ConfigError("policy: write failed for '" + path + "'");
}

PolicyArtifact read_policy_csv(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("policy: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line)) throw ConfigError("policy: '" + path + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind("kind,", 0) != 0)
        throw ConfigError("policy: '" + path + "' does not start with a kind line");
    PolicyArtifact p;
    p.kind = line.substr(5);
    if (p.kind != "greedy-q" && p.kind != "softmax-theta")
        throw ConfigError("policy: unknown kind '" + p.kind + "' in '" + path + "'");
    if (!std::getline(is, line)) throw ConfigError("policy: '" + path + "' has no header row");

    std::vector<std::vector<double>> rows;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            const char* begin = cell.c_str();
            char* end = nullptr;
            const double v = std::strtod(begin, &end);
            if (end == begin || *end != '\0')
                throw ConfigError("policy: non-numeric cell '" + cell + "' in '" + path + "'");
            row.push_back(v);
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ConfigError("policy: '" + path + "' has no state rows");
    const std::size_t ncols = rows[0].size();
    if (ncols < 2) throw ConfigError("policy: '" + path + "' rows need a state and actions");
    p.table.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(ncols - 1));
    for (std::size_t s = 0; s < rows.size(); ++s) {
        if (rows[s].size() != ncols)
            throw ConfigError("policy: ragged rows in '" + path + "'");
        for (std::size_t a = 1; a < ncols; ++a)
            p.table(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a - 1)) = rows[s][a];
    }
    return p;
}

// --- rollout --------------------------------------------------------------

std::uint64_t rollout_stream_seed(std::uint64_t cell_seed) {
    return derive_seed(cell_seed, kRolloutStreamTag);
}

RolloutMetrics rollout_policy(const TabularMDP& mdp, const PolicyArtifact& policy, long n_steps,
                              long n_episodes, int horizon_cap, std::uint64_t seed) {
    if ((n_steps > 0) == (n_episodes > 0))
        throw ConfigError("rollout: exactly one of n_steps / n_episodes must be positive");
    if (policy.table.rows() != mdp.n_states || policy.table.cols() != mdp.n_actions)
        throw ConfigError("rollout: policy table shape does not match the environment");

    const int cap = horizon_cap > 0 ? horizon_cap : (mdp.horizon > 0 ? mdp.horizon : 500);
    RngStream rng(seed, 0);

    Eigen::VectorXd visits = Eigen::VectorXd::Zero(mdp.n_states);
    Eigen::MatrixXd sa_count = Eigen::MatrixXd::Zero(mdp.n_states, mdp.n_actions);
    Eigen::MatrixXd sa_sum = sa_count, sa_sum2 = sa_count;
    std::vector<double> returns;

    long steps = 0, completed = 0;
    while (n_steps > 0 ? steps < n_steps : completed < n_episodes) {
        int s = mdp.sample_start(rng);
        double ret = 0.0;
        bool truncated = false;
        long ep_steps = 0;
        for (int k = 0; k < cap; ++k) {
            if (mdp.is_terminal(s)) break;
            const int a = policy.action(s, rng);
            auto [s_next, r] = mdp.step(s, a, rng);
            visits[s] += 1.0;
            sa_count(s, a) += 1.0;
            sa_sum(s, a) += r;
            sa_sum2(s, a) += r * r;
            ret += r;
            s = s_next;
            ++steps;
            ++ep_steps;
            if (n_steps > 0 && steps >= n_steps && k + 1 < cap && !mdp.is_terminal(s)) {
                truncated = true;  // budget ran out mid-episode
                break;
            }
        }
        if (ep_steps == 0 && n_steps > 0)
            throw ConfigError("rollout: episode made no steps; the step budget cannot advance");
        if (!truncated) {
            returns.push_back(ret);
            ++completed;
        }
    }

    RolloutMetrics m;
    m.total_steps = steps;
    m.n_episodes = completed;
    const double n_ret = static_cast<double>(returns.size());
    if (!returns.empty()) {
        m.mean_return = std::accumulate(returns.begin(), returns.end(), 0.0) / n_ret;
        if (returns.size() > 1) {
            double ss = 0.0;
            for (double r : returns) ss += (r - m.mean_return) * (r - m.mean_return);
            m.std_return = std::sqrt(ss / (n_ret - 1.0));
        }
    }
    m.visit_counts = visits;
    m.occupancy = steps > 0 ? Eigen::VectorXd(visits / static_cast<double>(steps))
                            : Eigen::VectorXd::Zero(mdp.n_states);
    m.action_fraction = steps > 0 ? Eigen::MatrixXd(sa_count / static_cast<double>(steps))
                                  : Eigen::MatrixXd::Zero(mdp.n_states, mdp.n_actions);
    m.state_risk = Eigen::VectorXd::Zero(mdp.n_states);
    for (int s = 0; s < mdp.n_states; ++s) {
        if (visits[s] <= 0.0) continue;
        double acc = 0.0;
        for (int a = 0; a < mdp.n_actions; ++a) {
            const double c = sa_count(s, a);
            if (c <= 0.0) continue;
            const double mean = sa_sum(s, a) / c;
            const double var = sa_sum2(s, a) / c - mean * mean;
            acc += c * (var > 0.0 ? var : 0.0);
        }
        m.state_risk[s] = acc / visits[s];
    }
    return m;
}

// --- configuration --------------------------------------------------------

TabularMDP ExperimentConfig::build_env() const {
    if (env_type == "regime-switch") return build_mdp(regime);
    if (env_type == "grid") return build_mdp(grid);
    if (env_type == "portfolio") return build_mdp(portfolio);
    throw ConfigError("experiment: unknown environment type '" + env_type + "'");
}

void ExperimentConfig::validate() const {
    if (env_type != "regime-switch" && env_type != "grid" && env_type != "portfolio")
        throw ConfigError("experiment: unknown environment type '" + env_type + "'");
    if (!is_value_based(algorithm) && !is_batch_pg(algorithm) && !is_actor_critic(algorithm))
        throw ConfigError("experiment: unknown algorithm '" + algorithm + "'");
    if (beta_sweep.empty()) throw ConfigError("experiment: beta sweep must be non-empty");
    if (seeds.empty()) throw ConfigError("experiment: seed list must be non-empty");
    if ((rollout_steps > 0) == (rollout_episodes > 0))
        throw ConfigError(
            "experiment: exactly one of rollout n_steps / n_episodes must be positive");
    if (rollout_horizon < 0) throw ConfigError("experiment: rollout horizon must be >= 0");
    if (max_episode_steps <= 0) throw ConfigError("experiment: max_episode_steps must be > 0");

    for (double b : beta_sweep) {
        if (algorithm == "cvar-pg") {
            if (!(b > 0.0 && b < 1.0))
                throw ConfigError("experiment: cvar-pg needs tail levels beta in (0, 1)");
        } else if (b < 0.0) {
            throw ConfigError("experiment: risk weight beta must be >= 0");
        }
    }

    if (estimator != "tabular" && estimator != "replay")
        throw ConfigError("experiment: estimator must be 'tabular' or 'replay'");
    if (estimator == "replay" &&
        !(algorithm == "cmv-reinforce" || algorithm == "sharpe-pg" || algorithm == "cvar-pg"))
        throw ConfigError("experiment: the replay estimator is only fitted by the batch "
                          "chaotic-penalty algorithms (cmv-reinforce, sharpe-pg, cvar-pg)");
    if (replay_capacity == 0) throw ConfigError("experiment: replay capacity must be > 0");

    if (is_value_based(algorithm)) schedule.validate();
    if (is_batch_pg(algorithm)) {
        if (batch_size <= 0) throw ConfigError("experiment: batch_size must be > 0");
        if (n_iterations <= 0) throw ConfigError("experiment: n_iterations must be > 0");
        if (!(alpha_n > 0.0)) throw ConfigError("experiment: alpha_n must be > 0");
        if (!(pg_gamma > 0.0 && pg_gamma <= 1.0))
            throw ConfigError("experiment: gamma must lie in (0, 1]");
        if (algorithm == "sharpe-pg" && !(sharpe_alpha2 > 0.0))
            throw ConfigError("experiment: sharpe_alpha2 must be > 0");
        if (algorithm == "cvar-pg" && !(cvar_alpha2 > 0.0))
            throw ConfigError("experiment: cvar_alpha2 must be > 0");
    }
    if (is_actor_critic(algorithm)) {
        if (ac_steps <= 0) throw ConfigError("experiment: ac_steps must be > 0");
        timescales.validate();
    }
    if (algorithm == "cmv-r") {
        if (!(alpha2_c > 0.0) || alpha2_exp < 0.0)
            throw ConfigError("experiment: cmv-r secondary timescale must have alpha2_c > 0 "
                              "and alpha2_exp >= 0");
    }

    // Environment / algorithm compatibility.  The average-reward recursions
    // never reset, so an environment with absorbing terminal states would
    // trap them; the episodic trainers need episodes to end.
    const bool has_terminal = [&] {
        if (env_type != "grid") return false;  // fixed-horizon environments
        return true;                           // the grid's goal cell is terminal
    }();
    if ((algorithm == "cmv-r" || algorithm == "ac-average") && has_terminal)
        throw ConfigError("experiment: " + algorithm +
                          " needs a continuing environment without terminal states");
}

ExperimentConfig parse_experiment_config(const KeyValueConfig& kv) {
    ExperimentConfig cfg;
    cfg.env_type = kv.get_string("environment.type");

    if (cfg.env_type == "regime-switch") {
        if (kv.has("environment.p")) {
            const auto p = kv.get_double_list("environment.p");
            const auto mu = kv.get_double_list("environment.mu");
            const auto kappa = kv.get_double_list("environment.kappa");
            const auto sigmas = kv.get_double_list("environment.sigmas");
            cfg.regime.n_states = static_cast<int>(p.size());
            cfg.regime.p = to_vector(p);
            cfg.regime.mu = to_vector(mu);
            cfg.regime.kappa = to_vector(kappa);
            cfg.regime.sigma = to_vector(sigmas);
            cfg.regime.horizon = static_cast<int>(kv.get_long("environment.horizon", 400));
        } else {
            cfg.regime = toy_regime_config(kv.get_double("environment.sigma", 0.16),
                                           static_cast<int>(kv.get_long("environment.horizon", 400)));
        }
        const std::string noise = kv.get_string("environment.noise", "gaussian");
        if (noise == "gaussian")
            cfg.regime.noise = NoiseDist::Gaussian;
        else if (noise == "rademacher")
            cfg.regime.noise = NoiseDist::Rademacher;
        else
            throw ConfigError("config: environment.noise must be gaussian or rademacher");
    } else if (cfg.env_type == "grid") {
        cfg.grid = default_grid_config();
        cfg.grid.width = static_cast<int>(kv.get_long("environment.width", cfg.grid.width));
        cfg.grid.height = static_cast<int>(kv.get_long("environment.height", cfg.grid.height));
        cfg.grid.start_cell =
            static_cast<int>(kv.get_long("environment.start_cell", cfg.grid.start_cell));
        cfg.grid.goal_cell =
            static_cast<int>(kv.get_long("environment.goal_cell", cfg.grid.goal_cell));
        cfg.grid.step_reward = kv.get_double("environment.step_reward", cfg.grid.step_reward);
        cfg.grid.goal_bonus = kv.get_double("environment.goal_bonus", cfg.grid.goal_bonus);
        cfg.grid.p_error = kv.get_double("environment.p_error", cfg.grid.p_error);
        cfg.grid.episode_cap =
            static_cast<int>(kv.get_long("environment.episode_cap", cfg.grid.episode_cap));
        if (kv.has("environment.penalty_cells") || kv.has("environment.penalty_values")) {
            const auto cells = kv.get_long_list("environment.penalty_cells", {});
            const auto values = kv.get_double_list("environment.penalty_values", {});
            if (cells.size() != values.size())
                throw ConfigError(
                    "config: penalty_cells and penalty_values must have equal lengths");
            cfg.grid.penalty_cells.clear();
            for (std::size_t i = 0; i < cells.size(); ++i)
                cfg.grid.penalty_cells[static_cast<int>(cells[i])] = values[i];
        }
    } else if (cfg.env_type == "portfolio") {
        if (kv.has("environment.mu")) cfg.portfolio.mu = to_vector(kv.get_double_list("environment.mu"));
        if (kv.has("environment.sigmas"))
            cfg.portfolio.sigma = to_vector(kv.get_double_list("environment.sigmas"));
        cfg.portfolio.q_max = static_cast<int>(kv.get_long("environment.q_max", cfg.portfolio.q_max));
        cfg.portfolio.horizon =
            static_cast<int>(kv.get_long("environment.horizon", cfg.portfolio.horizon));
        cfg.portfolio.start_state =
            static_cast<int>(kv.get_long("environment.start_state", cfg.portfolio.start_state));
    }
    // Unknown env types are caught by validate() below.

    cfg.algorithm = kv.get_string("algorithm.name");
    cfg.schedule.alpha_c = kv.get_double("algorithm.alpha_c", cfg.schedule.alpha_c);
    cfg.schedule.alpha_exp = kv.get_double("algorithm.alpha_exp", cfg.schedule.alpha_exp);
    cfg.schedule.epsilon = kv.get_double("algorithm.epsilon", cfg.schedule.epsilon);
    cfg.schedule.n_steps = kv.get_long("algorithm.n_steps", cfg.schedule.n_steps);
    cfg.alpha2_c = kv.get_double("algorithm.alpha2_c", cfg.alpha2_c);
    cfg.alpha2_exp = kv.get_double("algorithm.alpha2_exp", cfg.alpha2_exp);
    cfg.batch_size = static_cast<int>(kv.get_long("algorithm.batch_size", cfg.batch_size));
    cfg.n_iterations = kv.get_long("algorithm.n_iterations", cfg.n_iterations);
    cfg.alpha_n = kv.get_double("algorithm.alpha_n", cfg.alpha_n);
    cfg.pg_gamma = kv.get_double("algorithm.gamma", cfg.pg_gamma);
    cfg.ac_steps = kv.get_long("algorithm.ac_steps", cfg.ac_steps);
    cfg.timescales.a1_c = kv.get_double("algorithm.a1_c", cfg.timescales.a1_c);
    cfg.timescales.a1_exp = kv.get_double("algorithm.a1_exp", cfg.timescales.a1_exp);
    cfg.timescales.a2_c = kv.get_double("algorithm.a2_c", cfg.timescales.a2_c);
    cfg.timescales.a2_exp = kv.get_double("algorithm.a2_exp", cfg.timescales.a2_exp);
    cfg.timescales.a3_c = kv.get_double("algorithm.a3_c", cfg.timescales.a3_c);
    cfg.timescales.a3_exp = kv.get_double("algorithm.a3_exp", cfg.timescales.a3_exp);
    cfg.sharpe_alpha2 = kv.get_double("algorithm.sharpe_alpha2", cfg.sharpe_alpha2);
    cfg.sharpe_accumulate_only =
        kv.get_bool("algorithm.sharpe_accumulate_only", cfg.sharpe_accumulate_only);
    cfg.cvar_alpha2 = kv.get_double("algorithm.cvar_alpha2", cfg.cvar_alpha2);
    cfg.estimator = kv.get_string("algorithm.estimator", cfg.estimator);
    {
        const long cap = kv.get_long("algorithm.replay_capacity",
                                     static_cast<long>(cfg.replay_capacity));
        if (cap <= 0) throw ConfigError("config: algorithm.replay_capacity must be > 0");
        cfg.replay_capacity = static_cast<std::size_t>(cap);
    }
    cfg.du.n_sgd_steps =
        static_cast<int>(kv.get_long("algorithm.du_sgd_steps", cfg.du.n_sgd_steps));
    cfg.du.n_samples = static_cast<int>(kv.get_long("algorithm.du_samples", cfg.du.n_samples));
    cfg.du.step = kv.get_double("algorithm.du_step", cfg.du.step);
    cfg.max_episode_steps =
        static_cast<int>(kv.get_long("algorithm.max_episode_steps", cfg.max_episode_steps));

    cfg.beta_sweep = kv.get_double_list("sweep.beta", {});
    if (kv.has("sweep.seeds")) {
        cfg.seeds = kv.get_u64_list("sweep.seeds");
    } else {
        const std::uint64_t base =
            static_cast<std::uint64_t>(kv.get_long("sweep.seed_base", 1));
        for (int i = 0; i < kDefaultSeedCount; ++i)
            cfg.seeds.push_back(base + static_cast<std::uint64_t>(i));
    }

    cfg.rollout_steps = kv.get_long("rollout.n_steps", 0);
    cfg.rollout_episodes = kv.get_long("rollout.n_episodes", 0);
    cfg.rollout_horizon = static_cast<int>(kv.get_long("rollout.horizon", 0));

    cfg.output_dir = kv.get_string("output.dir", cfg.output_dir);

    cfg.validate();
    return cfg;
}

// --- training cells -------------------------------------------------------

CellResult run_cell(const ExperimentConfig& cfg, double beta, std::uint64_t seed,
                    bool do_rollout) {
    TabularMDP mdp = cfg.build_env();
    CellResult cell;
    cell.beta = beta;
    cell.seed = seed;
    const RewardMeanMode est_mode =
        cfg.estimator == "replay" ? RewardMeanMode::LinearReplay : RewardMeanMode::Tabular;

    if (cfg.algorithm == "cmv-q") {
        const CmvQResult res = train_cmv_q(mdp, cfg.schedule, beta, seed);
        cell.policy = {"greedy-q", res.q.q};
    } else if (cfg.algorithm == "cmv-r") {
        const CmvRResult res =
            train_cmv_r(mdp, cfg.schedule, cfg.alpha2_c, cfg.alpha2_exp, beta, seed);
        cell.policy = {"greedy-q", res.q.q};
    } else if (cfg.algorithm == "cmv-reinforce" || cfg.algorithm == "mv-reinforce") {
        SoftmaxPolicy pol(mdp.n_states, mdp.n_actions);
        RewardMeanEstimator est(mdp.n_states, mdp.n_actions, est_mode, cfg.replay_capacity);
        cell.log_header = {"iteration", "mean_return", "mean_penalty"};
        for (long it = 0; it < cfg.n_iterations; ++it) {
            const GradientEstimate g =
                cfg.algorithm == "cmv-reinforce"
                    ? cmv_reinforce_iteration(pol, mdp, est, cfg.batch_size, beta, cfg.pg_gamma,
                                              cfg.alpha_n, seed, it, cfg.du,
                                              cfg.max_episode_steps)
                    : mv_reinforce_iteration(pol, mdp, cfg.batch_size, beta, cfg.pg_gamma,
                                             cfg.alpha_n, seed, it, cfg.max_episode_steps);
            cell.log_rows.push_back(
                {static_cast<double>(it), g.mean_return(), g.mean_penalty()});
        }
        cell.policy = {"softmax-theta", theta_table(pol)};
    } else if (cfg.algorithm == "sharpe-pg") {
        SoftmaxPolicy pol(mdp.n_states, mdp.n_actions);
        RewardMeanEstimator est(mdp.n_states, mdp.n_actions, est_mode, cfg.replay_capacity);
        SharpeState state;
        cell.log_header = {"iteration", "mean_return", "v", "vv", "skipped"};
        for (long it = 0; it < cfg.n_iterations; ++it) {
            const SharpeReport rep = sharpe_pg_iteration(
                pol, mdp, est, cfg.batch_size, cfg.alpha_n, cfg.sharpe_alpha2, state, seed, it,
                cfg.pg_gamma, 1e-8, cfg.sharpe_accumulate_only, cfg.du, cfg.max_episode_steps);
            cell.log_rows.push_back({static_cast<double>(it), rep.estimate.mean_return(), rep.v,
                                     rep.vv, rep.skipped ? 1.0 : 0.0});
        }
        cell.policy = {"softmax-theta", theta_table(pol)};
    } else if (cfg.algorithm == "cvar-pg") {
        SoftmaxPolicy pol(mdp.n_states, mdp.n_actions);
        RewardMeanEstimator est(mdp.n_states, mdp.n_actions, est_mode, cfg.replay_capacity);
        VarState var_est;
        cell.log_header = {"iteration", "mean_return", "var", "exceed_fraction"};
        for (long it = 0; it < cfg.n_iterations; ++it) {
            const CvarReport rep = cvar_pg_iteration(
                pol, mdp, est, cfg.batch_size, beta, cfg.alpha_n, cfg.cvar_alpha2, var_est, seed,
                it, cfg.pg_gamma, cfg.du, cfg.max_episode_steps);
            cell.log_rows.push_back({static_cast<double>(it), rep.estimate.mean_return(),
                                     rep.var, rep.exceed_fraction});
        }
        cell.policy = {"softmax-theta", theta_table(pol)};
    } else if (cfg.algorithm == "ac-episodic") {
        SoftmaxPolicy pol(mdp.n_states, mdp.n_actions);
        CriticParams critics(mdp.n_states);
        RewardMeanEstimator est(mdp.n_states, mdp.n_actions, est_mode, cfg.replay_capacity);
        RngStream rng(seed, 0);
        const int cap = mdp.horizon > 0 ? mdp.horizon : cfg.max_episode_steps;
        long t = 0;
        while (t < cfg.ac_steps) {
            int s = mdp.sample_start(rng);
            for (int k = 0; k < cap && t < cfg.ac_steps; ++k) {
                if (mdp.is_terminal(s)) break;
                const int a = pol.sample(s, rng);
                auto [s_next, r] = mdp.step(s, a, rng);
                est.observe(s, a, r);
                const Transition tr{s, a, r, s_next};
                const bool next_terminal = mdp.is_terminal(s_next) || k + 1 >= cap;
                actor_critic_step_episodic(pol, critics, est, tr, next_terminal,
                                           cfg.timescales.alpha1(t), cfg.timescales.alpha2(t),
                                           beta);
                s = s_next;
                ++t;
            }
        }
        cell.policy = {"softmax-theta", theta_table(pol)};
    } else if (cfg.algorithm == "ac-average") {
        SoftmaxPolicy pol(mdp.n_states, mdp.n_actions);
        CriticParams critics(mdp.n_states);
        RewardMeanEstimator est(mdp.n_states, mdp.n_actions, est_mode, cfg.replay_capacity);
        AverageRewardState avg;
        RngStream rng(seed, 0);
        int s = mdp.sample_start(rng);
        for (long t = 0; t < cfg.ac_steps; ++t) {
            const int a = pol.sample(s, rng);
            auto [s_next, r] = mdp.step(s, a, rng);
            est.observe(s, a, r);
            const Transition tr{s, a, r, s_next};
            actor_critic_step_average(pol, critics, est, avg, tr, cfg.timescales.alpha1(t),
                                      cfg.timescales.alpha2(t), cfg.timescales.alpha3(t), beta);
            s = s_next;
        }
        cell.policy = {"softmax-theta", theta_table(pol)};
    } else {
        throw ConfigError("experiment: unknown algorithm '" + cfg.algorithm + "'");
    }

    if (do_rollout) {
        cell.metrics = rollout_policy(mdp, cell.policy, cfg.rollout_steps, cfg.rollout_episodes,
                                      cfg.rollout_horizon, rollout_stream_seed(seed));
    }
    return cell;
}

// --- experiment driver ----------------------------------------------------

namespace {

// Effective configuration re-serialized field by field; its checksum
// identifies the run independent of comments or formatting in the source
// config file.
KeyValueConfig effective_kv(const ExperimentConfig& cfg) {
    KeyValueConfig kv;
    auto set_d = [&](const std::string& k, double v) { kv.set(k, format_g17(v)); };
    auto set_l = [&](const std::string& k, long v) { kv.set(k, std::to_string(v)); };

    kv.set("environment.type", cfg.env_type);
    if (cfg.env_type == "regime-switch") {
        std::string p, mu, kappa, sig;
        for (int i = 0; i < cfg.regime.n_states; ++i) {
            const std::string sep = i ? "," : "";
            p += sep + format_g17(cfg.regime.p[i]);
            mu += sep + format_g17(cfg.regime.mu[i]);
            kappa += sep + format_g17(cfg.regime.kappa[i]);
            sig += sep + format_g17(cfg.regime.sigma[i]);
        }
        kv.set("environment.p", p);
        kv.set("environment.mu", mu);
        kv.set("environment.kappa", kappa);
        kv.set("environment.sigmas", sig);
        set_l("environment.horizon", cfg.regime.horizon);
        kv.set("environment.noise",
               cfg.regime.noise == NoiseDist::Gaussian ? "gaussian" : "rademacher");
    } else if (cfg.env_type == "grid") {
        set_l("environment.width", cfg.grid.width);
        set_l("environment.height", cfg.grid.height);
        set_l("environment.start_cell", cfg.grid.start_cell);
        set_l("environment.goal_cell", cfg.grid.goal_cell);
        set_d("environment.step_reward", cfg.grid.step_reward);
        set_d("environment.goal_bonus", cfg.grid.goal_bonus);
        set_d("environment.p_error", cfg.grid.p_error);
        set_l("environment.episode_cap", cfg.grid.episode_cap);
        std::string cells, values;
        for (const auto& [c, v] : cfg.grid.penalty_cells) {
            const std::string sep = cells.empty() ? "" : ",";
            cells += sep + std::to_string(c);
            values += sep + format_g17(v);
        }
        kv.set("environment.penalty_cells", cells);
        kv.set("environment.penalty_values", values);
    } else if (cfg.env_type == "portfolio") {
        std::string mu, sig;
        for (int i = 0; i < cfg.portfolio.mu.size(); ++i) {
            const std::string sep = i ? "," : "";
            mu += sep + format_g17(cfg.portfolio.mu[i]);
            sig += sep + format_g17(cfg.portfolio.sigma[i]);
        }
        kv.set("environment.mu", mu);
        kv.set("environment.sigmas", sig);
        set_l("environment.q_max", cfg.portfolio.q_max);
        set_l("environment.horizon", cfg.portfolio.horizon);
        set_l("environment.start_state", cfg.portfolio.start_state);
    }

    kv.set("algorithm.name", cfg.algorithm);
    set_d("algorithm.alpha_c", cfg.schedule.alpha_c);
    set_d("algorithm.alpha_exp", cfg.schedule.alpha_exp);
    set_d("algorithm.epsilon", cfg.schedule.epsilon);
    set_l("algorithm.n_steps", cfg.schedule.n_steps);
    set_d("algorithm.alpha2_c", cfg.alpha2_c);
    set_d("algorithm.alpha2_exp", cfg.alpha2_exp);
    set_l("algorithm.batch_size", cfg.batch_size);
    set_l("algorithm.n_iterations", cfg.n_iterations);
    set_d("algorithm.alpha_n", cfg.alpha_n);
    set_d("algorithm.gamma", cfg.pg_gamma);
    set_l("algorithm.ac_steps", cfg.ac_steps);
    set_d("algorithm.a1_c", cfg.timescales.a1_c);
    set_d("algorithm.a1_exp", cfg.timescales.a1_exp);
    set_d("algorithm.a2_c", cfg.timescales.a2_c);
    set_d("algorithm.a2_exp", cfg.timescales.a2_exp);
    set_d("algorithm.a3_c", cfg.timescales.a3_c);
    set_d("algorithm.a3_exp", cfg.timescales.a3_exp);
    set_d("algorithm.sharpe_alpha2", cfg.sharpe_alpha2);
    kv.set("algorithm.sharpe_accumulate_only", cfg.sharpe_accumulate_only ? "true" : "false");
    set_d("algorithm.cvar_alpha2", cfg.cvar_alpha2);
    kv.set("algorithm.estimator", cfg.estimator);
    set_l("algorithm.replay_capacity", static_cast<long>(cfg.replay_capacity));
    set_l("algorithm.du_sgd_steps", cfg.du.n_sgd_steps);
    set_l("algorithm.du_samples", cfg.du.n_samples);
    set_d("algorithm.du_step", cfg.du.step);
    set_l("algorithm.max_episode_steps", cfg.max_episode_steps);

    std::string betas, seeds;
    for (std::size_t i = 0; i < cfg.beta_sweep.size(); ++i)
        betas += (i ? "," : "") + format_g17(cfg.beta_sweep[i]);
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
        seeds += (i ? "," : "") + std::to_string(cfg.seeds[i]);
    kv.set("sweep.beta", betas);
    kv.set("sweep.seeds", seeds);

    set_l("rollout.n_steps", cfg.rollout_steps);
    set_l("rollout.n_episodes", cfg.rollout_episodes);
    set_l("rollout.horizon", cfg.rollout_horizon);
    // output.dir is deliberately excluded: the hash identifies the
    // experiment's content, not where its artifacts land.
    return kv;
}

// Grid matrix view of a per-state vector: row 0 is the top row of the maze
// (cells are indexed y * width + x with (0, 0) bottom-left).
std::vector<std::vector<double>> grid_matrix(const GridWorldConfig& g,
                                             const Eigen::VectorXd& per_state) {
    std::vector<std::vector<double>> m(static_cast<std::size_t>(g.height),
                                       std::vector<double>(static_cast<std::size_t>(g.width)));
    for (int y = 0; y < g.height; ++y)
        for (int x = 0; x < g.width; ++x)
            m[static_cast<std::size_t>(g.height - 1 - y)][static_cast<std::size_t>(x)] =
                per_state[g.cell(x, y)];
    return m;
}

}  // namespace

std::string config_hash(const KeyValueConfig& kv) {
    const std::string text = kv.canonical_text();
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%08x", crc32_bytes(text.data(), text.size()));
    return buf;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, int jobs, RunMode mode,
                                bool write_artifacts) {
    cfg.validate();
    const std::size_t nb = cfg.beta_sweep.size();
    const std::size_t ns = cfg.seeds.size();
    ExperimentResult result;
    result.cells.resize(nb * ns);

    // Parallel fill of disjoint slots; cells are pure in (config, beta, seed).
    {
        std::atomic<std::size_t> next{0};
        std::exception_ptr first_error;
        std::mutex error_mutex;
        auto worker = [&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= result.cells.size()) return;
                try {
                    result.cells[i] = run_cell(cfg, cfg.beta_sweep[i / ns], cfg.seeds[i % ns],
                                               mode == RunMode::Full);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        };
        const std::size_t want = std::min<std::size_t>(
            result.cells.size(), static_cast<std::size_t>(jobs > 1 ? jobs : 1));
        if (want <= 1) {
            worker();
        } else {
            std::vector<std::thread> threads;
            for (std::size_t i = 0; i < want; ++i) threads.emplace_back(worker);
            for (auto& th : threads) th.join();
        }
        if (first_error) std::rethrow_exception(first_error);
    }

    if (mode == RunMode::Full) {
        for (std::size_t bi = 0; bi < nb; ++bi) {
            BetaSummary s;
            s.beta = cfg.beta_sweep[bi];
            const RolloutMetrics& first = result.cells[bi * ns].metrics;
            s.occupancy = Eigen::VectorXd::Zero(first.occupancy.size());
            s.visit_counts = Eigen::VectorXd::Zero(first.visit_counts.size());
            s.state_risk = Eigen::VectorXd::Zero(first.state_risk.size());
            s.action_fraction =
                Eigen::MatrixXd::Zero(first.action_fraction.rows(), first.action_fraction.cols());
            for (std::size_t si = 0; si < ns; ++si) {
                const RolloutMetrics& m = result.cells[bi * ns + si].metrics;
                s.mean_return += m.mean_return;
                s.std_return += m.std_return;
                s.occupancy += m.occupancy;
                s.visit_counts += m.visit_counts;
                s.state_risk += m.state_risk;
                s.action_fraction += m.action_fraction;
            }
            const double dn = static_cast<double>(ns);
            s.mean_return /= dn;
            s.std_return /= dn;
            s.occupancy /= dn;
            s.visit_counts /= dn;
            s.state_risk /= dn;
            s.action_fraction /= dn;
            result.summary.push_back(std::move(s));
        }
    }

    if (!write_artifacts) return result;

    namespace fs = std::filesystem;
    fs::create_directories(cfg.output_dir);
    auto path_of = [&](const std::string& name) {
        return (fs::path(cfg.output_dir) / name).string();
    };
    auto record = [&](const std::string& name) { result.artifacts.push_back(name); };

    {
        std::vector<std::vector<double>> rows;
        for (std::size_t bi = 0; bi < nb; ++bi)
            rows.push_back({static_cast<double>(bi), cfg.beta_sweep[bi]});
        write_csv(path_of("betas.csv"), {"beta_index", "beta"}, rows);
        record("betas.csv");
    }

    for (std::size_t bi = 0; bi < nb; ++bi) {
        for (std::size_t si = 0; si < ns; ++si) {
            const CellResult& cell = result.cells[bi * ns + si];
            const std::string tag = "_b" + std::to_string(bi) + "_s" + std::to_string(si);
            write_policy_csv(path_of("policy" + tag + ".csv"), cell.policy);
            record("policy" + tag + ".csv");
            if (!cell.log_rows.empty()) {
                write_csv(path_of("train" + tag + ".csv"), cell.log_header, cell.log_rows);
                record("train" + tag + ".csv");
            }
        }
    }

    if (mode == RunMode::Full) {
        {
            std::vector<std::vector<double>> rows;
            for (std::size_t bi = 0; bi < nb; ++bi)
                for (std::size_t si = 0; si < ns; ++si) {
                    const CellResult& c = result.cells[bi * ns + si];
                    rows.push_back({static_cast<double>(bi), c.beta,
                                    static_cast<double>(c.seed), c.metrics.mean_return,
                                    c.metrics.std_return,
                                    static_cast<double>(c.metrics.n_episodes),
                                    static_cast<double>(c.metrics.total_steps)});
                }
            write_csv(path_of("cells.csv"),
                      {"beta_index", "beta", "seed", "mean_return", "std_return", "n_episodes",
                       "total_steps"},
                      rows);
            record("cells.csv");
        }
        {
            std::vector<std::vector<double>> rows;
            for (std::size_t bi = 0; bi < nb; ++bi)
                rows.push_back({static_cast<double>(bi), result.summary[bi].beta,
                                result.summary[bi].mean_return, result.summary[bi].std_return});
            write_csv(path_of("summary.csv"), {"beta_index", "beta", "mean_return", "std_return"},
                      rows);
            record("summary.csv");
        }
        {
            std::vector<std::vector<double>> rows;
            for (std::size_t bi = 0; bi < nb; ++bi) {
                const BetaSummary& s = result.summary[bi];
                for (int st = 0; st < s.occupancy.size(); ++st)
                    rows.push_back({static_cast<double>(bi), s.beta, static_cast<double>(st),
                                    s.occupancy[st], s.visit_counts[st], s.state_risk[st]});
            }
            write_csv(path_of("occupancy.csv"),
                      {"beta_index", "beta", "state", "occupancy", "visits", "risk"}, rows);
            record("occupancy.csv");
        }
        {
            std::vector<std::vector<double>> rows;
            for (std::size_t bi = 0; bi < nb; ++bi) {
                const BetaSummary& s = result.summary[bi];
                for (int st = 0; st < s.action_fraction.rows(); ++st)
                    for (int a = 0; a < s.action_fraction.cols(); ++a)
                        rows.push_back({static_cast<double>(bi), s.beta, static_cast<double>(st),
                                        static_cast<double>(a), s.action_fraction(st, a)});
            }
            write_csv(path_of("action_fractions.csv"),
                      {"beta_index", "beta", "state", "action", "fraction"}, rows);
            record("action_fractions.csv");
        }
        if (cfg.env_type == "grid") {
            std::vector<std::string> header;
            for (int x = 0; x < cfg.grid.width; ++x) header.push_back("c" + std::to_string(x));
            for (std::size_t bi = 0; bi < nb; ++bi) {
                const std::string suffix = "_b" + std::to_string(bi);
                const auto visits = grid_matrix(cfg.grid, result.summary[bi].visit_counts);
                const auto risk = grid_matrix(cfg.grid, result.summary[bi].state_risk);
                write_csv(path_of("visits" + suffix + ".csv"), header, visits);
                record("visits" + suffix + ".csv");
                write_png(path_of("visits" + suffix + ".png"), render_heatmap(visits));
                record("visits" + suffix + ".png");
                write_csv(path_of("risk" + suffix + ".csv"), header, risk);
                record("risk" + suffix + ".csv");
                write_png(path_of("risk" + suffix + ".png"), render_heatmap(risk));
                record("risk" + suffix + ".png");
            }
        }
    }

    {
        nlohmann::json manifest;
        manifest["config_hash"] = config_hash(effective_kv(cfg));
        manifest["environment"] = cfg.env_type;
        manifest["algorithm"] = cfg.algorithm;
        manifest["mode"] = mode == RunMode::Full ? "full" : "train";
        manifest["betas"] = cfg.beta_sweep;
        manifest["seeds"] = cfg.seeds;
        nlohmann::json files = nlohmann::json::array();
        for (const std::string& name : result.artifacts) {
            std::ifstream is(path_of(name), std::ios::binary);
            std::ostringstream buf;
            buf << is.rdbuf();
            const std::string bytes = buf.str();
            char crc[16];
            std::snprintf(crc, sizeof(crc), "%08x", crc32_bytes(bytes.data(), bytes.size()));
            files.push_back({{"name", name},
                             {"bytes", bytes.size()},
                             {"crc32", crc}});
        }
        manifest["artifacts"] = files;
        std::ofstream os(path_of("manifest.json"), std::ios::binary);
        if (!os) throw ConfigError("experiment: cannot write manifest.json");
        os << manifest.dump(2) << '\n';
        record("manifest.json");
    }

    return result;
}

}  // namespace chaosrl
