#include "chaosrl/policy_gradient.hpp"

#include <cmath>

namespace chaosrl {

namespace {

constexpr std::uint64_t kReplayStreamTag = 0x7265706c6179ULL;  // auxiliary draw stream

// Inclusive prefix sums of the per-state action probabilities, kept for the
// duration of one iteration (theta is fixed while the batch is generated).
Eigen::MatrixXd action_cdf(const Eigen::MatrixXd& probs) {
    Eigen::MatrixXd cdf = probs;
    for (Eigen::Index s = 0; s < cdf.rows(); ++s)
        for (Eigen::Index a = 1; a < cdf.cols(); ++a) cdf(s, a) += cdf(s, a - 1);
    return cdf;
}

std::vector<Episode> generate_batch(const TabularMDP& mdp, const Eigen::MatrixXd& cdf, int B,
                                    std::uint64_t seed, long iteration, int max_episode_steps) {
    if (B <= 0) throw NoDataError("batch size must be positive");
    const int na = static_cast<int>(cdf.cols());
    auto pol = [&cdf, na](int s, RngStream& rng) {
        const double u = rng.u01();
        for (int a = 0; a < na; ++a)
            if (u < cdf(s, a)) return a;
        return na - 1;
    };
    const int cap = mdp.horizon > 0 ? mdp.horizon : max_episode_steps;
    std::vector<Episode> eps;
    eps.reserve(static_cast<std::size_t>(B));
    const std::uint64_t base =
        static_cast<std::uint64_t>(iteration) * static_cast<std::uint64_t>(B);
    for (int b = 0; b < B; ++b) {
        RngStream rng(seed, base + static_cast<std::uint64_t>(b));
        eps.push_back(sample_episode(mdp, pol, cap, rng));
    }
    return eps;
}

void feed_estimator(RewardMeanEstimator& est, const std::vector<Episode>& eps,
                    const DistributionalUpdateParams& du, std::uint64_t seed, long iteration) {
    for (const auto& ep : eps)
        for (const auto& tr : ep.steps) est.observe(tr.state, tr.action, tr.reward);
    if (est.mode() == RewardMeanMode::LinearReplay && est.replay_size() > 0) {
        RngStream aux(derive_seed(seed, kReplayStreamTag), static_cast<std::uint64_t>(iteration));
        est.distributional_update(du.n_sgd_steps, du.n_samples, du.step, aux);
    }
}

}  // namespace

SoftmaxPolicy::SoftmaxPolicy(int n_states, int n_actions)
    : theta(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_states) * n_actions)),
      n_states_(n_states),
      n_actions_(n_actions) {
    if (n_states <= 0 || n_actions <= 0)
        throw ConfigError("softmax policy needs positive state/action counts");
}

Eigen::VectorXd SoftmaxPolicy::probs(int s) const {
    Eigen::VectorXd logits = theta.segment(static_cast<Eigen::Index>(s) * n_actions_, n_actions_);
    const double m = logits.maxCoeff();
    Eigen::VectorXd p = (logits.array() - m).exp();
    p /= p.sum();
    return p;
}

Eigen::MatrixXd SoftmaxPolicy::prob_table() const {
    Eigen::MatrixXd tab(n_states_, n_actions_);
    for (int s = 0; s < n_states_; ++s) tab.row(s) = probs(s).transpose();
    return tab;
}

int SoftmaxPolicy::sample(int s, RngStream& rng) const {
    const Eigen::VectorXd p = probs(s);
    return rng.categorical(p);
}

void add_score(Eigen::VectorXd& g, int n_actions, int s, int a, const Eigen::VectorXd& probs,
               double w) {
    const Eigen::Index base = static_cast<Eigen::Index>(s) * n_actions;
    g.segment(base, n_actions) -= w * probs;
    g[base + a] += w;
}

Eigen::VectorXd cmv_episode_gradient(const Episode& ep, const SoftmaxPolicy& policy,
                                     const RewardMeanEstimator& est, double beta, double gamma) {
    const int T = ep.length();
    std::vector<double> v(static_cast<std::size_t>(T));
    double g_r = 0.0, g_p = 0.0;
    for (int t = T - 1; t >= 0; --t) {
        const auto& tr = ep.steps[static_cast<std::size_t>(t)];
        const double dev = tr.reward - est.mean(tr.state, tr.action);
        g_r = tr.reward + gamma * g_r;
        g_p = dev * dev + gamma * gamma * g_p;
        v[static_cast<std::size_t>(t)] = g_r - 0.5 * beta * g_p;
    }
    Eigen::VectorXd g = Eigen::VectorXd::Zero(policy.theta.size());
    for (int t = 0; t < T; ++t) {
        const auto& tr = ep.steps[static_cast<std::size_t>(t)];
        add_score(g, policy.n_actions(), tr.state, tr.action, policy.probs(tr.state),
                  v[static_cast<std::size_t>(t)]);
    }
    return g;
}

Eigen::VectorXd plain_reinforce_episode_gradient(const Episode& ep, const SoftmaxPolicy& policy,
                                                 double gamma) {
    const int T = ep.length();
    std::vector<double> v(static_cast<std::size_t>(T));
    double g_r = 0.0;
    for (int t = T - 1; t >= 0; --t) {
        g_r = ep.steps[static_cast<std::size_t>(t)].reward + gamma * g_r;
        v[static_cast<std::size_t>(t)] = g_r;
    }
    Eigen::VectorXd g = Eigen::VectorXd::Zero(policy.theta.size());
    for (int t = 0; t < T; ++t) {
        const auto& tr = ep.steps[static_cast<std::size_t>(t)];
        add_score(g, policy.n_actions(), tr.state, tr.action, policy.probs(tr.state),
                  v[static_cast<std::size_t>(t)]);
    }
    return g;
}

Eigen::VectorXd penalty_episode_gradient(const Episode& ep, const SoftmaxPolicy& policy,
                                         const RewardMeanEstimator& est, double gamma) {
    const int T = ep.length();
    std::vector<double> v(static_cast<std::size_t>(T));
    double g_p = 0.0;
    for (int t = T - 1; t >= 0; --t) {
        const auto& tr = ep.steps[static_cast<std::size_t>(t)];
        const double dev = tr.reward - est.mean(tr.state, tr.action);
        g_p = dev * dev + gamma * gamma * g_p;
        v[static_cast<std::size_t>(t)] = g_p;
    }
    Eigen::VectorXd g = Eigen::VectorXd::Zero(policy.theta.size());
    for (int t = 0; t < T; ++t) {
        const auto& tr = ep.steps[static_cast<std::size_t>(t)];
        add_score(g, policy.n_actions(), tr.state, tr.action, policy.probs(tr.state),
                  v[static_cast<std::size_t>(t)]);
    }
    return g;
}

GradientEstimate cmv_reinforce_iteration(SoftmaxPolicy& policy, const TabularMDP& mdp,
                                         RewardMeanEstimator& est, int B, double beta,
                                         double gamma, double alpha_n, std::uint64_t seed,
                                         long iteration, const DistributionalUpdateParams& du,
                                         int max_episode_steps) {
    const Eigen::MatrixXd probs = policy.prob_table();
    const Eigen::MatrixXd cdf = action_cdf(probs);
    const auto eps = generate_batch(mdp, cdf, B, seed, iteration, max_episode_steps);
    feed_estimator(est, eps, du, seed, iteration);

    GradientEstimate out;
    out.batch_size = B;
    out.returns.resize(B);
    out.penalties.resize(B);
    Eigen::VectorXd grad_sum = Eigen::VectorXd::Zero(policy.theta.size());
    std::vector<double> v;
    for (int b = 0; b < B; ++b) {
        const Episode& ep = eps[static_cast<std::size_t>(b)];
        const int T = ep.length();
        v.assign(static_cast<std::size_t>(T), 0.0);
        double g_r = 0.0, g_p = 0.0;
        for (int t = T - 1; t >= 0; --t) {
            const auto& tr = ep.steps[static_cast<std::size_t>(t)];
            const double dev = tr.reward - est.mean(tr.state, tr.action);
            g_r = tr.reward + gamma * g_r;
            g_p = dev * dev + gamma * gamma * g_p;
            v[static_cast<std::size_t>(t)] = g_r - 0.5 * beta * g_p;
        }
        out.returns[b] = g_r;       // full-episode discounted return
        out.penalties[b] = g_p;     // full-episode penalty aggregate (relative = absolute at t=0)
        for (int t = 0; t < T; ++t) {
            const auto& tr = ep.steps[static_cast<std::size_t>(t)];
            add_score(grad_sum, policy.n_actions(), tr.state, tr.action,
                      probs.row(tr.state).transpose(), v[static_cast<std::size_t>(t)]);
        }
    }
    out.grad = grad_sum / static_cast<double>(B);
    policy.theta += alpha_n * out.grad;
    return out;
}

GradientEstimate mv_reinforce_iteration(SoftmaxPolicy& policy, const TabularMDP& mdp, int B,
                                        double beta_mv, double gamma, double alpha_n,
                                        std::uint64_t seed, long iteration,
                                        int max_episode_steps) {
    const Eigen::MatrixXd probs = policy.prob_table();
    const Eigen::MatrixXd cdf = action_cdf(probs);
    const auto eps = generate_batch(mdp, cdf, B, seed, iteration, max_episode_steps);

    const Eigen::Index dim = policy.theta.size();
    GradientEstimate out;
    out.batch_size = B;
    out.returns.resize(B);
    out.penalties = Eigen::VectorXd::Zero(B);

    // Pass 1: returns and the reward-to-go mean gradient.
    Eigen::VectorXd mean_sum = Eigen::VectorXd::Zero(dim);
    std::vector<double> v;
    for (int b = 0; b < B; ++b) {
        const Episode& ep = eps[static_cast<std::size_t>(b)];
        const int T = ep.length();
        v.assign(static_cast<std::size_t>(T), 0.0);
        double g_r = 0.0;
        for (int t = T - 1; t >= 0; --t) {
            g_r = ep.steps[static_cast<std::size_t>(t)].reward + gamma * g_r;
            v[static_cast<std::size_t>(t)] = g_r;
        }
        out.returns[b] = g_r;
        for (int t = 0; t < T; ++t) {
            const auto& tr = ep.steps[static_cast<std::size_t>(t)];
            add_score(mean_sum, policy.n_actions(), tr.state, tr.action,
                      probs.row(tr.state).transpose(), v[static_cast<std::size_t>(t)]);
        }
    }
    const Eigen::VectorXd g_mean = mean_sum / static_cast<double>(B);
    const double mu_j = out.returns.mean();

    // Pass 2: likelihood-ratio variance gradient with the optimal baseline.
    // With S_b the episode total score and w_b = V_b − 2 μ_J J_b,
    //   ℓ*_k = Σ w_b S_{b,k}² / Σ S_{b,k}²  and
    //   g_var_k = (Σ w_b S_{b,k} − ℓ*_k Σ S_{b,k}) / B.
    Eigen::VectorXd num = Eigen::VectorXd::Zero(dim), den = Eigen::VectorXd::Zero(dim);
    Eigen::VectorXd wsum = Eigen::VectorXd::Zero(dim), ssum = Eigen::VectorXd::Zero(dim);
    Eigen::VectorXd score(dim);
    for (int b = 0; b < B; ++b) {
        const Episode& ep = eps[static_cast<std::size_t>(b)];
        score.setZero();
        for (const auto& tr : ep.steps)
            add_score(score, policy.n_actions(), tr.state, tr.action,
                      probs.row(tr.state).transpose(), 1.0);
        const double j = out.returns[b];
        const double w = j * j - 2.0 * mu_j * j;  // V_b − 2 μ_J J_b
        const Eigen::ArrayXd s2 = score.array().square();
        num.array() += w * s2;
        den.array() += s2;
        wsum += w * score;
        ssum += score;
    }
    Eigen::VectorXd ell = Eigen::VectorXd::Zero(dim);
    for (Eigen::Index k = 0; k < dim; ++k)
        if (den[k] > 0.0) ell[k] = num[k] / den[k];
    const Eigen::VectorXd g_var =
        (wsum - ell.cwiseProduct(ssum)) / static_cast<double>(B);

    out.grad = g_mean - 0.5 * beta_mv * g_var;
    policy.theta += alpha_n * out.grad;
    return out;
}

double TimescaleSchedule::alpha1(long t) const {
    return a1_exp == 0.0 ? a1_c : a1_c * std::pow(static_cast<double>(t + 1), -a1_exp);
}
double TimescaleSchedule::alpha2(long t) const {
    return a2_exp == 0.0 ? a2_c : a2_c * std::pow(static_cast<double>(t + 1), -a2_exp);
}
double TimescaleSchedule::alpha3(long t) const {
    return a3_exp == 0.0 ? a3_c : a3_c * std::pow(static_cast<double>(t + 1), -a3_exp);
}
void TimescaleSchedule::validate() const {
    if (a1_c <= 0.0 || a2_c <= 0.0 || a3_c <= 0.0)
        throw ConfigError("timescale schedule: step constants must be positive");
    if (a1_exp < 0.0 || a2_exp < 0.0 || a3_exp < 0.0)
        throw ConfigError("timescale schedule: exponents must be nonnegative");
    // Slow-to-fast ordering at t = 1; the asymptotic separation condition is
    // the user's responsibility when exponents differ.
    if (alpha1(1) > alpha2(1) || alpha2(1) > alpha3(1))
        throw ConfigError("timescale schedule: expected alpha1 <= alpha2 <= alpha3");
}

void actor_critic_step_episodic(SoftmaxPolicy& policy, CriticParams& critics,
                                const RewardMeanEstimator& est, const Transition& tr,
                                bool next_terminal, double alpha1, double alpha2, double beta) {
    const double v1s = critics.lambda1[tr.state];
    const double v1n = next_terminal ? 0.0 : critics.lambda1[tr.next_state];
    const double v2s = critics.lambda2[tr.state];
    const double v2n = next_terminal ? 0.0 : critics.lambda2[tr.next_state];
    const double dev = tr.reward - est.mean(tr.state, tr.action);

    const double delta1 = tr.reward + v1n - v1s;
    const double delta2 = dev * dev + v2n - v2s;

    critics.lambda1[tr.state] += alpha2 * delta1;
    critics.lambda2[tr.state] += alpha2 * delta2;

    const Eigen::VectorXd p = policy.probs(tr.state);
    add_score(policy.theta, policy.n_actions(), tr.state, tr.action, p,
              alpha1 * (delta1 - 0.5 * beta * delta2));
}

void actor_critic_step_average(SoftmaxPolicy& policy, CriticParams& critics,
                               const RewardMeanEstimator& est, AverageRewardState& avg,
                               const Transition& tr, double alpha1, double alpha2, double alpha3,
                               double beta) {
    const double dev = tr.reward - est.mean(tr.state, tr.action);
    avg.rho = (1.0 - alpha3) * avg.rho + alpha3 * tr.reward;
    avg.sigma_bar = (1.0 - alpha3) * avg.sigma_bar + alpha3 * dev * dev;

    const double delta1 =
        tr.reward - avg.rho + critics.lambda1[tr.next_state] - critics.lambda1[tr.state];
    const double delta2 = dev * dev - avg.sigma_bar + critics.lambda2[tr.next_state] -
                          critics.lambda2[tr.state];

    critics.lambda1[tr.state] += alpha2 * delta1;
    critics.lambda2[tr.state] += alpha2 * delta2;

    const Eigen::VectorXd p = policy.probs(tr.state);
    add_score(policy.theta, policy.n_actions(), tr.state, tr.action, p,
              alpha1 * (delta1 - 0.5 * beta * delta2));
}

Eigen::VectorXd sharpe_direction(double v, double vv, const Eigen::VectorXd& grad_v,
                                 const Eigen::VectorXd& grad_vv) {
    const double root = std::sqrt(vv);
    return grad_v / root - 0.5 * v / (vv * root) * grad_vv;
}

SharpeReport sharpe_pg_iteration(SoftmaxPolicy& policy, const TabularMDP& mdp,
                                 RewardMeanEstimator& est, int B, double alpha1, double alpha2,
                                 SharpeState& state, std::uint64_t seed, long iteration,
                                 double gamma, double vv_floor, bool accumulate_only,
                                 const DistributionalUpdateParams& du, int max_episode_steps) {
    const Eigen::MatrixXd probs = policy.prob_table();
    const Eigen::MatrixXd cdf = action_cdf(probs);
    const auto eps = generate_batch(mdp, cdf, B, seed, iteration, max_episode_steps);
    feed_estimator(est, eps, du, seed, iteration);

    SharpeReport rep;
    rep.estimate.batch_size = B;
    rep.estimate.returns.resize(B);
    rep.estimate.penalties.resize(B);

    // Absolute-time discounting throughout: γ^t on rewards, γ^{2t} on
    // squared deviations, inside both the batch means and the to-go sums.
    Eigen::VectorXd gv_sum = Eigen::VectorXd::Zero(policy.theta.size());
    Eigen::VectorXd gvv_sum = Eigen::VectorXd::Zero(policy.theta.size());
    std::vector<double> to_go_r, to_go_p;
    for (int b = 0; b < B; ++b) {
        const Episode& ep = eps[static_cast<std::size_t>(b)];
        const int T = ep.length();
        to_go_r.assign(static_cast<std::size_t>(T), 0.0);
        to_go_p.assign(static_cast<std::size_t>(T), 0.0);
        double rel_r = 0.0, rel_p = 0.0;
        for (int t = T - 1; t >= 0; --t) {
            const auto& tr = ep.steps[static_cast<std::size_t>(t)];
            const double dev = tr.reward - est.mean(tr.state, tr.action);
            rel_r = tr.reward + gamma * rel_r;
            rel_p = dev * dev + gamma * gamma * rel_p;
            to_go_r[static_cast<std::size_t>(t)] = rel_r;
            to_go_p[static_cast<std::size_t>(t)] = rel_p;
        }
        rep.estimate.returns[b] = rel_r;
        rep.estimate.penalties[b] = rel_p;
        double w = 1.0, w2 = 1.0;
        for (int t = 0; t < T; ++t) {
            const auto& tr = ep.steps[static_cast<std::size_t>(t)];
            add_score(gv_sum, policy.n_actions(), tr.state, tr.action,
                      probs.row(tr.state).transpose(), w * to_go_r[static_cast<std::size_t>(t)]);
            add_score(gvv_sum, policy.n_actions(), tr.state, tr.action,
                      probs.row(tr.state).transpose(),
                      w2 * to_go_p[static_cast<std::size_t>(t)]);
            w *= gamma;
            w2 *= gamma * gamma;
        }
    }
    const double batch_v = rep.estimate.returns.mean();
    const double batch_vv = rep.estimate.penalties.mean();

    if (accumulate_only) {
        state.v += alpha2 * batch_v;
        state.vv += alpha2 * batch_vv;
        state.initialized = true;
    } else if (!state.initialized) {
        state.v = batch_v;
        state.vv = batch_vv;
        state.initialized = true;
    } else {
        state.v += alpha2 * (batch_v - state.v);
        state.vv += alpha2 * (batch_vv - state.vv);
    }
    rep.v = state.v;
    rep.vv = state.vv;

    if (state.vv > vv_floor) {
        rep.estimate.grad = sharpe_direction(state.v, state.vv, gv_sum / static_cast<double>(B),
                                             gvv_sum / static_cast<double>(B));
        policy.theta += alpha1 * rep.estimate.grad;
    } else {
        rep.estimate.grad = Eigen::VectorXd::Zero(policy.theta.size());
        rep.skipped = true;
    }
    return rep;
}

CvarReport cvar_pg_iteration(SoftmaxPolicy& policy, const TabularMDP& mdp,
                             RewardMeanEstimator& est, int B, double cvar_beta, double alpha1,
                             double alpha2, VarState& var_est, std::uint64_t seed, long iteration,
                             double gamma, const DistributionalUpdateParams& du,
                             int max_episode_steps) {
    if (!(cvar_beta > 0.0) || !(cvar_beta < 1.0))
        throw ConfigError("cvar tail level must lie strictly inside (0, 1)");
    const Eigen::MatrixXd probs = policy.prob_table();
    const Eigen::MatrixXd cdf = action_cdf(probs);
    const auto eps = generate_batch(mdp, cdf, B, seed, iteration, max_episode_steps);
    feed_estimator(est, eps, du, seed, iteration);

    CvarReport rep;
    rep.estimate.batch_size = B;
    rep.estimate.returns.resize(B);
    rep.estimate.penalties.resize(B);

    const double var_old = var_est.var;
    Eigen::VectorXd mean_sum = Eigen::VectorXd::Zero(policy.theta.size());
    Eigen::VectorXd tail_sum = Eigen::VectorXd::Zero(policy.theta.size());
    Eigen::VectorXd score(policy.theta.size());
    std::vector<double> v;
    int n_exceed = 0;
    for (int b = 0; b < B; ++b) {
        const Episode& ep = eps[static_cast<std::size_t>(b)];
        const int T = ep.length();
        v.assign(static_cast<std::size_t>(T), 0.0);
        double g_r = 0.0;
        for (int t = T - 1; t >= 0; --t) {
            g_r = ep.steps[static_cast<std::size_t>(t)].reward + gamma * g_r;
            v[static_cast<std::size_t>(t)] = g_r;
        }
        double z = 0.0, w2 = 1.0;  // signed chaotic aggregate Σ γ^{2t} (R − R̂)
        for (int t = 0; t < T; ++t) {
            const auto& tr = ep.steps[static_cast<std::size_t>(t)];
            z += w2 * (tr.reward - est.mean(tr.state, tr.action));
            w2 *= gamma * gamma;
            add_score(mean_sum, policy.n_actions(), tr.state, tr.action,
                      probs.row(tr.state).transpose(), v[static_cast<std::size_t>(t)]);
        }
        rep.estimate.returns[b] = g_r;
        rep.estimate.penalties[b] = z;
        if (z >= var_old) {
            n_exceed += 1;
            score.setZero();
            for (const auto& tr : ep.steps)
                add_score(score, policy.n_actions(), tr.state, tr.action,
                          probs.row(tr.state).transpose(), 1.0);
            tail_sum += score * (z - var_old);
        }
    }
    rep.exceed_fraction = static_cast<double>(n_exceed) / static_cast<double>(B);

    rep.estimate.grad = (mean_sum - tail_sum) / static_cast<double>(B);
    policy.theta += alpha1 * rep.estimate.grad;
    var_est.var =
        var_old - alpha2 * (1.0 - rep.exceed_fraction / (1.0 - cvar_beta));
    rep.var = var_est.var;
    return rep;
}

}  // namespace chaosrl
