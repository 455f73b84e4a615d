// Shared test support: independent reference implementations (risk-neutral
// Q-learning / REINFORCE / actor-critic mirrors, value iteration on
// mean-adjusted rewards), small hand-built MDPs, and basic statistics.
//
// The mirrors reproduce the library's RNG consumption order exactly so that
// zero-risk-weight runs can be compared bit for bit.
#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "chaosrl/environments.hpp"
#include "chaosrl/mdp.hpp"
#include "chaosrl/policy_gradient.hpp"
#include "chaosrl/reward_mean.hpp"
#include "chaosrl/rng.hpp"
#include "chaosrl/value_based.hpp"

namespace testsupport {

using namespace chaosrl;

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

struct SampleStats {
    double mean = 0.0;
    double var = 0.0;  // unbiased sample variance
    double se = 0.0;   // standard error of the mean
    long n = 0;
};

inline SampleStats sample_stats(const std::vector<double>& xs) {
    SampleStats s;
    s.n = static_cast<long>(xs.size());
    if (s.n == 0) return s;
    for (double x : xs) s.mean += x;
    s.mean /= static_cast<double>(s.n);
    if (s.n > 1) {
        for (double x : xs) s.var += (x - s.mean) * (x - s.mean);
        s.var /= static_cast<double>(s.n - 1);
        s.se = std::sqrt(s.var / static_cast<double>(s.n));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Small hand-built MDPs
// ---------------------------------------------------------------------------

// Single absorbing state (episodes have length 0).
inline TabularMDP absorbing_mdp() {
    TabularMDP m;
    m.n_states = 1;
    m.n_actions = 1;
    m.gamma = 1.0;
    m.reward_bound = 0.0;
    m.transition = Eigen::MatrixXd::Ones(1, 1);
    m.start_dist = Eigen::VectorXd::Ones(1);
    m.terminal = {1};
    m.reward_sampler = [](int, int, int, RngStream&) { return 0.0; };
    m.analytic_mean = [](int, int) { return 0.0; };
    m.analytic_var = [](int, int) { return 0.0; };
    m.validate();
    return m;
}

// Two non-terminal states, two actions, single-step horizon, uniform start,
// uniform next state.  Deterministic reward r(s,a) = base(s) + gain(a), with
// optional +/- noise_scale Rademacher noise on action 1.
inline TabularMDP bandit2_mdp(double noise_scale = 0.0) {
    TabularMDP m;
    m.n_states = 2;
    m.n_actions = 2;
    m.gamma = 1.0;
    m.horizon = 1;
    m.reward_bound = 4.0 + noise_scale;
    m.transition = Eigen::MatrixXd::Constant(4, 2, 0.5);
    m.start_dist = Eigen::VectorXd::Constant(2, 0.5);
    m.terminal = {0, 0};
    m.reward_sampler = [noise_scale](int s, int a, int, RngStream& rng) {
        double r = (s == 0 ? 1.0 : 3.0) + (a == 0 ? 0.0 : 0.5);
        if (a == 1 && noise_scale != 0.0) r += noise_scale * (rng.u01() < 0.5 ? -1.0 : 1.0);
        return r;
    };
    m.analytic_mean = [](int s, int a) {
        return (s == 0 ? 1.0 : 3.0) + (a == 0 ? 0.0 : 0.5);
    };
    m.analytic_var = [noise_scale](int, int a) {
        return a == 1 ? noise_scale * noise_scale : 0.0;
    };
    m.validate();
    return m;
}

// Three states with state 2 terminal, two actions, deterministic rewards.
// Action 0 advances (0 -> 1 -> 2); action 1 jumps from 0 straight to 2 with
// probability 0.5 (else stays), and from 1 behaves like action 0.  Episode
// length <= 3 under the cap used in tests.
inline TabularMDP chain3_mdp() {
    TabularMDP m;
    m.n_states = 3;
    m.n_actions = 2;
    m.gamma = 1.0;
    m.reward_bound = 3.0;
    m.transition = Eigen::MatrixXd::Zero(6, 3);
    // (s=0,a=0) -> 1; (s=0,a=1) -> {0 w.p. .5, 2 w.p. .5}
    m.transition(0, 1) = 1.0;
    m.transition(1, 0) = 0.5;
    m.transition(1, 2) = 0.5;
    // (s=1,a=0) -> 2; (s=1,a=1) -> 2
    m.transition(2, 2) = 1.0;
    m.transition(3, 2) = 1.0;
    // terminal rows (never sampled)
    m.transition(4, 2) = 1.0;
    m.transition(5, 2) = 1.0;
    m.start_dist = Eigen::VectorXd::Zero(3);
    m.start_dist[0] = 1.0;
    m.terminal = {0, 0, 1};
    m.reward_sampler = [](int s, int a, int, RngStream&) {
        return (s == 0 ? 1.0 : -0.5) + (a == 0 ? 0.0 : 2.0);
    };
    m.analytic_mean = [](int s, int a) {
        return (s == 0 ? 1.0 : -0.5) + (a == 0 ? 0.0 : 2.0);
    };
    m.analytic_var = [](int, int) { return 0.0; };
    m.validate();
    return m;
}

// Single continuing state (horizon metadata only satisfies validation; the
// average-reward loops never reset).  Reward r(a) = c + a * delta.
inline TabularMDP single_state_mdp(double c, double delta = 0.0, int n_actions = 1) {
    TabularMDP m;
    m.n_states = 1;
    m.n_actions = n_actions;
    m.gamma = 1.0;
    m.horizon = 1;
    m.reward_bound = std::abs(c) + std::abs(delta) * n_actions;
    m.transition = Eigen::MatrixXd::Ones(n_actions, 1);
    m.start_dist = Eigen::VectorXd::Ones(1);
    m.terminal = {0};
    m.reward_sampler = [c, delta](int, int a, int, RngStream&) { return c + a * delta; };
    m.analytic_mean = [c, delta](int, int a) { return c + a * delta; };
    m.analytic_var = [](int, int) { return 0.0; };
    m.validate();
    return m;
}

// ---------------------------------------------------------------------------
// Reference value-based implementations (risk-neutral)
// ---------------------------------------------------------------------------

// Standard Q-learning mirroring train_cmv_q's control flow and RNG draws
// exactly (reset draw, epsilon-greedy draws, environment step draws), with
// the plain target r + max_a' Q(s',a').
inline Eigen::MatrixXd reference_q_learning(const TabularMDP& mdp,
                                            const LearningSchedule& schedule,
                                            std::uint64_t seed) {
    Eigen::MatrixXd q = Eigen::MatrixXd::Zero(mdp.n_states, mdp.n_actions);
    std::vector<long> counts(static_cast<std::size_t>(mdp.n_states) * mdp.n_actions, 0);
    RngStream rng(seed);
    int s = mdp.sample_start(rng);
    int t_in_episode = 0;
    for (long step = 0; step < schedule.n_steps; ++step) {
        if (mdp.is_terminal(s) || (mdp.horizon > 0 && t_in_episode >= mdp.horizon)) {
            s = mdp.sample_start(rng);
            t_in_episode = 0;
        }
        const int a = epsilon_greedy_action(q, s, schedule.epsilon, rng);
        auto [s_next, r] = mdp.step(s, a, rng);
        long& n = counts[static_cast<std::size_t>(mdp.row(s, a))];
        n += 1;
        const double alpha = schedule.alpha(n);
        const bool episode_ends = mdp.is_terminal(s_next) ||
                                  (mdp.horizon > 0 && t_in_episode + 1 >= mdp.horizon);
        const double max_next = episode_ends ? 0.0 : q.row(s_next).maxCoeff();
        q(s, a) = (1.0 - alpha) * q(s, a) + alpha * (r + max_next);
        s = s_next;
        t_in_episode += 1;
    }
    return q;
}

// Classical R-learning (average reward) mirroring train_cmv_r's draws.
struct RLearningRef {
    Eigen::MatrixXd q;
    double rho = 0.0;
};

inline RLearningRef reference_r_learning(const TabularMDP& mdp, const LearningSchedule& schedule,
                                         double alpha2_c, double alpha2_exp,
                                         std::uint64_t seed) {
    RLearningRef out;
    out.q = Eigen::MatrixXd::Zero(mdp.n_states, mdp.n_actions);
    std::vector<long> counts(static_cast<std::size_t>(mdp.n_states) * mdp.n_actions, 0);
    RngStream rng(seed);
    int s = mdp.sample_start(rng);
    for (long step = 0; step < schedule.n_steps; ++step) {
        const int a = epsilon_greedy_action(out.q, s, schedule.epsilon, rng);
        auto [s_next, r] = mdp.step(s, a, rng);
        long& n = counts[static_cast<std::size_t>(mdp.row(s, a))];
        n += 1;
        const double a1 = schedule.alpha(n);
        const double a2 = alpha2_exp == 0.0
                              ? alpha2_c
                              : alpha2_c * std::pow(static_cast<double>(step + 1), -alpha2_exp);
        const double max_next = out.q.row(s_next).maxCoeff();
        const double max_cur = out.q.row(s).maxCoeff();
        const double rho_old = out.rho;
        out.q(s, a) =
            (1.0 - a1) * out.q(s, a) + a1 * (r - rho_old + max_next);
        out.rho = (1.0 - a2) * rho_old + a2 * (r + max_next - max_cur);
        s = s_next;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reference policy-gradient implementations (risk-neutral)
// ---------------------------------------------------------------------------

// Plain REINFORCE iteration mirroring cmv_reinforce_iteration's batch
// generation (derived per-episode streams, cached action CDFs) and gradient
// accumulation order.
inline Eigen::VectorXd reference_reinforce_iteration(SoftmaxPolicy& policy,
                                                     const TabularMDP& mdp, int B, double gamma,
                                                     double alpha_n, std::uint64_t seed,
                                                     long iteration, int max_episode_steps) {
    const Eigen::MatrixXd probs = policy.prob_table();
    Eigen::MatrixXd cdf = probs;
    for (Eigen::Index s = 0; s < cdf.rows(); ++s)
        for (Eigen::Index a = 1; a < cdf.cols(); ++a) cdf(s, a) += cdf(s, a - 1);
    const int na = static_cast<int>(cdf.cols());
    auto pol = [&cdf, na](int s, RngStream& rng) {
        const double u = rng.u01();
        for (int a = 0; a < na; ++a)
            if (u < cdf(s, a)) return a;
        return na - 1;
    };
    const int cap = mdp.horizon > 0 ? mdp.horizon : max_episode_steps;
    const std::uint64_t base =
        static_cast<std::uint64_t>(iteration) * static_cast<std::uint64_t>(B);

    Eigen::VectorXd grad_sum = Eigen::VectorXd::Zero(policy.theta.size());
    std::vector<double> v;
    for (int b = 0; b < B; ++b) {
        RngStream rng(seed, base + static_cast<std::uint64_t>(b));
        const Episode ep = sample_episode(mdp, pol, cap, rng);
        const int T = ep.length();
        v.assign(static_cast<std::size_t>(T), 0.0);
        double g_r = 0.0;
        for (int t = T - 1; t >= 0; --t) {
            g_r = ep.steps[static_cast<std::size_t>(t)].reward + gamma * g_r;
            v[static_cast<std::size_t>(t)] = g_r;
        }
        for (int t = 0; t < T; ++t) {
            const auto& tr = ep.steps[static_cast<std::size_t>(t)];
            add_score(grad_sum, na, tr.state, tr.action, probs.row(tr.state).transpose(),
                      v[static_cast<std::size_t>(t)]);
        }
    }
    const Eigen::VectorXd grad = grad_sum / static_cast<double>(B);
    policy.theta += alpha_n * grad;
    return grad;
}

// Standard TD advantage actor-critic step (episodic), the risk-neutral
// counterpart of actor_critic_step_episodic.
inline void reference_ac_episodic(SoftmaxPolicy& policy, Eigen::VectorXd& v_critic,
                                  const Transition& tr, bool next_terminal, double alpha1,
                                  double alpha2) {
    const double v_s = v_critic[tr.state];
    const double v_n = next_terminal ? 0.0 : v_critic[tr.next_state];
    const double delta = tr.reward + v_n - v_s;
    v_critic[tr.state] += alpha2 * delta;
    const Eigen::VectorXd p = policy.probs(tr.state);
    add_score(policy.theta, policy.n_actions(), tr.state, tr.action, p, alpha1 * delta);
}

// Standard average-reward actor-critic step, risk-neutral counterpart of
// actor_critic_step_average (gain updated first on the fastest timescale).
inline void reference_ac_average(SoftmaxPolicy& policy, Eigen::VectorXd& v_critic, double& rho,
                                 const Transition& tr, double alpha1, double alpha2,
                                 double alpha3) {
    rho = (1.0 - alpha3) * rho + alpha3 * tr.reward;
    const double delta = tr.reward - rho + v_critic[tr.next_state] - v_critic[tr.state];
    v_critic[tr.state] += alpha2 * delta;
    const Eigen::VectorXd p = policy.probs(tr.state);
    add_score(policy.theta, policy.n_actions(), tr.state, tr.action, p, alpha1 * delta);
}

// ---------------------------------------------------------------------------
// Value iteration on mean-adjusted rewards
// ---------------------------------------------------------------------------

// Deterministic-shift reward used by both value-iteration oracles:
// E[R | s,a] - (beta/2) Var[R | s,a], from the MDP's analytic moments.
inline Eigen::MatrixXd adjusted_mean_rewards(const TabularMDP& mdp, double beta) {
    Eigen::MatrixXd r(mdp.n_states, mdp.n_actions);
    for (int s = 0; s < mdp.n_states; ++s)
        for (int a = 0; a < mdp.n_actions; ++a)
            r(s, a) = mdp.analytic_mean(s, a) - 0.5 * beta * mdp.analytic_var(s, a);
    return r;
}

// Fixed-horizon backward induction.  Returns the greedy action per state at
// every stage; `consistent` is true when the greedy choice is stage-invariant
// (then greedy[s] is the unique optimal stationary policy's action).
struct ViResult {
    Eigen::MatrixXd q0;       // stage-0 action values
    std::vector<int> greedy;  // stage-0 greedy actions (lowest-index ties)
    bool consistent = true;
};

inline ViResult finite_horizon_vi(const TabularMDP& mdp, double beta) {
    const Eigen::MatrixXd rmod = adjusted_mean_rewards(mdp, beta);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(mdp.n_states);
    ViResult out;
    std::vector<int> prev_greedy;
    for (int stage = mdp.horizon - 1; stage >= 0; --stage) {
        Eigen::MatrixXd q(mdp.n_states, mdp.n_actions);
        Eigen::VectorXd v_new(mdp.n_states);
        std::vector<int> greedy(static_cast<std::size_t>(mdp.n_states), 0);
        for (int s = 0; s < mdp.n_states; ++s) {
            for (int a = 0; a < mdp.n_actions; ++a)
                q(s, a) = mdp.is_terminal(s)
                              ? 0.0
                              : rmod(s, a) + mdp.transition.row(mdp.row(s, a)).dot(v);
            int best = 0;
            for (int a = 1; a < mdp.n_actions; ++a)
                if (q(s, a) > q(s, best)) best = a;
            greedy[static_cast<std::size_t>(s)] = best;
            v_new[s] = mdp.is_terminal(s) ? 0.0 : q(s, best);
        }
        if (!prev_greedy.empty() && greedy != prev_greedy) out.consistent = false;
        prev_greedy = greedy;
        v = v_new;
        out.q0 = q;
        out.greedy = greedy;
    }
    return out;
}

// Fixed-point value iteration for terminal-state episodic MDPs (gamma = 1,
// proper under the default policies: negative step rewards make endless
// wandering strictly worse).  Iterates until the sup-norm change is below
// tol.
inline ViResult episodic_vi(const TabularMDP& mdp, double beta, double tol = 1e-12,
                            int max_iter = 1000000) {
    const Eigen::MatrixXd rmod = adjusted_mean_rewards(mdp, beta);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(mdp.n_states);
    Eigen::MatrixXd q = Eigen::MatrixXd::Zero(mdp.n_states, mdp.n_actions);
    for (int it = 0; it < max_iter; ++it) {
        double delta = 0.0;
        for (int s = 0; s < mdp.n_states; ++s) {
            if (mdp.is_terminal(s)) continue;
            double best = -1e300;
            for (int a = 0; a < mdp.n_actions; ++a) {
                q(s, a) = rmod(s, a) + mdp.transition.row(mdp.row(s, a)).dot(v);
                best = std::max(best, q(s, a));
            }
            delta = std::max(delta, std::abs(best - v[s]));
            v[s] = best;
        }
        if (delta < tol) break;
    }
    ViResult out;
    out.q0 = q;
    out.greedy.assign(static_cast<std::size_t>(mdp.n_states), 0);
    for (int s = 0; s < mdp.n_states; ++s) {
        int best = 0;
        for (int a = 1; a < mdp.n_actions; ++a)
            if (q(s, a) > q(s, best)) best = a;
        out.greedy[static_cast<std::size_t>(s)] = best;
    }
    return out;
}

}  // namespace testsupport
