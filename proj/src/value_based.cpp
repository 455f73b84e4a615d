#include "chaosrl/value_based.hpp"

#include <cmath>

namespace chaosrl {

double LearningSchedule::alpha(long visit_count) const {
    if (alpha_exp == 0.0) return alpha_c;
    return alpha_c * std::pow(static_cast<double>(visit_count), -alpha_exp);
}

void LearningSchedule::validate() const {
    if (!(alpha_c > 0.0) || alpha_c > 1.0)
        throw ConfigError("schedule: alpha_c must lie in (0, 1]");
    if (alpha_exp < 0.0) throw ConfigError("schedule: alpha exponent must be nonnegative");
    if (epsilon < 0.0 || epsilon > 1.0) throw ConfigError("schedule: epsilon outside [0, 1]");
    if (n_steps <= 0) throw ConfigError("schedule: n_steps must be positive");
}

int epsilon_greedy_action(const Eigen::MatrixXd& q, int s, double epsilon, RngStream& rng) {
    const int na = static_cast<int>(q.cols());
    if (rng.u01() < epsilon) return rng.uniform_int(na);
    int best = 0;
    for (int a = 1; a < na; ++a)
        if (q(s, a) > q(s, best)) best = a;
    return best;
}

void cmv_q_step(QTable& q, const RewardMeanEstimator& est, const Transition& tr,
                bool next_terminal, double alpha, double gamma) {
    if (gamma != 1.0)
        throw UnsupportedModeError(
            "chaotic mean-variance Q-learning is defined for gamma = 1 only");
    const double dev = tr.reward - est.mean(tr.state, tr.action);
    const double penalty = 0.5 * q.beta * dev * dev;
    const double max_next = next_terminal ? 0.0 : q.q.row(tr.next_state).maxCoeff();
    const double target = tr.reward - penalty + max_next;
    q.q(tr.state, tr.action) = (1.0 - alpha) * q.q(tr.state, tr.action) + alpha * target;
}

CmvQResult train_cmv_q(const TabularMDP& mdp, const LearningSchedule& schedule, double beta,
                       std::uint64_t seed) {
    schedule.validate();
    if (mdp.gamma != 1.0)
        throw UnsupportedModeError(
            "chaotic mean-variance Q-learning is defined for gamma = 1 only");
    CmvQResult out{QTable(mdp.n_states, mdp.n_actions, beta),
                   RewardMeanEstimator(mdp.n_states, mdp.n_actions), 0};
    RngStream rng(seed);

    int s = mdp.sample_start(rng);
    int t_in_episode = 0;
    for (long step = 0; step < schedule.n_steps; ++step) {
        if (mdp.is_terminal(s) || (mdp.horizon > 0 && t_in_episode >= mdp.horizon)) {
            s = mdp.sample_start(rng);
            t_in_episode = 0;
            out.episodes += 1;
        }
        const int a = epsilon_greedy_action(out.q.q, s, schedule.epsilon, rng);
        auto [s_next, r] = mdp.step(s, a, rng);
        out.est.observe(s, a, r);
        const bool episode_ends = mdp.is_terminal(s_next) ||
                                  (mdp.horizon > 0 && t_in_episode + 1 >= mdp.horizon);
        cmv_q_step(out.q, out.est, {s, a, r, s_next}, episode_ends,
                   schedule.alpha(out.est.count(s, a)), mdp.gamma);
        s = s_next;
        t_in_episode += 1;
    }
    return out;
}

void cmv_r_step(QTable& q, const RewardMeanEstimator& est, AverageRewardState& avg,
                const Transition& tr, double alpha1, double alpha2) {
    const double dev = tr.reward - est.mean(tr.state, tr.action);
    const double dev2 = dev * dev;
    const double max_next = q.q.row(tr.next_state).maxCoeff();
    const double max_cur = q.q.row(tr.state).maxCoeff();
    const double rho_old = avg.rho;
    const double sigma_old = avg.sigma_bar;

    const double target = tr.reward - rho_old - 0.5 * q.beta * (dev2 - sigma_old) + max_next;
    q.q(tr.state, tr.action) = (1.0 - alpha1) * q.q(tr.state, tr.action) + alpha1 * target;

    avg.rho = (1.0 - alpha2) * rho_old + alpha2 * (tr.reward + max_next - max_cur);
    avg.sigma_bar = (1.0 - alpha2) * sigma_old + alpha2 * (dev2 + max_next - max_cur);
}

CmvRResult train_cmv_r(const TabularMDP& mdp, const LearningSchedule& schedule, double alpha2_c,
                       double alpha2_exp, double beta, std::uint64_t seed) {
    schedule.validate();
    CmvRResult out{QTable(mdp.n_states, mdp.n_actions, beta),
                   RewardMeanEstimator(mdp.n_states, mdp.n_actions), {}};
    RngStream rng(seed);

    int s = mdp.sample_start(rng);
    for (long step = 0; step < schedule.n_steps; ++step) {
        const int a = epsilon_greedy_action(out.q.q, s, schedule.epsilon, rng);
        auto [s_next, r] = mdp.step(s, a, rng);
        out.est.observe(s, a, r);
        const long n = out.est.count(s, a);
        const double a1 = schedule.alpha(n);
        const double a2 = alpha2_exp == 0.0
                              ? alpha2_c
                              : alpha2_c * std::pow(static_cast<double>(step + 1), -alpha2_exp);
        cmv_r_step(out.q, out.est, out.avg, {s, a, r, s_next}, a1, a2);
        s = s_next;
    }
    return out;
}

std::vector<int> greedy_policy(const QTable& q) {
    std::vector<int> pi(static_cast<std::size_t>(q.q.rows()), 0);
    for (Eigen::Index s = 0; s < q.q.rows(); ++s) {
        int best = 0;
        for (Eigen::Index a = 1; a < q.q.cols(); ++a)
            if (q.q(s, a) > q.q(s, best)) best = static_cast<int>(a);
        pi[static_cast<std::size_t>(s)] = best;
    }
    return pi;
}

}  // namespace chaosrl
