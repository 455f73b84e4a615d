// Chaotic mean-variance value-function algorithms.
//
// The Q table stores Q^β(s,a) = Q(s,a) − Q^𝕍(β)(s,a), learned directly from
// the modified reward R − (β/2)(R − R̄(s,a))² in the undiscounted episodic
// case, and from its average-reward recentering in the R-learning variant.
#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "chaosrl/mdp.hpp"
#include "chaosrl/reward_mean.hpp"

namespace chaosrl {

struct QTable {
    Eigen::MatrixXd q;  // (n_states x n_actions)
    double beta = 0.0;

    QTable() = default;
    QTable(int n_states, int n_actions, double beta_)
        : q(Eigen::MatrixXd::Zero(n_states, n_actions)), beta(beta_) {}
};

// Step-size and exploration schedule.  alpha(N) = alpha_c * N^(-alpha_exp)
// with the visit count N(s,a) >= 1; alpha_exp = 0 gives a constant rate.
struct LearningSchedule {
    double alpha_c = 1.0;
    double alpha_exp = 0.5;
    double epsilon = 0.1;
    long n_steps = 500000;

    double alpha(long visit_count) const;
    void validate() const;
};

struct AverageRewardState {
    double rho = 0.0;        // running average-reward estimate
    double sigma_bar = 0.0;  // running average squared-deviation estimate
};

// One episodic update:
//   Q^β(s,a) ← (1−α) Q^β(s,a) + α (r − (β/2)(r − R̄(s,a))² + max_a' Q^β(s',a'))
// with the max taken as 0 when s' is terminal (next_terminal).  The caller
// must have fed (s,a,r) to est *before* this call — the deviation uses the
// freshly updated mean, so a first visit contributes penalty exactly 0.
// Only gamma = 1 is supported (the modified-reward Bellman identity breaks
// under discounting); pass the MDP's gamma for the guard.
void cmv_q_step(QTable& q, const RewardMeanEstimator& est, const Transition& tr,
                bool next_terminal, double alpha, double gamma = 1.0);

struct CmvQResult {
    QTable q;
    RewardMeanEstimator est;
    long episodes = 0;
};

// ε-greedy training for n_steps environment steps.  Episodes restart from
// the MDP's start distribution when a terminal state or the fixed horizon is
// reached; a horizon end is treated as terminal for the bootstrap (the value
// of the continuation is 0 by definition of the fixed-horizon objective).
// Greedy ties break toward the lowest action index.  Deterministic in seed.
CmvQResult train_cmv_q(const TabularMDP& mdp, const LearningSchedule& schedule, double beta,
                       std::uint64_t seed);

// One average-reward update (three coupled recursions):
//   Q^β(s,a) ← (1−α₁) Q^β(s,a)
//              + α₁ (r − ρ − (β/2)((r − R̄(s,a))² − σ̄) + max_a' Q^β(s',a'))
//   ρ  ← (1−α₂) ρ  + α₂ (r + max_a' Q^β(s',a') − max_a' Q^β(s,a'))
//   σ̄ ← (1−α₂) σ̄ + α₂ ((r − R̄(s,a))² + max_a' Q^β(s',a') − max_a' Q^β(s,a'))
// where every max reads the pre-update table and ρ, σ̄ on the right are the
// pre-update values.  As in cmv_q_step, est must already contain (s,a,r).
void cmv_r_step(QTable& q, const RewardMeanEstimator& est, AverageRewardState& avg,
                const Transition& tr, double alpha1, double alpha2);

struct CmvRResult {
    QTable q;
    RewardMeanEstimator est;
    AverageRewardState avg;
};

// ε-greedy continuing-task training (no episode resets beyond the start).
// alpha2_c/alpha2_exp give the faster ρ/σ̄ timescale.
CmvRResult train_cmv_r(const TabularMDP& mdp, const LearningSchedule& schedule, double alpha2_c,
                       double alpha2_exp, double beta, std::uint64_t seed);

// Per-state argmax with ties broken toward the lowest action index.
std::vector<int> greedy_policy(const QTable& q);

// ε-greedy action draw used by the training loops (one u01 draw, plus one
// uniform_int draw when exploring); exposed so reference implementations can
// share the exact stream discipline.
int epsilon_greedy_action(const Eigen::MatrixXd& q, int s, double epsilon, RngStream& rng);

}  // namespace chaosrl
