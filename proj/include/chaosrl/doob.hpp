// Doob decomposition of the discounted cumulative reward.
//
// Along a trajectory, the discounted return splits exactly into
//
//   sum_t gamma^t R_{t+1}  =  start_value                      (E[return | s_0])
//                           + sum_t gamma^t (R̄(s_t,a_t) - m_t) (predictable part)
//                           + sum_t gamma^t (R_{t+1} - R̄(s_t,a_t)) (chaotic part)
//
// where m_t = E[R_{t+1} | s_0] are start-conditioned per-step mean rewards
// and start_value = sum_t gamma^t m_t.  The chaotic part is a martingale; its
// per-trajectory quadratic variation uses single-sample squared deviations
// sum_t gamma^{2t} (R_{t+1} - R̄(s_t,a_t))^2.
#pragma once

#include <vector>

#include "chaosrl/mdp.hpp"
#include "chaosrl/reward_mean.hpp"

namespace chaosrl {

struct DoobDecomposition {
    double conditional_start_value = 0.0;  // caller's estimate of E[return | s_0]
    std::vector<double> predictable;       // per-step predictable increments
    std::vector<double> chaotic;           // per-step chaotic increments
    double quadratic_variation = 0.0;      // sum_t gamma^{2t} (R - R̄)^2

    double predictable_total() const;
    double chaotic_total() const;
};

// Decompose one episode.  step_means[t] must estimate E[R_{t+1} | s_0] under
// the sampling policy and start_value their discounted sum; when both come
// from the same data (e.g. Monte-Carlo averages over replicated episodes) the
// reconstruction start_value + predictable_total + chaotic_total equals the
// episode's discounted return to working precision.  Querying R̄ at an
// unvisited pair raises MissingEstimateError; a step_means length shorter
// than the episode raises ConfigError.
DoobDecomposition doob_decompose(const Episode& ep, const RewardMeanEstimator& est, double gamma,
                                 double start_value, const std::vector<double>& step_means);

// Realized quadratic variation of the chaotic part alone.
double chaotic_quadratic_variation(const Episode& ep, const RewardMeanEstimator& est,
                                   double gamma);

}  // namespace chaosrl
