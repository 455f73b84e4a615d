// Conditional reward-mean estimator R̄(s, a).
//
// Two modes:
//  * tabular      — exact running means with per-pair visit counts,
//  * linear replay — one-hot linear weights fitted by SGD on minibatches
//                    drawn from a bounded FIFO replay buffer.
#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <vector>

#include <Eigen/Core>

#include "chaosrl/common.hpp"
#include "chaosrl/rng.hpp"

namespace chaosrl {

enum class RewardMeanMode { Tabular, LinearReplay };

class RewardMeanEstimator {
  public:
    RewardMeanEstimator(int n_states, int n_actions, RewardMeanMode mode = RewardMeanMode::Tabular,
                        std::size_t replay_capacity = 100000);

    // Feed one observed transition reward.  Tabular mode applies the running
    // mean N += 1; R̄ += (R - R̄) / N.  Replay mode appends to the FIFO buffer
    // (evicting the oldest tuple at capacity) and leaves weights untouched.
    void observe(int s, int a, double r);

    // Current estimate of E[R | s, a].  Tabular mode throws
    // MissingEstimateError for a never-visited pair; replay mode returns the
    // linear value (0 before any fitting).
    double mean(int s, int a) const;

    // mean() with a fallback for unvisited pairs, for penalty terms that
    // treat "no data yet" as deviation 0 (i.e. R̄ := R on first visit).
    double mean_or(int s, int a, double fallback) const;

    long count(int s, int a) const;
    bool visited(int s, int a) const { return count(s, a) > 0; }

    // Replay-mode fit: draw a minibatch of min(n_samples, buffer) distinct
    // tuples uniformly from the buffer, merge duplicates of the same (s, a)
    // by averaging their rewards, then run n_sgd_steps full passes of SGD on
    // the squared error (R̂(s,a) - R̃)^2 with the given step size.  Throws
    // NoDataError on an empty buffer and UnsupportedModeError in tabular mode.
    void distributional_update(int n_sgd_steps, int n_samples, double step, RngStream& rng);

    RewardMeanMode mode() const { return mode_; }
    int n_states() const { return n_states_; }
    int n_actions() const { return n_actions_; }
    std::size_t replay_size() const { return replay_.size(); }
    const Eigen::VectorXd& weights() const { return weights_; }

    // Dump / load as a dense (n_states x n_actions) table. Counts are only
    // meaningful in tabular mode.
    Eigen::MatrixXd mean_table() const;

    // Oracle-seeded estimator holding exact conditional means (all pairs
    // marked visited once).  Used by diagnostics that need the true R̄.
    static RewardMeanEstimator exact(int n_states, int n_actions,
                                     const std::function<double(int, int)>& mean_fn);

  private:
    int idx(int s, int a) const { return s * n_actions_ + a; }
    void check_range(int s, int a) const;

    int n_states_, n_actions_;
    RewardMeanMode mode_;
    Eigen::MatrixXd mean_;                    // tabular running means
    std::vector<long> counts_;                // tabular visit counts
    Eigen::VectorXd weights_;                 // replay-mode one-hot weights
    std::size_t capacity_;
    struct Tuple {
        int s, a;
        double r;
    };
    std::deque<Tuple> replay_;
};

}  // namespace chaosrl
