#include "chaosrl/reward_mean.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <string>

namespace chaosrl {

RewardMeanEstimator::RewardMeanEstimator(int n_states, int n_actions, RewardMeanMode mode,
                                         std::size_t replay_capacity)
    : n_states_(n_states),
      n_actions_(n_actions),
      mode_(mode),
      mean_(Eigen::MatrixXd::Zero(n_states, n_actions)),
      counts_(static_cast<std::size_t>(n_states) * n_actions, 0),
      weights_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_states) * n_actions)),
      capacity_(replay_capacity) {
    if (n_states <= 0 || n_actions <= 0)
        throw ConfigError("estimator needs positive state/action counts");
    if (mode == RewardMeanMode::LinearReplay && capacity_ == 0)
        throw ConfigError("replay capacity must be positive");
}

void RewardMeanEstimator::check_range(int s, int a) const {
    if (s < 0 || s >= n_states_ || a < 0 || a >= n_actions_)
        throw InvalidActionError("estimator index (" + std::to_string(s) + ", " +
                                 std::to_string(a) + ") out of range");
}

void RewardMeanEstimator::observe(int s, int a, double r) {
    check_range(s, a);
    if (mode_ == RewardMeanMode::Tabular) {
        long& n = counts_[static_cast<std::size_t>(idx(s, a))];
        n += 1;
        mean_(s, a) += (r - mean_(s, a)) / static_cast<double>(n);
    } else {
        if (replay_.size() == capacity_) replay_.pop_front();
        replay_.push_back({s, a, r});
    }
}

double RewardMeanEstimator::mean(int s, int a) const {
    check_range(s, a);
    if (mode_ == RewardMeanMode::Tabular) {
        if (counts_[static_cast<std::size_t>(idx(s, a))] == 0)
            throw MissingEstimateError("no reward observations for (s=" + std::to_string(s) +
                                       ", a=" + std::to_string(a) + ")");
        return mean_(s, a);
    }
    return weights_[idx(s, a)];
}

double RewardMeanEstimator::mean_or(int s, int a, double fallback) const {
    check_range(s, a);
    if (mode_ == RewardMeanMode::Tabular && counts_[static_cast<std::size_t>(idx(s, a))] == 0)
        return fallback;
    return mode_ == RewardMeanMode::Tabular ? mean_(s, a) : weights_[idx(s, a)];
}

long RewardMeanEstimator::count(int s, int a) const {
    check_range(s, a);
    return counts_[static_cast<std::size_t>(idx(s, a))];
}

void RewardMeanEstimator::distributional_update(int n_sgd_steps, int n_samples, double step,
                                                RngStream& rng) {
    if (mode_ != RewardMeanMode::LinearReplay)
        throw UnsupportedModeError("distributional_update needs linear-replay mode");
    if (replay_.empty()) throw NoDataError("replay buffer is empty");

    // Minibatch without replacement (Floyd's subset sampling), then merge
    // duplicate (s, a) pairs by averaging their rewards.  Drawing without
    // replacement makes the deduplicated least-squares target exact whenever
    // n_samples covers the buffer.
    const int buf = static_cast<int>(replay_.size());
    const int k = std::min(n_samples, buf);
    std::set<int> chosen;
    for (int j = buf - k; j < buf; ++j) {
        const int t = rng.uniform_int(j + 1);
        if (!chosen.insert(t).second) chosen.insert(j);
    }
    std::map<std::pair<int, int>, std::pair<double, long>> merged;
    for (int i : chosen) {
        const Tuple& t = replay_[static_cast<std::size_t>(i)];
        auto& acc = merged[{t.s, t.a}];
        acc.first += t.r;
        acc.second += 1;
    }

    // Full deterministic passes (sorted by (s, a)) of SGD on (R̂ - R̃)^2;
    // gradient per sample is 2 (R̂ - R̃) on the pair's one-hot coordinate.
    for (int k = 0; k < n_sgd_steps; ++k) {
        for (const auto& [sa, acc] : merged) {
            const double target = acc.first / static_cast<double>(acc.second);
            const int i = idx(sa.first, sa.second);
            weights_[i] -= step * 2.0 * (weights_[i] - target);
        }
    }
}

Eigen::MatrixXd RewardMeanEstimator::mean_table() const {
    if (mode_ == RewardMeanMode::Tabular) return mean_;
    Eigen::MatrixXd m(n_states_, n_actions_);
    for (int s = 0; s < n_states_; ++s)
        for (int a = 0; a < n_actions_; ++a) m(s, a) = weights_[idx(s, a)];
    return m;
}

RewardMeanEstimator RewardMeanEstimator::exact(
    int n_states, int n_actions, const std::function<double(int, int)>& mean_fn) {
    RewardMeanEstimator est(n_states, n_actions, RewardMeanMode::Tabular);
    for (int s = 0; s < n_states; ++s)
        for (int a = 0; a < n_actions; ++a) {
            est.mean_(s, a) = mean_fn(s, a);
            est.counts_[static_cast<std::size_t>(est.idx(s, a))] = 1;
        }
    return est;
}

}  // namespace chaosrl
