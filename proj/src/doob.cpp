#include "chaosrl/doob.hpp"

#include <string>

namespace chaosrl {

double DoobDecomposition::predictable_total() const {
    double s = 0.0;
    for (double v : predictable) s += v;
    return s;
}

double DoobDecomposition::chaotic_total() const {
    double s = 0.0;
    for (double v : chaotic) s += v;
    return s;
}

DoobDecomposition doob_decompose(const Episode& ep, const RewardMeanEstimator& est, double gamma,
                                 double start_value, const std::vector<double>& step_means) {
    if (step_means.size() < ep.steps.size())
        throw ConfigError("step_means shorter than episode (" +
                          std::to_string(step_means.size()) + " < " +
                          std::to_string(ep.steps.size()) + ")");
    DoobDecomposition d;
    d.conditional_start_value = start_value;
    d.predictable.reserve(ep.steps.size());
    d.chaotic.reserve(ep.steps.size());
    double w = 1.0, w2 = 1.0;
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
        const auto& tr = ep.steps[t];
        const double rbar = est.mean(tr.state, tr.action);
        d.predictable.push_back(w * (rbar - step_means[t]));
        const double dev = tr.reward - rbar;
        d.chaotic.push_back(w * dev);
        d.quadratic_variation += w2 * dev * dev;
        w *= gamma;
        w2 *= gamma * gamma;
    }
    return d;
}

double chaotic_quadratic_variation(const Episode& ep, const RewardMeanEstimator& est,
                                   double gamma) {
    double qv = 0.0, w2 = 1.0;
    for (const auto& tr : ep.steps) {
        const double dev = tr.reward - est.mean(tr.state, tr.action);
        qv += w2 * dev * dev;
        w2 *= gamma * gamma;
    }
    return qv;
}

}  // namespace chaosrl
