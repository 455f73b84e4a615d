// Independent verification oracles: Markov-chain CLT variance decomposition
// via the Poisson equation, martingale moment checks for the chaotic part of
// the Doob decomposition, exhaustive trajectory enumeration for small MDPs,
// and finite-difference checks of every policy-gradient estimator.
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "chaosrl/common.hpp"
#include "chaosrl/mdp.hpp"
#include "chaosrl/policy_gradient.hpp"
#include "chaosrl/reward_mean.hpp"
#include "chaosrl/rng.hpp"

namespace chaosrl {

// A finite Markov reward chain under a fixed policy: state-to-state kernel P,
// reward R(x, y) collected on the transition x -> y, and optional independent
// zero-mean Gaussian noise with variance noise_var(x, y) added to the reward.
struct ChainSpec {
    Eigen::MatrixXd P;
    Eigen::MatrixXd R;
    Eigen::MatrixXd noise_var;  // empty (0x0) means no noise

    int n() const { return static_cast<int>(P.rows()); }
    // Rows sum to one; the chain is irreducible and aperiodic (finite +
    // irreducible already gives positive recurrence).  ConfigError otherwise.
    void validate() const;
};

// Long-run CLT decomposition for (1/n) sum R(x_t, x_{t+1}):
//   sqrt(n) (average - long_run_mean)  ->  N(0, sigma2_deter + sigma2_chaotic)
// where the deterministic part comes from state-to-state fluctuations of the
// Poisson solution f and the chaotic part from reward randomness given the
// current state.
struct CltDecomposition {
    Eigen::VectorXd stationary;
    double long_run_mean = 0.0;
    double sigma2_chaotic = 0.0;
    double sigma2_deter = 0.0;
    Eigen::VectorXd f_poisson;
};

// Solve the stationary distribution (least squares on (I - P^T) d = 0 with
// sum d = 1 appended) and the Poisson equation (P f)(x) - f(x) =
// long_run_mean - mu(x) with the normalization f(pin_state) = 0.  Both
// residuals are checked to 1e-10; NumericError past that, ConfigError from
// chain validation.
CltDecomposition solve_poisson(const ChainSpec& chain, int pin_state = 0);

// Max-norm residual of the Poisson equation for a candidate solution.
double poisson_residual(const ChainSpec& chain, const CltDecomposition& d);

struct CltReport {
    double empirical_variance = 0.0;
    double predicted_variance = 0.0;
    double rel_error = 0.0;
    double se_variance = 0.0;  // normal-approximation SE of the sample variance
    long n = 0;
    int n_reps = 0;
    std::string text() const;
};

// Monte-Carlo check of the CLT variance: n_reps replications of the scaled
// centered average over n steps, started from the stationary distribution.
// Requires n >= 10^4 (ConfigError below).
CltReport clt_empirical_check(const ChainSpec& chain, long n, int n_reps, RngStream& rng);

struct MartingaleReport {
    double mean_sq_chaotic = 0.0;  // mean over episodes of (sum of chaotic part)^2
    double mean_qv = 0.0;          // mean realized quadratic variation
    double diff = 0.0;
    double se_pooled = 0.0;  // sqrt((Var A + Var B) / n)
    double se_paired = 0.0;  // SE of the per-episode difference
    double z = 0.0;          // |diff| / se_pooled (0 when diff is exactly 0)
    long n = 0;
    bool pass = false;  // z <= 3
    std::string text() const;
};

// Second-moment identity of the chaotic martingale: E[(sum chaotic)^2] equals
// E[quadratic variation] when the estimator holds exact conditional means.
MartingaleReport martingale_check(const TabularMDP& mdp,
                                  const std::function<int(int, RngStream&)>& policy,
                                  const RewardMeanEstimator& est, long n_episodes,
                                  int max_episode_steps, RngStream& rng);

// ---------------------------------------------------------------------------
// Exhaustive trajectory enumeration (deterministic-reward MDPs only).
// ---------------------------------------------------------------------------

// All trajectories of the capped process: every action branch at every step,
// every positive-probability transition, rewards fixed at their analytic
// means.  env_probs carries the policy-independent start x transition mass;
// multiplying by the policy factors (policy_probs) yields a distribution that
// sums to one because episodes are truncated at max_len exactly like
// sample_episode truncates them.
struct TrajectorySet {
    std::vector<Episode> trajectories;
    Eigen::VectorXd env_probs;

    // Per-trajectory probability under the given state x action policy table.
    Eigen::VectorXd policy_probs(const Eigen::MatrixXd& prob_table) const;
};

// ConfigError when analytic means are missing, any reward variance is
// nonzero, or the tree exceeds ~5e6 leaves.
TrajectorySet enumerate_trajectories(const TabularMDP& mdp, int max_len);

enum class PgObjective { Cmv, MeanVariance, Sharpe, Cvar };

// Exact value / gradient of a policy-gradient objective over an enumerated
// trajectory set.  Aggregates per trajectory use gamma^t rewards,
// gamma^{2t} squared deviations from est, and the signed gamma^{2t} deviation
// sum for CVaR.  beta is the generic risk dial: beta == 0 disables the risk
// transform for *every* objective (all four then equal the plain expected
// return); otherwise Cmv/MeanVariance use it as the penalty weight, Sharpe
// only as an on-switch, and Cvar as nothing here (cvar_v is the *frozen*
// threshold, so the CVaR objective reads E[G] - E[(Z - v) 1{Z >= v}]).
double enumerated_objective_value(const TrajectorySet& ts, const SoftmaxPolicy& policy,
                                  PgObjective obj, double beta,
                                  const RewardMeanEstimator& est, double gamma,
                                  double cvar_v = 0.0);
Eigen::VectorXd enumerated_objective_gradient(const TrajectorySet& ts,
                                              const SoftmaxPolicy& policy, PgObjective obj,
                                              double beta, const RewardMeanEstimator& est,
                                              double gamma, double cvar_v = 0.0);

struct FdCheckReport {
    std::string mode;  // "enumeration" or "crn-mc"
    Eigen::VectorXd analytic;
    Eigen::VectorXd fd;
    double objective_value = 0.0;
    double max_abs_error = 0.0;
    double max_rel_error = 0.0;  // max |analytic - fd| / max(inf-norm of fd, 1e-12)
    long n_samples = 0;
    std::string text() const;
};

// Central-difference check of the analytic policy-gradient estimators.
//
// When the MDP has deterministic rewards (analytic variance identically zero)
// the objective is computed exactly by trajectory enumeration; otherwise a
// common-random-numbers batch of n_episodes is sampled once at the base point
// and the perturbed objectives are evaluated by likelihood-ratio reweighting,
// so the finite difference is smooth in theta and the comparison is against
// the shipped estimator on the same batch.
//
// est = nullptr uses exact analytic conditional means.  For obj = Cvar the
// frozen threshold is the beta-quantile of the base aggregate distribution
// (beta then plays the tail-level role); for the other objectives beta is the
// risk weight.  max_len caps episodes (default: mdp.horizon, else 12).
FdCheckReport finite_diff_gradient_check(const SoftmaxPolicy& policy, const TabularMDP& mdp,
                                         PgObjective obj, double beta, double h,
                                         long n_episodes, RngStream& rng,
                                         const RewardMeanEstimator* est = nullptr,
                                         int max_len = 0);

}  // namespace chaosrl
