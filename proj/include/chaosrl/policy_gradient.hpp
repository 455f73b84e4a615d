// Policy-gradient algorithms for the chaotic mean-variance objective and its
// Sharpe / CVaR / classical mean-variance relatives.
//
// All batch algorithms share the stream discipline: episode b of iteration n
// draws from the derived stream (seed, n * B + b), so batches are
// order-independent and parallelism-invariant.  Auxiliary draws (replay
// fitting) use a separate derived stream per iteration.
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "chaosrl/mdp.hpp"
#include "chaosrl/reward_mean.hpp"
#include "chaosrl/value_based.hpp"  // AverageRewardState

namespace chaosrl {

// Boltzmann policy over one-hot (state, action) features; theta has one
// coefficient per pair, pi(a|s) ∝ exp(theta[s*A+a]).
class SoftmaxPolicy {
  public:
    SoftmaxPolicy(int n_states, int n_actions);

    int n_states() const { return n_states_; }
    int n_actions() const { return n_actions_; }
    int idx(int s, int a) const { return s * n_actions_ + a; }

    Eigen::VectorXd theta;

    // Stable softmax of the state's logit block.
    Eigen::VectorXd probs(int s) const;
    Eigen::MatrixXd prob_table() const;  // row s = probs(s)

    int sample(int s, RngStream& rng) const;

  private:
    int n_states_, n_actions_;
};

// Accumulate w * ∇ln pi(a|s) into g, given the state's probability row:
// the score is e_(s,a) − Σ_a' pi(a'|s) e_(s,a').
void add_score(Eigen::VectorXd& g, int n_actions, int s, int a, const Eigen::VectorXd& probs,
               double w);

// Per-episode score-weighted objective gradients (one episode's contribution
// V_b; batch estimators average these).  All use the updated estimator est.
//
// cmv:   Σ_t ∇ln π_t · v_t  with  v_t = Σ_{t'>=t} [ γ^{t'-t} R_{t'+1}
//                                    − (β/2) γ^{2(t'-t)} (R_{t'+1}−R̂(s,a))² ]
// plain: the β=0 special case (reward-to-go REINFORCE).
// penalty: Σ_t ∇ln π_t · Σ_{t'>=t} γ^{2(t'-t)} (R−R̂)²   (no β/2 factor)
Eigen::VectorXd cmv_episode_gradient(const Episode& ep, const SoftmaxPolicy& policy,
                                     const RewardMeanEstimator& est, double beta, double gamma);
Eigen::VectorXd plain_reinforce_episode_gradient(const Episode& ep, const SoftmaxPolicy& policy,
                                                 double gamma);
Eigen::VectorXd penalty_episode_gradient(const Episode& ep, const SoftmaxPolicy& policy,
                                         const RewardMeanEstimator& est, double gamma);

struct GradientEstimate {
    Eigen::VectorXd grad;       // averaged ascent direction actually applied
    int batch_size = 0;
    Eigen::VectorXd returns;    // per-episode discounted returns J_b
    Eigen::VectorXd penalties;  // per-episode realized chaotic penalties Σγ^{2t}(R−R̂)²

    double mean_return() const { return returns.size() ? returns.mean() : 0.0; }
    double mean_penalty() const { return penalties.size() ? penalties.mean() : 0.0; }
};

// Hyperparameters of the replay fit (used when est is in linear-replay mode).
struct DistributionalUpdateParams {
    int n_sgd_steps = 10;
    int n_samples = 256;
    double step = 0.05;
};

// One batch iteration of chaotic mean-variance REINFORCE: generate B
// episodes under the current policy, feed every transition to est (running
// tabular means, or replay append + SGD fit), then ascend theta along the
// batch-averaged score-weighted v_{t,b}.  Episodes are capped at the MDP's
// fixed horizon (or max_episode_steps for terminal-state MDPs).
GradientEstimate cmv_reinforce_iteration(SoftmaxPolicy& policy, const TabularMDP& mdp,
                                         RewardMeanEstimator& est, int B, double beta,
                                         double gamma, double alpha_n, std::uint64_t seed,
                                         long iteration,
                                         const DistributionalUpdateParams& du = {},
                                         int max_episode_steps = 500);

// One batch iteration of the classical mean-variance baseline: ascend
// E[J] − (β_mv/2)·Var[J] with the likelihood-ratio variance gradient
//   (1/B) Σ_b (V_b − 2 μ_J J_b − ℓ*) Σ_t ∇ln π_t ,   V_b = J_b², μ_J = mean J
// including the per-coordinate optimal baseline
//   ℓ*_k = Σ_b (V_b − 2 μ_J J_b) S_{b,k}² / Σ_b S_{b,k}²   (0 when the
// denominator vanishes), S_b the episode's total score.  The mean part is
// the same reward-to-go REINFORCE gradient as cmv at β = 0.
GradientEstimate mv_reinforce_iteration(SoftmaxPolicy& policy, const TabularMDP& mdp, int B,
                                        double beta_mv, double gamma, double alpha_n,
                                        std::uint64_t seed, long iteration,
                                        int max_episode_steps = 500);

// Three-timescale step sizes: alpha1 (policy, slowest), alpha2 (critics),
// alpha3 (running averages, fastest); alpha_j(t) = c_j * (t+1)^(-exp_j).
struct TimescaleSchedule {
    double a1_c = 0.001, a1_exp = 0.0;
    double a2_c = 0.01, a2_exp = 0.0;
    double a3_c = 0.1, a3_exp = 0.0;

    double alpha1(long t) const;
    double alpha2(long t) const;
    double alpha3(long t) const;
    void validate() const;
};

// Linear state-value critics for the reward level (lambda1) and the chaotic
// variance (lambda2), over one-hot state features; terminal states have the
// zero feature vector.
struct CriticParams {
    Eigen::VectorXd lambda1, lambda2;

    CriticParams() = default;
    CriticParams(int n_states)
        : lambda1(Eigen::VectorXd::Zero(n_states)), lambda2(Eigen::VectorXd::Zero(n_states)) {}
};

// One online episodic actor-critic update.  est must already contain
// (s, a, r).  TD errors (from the pre-update critics):
//   δ₁ = R + λ₁ᵀφ(s') − λ₁ᵀφ(s)
//   δ₂ = (R − R̂(s,a))² + λ₂ᵀφ(s') − λ₂ᵀφ(s)
// then λ_j += α⁽²⁾ δ_j φ(s) and θ += α⁽¹⁾ ∇ln π(a|s) (δ₁ − (β/2) δ₂).
void actor_critic_step_episodic(SoftmaxPolicy& policy, CriticParams& critics,
                                const RewardMeanEstimator& est, const Transition& tr,
                                bool next_terminal, double alpha1, double alpha2, double beta);

// Average-reward variant: ρ and σ̄ move first on the fastest timescale,
//   ρ ← (1−α⁽³⁾) ρ + α⁽³⁾ R,   σ̄ ← (1−α⁽³⁾) σ̄ + α⁽³⁾ (R − R̂(s,a))²
// and the TD errors subtract the *updated* ρ and σ̄.
void actor_critic_step_average(SoftmaxPolicy& policy, CriticParams& critics,
                               const RewardMeanEstimator& est, AverageRewardState& avg,
                               const Transition& tr, double alpha1, double alpha2, double alpha3,
                               double beta);

// Running scalar estimates for the Sharpe iteration.  The first batch
// initializes both scalars directly at the batch means; afterwards the
// default update is the recentered stochastic-approximation form
// x += α (batch_mean − x).  accumulate_only switches to the un-recentered
// form x += α · batch_mean (kept for audit; it diverges in general).
struct SharpeState {
    double v = 0.0;
    double vv = 0.0;
    bool initialized = false;
};

struct SharpeReport {
    GradientEstimate estimate;
    double v = 0.0, vv = 0.0;  // post-update scalar estimates
    bool skipped = false;      // true when vv never exceeded the floor
};

// Quotient-rule ascent direction g₁/√vv − (1/2) v g₂ / vv^(3/2).
Eigen::VectorXd sharpe_direction(double v, double vv, const Eigen::VectorXd& grad_v,
                                 const Eigen::VectorXd& grad_vv);

// One batch iteration ascending the chaotic Sharpe ratio V/√(V^𝕍): est and
// the scalar (V, V^𝕍) estimates update on the fast timescale; theta ascends
// the quotient direction using the freshest scalars, with absolute-time
// discounting (γ^t reward part, γ^{2t} penalty part) in both the batch means
// and the score-weighted gradients.  If the V^𝕍 estimate is not above
// vv_floor the theta update is skipped (flagged in the report).
SharpeReport sharpe_pg_iteration(SoftmaxPolicy& policy, const TabularMDP& mdp,
                                 RewardMeanEstimator& est, int B, double alpha1, double alpha2,
                                 SharpeState& state, std::uint64_t seed, long iteration,
                                 double gamma = 1.0, double vv_floor = 1e-8,
                                 bool accumulate_only = false,
                                 const DistributionalUpdateParams& du = {},
                                 int max_episode_steps = 500);

struct VarState {
    double var = 0.0;  // running value-at-risk estimate of the chaotic aggregate
};

struct CvarReport {
    GradientEstimate estimate;
    double var = 0.0;          // post-update VaR estimate
    double exceed_fraction = 0.0;  // batch fraction with Z_b >= pre-update VaR
};

// One batch iteration of the chaotic CVaR policy gradient.  Per episode the
// chaotic aggregate is Z_b = Σ_t γ^{2t} (R_{t+1} − R̂(s_t,a_t)) (signed, not
// squared).  With the pre-update VaR v: the VaR moves by
//   var −= α⁽²⁾ (1 − (1−β)⁻¹ (1/B) Σ_b 1{Z_b ≥ v})
// and theta ascends the reward-to-go REINFORCE gradient minus the tail term
//   (1/B) Σ_b (Σ_t ∇ln π_t) (Z_b − v) 1{Z_b ≥ v},
// i.e. large upper-tail chaotic aggregates are penalized (the update flips
// the definition's lower-tail convention).
CvarReport cvar_pg_iteration(SoftmaxPolicy& policy, const TabularMDP& mdp,
                             RewardMeanEstimator& est, int B, double cvar_beta, double alpha1,
                             double alpha2, VarState& var_est, std::uint64_t seed, long iteration,
                             double gamma = 1.0, const DistributionalUpdateParams& du = {},
                             int max_episode_steps = 500);

}  // namespace chaosrl
