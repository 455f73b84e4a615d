// The three bundled experimental environments and their analytic oracles.
//
//  * regime-switch : N iid volatility regimes; action 1 earns the regime mean
//                    μ_n, action 2 adds an offset plus scaled noise κ_n + σ_n h.
//  * grid world    : rectangular maze with step/goal/penalty rewards and a
//                    probability of moving in a random direction instead.
//  * portfolio     : two assets (risk-free / risky) under three volatility
//                    regimes; integer allocations with a fixed total budget.
#pragma once

#include <map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "chaosrl/mdp.hpp"

namespace chaosrl {

enum class NoiseDist { Gaussian, Rademacher };

// --- regime-switch -------------------------------------------------------

struct RegimeSwitchConfig {
    int n_states = 0;
    Eigen::VectorXd p;       // iid regime distribution (also the start law)
    Eigen::VectorXd mu;      // per-regime base reward
    Eigen::VectorXd kappa;   // per-regime offset earned by action 2
    Eigen::VectorXd sigma;   // per-regime noise scale (standard deviation)
    int horizon = 0;         // fixed episode length T
    NoiseDist noise = NoiseDist::Gaussian;

    void validate() const;
};

// Two-regime instance: rewards 2 / 10 for action 1, 4 / 8 plus σh for
// action 2, uniform regimes, horizon 400.  Both deterministic one-action
// policies earn the same mean return; only the noise differs.
RegimeSwitchConfig toy_regime_config(double sigma = 0.16, int horizon = 400);

TabularMDP build_mdp(const RegimeSwitchConfig& cfg);

// Exact chaotic variance (β/2)·T·Σ_n σ_n² p_n π(n), where policy_probs[n] is
// the probability of the noisy action 2 in regime n.
double closed_form_chaotic_variance(const RegimeSwitchConfig& cfg,
                                    const Eigen::VectorXd& policy_probs, double beta);

// Exact total-variance gap Var(return | always action 2) − Var(return |
// always action 1) = T·Σ_n p_n (κ_n² + 2 μ_n κ_n + σ_n²).  Requires the
// equal-means condition Σ p_n κ_n = 0 (throws ConfigError otherwise).
double closed_form_variance_gap(const RegimeSwitchConfig& cfg);

// --- grid world ----------------------------------------------------------

// Actions: 0=east, 1=west, 2=north, 3=south.  Cells are indexed
// y * width + x with (0,0) the bottom-left corner.
struct GridWorldConfig {
    int width = 4;
    int height = 4;
    int start_cell = 0;
    int goal_cell = 15;
    double step_reward = -1.0;
    double goal_bonus = 1.0;                // added to the step reward on entering the goal
    std::map<int, double> penalty_cells;    // cell -> negative bonus, added to the step reward
    double p_error = 0.5;                   // chance the move is replaced by a uniform direction
    int episode_cap = 500;

    void validate() const;
    int cell(int x, int y) const { return y * width + x; }
};

// Default 4x4 layout: start bottom-left, goal top-right, one -20 cell and
// two -6 cells placed so that the shortest route hugs the -20 cell while a
// detour pays the smaller penalties.
GridWorldConfig default_grid_config();

TabularMDP build_mdp(const GridWorldConfig& cfg);

// --- portfolio -----------------------------------------------------------

struct PortfolioConfig {
    Eigen::VectorXd mu;     // per-regime risk-free rate (default 0.2, 0.6, 1.0)
    Eigen::VectorXd sigma;  // per-regime volatility     (default 0.5, 1.0, 1.5)
    int q_max = 5;          // total integer budget
    int horizon = 20;
    int start_state = 0;    // low-volatility regime
    // Next-regime distribution as a function of the risky allocation q^R,
    // one row per band: q^R = q_max; 2 < q^R < q_max; 0 < q^R <= 2; q^R = 0.
    Eigen::MatrixXd band_rows;

    PortfolioConfig();
    void validate() const;
};

// Deterministic enumeration of the allocation actions (q_rf, q_r) with
// q_rf + q_r <= q_max: q_rf major, q_r minor.  21 actions for q_max = 5.
std::vector<std::pair<int, int>> portfolio_actions(int q_max);

TabularMDP build_mdp(const PortfolioConfig& cfg);

}  // namespace chaosrl
