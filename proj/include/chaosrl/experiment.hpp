// Desk-scale experiment pipeline: config -> per-(beta, seed) training cells
// -> policy rollouts -> seed-averaged summaries, CSV/PNG artifacts and a JSON
// manifest.
//
// Determinism contract: a fixed config yields byte-identical artifacts on
// every run and at every --jobs level.  Cells are pure functions of
// (config, beta, seed); parallel workers only fill disjoint slots and all
// files are written sequentially after the join, in a fixed order.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "chaosrl/config.hpp"
#include "chaosrl/environments.hpp"
#include "chaosrl/mdp.hpp"
#include "chaosrl/policy_gradient.hpp"
#include "chaosrl/value_based.hpp"

namespace chaosrl {

// A trained policy in transportable form: a per-(state, action) table acted
// on either greedily ("greedy-q", ties to the lowest action index, no
// randomness) or as softmax logits ("softmax-theta", one u01 draw per step).
struct PolicyArtifact {
    std::string kind;       // "greedy-q" | "softmax-theta"
    Eigen::MatrixXd table;  // n_states x n_actions

    int action(int s, RngStream& rng) const;
};

// Policy file format: line 1 "kind,<kind>", line 2 "state,a0,a1,...", then
// one numeric row per state (state index first).  Round-trips bit-exactly.
void write_policy_csv(const std::string& path, const PolicyArtifact& policy);
PolicyArtifact read_policy_csv(const std::string& path);

struct RolloutMetrics {
    long total_steps = 0;
    long n_episodes = 0;      // completed episodes (truncated tails excluded)
    double mean_return = 0.0;  // undiscounted return over completed episodes
    double std_return = 0.0;   // sample standard deviation (n-1)
    Eigen::VectorXd occupancy;        // per-state fraction of steps; sums to 1
    Eigen::VectorXd visit_counts;     // per-state raw step counts
    Eigen::MatrixXd action_fraction;  // joint (s, a) fraction of steps; sums to 1
    // Per-state chaotic risk E[(R - R̄(s,a))² | s] from the rollout data:
    // visitation-weighted empirical reward variance over the state's actions.
    Eigen::VectorXd state_risk;
};

// Runs either a fixed number of steps (episodes restart; the final partial
// episode contributes occupancy but not return statistics) or a fixed number
// of complete episodes — exactly one of n_steps / n_episodes must be
// positive.  horizon_cap = 0 falls back to the MDP's horizon (or 500).
RolloutMetrics rollout_policy(const TabularMDP& mdp, const PolicyArtifact& policy, long n_steps,
                              long n_episodes, int horizon_cap, std::uint64_t seed);

// Stream seed the pipeline derives for a cell's evaluation rollout, exposed
// so an external rollout of a saved policy can reproduce the cell's metrics.
std::uint64_t rollout_stream_seed(std::uint64_t cell_seed);

struct ExperimentConfig {
    // environment
    std::string env_type;  // "regime-switch" | "grid" | "portfolio"
    RegimeSwitchConfig regime;
    GridWorldConfig grid;
    PortfolioConfig portfolio;

    // algorithm + hyperparameters
    std::string algorithm;  // cmv-q | cmv-r | cmv-reinforce | mv-reinforce |
                            // ac-episodic | ac-average | sharpe-pg | cvar-pg
    LearningSchedule schedule;               // value-based trainers
    double alpha2_c = 0.05, alpha2_exp = 0.6;  // cmv-r secondary timescale
    int batch_size = 64;                     // batch policy-gradient family
    long n_iterations = 200;
    double alpha_n = 0.05;
    double pg_gamma = 1.0;
    long ac_steps = 200000;                  // actor-critic step budget
    TimescaleSchedule timescales;
    double sharpe_alpha2 = 0.1;
    bool sharpe_accumulate_only = false;
    double cvar_alpha2 = 0.05;
    std::string estimator = "tabular";  // "tabular" | "replay" (batch PG only)
    std::size_t replay_capacity = 100000;
    DistributionalUpdateParams du;
    int max_episode_steps = 500;

    // sweep
    std::vector<double> beta_sweep;
    std::vector<std::uint64_t> seeds;

    // rollout
    long rollout_steps = 0;
    long rollout_episodes = 0;
    int rollout_horizon = 0;

    std::string output_dir = "out";

    TabularMDP build_env() const;
    void validate() const;  // throws ConfigError on any inconsistency
};

// Number of consecutive seeds generated when the config lists none.
inline constexpr int kDefaultSeedCount = 25;

// Reads the [environment]/[algorithm]/[sweep]/[rollout]/[output] sections.
// Missing seed list -> kDefaultSeedCount consecutive seeds from
// sweep.seed_base (default 1).  Calls validate().
ExperimentConfig parse_experiment_config(const KeyValueConfig& kv);

struct CellResult {
    double beta = 0.0;
    std::uint64_t seed = 0;
    PolicyArtifact policy;
    RolloutMetrics metrics;  // empty when training-only
    std::vector<std::string> log_header;  // per-iteration training log
    std::vector<std::vector<double>> log_rows;
};

// Trains one (beta, seed) cell and (optionally) rolls the policy out with
// the derived rollout stream.  Pure: no files, no shared state.
CellResult run_cell(const ExperimentConfig& cfg, double beta, std::uint64_t seed,
                    bool do_rollout = true);

struct BetaSummary {
    double beta = 0.0;
    double mean_return = 0.0;  // arithmetic mean over seeds of per-seed means
    double std_return = 0.0;   // arithmetic mean over seeds of per-seed stds
    Eigen::VectorXd occupancy;        // seed-averaged, still sums to 1
    Eigen::VectorXd visit_counts;     // seed-averaged
    Eigen::MatrixXd action_fraction;  // seed-averaged
    Eigen::VectorXd state_risk;       // seed-averaged
};

struct ExperimentResult {
    std::vector<CellResult> cells;      // ordered by (beta index, seed index)
    std::vector<BetaSummary> summary;   // one entry per sweep beta
    std::vector<std::string> artifacts;  // file names written to output_dir
};

enum class RunMode { TrainOnly, Full };

// Runs every (beta, seed) cell (parallel up to `jobs` threads), averages
// over seeds, and — when write_artifacts — emits policies, training logs,
// per-beta summaries, grid heatmap CSV/PNG pairs and manifest.json into
// cfg.output_dir (created if needed).
ExperimentResult run_experiment(const ExperimentConfig& cfg, int jobs = 1,
                                RunMode mode = RunMode::Full, bool write_artifacts = true);

// CRC-32 (hex, 8 digits) of the canonical config text; the manifest's
// config identity.
std::string config_hash(const KeyValueConfig& kv);

}  // namespace chaosrl
