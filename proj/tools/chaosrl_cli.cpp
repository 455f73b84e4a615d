// Command-line driver for the chaotic mean-variance experiment pipeline.
//
// Verbs:
//   train    — run every (beta, seed) training cell, save policies + logs
//   rollout  — evaluate a saved policy file under the config's rollout budget
//   sweep    — full pipeline: train, rollout, seed-average, heatmaps, manifest
//   diagnose — martingale / reconstruction / gradient checks on the config
//   report   — re-aggregate a result directory's cells.csv into a summary
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "chaosrl/common.hpp"
#include "chaosrl/config.hpp"
#include "chaosrl/csv.hpp"
#include "chaosrl/diagnostics.hpp"
#include "chaosrl/doob.hpp"
#include "chaosrl/experiment.hpp"

namespace {

using namespace chaosrl;

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::string seeds;
    int jobs = 1;
};

ExperimentConfig load_config(const CommonOpts& opts) {
    KeyValueConfig kv = KeyValueConfig::parse_file(opts.config_path);
    if (!opts.seeds.empty()) kv.set("sweep.seeds", opts.seeds);
    if (!opts.out_dir.empty()) kv.set("output.dir", opts.out_dir);
    return parse_experiment_config(kv);
}

void print_summary(const ExperimentResult& result) {
    std::printf("%-12s %-16s %-16s\n", "beta", "mean_return", "std_return");
    for (const BetaSummary& s : result.summary)
        std::printf("%-12g %-16.8g %-16.8g\n", s.beta, s.mean_return, s.std_return);
}

int cmd_train(const CommonOpts& opts) {
    const ExperimentConfig cfg = load_config(opts);
    const ExperimentResult result = run_experiment(cfg, opts.jobs, RunMode::TrainOnly);
    std::printf("trained %zu cells (%zu beta x %zu seeds), %zu artifacts in %s\n",
                result.cells.size(), cfg.beta_sweep.size(), cfg.seeds.size(),
                result.artifacts.size(), cfg.output_dir.c_str());
    return 0;
}

int cmd_sweep(const CommonOpts& opts) {
    const ExperimentConfig cfg = load_config(opts);
    const ExperimentResult result = run_experiment(cfg, opts.jobs, RunMode::Full);
    print_summary(result);
    std::printf("%zu artifacts in %s\n", result.artifacts.size(), cfg.output_dir.c_str());
    return 0;
}

int cmd_rollout(const CommonOpts& opts, const std::string& policy_path, long seed_flag) {
    const ExperimentConfig cfg = load_config(opts);
    const TabularMDP mdp = cfg.build_env();
    const PolicyArtifact policy = read_policy_csv(policy_path);
    const std::uint64_t seed =
        seed_flag >= 0 ? static_cast<std::uint64_t>(seed_flag) : cfg.seeds.front();
    const RolloutMetrics m =
        rollout_policy(mdp, policy, cfg.rollout_steps, cfg.rollout_episodes, cfg.rollout_horizon,
                       rollout_stream_seed(seed));

    namespace fs = std::filesystem;
    fs::create_directories(cfg.output_dir);
    const auto path_of = [&](const char* name) {
        return (fs::path(cfg.output_dir) / name).string();
    };
    write_csv(path_of("rollout_metrics.csv"),
              {"seed", "mean_return", "std_return", "n_episodes", "total_steps"},
              {{static_cast<double>(seed), m.mean_return, m.std_return,
                static_cast<double>(m.n_episodes), static_cast<double>(m.total_steps)}});
    {
        std::vector<std::vector<double>> rows;
        for (int s = 0; s < m.occupancy.size(); ++s)
            rows.push_back({static_cast<double>(s), m.occupancy[s], m.visit_counts[s],
                            m.state_risk[s]});
        write_csv(path_of("rollout_occupancy.csv"), {"state", "occupancy", "visits", "risk"},
                  rows);
    }
    {
        std::vector<std::vector<double>> rows;
        for (int s = 0; s < m.action_fraction.rows(); ++s)
            for (int a = 0; a < m.action_fraction.cols(); ++a)
                rows.push_back(
                    {static_cast<double>(s), static_cast<double>(a), m.action_fraction(s, a)});
        write_csv(path_of("rollout_action_fractions.csv"), {"state", "action", "fraction"}, rows);
    }
    std::printf("rollout (%s, seed %llu): mean return %.8g, std %.8g over %ld episodes "
                "(%ld steps)\n",
                policy.kind.c_str(), static_cast<unsigned long long>(seed), m.mean_return,
                m.std_return, m.n_episodes, m.total_steps);
    return 0;
}

int cmd_diagnose(const CommonOpts& opts) {
    const ExperimentConfig cfg = load_config(opts);
    const TabularMDP mdp = cfg.build_env();
    const int cap = mdp.horizon > 0 ? mdp.horizon : cfg.max_episode_steps;
    const std::uint64_t seed = cfg.seeds.front();
    std::printf("environment %s: %d states, %d actions, horizon %d\n", cfg.env_type.c_str(),
                mdp.n_states, mdp.n_actions, mdp.horizon);

    const RewardMeanEstimator exact_est =
        RewardMeanEstimator::exact(mdp.n_states, mdp.n_actions, mdp.analytic_mean);
    const auto uniform = [&](int, RngStream& rng) { return rng.uniform_int(mdp.n_actions); };

    // Martingale second-moment identity under the uniform policy.
    RngStream mart_rng(seed, 1);
    const MartingaleReport mart = martingale_check(mdp, uniform, exact_est, 2000, cap, mart_rng);
    std::printf("martingale: %s\n", mart.text().c_str());

    // Doob reconstruction identity (zero step-means form) on fresh episodes.
    RngStream recon_rng(seed, 2);
    double max_residual = 0.0;
    for (int i = 0; i < 200; ++i) {
        const Episode ep = sample_episode(mdp, uniform, cap, recon_rng);
        const std::vector<double> zeros(static_cast<std::size_t>(ep.length()), 0.0);
        const DoobDecomposition d = doob_decompose(ep, exact_est, mdp.gamma, 0.0, zeros);
        const double recon =
            d.conditional_start_value + d.predictable_total() + d.chaotic_total();
        max_residual = std::max(max_residual,
                                std::abs(recon - episode_return(ep, mdp.gamma)));
    }
    std::printf("reconstruction: max residual %.3e over 200 episodes\n", max_residual);

    // Short-horizon gradient check of the configured objective family.
    PgObjective obj = PgObjective::Cmv;
    if (cfg.algorithm == "mv-reinforce") obj = PgObjective::MeanVariance;
    if (cfg.algorithm == "sharpe-pg") obj = PgObjective::Sharpe;
    if (cfg.algorithm == "cvar-pg") obj = PgObjective::Cvar;
    const double beta0 = cfg.beta_sweep.front();
    double fd_rel = -1.0;
    std::string fd_note;
    try {
        SoftmaxPolicy pol(mdp.n_states, mdp.n_actions);
        RngStream fd_rng(seed, 3);
        const FdCheckReport fd = finite_diff_gradient_check(
            pol, mdp, obj, beta0, 1e-4, 5000, fd_rng, nullptr, std::min(cap, 3));
        fd_rel = fd.max_rel_error;
        std::printf("gradient check: %s\n", fd.text().c_str());
    } catch (const NumericError& e) {
        fd_note = e.what();
        std::printf("gradient check: skipped (%s)\n", e.what());
    }

    namespace fs = std::filesystem;
    fs::create_directories(cfg.output_dir);
    write_csv((fs::path(cfg.output_dir) / "diagnostics.csv").string(),
              {"martingale_z", "martingale_pass", "recon_max_residual", "fd_max_rel_error"},
              {{mart.z, mart.pass ? 1.0 : 0.0, max_residual, fd_rel}});

    const bool ok = mart.pass && max_residual < 1e-8;
    std::printf("diagnose: %s\n", ok ? "pass" : "FAIL");
    return ok ? 0 : 1;
}

int cmd_report(const std::string& config_path, const std::string& out_dir) {
    std::string dir = out_dir;
    if (dir.empty()) {
        if (config_path.empty())
            throw ConfigError("report: provide --out or --config to locate the result directory");
        const KeyValueConfig kv = KeyValueConfig::parse_file(config_path);
        dir = kv.get_string("output.dir", "out");
    }
    namespace fs = std::filesystem;
    const CsvTable cells = read_csv((fs::path(dir) / "cells.csv").string());

    std::map<long, std::pair<double, double>> acc;  // beta_index -> (sum mean, sum std)
    std::map<long, double> beta_of;
    std::map<long, long> count;
    for (std::size_t r = 0; r < cells.rows.size(); ++r) {
        const long bi = static_cast<long>(cells.at(r, "beta_index"));
        beta_of[bi] = cells.at(r, "beta");
        acc[bi].first += cells.at(r, "mean_return");
        acc[bi].second += cells.at(r, "std_return");
        ++count[bi];
    }

    std::vector<std::vector<double>> rows;
    std::printf("%-12s %-12s %-16s %-16s %-8s\n", "beta_index", "beta", "mean_return",
                "std_return", "seeds");
    for (const auto& [bi, sums] : acc) {
        const double n = static_cast<double>(count[bi]);
        rows.push_back({static_cast<double>(bi), beta_of[bi], sums.first / n, sums.second / n});
        std::printf("%-12ld %-12g %-16.8g %-16.8g %-8ld\n", bi, beta_of[bi], sums.first / n,
                    sums.second / n, count[bi]);
    }
    write_csv((fs::path(dir) / "report.csv").string(),
              {"beta_index", "beta", "mean_return", "std_return"}, rows);

    // Cross-check against the pipeline's own summary when present.
    const std::string summary_path = (fs::path(dir) / "summary.csv").string();
    if (fs::exists(summary_path)) {
        const CsvTable summary = read_csv(summary_path);
        double max_diff = 0.0;
        for (std::size_t r = 0; r < summary.rows.size() && r < rows.size(); ++r) {
            max_diff = std::max(max_diff, std::abs(summary.at(r, "mean_return") - rows[r][2]));
            max_diff = std::max(max_diff, std::abs(summary.at(r, "std_return") - rows[r][3]));
        }
        if (max_diff > 1e-9) {
            std::printf("report: summary.csv disagrees with cells.csv (max diff %.3e)\n",
                        max_diff);
            return 1;
        }
        std::printf("report: summary.csv consistent with cells.csv (max diff %.3e)\n", max_diff);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"chaotic mean-variance RL experiments"};
    app.require_subcommand(1);

    CommonOpts train_opts, sweep_opts, rollout_opts, diagnose_opts;
    std::string rollout_policy_path, report_config, report_out;
    long rollout_seed = -1;

    auto add_common = [](CLI::App* sub, CommonOpts& opts, bool with_jobs) {
        sub->add_option("--config", opts.config_path, "experiment config file")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_option("--out", opts.out_dir, "output directory (overrides the config)");
        sub->add_option("--seeds", opts.seeds, "comma-separated seed list override");
        if (with_jobs)
            sub->add_option("--jobs", opts.jobs, "parallel training cells")
                ->check(CLI::PositiveNumber);
    };

    CLI::App* train = app.add_subcommand("train", "train every (beta, seed) cell");
    add_common(train, train_opts, true);
    CLI::App* rollout = app.add_subcommand("rollout", "evaluate a saved policy");
    add_common(rollout, rollout_opts, false);
    rollout->add_option("--policy", rollout_policy_path, "policy CSV written by train/sweep")
        ->required()
        ->check(CLI::ExistingFile);
    rollout->add_option("--seed", rollout_seed, "rollout seed (default: first config seed)");
    CLI::App* sweep = app.add_subcommand("sweep", "full train + rollout + summary pipeline");
    add_common(sweep, sweep_opts, true);
    CLI::App* diagnose = app.add_subcommand("diagnose", "sanity checks for a config");
    add_common(diagnose, diagnose_opts, false);
    CLI::App* report = app.add_subcommand("report", "re-aggregate a result directory");
    report->add_option("--config", report_config, "experiment config file")
        ->check(CLI::ExistingFile);
    report->add_option("--out", report_out, "result directory holding cells.csv");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(train_opts);
        if (rollout->parsed())
            return cmd_rollout(rollout_opts, rollout_policy_path, rollout_seed);
        if (sweep->parsed()) return cmd_sweep(sweep_opts);
        if (diagnose->parsed()) return cmd_diagnose(diagnose_opts);
        if (report->parsed()) return cmd_report(report_config, report_out);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
