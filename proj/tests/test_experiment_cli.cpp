// Experiment pipeline layer: config files, CSV artifacts, heatmap/PNG
// rendering, the (beta, seed) sweep driver with its determinism and
// seed-averaging invariants, and the command-line tool.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <zlib.h>

#include "chaosrl/common.hpp"
#include "chaosrl/config.hpp"
#include "chaosrl/csv.hpp"
#include "chaosrl/experiment.hpp"
#include "chaosrl/heatmap.hpp"
#include "chaosrl/mdp.hpp"
#include "chaosrl/rng.hpp"

using namespace chaosrl;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "chaosrl_expt_tests" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    os << text;
    REQUIRE(os.good());
}

std::string read_bytes(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    std::ostringstream buf;
    buf << is.rdbuf();
    return buf.str();
}

bool same_matrix(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    for (Eigen::Index i = 0; i < a.size(); ++i)
        if (std::memcmp(&a(i), &b(i), sizeof(double)) != 0) return false;
    return true;
}

// Small, fast grid experiment used throughout the pipeline cases.
std::string grid_config_text(const std::string& out_dir) {
    return "[environment]\n"
           "type = grid\n"
           "[algorithm]\n"
           "name = cmv-q\n"
           "n_steps = 4000\n"
           "epsilon = 0.2\n"
           "[sweep]\n"
           "beta = 0, 1\n"
           "seeds = 11, 12\n"
           "[rollout]\n"
           "n_steps = 3000\n"
           "[output]\n"
           "dir = " +
           out_dir + "\n";
}

// Two-step deterministic chain 0 -> 1 -> 2 (terminal), rewards 1 then 2.
TabularMDP two_step_chain() {
    TabularMDP mdp;
    mdp.n_states = 3;
    mdp.n_actions = 1;
    mdp.gamma = 1.0;
    mdp.reward_bound = 2.0;
    mdp.transition = Eigen::MatrixXd::Zero(3, 3);
    mdp.transition(0, 1) = 1.0;
    mdp.transition(1, 2) = 1.0;
    mdp.transition(2, 2) = 1.0;
    mdp.start_dist = Eigen::Vector3d(1.0, 0.0, 0.0);
    mdp.terminal = {0, 0, 1};
    mdp.reward_sampler = [](int s, int, int, RngStream&) { return s == 0 ? 1.0 : 2.0; };
    mdp.analytic_mean = [](int s, int) { return s == 0 ? 1.0 : 2.0; };
    mdp.analytic_var = [](int, int) { return 0.0; };
    mdp.validate();
    return mdp;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(CHAOSRL_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    if (rc == -1) return -1;
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -2;
}

}  // namespace

TEST_CASE("config: sections, comments, typed getters and lists") {
    const KeyValueConfig kv = KeyValueConfig::parse_string(
        "top = bare\n"
        "# full-line comment\n"
        "[environment]\n"
        "type = grid   \n"
        "; another comment style\n"
        "width = 6\n"
        "p_error = 0.25\n"
        "[sweep]\n"
        "beta = 0, 0.5, 2\n"
        "seeds = 3,4,5\n"
        "empty_list =\n"
        "flag = true\n");

    CHECK(kv.get_string("top") == "bare");
    CHECK(kv.get_string("environment.type") == "grid");
    CHECK(kv.get_long("environment.width") == 6);
    CHECK(kv.get_double("environment.p_error") == 0.25);
    CHECK(kv.get_bool("sweep.flag", false));
    CHECK(kv.get_bool("sweep.missing", true));
    CHECK(kv.get_double("sweep.missing", 7.5) == 7.5);
    CHECK(kv.get_long("sweep.missing", -3) == -3);
    CHECK(kv.get_string("sweep.missing", "dflt") == "dflt");

    const auto betas = kv.get_double_list("sweep.beta");
    REQUIRE(betas.size() == 3);
    CHECK(betas[0] == 0.0);
    CHECK(betas[1] == 0.5);
    CHECK(betas[2] == 2.0);
    const auto seeds = kv.get_u64_list("sweep.seeds");
    REQUIRE(seeds.size() == 3);
    CHECK(seeds[0] == 3);
    CHECK(seeds[2] == 5);
    CHECK(kv.get_double_list("sweep.empty_list").empty());

    CHECK(kv.canonical_text().find("environment.type=grid\n") != std::string::npos);
    CHECK(config_hash(kv).size() == 8);

    CHECK_THROWS_AS((void)kv.get_string("absent"), ConfigError);
    CHECK_THROWS_AS((void)kv.get_double("environment.type"), ConfigError);
    CHECK_THROWS_AS((void)kv.get_long("environment.p_error"), ConfigError);
    CHECK_THROWS_AS((void)kv.get_bool("environment.type", true), ConfigError);
    CHECK_THROWS_AS((void)KeyValueConfig::parse_string("[unclosed\nk = v\n"), ConfigError);
    CHECK_THROWS_AS((void)KeyValueConfig::parse_string("[]\n"), ConfigError);
    CHECK_THROWS_AS((void)KeyValueConfig::parse_string("just a dangling line\n"), ConfigError);
    CHECK_THROWS_AS((void)KeyValueConfig::parse_string("= value\n"), ConfigError);
    CHECK_THROWS_AS((void)KeyValueConfig::parse_file("/nonexistent/of/course.ini"), ConfigError);
    CHECK_THROWS_AS((void)KeyValueConfig::parse_string("[s]\nseeds = -4\n").get_u64_list("s.seeds"),
                    ConfigError);
}

TEST_CASE("config: hash depends on values, not formatting") {
    const KeyValueConfig a = KeyValueConfig::parse_string("[s]\nx = 1\ny = 2\n");
    const KeyValueConfig b =
        KeyValueConfig::parse_string("# comment\n[s]\n\ny   =   2\n\nx=1\n");
    const KeyValueConfig c = KeyValueConfig::parse_string("[s]\nx = 1\ny = 3\n");
    CHECK(a.canonical_text() == b.canonical_text());
    CHECK(config_hash(a) == config_hash(b));
    CHECK(config_hash(a) != config_hash(c));
}

TEST_CASE("csv: 17-significant-digit round trip is bit exact") {
    const fs::path dir = fresh_dir("csv");
    const std::vector<std::string> header = {"a", "b", "c"};
    const std::vector<std::vector<double>> rows = {
        {1.0 / 3.0, -0.0, 1e308},
        {0.1, -1.2345678901234567e-17, 5.0},
        {2.2250738585072014e-308, 3.14159265358979312, -42.0},
    };
    const std::string path = (dir / "t.csv").string();
    write_csv(path, header, rows);
    const CsvTable t = read_csv(path);
    REQUIRE(t.header == header);
    REQUIRE(t.rows.size() == rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        REQUIRE(t.rows[r].size() == rows[r].size());
        for (std::size_t c = 0; c < rows[r].size(); ++c)
            CHECK(std::memcmp(&t.rows[r][c], &rows[r][c], sizeof(double)) == 0);
    }
    CHECK(t.col("b") == 1);
    CHECK(t.col("zz") == -1);
    CHECK(t.at(1, "a") == 0.1);
    CHECK_THROWS_AS((void)t.at(0, "zz"), ConfigError);

    CHECK(format_g17(-0.0) == "-0");
    CHECK(format_g17(0.25) == "0.25");

    CHECK_THROWS_AS((void)read_csv((dir / "missing.csv").string()), ConfigError);
    write_text(dir / "bad.csv", "x,y\n1,apple\n");
    CHECK_THROWS_AS((void)read_csv((dir / "bad.csv").string()), ConfigError);
    write_text(dir / "empty.csv", "");
    CHECK_THROWS_AS((void)read_csv((dir / "empty.csv").string()), ConfigError);
}

TEST_CASE("heatmap: pinned colormap stops, interpolation and clamping") {
    const std::array<std::uint8_t, 3> violet = {68, 1, 84};
    const std::array<std::uint8_t, 3> blue = {59, 82, 139};
    const std::array<std::uint8_t, 3> teal = {33, 145, 140};
    const std::array<std::uint8_t, 3> green = {94, 201, 98};
    const std::array<std::uint8_t, 3> yellow = {253, 231, 37};
    CHECK(heat_color(0.0) == violet);
    CHECK(heat_color(0.25) == blue);
    CHECK(heat_color(0.5) == teal);
    CHECK(heat_color(0.75) == green);
    CHECK(heat_color(1.0) == yellow);
    CHECK(heat_color(-3.0) == violet);
    CHECK(heat_color(7.0) == yellow);
    const double nan = std::nan("");
    CHECK(heat_color(nan) == violet);
    // Midpoint of the first segment: rounded linear interpolation.
    const std::array<std::uint8_t, 3> mid = {64, 42, 112};
    CHECK(heat_color(0.125) == mid);
}

TEST_CASE("heatmap: constant matrix renders one uniform color") {
    const std::vector<std::vector<double>> zeros(4, std::vector<double>(4, 0.0));
    const HeatmapImage img = render_heatmap(zeros, 3);
    CHECK(img.width == 12);
    CHECK(img.height == 12);
    const auto c0 = heat_color(0.0);
    bool uniform = true;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) uniform = uniform && (img.pixel(x, y) == c0);
    CHECK(uniform);
}

TEST_CASE("heatmap: a (0,1) pair maps to the two endpoint colors") {
    const HeatmapImage img = render_heatmap({{0.0, 1.0}}, 1);
    CHECK(img.width == 2);
    CHECK(img.height == 1);
    CHECK(img.pixel(0, 0) == heat_color(0.0));
    CHECK(img.pixel(1, 0) == heat_color(1.0));
    CHECK(img.pixel(0, 0) != img.pixel(1, 0));
}

TEST_CASE("heatmap: ragged and empty matrices are rejected") {
    CHECK_THROWS_AS((void)render_heatmap({{1.0, 2.0}, {3.0}}, 1), ConfigError);
    CHECK_THROWS_AS((void)render_heatmap(std::vector<std::vector<double>>{}, 1), ConfigError);
    CHECK_THROWS_AS((void)render_heatmap({std::vector<double>{}}, 1), ConfigError);
    CHECK_THROWS_AS((void)render_heatmap({{1.0}}, 0), ConfigError);
}

TEST_CASE("heatmap: the matrix argmax cell gets the top gradient color") {
    const std::vector<std::vector<double>> m = {
        {0.3, 1.1, 0.2},
        {0.9, 0.4, 2.5},
        {0.0, 1.9, 0.7},
    };
    const int cell_px = 5;
    const HeatmapImage img = render_heatmap(m, cell_px);
    int best_y = 0, best_x = 0;
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x)
            if (m[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)] >
                m[static_cast<std::size_t>(best_y)][static_cast<std::size_t>(best_x)]) {
                best_y = y;
                best_x = x;
            }
    CHECK(best_y == 1);
    CHECK(best_x == 2);
    const auto top = heat_color(1.0);
    CHECK(img.pixel(best_x * cell_px + 2, best_y * cell_px + 2) == top);
    // No other cell carries the top color (all values are distinct).
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x)
            if (y != best_y || x != best_x)
                CHECK(img.pixel(x * cell_px + 2, y * cell_px + 2) != top);
}

TEST_CASE("png: signature, chunk structure, zlib round trip, determinism") {
    const HeatmapImage img = render_heatmap({{0.0, 1.0}, {2.0, 3.0}}, 1);
    const std::vector<std::uint8_t> bytes = encode_png(img);
    const std::vector<std::uint8_t> again = encode_png(img);
    CHECK(bytes == again);

    REQUIRE(bytes.size() > 45);
    const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    CHECK(std::memcmp(bytes.data(), sig, 8) == 0);

    auto be32 = [&](std::size_t off) {
        return (static_cast<std::uint32_t>(bytes[off]) << 24) |
               (static_cast<std::uint32_t>(bytes[off + 1]) << 16) |
               (static_cast<std::uint32_t>(bytes[off + 2]) << 8) |
               static_cast<std::uint32_t>(bytes[off + 3]);
    };
    // IHDR directly after the signature.
    CHECK(be32(8) == 13);
    CHECK(std::memcmp(bytes.data() + 12, "IHDR", 4) == 0);
    CHECK(be32(16) == 2);   // width
    CHECK(be32(20) == 2);   // height
    CHECK(bytes[24] == 8);  // bit depth
    CHECK(bytes[25] == 2);  // truecolor RGB
    // IHDR CRC covers type + data.
    CHECK(be32(8 + 8 + 13) == crc32_bytes(bytes.data() + 12, 4 + 13));

    // Walk the chunks, find IDAT, inflate, compare with the raw scanlines.
    std::vector<std::uint8_t> idat;
    bool saw_iend = false;
    for (std::size_t off = 8; off + 8 <= bytes.size();) {
        const std::uint32_t len = be32(off);
        REQUIRE(off + 12 + len <= bytes.size());
        const char* type = reinterpret_cast<const char*>(bytes.data() + off + 4);
        if (std::memcmp(type, "IDAT", 4) == 0)
            idat.insert(idat.end(), bytes.begin() + static_cast<long>(off) + 8,
                        bytes.begin() + static_cast<long>(off) + 8 + len);
        if (std::memcmp(type, "IEND", 4) == 0) saw_iend = true;
        CHECK(be32(off + 8 + len) == crc32_bytes(bytes.data() + off + 4, 4 + len));
        off += 12 + len;
    }
    CHECK(saw_iend);
    REQUIRE(!idat.empty());

    const std::size_t stride = 3 * static_cast<std::size_t>(img.width);
    std::vector<std::uint8_t> raw((stride + 1) * static_cast<std::size_t>(img.height));
    uLongf raw_len = raw.size();
    REQUIRE(uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) ==
            Z_OK);
    REQUIRE(raw_len == raw.size());
    for (int y = 0; y < img.height; ++y) {
        CHECK(raw[(stride + 1) * static_cast<std::size_t>(y)] == 0);  // filter byte
        CHECK(std::memcmp(raw.data() + (stride + 1) * static_cast<std::size_t>(y) + 1,
                          img.rgb.data() + stride * static_cast<std::size_t>(y), stride) == 0);
    }

    // write_png emits exactly encode_png's bytes.
    const fs::path dir = fresh_dir("png");
    write_png((dir / "img.png").string(), img);
    const std::string on_disk = read_bytes(dir / "img.png");
    REQUIRE(on_disk.size() == bytes.size());
    CHECK(std::memcmp(on_disk.data(), bytes.data(), bytes.size()) == 0);
}

TEST_CASE("policy artifact: greedy and softmax action semantics, file round trip") {
    PolicyArtifact greedy;
    greedy.kind = "greedy-q";
    greedy.table.resize(2, 3);
    greedy.table << 1.0, 3.0, 3.0, 2.0, 1.0, 0.0;
    RngStream consumed(5), untouched(5);
    CHECK(greedy.action(0, consumed) == 1);  // tie between actions 1, 2 -> lowest
    CHECK(greedy.action(1, consumed) == 0);
    CHECK(consumed.u01() == untouched.u01());  // greedy consumed no randomness

    PolicyArtifact soft;
    soft.kind = "softmax-theta";
    soft.table.resize(1, 2);
    soft.table << 0.0, std::log(3.0);  // probabilities 1/4, 3/4
    RngStream rng(2024);
    int ones = 0;
    const int n = 4000;
    for (int i = 0; i < n; ++i) ones += soft.action(0, rng);
    const double freq = static_cast<double>(ones) / n;
    const double se = std::sqrt(0.25 * 0.75 / n);
    CHECK(std::abs(freq - 0.75) <= 4.0 * se);

    const fs::path dir = fresh_dir("policy");
    const std::string path = (dir / "p.csv").string();
    write_policy_csv(path, greedy);
    const PolicyArtifact back = read_policy_csv(path);
    CHECK(back.kind == "greedy-q");
    CHECK(same_matrix(back.table, greedy.table));

    PolicyArtifact bad = greedy;
    bad.kind = "mystery";
    CHECK_THROWS_AS(write_policy_csv((dir / "b.csv").string(), bad), ConfigError);
    RngStream r2(1);
    CHECK_THROWS_AS((void)bad.action(0, r2), ConfigError);
    CHECK_THROWS_AS((void)greedy.action(5, r2), InvalidActionError);
    write_text(dir / "nokind.csv", "state,a0\n0,1\n");
    CHECK_THROWS_AS((void)read_policy_csv((dir / "nokind.csv").string()), ConfigError);
    CHECK_THROWS_AS((void)read_policy_csv((dir / "missing.csv").string()), ConfigError);
}

TEST_CASE("rollout: exact metrics on a deterministic chain (episode budget)") {
    const TabularMDP mdp = two_step_chain();
    PolicyArtifact pol;
    pol.kind = "greedy-q";
    pol.table = Eigen::MatrixXd::Zero(3, 1);

    const RolloutMetrics m = rollout_policy(mdp, pol, 0, 7, 0, 99);
    CHECK(m.n_episodes == 7);
    CHECK(m.total_steps == 14);
    CHECK(m.mean_return == 3.0);
    CHECK(m.std_return == 0.0);
    CHECK(m.occupancy[0] == 0.5);
    CHECK(m.occupancy[1] == 0.5);
    CHECK(m.occupancy[2] == 0.0);
    CHECK(std::abs(m.occupancy.sum() - 1.0) <= 1e-12);
    CHECK(std::abs(m.action_fraction.sum() - 1.0) <= 1e-12);
    CHECK(m.visit_counts[0] == 7.0);
    CHECK(m.state_risk.maxCoeff() == 0.0);

    CHECK_THROWS_AS((void)rollout_policy(mdp, pol, 0, 0, 0, 1), ConfigError);
    CHECK_THROWS_AS((void)rollout_policy(mdp, pol, 5, 5, 0, 1), ConfigError);
    PolicyArtifact wrong = pol;
    wrong.table = Eigen::MatrixXd::Zero(2, 1);
    CHECK_THROWS_AS((void)rollout_policy(mdp, wrong, 0, 3, 0, 1), ConfigError);
}

TEST_CASE("rollout: step budget counts a truncated episode's occupancy only") {
    const TabularMDP mdp = two_step_chain();
    PolicyArtifact pol;
    pol.kind = "greedy-q";
    pol.table = Eigen::MatrixXd::Zero(3, 1);

    const RolloutMetrics m = rollout_policy(mdp, pol, 3, 0, 0, 99);
    CHECK(m.total_steps == 3);
    CHECK(m.n_episodes == 1);     // the second episode was cut mid-flight
    CHECK(m.mean_return == 3.0);  // only the completed episode counts
    CHECK(m.visit_counts[0] == 2.0);
    CHECK(m.visit_counts[1] == 1.0);
    CHECK(std::abs(m.occupancy.sum() - 1.0) <= 1e-12);
    CHECK(m.occupancy[0] == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("rollout: noisy rewards produce the per-state risk estimate") {
    TabularMDP mdp;
    mdp.n_states = 1;
    mdp.n_actions = 1;
    mdp.gamma = 1.0;
    mdp.horizon = 1;
    mdp.reward_bound = 10.0;
    mdp.transition = Eigen::MatrixXd::Ones(1, 1);
    mdp.start_dist = Eigen::VectorXd::Ones(1);
    mdp.terminal = {0};
    mdp.reward_sampler = [](int, int, int, RngStream& rng) { return 2.0 + rng.normal(); };
    mdp.analytic_mean = [](int, int) { return 2.0; };
    mdp.analytic_var = [](int, int) { return 1.0; };
    mdp.validate();

    PolicyArtifact pol;
    pol.kind = "greedy-q";
    pol.table = Eigen::MatrixXd::Zero(1, 1);
    const RolloutMetrics m = rollout_policy(mdp, pol, 0, 2000, 0, 31);
    CHECK(m.n_episodes == 2000);
    CHECK(std::abs(m.mean_return - 2.0) <= 4.0 / std::sqrt(2000.0));
    CHECK(m.state_risk[0] > 0.8);
    CHECK(m.state_risk[0] < 1.2);
    CHECK(std::abs(m.std_return - 1.0) <= 0.1);
}

TEST_CASE("experiment config: defaults, seed generation and validation") {
    const fs::path dir = fresh_dir("cfg");
    const KeyValueConfig kv =
        KeyValueConfig::parse_string(grid_config_text((dir / "out").string()));
    const ExperimentConfig cfg = parse_experiment_config(kv);
    CHECK(cfg.env_type == "grid");
    CHECK(cfg.algorithm == "cmv-q");
    CHECK(cfg.schedule.n_steps == 4000);
    CHECK(cfg.schedule.epsilon == 0.2);
    REQUIRE(cfg.beta_sweep.size() == 2);
    CHECK(cfg.beta_sweep[1] == 1.0);
    REQUIRE(cfg.seeds.size() == 2);
    CHECK(cfg.seeds[0] == 11);
    CHECK(cfg.rollout_steps == 3000);
    CHECK(cfg.rollout_episodes == 0);
    CHECK(cfg.output_dir == (dir / "out").string());

    // No seed list: a consecutive block from seed_base.
    KeyValueConfig defaults = KeyValueConfig::parse_string(
        "[environment]\ntype = grid\n[algorithm]\nname = cmv-q\n"
        "[sweep]\nbeta = 0\nseed_base = 7\n[rollout]\nn_episodes = 10\n");
    const ExperimentConfig dcfg = parse_experiment_config(defaults);
    REQUIRE(dcfg.seeds.size() == static_cast<std::size_t>(kDefaultSeedCount));
    CHECK(dcfg.seeds.front() == 7);
    CHECK(dcfg.seeds.back() == static_cast<std::uint64_t>(7 + kDefaultSeedCount - 1));

    auto reject = [&](const std::string& text) {
        CHECK_THROWS_AS((void)parse_experiment_config(KeyValueConfig::parse_string(text)),
                        ConfigError);
    };
    // Empty beta sweep and empty seed list.
    reject("[environment]\ntype = grid\n[algorithm]\nname = cmv-q\n"
           "[sweep]\nbeta =\n[rollout]\nn_episodes = 10\n");
    reject("[environment]\ntype = grid\n[algorithm]\nname = cmv-q\n"
           "[sweep]\nbeta = 0\nseeds =\n[rollout]\nn_episodes = 10\n");
    // Unknown names.
    reject("[environment]\ntype = lunar\n[algorithm]\nname = cmv-q\n"
           "[sweep]\nbeta = 0\n[rollout]\nn_episodes = 10\n");
    reject("[environment]\ntype = grid\n[algorithm]\nname = dream-q\n"
           "[sweep]\nbeta = 0\n[rollout]\nn_episodes = 10\n");
    // Rollout budget must be exactly one of steps/episodes.
    reject("[environment]\ntype = grid\n[algorithm]\nname = cmv-q\n"
           "[sweep]\nbeta = 0\n[rollout]\nn_episodes = 10\nn_steps = 10\n");
    reject("[environment]\ntype = grid\n[algorithm]\nname = cmv-q\n"
           "[sweep]\nbeta = 0\n");
    // cvar-pg needs tail levels strictly inside (0, 1).
    reject("[environment]\ntype = portfolio\n[algorithm]\nname = cvar-pg\n"
           "[sweep]\nbeta = 0.95, 1.2\n[rollout]\nn_episodes = 10\n");
    // Negative risk weight.
    reject("[environment]\ntype = grid\n[algorithm]\nname = cmv-q\n"
           "[sweep]\nbeta = -1\n[rollout]\nn_episodes = 10\n");
    // Average-reward methods cannot run on an environment with a terminal state.
    reject("[environment]\ntype = grid\n[algorithm]\nname = cmv-r\n"
           "[sweep]\nbeta = 0\n[rollout]\nn_episodes = 10\n");
    reject("[environment]\ntype = grid\n[algorithm]\nname = ac-average\n"
           "[sweep]\nbeta = 0\n[rollout]\nn_episodes = 10\n");
    // Replay estimator only fits the batch chaotic-penalty algorithms.
    reject("[environment]\ntype = grid\n[algorithm]\nname = mv-reinforce\n"
           "estimator = replay\n[sweep]\nbeta = 0\n[rollout]\nn_episodes = 10\n");
    CHECK_NOTHROW((void)parse_experiment_config(KeyValueConfig::parse_string(
        "[environment]\ntype = grid\n[algorithm]\nname = cmv-reinforce\n"
        "estimator = replay\n[sweep]\nbeta = 0\n[rollout]\nn_episodes = 10\n")));
}

TEST_CASE("run_cell: pure, deterministic, correct artifact kind") {
    const fs::path dir = fresh_dir("cell");
    const ExperimentConfig cfg = parse_experiment_config(
        KeyValueConfig::parse_string(grid_config_text((dir / "out").string())));
    const CellResult a = run_cell(cfg, 1.0, 11);
    const CellResult b = run_cell(cfg, 1.0, 11);
    CHECK(a.policy.kind == "greedy-q");
    CHECK(same_matrix(a.policy.table, b.policy.table));
    CHECK(a.metrics.mean_return == b.metrics.mean_return);
    CHECK(a.metrics.std_return == b.metrics.std_return);
    CHECK(a.metrics.total_steps == 3000);
    CHECK(same_matrix(a.metrics.occupancy, b.metrics.occupancy));
    CHECK(std::abs(a.metrics.occupancy.sum() - 1.0) <= 1e-12);
}

TEST_CASE("run_experiment: byte-identical artifacts across runs and job counts") {
    const fs::path base = fresh_dir("determinism");
    const auto cfg_for = [&](const std::string& sub) {
        return parse_experiment_config(
            KeyValueConfig::parse_string(grid_config_text((base / sub).string())));
    };
    const ExperimentResult r1 = run_experiment(cfg_for("a"), 1, RunMode::Full);
    const ExperimentResult r4 = run_experiment(cfg_for("b"), 4, RunMode::Full);
    const ExperimentResult r2 = run_experiment(cfg_for("c"), 2, RunMode::Full);

    REQUIRE(r1.artifacts == r4.artifacts);
    REQUIRE(r1.artifacts == r2.artifacts);
    REQUIRE(!r1.artifacts.empty());
    for (const std::string& name : r1.artifacts) {
        const std::string bytes_a = read_bytes(base / "a" / name);
        CHECK(bytes_a == read_bytes(base / "b" / name));
        CHECK(bytes_a == read_bytes(base / "c" / name));
    }

    // Cell order is (beta index, seed index); results match single cells.
    REQUIRE(r1.cells.size() == 4);
    CHECK(r1.cells[0].beta == 0.0);
    CHECK(r1.cells[0].seed == 11);
    CHECK(r1.cells[3].beta == 1.0);
    CHECK(r1.cells[3].seed == 12);
    const CellResult lone = run_cell(cfg_for("a"), 1.0, 12);
    CHECK(same_matrix(lone.policy.table, r1.cells[3].policy.table));
    CHECK(lone.metrics.mean_return == r1.cells[3].metrics.mean_return);
}

TEST_CASE("run_experiment: seed averages are arithmetic means of cell statistics") {
    const fs::path dir = fresh_dir("averaging");
    const ExperimentConfig cfg = parse_experiment_config(
        KeyValueConfig::parse_string(grid_config_text((dir / "out").string())));
    const ExperimentResult r = run_experiment(cfg, 2, RunMode::Full);
    REQUIRE(r.summary.size() == 2);
    const std::size_t ns = cfg.seeds.size();
    for (std::size_t bi = 0; bi < r.summary.size(); ++bi) {
        double mean_sum = 0.0, std_sum = 0.0;
        Eigen::VectorXd occ = Eigen::VectorXd::Zero(r.summary[bi].occupancy.size());
        Eigen::VectorXd risk = Eigen::VectorXd::Zero(r.summary[bi].state_risk.size());
        for (std::size_t si = 0; si < ns; ++si) {
            const RolloutMetrics& m = r.cells[bi * ns + si].metrics;
            mean_sum += m.mean_return;
            std_sum += m.std_return;
            occ += m.occupancy;
            risk += m.state_risk;
        }
        const double dn = static_cast<double>(ns);
        CHECK(std::abs(r.summary[bi].mean_return - mean_sum / dn) <= 1e-12);
        CHECK(std::abs(r.summary[bi].std_return - std_sum / dn) <= 1e-12);
        CHECK((r.summary[bi].occupancy - occ / dn).cwiseAbs().maxCoeff() <= 1e-12);
        CHECK((r.summary[bi].state_risk - risk / dn).cwiseAbs().maxCoeff() <= 1e-12);
        CHECK(std::abs(r.summary[bi].occupancy.sum() - 1.0) <= 1e-12);
        CHECK(std::abs(r.summary[bi].action_fraction.sum() - 1.0) <= 1e-12);
    }
}

TEST_CASE("run_experiment: manifest checksums match the files on disk") {
    const fs::path dir = fresh_dir("manifest");
    const ExperimentConfig cfg = parse_experiment_config(
        KeyValueConfig::parse_string(grid_config_text((dir / "out").string())));
    const ExperimentResult r = run_experiment(cfg, 1, RunMode::Full);

    const nlohmann::json manifest =
        nlohmann::json::parse(read_bytes(dir / "out" / "manifest.json"));
    CHECK(manifest["environment"] == "grid");
    CHECK(manifest["algorithm"] == "cmv-q");
    CHECK(manifest["mode"] == "full");
    CHECK(manifest["config_hash"].get<std::string>().size() == 8);
    CHECK(manifest["betas"].size() == 2);
    CHECK(manifest["seeds"].size() == 2);
    CHECK(manifest["seeds"][0].get<std::uint64_t>() == 11);

    // Everything the run reported, minus the manifest itself, is listed with
    // correct sizes and CRC-32 checksums.
    REQUIRE(r.artifacts.back() == "manifest.json");
    REQUIRE(manifest["artifacts"].size() == r.artifacts.size() - 1);
    for (std::size_t i = 0; i + 1 < r.artifacts.size(); ++i) {
        const auto& entry = manifest["artifacts"][i];
        CHECK(entry["name"] == r.artifacts[i]);
        const std::string bytes = read_bytes(dir / "out" / r.artifacts[i]);
        CHECK(entry["bytes"].get<std::size_t>() == bytes.size());
        char crc[16];
        std::snprintf(crc, sizeof(crc), "%08x", crc32_bytes(bytes.data(), bytes.size()));
        CHECK(entry["crc32"].get<std::string>() == crc);
    }

    // Grid runs also emit visitation/risk matrices; the PNG is a pure
    // function of its CSV (the CSV is the ground truth).
    const CsvTable visits = read_csv((dir / "out" / "visits_b0.csv").string());
    REQUIRE(visits.rows.size() == 4);
    REQUIRE(visits.rows[0].size() == 4);
    double total = 0.0;
    for (const auto& row : visits.rows)
        for (double v : row) total += v;
    CHECK(std::abs(total - 3000.0) <= 1e-9);  // step budget, averaged over seeds
    const std::vector<std::uint8_t> png = encode_png(render_heatmap(visits.rows));
    const std::string png_disk = read_bytes(dir / "out" / "visits_b0.png");
    REQUIRE(png_disk.size() == png.size());
    CHECK(std::memcmp(png_disk.data(), png.data(), png.size()) == 0);
}

TEST_CASE("run_experiment: train-only mode keeps policies and logs, no rollouts") {
    const fs::path dir = fresh_dir("train_only");
    const ExperimentConfig cfg = parse_experiment_config(
        KeyValueConfig::parse_string(grid_config_text((dir / "out").string())));
    const ExperimentResult r = run_experiment(cfg, 2, RunMode::TrainOnly);
    CHECK(r.summary.empty());
    CHECK(fs::exists(dir / "out" / "policy_b0_s0.csv"));
    CHECK(fs::exists(dir / "out" / "policy_b1_s1.csv"));
    CHECK(fs::exists(dir / "out" / "manifest.json"));
    CHECK(!fs::exists(dir / "out" / "summary.csv"));
    CHECK(!fs::exists(dir / "out" / "cells.csv"));
    const nlohmann::json manifest =
        nlohmann::json::parse(read_bytes(dir / "out" / "manifest.json"));
    CHECK(manifest["mode"] == "train");
}

TEST_CASE("run_experiment: batch policy gradients leave per-iteration logs") {
    const fs::path dir = fresh_dir("pg_logs");
    const ExperimentConfig cfg = parse_experiment_config(KeyValueConfig::parse_string(
        "[environment]\ntype = regime-switch\nsigma = 0.2\nhorizon = 5\n"
        "[algorithm]\nname = cmv-reinforce\nbatch_size = 8\nn_iterations = 5\n"
        "alpha_n = 0.02\n"
        "[sweep]\nbeta = 0, 0.5\nseeds = 1, 2\n"
        "[rollout]\nn_episodes = 50\n"
        "[output]\ndir = " +
        (dir / "out").string() + "\n"));
    const ExperimentResult r = run_experiment(cfg, 2, RunMode::Full);
    CHECK(r.cells[0].policy.kind == "softmax-theta");
    const CsvTable log = read_csv((dir / "out" / "train_b1_s0.csv").string());
    CHECK(log.header == std::vector<std::string>{"iteration", "mean_return", "mean_penalty"});
    REQUIRE(log.rows.size() == 5);
    CHECK(log.rows[4][0] == 4.0);
    // All regime episodes run the fixed horizon; returns are finite numbers.
    for (const auto& row : log.rows) CHECK(std::isfinite(row[1]));
    // Occupancy over the two iid regimes stays normalized.
    CHECK(std::abs(r.summary[0].occupancy.sum() - 1.0) <= 1e-12);
}

TEST_CASE("cli: sweep, report, rollout, train, diagnose") {
    const fs::path dir = fresh_dir("cli");
    const fs::path out = dir / "out";
    const fs::path cfg_path = dir / "exp.ini";
    write_text(cfg_path, grid_config_text(out.string()));

    REQUIRE(run_cli("sweep --config " + cfg_path.string() + " --jobs 2") == 0);
    CHECK(fs::exists(out / "summary.csv"));
    CHECK(fs::exists(out / "manifest.json"));

    // report re-aggregates cells.csv and must agree with summary.csv.
    REQUIRE(run_cli("report --out " + out.string()) == 0);
    const CsvTable report = read_csv((out / "report.csv").string());
    const CsvTable summary = read_csv((out / "summary.csv").string());
    REQUIRE(report.rows.size() == summary.rows.size());
    for (std::size_t i = 0; i < report.rows.size(); ++i)
        CHECK(report.at(i, "mean_return") == summary.at(i, "mean_return"));

    // An external rollout of the saved policy with the config's first seed
    // reproduces the sweep cell's metrics exactly.
    REQUIRE(run_cli("rollout --config " + cfg_path.string() + " --policy " +
                    (out / "policy_b0_s0.csv").string()) == 0);
    const CsvTable rm = read_csv((out / "rollout_metrics.csv").string());
    const CsvTable cells = read_csv((out / "cells.csv").string());
    CHECK(rm.at(0, "mean_return") == cells.at(0, "mean_return"));
    CHECK(rm.at(0, "std_return") == cells.at(0, "std_return"));
    CHECK(rm.at(0, "total_steps") == cells.at(0, "total_steps"));

    // train-only into a second directory: policies, no summaries.
    const fs::path out2 = dir / "out2";
    REQUIRE(run_cli("train --config " + cfg_path.string() + " --out " + out2.string()) == 0);
    CHECK(fs::exists(out2 / "policy_b1_s1.csv"));
    CHECK(!fs::exists(out2 / "summary.csv"));

    // Seed override narrows the sweep.
    const fs::path out3 = dir / "out3";
    REQUIRE(run_cli("sweep --config " + cfg_path.string() + " --out " + out3.string() +
                    " --seeds 5") == 0);
    const CsvTable cells3 = read_csv((out3 / "cells.csv").string());
    REQUIRE(cells3.rows.size() == 2);  // 2 betas x 1 seed
    CHECK(cells3.at(0, "seed") == 5.0);

    // diagnose runs the martingale / reconstruction / gradient checks.
    const fs::path out4 = dir / "out4";
    REQUIRE(run_cli("diagnose --config " + cfg_path.string() + " --out " + out4.string()) == 0);
    const CsvTable diag = read_csv((out4 / "diagnostics.csv").string());
    CHECK(diag.at(0, "martingale_pass") == 1.0);
    CHECK(diag.at(0, "recon_max_residual") <= 1e-8);

    // Failure modes: missing config, bad config, no subcommand.
    CHECK(run_cli("sweep --config " + (dir / "missing.ini").string()) != 0);
    write_text(dir / "bad.ini", "[algorithm]\nname = dream-q\n");
    CHECK(run_cli("sweep --config " + (dir / "bad.ini").string()) == 2);
    CHECK(run_cli("") != 0);
}
