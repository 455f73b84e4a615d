// Tabular MDP core: kernel + sampled rewards, episodes, episode simulation
// and the plain-text episode format.
#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "chaosrl/common.hpp"
#include "chaosrl/rng.hpp"

namespace chaosrl {

// One environment transition (s_t, a_t, R_{t+1}, s_{t+1}).
struct Transition {
    int state;
    int action;
    double reward;
    int next_state;
};

struct Episode {
    int start_state = 0;
    bool terminated = false;  // true iff the episode ended in a terminal state
    std::vector<Transition> steps;

    int length() const { return static_cast<int>(steps.size()); }
};

// Finite MDP with a tabular transition kernel and a sampled scalar reward.
//
// transition is (n_states * n_actions) x n_states; row s * n_actions + a is
// the distribution of s_{t+1} given (s_t = s, a_t = a).  reward_sampler draws
// R_{t+1} given (s, a, s') and may consume noise from the stream.  Episodic
// problems either flag terminal states or fix a horizon (fixed-horizon
// environments have no terminal state; sampling stops after `horizon` steps).
struct TabularMDP {
    int n_states = 0;
    int n_actions = 0;
    double gamma = 1.0;
    double reward_bound = 0.0;  // declared |R| bound (diagnostic metadata)
    int horizon = 0;            // 0 = none; else fixed episode length

    Eigen::MatrixXd transition;      // rows: s * n_actions + a, cols: s'
    Eigen::VectorXd start_dist;      // distribution of s_0
    std::vector<std::uint8_t> terminal;  // size n_states, 1 = terminal

    std::function<double(int s, int a, int s_next, RngStream&)> reward_sampler;

    // Exact conditional moments of R_{t+1} given (s, a), where the
    // environment can supply them in closed form (all bundled ones can).
    std::function<double(int s, int a)> analytic_mean;
    std::function<double(int s, int a)> analytic_var;

    // Per-(s,a) inclusive prefix sums of `transition`, built by validate().
    Eigen::MatrixXd transition_cdf;

    int row(int s, int a) const { return s * n_actions + a; }
    bool is_terminal(int s) const { return terminal[static_cast<std::size_t>(s)] != 0; }

    // Checks stochasticity (row sums within 1e-12 of 1, entries >= 0),
    // gamma in (0, 1], and that gamma = 1 comes with terminal states or a
    // fixed horizon.  Also precomputes transition_cdf.  Throws ConfigError.
    void validate();

    // Draw s' ~ P(. | s, a) and R ~ reward law; asserts index ranges.
    std::pair<int, double> step(int s, int a, RngStream& rng) const;

    int sample_start(RngStream& rng) const;
};

// Simulate one episode.  Stops at a terminal state, at the MDP's fixed
// horizon, or after max_steps, whichever comes first.  Policy is any callable
// (int state, RngStream&) -> int action; an out-of-range action raises
// InvalidActionError.  Identical (mdp, policy, seed) yield bit-identical
// episodes.
template <typename Policy>
Episode sample_episode(const TabularMDP& mdp, Policy&& policy, int max_steps, RngStream& rng) {
    Episode ep;
    ep.start_state = mdp.sample_start(rng);
    int s = ep.start_state;
    int cap = max_steps;
    if (mdp.horizon > 0 && mdp.horizon < cap) cap = mdp.horizon;
    ep.steps.reserve(static_cast<std::size_t>(cap > 0 ? cap : 0));
    for (int t = 0; t < cap; ++t) {
        if (mdp.is_terminal(s)) {
            ep.terminated = true;
            return ep;
        }
        const int a = policy(s, rng);
        if (a < 0 || a >= mdp.n_actions)
            throw InvalidActionError("policy returned action " + std::to_string(a) +
                                     " outside [0, " + std::to_string(mdp.n_actions) + ")");
        auto [s_next, r] = mdp.step(s, a, rng);
        ep.steps.push_back({s, a, r, s_next});
        s = s_next;
    }
    if (mdp.is_terminal(s)) ep.terminated = true;
    return ep;
}

using PolicyFn = std::function<int(int, RngStream&)>;

// Undiscounted-return helpers used throughout logging.
double episode_return(const Episode& ep, double gamma);

// Plain-text episode format: header "t,s,a,r,s_next", one transition per
// line, rewards with 17 significant digits (round-trip exact).
void write_episode(std::ostream& os, const Episode& ep);
Episode read_episode(std::istream& is);
void write_episodes_file(const std::string& path, const std::vector<Episode>& eps);
std::vector<Episode> read_episodes_file(const std::string& path);

}  // namespace chaosrl
