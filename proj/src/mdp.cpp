#include "chaosrl/mdp.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace chaosrl {

void TabularMDP::validate() {
    if (n_states <= 0 || n_actions <= 0)
        throw ConfigError("MDP needs positive state and action counts");
    if (!(gamma > 0.0) || gamma > 1.0)
        throw ConfigError("gamma must lie in (0, 1]");
    if (transition.rows() != static_cast<Eigen::Index>(n_states) * n_actions ||
        transition.cols() != n_states)
        throw ConfigError("transition kernel has wrong shape");
    if (start_dist.size() != n_states)
        throw ConfigError("start distribution has wrong length");
    if (terminal.size() != static_cast<std::size_t>(n_states))
        throw ConfigError("terminal mask has wrong length");
    if (!reward_sampler)
        throw ConfigError("reward sampler not set");

    bool any_terminal = false;
    for (auto t : terminal) any_terminal = any_terminal || (t != 0);
    if (gamma == 1.0 && !any_terminal && horizon <= 0)
        throw ConfigError("gamma = 1 requires terminal states or a fixed horizon");

    auto check_row = [](const Eigen::VectorXd& p, const char* what) {
        double sum = 0.0;
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            if (p[i] < 0.0) throw ConfigError(std::string(what) + ": negative probability");
            sum += p[i];
        }
        if (std::abs(sum - 1.0) > 1e-12)
            throw ConfigError(std::string(what) + ": row sum deviates from 1 by more than 1e-12");
    };
    check_row(start_dist, "start distribution");
    for (int s = 0; s < n_states; ++s)
        for (int a = 0; a < n_actions; ++a)
            check_row(transition.row(row(s, a)).transpose(), "transition row");

    transition_cdf.resize(transition.rows(), transition.cols());
    for (Eigen::Index r = 0; r < transition.rows(); ++r) {
        double acc = 0.0;
        for (Eigen::Index c = 0; c < transition.cols(); ++c) {
            acc += transition(r, c);
            transition_cdf(r, c) = acc;
        }
    }
}

std::pair<int, double> TabularMDP::step(int s, int a, RngStream& rng) const {
    if (s < 0 || s >= n_states)
        throw InvalidActionError("state " + std::to_string(s) + " out of range");
    if (a < 0 || a >= n_actions)
        throw InvalidActionError("action " + std::to_string(a) + " out of range");
    const double u = rng.u01();
    const Eigen::Index r_ix = row(s, a);
    int s_next = n_states - 1;
    for (int i = 0; i < n_states; ++i)
        if (u < transition_cdf(r_ix, i)) {
            s_next = i;
            break;
        }
    const double r = reward_sampler(s, a, s_next, rng);
    return {s_next, r};
}

int TabularMDP::sample_start(RngStream& rng) const {
    double acc = 0.0;
    const double u = rng.u01();
    for (int i = 0; i < n_states; ++i) {
        acc += start_dist[i];
        if (u < acc) return i;
    }
    return n_states - 1;
}

double episode_return(const Episode& ep, double gamma) {
    double g = 0.0, w = 1.0;
    for (const auto& tr : ep.steps) {
        g += w * tr.reward;
        w *= gamma;
    }
    return g;
}

void write_episode(std::ostream& os, const Episode& ep) {
    os << "# start=" << ep.start_state << " terminated=" << (ep.terminated ? 1 : 0) << "\n";
    os << "t,s,a,r,s_next\n";
    char buf[64];
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
        const auto& tr = ep.steps[t];
        std::snprintf(buf, sizeof buf, "%.17g", tr.reward);
        os << t << ',' << tr.state << ',' << tr.action << ',' << buf << ',' << tr.next_state
           << "\n";
    }
}

Episode read_episode(std::istream& is) {
    std::string line;
    Episode ep;
    bool have_meta = false;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            int term = 0;
            if (std::sscanf(line.c_str(), "# start=%d terminated=%d", &ep.start_state, &term) != 2)
                throw ConfigError("bad episode metadata line: " + line);
            ep.terminated = term != 0;
            have_meta = true;
            continue;
        }
        if (line.rfind("t,s,a,r,s_next", 0) == 0) {
            if (!have_meta) throw ConfigError("episode header without metadata line");
            break;
        }
        throw ConfigError("unexpected line in episode file: " + line);
    }
    if (!have_meta) throw NoDataError("no episode found in stream");
    while (is.peek() != EOF && is.peek() != '#') {
        if (!std::getline(is, line)) break;
        if (line.empty()) continue;
        Transition tr{};
        int t = 0;
        if (std::sscanf(line.c_str(), "%d,%d,%d,%lg,%d", &t, &tr.state, &tr.action, &tr.reward,
                        &tr.next_state) != 5)
            throw ConfigError("bad transition line: " + line);
        ep.steps.push_back(tr);
    }
    return ep;
}

void write_episodes_file(const std::string& path, const std::vector<Episode>& eps) {
    std::ofstream os(path);
    if (!os) throw ConfigError("cannot open " + path + " for writing");
    for (const auto& ep : eps) write_episode(os, ep);
}

std::vector<Episode> read_episodes_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open " + path);
    std::vector<Episode> eps;
    while (is.peek() != EOF) {
        if (is.peek() == '\n') {
            is.get();
            continue;
        }
        eps.push_back(read_episode(is));
    }
    return eps;
}

}  // namespace chaosrl
