// Shared error types for the chaotic mean-variance RL library.
#pragma once

#include <stdexcept>
#include <string>

namespace chaosrl {

// A policy or caller handed us a state/action outside the MDP's index range.
struct InvalidActionError : std::runtime_error {
    explicit InvalidActionError(const std::string& what) : std::runtime_error(what) {}
};

// A conditional-mean estimate was requested for a never-visited (s, a) pair.
struct MissingEstimateError : std::runtime_error {
    explicit MissingEstimateError(const std::string& what) : std::runtime_error(what) {}
};

// An operation that needs data (replay samples, episodes, ...) got none.
struct NoDataError : std::runtime_error {
    explicit NoDataError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed or inconsistent configuration (files, parameter structs, kernels).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// A requested mode is outside what the algorithm supports (e.g. discounting
// where only the undiscounted episodic update is defined).
struct UnsupportedModeError : std::runtime_error {
    explicit UnsupportedModeError(const std::string& what) : std::runtime_error(what) {}
};

// A linear solve or iterative procedure failed beyond expected conditioning
// (singular system past the known rank deficiency, residual out of tolerance).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace chaosrl
