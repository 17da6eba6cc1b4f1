#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace flashmem {

// Error taxonomy. Everything user-facing derives from error so the CLI can
// report a single-line diagnostic and exit nonzero.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape disagreement between operands.
struct dimension_error : error {
    using error::error;
};

// Invalid configuration values (bad hyperparameters, L >= n_layers, ...).
struct config_error : error {
    using error::error;
};

// Violated call contract (empty input, non-scalar loss, ...).
struct contract_error : error {
    using error::error;
};

// Cache or position capacity exceeded.
struct capacity_error : error {
    using error::error;
};

// Malformed checkpoint / trace / config file.
struct format_error : error {
    using error::error;
};

// A backward pass produced a nonzero gradient for a frozen parameter.
struct frozen_violation_error : error {
    using error::error;
};

// Deterministic RNG used everywhere weights or data are sampled.
using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng{seed}; }

}  // namespace flashmem
