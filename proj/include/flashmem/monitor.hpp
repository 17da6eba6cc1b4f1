#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <vector>

#include "flashmem/common.hpp"
#include "flashmem/tensor.hpp"

namespace flashmem {

/// Parameter-free cognitive monitor configuration. The module holds zero
/// trainable parameters by construction.
struct MonitorConfig {
    std::set<std::size_t> sink_indices{0};  // first cache position by default
    double threshold = std::numeric_limits<double>::quiet_NaN();  // tau; unset until calibrated
    double percentile_target = 85.0;
    double epsilon_mass = 1e-8;

    bool threshold_set() const { return !std::isnan(threshold); }
};

template <typename T>
struct EntropyRecord {
    int step = 0;
    T entropy = T(0);  // nats
    bool triggered = false;
    bool degenerate = false;  // all mass on sinks in some head
    std::vector<T> per_head_entropy;
};

template <typename T>
struct MaskedAttention {
    Tensor<T> probs;  // [n_heads, cache_len], sink columns zeroed, rows renormalized
    bool degenerate = false;
};

/// Zeroes sink columns and renormalizes each head over the remaining mass.
/// Heads whose non-sink mass falls below epsilon_mass are flagged degenerate
/// and returned as all-zero rows rather than erroring.
template <typename T>
MaskedAttention<T> mask_and_renormalize(const Tensor<T>& A, const std::set<std::size_t>& sinks,
                                        double epsilon_mass = 1e-8) {
    const std::size_t h = A.rows(), n = A.cols();
    MaskedAttention<T> out;
    out.probs = Tensor<T>::zeros({h, n});
    for (std::size_t i = 0; i < h; ++i) {
        T mass = T(0);
        for (std::size_t j = 0; j < n; ++j)
            if (!sinks.count(j)) mass += A.at(i, j);
        if (mass < static_cast<T>(epsilon_mass)) {
            out.degenerate = true;
            continue;
        }
        const T inv = T(1) / mass;
        for (std::size_t j = 0; j < n; ++j)
            if (!sinks.count(j)) out.probs.at(i, j) = A.at(i, j) * inv;
    }
    return out;
}

/// Per-head Shannon entropy in nats over non-sink indices (0*ln 0 := 0),
/// aggregated as the arithmetic mean across heads.
template <typename T>
std::pair<T, std::vector<T>> aggregate_entropy(const Tensor<T>& A_masked, const std::set<std::size_t>& sinks) {
    const std::size_t h = A_masked.rows(), n = A_masked.cols();
    std::vector<T> per_head(h, T(0));
    for (std::size_t i = 0; i < h; ++i) {
        T ent = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            if (sinks.count(j)) continue;
            const T p = A_masked.at(i, j);
            if (p > T(0)) ent -= p * std::log(p);
        }
        per_head[i] = ent;
    }
    T mean = T(0);
    for (T e : per_head) mean += e;
    mean /= static_cast<T>(h);
    return {mean, per_head};
}

/// Full monitor evaluation over a raw attention snapshot.
template <typename T>
EntropyRecord<T> monitor_entropy(const Tensor<T>& attention, const MonitorConfig& cfg, int step) {
    MaskedAttention<T> masked = mask_and_renormalize(attention, cfg.sink_indices, cfg.epsilon_mass);
    auto [mean, per_head] = aggregate_entropy(masked.probs, cfg.sink_indices);
    EntropyRecord<T> rec;
    rec.step = step;
    rec.entropy = mean;
    rec.degenerate = masked.degenerate;
    rec.per_head_entropy = std::move(per_head);
    return rec;
}

/// Strict trigger rule: H_t > tau.
inline bool should_trigger(double entropy, const MonitorConfig& cfg) {
    if (!cfg.threshold_set()) throw config_error("should_trigger: threshold is unset; calibrate first");
    return entropy > cfg.threshold;
}

/// Nearest-rank percentile: the ceil(P/100 * N)-th smallest value, 1-based,
/// clamped to [1, N].
inline double calibrate_threshold(std::vector<double> entropies, double percentile_target) {
    if (entropies.empty()) throw contract_error("calibrate_threshold: empty sample");
    if (!(percentile_target > 0.0) || percentile_target > 100.0)
        throw config_error("calibrate_threshold: percentile must be in (0, 100]");
    std::sort(entropies.begin(), entropies.end());
    const double n = static_cast<double>(entropies.size());
    std::size_t rank = static_cast<std::size_t>(std::ceil(percentile_target / 100.0 * n));
    rank = std::clamp<std::size_t>(rank, 1, entropies.size());
    return entropies[rank - 1];
}

}  // namespace flashmem
