#pragma once

#include <algorithm>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "flashmem/backbone.hpp"
#include "flashmem/common.hpp"
#include "flashmem/consolidator.hpp"
#include "flashmem/optimizer.hpp"

namespace flashmem {

struct TrainingExample {
    std::vector<int> x;
    std::vector<int> y;
};

enum class SyntheticTask { key_value_recall, modular_addition };

/// Synthetic stand-in corpus: answers are deterministic functions of x.
struct SyntheticTaskSpec {
    SyntheticTask task = SyntheticTask::key_value_recall;
    std::size_t n_pairs = 8;
    std::size_t distractor_len = 64;
    std::size_t modulus = 97;  // modular_addition only
    std::uint64_t seed = 0;
    // token ranges within the byte-level vocabulary
    int bos = 6, eq = 1, sep = 2, query = 3, qmark = 4, plus = 5;
    int key_base = 16, key_range = 120;
    int value_base = 136, value_range = 64;
    int distractor_base = 200, distractor_range = 56;
};

namespace detail {

inline TrainingExample make_example(const SyntheticTaskSpec& spec, Rng& rng) {
    TrainingExample ex;
    if (spec.task == SyntheticTask::key_value_recall) {
        if (spec.n_pairs > static_cast<std::size_t>(spec.key_range))
            throw config_error("synthetic dataset: vocabulary key range too small for n_pairs");
        std::vector<int> keys(static_cast<std::size_t>(spec.key_range));
        for (std::size_t i = 0; i < keys.size(); ++i) keys[i] = spec.key_base + static_cast<int>(i);
        std::shuffle(keys.begin(), keys.end(), rng);
        keys.resize(spec.n_pairs);
        std::uniform_int_distribution<int> val_dist(0, spec.value_range - 1);
        std::vector<int> values;
        ex.x.push_back(spec.bos);
        for (std::size_t i = 0; i < spec.n_pairs; ++i) {
            values.push_back(spec.value_base + val_dist(rng));
            ex.x.push_back(keys[i]);
            ex.x.push_back(spec.eq);
            ex.x.push_back(values.back());
            ex.x.push_back(spec.sep);
        }
        std::uniform_int_distribution<int> dis_dist(0, spec.distractor_range - 1);
        for (std::size_t i = 0; i < spec.distractor_len; ++i)
            ex.x.push_back(spec.distractor_base + dis_dist(rng));
        std::uniform_int_distribution<std::size_t> which(0, spec.n_pairs - 1);
        const std::size_t q = which(rng);
        ex.x.push_back(spec.query);
        ex.x.push_back(keys[q]);
        ex.x.push_back(spec.qmark);
        ex.y.push_back(values[q]);
    } else {
        if (spec.modulus > static_cast<std::size_t>(spec.key_range) ||
            spec.modulus > static_cast<std::size_t>(spec.value_range))
            throw config_error("synthetic dataset: modulus exceeds operand/value token ranges");
        std::uniform_int_distribution<int> operand(0, static_cast<int>(spec.modulus) - 1);
        const int a = operand(rng), b = operand(rng);
        ex.x = {spec.bos, spec.key_base + a, spec.plus, spec.key_base + b, spec.eq};
        ex.y = {spec.value_base + (a + b) % static_cast<int>(spec.modulus)};
    }
    return ex;
}

inline std::string example_fingerprint(const TrainingExample& ex) {
    std::string s;
    for (int t : ex.x) s += std::to_string(t) + ",";
    s += "|";
    for (int t : ex.y) s += std::to_string(t) + ",";
    return s;
}

}  // namespace detail

struct Datasets {
    std::vector<TrainingExample> train;
    std::vector<TrainingExample> heldout;
};

/// Deterministic from the spec seed; heldout drawn from a disjoint stream and
/// train filtered so no heldout sequence ever appears in train.
inline Datasets make_synthetic_dataset(const SyntheticTaskSpec& spec, std::size_t n_train, std::size_t n_heldout) {
    Datasets out;
    Rng held_rng = make_rng(spec.seed ^ 0x9E3779B97F4A7C15ull);
    std::set<std::string> heldout_keys;
    for (std::size_t i = 0; i < n_heldout; ++i) {
        out.heldout.push_back(detail::make_example(spec, held_rng));
        heldout_keys.insert(detail::example_fingerprint(out.heldout.back()));
    }
    Rng train_rng = make_rng(spec.seed);
    std::size_t guard = 0;
    while (out.train.size() < n_train) {
        TrainingExample ex = detail::make_example(spec, train_rng);
        if (!heldout_keys.count(detail::example_fingerprint(ex))) out.train.push_back(std::move(ex));
        if (++guard > n_train * 100 + 1000)
            throw config_error("synthetic dataset: cannot draw enough train examples disjoint from heldout");
    }
    return out;
}

inline void write_dataset(const std::string& path, const std::vector<TrainingExample>& data) {
    std::ofstream os(path);
    if (!os) throw format_error("dataset: cannot open '" + path + "' for writing");
    for (const auto& ex : data) os << nlohmann::json{{"x", ex.x}, {"y", ex.y}}.dump() << "\n";
}

inline std::vector<TrainingExample> read_dataset(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw format_error("dataset: cannot open '" + path + "'");
    std::vector<TrainingExample> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        out.push_back({j.at("x").get<std::vector<int>>(), j.at("y").get<std::vector<int>>()});
    }
    return out;
}

constexpr int kIgnoreLabel = -100;

/// Labels aligned to S = [x, M_gen, y]: the ignore sentinel everywhere except
/// the y positions.
inline std::vector<int> build_labels(const TrainingExample& ex, std::size_t k_memory) {
    std::vector<int> labels(ex.x.size() + k_memory + ex.y.size(), kIgnoreLabel);
    for (std::size_t i = 0; i < ex.y.size(); ++i) labels[ex.x.size() + k_memory + i] = ex.y[i];
    return labels;
}

/// Mean cross-entropy over positions with label != -100. logits[i] is the
/// model's distribution over S[i].
template <typename T>
Tensor<T> masked_loss(Tape<T>* tape, const Tensor<T>& logits, const std::vector<int>& labels) {
    return cross_entropy_masked(tape, logits, labels);
}

/// Tracked loss of one example through the full memory path: prefill x,
/// project h_t, generate K latents, soft-inject, teacher-force y. Gradients
/// reach only the consolidator and projection MLP; the backbone is frozen.
template <typename T>
Tensor<T> memory_loss(Tape<T>* tape, const Backbone<T>& backbone, Consolidator<T>& consolidator,
                      const TrainingExample& ex) {
    if (ex.x.empty() || ex.y.empty()) throw contract_error("memory_loss: x and y must be non-empty");
    const std::size_t K = consolidator.cfg.n_memory_tokens;
    if (ex.x.size() + K + ex.y.size() > backbone.cfg.max_positions)
        throw capacity_error("memory_loss: |x| + K + |y| exceeds max_positions");
    auto [cache, out] = prefill(backbone, ex.x);
    Tensor<T> m0 = consolidator.project_state(tape, out.last_hidden);
    std::vector<Tensor<T>> latents = consolidator.generate_latents(tape, m0, cache);
    // soft injection; logits of the last latent position predict y[0]
    Tensor<T> pred_rows;  // [|y|, vocab]
    for (std::size_t i = 0; i < latents.size(); ++i) {
        StepOutput<T> so = decode_step(tape, backbone, latents[i], cache);
        if (i + 1 == latents.size()) pred_rows = so.logits;
    }
    for (std::size_t t = 0; t + 1 < ex.y.size(); ++t) {
        StepOutput<T> so = decode_step(tape, backbone, ex.y[t], cache);
        pred_rows = concat_rows(tape, pred_rows, so.logits);
    }
    Tensor<T> masked_block = Tensor<T>::zeros({ex.x.size() + K, backbone.cfg.vocab_size});
    Tensor<T> s_logits = concat_rows(tape, masked_block, pred_rows);
    return masked_loss(tape, s_logits, build_labels(ex, K));
}

/// Counterfactual loss of the same frozen backbone with no injected memory.
template <typename T>
T no_memory_loss(const Backbone<T>& backbone, const TrainingExample& ex) {
    if (ex.x.empty() || ex.y.empty()) throw contract_error("no_memory_loss: x and y must be non-empty");
    auto [cache, out] = prefill(backbone, ex.x);
    Tensor<T> pred_rows = out.logits;
    for (std::size_t t = 0; t + 1 < ex.y.size(); ++t) {
        StepOutput<T> so = decode_step<T>(nullptr, backbone, ex.y[t], cache);
        pred_rows = concat_rows<T>(nullptr, pred_rows, so.logits);
    }
    std::vector<int> labels = ex.y;
    return cross_entropy_masked<T>(nullptr, pred_rows, labels).data[0];
}

template <typename T>
struct TrainMetrics {
    T loss = T(0);
    T grad_norm = T(0);  // pre-clip global norm
    T lr = T(0);
};

/// One optimization step over a batch: accumulate per-example gradients,
/// verify the freeze contract, clip to the configured norm, AdamW update.
template <typename T>
TrainMetrics<T> train_step(const std::vector<TrainingExample>& batch, const Backbone<T>& backbone,
                           Consolidator<T>& consolidator, AdamW<T>& opt, std::size_t step_index,
                           const OptimizerConfig<T>& cfg) {
    if (batch.empty()) throw contract_error("train_step: empty batch");
    std::vector<Parameter<T>*> psi = consolidator.parameters();
    for (Parameter<T>* p : psi) p->zero_grad();
    TrainMetrics<T> metrics;
    const T inv_b = T(1) / static_cast<T>(batch.size());
    for (const TrainingExample& ex : batch) {
        Tape<T> tape;
        Tensor<T> loss = memory_loss(&tape, backbone, consolidator, ex);
        metrics.loss += loss.data[0] * inv_b;
        tape.backward(scale(&tape, loss, inv_b));
    }
    for (Parameter<T>* p : const_cast<Backbone<T>&>(backbone).parameters())
        for (T g : p->grad.data)
            if (g != T(0)) throw frozen_violation_error("train_step: nonzero gradient on frozen backbone parameter " +
                                                        p->name);
    metrics.grad_norm = clip_global_norm(psi, cfg.grad_clip);
    metrics.lr = opt.step(psi, step_index, cfg);
    return metrics;
}

/// Mean heldout masked cross-entropy with and without injected memory.
template <typename T>
std::pair<T, T> evaluate(const Backbone<T>& backbone, Consolidator<T>& consolidator,
                         const std::vector<TrainingExample>& data) {
    T with_mem = T(0), without_mem = T(0);
    for (const auto& ex : data) {
        with_mem += memory_loss<T>(nullptr, backbone, consolidator, ex).data[0];
        without_mem += no_memory_loss(backbone, ex);
    }
    const T inv = T(1) / static_cast<T>(data.size());
    return {with_mem * inv, without_mem * inv};
}

}  // namespace flashmem
