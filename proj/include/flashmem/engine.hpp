#pragma once

#include <chrono>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "flashmem/backbone.hpp"
#include "flashmem/common.hpp"
#include "flashmem/consolidator.hpp"
#include "flashmem/monitor.hpp"

namespace flashmem {

enum class Mode { vanilla, flashmem, segregated_baseline };

inline std::string mode_name(Mode m) {
    switch (m) {
        case Mode::vanilla: return "vanilla";
        case Mode::flashmem: return "flashmem";
        case Mode::segregated_baseline: return "segregated";
    }
    return "?";
}

inline Mode mode_from_name(const std::string& s) {
    if (s == "vanilla") return Mode::vanilla;
    if (s == "flashmem") return Mode::flashmem;
    if (s == "segregated" || s == "segregated_baseline") return Mode::segregated_baseline;
    throw config_error("unknown mode '" + s + "'");
}

struct SamplingConfig {
    bool greedy = true;
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

struct GenerationConfig {
    std::size_t max_new_tokens = 64;
    SamplingConfig sampling;
    int trigger_cooldown = 16;   // min steps between triggers
    int min_trigger_step = 5;    // no trigger before this step
    Mode mode = Mode::flashmem;

    void validate() const {
        if (max_new_tokens < 1) throw config_error("generation config: max_new_tokens must be >= 1");
        if (trigger_cooldown < 0) throw config_error("generation config: trigger_cooldown must be >= 0");
    }
};

template <typename T>
struct TriggerEvent {
    int step = 0;
    T entropy_at_trigger = T(0);
    LatentMemory<T> memory;
    std::size_t cache_len_before = 0;
    double consolidation_ms = 0.0;
};

template <typename T>
struct RunTrace {
    std::vector<int> prompt_tokens;
    std::vector<int> generated_tokens;
    std::vector<EntropyRecord<T>> entropy;          // one per generated step
    std::vector<Tensor<T>> attention_snapshots;      // raw last-layer attention per step
    std::vector<TriggerEvent<T>> triggers;
    std::vector<double> step_wall_ms;
    std::size_t cache_bytes_high_water = 0;
    std::size_t final_cache_len = 0;
    std::vector<bool> final_is_latent;
};

/// Soft injection: feeds each latent embedding through the backbone,
/// appending K positions flagged is_latent. The prior cache prefix is
/// untouched.
template <typename T>
void inject(const LatentMemory<T>& memory, const Backbone<T>& backbone, KvCache<T>& cache, Tape<T>* tape = nullptr) {
    if (memory.embeddings.rows() < 1) throw config_error("inject: memory has no embeddings");
    for (std::size_t i = 0; i < memory.embeddings.rows(); ++i) {
        Tensor<T> row = take_rows(tape, memory.embeddings, i, 1);
        decode_step(tape, backbone, row, cache);
    }
}

namespace detail {

template <typename T>
int sample_token(const Tensor<T>& logits, const SamplingConfig& cfg, Rng& rng) {
    const std::size_t v = logits.size();
    if (cfg.greedy) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < v; ++j)
            if (logits.data[j] > logits.data[best]) best = j;
        return static_cast<int>(best);
    }
    if (!(cfg.temperature > 0)) throw config_error("sampling: temperature must be > 0");
    // softmax(logits / t), inverse-CDF draw
    T mx = logits.data[0];
    for (T x : logits.data) mx = std::max(mx, x);
    std::vector<double> p(v);
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
        p[j] = std::exp(static_cast<double>(logits.data[j] - mx) / cfg.temperature);
        sum += p[j];
    }
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * sum;
    double acc = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
        acc += p[j];
        if (u <= acc) return static_cast<int>(j);
    }
    return static_cast<int>(v - 1);
}

struct HistoryItem {
    int token = -1;  // -1 marks a latent position
    std::vector<double> latent_row;  // stored at full precision
};

}  // namespace detail

/// FlashMem inference loop. Per step: compute entropy from the last-layer
/// attention, consolidate and inject when triggered (respecting cooldown and
/// min_trigger_step), then sample from the pre-injection logits. vanilla mode
/// never triggers; segregated mode re-encodes the full history into a private
/// cache before each consolidation, modelling a decoupled memory generator.
template <typename T>
RunTrace<T> run(const std::vector<int>& prompt, const Backbone<T>& backbone, const MonitorConfig& monitor,
                Consolidator<T>* consolidator, const GenerationConfig& config, KvCache<T>* out_cache = nullptr) {
    config.validate();
    if (config.mode != Mode::vanilla) {
        if (!consolidator) throw contract_error("run: consolidator required outside vanilla mode");
        if (consolidator->cfg.d_model != backbone.cfg.d_model)
            throw contract_error("run: consolidator and backbone d_model mismatch");
    }
    using clock = std::chrono::steady_clock;
    RunTrace<T> trace;
    trace.prompt_tokens = prompt;
    Rng rng = make_rng(config.sampling.seed);

    auto [cache, step_out] = prefill(backbone, prompt);
    trace.cache_bytes_high_water = cache.byte_count();

    // full input history, needed only by the segregated baseline
    std::vector<detail::HistoryItem> history;
    const bool segregated = config.mode == Mode::segregated_baseline;
    if (segregated)
        for (int t : prompt) history.push_back({t, {}});

    int last_trigger_step = std::numeric_limits<int>::min() / 2;
    for (std::size_t step = 0; step < config.max_new_tokens; ++step) {
        const auto t_step0 = clock::now();
        EntropyRecord<T> rec = monitor_entropy(step_out.last_layer_attention, monitor, static_cast<int>(step));
        bool triggered = false;
        if (config.mode != Mode::vanilla && !rec.degenerate && monitor.threshold_set()) {
            const bool eligible = static_cast<int>(step) >= config.min_trigger_step &&
                                  static_cast<int>(step) - last_trigger_step >= config.trigger_cooldown;
            triggered = eligible && should_trigger(static_cast<double>(rec.entropy), monitor);
        }
        if (triggered) {
            const auto t0 = clock::now();
            TriggerEvent<T> ev;
            ev.step = static_cast<int>(step);
            ev.entropy_at_trigger = rec.entropy;
            ev.cache_len_before = cache.len();
            if (segregated) {
                // re-encode the entire history into a fresh private cache
                KvCache<T> private_cache = backbone.make_cache();
                Tensor<T> X = Tensor<T>::zeros({history.size(), backbone.cfg.d_model});
                std::vector<bool> latent_flags(history.size(), false);
                for (std::size_t i = 0; i < history.size(); ++i) {
                    if (history[i].token >= 0) {
                        const T* src =
                            &const_cast<Backbone<T>&>(backbone).tok_emb.value
                                 .data[static_cast<std::size_t>(history[i].token) * backbone.cfg.d_model];
                        std::copy_n(src, backbone.cfg.d_model, &X.data[i * backbone.cfg.d_model]);
                    } else {
                        latent_flags[i] = true;
                        for (std::size_t j = 0; j < backbone.cfg.d_model; ++j)
                            X.data[i * backbone.cfg.d_model + j] = static_cast<T>(history[i].latent_row[j]);
                    }
                }
                backbone.forward_batch(X, latent_flags, private_cache);
                trace.cache_bytes_high_water =
                    std::max(trace.cache_bytes_high_water, cache.byte_count() + private_cache.byte_count());
                ev.memory = consolidator->generate(step_out.last_hidden, private_cache, static_cast<int>(step),
                                                   rec.entropy);
            } else {
                ev.memory = consolidator->generate(step_out.last_hidden, cache, static_cast<int>(step), rec.entropy);
            }
            inject(ev.memory, backbone, cache);
            if (segregated)
                for (std::size_t i = 0; i < ev.memory.embeddings.rows(); ++i) {
                    detail::HistoryItem item;
                    item.latent_row.assign(ev.memory.embeddings.cols(), 0.0);
                    for (std::size_t j = 0; j < ev.memory.embeddings.cols(); ++j)
                        item.latent_row[j] = static_cast<double>(ev.memory.embeddings.at(i, j));
                    history.push_back(std::move(item));
                }
            ev.consolidation_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
            trace.triggers.push_back(std::move(ev));
            last_trigger_step = static_cast<int>(step);
        }
        rec.triggered = triggered;
        trace.entropy.push_back(rec);
        trace.attention_snapshots.push_back(step_out.last_layer_attention);

        const int token = detail::sample_token(step_out.logits, config.sampling, rng);
        trace.generated_tokens.push_back(token);
        if (segregated) history.push_back({token, {}});
        step_out = decode_step<T>(nullptr, backbone, token, cache);
        trace.cache_bytes_high_water = std::max(trace.cache_bytes_high_water, cache.byte_count());
        trace.step_wall_ms.push_back(std::chrono::duration<double, std::milli>(clock::now() - t_step0).count());
    }
    trace.final_cache_len = cache.len();
    trace.final_is_latent.assign(cache.is_latent.begin(), cache.is_latent.end());
    if (out_cache) *out_cache = std::move(cache);
    return trace;
}

/// Segregated re-encoding baseline: identical trigger semantics and outputs,
/// superlinear consolidation cost.
template <typename T>
RunTrace<T> run_segregated_baseline(const std::vector<int>& prompt, const Backbone<T>& backbone,
                                    const MonitorConfig& monitor, Consolidator<T>* consolidator,
                                    GenerationConfig config, KvCache<T>* out_cache = nullptr) {
    config.mode = Mode::segregated_baseline;
    return run(prompt, backbone, monitor, consolidator, config, out_cache);
}

// --------------------------------------------------------------------------
// Trace serialization: line-delimited JSON, one object per step, trigger
// events as separate records. Extension ".trace.jsonl".
// --------------------------------------------------------------------------

template <typename T>
void write_trace(const std::string& path, const RunTrace<T>& trace) {
    std::ofstream os(path);
    if (!os) throw format_error("trace: cannot open '" + path + "' for writing");
    std::size_t next_trigger = 0;
    for (std::size_t i = 0; i < trace.generated_tokens.size(); ++i) {
        while (next_trigger < trace.triggers.size() && trace.triggers[next_trigger].step == static_cast<int>(i)) {
            const auto& ev = trace.triggers[next_trigger];
            nlohmann::json j{{"step", ev.step},
                             {"entropy", static_cast<double>(ev.entropy_at_trigger)},
                             {"k", ev.memory.embeddings.rows()},
                             {"consolidation_ms", ev.consolidation_ms}};
            os << j.dump() << "\n";
            ++next_trigger;
        }
        std::size_t cache_len = trace.prompt_tokens.size() + i + 1;
        for (const auto& ev : trace.triggers)
            if (ev.step <= static_cast<int>(i)) cache_len += ev.memory.embeddings.rows();
        nlohmann::json j{{"step", i},
                         {"token", trace.generated_tokens[i]},
                         {"entropy", static_cast<double>(trace.entropy[i].entropy)},
                         {"triggered", trace.entropy[i].triggered},
                         {"wall_ms", trace.step_wall_ms[i]},
                         {"cache_len", cache_len}};
        os << j.dump() << "\n";
    }
}

/// Minimal trace view sufficient for the statistics pipeline.
struct TraceFile {
    std::vector<int> tokens;
    std::vector<double> entropies;
    std::vector<int> trigger_steps;
};

inline TraceFile read_trace(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw format_error("trace: cannot open '" + path + "'");
    TraceFile out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw format_error("trace: invalid JSON at line " + std::to_string(lineno) + ": " + e.what());
        }
        if (j.contains("k")) {
            out.trigger_steps.push_back(j.at("step"));
        } else {
            out.tokens.push_back(j.at("token"));
            out.entropies.push_back(j.at("entropy"));
        }
    }
    return out;
}

}  // namespace flashmem
