#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "flashmem/backbone.hpp"
#include "flashmem/common.hpp"
#include "flashmem/consolidator.hpp"
#include "flashmem/engine.hpp"
#include "flashmem/optimizer.hpp"
#include "flashmem/trainer.hpp"

namespace flashmem {

// --------------------------------------------------------------------------
// Cyclic efficiency benchmark: alternate fixed-length text spans with forced
// fixed-size consolidations, isolating mechanism cost from model behavior.
// --------------------------------------------------------------------------

struct BenchRow {
    std::size_t context_len = 0;
    std::string mode;
    std::size_t cache_bytes_peak = 0;  // deterministic ledger, not measured
    double consolidation_ms_mean = 0.0;
    double consolidation_ms_std = 0.0;
    double step_ms_mean = 0.0;
    double effective_throughput_tokens_per_s = 0.0;
    std::size_t n_runs = 0;
    // per-run values retained for the statistics contract
    std::vector<double> per_run_consolidation_ms_mean;
    std::vector<double> per_run_throughput;
};

struct BenchReport {
    std::vector<BenchRow> rows;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
    if (xs.empty()) return {0.0, 0.0};
    double m = 0.0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    double v = 0.0;
    for (double x : xs) v += (x - m) * (x - m);
    v /= static_cast<double>(xs.size());
    return {m, std::sqrt(v)};
}

template <typename T>
std::vector<int> synthetic_prompt(const Backbone<T>& backbone, std::size_t len, std::uint64_t seed) {
    Rng rng = make_rng(seed);
    std::uniform_int_distribution<int> dist(0, static_cast<int>(backbone.cfg.vocab_size) - 1);
    std::vector<int> tokens(len);
    for (int& t : tokens) t = dist(rng);
    return tokens;
}

template <typename T>
int greedy_token(const Tensor<T>& logits) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.size(); ++j)
        if (logits.data[j] > logits.data[best]) best = j;
    return static_cast<int>(best);
}

}  // namespace detail

/// One (context, mode) cell: prefill a synthetic context, then n_cycles of
/// text_per_cycle greedy steps each followed by one forced consolidation
/// emitting K latents (vanilla skips consolidation). Timed runs execute
/// serially; cache byte columns come from the deterministic ledger.
template <typename T>
BenchReport bench_cyclic(const Backbone<T>& backbone, Consolidator<T>& consolidator,
                         const std::vector<std::size_t>& contexts, const std::vector<Mode>& modes,
                         std::size_t n_runs, std::uint64_t seed, std::size_t n_cycles = 8,
                         std::size_t text_per_cycle = 32) {
    using clock = std::chrono::steady_clock;
    BenchReport report;
    for (std::size_t context : contexts) {
        const std::size_t K = consolidator.cfg.n_memory_tokens;
        const std::size_t total_new = n_cycles * (text_per_cycle + K);
        if (context + total_new > backbone.cfg.max_positions)
            throw capacity_error("bench_cyclic: context " + std::to_string(context) + " overflows max_positions");
        const std::vector<int> prompt = detail::synthetic_prompt(backbone, context, seed + context);
        // the prefilled state is identical across modes and runs; reuse it
        auto [cache0, step0] = prefill(backbone, prompt);
        for (Mode mode : modes) {
            BenchRow row;
            row.context_len = context;
            row.mode = mode_name(mode);
            row.n_runs = n_runs;
            std::vector<double> all_consolidation_ms;
            std::vector<double> all_step_ms;
            std::size_t peak_bytes = 0;
            for (std::size_t run = 0; run < n_runs; ++run) {
                KvCache<T> cache = cache0;
                StepOutput<T> step_out = step0;
                std::vector<detail::HistoryItem> history;
                if (mode == Mode::segregated_baseline)
                    for (int t : prompt) history.push_back({t, {}});
                std::vector<double> run_consolidations;
                double run_elapsed_ms = 0.0;
                std::size_t run_peak = cache.byte_count();
                for (std::size_t cycle = 0; cycle < n_cycles; ++cycle) {
                    for (std::size_t i = 0; i < text_per_cycle; ++i) {
                        const auto t0 = clock::now();
                        const int token = detail::greedy_token(step_out.logits);
                        step_out = decode_step<T>(nullptr, backbone, token, cache);
                        const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
                        all_step_ms.push_back(ms);
                        run_elapsed_ms += ms;
                        if (mode == Mode::segregated_baseline) history.push_back({token, {}});
                    }
                    if (mode == Mode::vanilla) continue;
                    const auto t0 = clock::now();
                    LatentMemory<T> mem;
                    if (mode == Mode::segregated_baseline) {
                        KvCache<T> private_cache = backbone.make_cache();
                        Tensor<T> X = Tensor<T>::zeros({history.size(), backbone.cfg.d_model});
                        std::vector<bool> latent_flags(history.size(), false);
                        auto& emb = const_cast<Backbone<T>&>(backbone).tok_emb.value;
                        for (std::size_t i = 0; i < history.size(); ++i) {
                            if (history[i].token >= 0) {
                                std::copy_n(&emb.data[static_cast<std::size_t>(history[i].token) * backbone.cfg.d_model],
                                            backbone.cfg.d_model, &X.data[i * backbone.cfg.d_model]);
                            } else {
                                latent_flags[i] = true;
                                for (std::size_t j = 0; j < backbone.cfg.d_model; ++j)
                                    X.data[i * backbone.cfg.d_model + j] = static_cast<T>(history[i].latent_row[j]);
                            }
                        }
                        backbone.forward_batch(X, latent_flags, private_cache);
                        run_peak = std::max(run_peak, cache.byte_count() + private_cache.byte_count());
                        mem = consolidator.generate(step_out.last_hidden, private_cache, static_cast<int>(cycle), T(0));
                    } else {
                        mem = consolidator.generate(step_out.last_hidden, cache, static_cast<int>(cycle), T(0));
                    }
                    inject(mem, backbone, cache);
                    if (mode == Mode::segregated_baseline)
                        for (std::size_t i = 0; i < mem.embeddings.rows(); ++i) {
                            detail::HistoryItem item;
                            item.latent_row.assign(mem.embeddings.cols(), 0.0);
                            for (std::size_t j = 0; j < mem.embeddings.cols(); ++j)
                                item.latent_row[j] = static_cast<double>(mem.embeddings.at(i, j));
                            history.push_back(std::move(item));
                        }
                    const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
                    run_consolidations.push_back(ms);
                    all_consolidation_ms.push_back(ms);
                    run_elapsed_ms += ms;
                }
                run_peak = std::max(run_peak, cache.byte_count());
                peak_bytes = std::max(peak_bytes, run_peak);
                auto [cm, cs] = detail::mean_std(run_consolidations);
                (void)cs;
                row.per_run_consolidation_ms_mean.push_back(cm);
                const double text_tokens = static_cast<double>(n_cycles * text_per_cycle);
                row.per_run_throughput.push_back(text_tokens / (run_elapsed_ms / 1000.0));
            }
            auto [cm, cs] = detail::mean_std(all_consolidation_ms);
            row.consolidation_ms_mean = cm;
            row.consolidation_ms_std = cs;
            auto [sm, ss] = detail::mean_std(all_step_ms);
            (void)ss;
            row.step_ms_mean = sm;
            auto [tm, ts] = detail::mean_std(row.per_run_throughput);
            (void)ts;
            row.effective_throughput_tokens_per_s = tm;
            row.cache_bytes_peak = peak_bytes;
            report.rows.push_back(std::move(row));
        }
    }
    return report;
}

// --------------------------------------------------------------------------
// Window-based entropy reduction statistics.
// --------------------------------------------------------------------------

struct EntropyStats {
    double mean_delta = 0.0;
    double mean_relative_pct = 0.0;
    double delta_min = 0.0;
    double delta_max = 0.0;
    double prob_reduction = 0.0;
    double prob_significant = 0.0;
    std::size_t n_triggers = 0;

    bool empty() const { return n_triggers == 0; }
};

struct EntropyTraceView {
    std::vector<double> entropies;
    std::vector<int> trigger_steps;  // empty for vanilla traces
};

/// For each valid trigger t (t > min_step) in a flashmem trace, compares the
/// mean entropy over [t, t+window_len] (inclusive) against the paired vanilla
/// trace at identical positional indices. Windows extending past either
/// trace end are dropped.
inline EntropyStats entropy_stats(const std::vector<EntropyTraceView>& vanilla_traces,
                                  const std::vector<EntropyTraceView>& flashmem_traces, std::size_t window_len = 10,
                                  int min_step = 5, double tau_sig = 0.5) {
    if (vanilla_traces.size() != flashmem_traces.size())
        throw contract_error("entropy_stats: unpaired traces (counts differ)");
    std::vector<double> deltas;
    std::vector<double> relatives;
    for (std::size_t i = 0; i < vanilla_traces.size(); ++i) {
        const auto& van = vanilla_traces[i];
        const auto& fm = flashmem_traces[i];
        for (int t : fm.trigger_steps) {
            if (t <= min_step) continue;
            const std::size_t end = static_cast<std::size_t>(t) + window_len;  // inclusive
            if (end >= van.entropies.size() || end >= fm.entropies.size()) continue;  // truncated: drop
            double v = 0.0, f = 0.0;
            for (std::size_t j = static_cast<std::size_t>(t); j <= end; ++j) {
                v += van.entropies[j];
                f += fm.entropies[j];
            }
            const double n = static_cast<double>(window_len + 1);
            v /= n;
            f /= n;
            deltas.push_back(v - f);
            relatives.push_back(v != 0.0 ? (v - f) / v * 100.0 : 0.0);
        }
    }
    EntropyStats stats;
    stats.n_triggers = deltas.size();
    if (deltas.empty()) return stats;  // empty-stats signal, not an error
    double sum = 0.0, rsum = 0.0;
    stats.delta_min = deltas[0];
    stats.delta_max = deltas[0];
    std::size_t n_pos = 0, n_sig = 0;
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        sum += deltas[i];
        rsum += relatives[i];
        stats.delta_min = std::min(stats.delta_min, deltas[i]);
        stats.delta_max = std::max(stats.delta_max, deltas[i]);
        if (deltas[i] > 0.0) ++n_pos;
        if (deltas[i] > tau_sig) ++n_sig;
    }
    stats.mean_delta = sum / static_cast<double>(deltas.size());
    stats.mean_relative_pct = rsum / static_cast<double>(relatives.size());
    stats.prob_reduction = static_cast<double>(n_pos) / static_cast<double>(deltas.size());
    stats.prob_significant = static_cast<double>(n_sig) / static_cast<double>(deltas.size());
    return stats;
}

template <typename T>
EntropyTraceView trace_view(const RunTrace<T>& trace) {
    EntropyTraceView v;
    for (const auto& rec : trace.entropy) v.entropies.push_back(static_cast<double>(rec.entropy));
    for (const auto& ev : trace.triggers) v.trigger_steps.push_back(ev.step);
    return v;
}

inline EntropyTraceView trace_view(const TraceFile& trace) {
    return EntropyTraceView{trace.entropies, trace.trigger_steps};
}

// --------------------------------------------------------------------------
// Depth sweep: train a fresh consolidator per L under an identical budget.
// --------------------------------------------------------------------------

struct DepthRow {
    std::size_t n_layers = 0;
    double heldout_accuracy = 0.0;
    double consolidation_ms = 0.0;
    std::size_t param_count = 0;
};

struct DepthSweepBudget {
    std::size_t train_steps = 50;
    std::size_t batch_size = 8;
    std::size_t n_train = 512;
    std::size_t n_heldout = 64;
    std::size_t timing_context = 512;
    std::size_t timing_reps = 25;
    double learning_rate = 1e-3;
};

template <typename T>
std::vector<DepthRow> depth_sweep(const Backbone<T>& backbone, const std::vector<std::size_t>& depths,
                                  const SyntheticTaskSpec& task, std::uint64_t seed,
                                  const DepthSweepBudget& budget = {}) {
    using clock = std::chrono::steady_clock;
    Datasets data = make_synthetic_dataset(task, budget.n_train, budget.n_heldout);
    // fixed context for the latency probe, shared across depths
    const std::vector<int> prompt = detail::synthetic_prompt(backbone, budget.timing_context, seed);
    auto [timing_cache, timing_out] = prefill(backbone, prompt);
    std::vector<DepthRow> rows;
    for (std::size_t L : depths) {
        ConsolidatorConfig cc;
        cc.n_layers = L;
        cc.n_memory_tokens = 8;
        cc.d_model = backbone.cfg.d_model;
        Consolidator<T> cons = Consolidator<T>::inherit_weights(backbone, cc, seed + L);
        OptimizerConfig<T> ocfg;
        ocfg.learning_rate = static_cast<T>(budget.learning_rate);
        ocfg.total_steps = budget.train_steps;
        AdamW<T> opt(cons.parameters());
        Rng rng = make_rng(seed + 1000 + L);
        for (std::size_t s = 1; s <= budget.train_steps; ++s) {
            std::vector<TrainingExample> batch;
            std::uniform_int_distribution<std::size_t> pick(0, data.train.size() - 1);
            for (std::size_t b = 0; b < budget.batch_size; ++b) batch.push_back(data.train[pick(rng)]);
            train_step(batch, backbone, cons, opt, s, ocfg);
        }
        // greedy heldout accuracy through the memory path
        std::size_t correct = 0;
        for (const auto& ex : data.heldout) {
            auto [cache, out] = prefill(backbone, ex.x);
            LatentMemory<T> mem = cons.generate(out.last_hidden, cache, 0, T(0));
            StepOutput<T> so;
            for (std::size_t i = 0; i < mem.embeddings.rows(); ++i)
                so = decode_step<T>(nullptr, backbone, take_rows<T>(nullptr, mem.embeddings, i, 1), cache);
            bool ok = true;
            for (std::size_t t = 0; t < ex.y.size(); ++t) {
                if (detail::greedy_token(so.logits) != ex.y[t]) {
                    ok = false;
                    break;
                }
                if (t + 1 < ex.y.size()) so = decode_step<T>(nullptr, backbone, ex.y[t], cache);
            }
            if (ok) ++correct;
        }
        DepthRow row;
        row.n_layers = L;
        row.heldout_accuracy = static_cast<double>(correct) / static_cast<double>(data.heldout.size());
        row.param_count = cons.param_count();
        // latency: mean generate() time over the shared read-only cache
        // best-of-reps after a warmup: the minimum is the steady-state cost,
        // immune to scheduler interference that would swamp the mean
        cons.generate(timing_out.last_hidden, timing_cache, 0, T(0));
        double best_ms = std::numeric_limits<double>::infinity();
        for (std::size_t r = 0; r < budget.timing_reps; ++r) {
            const auto t0 = clock::now();
            cons.generate(timing_out.last_hidden, timing_cache, 0, T(0));
            best_ms = std::min(best_ms, std::chrono::duration<double, std::milli>(clock::now() - t0).count());
        }
        row.consolidation_ms = best_ms;
        rows.push_back(row);
    }
    return rows;
}

// --------------------------------------------------------------------------
// CSV + SVG emission. CSVs are UTF-8, comma-separated, header row, '.'
// decimal separator; floats print with round-trip precision.
// --------------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

}  // namespace detail

inline void write_bench_csv(const std::string& path, const BenchReport& report) {
    std::ofstream os(path);
    if (!os) throw format_error("csv: cannot open '" + path + "' for writing");
    os << "context_len,mode,cache_bytes_peak,consolidation_ms_mean,consolidation_ms_std,step_ms_mean,"
          "effective_throughput_tokens_per_s,n_runs\n";
    for (const auto& r : report.rows)
        os << r.context_len << "," << r.mode << "," << r.cache_bytes_peak << ","
           << detail::fmt_double(r.consolidation_ms_mean) << "," << detail::fmt_double(r.consolidation_ms_std) << ","
           << detail::fmt_double(r.step_ms_mean) << ","
           << detail::fmt_double(r.effective_throughput_tokens_per_s) << "," << r.n_runs << "\n";
}

inline BenchReport read_bench_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw format_error("csv: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line)) throw format_error("csv: missing header in '" + path + "'");
    BenchReport report;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto cells = detail::split_csv_line(line);
        if (cells.size() != 8) throw format_error("csv: expected 8 columns in '" + path + "'");
        BenchRow r;
        r.context_len = std::stoull(cells[0]);
        r.mode = cells[1];
        r.cache_bytes_peak = std::stoull(cells[2]);
        r.consolidation_ms_mean = std::stod(cells[3]);
        r.consolidation_ms_std = std::stod(cells[4]);
        r.step_ms_mean = std::stod(cells[5]);
        r.effective_throughput_tokens_per_s = std::stod(cells[6]);
        r.n_runs = std::stoull(cells[7]);
        report.rows.push_back(std::move(r));
    }
    return report;
}

inline void write_depth_csv(const std::string& path, const std::vector<DepthRow>& rows) {
    std::ofstream os(path);
    if (!os) throw format_error("csv: cannot open '" + path + "' for writing");
    os << "L,heldout_accuracy,consolidation_ms,param_count\n";
    for (const auto& r : rows)
        os << r.n_layers << "," << detail::fmt_double(r.heldout_accuracy) << ","
           << detail::fmt_double(r.consolidation_ms) << "," << r.param_count << "\n";
}

inline void write_entropy_stats_csv(const std::string& path, const EntropyStats& s) {
    std::ofstream os(path);
    if (!os) throw format_error("csv: cannot open '" + path + "' for writing");
    os << "mean_delta,mean_relative_pct,delta_min,delta_max,prob_reduction,prob_significant,n_triggers\n";
    os << detail::fmt_double(s.mean_delta) << "," << detail::fmt_double(s.mean_relative_pct) << ","
       << detail::fmt_double(s.delta_min) << "," << detail::fmt_double(s.delta_max) << ","
       << detail::fmt_double(s.prob_reduction) << "," << detail::fmt_double(s.prob_significant) << ","
       << s.n_triggers << "\n";
}

/// Minimal line plot, pure presentation: every number it draws comes from a
/// CSV-backed series.
struct SvgSeries {
    std::string name;
    std::vector<double> xs;
    std::vector<double> ys;
};

inline void write_svg_line_plot(const std::string& path, const std::string& title,
                                const std::vector<SvgSeries>& series, const std::vector<double>& marker_xs = {}) {
    const double w = 720, h = 420, ml = 60, mr = 20, mt = 40, mb = 40;
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    bool first = true;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.xs.size(); ++i) {
            if (first) {
                xmin = xmax = s.xs[i];
                ymin = ymax = s.ys[i];
                first = false;
            }
            xmin = std::min(xmin, s.xs[i]);
            xmax = std::max(xmax, s.xs[i]);
            ymin = std::min(ymin, s.ys[i]);
            ymax = std::max(ymax, s.ys[i]);
        }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
    auto py = [&](double y) { return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb); };
    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    std::ofstream os(path);
    if (!os) throw format_error("svg: cannot open '" + path + "' for writing");
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
    os << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\"" << h - mb
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << ml - 8 << "\" y=\"" << py(ymin) << "\" text-anchor=\"end\" font-size=\"10\">"
       << detail::fmt_double(ymin) << "</text>\n";
    os << "<text x=\"" << ml - 8 << "\" y=\"" << py(ymax) << "\" text-anchor=\"end\" font-size=\"10\">"
       << detail::fmt_double(ymax) << "</text>\n";
    for (double mx : marker_xs)
        os << "<line x1=\"" << px(mx) << "\" y1=\"" << mt << "\" x2=\"" << px(mx) << "\" y2=\"" << h - mb
           << "\" stroke=\"#888\" stroke-dasharray=\"4,3\"/>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
        os << "<polyline fill=\"none\" stroke=\"" << colors[s % 6] << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < series[s].xs.size(); ++i)
            os << px(series[s].xs[i]) << "," << py(series[s].ys[i]) << " ";
        os << "\"/>\n";
        os << "<text x=\"" << w - mr - 5 << "\" y=\"" << mt + 14 * static_cast<double>(s + 1)
           << "\" text-anchor=\"end\" font-size=\"11\" fill=\"" << colors[s % 6] << "\">" << series[s].name
           << "</text>\n";
    }
    os << "</svg>\n";
}

}  // namespace flashmem
