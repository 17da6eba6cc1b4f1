#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "flashmem/bench.hpp"

using namespace flashmem;

namespace {

BackboneConfig tiny_cfg() {
    BackboneConfig c;
    c.n_layers = 3;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_head = 8;
    c.vocab_size = 32;
    c.max_positions = 512;
    return c;
}

/// Straight-line recomputation of the window statistics, kept deliberately
/// naive so it can serve as an independent oracle.
EntropyStats brute_force(const std::vector<EntropyTraceView>& van, const std::vector<EntropyTraceView>& fm,
                         std::size_t L, int min_step, double tau) {
    std::vector<double> deltas, rels;
    for (std::size_t i = 0; i < van.size(); ++i)
        for (int t : fm[i].trigger_steps) {
            if (!(t > min_step)) continue;
            if (static_cast<std::size_t>(t) + L >= van[i].entropies.size()) continue;
            if (static_cast<std::size_t>(t) + L >= fm[i].entropies.size()) continue;
            double v = 0, f = 0;
            for (std::size_t j = t; j <= t + L; ++j) {
                v += van[i].entropies[j];
                f += fm[i].entropies[j];
            }
            v /= (L + 1);
            f /= (L + 1);
            deltas.push_back(v - f);
            rels.push_back((v - f) / v * 100.0);
        }
    EntropyStats s;
    s.n_triggers = deltas.size();
    if (deltas.empty()) return s;
    s.delta_min = *std::min_element(deltas.begin(), deltas.end());
    s.delta_max = *std::max_element(deltas.begin(), deltas.end());
    std::size_t n_pos = 0, n_sig = 0;
    double sum = 0, rsum = 0;
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        sum += deltas[i];
        rsum += rels[i];
        n_pos += deltas[i] > 0 ? 1 : 0;
        n_sig += deltas[i] > tau ? 1 : 0;
    }
    s.mean_delta = sum / static_cast<double>(deltas.size());
    s.mean_relative_pct = rsum / static_cast<double>(rels.size());
    s.prob_reduction = static_cast<double>(n_pos) / static_cast<double>(deltas.size());
    s.prob_significant = static_cast<double>(n_sig) / static_cast<double>(deltas.size());
    return s;
}

EntropyTraceView constant_trace(double level, std::size_t len, std::vector<int> triggers = {}) {
    EntropyTraceView v;
    v.entropies.assign(len, level);
    v.trigger_steps = std::move(triggers);
    return v;
}

}  // namespace

TEST_CASE("three-trigger fixture matches the hand-computed statistics") {
    // windows are constant, so window means equal the plateau levels;
    // deltas are {-0.1, 0.2, 0.6} by construction
    std::vector<EntropyTraceView> vanilla{constant_trace(2.0, 40), constant_trace(2.0, 40), constant_trace(2.0, 40)};
    std::vector<EntropyTraceView> flash{constant_trace(2.1, 40, {10}), constant_trace(1.8, 40, {10}),
                                        constant_trace(1.4, 40, {10})};
    EntropyStats s = entropy_stats(vanilla, flash);
    REQUIRE(s.n_triggers == 3);
    REQUIRE_THAT(s.mean_delta, Catch::Matchers::WithinAbs(0.2333, 1e-4));
    REQUIRE_THAT(s.mean_delta, Catch::Matchers::WithinAbs((-0.1 + 0.2 + 0.6) / 3.0, 1e-12));
    REQUIRE_THAT(s.prob_reduction, Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
    REQUIRE_THAT(s.prob_significant, Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));
    REQUIRE_THAT(s.delta_min, Catch::Matchers::WithinAbs(-0.1, 1e-12));
    REQUIRE_THAT(s.delta_max, Catch::Matchers::WithinAbs(0.6, 1e-12));

    EntropyStats oracle = brute_force(vanilla, flash, 10, 5, 0.5);
    REQUIRE(s.mean_delta == oracle.mean_delta);
    REQUIRE(s.prob_reduction == oracle.prob_reduction);
    REQUIRE(s.prob_significant == oracle.prob_significant);
}

TEST_CASE("single-window arithmetic example") {
    // vanilla window mean 2.0, flashmem 1.8 -> delta 0.2, relative 10%
    std::vector<EntropyTraceView> vanilla{constant_trace(2.0, 30)};
    std::vector<EntropyTraceView> flash{constant_trace(1.8, 30, {8})};
    EntropyStats s = entropy_stats(vanilla, flash);
    REQUIRE(s.n_triggers == 1);
    REQUIRE_THAT(s.mean_delta, Catch::Matchers::WithinAbs(0.2, 1e-12));
    REQUIRE_THAT(s.mean_relative_pct, Catch::Matchers::WithinAbs(10.0, 1e-9));
}

TEST_CASE("identical traces give a null effect") {
    std::vector<EntropyTraceView> vanilla{constant_trace(1.5, 30)};
    std::vector<EntropyTraceView> flash{constant_trace(1.5, 30, {7, 18})};
    EntropyStats s = entropy_stats(vanilla, flash);
    REQUIRE(s.n_triggers == 2);
    REQUIRE(s.mean_delta == 0.0);
    REQUIRE(s.prob_reduction == 0.0);
}

TEST_CASE("window validity rules: early triggers and truncated windows drop") {
    std::vector<EntropyTraceView> vanilla{constant_trace(2.0, 30)};
    // t=5 fails t > min_step; t=25 has its inclusive window [25,35] past the end
    std::vector<EntropyTraceView> flash{constant_trace(1.0, 30, {5, 25, 12})};
    EntropyStats s = entropy_stats(vanilla, flash);
    REQUIRE(s.n_triggers == 1);
    // t=19 is the last valid trigger for a 30-step trace: [19, 29] fits
    std::vector<EntropyTraceView> edge{constant_trace(1.0, 30, {19, 20})};
    REQUIRE(entropy_stats(vanilla, edge).n_triggers == 1);
    // no valid triggers -> empty-stats signal, not an error
    std::vector<EntropyTraceView> none{constant_trace(1.0, 30)};
    EntropyStats empty = entropy_stats(vanilla, none);
    REQUIRE(empty.empty());
    REQUIRE(empty.n_triggers == 0);
    // unpaired traces are a contract violation
    REQUIRE_THROWS_AS(entropy_stats(vanilla, {}), contract_error);
}

TEST_CASE("entropy_stats matches the brute-force oracle on random traces") {
    Rng rng = make_rng(321);
    std::uniform_real_distribution<double> u(0.1, 3.0);
    std::uniform_int_distribution<int> tstep(0, 49);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<EntropyTraceView> vanilla, flash;
        for (int i = 0; i < 4; ++i) {
            EntropyTraceView v, f;
            for (int j = 0; j < 40; ++j) {
                v.entropies.push_back(u(rng));
                f.entropies.push_back(u(rng));
            }
            for (int k = 0; k < 3; ++k) f.trigger_steps.push_back(tstep(rng));
            vanilla.push_back(std::move(v));
            flash.push_back(std::move(f));
        }
        EntropyStats got = entropy_stats(vanilla, flash);
        EntropyStats oracle = brute_force(vanilla, flash, 10, 5, 0.5);
        REQUIRE(got.n_triggers == oracle.n_triggers);
        REQUIRE_THAT(got.mean_delta, Catch::Matchers::WithinAbs(oracle.mean_delta, 1e-12));
        REQUIRE_THAT(got.mean_relative_pct, Catch::Matchers::WithinAbs(oracle.mean_relative_pct, 1e-9));
        REQUIRE(got.prob_reduction == oracle.prob_reduction);
        REQUIRE(got.prob_significant == oracle.prob_significant);
        REQUIRE(got.delta_min == oracle.delta_min);
        REQUIRE(got.delta_max == oracle.delta_max);
        // tau_sig > 0 ordering invariant
        REQUIRE(got.prob_significant <= got.prob_reduction);
    }
}

TEST_CASE("bench_cyclic ledger arithmetic at a small scale") {
    auto bb = Backbone<double>::init(tiny_cfg(), 1);
    ConsolidatorConfig cc;
    cc.n_layers = 1;
    cc.n_memory_tokens = 8;
    cc.d_model = 16;
    auto cons = Consolidator<double>::inherit_weights(bb, cc, 2);
    const std::size_t context = 16, cycles = 2, text = 4;
    BenchReport rep = bench_cyclic(bb, cons, {context},
                                   {Mode::vanilla, Mode::flashmem, Mode::segregated_baseline}, 2, 9, cycles, text);
    REQUIRE(rep.rows.size() == 3);
    auto row = [&](const std::string& m) -> const BenchRow& {
        for (const auto& r : rep.rows)
            if (r.mode == m) return r;
        throw std::runtime_error("missing row");
    };
    const std::size_t bpp = bb.cfg.n_layers * bb.cfg.d_model * 2 * sizeof(double);  // bytes per position
    const std::size_t vanilla_len = context + cycles * text;
    const std::size_t flash_len = vanilla_len + cycles * 8;
    REQUIRE(row("vanilla").cache_bytes_peak == vanilla_len * bpp);
    REQUIRE(row("flashmem").cache_bytes_peak == flash_len * bpp);
    // flashmem exceeds vanilla by exactly cycles*K positions of KV
    REQUIRE(row("flashmem").cache_bytes_peak - row("vanilla").cache_bytes_peak == cycles * 8 * bpp);
    // the segregated baseline transiently duplicates the history
    REQUIRE(row("segregated").cache_bytes_peak > row("flashmem").cache_bytes_peak);
    for (const auto& r : rep.rows) {
        REQUIRE(r.n_runs == 2);
        REQUIRE(r.per_run_throughput.size() == 2);
        REQUIRE(r.effective_throughput_tokens_per_s > 0.0);
        if (r.mode != "vanilla") {
            REQUIRE(r.per_run_consolidation_ms_mean.size() == 2);
            REQUIRE(r.consolidation_ms_mean > 0.0);
        }
    }
    // ledger columns are deterministic across repetition
    BenchReport rep2 = bench_cyclic(bb, cons, {context},
                                    {Mode::vanilla, Mode::flashmem, Mode::segregated_baseline}, 2, 9, cycles, text);
    for (std::size_t i = 0; i < rep.rows.size(); ++i)
        REQUIRE(rep.rows[i].cache_bytes_peak == rep2.rows[i].cache_bytes_peak);
    // context overflow is rejected
    REQUIRE_THROWS_AS(bench_cyclic(bb, cons, {bb.cfg.max_positions}, {Mode::vanilla}, 1, 9, cycles, text),
                      capacity_error);
}

TEST_CASE("CSV round-trips reproduce the in-memory reports") {
    BenchReport rep;
    BenchRow r;
    r.context_len = 256;
    r.mode = "flashmem";
    r.cache_bytes_peak = 123456;
    r.consolidation_ms_mean = 1.25;
    r.consolidation_ms_std = 0.017;
    r.step_ms_mean = 0.333333333333333315;
    r.effective_throughput_tokens_per_s = 971.03;
    r.n_runs = 30;
    rep.rows.push_back(r);
    r.mode = "vanilla";
    r.consolidation_ms_mean = 0;
    rep.rows.push_back(r);
    const std::string path = "bench_test.csv";
    write_bench_csv(path, rep);
    BenchReport back = read_bench_csv(path);
    std::remove(path.c_str());
    REQUIRE(back.rows.size() == rep.rows.size());
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
        REQUIRE(back.rows[i].context_len == rep.rows[i].context_len);
        REQUIRE(back.rows[i].mode == rep.rows[i].mode);
        REQUIRE(back.rows[i].cache_bytes_peak == rep.rows[i].cache_bytes_peak);
        REQUIRE(back.rows[i].consolidation_ms_mean == rep.rows[i].consolidation_ms_mean);  // bit-exact
        REQUIRE(back.rows[i].step_ms_mean == rep.rows[i].step_ms_mean);
        REQUIRE(back.rows[i].effective_throughput_tokens_per_s == rep.rows[i].effective_throughput_tokens_per_s);
        REQUIRE(back.rows[i].n_runs == rep.rows[i].n_runs);
    }
    REQUIRE_THROWS_AS(read_bench_csv("missing.csv"), format_error);
}

TEST_CASE("SVG plots are produced and well-formed enough to open") {
    SvgSeries s1{"vanilla", {0, 1, 2, 3}, {2.0, 2.1, 1.9, 2.2}};
    SvgSeries s2{"flashmem", {0, 1, 2, 3}, {2.0, 1.5, 1.2, 1.1}};
    const std::string path = "plot_test.svg";
    write_svg_line_plot(path, "entropy vs step", {s1, s2}, {1.0});
    std::ifstream is(path);
    std::string all((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    std::remove(path.c_str());
    REQUIRE(all.find("<svg") == 0);
    REQUIRE(all.find("</svg>") != std::string::npos);
    REQUIRE(all.find("polyline") != std::string::npos);
    REQUIRE(all.find("entropy vs step") != std::string::npos);
}

TEST_CASE("depth sweep rows carry exact parameter counts") {
    BackboneConfig c = tiny_cfg();
    c.n_layers = 4;
    c.vocab_size = 256;  // the synthetic task ranges span the byte vocabulary
    auto bb = Backbone<double>::init(c, 1);
    DepthSweepBudget budget;
    budget.train_steps = 2;
    budget.batch_size = 2;
    budget.n_train = 8;
    budget.n_heldout = 4;
    budget.timing_context = 32;
    budget.timing_reps = 2;
    SyntheticTaskSpec task;
    task.n_pairs = 2;
    task.distractor_len = 4;
    task.seed = 11;
    auto rows = depth_sweep(bb, {1, 2, 3}, task, 5, budget);
    REQUIRE(rows.size() == 3);
    REQUIRE(rows[1].param_count > rows[0].param_count);
    REQUIRE(rows[2].param_count - rows[1].param_count == rows[1].param_count - rows[0].param_count);
    for (const auto& r : rows) {
        REQUIRE(r.consolidation_ms > 0.0);
        REQUIRE(r.heldout_accuracy >= 0.0);
        REQUIRE(r.heldout_accuracy <= 1.0);
    }
    const std::string path = "depth_test.csv";
    write_depth_csv(path, rows);
    std::ifstream is(path);
    std::string header;
    std::getline(is, header);
    std::remove(path.c_str());
    REQUIRE(header == "L,heldout_accuracy,consolidation_ms,param_count");
}
