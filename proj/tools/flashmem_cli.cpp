// FlashMem command-line surface: training, generation, calibration, the
// cyclic efficiency benchmark, the depth sweep, and entropy statistics.
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flashmem/bench.hpp"
#include "flashmem/checkpoint.hpp"
#include "flashmem/engine.hpp"
#include "flashmem/trainer.hpp"

using json = nlohmann::json;
using Real = double;
using namespace flashmem;

namespace {

json load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw format_error("config: cannot open '" + path + "'");
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw format_error("config: invalid JSON in '" + path + "': " + e.what());
    }
}

BackboneConfig backbone_config(const json& cfg) {
    BackboneConfig c;
    if (cfg.contains("backbone")) {
        const json& b = cfg["backbone"];
        c.n_layers = b.value("n_layers", c.n_layers);
        c.d_model = b.value("d_model", c.d_model);
        c.n_heads = b.value("n_heads", c.n_heads);
        c.d_head = b.value("d_head", c.d_head);
        c.vocab_size = b.value("vocab_size", c.vocab_size);
        c.max_positions = b.value("max_positions", c.max_positions);
        c.rope_base = b.value("rope_base", c.rope_base);
    }
    c.validate();
    return c;
}

ConsolidatorConfig consolidator_config(const json& cfg, const BackboneConfig& bb) {
    ConsolidatorConfig c;
    c.d_model = bb.d_model;
    if (cfg.contains("training")) {
        const json& t = cfg["training"];
        c.n_layers = t.value("consolidator_layers", c.n_layers);
        c.n_memory_tokens = t.value("k_memory_tokens", c.n_memory_tokens);
    }
    return c;
}

OptimizerConfig<Real> optimizer_config(const json& cfg) {
    OptimizerConfig<Real> o;
    if (cfg.contains("training")) {
        const json& t = cfg["training"];
        const std::string opt = t.value("optimizer", std::string("adamw"));
        if (opt != "adamw") throw config_error("training config: unsupported optimizer '" + opt + "'");
        const std::string sched = t.value("scheduler", std::string("cosine"));
        if (sched != "cosine") throw config_error("training config: unsupported scheduler '" + sched + "'");
        o.learning_rate = t.value("learning_rate", o.learning_rate);
        o.weight_decay = t.value("weight_decay", o.weight_decay);
        o.grad_clip = t.value("grad_clip", o.grad_clip);
        o.warmup_ratio = t.value("warmup_ratio", o.warmup_ratio);
    }
    return o;
}

MonitorConfig monitor_config(const json& cfg) {
    MonitorConfig m;
    if (cfg.contains("monitor")) {
        const json& j = cfg["monitor"];
        if (j.contains("tau") && !j["tau"].is_null()) m.threshold = j["tau"].get<double>();
        m.percentile_target = j.value("percentile_target", m.percentile_target);
        if (j.contains("sink_indices")) {
            m.sink_indices.clear();
            for (std::size_t s : j["sink_indices"].get<std::vector<std::size_t>>()) m.sink_indices.insert(s);
        }
    }
    return m;
}

SyntheticTaskSpec task_spec(const json& cfg, const std::string& task_name, std::uint64_t seed) {
    SyntheticTaskSpec s;
    if (task_name == "key_value_recall") s.task = SyntheticTask::key_value_recall;
    else if (task_name == "modular_addition") s.task = SyntheticTask::modular_addition;
    else throw config_error("unknown task '" + task_name + "'");
    if (cfg.contains("task")) {
        const json& t = cfg["task"];
        s.n_pairs = t.value("n_pairs", s.n_pairs);
        s.distractor_len = t.value("distractor_len", s.distractor_len);
        s.modulus = t.value("modulus", s.modulus);
    }
    s.seed = seed;
    return s;
}

std::vector<int> read_prompt_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw format_error("prompt: cannot open '" + path + "'");
    std::vector<int> tokens;
    int t;
    while (is >> t) tokens.push_back(t);
    if (tokens.empty()) throw contract_error("prompt: file '" + path + "' holds no tokens");
    return tokens;
}

std::vector<std::size_t> parse_size_list(const std::string& csv) {
    std::vector<std::size_t> out;
    std::stringstream ss(csv);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(std::stoull(cell));
    if (out.empty()) throw config_error("expected a comma-separated list of integers");
    return out;
}

struct ModelBundle {
    Backbone<Real> backbone;
    std::optional<Consolidator<Real>> consolidator;
};

ModelBundle load_models(const json& cfg, const std::string& checkpoint, std::uint64_t seed, bool want_consolidator) {
    if (!checkpoint.empty()) {
        auto loaded = load_checkpoint<Real>(checkpoint);
        if (want_consolidator && !loaded.consolidator)
            throw contract_error("checkpoint '" + checkpoint + "' holds no consolidator");
        return {std::move(loaded.backbone), std::move(loaded.consolidator)};
    }
    BackboneConfig bc = backbone_config(cfg);
    ModelBundle b{Backbone<Real>::init(bc, seed), std::nullopt};
    if (want_consolidator)
        b.consolidator = Consolidator<Real>::inherit_weights(b.backbone, consolidator_config(cfg, bc), seed + 1);
    return b;
}

int cmd_train(const std::string& config_path, std::uint64_t seed, const std::string& task_name, std::size_t n_train,
              std::size_t n_heldout, const std::string& ckpt_out) {
    json cfg = load_config(config_path);
    BackboneConfig bc = backbone_config(cfg);
    auto backbone = Backbone<Real>::init(bc, seed);
    auto cons = Consolidator<Real>::inherit_weights(backbone, consolidator_config(cfg, bc), seed + 1);
    OptimizerConfig<Real> ocfg = optimizer_config(cfg);
    const std::size_t batch_size = cfg.contains("training") ? cfg["training"].value("batch_size", 64) : 64;
    const std::size_t epochs = cfg.contains("training") ? cfg["training"].value("epochs", 5) : 5;

    Datasets data = make_synthetic_dataset(task_spec(cfg, task_name, seed), n_train, n_heldout);
    const std::size_t steps_per_epoch = std::max<std::size_t>(1, data.train.size() / batch_size);
    ocfg.total_steps = epochs * steps_per_epoch + 1;  // schedule never hits exactly zero mid-run

    AdamW<Real> opt(cons.parameters());
    Rng shuffle_rng = make_rng(seed + 17);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        std::vector<std::size_t> order(data.train.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (std::size_t b = 0; b + batch_size <= order.size(); b += batch_size) {
            std::vector<TrainingExample> batch;
            for (std::size_t i = 0; i < batch_size; ++i) batch.push_back(data.train[order[b + i]]);
            TrainMetrics<Real> m = train_step(batch, backbone, cons, opt, ++step, ocfg);
            std::cout << "step " << step << " loss " << m.loss << " grad_norm " << m.grad_norm << " lr " << m.lr
                      << "\n";
        }
    }
    auto [with_mem, without_mem] = evaluate(backbone, cons, data.heldout);
    std::cout << "heldout ce with_memory " << with_mem << " without_memory " << without_mem << "\n";
    if (!ckpt_out.empty()) {
        save_checkpoint(ckpt_out, backbone, &cons);
        std::cout << "checkpoint written to " << ckpt_out << "\n";
    }
    return 0;
}

int cmd_generate(const std::string& config_path, std::uint64_t seed, const std::string& mode_str, double tau,
                 bool tau_set, const std::string& prompt_file, const std::string& trace_out,
                 const std::string& checkpoint, std::size_t max_new_tokens, const std::string& svg_out) {
    json cfg = load_config(config_path);
    const Mode mode = mode_from_name(mode_str);
    ModelBundle models = load_models(cfg, checkpoint, seed, mode != Mode::vanilla);
    MonitorConfig mon = monitor_config(cfg);
    if (tau_set) mon.threshold = tau;

    GenerationConfig gc;
    gc.mode = mode;
    gc.max_new_tokens = max_new_tokens;
    gc.sampling.seed = seed;
    if (cfg.contains("generation")) {
        const json& g = cfg["generation"];
        gc.trigger_cooldown = g.value("trigger_cooldown", gc.trigger_cooldown);
        gc.min_trigger_step = g.value("min_trigger_step", gc.min_trigger_step);
    }
    std::vector<int> prompt = read_prompt_file(prompt_file);
    RunTrace<Real> trace =
        run<Real>(prompt, models.backbone, mon, models.consolidator ? &*models.consolidator : nullptr, gc);
    std::cout << "generated " << trace.generated_tokens.size() << " tokens, " << trace.triggers.size()
              << " triggers, final cache length " << trace.final_cache_len << "\n";
    if (!trace_out.empty()) {
        write_trace(trace_out, trace);
        std::cout << "trace written to " << trace_out << "\n";
    }
    if (!svg_out.empty()) {
        SvgSeries series{"entropy", {}, {}};
        for (std::size_t i = 0; i < trace.entropy.size(); ++i) {
            series.xs.push_back(static_cast<double>(i));
            series.ys.push_back(static_cast<double>(trace.entropy[i].entropy));
        }
        std::vector<double> markers;
        for (const auto& ev : trace.triggers) markers.push_back(static_cast<double>(ev.step));
        write_svg_line_plot(svg_out, "attention entropy vs step", {series}, markers);
        std::cout << "plot written to " << svg_out << "\n";
    }
    return 0;
}

int cmd_calibrate(const std::string& config_path, const std::string& entropies_path, double percentile) {
    json cfg = load_config(config_path);
    std::ifstream is(entropies_path);
    if (!is) throw format_error("calibrate: cannot open '" + entropies_path + "'");
    std::vector<double> values;
    double v;
    while (is >> v) values.push_back(v);
    const double tau = calibrate_threshold(values, percentile);
    cfg["monitor"]["tau"] = tau;
    cfg["monitor"]["percentile_target"] = percentile;
    std::ofstream os(config_path);
    if (!os) throw format_error("calibrate: cannot write '" + config_path + "'");
    os << cfg.dump(2) << "\n";
    std::cout << "tau " << tau << " (" << percentile << "th percentile of " << values.size()
              << " values) written to " << config_path << "\n";
    return 0;
}

int cmd_bench_cyclic(const std::string& config_path, std::uint64_t seed, const std::string& contexts_csv,
                     std::size_t n_runs, const std::string& out_csv) {
    json cfg = load_config(config_path);
    ModelBundle models = load_models(cfg, "", seed, true);
    std::vector<std::size_t> contexts = parse_size_list(contexts_csv);
    BenchReport report = bench_cyclic(models.backbone, *models.consolidator, contexts,
                                      {Mode::vanilla, Mode::flashmem, Mode::segregated_baseline}, n_runs, seed);
    write_bench_csv(out_csv, report);
    std::cout << "bench report (" << report.rows.size() << " rows) written to " << out_csv << "\n";
    return 0;
}

int cmd_entropy_stats(const std::vector<std::string>& vanilla_paths, const std::vector<std::string>& flashmem_paths,
                      std::size_t window, int min_step, double tau_sig, const std::string& out_csv) {
    std::vector<EntropyTraceView> vanilla, flash;
    for (const auto& p : vanilla_paths) vanilla.push_back(trace_view(read_trace(p)));
    for (const auto& p : flashmem_paths) flash.push_back(trace_view(read_trace(p)));
    EntropyStats stats = entropy_stats(vanilla, flash, window, min_step, tau_sig);
    if (stats.empty()) {
        std::cout << "no valid triggers; empty statistics\n";
    } else {
        std::cout << "n_triggers " << stats.n_triggers << " mean_delta " << stats.mean_delta << " mean_relative_pct "
                  << stats.mean_relative_pct << " prob_reduction " << stats.prob_reduction << " prob_significant "
                  << stats.prob_significant << "\n";
    }
    if (!out_csv.empty()) {
        write_entropy_stats_csv(out_csv, stats);
        std::cout << "stats written to " << out_csv << "\n";
    }
    return 0;
}

int cmd_depth_sweep(const std::string& config_path, std::uint64_t seed, const std::string& depths_csv,
                    const std::string& task_name, const std::string& out_csv, const std::string& svg_out) {
    json cfg = load_config(config_path);
    BackboneConfig bc = backbone_config(cfg);
    auto backbone = Backbone<Real>::init(bc, seed);
    DepthSweepBudget budget;
    if (cfg.contains("depth_sweep")) {
        const json& d = cfg["depth_sweep"];
        budget.train_steps = d.value("train_steps", budget.train_steps);
        budget.batch_size = d.value("batch_size", budget.batch_size);
        budget.n_train = d.value("n_train", budget.n_train);
        budget.n_heldout = d.value("n_heldout", budget.n_heldout);
        budget.timing_context = d.value("timing_context", budget.timing_context);
        budget.timing_reps = d.value("timing_reps", budget.timing_reps);
        budget.learning_rate = d.value("learning_rate", budget.learning_rate);
    }
    auto rows = depth_sweep(backbone, parse_size_list(depths_csv), task_spec(cfg, task_name, seed), seed, budget);
    write_depth_csv(out_csv, rows);
    std::cout << "depth sweep (" << rows.size() << " rows) written to " << out_csv << "\n";
    if (!svg_out.empty()) {
        SvgSeries lat{"consolidation_ms", {}, {}}, par{"param_count_k", {}, {}};
        for (const auto& r : rows) {
            lat.xs.push_back(static_cast<double>(r.n_layers));
            lat.ys.push_back(r.consolidation_ms);
            par.xs.push_back(static_cast<double>(r.n_layers));
            par.ys.push_back(static_cast<double>(r.param_count) / 1000.0);
        }
        write_svg_line_plot(svg_out, "consolidation latency and parameters vs depth", {lat, par});
        std::cout << "plot written to " << svg_out << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flashmem: entropy-gated latent memory over a shared KV cache"};
    app.require_subcommand(1);

    std::string config_path = "flashmem.json";
    std::uint64_t seed = 0;

    // train
    auto* train = app.add_subcommand("train", "train a consolidator against a frozen backbone");
    std::string train_task = "key_value_recall", ckpt_out;
    std::size_t n_train = 2000, n_heldout = 200;
    train->add_option("--config", config_path, "config file (JSON)");
    train->add_option("--seed", seed, "RNG seed");
    train->add_option("--task", train_task, "key_value_recall | modular_addition");
    train->add_option("--n-train", n_train, "training examples");
    train->add_option("--n-heldout", n_heldout, "heldout examples");
    train->add_option("--checkpoint-out", ckpt_out, "checkpoint output path");

    // generate
    auto* gen = app.add_subcommand("generate", "run the inference loop over a prompt");
    std::string mode = "flashmem", prompt_file, trace_out, checkpoint, gen_svg;
    double tau = 0.0;
    std::size_t max_new_tokens = 64;
    gen->add_option("--config", config_path, "config file (JSON)");
    gen->add_option("--seed", seed, "RNG seed");
    gen->add_option("--mode", mode, "vanilla | flashmem | segregated");
    auto* tau_opt = gen->add_option("--tau", tau, "entropy threshold override");
    gen->add_option("--prompt-file", prompt_file, "whitespace-separated token ids")->required();
    gen->add_option("--trace-out", trace_out, "output .trace.jsonl path");
    gen->add_option("--checkpoint", checkpoint, "model checkpoint to load");
    gen->add_option("--max-new-tokens", max_new_tokens, "generation length");
    gen->add_option("--svg-out", gen_svg, "entropy-vs-step plot path");

    // calibrate
    auto* cal = app.add_subcommand("calibrate", "set tau from validation entropies");
    std::string entropies_path;
    double percentile = 85.0;
    cal->add_option("--config", config_path, "config file (JSON), updated in place");
    cal->add_option("--seed", seed, "RNG seed (unused, accepted for uniformity)");
    cal->add_option("--entropies", entropies_path, "file of entropy values, one per line")->required();
    cal->add_option("--percentile", percentile, "nearest-rank percentile target");

    // bench-cyclic
    auto* bench = app.add_subcommand("bench-cyclic", "cyclic efficiency benchmark");
    std::string contexts = "256,1024,4096", bench_out = "bench.csv";
    std::size_t n_runs = 30;
    bench->add_option("--config", config_path, "config file (JSON)");
    bench->add_option("--seed", seed, "RNG seed");
    bench->add_option("--contexts", contexts, "comma-separated context lengths");
    bench->add_option("--runs", n_runs, "repetitions per cell");
    bench->add_option("--out", bench_out, "output CSV path");

    // entropy-stats
    auto* stats = app.add_subcommand("entropy-stats", "windowed entropy-reduction statistics");
    std::vector<std::string> vanilla_traces, flashmem_traces;
    std::size_t window = 10;
    int min_step = 5;
    double tau_sig = 0.5;
    std::string stats_out;
    stats->add_option("--config", config_path, "config file (JSON; unused, accepted for uniformity)");
    stats->add_option("--seed", seed, "RNG seed (unused, accepted for uniformity)");
    stats->add_option("--vanilla", vanilla_traces, "vanilla .trace.jsonl files (paired by order)")->required();
    stats->add_option("--flashmem", flashmem_traces, "flashmem .trace.jsonl files (paired by order)")->required();
    stats->add_option("--window", window, "window length L");
    stats->add_option("--min-step", min_step, "triggers must satisfy t > min-step");
    stats->add_option("--tau-sig", tau_sig, "significance threshold");
    stats->add_option("--out", stats_out, "output CSV path");

    // depth-sweep
    auto* sweep = app.add_subcommand("depth-sweep", "train and profile consolidators of increasing depth");
    std::string depths = "1,2,3,4,5,6", sweep_out = "depth.csv", sweep_svg, sweep_task = "key_value_recall";
    sweep->add_option("--config", config_path, "config file (JSON)");
    sweep->add_option("--seed", seed, "RNG seed");
    sweep->add_option("--depths", depths, "comma-separated consolidator depths");
    sweep->add_option("--task", sweep_task, "key_value_recall | modular_addition");
    sweep->add_option("--out", sweep_out, "output CSV path");
    sweep->add_option("--svg-out", sweep_svg, "latency/params-vs-depth plot path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (train->parsed()) return cmd_train(config_path, seed, train_task, n_train, n_heldout, ckpt_out);
        if (gen->parsed())
            return cmd_generate(config_path, seed, mode, tau, tau_opt->count() > 0, prompt_file, trace_out,
                                checkpoint, max_new_tokens, gen_svg);
        if (cal->parsed()) return cmd_calibrate(config_path, entropies_path, percentile);
        if (bench->parsed()) return cmd_bench_cyclic(config_path, seed, contexts, n_runs, bench_out);
        if (stats->parsed())
            return cmd_entropy_stats(vanilla_traces, flashmem_traces, window, min_step, tau_sig, stats_out);
        if (sweep->parsed()) return cmd_depth_sweep(config_path, seed, depths, sweep_task, sweep_out, sweep_svg);
    } catch (const flashmem::error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
