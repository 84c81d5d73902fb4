// csp: cost analysis, table reproduction, schedule planning and toy simulation.
//
// Exit codes: 0 success, 1 reproduction mismatch, 2 usage or validation error.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "csp/cost_model.hpp"
#include "csp/error.hpp"
#include "csp/io_formats.hpp"
#include "csp/pipeline.hpp"
#include "csp/planner.hpp"
#include "csp/toy_model.hpp"

#ifndef CSP_FIXTURES_PATH
#define CSP_FIXTURES_PATH "data/published_values.csv"
#endif

namespace {

using namespace csp;

constexpr int kExitOk = 0;
constexpr int kExitMismatch = 1;
constexpr int kExitUsage = 2;

constexpr double kTflopsTolerance = 0.05;

/// Thrown for bad flag values; reported with exit code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::vector<std::string> split_commas(const std::string& text) {
    std::vector<std::string> out;
    std::string item;
    for (char c : text) {
        if (c == ',') {
            out.push_back(item);
            item.clear();
        } else if (c != ' ') {
            item += c;
        }
    }
    out.push_back(item);
    return out;
}

std::size_t parse_count(const std::string& text, const std::string& what) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(text, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (text.empty() || pos != text.size() || text[0] == '-') {
        throw UsageError(what + ": expected a non-negative integer, got '" + text + "'");
    }
    return static_cast<std::size_t>(v);
}

double parse_real(const std::string& text, const std::string& what) {
    std::size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(text, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (text.empty() || pos != text.size()) {
        throw UsageError(what + ": expected a number, got '" + text + "'");
    }
    return v;
}

struct ModelChoice {
    std::optional<ModelPreset> preset;
    ModelDims dims;
};

/// "toy", a preset name, or a comma list of dims keys (layers=..,hidden=..)
/// applied on top of the toy dims.
ModelChoice parse_model(const std::string& text) {
    ModelChoice m;
    m.dims = toy_dims();
    if (text.empty() || text == "toy") {
        return m;
    }
    if (auto p = find_preset(text)) {
        m.preset = p;
        m.dims = p->dims;
        return m;
    }
    if (text.find('=') == std::string::npos) {
        throw UsageError("--model: unknown preset '" + text + "' (expected 7b-224, 7b-336, 13b-224, toy or key=value dims)");
    }
    for (const std::string& item : split_commas(text)) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) {
            throw UsageError("--model: expected key=value, got '" + item + "'");
        }
        const std::string key = item.substr(0, eq);
        const std::size_t v = parse_count(item.substr(eq + 1), "--model " + key);
        if (key == "layers") {
            m.dims.layers = v;
        } else if (key == "hidden") {
            m.dims.hidden = v;
        } else if (key == "ffn") {
            m.dims.ffn = v;
        } else if (key == "heads") {
            m.dims.heads = v;
        } else if (key == "image_tokens" || key == "N") {
            m.dims.image_tokens = v;
        } else if (key == "system_tokens") {
            m.dims.system_tokens = v;
        } else if (key == "user_tokens") {
            m.dims.user_tokens = v;
        } else if (key == "output_tokens") {
            m.dims.output_tokens = v;
        } else {
            throw UsageError("--model: unknown dims key '" + key + "'");
        }
    }
    m.dims.validate();
    return m;
}

/// "Lc,Nc,Ls,Np" or key form "Lc=2,Nc=N"; Nc and Np accept N for the image-token count.
CspConfig parse_config(const std::string& text, const ModelDims& dims, ClusterStrategy strategy) {
    CspConfig c;
    c.strategy = strategy;
    auto tokens = [&](const std::string& v, const std::string& what) {
        return v == "N" ? dims.image_tokens : parse_count(v, what);
    };
    if (!text.empty()) {
        const auto items = split_commas(text);
        if (text.find('=') == std::string::npos) {
            if (items.size() != 4) {
                throw UsageError("--config: expected Lc,Nc,Ls,Np, got '" + text + "'");
            }
            c.cluster_layers = parse_count(items[0], "L_c");
            c.cluster_tokens = tokens(items[1], "N_c");
            c.scatter_layers = parse_count(items[2], "L_s");
            c.prune_tokens = tokens(items[3], "N_p");
        } else {
            for (const std::string& item : items) {
                const auto eq = item.find('=');
                if (eq == std::string::npos) {
                    throw UsageError("--config: mixes positional and key=value items in '" + text + "'");
                }
                const std::string key = item.substr(0, eq);
                const std::string value = item.substr(eq + 1);
                if (key == "Lc") {
                    c.cluster_layers = parse_count(value, "L_c");
                } else if (key == "Nc") {
                    c.cluster_tokens = tokens(value, "N_c");
                } else if (key == "Ls") {
                    c.scatter_layers = parse_count(value, "L_s");
                } else if (key == "Np") {
                    c.prune_tokens = tokens(value, "N_p");
                } else {
                    throw UsageError("--config: unknown key '" + key + "' (expected Lc, Nc, Ls, Np)");
                }
            }
        }
    }
    c.validate(dims.layers, dims.image_tokens);
    return c;
}

std::pair<std::size_t, double> parse_planted(const std::string& text) {
    const auto items = split_commas(text);
    if (items.size() != 2) {
        throw UsageError("--planted: expected count,gain, got '" + text + "'");
    }
    return {parse_count(items[0], "planted count"), parse_real(items[1], "planted gain")};
}

ReportFormat parse_format(const std::string& text) {
    const auto f = parse_report_format(text);
    if (!f) {
        throw UsageError("--format: expected csv or jsonl, got '" + text + "'");
    }
    return *f;
}

std::uint64_t default_seed() {
    const char* env = std::getenv("CSP_SEED");
    if (env == nullptr || *env == '\0') {
        return 0;
    }
    return parse_count(env, "CSP_SEED");
}

std::string percent(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%+.3f%%", fraction * 100.0);
    return buf;
}

/// Preset dims with overhead tokens solved against `target` (the preset's own
/// baseline by default); explicit dims are only recalibrated on request.
ModelDims calibrated_dims(const ModelChoice& model, std::optional<double> target) {
    if (model.preset) {
        const CalibratedModel cm = calibrated_preset(*model.preset, target);
        std::cerr << "calibrated " << model.preset->name << ": N_other=" << cm.calibration.other_tokens
                  << " baseline " << format_real(cm.calibration.flops / 1e12) << " TFLOPs ("
                  << percent(cm.calibration.relative_residual) << ")\n";
        return cm.dims;
    }
    if (target) {
        const CalibrationResult r = calibrate(model.dims, *target);
        std::cerr << "calibrated: N_other=" << r.other_tokens << " (" << percent(r.relative_residual) << ")\n";
        return with_other_tokens(model.dims, r.other_tokens);
    }
    return model.dims;
}

std::string read_file_or_usage(const std::string& path, const std::string& flag) {
    try {
        return read_text_file(path);
    } catch (const Error& e) {
        throw UsageError(flag + ": " + e.what());
    }
}

// analyze -------------------------------------------------------------------

struct AnalyzeArgs {
    std::string run;
    std::string model = "7b-224";
    std::string config;
    std::optional<double> calibrate;
    std::string strategy = "uniform";
    std::string format = "csv";
};

int cmd_analyze(const AnalyzeArgs& a) {
    const ReportFormat format = parse_format(a.format);
    if (!a.run.empty()) {
        const RunConfig rc = parse_run_config(read_file_or_usage(a.run, "--run"));
        ModelChoice model;
        model.dims = rc.dims;
        if (rc.preset) model.preset = find_preset(*rc.preset);
        const ModelDims dims = calibrated_dims(model, rc.calibrate_tflops);
        std::cout << emit_report(staged_flops(rc.config, dims), format);
        return kExitOk;
    }
    const ModelChoice model = parse_model(a.model);
    const auto strategy = parse_strategy(a.strategy);
    if (!strategy) {
        throw UsageError("--strategy: unknown strategy '" + a.strategy + "'");
    }
    const CspConfig config = parse_config(a.config, model.dims, *strategy);
    const ModelDims dims = calibrated_dims(model, a.calibrate);
    std::cout << emit_report(staged_flops(config, dims), format);
    return kExitOk;
}

// reproduce -----------------------------------------------------------------

struct ReproduceArgs {
    int table = 6;
    std::string out;
    std::string fixtures = CSP_FIXTURES_PATH;
};

int cmd_reproduce(const ReproduceArgs& a) {
    const auto fixtures = parse_fixtures(read_file_or_usage(a.fixtures, "--fixtures"));

    std::string csv =
        "table,model,ratio,L_c,N_c,L_s,N_p,n_avg_published,n_avg,n_avg_exact,n_avg_match,tflops_published,tflops,"
        "tflops_rel_err,tflops_match,match\n";
    std::size_t rows = 0;
    std::size_t mismatches = 0;
    for (const PublishedFixture& f : fixtures) {
        if (f.table != a.table) {
            continue;
        }
        const ModelPreset preset = *find_preset(f.model);
        const CalibratedModel cm = calibrated_preset(preset);
        const CspConfig config = f.config.value_or(unpruned_config(cm.dims));
        const CostReport cost = staged_flops(config, cm.dims);
        const double tflops = cost.flops_total / 1e12;
        const double rel = (tflops - f.tflops) / f.tflops;
        const bool n_ok = cost.n_avg_floor() == f.n_avg;
        const bool t_ok = std::abs(rel) <= kTflopsTolerance;
        ++rows;
        if (!(n_ok && t_ok)) {
            ++mismatches;
            std::cerr << "mismatch: table " << f.table << " " << f.model << " (" << config.cluster_layers << ","
                      << config.cluster_tokens << "," << config.scatter_layers << "," << config.prune_tokens
                      << "): n_avg " << cost.n_avg_floor() << " vs " << f.n_avg << ", TFLOPs "
                      << format_real(tflops) << " vs " << format_real(f.tflops) << " (" << percent(rel) << ")\n";
        }
        auto knob = [&](std::size_t v) { return f.config ? std::to_string(v) : std::string(); };
        csv += std::to_string(f.table) + "," + f.model + "," + (f.ratio ? std::to_string(*f.ratio) : "") + "," +
               knob(config.cluster_layers) + "," + knob(config.cluster_tokens) + "," + knob(config.scatter_layers) +
               "," + knob(config.prune_tokens) + "," + std::to_string(f.n_avg) + "," +
               std::to_string(cost.n_avg_floor()) + "," + cost.n_avg.to_string() + "," + (n_ok ? "1" : "0") + "," +
               format_real(f.tflops) + "," + format_real(tflops) + "," + format_real(rel) + "," +
               (t_ok ? "1" : "0") + "," + (n_ok && t_ok ? "1" : "0") + "\n";
    }
    if (rows == 0) {
        throw UsageError("--table: no fixture rows for table " + std::to_string(a.table));
    }

    if (a.out.empty()) {
        std::cout << csv;
    } else {
        std::ofstream out(a.out, std::ios::binary);
        if (!out || !(out << csv)) {
            throw UsageError("--out: cannot write '" + a.out + "'");
        }
    }
    std::cerr << "table " << a.table << ": " << rows - mismatches << "/" << rows << " rows match\n";
    return mismatches == 0 ? kExitOk : kExitMismatch;
}

// plan ----------------------------------------------------------------------

struct PlanArgs {
    std::optional<double> budget_navg;
    std::optional<double> budget_tflops;
    std::string grid;
    std::string model = "7b-224";
    std::size_t score_seeds = 0;
    std::string planted = "4,5";
    std::string masks;
    std::optional<std::uint64_t> seed;
    unsigned threads = 1;
    std::string format = "csv";
};

int cmd_plan(const PlanArgs& a) {
    if (!a.budget_navg && !a.budget_tflops) {
        throw UsageError("plan: give --budget-navg or --budget-tflops");
    }
    const ReportFormat format = parse_format(a.format);
    const ModelChoice model = parse_model(a.model);
    const ModelDims dims = calibrated_dims(model, std::nullopt);

    Budget budget;
    budget.max_n_avg = a.budget_navg;
    if (a.budget_tflops) {
        budget.max_flops = *a.budget_tflops * 1e12;
    }
    budget.grid = a.grid.empty() ? Grid::ablation_defaults() : parse_grid_file(read_file_or_usage(a.grid, "--grid"));

    std::vector<PlanEntry> plan = enumerate(budget, dims);
    if (a.score_seeds > 0) {
        if (model.preset) {
            throw UsageError("--score-seeds runs the toy pipeline; pass toy-scale dims via --model");
        }
        std::optional<InstanceMaskSet> masks;
        if (!a.masks.empty()) {
            masks = parse_mask_file(read_file_or_usage(a.masks, "--masks"));
        }
        const auto [count, gain] = parse_planted(a.planted);
        ScoreOptions opts;
        opts.seeds = a.score_seeds;
        opts.planted = PlantedSpec{count, gain};
        opts.base_seed = a.seed.value_or(default_seed());
        opts.weights_seed = opts.base_seed;
        opts.threads = a.threads;
        opts.masks = masks ? &*masks : nullptr;
        plan = score(std::move(plan), dims, opts);
    }
    if (plan.empty()) {
        std::cerr << "plan: no grid configuration meets the budget\n";
    }
    std::cout << emit_report(plan, format);
    return kExitOk;
}

// simulate ------------------------------------------------------------------

struct SimulateArgs {
    std::string run;
    std::optional<std::uint64_t> seed;
    std::string dims = "toy";
    std::string config;
    std::string strategy = "uniform";
    std::string planted = "4,5";
    std::string masks;
    std::size_t seeds = 1;
    unsigned threads = 1;
};

struct SimRun {
    std::uint64_t seed = 0;
    CspResult result;
    std::vector<std::size_t> planted;
    double recall = 0;
    std::uint64_t macs = 0;
};

int cmd_simulate(const SimulateArgs& a) {
    ModelDims dims;
    CspConfig config;
    std::size_t count = 0;
    double gain = 0;
    std::optional<std::uint64_t> file_seed;
    if (!a.run.empty()) {
        const RunConfig rc = parse_run_config(read_file_or_usage(a.run, "--run"));
        if (rc.preset) {
            throw UsageError("--run: simulate runs the toy decoder; presets are too large");
        }
        dims = rc.dims;
        config = rc.config;
        count = rc.planted.count;
        gain = rc.planted.gain;
        file_seed = rc.seed;
    } else {
        const ModelChoice model = parse_model(a.dims);
        if (model.preset) {
            throw UsageError("--dims: simulate runs the toy decoder; presets are too large");
        }
        dims = model.dims;
        const auto strategy = parse_strategy(a.strategy);
        if (!strategy) {
            throw UsageError("--strategy: unknown strategy '" + a.strategy + "'");
        }
        config = parse_config(a.config, dims, *strategy);
        std::tie(count, gain) = parse_planted(a.planted);
    }
    std::optional<InstanceMaskSet> masks;
    if (config.strategy == ClusterStrategy::SegFirst) {
        if (a.masks.empty()) {
            throw UsageError("--masks is required with --strategy segfirst");
        }
        masks = parse_mask_file(read_file_or_usage(a.masks, "--masks"));
        if (masks->cells() != dims.image_tokens) {
            throw UsageError("--masks: grid has " + std::to_string(masks->cells()) + " cells, model has " +
                             std::to_string(dims.image_tokens) + " image tokens");
        }
    } else if (!a.masks.empty()) {
        throw UsageError("--masks is only used with --strategy segfirst");
    }
    if (count > dims.image_tokens) {
        throw UsageError("--planted: count exceeds the image-token count");
    }
    if (a.seeds == 0) {
        throw UsageError("--seeds: need at least one run");
    }

    // Same derivation as the planner's scorer, so aggregates agree with `plan`.
    const std::uint64_t base = a.seed ? *a.seed : file_seed ? *file_seed : default_seed();
    const DecoderWeights weights = init_weights(dims, base);
    std::vector<SimRun> runs(a.seeds);
    parallel_for(a.seeds, a.threads, [&](std::size_t i) {
        SimRun& r = runs[i];
        r.seed = score_run_seed(base, i);
        const VisionStubOutput stub = vision_stub(dims, r.seed, count, gain);
        Rng rng(derive_seed(r.seed, 1));
        MacMeter meter;
        r.result = run_csp(weights, stub, config, rng, masks ? &*masks : nullptr, &meter);
        r.planted = stub.planted;
        r.recall = planted_recall(stub.planted, r.result.retained);
        r.macs = meter.total();
    });

    using nlohmann::ordered_json;
    double recall_sum = 0;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const SimRun& r = runs[i];
        if (a.seeds == 1) {
            std::cout << emit_report(r.result.trace, ReportFormat::JsonLines);
        }
        ordered_json j;
        j["run"] = i;
        j["seed"] = r.seed;
        j["L_c"] = config.cluster_layers;
        j["N_c"] = config.cluster_tokens;
        j["L_s"] = config.scatter_layers;
        j["N_p"] = config.prune_tokens;
        j["strategy"] = std::string(to_string(config.strategy));
        j["clustered"] = r.result.clustered.indices;
        j["retained"] = r.result.retained.indices;
        j["planted"] = r.planted;
        j["recall"] = std::strtod(format_real(r.recall).c_str(), nullptr);
        j["n_avg_exact"] = r.result.trace.mean_image_tokens().to_string();
        j["macs"] = r.macs;
        std::cout << j.dump() << "\n";
        recall_sum += r.recall;
    }
    if (a.seeds > 1) {
        ordered_json j;
        j["runs"] = a.seeds;
        j["mean_recall"] = std::strtod(format_real(recall_sum / static_cast<double>(a.seeds)).c_str(), nullptr);
        std::cout << j.dump() << "\n";
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Staged visual-token schedule toolkit"};
    app.require_subcommand(1);

    AnalyzeArgs analyze;
    auto* an = app.add_subcommand("analyze", "Cost of one schedule on a model");
    auto* an_run = an->add_option("--run", analyze.run, "Run-config file (replaces --model/--config/--strategy/--calibrate)");
    an->add_option("--model", analyze.model, "Preset (7b-224, 7b-336, 13b-224), toy, or key=value dims")->excludes(an_run);
    an->add_option("--config", analyze.config, "Lc,Nc,Ls,Np or Lc=..,Nc=..; N means all image tokens")->excludes(an_run);
    an->add_option("--calibrate", analyze.calibrate, "Baseline TFLOPs to solve the overhead token count against")->excludes(an_run);
    an->add_option("--strategy", analyze.strategy, "Clustering strategy label")->excludes(an_run);
    an->add_option("--format", analyze.format, "csv or jsonl");

    ReproduceArgs reproduce;
    auto* rp = app.add_subcommand("reproduce", "Compare computed N_avg/TFLOPs with the published tables");
    rp->add_option("--table", reproduce.table, "Table number")->check(CLI::IsMember({1, 2, 6}));
    rp->add_option("--out", reproduce.out, "Write the CSV here instead of stdout");
    rp->add_option("--fixtures", reproduce.fixtures, "Expected-values CSV");

    PlanArgs plan;
    auto* pl = app.add_subcommand("plan", "Grid configurations meeting a compute budget");
    pl->add_option("--budget-navg", plan.budget_navg, "Upper bound on N_avg");
    pl->add_option("--budget-tflops", plan.budget_tflops, "Upper bound on TFLOPs");
    pl->add_option("--grid", plan.grid, "Grid file (defaults to the ablation values)");
    pl->add_option("--model", plan.model, "Preset, toy, or key=value dims");
    pl->add_option("--score-seeds", plan.score_seeds, "Score each entry by planted recall over this many runs");
    pl->add_option("--planted", plan.planted, "Planted tokens as count,gain");
    pl->add_option("--masks", plan.masks, "Mask file for segfirst grid entries");
    pl->add_option("--seed", plan.seed, "Base seed (default: CSP_SEED or 0)");
    pl->add_option("--threads", plan.threads, "Scoring workers");
    pl->add_option("--format", plan.format, "csv or jsonl");

    SimulateArgs sim;
    auto* sm = app.add_subcommand("simulate", "Run the staged pipeline on the toy decoder (json lines)");
    auto* sm_run = sm->add_option("--run", sim.run, "Run-config file (replaces --dims/--config/--strategy/--planted; --masks still applies)");
    sm->add_option("--seed", sim.seed, "Base seed (default: CSP_SEED or 0)");
    sm->add_option("--dims", sim.dims, "toy or key=value dims")->excludes(sm_run);
    sm->add_option("--config", sim.config, "Lc,Nc,Ls,Np or Lc=..,Nc=..; N means all image tokens")->excludes(sm_run);
    sm->add_option("--strategy", sim.strategy, "random, uniform, cls or segfirst")->excludes(sm_run);
    sm->add_option("--planted", sim.planted, "Planted tokens as count,gain")->excludes(sm_run);
    sm->add_option("--masks", sim.masks, "Mask file (segfirst only)");
    sm->add_option("--seeds", sim.seeds, "Number of runs");
    sm->add_option("--threads", sim.threads, "Workers for multi-run simulation");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*an) {
            return cmd_analyze(analyze);
        }
        if (*rp) {
            return cmd_reproduce(reproduce);
        }
        if (*pl) {
            return cmd_plan(plan);
        }
        return cmd_simulate(sim);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
    } catch (const csp::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
    }
    return kExitUsage;
}
