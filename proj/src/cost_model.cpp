#include "csp/cost_model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "csp/error.hpp"

namespace csp {

std::uint64_t layer_macs(std::uint64_t n, std::uint64_t d, std::uint64_t m) {
    return 4 * n * d * d + 2 * n * n * d + 3 * n * d * m;
}

namespace {

// Without a scattering stage, pruning can only keep tokens that were clustered.
std::size_t effective_prune_tokens(const CspConfig& config, std::size_t cluster) {
    return config.scatter_layers == 0 ? std::min(config.prune_tokens, cluster) : config.prune_tokens;
}

}  // namespace

Rational n_avg(const CspConfig& config, std::size_t image_tokens, std::size_t total_layers,
               std::optional<std::size_t> realized_cluster_tokens) {
    config.validate(total_layers, image_tokens);
    const std::size_t cluster = realized_cluster_tokens.value_or(config.cluster_tokens);
    const std::size_t prune_layers = config.prune_layers(total_layers);
    return Rational{cluster * config.cluster_layers + image_tokens * config.scatter_layers +
                        effective_prune_tokens(config, cluster) * prune_layers,
                    total_layers};
}

namespace {

CostReport build_report(const CspConfig& config, const ModelDims& dims, double mac_scale,
                        const std::size_t (&image_tokens)[3]) {
    const std::size_t layers[3] = {config.cluster_layers, config.scatter_layers, config.prune_layers(dims.layers)};
    const Stage tags[3] = {Stage::Clustering, Stage::Scattering, Stage::Pruning};

    CostReport report;
    report.config = config;
    report.mac_scale = mac_scale;
    report.n_avg = Rational{0, dims.layers};
    for (int s = 0; s < 3; ++s) {
        StageCost sc;
        sc.stage = tags[s];
        sc.layers = layers[s];
        sc.image_tokens = image_tokens[s];
        sc.sequence_length = dims.other_tokens() + image_tokens[s];
        sc.macs = layers[s] * layer_macs(sc.sequence_length, dims.hidden, dims.ffn);
        report.mac_total += sc.macs;
        report.n_avg.num += layers[s] * image_tokens[s];
        report.stages.push_back(sc);
    }
    report.flops_total = static_cast<double>(report.mac_total) * mac_scale;
    return report;
}

}  // namespace

CostReport staged_flops(const CspConfig& config, const ModelDims& dims, double mac_scale,
                        std::optional<std::size_t> realized_cluster_tokens) {
    dims.validate();
    config.validate(dims.layers, dims.image_tokens);
    const std::size_t cluster = realized_cluster_tokens.value_or(config.cluster_tokens);
    const std::size_t tokens[3] = {cluster, dims.image_tokens, effective_prune_tokens(config, cluster)};
    return build_report(config, dims, mac_scale, tokens);
}

CspConfig unpruned_config(const ModelDims& dims) {
    return CspConfig{dims.layers, dims.image_tokens, 0, dims.image_tokens, ClusterStrategy::Uniform};
}

CostReport cost_from_trace(const StageTrace& trace, const CspConfig& config, const ModelDims& dims,
                           double mac_scale) {
    if (trace.layers.size() != dims.layers) {
        throw ArgumentError("cost_from_trace: trace has " + std::to_string(trace.layers.size()) + " layers, model has " +
                            std::to_string(dims.layers));
    }
    std::size_t tokens[3] = {0, dims.image_tokens, config.prune_tokens};
    for (const LayerRecord& rec : trace.layers) {
        tokens[static_cast<int>(rec.stage)] = rec.active.size();
    }
    return build_report(config, dims, mac_scale, tokens);
}

CalibrationResult calibrate(const ModelDims& dims, double baseline_tflops) {
    if (!(baseline_tflops > 0.0)) {
        throw ArgumentError("calibrate: baseline TFLOPs must be positive");
    }
    const double target = baseline_tflops * 1e12;
    auto flops_at = [&](std::size_t other) {
        return static_cast<double>(dims.layers) *
               static_cast<double>(layer_macs(other + dims.image_tokens, dims.hidden, dims.ffn)) * kFlopsPerMac;
    };

    // Smallest count whose FLOPs reach the target (or the upper end).
    std::size_t lo = 0;
    std::size_t hi = kMaxOtherTokens;
    while (lo < hi) {
        const std::size_t mid = lo + (hi - lo) / 2;
        if (flops_at(mid) >= target) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    std::size_t best = lo;
    if (lo > 0 && std::abs(flops_at(lo - 1) - target) < std::abs(flops_at(lo) - target)) {
        best = lo - 1;
    }

    CalibrationResult r;
    r.other_tokens = best;
    r.mac_scale = kFlopsPerMac;
    r.flops = flops_at(best);
    r.relative_residual = (r.flops - target) / target;
    if (std::abs(r.relative_residual) > kCalibrationTolerance) {
        throw CalibrationError("calibrate: no overhead count in [0, " + std::to_string(kMaxOtherTokens) +
                                   "] reproduces " + std::to_string(baseline_tflops) +
                                   " TFLOPs within 1% (best residual " + std::to_string(r.relative_residual) + ")",
                               r.relative_residual);
    }
    return r;
}

ModelDims with_other_tokens(ModelDims dims, std::size_t other_tokens) {
    if (other_tokens < 3) {
        throw ArgumentError("with_other_tokens: need at least 3 non-image tokens, got " + std::to_string(other_tokens));
    }
    dims.output_tokens = 1;
    const std::size_t rest = other_tokens - 1;
    dims.user_tokens = rest / 2;
    dims.system_tokens = rest - dims.user_tokens;
    return dims;
}

const std::vector<ModelPreset>& model_presets() {
    static const std::vector<ModelPreset> presets = [] {
        auto dims = [](std::size_t layers, std::size_t hidden, std::size_t ffn, std::size_t heads, std::size_t n) {
            ModelDims d;
            d.layers = layers;
            d.hidden = hidden;
            d.ffn = ffn;
            d.heads = heads;
            d.image_tokens = n;
            d.system_tokens = 1;
            d.user_tokens = 1;
            d.output_tokens = 1;
            return d;
        };
        return std::vector<ModelPreset>{
            {"7b-224", dims(32, 4096, 11008, 32, 256), 4.12},
            {"7b-336", dims(32, 4096, 11008, 32, 576), 8.25},
            {"13b-224", dims(40, 5120, 13824, 40, 256), 8.05},
        };
    }();
    return presets;
}

std::optional<ModelPreset> find_preset(std::string_view name) {
    for (const ModelPreset& p : model_presets()) {
        if (p.name == name) {
            return p;
        }
    }
    return std::nullopt;
}

CalibratedModel calibrated_preset(const ModelPreset& preset, std::optional<double> baseline_tflops) {
    CalibratedModel out;
    out.calibration = calibrate(preset.dims, baseline_tflops.value_or(preset.baseline_tflops));
    out.dims = with_other_tokens(preset.dims, out.calibration.other_tokens);
    return out;
}

}  // namespace csp
