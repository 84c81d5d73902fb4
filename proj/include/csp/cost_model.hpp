#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "csp/pipeline.hpp"
#include "csp/rational.hpp"
#include "csp/toy_model.hpp"

namespace csp {

/// FLOPs per multiply-accumulate (multiply and add counted separately).
inline constexpr double kFlopsPerMac = 2.0;

/// MACs of one decoder layer over n tokens: 4nd^2 + 2n^2d + 3ndm.
/// Covers the attention projections, score and context products, and the
/// three FFN matmuls; norms, softmax and RoPE are not counted.
std::uint64_t layer_macs(std::uint64_t n, std::uint64_t d, std::uint64_t m);

/// Layer-averaged image-token count (N_c*L_c + N*L_s + N_p*L_p) / L_total.
/// `realized_cluster_tokens` replaces N_c when the clustering stage selected a
/// different count (Seg-First). With L_s = 0 the pruning stage keeps
/// min(N_p, N_c) tokens, matching what the pipeline can execute.
Rational n_avg(const CspConfig& config, std::size_t image_tokens, std::size_t total_layers,
               std::optional<std::size_t> realized_cluster_tokens = std::nullopt);

struct StageCost {
    Stage stage = Stage::Clustering;
    std::size_t layers = 0;
    std::size_t image_tokens = 0;
    std::size_t sequence_length = 0;
    std::uint64_t macs = 0;
};

struct CostReport {
    CspConfig config;
    std::vector<StageCost> stages;  ///< always clustering, scattering, pruning
    Rational n_avg;
    std::uint64_t mac_total = 0;
    double mac_scale = kFlopsPerMac;
    double flops_total = 0.0;

    std::uint64_t n_avg_floor() const noexcept { return n_avg.floor(); }
};

/// Staged sum of L_stage * layer_macs(n_stage) with n_stage = other tokens +
/// stage image tokens; flops_total = mac_total * mac_scale.
CostReport staged_flops(const CspConfig& config, const ModelDims& dims, double mac_scale = kFlopsPerMac,
                        std::optional<std::size_t> realized_cluster_tokens = std::nullopt);

/// Unpruned schedule (every layer sees all N image tokens).
CspConfig unpruned_config(const ModelDims& dims);

/// Cost of an executed pipeline run, from its per-layer trace.
CostReport cost_from_trace(const StageTrace& trace, const CspConfig& config, const ModelDims& dims,
                           double mac_scale = kFlopsPerMac);

struct CalibrationResult {
    std::size_t other_tokens = 0;  ///< N_sys + N_usr + N_out
    double mac_scale = kFlopsPerMac;
    double flops = 0.0;            ///< unpruned FLOPs at the solved count
    double relative_residual = 0;  ///< (flops - target) / target
};

inline constexpr std::size_t kMaxOtherTokens = 4096;
inline constexpr double kCalibrationTolerance = 0.01;

/// Solves L * layer_macs(N_other + N) * 2 = baseline for integer N_other in
/// [0, 4096] by bisection, then keeps the closer neighbour. Uses only the
/// layer count, sizes and N of `dims`. Throws CalibrationError when the best
/// residual exceeds 1%.
CalibrationResult calibrate(const ModelDims& dims, double baseline_tflops);

/// Splits an overhead count into system / user / output groups (1 output
/// token, the rest halved with the extra token on the system side).
ModelDims with_other_tokens(ModelDims dims, std::size_t other_tokens);

struct ModelPreset {
    std::string name;
    ModelDims dims;  ///< token-group split filled by calibration
    double baseline_tflops = 0.0;
};

/// 7b-224, 7b-336, 13b-224.
const std::vector<ModelPreset>& model_presets();
std::optional<ModelPreset> find_preset(std::string_view name);

struct CalibratedModel {
    ModelDims dims;
    CalibrationResult calibration;
};

/// Preset dims with the overhead tokens solved against `baseline_tflops`
/// (the preset's own baseline when not given).
CalibratedModel calibrated_preset(const ModelPreset& preset, std::optional<double> baseline_tflops = std::nullopt);

}  // namespace csp
