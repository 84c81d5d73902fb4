#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "csp/cost_model.hpp"
#include "csp/pipeline.hpp"
#include "csp/planner.hpp"
#include "csp/selection.hpp"

namespace csp {

// Mask files ---------------------------------------------------------------
//
//   CSPMASK <H> <W> <N_o>
//   <N_o blocks of H lines, each W characters from {0,1}>
//
// Blank lines after the last block are allowed; anything else is rejected.

InstanceMaskSet parse_mask_file(std::string_view text);
std::string serialize_mask_file(const InstanceMaskSet& masks);

// Run configuration files ---------------------------------------------------
//
// Flat `key = value` lines, '#' starts a comment. Keys:
//   model                                preset name (excludes explicit dims)
//   layers hidden ffn heads image_tokens system_tokens user_tokens output_tokens
//   cluster_layers cluster_tokens scatter_layers prune_tokens
//   strategy seed planted_count planted_gain calibrate_tflops
// cluster_tokens and prune_tokens also accept "N" (the image-token count).

struct RunConfig {
    std::optional<std::string> preset;  ///< set when `model` was given
    ModelDims dims;                     ///< toy dims, or the preset's dims
    CspConfig config;
    std::uint64_t seed = 0;
    PlantedSpec planted;
    std::optional<double> calibrate_tflops;
};

/// Throws ParseError with the offending line (and key) on any error,
/// including a configuration that fails ModelDims / CspConfig validation.
RunConfig parse_run_config(std::string_view text);

// Grid files ----------------------------------------------------------------
//
// Same key = value syntax with comma-separated lists:
//   cluster_layers cluster_tokens scatter_layers prune_tokens strategies
// Knobs left out take their Grid::ablation_defaults() values.

Grid parse_grid_file(std::string_view text);

// Published-values CSV ---------------------------------------------------------

/// One expected row. Baseline rows have no config.
struct PublishedFixture {
    int table = 0;
    std::string model;
    std::optional<int> ratio;  ///< pruning ratio in percent
    std::optional<CspConfig> config;
    std::uint64_t n_avg = 0;
    double tflops = 0.0;
};

/// Header `table,model,ratio,L_c,N_c,L_s,N_p,n_avg,tflops`. Config and ratio
/// cells are empty on baseline rows.
std::vector<PublishedFixture> parse_fixtures(std::string_view text);

// Reports -------------------------------------------------------------------

enum class ReportFormat { Csv, JsonLines };
std::optional<ReportFormat> parse_report_format(std::string_view text);

/// Six significant digits, as used in every report.
std::string format_real(double value);

std::string emit_report(const CostReport& report, ReportFormat format);
std::string emit_report(const StageTrace& trace, ReportFormat format);
/// Ranked; an empty list gives a header-only CSV (and no json lines).
std::string emit_report(const std::vector<PlanEntry>& plan, ReportFormat format);

/// Reads a whole file; throws Error when it cannot be opened.
std::string read_text_file(const std::string& path);

}  // namespace csp
