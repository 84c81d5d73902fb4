#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "csp/core_math.hpp"
#include "csp/rational.hpp"
#include "csp/selection.hpp"
#include "csp/toy_model.hpp"

namespace csp {

/// Schedule knobs. The pruning stage takes whatever layers remain.
struct CspConfig {
    std::size_t cluster_layers = 2;   // L_c
    std::size_t cluster_tokens = 16;  // N_c
    std::size_t scatter_layers = 2;   // L_s
    std::size_t prune_tokens = 8;     // N_p
    ClusterStrategy strategy = ClusterStrategy::Uniform;

    std::size_t prune_layers(std::size_t total_layers) const noexcept {
        return total_layers - cluster_layers - scatter_layers;
    }

    /// Throws ArgumentError naming the violated invariant.
    void validate(std::size_t total_layers, std::size_t image_tokens) const;

    bool operator==(const CspConfig&) const = default;
};

enum class Stage { Clustering, Scattering, Pruning };
std::string_view to_string(Stage s) noexcept;

struct LayerRecord {
    Stage stage = Stage::Clustering;
    std::vector<std::size_t> active;  ///< image-token indices taking part in this layer
    std::size_t sequence_length = 0;
};

struct StageTrace {
    std::vector<LayerRecord> layers;

    /// Mean active image-token count over layers, as an exact fraction.
    Rational mean_image_tokens() const;
};

/// Head-averaged [SEG] attention over image slots; inactive slots hold 0.
struct SegAttention {
    std::vector<double> scores;
    std::size_t source_layer = 0;
};

struct AssembledSequence {
    Matrix hidden;
    std::vector<std::uint64_t> positions;
    std::size_t seg_index = 0;
};

/// Position IDs for system | chosen image | user | output, with image token i at
/// N_sys + i and the trailing groups placed as if every image token were present.
std::vector<std::uint64_t> sequence_positions(const ModelDims& dims, std::span<const std::size_t> image_indices);

/// E_sys | E_img[S] | E_usr | E_out with preserved position IDs. The stub's
/// text-query vector is added to the final ([SEG]) slot.
AssembledSequence assemble_sequence(const DecoderWeights& weights, const VisionStubOutput& stub,
                                    const SelectionResult& selection);

struct StageOutput {
    Matrix hidden;
    std::vector<Matrix> last_attention;  ///< empty when no layer ran
    std::size_t last_layer = 0;
};

/// Runs `count` layers starting at `first_layer` over a sequence whose image
/// slots are `active`, appending one trace record per layer.
StageOutput run_stage(const Matrix& hidden, std::span<const std::uint64_t> positions, const DecoderWeights& weights,
                      std::size_t first_layer, std::size_t count, Stage stage, std::span<const std::size_t> active,
                      StageTrace* trace = nullptr, MacMeter* meter = nullptr);

/// First `cluster_layers` decoder layers on the assembled clustered sequence.
StageOutput run_clustering_stage(const AssembledSequence& seq, const DecoderWeights& weights,
                                 std::size_t cluster_layers, const SelectionResult& selection,
                                 StageTrace* trace = nullptr, MacMeter* meter = nullptr);

/// Rebuilds the full sequence: selected image slots keep their evolved state,
/// the rest re-enter as their original embeddings.
Matrix scatter(const Matrix& clustered_hidden, const Matrix& image_embed, const SelectionResult& selection,
               const ModelDims& dims);

/// Row `seg_index` of the head-averaged attention restricted to image columns.
/// Requires a full-length (scattering) attention tensor; throws StateError otherwise.
SegAttention extract_seg_attention(std::span<const Matrix> attention, std::size_t seg_index, const ModelDims& dims,
                                   std::size_t source_layer = 0);

/// Same, for a sequence whose image slots are `active` (any subset).
SegAttention extract_seg_attention(std::span<const Matrix> attention, std::size_t seg_index, const ModelDims& dims,
                                   std::span<const std::size_t> active, std::size_t source_layer);

/// Top `prune_tokens` scores, ties to the lower index.
SelectionResult prune(const SegAttention& seg, std::size_t prune_tokens);

/// Sub-sequence keeping non-image rows and the image rows in `keep` (a subset of `active`).
Matrix gather_image_subset(const Matrix& hidden, const ModelDims& dims, std::span<const std::size_t> active,
                           std::span<const std::size_t> keep);

struct CspResult {
    std::vector<double> seg_hidden;
    StageTrace trace;
    SegAttention seg_attention;
    SelectionResult clustered;
    SelectionResult retained;
};

/// Clustering -> scatter -> scattering -> [SEG]-guided prune -> pruning stage.
/// `masks` is required for SegFirst. With zero scattering layers the pruning
/// decision uses the last clustering layer and chooses among clustered tokens only.
CspResult run_csp(const DecoderWeights& weights, const VisionStubOutput& stub, const CspConfig& config, Rng& rng,
                  const InstanceMaskSet* masks = nullptr, MacMeter* meter = nullptr);

/// Clustering-stage selection for `config.strategy`.
SelectionResult select_for_strategy(const ModelDims& dims, const VisionStubOutput& stub, const CspConfig& config,
                                    Rng& rng, const InstanceMaskSet* masks);

/// Fraction of planted indices in `retained`; 1 when nothing was planted.
double planted_recall(std::span<const std::size_t> planted, const SelectionResult& retained);

}  // namespace csp
