#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "csp/core_math.hpp"

namespace csp {

/// Static architecture description. Token groups are laid out as
/// system | image | user | output, and the final output token plays the [SEG] role.
struct ModelDims {
    std::size_t layers = 8;
    std::size_t hidden = 64;
    std::size_t ffn = 172;
    std::size_t heads = 4;
    std::size_t image_tokens = 64;
    std::size_t system_tokens = 8;
    std::size_t user_tokens = 8;
    std::size_t output_tokens = 1;

    /// Throws ArgumentError naming the first violated invariant.
    void validate() const;

    std::size_t head_dim() const noexcept { return hidden / heads; }
    std::size_t other_tokens() const noexcept { return system_tokens + user_tokens + output_tokens; }
    std::size_t full_length() const noexcept { return other_tokens() + image_tokens; }
    std::size_t seg_index_full() const noexcept { return full_length() - 1; }

    bool operator==(const ModelDims&) const = default;
};

/// Default dims for tests and the simulate command.
ModelDims toy_dims();

struct LayerWeights {
    Matrix wq, wk, wv, wo;
    Matrix w_gate, w_up, w_down;
};

struct DecoderWeights {
    ModelDims dims;
    std::vector<LayerWeights> layers;
    Matrix system_embed;
    Matrix user_embed;
    Matrix output_embed;
};

/// Fixed unit vector carried by planted image tokens and by the [SEG] query.
std::vector<double> planted_signal_direction(std::size_t hidden);

/// Deterministic in (dims, seed). Projection entries are N(0, 1/d); the two
/// residual-branch outputs (wo, w_down) are further scaled by 1/sqrt(2L).
/// Embedding rows are N(0, 1) per entry.
///
/// Every head also carries a rank-one "concept channel": the first coordinate
/// of its slowest RoPE pair, in both wq and wk, reads planted_signal_direction().
/// This stands in for what a trained model learns (matching query text to image
/// content) and is what lets [SEG] attention find planted tokens.
DecoderWeights init_weights(const ModelDims& dims, std::uint64_t seed);

struct VisionStubOutput {
    Matrix image_embed;             ///< N x d, already in decoder space
    std::vector<double> cls_query;  ///< d
    Matrix image_keys;              ///< N x d, last encoder layer keys
    std::vector<double> seg_query;  ///< d, text-query direction added to the [SEG] slot
    std::vector<std::size_t> planted;  ///< sorted, distinct, < N
};

/// Synthetic encoder output. Rows are N(0, 1) noise; planted rows get
/// `planted_gain` times planted_signal_direction() added to both the embedding
/// and the key. Both queries are sqrt(d) times that direction.
VisionStubOutput vision_stub(const ModelDims& dims, std::uint64_t seed, std::size_t planted_count, double planted_gain);

struct LayerOutput {
    Matrix hidden;
    std::vector<Matrix> attention;  ///< per head, n x n, post-softmax
};

/// Scaled pre-mask attention logits per head (q_i . k_j / sqrt(head_dim)),
/// with RoPE applied at `positions`.
std::vector<Matrix> attention_logits(const Matrix& hidden, std::span<const std::uint64_t> positions,
                                     const LayerWeights& w, std::size_t heads, MacMeter* meter = nullptr);

/// Pre-norm block: h + Attn(norm(h)), then h + FFN(norm(h)). Positions must be
/// strictly increasing. Every matmul reports to `meter`, which therefore sees
/// exactly 4nd^2 + 2n^2d + 3ndm per call.
LayerOutput decoder_layer(const Matrix& hidden, std::span<const std::uint64_t> positions, const LayerWeights& w,
                          std::size_t heads, MacMeter* meter = nullptr);

/// Embedding rows for the full, unpruned sequence and contiguous positions.
struct FullSequence {
    Matrix hidden;
    std::vector<std::uint64_t> positions;
};
FullSequence full_sequence(const DecoderWeights& weights, const VisionStubOutput& stub);

/// Plain forward over all layers and all tokens. Returns final hidden states.
Matrix forward_full(const DecoderWeights& weights, const VisionStubOutput& stub, MacMeter* meter = nullptr);

}  // namespace csp
