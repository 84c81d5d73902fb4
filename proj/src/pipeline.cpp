#include "csp/pipeline.hpp"

#include <algorithm>
#include <string>

#include "csp/error.hpp"

namespace csp {

void CspConfig::validate(std::size_t total_layers, std::size_t image_tokens) const {
    auto fail = [](const std::string& what) { throw ArgumentError("CspConfig: " + what); };
    if (cluster_layers < 1) {
        fail("L_c must be >= 1");
    }
    if (cluster_layers + scatter_layers > total_layers) {
        fail("L_c + L_s = " + std::to_string(cluster_layers + scatter_layers) + " exceeds L_total = " +
             std::to_string(total_layers));
    }
    if (cluster_tokens < 1 || cluster_tokens > image_tokens) {
        fail("N_c = " + std::to_string(cluster_tokens) + " outside [1, " + std::to_string(image_tokens) + "]");
    }
    if (prune_tokens < 1 || prune_tokens > image_tokens) {
        fail("N_p = " + std::to_string(prune_tokens) + " outside [1, " + std::to_string(image_tokens) + "]");
    }
}

std::string_view to_string(Stage s) noexcept {
    switch (s) {
        case Stage::Clustering:
            return "clustering";
        case Stage::Scattering:
            return "scattering";
        case Stage::Pruning:
            return "pruning";
    }
    return "unknown";
}

Rational StageTrace::mean_image_tokens() const {
    Rational r{0, layers.empty() ? 1 : layers.size()};
    for (const LayerRecord& rec : layers) {
        r.num += rec.active.size();
    }
    return r;
}

std::vector<std::uint64_t> sequence_positions(const ModelDims& dims, std::span<const std::size_t> image_indices) {
    std::vector<std::uint64_t> pos;
    pos.reserve(dims.other_tokens() + image_indices.size());
    for (std::size_t i = 0; i < dims.system_tokens; ++i) {
        pos.push_back(i);
    }
    for (std::size_t idx : image_indices) {
        pos.push_back(dims.system_tokens + idx);
    }
    const std::size_t tail_start = dims.system_tokens + dims.image_tokens;
    for (std::size_t i = 0; i < dims.user_tokens + dims.output_tokens; ++i) {
        pos.push_back(tail_start + i);
    }
    return pos;
}

Matrix gather_image_subset(const Matrix& hidden, const ModelDims& dims, std::span<const std::size_t> active,
                           std::span<const std::size_t> keep) {
    const std::size_t expected = dims.other_tokens() + active.size();
    if (hidden.rows() != expected) {
        throw ShapeError("gather_image_subset: sequence has " + std::to_string(hidden.rows()) + " rows, expected " +
                         std::to_string(expected));
    }
    std::vector<std::size_t> rows;
    rows.reserve(dims.other_tokens() + keep.size());
    for (std::size_t i = 0; i < dims.system_tokens; ++i) {
        rows.push_back(i);
    }
    for (std::size_t idx : keep) {
        const auto it = std::lower_bound(active.begin(), active.end(), idx);
        if (it == active.end() || *it != idx) {
            throw ArgumentError("gather_image_subset: image token " + std::to_string(idx) + " is not active");
        }
        rows.push_back(dims.system_tokens + static_cast<std::size_t>(it - active.begin()));
    }
    for (std::size_t i = dims.system_tokens + active.size(); i < hidden.rows(); ++i) {
        rows.push_back(i);
    }
    return hidden.select_rows(rows);
}

AssembledSequence assemble_sequence(const DecoderWeights& weights, const VisionStubOutput& stub,
                                    const SelectionResult& selection) {
    const ModelDims& dims = weights.dims;
    selection.validate(dims.image_tokens);
    const FullSequence full = full_sequence(weights, stub);
    const std::vector<std::size_t> all = SelectionResult::all(dims.image_tokens).indices;

    AssembledSequence seq;
    seq.hidden = gather_image_subset(full.hidden, dims, all, selection.indices);
    seq.positions = sequence_positions(dims, selection.indices);
    seq.seg_index = seq.hidden.rows() - 1;
    return seq;
}

StageOutput run_stage(const Matrix& hidden, std::span<const std::uint64_t> positions, const DecoderWeights& weights,
                      std::size_t first_layer, std::size_t count, Stage stage, std::span<const std::size_t> active,
                      StageTrace* trace, MacMeter* meter) {
    if (first_layer + count > weights.layers.size()) {
        throw ArgumentError("run_stage: layers [" + std::to_string(first_layer) + ", " +
                            std::to_string(first_layer + count) + ") exceed model depth");
    }
    StageOutput out;
    out.hidden = hidden;
    for (std::size_t l = first_layer; l < first_layer + count; ++l) {
        LayerOutput lo = decoder_layer(out.hidden, positions, weights.layers[l], weights.dims.heads, meter);
        out.hidden = std::move(lo.hidden);
        out.last_attention = std::move(lo.attention);
        out.last_layer = l;
        if (trace != nullptr) {
            trace->layers.push_back(LayerRecord{stage, {active.begin(), active.end()}, hidden.rows()});
        }
    }
    return out;
}

StageOutput run_clustering_stage(const AssembledSequence& seq, const DecoderWeights& weights,
                                 std::size_t cluster_layers, const SelectionResult& selection, StageTrace* trace,
                                 MacMeter* meter) {
    return run_stage(seq.hidden, seq.positions, weights, 0, cluster_layers, Stage::Clustering, selection.indices,
                     trace, meter);
}

Matrix scatter(const Matrix& clustered_hidden, const Matrix& image_embed, const SelectionResult& selection,
               const ModelDims& dims) {
    const std::size_t sel = selection.size();
    if (clustered_hidden.rows() != dims.other_tokens() + sel || clustered_hidden.cols() != dims.hidden) {
        throw ShapeError("scatter: clustered sequence does not match the selection");
    }
    if (image_embed.rows() != dims.image_tokens || image_embed.cols() != dims.hidden) {
        throw ShapeError("scatter: image embeddings do not match model dims");
    }
    selection.validate(dims.image_tokens);

    Matrix full(dims.full_length(), dims.hidden);
    auto copy_row = [&](const Matrix& src, std::size_t from, std::size_t to) {
        std::copy_n(src.row(from).begin(), dims.hidden, full.row(to).begin());
    };
    for (std::size_t i = 0; i < dims.system_tokens; ++i) {
        copy_row(clustered_hidden, i, i);
    }
    std::size_t k = 0;
    for (std::size_t i = 0; i < dims.image_tokens; ++i) {
        if (k < sel && selection.indices[k] == i) {
            copy_row(clustered_hidden, dims.system_tokens + k, dims.system_tokens + i);
            ++k;
        } else {
            copy_row(image_embed, i, dims.system_tokens + i);
        }
    }
    const std::size_t tail = dims.user_tokens + dims.output_tokens;
    for (std::size_t i = 0; i < tail; ++i) {
        copy_row(clustered_hidden, dims.system_tokens + sel + i, dims.system_tokens + dims.image_tokens + i);
    }
    return full;
}

SegAttention extract_seg_attention(std::span<const Matrix> attention, std::size_t seg_index, const ModelDims& dims,
                                   std::span<const std::size_t> active, std::size_t source_layer) {
    if (attention.empty()) {
        throw StateError("extract_seg_attention: no attention tensor");
    }
    const std::size_t n = dims.other_tokens() + active.size();
    for (const Matrix& head : attention) {
        if (head.rows() != n || head.cols() != n) {
            throw StateError("extract_seg_attention: attention is " + std::to_string(head.rows()) + "x" +
                             std::to_string(head.cols()) + " but the sequence has " + std::to_string(n) +
                             " tokens");
        }
    }
    if (seg_index >= n) {
        throw ArgumentError("extract_seg_attention: seg index out of range");
    }
    SegAttention out;
    out.source_layer = source_layer;
    out.scores.assign(dims.image_tokens, 0.0);
    const double inv_heads = 1.0 / static_cast<double>(attention.size());
    for (std::size_t k = 0; k < active.size(); ++k) {
        double sum = 0.0;
        for (const Matrix& head : attention) {
            sum += head(seg_index, dims.system_tokens + k);
        }
        out.scores[active[k]] = sum * inv_heads;
    }
    return out;
}

SegAttention extract_seg_attention(std::span<const Matrix> attention, std::size_t seg_index, const ModelDims& dims,
                                   std::size_t source_layer) {
    if (!attention.empty() && attention.front().rows() != dims.full_length()) {
        throw StateError("extract_seg_attention: attention covers " + std::to_string(attention.front().rows()) +
                         " tokens, not the full sequence of " + std::to_string(dims.full_length()) +
                         " (called outside the scattering stage?)");
    }
    const std::vector<std::size_t> all = SelectionResult::all(dims.image_tokens).indices;
    return extract_seg_attention(attention, seg_index, dims, all, source_layer);
}

SelectionResult prune(const SegAttention& seg, std::size_t prune_tokens) {
    if (prune_tokens > seg.scores.size()) {
        throw ArgumentError("prune: N_p = " + std::to_string(prune_tokens) + " exceeds N = " +
                            std::to_string(seg.scores.size()));
    }
    return SelectionResult{top_k_indices(seg.scores, prune_tokens)};
}

SelectionResult select_for_strategy(const ModelDims& dims, const VisionStubOutput& stub, const CspConfig& config,
                                    Rng& rng, const InstanceMaskSet* masks) {
    switch (config.strategy) {
        case ClusterStrategy::Random:
            return select_random(dims.image_tokens, config.cluster_tokens, rng);
        case ClusterStrategy::Uniform:
            return select_uniform(dims.image_tokens, config.cluster_tokens);
        case ClusterStrategy::ClsAttention:
            return select_cls(stub.cls_query, stub.image_keys, config.cluster_tokens);
        case ClusterStrategy::SegFirst:
            if (masks == nullptr) {
                throw ArgumentError("SegFirst clustering needs an instance mask set");
            }
            if (masks->cells() != dims.image_tokens) {
                throw ArgumentError("mask grid " + std::to_string(masks->height) + "x" + std::to_string(masks->width) +
                                    " does not cover N = " + std::to_string(dims.image_tokens) + " tokens");
            }
            return select_seg_first(*masks, config.cluster_tokens, rng);
    }
    throw ArgumentError("unknown clustering strategy");
}

CspResult run_csp(const DecoderWeights& weights, const VisionStubOutput& stub, const CspConfig& config, Rng& rng,
                  const InstanceMaskSet* masks, MacMeter* meter) {
    const ModelDims& dims = weights.dims;
    config.validate(dims.layers, dims.image_tokens);

    CspResult result;
    result.clustered = select_for_strategy(dims, stub, config, rng, masks);

    const AssembledSequence seq = assemble_sequence(weights, stub, result.clustered);
    StageOutput clustered =
        run_clustering_stage(seq, weights, config.cluster_layers, result.clustered, &result.trace, meter);

    // Sequence entering the pruning decision, described by its active image slots.
    std::vector<std::size_t> active;
    Matrix hidden;
    std::vector<Matrix> decision_attention;
    std::size_t decision_layer = 0;
    std::size_t next_layer = config.cluster_layers;

    if (config.scatter_layers > 0) {
        active = SelectionResult::all(dims.image_tokens).indices;
        const Matrix full = scatter(clustered.hidden, stub.image_embed, result.clustered, dims);
        const std::vector<std::uint64_t> positions = sequence_positions(dims, active);
        StageOutput scattered = run_stage(full, positions, weights, next_layer, config.scatter_layers,
                                          Stage::Scattering, active, &result.trace, meter);
        next_layer += config.scatter_layers;
        hidden = std::move(scattered.hidden);
        decision_attention = std::move(scattered.last_attention);
        decision_layer = scattered.last_layer;
    } else {
        active = result.clustered.indices;
        hidden = std::move(clustered.hidden);
        decision_attention = std::move(clustered.last_attention);
        decision_layer = clustered.last_layer;
    }

    const std::size_t seg_row = hidden.rows() - 1;
    result.seg_attention = extract_seg_attention(decision_attention, seg_row, dims, active, decision_layer);

    if (active.size() == dims.image_tokens) {
        result.retained = prune(result.seg_attention, config.prune_tokens);
    } else {
        std::vector<double> active_scores(active.size());
        for (std::size_t k = 0; k < active.size(); ++k) {
            active_scores[k] = result.seg_attention.scores[active[k]];
        }
        const std::size_t keep = std::min(config.prune_tokens, active.size());
        for (std::size_t k : top_k_indices(active_scores, keep)) {
            result.retained.indices.push_back(active[k]);
        }
    }

    const std::size_t prune_layers = config.prune_layers(dims.layers);
    if (prune_layers > 0) {
        const Matrix pruned = gather_image_subset(hidden, dims, active, result.retained.indices);
        const std::vector<std::uint64_t> positions = sequence_positions(dims, result.retained.indices);
        StageOutput out = run_stage(pruned, positions, weights, next_layer, prune_layers, Stage::Pruning,
                                    result.retained.indices, &result.trace, meter);
        hidden = std::move(out.hidden);
    }

    const auto seg = hidden.row(hidden.rows() - 1);
    result.seg_hidden.assign(seg.begin(), seg.end());
    return result;
}

double planted_recall(std::span<const std::size_t> planted, const SelectionResult& retained) {
    if (planted.empty()) {
        return 1.0;
    }
    std::size_t hit = 0;
    for (std::size_t idx : planted) {
        if (retained.contains(idx)) {
            ++hit;
        }
    }
    return static_cast<double>(hit) / static_cast<double>(planted.size());
}

}  // namespace csp
