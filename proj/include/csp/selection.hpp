#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "csp/core_math.hpp"

namespace csp {

enum class ClusterStrategy { Random, Uniform, ClsAttention, SegFirst };

std::string_view to_string(ClusterStrategy s) noexcept;
/// Accepts "random", "uniform", "cls", "segfirst" (case-insensitive, '-'/'_' ignored).
std::optional<ClusterStrategy> parse_strategy(std::string_view text);

/// Per-instance binary masks on the H x W token grid, row-major.
struct InstanceMaskSet {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::vector<std::uint8_t>> masks;

    std::size_t cells() const noexcept { return height * width; }
    std::size_t area(std::size_t instance) const;
    /// Token indices set in `instance`, ascending.
    std::vector<std::size_t> members(std::size_t instance) const;

    /// Throws ArgumentError on empty set, wrong mask size, non-binary cells or empty masks.
    void validate() const;

    bool operator==(const InstanceMaskSet&) const = default;
};

/// Chosen image-token indices: sorted ascending, unique, all < N.
struct SelectionResult {
    std::vector<std::size_t> indices;

    std::size_t size() const noexcept { return indices.size(); }
    bool contains(std::size_t index) const;
    /// Throws ArgumentError when the invariants do not hold against N.
    void validate(std::size_t image_tokens) const;

    static SelectionResult all(std::size_t image_tokens);

    bool operator==(const SelectionResult&) const = default;
};

/// Indices of the k largest scores, ties to the lower index, returned ascending.
std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k);

SelectionResult select_random(std::size_t image_tokens, std::size_t budget, Rng& rng);

/// S[i] = i * floor(N / N_c).
SelectionResult select_uniform(std::size_t image_tokens, std::size_t budget);

/// Top-N_c of softmax(q_cls . K_img^T / sqrt(d)).
SelectionResult select_cls(std::span<const double> cls_query, const Matrix& image_keys, std::size_t budget);

/// S_o[i] = max(1, floor(N_c * area_i / sum_j area_j)). Not rebalanced to sum to N_c.
std::vector<std::size_t> allocate_seg_first(const InstanceMaskSet& masks, std::size_t budget);

/// Union over instances of min(S_o[i], area_i) tokens drawn uniformly without
/// replacement from each mask. Overlapping draws collapse, so the size may differ from N_c.
SelectionResult select_seg_first(const InstanceMaskSet& masks, std::size_t budget, Rng& rng);

}  // namespace csp
