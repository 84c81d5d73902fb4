#include "csp/selection.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "csp/error.hpp"

namespace csp {

namespace {

void check_budget(const char* op, std::size_t image_tokens, std::size_t budget) {
    if (budget < 1 || budget > image_tokens) {
        throw ArgumentError(std::string(op) + ": budget " + std::to_string(budget) + " outside [1, " +
                            std::to_string(image_tokens) + "]");
    }
}

// Draws `count` distinct entries of `pool` (count <= pool.size()); reorders pool.
void partial_shuffle(std::vector<std::size_t>& pool, std::size_t count, Rng& rng) {
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
        std::swap(pool[i], pool[j]);
    }
}

}  // namespace

std::string_view to_string(ClusterStrategy s) noexcept {
    switch (s) {
        case ClusterStrategy::Random:
            return "random";
        case ClusterStrategy::Uniform:
            return "uniform";
        case ClusterStrategy::ClsAttention:
            return "cls";
        case ClusterStrategy::SegFirst:
            return "segfirst";
    }
    return "unknown";
}

std::optional<ClusterStrategy> parse_strategy(std::string_view text) {
    std::string key;
    for (char ch : text) {
        if (ch == '-' || ch == '_') {
            continue;
        }
        key.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
    if (key == "random") return ClusterStrategy::Random;
    if (key == "uniform") return ClusterStrategy::Uniform;
    if (key == "cls" || key == "clsattention") return ClusterStrategy::ClsAttention;
    if (key == "segfirst") return ClusterStrategy::SegFirst;
    return std::nullopt;
}

std::size_t InstanceMaskSet::area(std::size_t instance) const {
    const auto& m = masks.at(instance);
    return static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
}

std::vector<std::size_t> InstanceMaskSet::members(std::size_t instance) const {
    const auto& m = masks.at(instance);
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < m.size(); ++k) {
        if (m[k] != 0) {
            out.push_back(k);
        }
    }
    return out;
}

void InstanceMaskSet::validate() const {
    if (masks.empty()) {
        throw ArgumentError("mask set is empty");
    }
    if (height == 0 || width == 0) {
        throw ArgumentError("mask grid must be at least 1x1");
    }
    for (std::size_t i = 0; i < masks.size(); ++i) {
        const auto& m = masks[i];
        if (m.size() != cells()) {
            throw ArgumentError("mask " + std::to_string(i) + " has " + std::to_string(m.size()) + " cells, expected " +
                                std::to_string(cells()));
        }
        if (std::any_of(m.begin(), m.end(), [](std::uint8_t v) { return v > 1; })) {
            throw ArgumentError("mask " + std::to_string(i) + " is not binary");
        }
        if (area(i) == 0) {
            throw ArgumentError("mask " + std::to_string(i) + " is empty");
        }
    }
}

bool SelectionResult::contains(std::size_t index) const {
    return std::binary_search(indices.begin(), indices.end(), index);
}

void SelectionResult::validate(std::size_t image_tokens) const {
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= image_tokens) {
            throw ArgumentError("selection index " + std::to_string(indices[i]) + " out of range");
        }
        if (i > 0 && indices[i] <= indices[i - 1]) {
            throw ArgumentError("selection indices must be strictly increasing");
        }
    }
}

SelectionResult SelectionResult::all(std::size_t image_tokens) {
    SelectionResult s;
    s.indices.resize(image_tokens);
    std::iota(s.indices.begin(), s.indices.end(), std::size_t{0});
    return s;
}

std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
    if (k > scores.size()) {
        throw ArgumentError("top_k: k = " + std::to_string(k) + " exceeds " + std::to_string(scores.size()) +
                            " candidates");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto better = [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) {
            return scores[a] > scores[b];
        }
        return a < b;
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

SelectionResult select_random(std::size_t image_tokens, std::size_t budget, Rng& rng) {
    check_budget("select_random", image_tokens, budget);
    SelectionResult s = SelectionResult::all(image_tokens);
    partial_shuffle(s.indices, budget, rng);
    s.indices.resize(budget);
    std::sort(s.indices.begin(), s.indices.end());
    return s;
}

SelectionResult select_uniform(std::size_t image_tokens, std::size_t budget) {
    check_budget("select_uniform", image_tokens, budget);
    const std::size_t stride = image_tokens / budget;
    SelectionResult s;
    s.indices.resize(budget);
    for (std::size_t i = 0; i < budget; ++i) {
        s.indices[i] = i * stride;
    }
    return s;
}

SelectionResult select_cls(std::span<const double> cls_query, const Matrix& image_keys, std::size_t budget) {
    if (cls_query.size() != image_keys.cols()) {
        throw ShapeError("select_cls: query length " + std::to_string(cls_query.size()) + " vs key width " +
                         std::to_string(image_keys.cols()));
    }
    check_budget("select_cls", image_keys.rows(), budget);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cls_query.size()));
    Matrix logits(1, image_keys.rows());
    for (std::size_t j = 0; j < image_keys.rows(); ++j) {
        logits(0, j) = dot(cls_query, image_keys.row(j)) * scale;
    }
    const Matrix probs = softmax_rows(logits);
    return SelectionResult{top_k_indices(probs.row(0), budget)};
}

std::vector<std::size_t> allocate_seg_first(const InstanceMaskSet& masks, std::size_t budget) {
    if (masks.masks.empty()) {
        throw ArgumentError("allocate_seg_first: empty mask set");
    }
    if (budget < 1) {
        throw ArgumentError("allocate_seg_first: budget must be >= 1");
    }
    masks.validate();
    std::size_t total = 0;
    for (std::size_t i = 0; i < masks.masks.size(); ++i) {
        total += masks.area(i);
    }
    std::vector<std::size_t> alloc(masks.masks.size());
    for (std::size_t i = 0; i < alloc.size(); ++i) {
        alloc[i] = std::max<std::size_t>(1, budget * masks.area(i) / total);
    }
    return alloc;
}

SelectionResult select_seg_first(const InstanceMaskSet& masks, std::size_t budget, Rng& rng) {
    const std::vector<std::size_t> alloc = allocate_seg_first(masks, budget);
    std::vector<std::size_t> picked;
    for (std::size_t i = 0; i < alloc.size(); ++i) {
        std::vector<std::size_t> pool = masks.members(i);
        const std::size_t take = std::min(alloc[i], pool.size());
        partial_shuffle(pool, take, rng);
        picked.insert(picked.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
    }
    std::sort(picked.begin(), picked.end());
    picked.erase(std::unique(picked.begin(), picked.end()), picked.end());
    return SelectionResult{std::move(picked)};
}

}  // namespace csp
