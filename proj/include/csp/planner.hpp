#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "csp/cost_model.hpp"
#include "csp/pipeline.hpp"
#include "csp/selection.hpp"

namespace csp {

/// Candidate values per knob; configurations are their Cartesian product.
struct Grid {
    std::vector<std::size_t> cluster_layers;
    std::vector<std::size_t> cluster_tokens;
    std::vector<std::size_t> scatter_layers;
    std::vector<std::size_t> prune_tokens;
    std::vector<ClusterStrategy> strategies{ClusterStrategy::Uniform};

    /// Values used in the published ablations and final configurations.
    static Grid ablation_defaults();

    /// Product configurations valid for (total_layers, image_tokens), in
    /// lexicographic knob order. Invalid combinations are dropped.
    std::vector<CspConfig> configs(std::size_t total_layers, std::size_t image_tokens) const;
};

struct Budget {
    std::optional<double> max_flops;
    std::optional<double> max_n_avg;
    Grid grid;
};

struct PlanEntry {
    CspConfig config;
    CostReport cost;
    /// Mean planted-token recall; a mechanism-level stand-in for segmentation
    /// accuracy, which needs pretrained models. Empty until scored.
    std::optional<double> proxy_score;
};

/// Grid configurations whose cost meets every bound in `budget` exactly (no
/// slack), ordered by ascending FLOPs, then descending N_avg, then knob order.
/// Throws ArgumentError when the budget has no bound or the grid is empty.
std::vector<PlanEntry> enumerate(const Budget& budget, const ModelDims& dims, double mac_scale = kFlopsPerMac);

struct PlantedSpec {
    std::size_t count = 4;
    double gain = 5.0;
};

struct ScoreOptions {
    std::size_t seeds = 100;
    PlantedSpec planted;
    std::uint64_t base_seed = 0;
    std::uint64_t weights_seed = 0;
    unsigned threads = 1;
    const InstanceMaskSet* masks = nullptr;  ///< required for SegFirst entries
};

/// Calls body(i) for i in [0, count) on up to `threads` workers. Each index runs
/// exactly once; the first exception is rethrown after all workers finish.
void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& body);

/// Seed of scoring run `run`. It does not depend on the entry, so every
/// configuration is scored on the same planted images (paired comparison).
std::uint64_t score_run_seed(std::uint64_t base_seed, std::size_t run);

/// Fills proxy_score with the mean planted recall over `seeds` toy pipeline
/// runs per entry. Results do not depend on `threads`.
std::vector<PlanEntry> score(std::vector<PlanEntry> entries, const ModelDims& dims, const ScoreOptions& options);

}  // namespace csp
