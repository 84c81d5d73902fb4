#include "csp/planner.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <tuple>

#include "csp/error.hpp"

namespace csp {

Grid Grid::ablation_defaults() {
    Grid g;
    g.cluster_layers = {5, 6, 7, 8, 9, 10, 11, 12};
    g.cluster_tokens = {16, 32, 64, 80, 96, 128};
    g.scatter_layers = {2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
    g.prune_tokens = {2, 4, 8, 16, 32};
    return g;
}

std::vector<CspConfig> Grid::configs(std::size_t total_layers, std::size_t image_tokens) const {
    std::vector<CspConfig> out;
    for (std::size_t lc : cluster_layers) {
        for (std::size_t nc : cluster_tokens) {
            for (std::size_t ls : scatter_layers) {
                for (std::size_t np : prune_tokens) {
                    for (ClusterStrategy s : strategies) {
                        CspConfig c{lc, nc, ls, np, s};
                        try {
                            c.validate(total_layers, image_tokens);
                        } catch (const ArgumentError&) {
                            continue;
                        }
                        out.push_back(c);
                    }
                }
            }
        }
    }
    return out;
}

std::vector<PlanEntry> enumerate(const Budget& budget, const ModelDims& dims, double mac_scale) {
    if (!budget.max_flops && !budget.max_n_avg) {
        throw ArgumentError("enumerate: budget needs a FLOPs or N_avg bound");
    }
    const Grid& g = budget.grid;
    if (g.cluster_layers.empty() || g.cluster_tokens.empty() || g.scatter_layers.empty() || g.prune_tokens.empty() ||
        g.strategies.empty()) {
        throw ArgumentError("enumerate: every grid knob needs at least one value");
    }

    std::vector<PlanEntry> out;
    for (const CspConfig& c : g.configs(dims.layers, dims.image_tokens)) {
        CostReport cost = staged_flops(c, dims, mac_scale);
        if (budget.max_flops && cost.flops_total > *budget.max_flops) {
            continue;
        }
        // num/den <= bound, compared without dividing.
        if (budget.max_n_avg &&
            static_cast<double>(cost.n_avg.num) > *budget.max_n_avg * static_cast<double>(cost.n_avg.den)) {
            continue;
        }
        out.push_back(PlanEntry{c, std::move(cost), std::nullopt});
    }

    auto key = [](const CspConfig& c) {
        return std::make_tuple(c.cluster_layers, c.cluster_tokens, c.scatter_layers, c.prune_tokens,
                               static_cast<int>(c.strategy));
    };
    std::stable_sort(out.begin(), out.end(), [&](const PlanEntry& a, const PlanEntry& b) {
        if (a.cost.mac_total != b.cost.mac_total) {
            return a.cost.mac_total < b.cost.mac_total;
        }
        if (a.cost.n_avg != b.cost.n_avg) {
            return a.cost.n_avg > b.cost.n_avg;
        }
        return key(a.config) < key(b.config);
    });
    return out;
}

void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& body) {
    const unsigned workers =
        static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), std::max<std::size_t>(count, 1)));
    if (workers == 1) {
        for (std::size_t i = 0; i < count; ++i) {
            body(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    {
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < workers; ++t) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < count; i = next++) {
                    try {
                        body(i);
                    } catch (...) {
                        std::lock_guard lock(failure_mutex);
                        if (!failure) {
                            failure = std::current_exception();
                        }
                    }
                }
            });
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
}

std::uint64_t score_run_seed(std::uint64_t base_seed, std::size_t run) {
    return derive_seed(base_seed, run);
}

namespace {

double score_entry(const PlanEntry& entry, const DecoderWeights& weights,
                   const ScoreOptions& options) {
    double sum = 0.0;
    for (std::size_t run = 0; run < options.seeds; ++run) {
        const std::uint64_t seed = score_run_seed(options.base_seed, run);
        const VisionStubOutput stub =
            vision_stub(weights.dims, seed, options.planted.count, options.planted.gain);
        Rng rng(derive_seed(seed, 1));
        const CspResult r = run_csp(weights, stub, entry.config, rng, options.masks);
        sum += planted_recall(stub.planted, r.retained);
    }
    return options.seeds == 0 ? 0.0 : sum / static_cast<double>(options.seeds);
}

}  // namespace

std::vector<PlanEntry> score(std::vector<PlanEntry> entries, const ModelDims& dims, const ScoreOptions& options) {
    if (options.seeds == 0) {
        throw ArgumentError("score: need at least one seed");
    }
    const DecoderWeights weights = init_weights(dims, options.weights_seed);
    for (const PlanEntry& e : entries) {
        e.config.validate(dims.layers, dims.image_tokens);
    }

    parallel_for(entries.size(), options.threads,
                 [&](std::size_t i) { entries[i].proxy_score = score_entry(entries[i], weights, options); });
    return entries;
}

}  // namespace csp
