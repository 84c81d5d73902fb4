#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "csp/error.hpp"
#include "csp/planner.hpp"

namespace csp {
namespace {

Grid table6_7b224_grid() {
    Grid g;
    g.cluster_layers = {6, 7, 8, 10, 11, 12};
    g.cluster_tokens = {32, 48, 64, 80, 96};
    g.scatter_layers = {2, 3, 4, 6, 7, 8};
    g.prune_tokens = {2, 4, 8};
    return g;
}

bool has(const std::vector<PlanEntry>& plan, const CspConfig& c) {
    return std::any_of(plan.begin(), plan.end(), [&](const PlanEntry& e) { return e.config == c; });
}

ModelDims calibrated_7b() {
    return calibrated_preset(*find_preset("7b-224")).dims;
}

TEST(GridTest, DropsInvalidCombinations) {
    Grid g;
    g.cluster_layers = {4, 6};
    g.cluster_tokens = {16, 100};
    g.scatter_layers = {0, 3};
    g.prune_tokens = {8};
    const auto configs = g.configs(8, 64);
    // L_c=6 with L_s=3 exceeds 8 layers; N_c=100 exceeds 64 tokens.
    EXPECT_EQ(configs.size(), 3u);
    for (const CspConfig& c : configs) EXPECT_NO_THROW(c.validate(8, 64));
}

TEST(Enumerate, SlackBudgetKeepsWholeGrid) {
    const ModelDims d = calibrated_7b();
    Budget b;
    b.max_flops = staged_flops(unpruned_config(d), d).flops_total;
    b.grid = table6_7b224_grid();
    EXPECT_EQ(enumerate(b, d).size(), b.grid.configs(d.layers, d.image_tokens).size());
}

TEST(Enumerate, InfeasibleBudgetIsEmpty) {
    const ModelDims d = calibrated_7b();
    Budget b;
    b.max_flops = staged_flops(CspConfig{1, 1, 0, 1}, d).flops_total * 0.99;
    b.grid = Grid::ablation_defaults();
    EXPECT_TRUE(enumerate(b, d).empty());
}

TEST(Enumerate, NAvgBoundOnPublishedGrid) {
    const ModelDims d = calibrated_7b();
    Budget b;
    b.max_n_avg = 78;
    b.grid = table6_7b224_grid();
    const auto plan = enumerate(b, d);
    EXPECT_TRUE(has(plan, CspConfig{7, 80, 7, 8}));   // exactly 78
    EXPECT_FALSE(has(plan, CspConfig{6, 96, 8, 8}));  // 86.5
    for (const PlanEntry& e : plan) {
        EXPECT_LE(e.cost.n_avg, (Rational{78, 1}));
    }
}

TEST(Enumerate, OrderedByFlopsThenNAvgAndRepeatable) {
    const ModelDims d = calibrated_7b();
    Budget b;
    b.max_n_avg = 120;
    b.grid = Grid::ablation_defaults();
    const auto plan = enumerate(b, d);
    ASSERT_FALSE(plan.empty());
    for (std::size_t i = 1; i < plan.size(); ++i) {
        const auto& p = plan[i - 1].cost;
        const auto& q = plan[i].cost;
        ASSERT_LE(p.mac_total, q.mac_total);
        if (p.mac_total == q.mac_total) ASSERT_GE(p.n_avg, q.n_avg);
    }
    const auto again = enumerate(b, d);
    ASSERT_EQ(again.size(), plan.size());
    for (std::size_t i = 0; i < plan.size(); ++i) EXPECT_EQ(again[i].config, plan[i].config);
}

TEST(Enumerate, RejectsMissingBoundOrEmptyKnob) {
    Budget b;
    b.grid = Grid::ablation_defaults();
    EXPECT_THROW(enumerate(b, toy_dims()), ArgumentError);
    b.max_n_avg = 10;
    b.grid.prune_tokens.clear();
    EXPECT_THROW(enumerate(b, toy_dims()), ArgumentError);
}

std::vector<PlanEntry> entries_for(const std::vector<CspConfig>& configs, const ModelDims& d) {
    std::vector<PlanEntry> out;
    for (const CspConfig& c : configs) out.push_back(PlanEntry{c, staged_flops(c, d), std::nullopt});
    return out;
}

TEST(Score, NothingDroppedGivesPerfectRecall) {
    const ModelDims d = toy_dims();
    ScoreOptions o;
    o.seeds = 10;
    const auto scored = score(entries_for({CspConfig{2, 64, 2, 64}}, d), d, o);
    EXPECT_EQ(scored[0].proxy_score, 1.0);
}

TEST(Score, PigeonholeBound) {
    const ModelDims d = toy_dims();
    ScoreOptions o;
    o.seeds = 20;
    o.planted = PlantedSpec{4, 5.0};
    const auto scored = score(entries_for({CspConfig{2, 16, 2, 2}, CspConfig{2, 16, 2, 1}}, d), d, o);
    EXPECT_LE(*scored[0].proxy_score, 2.0 / 4.0);
    EXPECT_LE(*scored[1].proxy_score, 1.0 / 4.0);
}

TEST(Score, ThreadCountDoesNotChangeResults) {
    const ModelDims d = toy_dims();
    const auto entries = entries_for({CspConfig{2, 16, 2, 8}, CspConfig{1, 8, 3, 4, ClusterStrategy::Random},
                                      CspConfig{3, 32, 1, 8, ClusterStrategy::ClsAttention}},
                                     d);
    ScoreOptions o;
    o.seeds = 12;
    o.base_seed = 99;
    const auto serial = score(entries, d, o);
    o.threads = 4;
    const auto parallel = score(entries, d, o);
    for (std::size_t i = 0; i < entries.size(); ++i) EXPECT_EQ(serial[i].proxy_score, parallel[i].proxy_score);
}

TEST(Score, ScatteringHelpsOverSkippingIt) {
    // Paired comparison over the same 100 planted images.
    const ModelDims d = toy_dims();
    const DecoderWeights w = init_weights(d, 0);
    int better = 0, worse = 0;
    double with_sum = 0, without_sum = 0;
    for (std::size_t run = 0; run < 100; ++run) {
        const std::uint64_t seed = score_run_seed(0, run);
        const VisionStubOutput stub = vision_stub(d, seed, 4, 5.0);
        Rng a(derive_seed(seed, 1)), b(derive_seed(seed, 1));
        const double with = planted_recall(stub.planted, run_csp(w, stub, CspConfig{2, 16, 2, 8}, a).retained);
        const double without = planted_recall(stub.planted, run_csp(w, stub, CspConfig{2, 16, 0, 8}, b).retained);
        better += with > without;
        worse += with < without;
        with_sum += with;
        without_sum += without;
    }
    // Uniform clustering keeps 16 of 64 tokens, so skipping the scattering
    // stage caps recall near 1/4; the observed margin is far larger than needed.
    EXPECT_GE(with_sum, without_sum);
    EXPECT_GT(better, worse);
    RecordProperty("recall_margin", std::to_string((with_sum - without_sum) / 100.0));
}

TEST(Score, MonotoneInPruneBudgetBySignTest) {
    const ModelDims d = toy_dims();
    const DecoderWeights w = init_weights(d, 0);
    const std::size_t budgets[] = {2, 4, 8, 16};
    for (std::size_t k = 0; k + 1 < std::size(budgets); ++k) {
        int up = 0, down = 0;
        for (std::size_t run = 0; run < 100; ++run) {
            const std::uint64_t seed = score_run_seed(7, run);
            const VisionStubOutput stub = vision_stub(d, seed, 4, 5.0);
            Rng a(derive_seed(seed, 1)), b(derive_seed(seed, 1));
            const double lo =
                planted_recall(stub.planted, run_csp(w, stub, CspConfig{2, 16, 2, budgets[k]}, a).retained);
            const double hi =
                planted_recall(stub.planted, run_csp(w, stub, CspConfig{2, 16, 2, budgets[k + 1]}, b).retained);
            up += hi > lo;
            down += hi < lo;
        }
        // Top-k sets are nested for a fixed attention row, so no run may get worse.
        EXPECT_EQ(down, 0) << "N_p " << budgets[k] << " -> " << budgets[k + 1];
        EXPECT_GE(up, down);
    }
}

TEST(ParallelFor, VisitsEveryIndexOnceAndRethrows) {
    std::vector<int> hits(100, 0);
    parallel_for(hits.size(), 8, [&](std::size_t i) { ++hits[i]; });
    EXPECT_TRUE(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
    EXPECT_THROW(parallel_for(10, 4,
                              [](std::size_t i) {
                                  if (i == 3) throw ArgumentError("boom");
                              }),
                 ArgumentError);
}

}  // namespace
}  // namespace csp
