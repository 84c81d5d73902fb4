#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "csp/cost_model.hpp"
#include "csp/error.hpp"
#include "csp/pipeline.hpp"

namespace csp {
namespace {

double max_relative_error(std::span<const double> got, std::span<const double> want) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < want.size(); ++i) {
        num = std::max(num, std::abs(got[i] - want[i]));
        den = std::max(den, std::abs(want[i]));
    }
    return num / den;
}

class PipelineTest : public ::testing::Test {
protected:
    ModelDims dims = toy_dims();
    DecoderWeights weights = init_weights(dims, 21);
    VisionStubOutput stub = vision_stub(dims, 22, 4, 5.0);
};

TEST(ConfigTest, Validation) {
    EXPECT_NO_THROW((CspConfig{2, 16, 2, 8}).validate(8, 64));
    EXPECT_NO_THROW((CspConfig{8, 64, 0, 64}).validate(8, 64));
    EXPECT_THROW((CspConfig{0, 16, 2, 8}).validate(8, 64), ArgumentError);
    EXPECT_THROW((CspConfig{5, 16, 4, 8}).validate(8, 64), ArgumentError);
    EXPECT_THROW((CspConfig{2, 65, 2, 8}).validate(8, 64), ArgumentError);
    EXPECT_THROW((CspConfig{2, 16, 2, 0}).validate(8, 64), ArgumentError);
    EXPECT_EQ((CspConfig{2, 16, 2, 8}).prune_layers(8), 4u);
}

TEST(Positions, PreservedImageIds) {
    ModelDims d = toy_dims();
    d.system_tokens = 35;
    const std::vector<std::size_t> s{0, 4, 8};
    const auto pos = sequence_positions(d, s);
    ASSERT_EQ(pos.size(), 35u + 3u + d.user_tokens + d.output_tokens);
    EXPECT_EQ(pos[35], 35u);
    EXPECT_EQ(pos[36], 39u);
    EXPECT_EQ(pos[37], 43u);
    // First user token sits where it would with all N image tokens present.
    EXPECT_EQ(pos[38], 35u + d.image_tokens);
}

TEST(Positions, FullSelectionIsContiguous) {
    const ModelDims d = toy_dims();
    const auto pos = sequence_positions(d, SelectionResult::all(d.image_tokens).indices);
    std::vector<std::uint64_t> want(d.full_length());
    std::iota(want.begin(), want.end(), 0);
    EXPECT_EQ(pos, want);
}

TEST_F(PipelineTest, AssembleKeepsOrderAndSegSlot) {
    const SelectionResult sel{{3, 10, 40}};
    const AssembledSequence seq = assemble_sequence(weights, stub, sel);
    ASSERT_EQ(seq.hidden.rows(), dims.other_tokens() + 3);
    EXPECT_EQ(seq.seg_index, seq.hidden.rows() - 1);
    const FullSequence full = full_sequence(weights, stub);
    for (std::size_t c = 0; c < dims.hidden; ++c) {
        EXPECT_EQ(seq.hidden(dims.system_tokens + 1, c), full.hidden(dims.system_tokens + 10, c));
        EXPECT_EQ(seq.hidden(seq.seg_index, c), full.hidden(dims.seg_index_full(), c));
    }
}

TEST_F(PipelineTest, ClusteringStageTraceAndMacs) {
    const SelectionResult sel = select_uniform(dims.image_tokens, 16);
    const AssembledSequence seq = assemble_sequence(weights, stub, sel);

    StageTrace trace;
    MacMeter meter;
    const StageOutput out = run_clustering_stage(seq, weights, 3, sel, &trace, &meter);
    const std::uint64_t n = dims.other_tokens() + 16;
    ASSERT_EQ(trace.layers.size(), 3u);
    for (const LayerRecord& r : trace.layers) {
        EXPECT_EQ(r.stage, Stage::Clustering);
        EXPECT_EQ(r.sequence_length, n);
        EXPECT_EQ(r.active, sel.indices);
    }
    EXPECT_EQ(meter.total(), 3 * layer_macs(n, dims.hidden, dims.ffn));

    const StageOutput none = run_clustering_stage(seq, weights, 0, sel);
    EXPECT_EQ(none.hidden, seq.hidden);
    EXPECT_TRUE(none.last_attention.empty());
    (void)out;
}

TEST_F(PipelineTest, ScatterAllIsIdentityOnImageSlots) {
    const SelectionResult all = SelectionResult::all(dims.image_tokens);
    Rng rng(1);
    Matrix clustered(dims.full_length(), dims.hidden);
    for (double& v : clustered.data()) v = rng.normal();
    EXPECT_EQ(scatter(clustered, stub.image_embed, all, dims), clustered);
}

TEST_F(PipelineTest, ScatterSingleSelectedSlot) {
    const SelectionResult one{{17}};
    Rng rng(2);
    Matrix clustered(dims.other_tokens() + 1, dims.hidden);
    for (double& v : clustered.data()) v = rng.normal();
    const Matrix full = scatter(clustered, stub.image_embed, one, dims);
    std::size_t differing = 0;
    for (std::size_t i = 0; i < dims.image_tokens; ++i) {
        bool same = true;
        for (std::size_t c = 0; c < dims.hidden; ++c) {
            same = same && full(dims.system_tokens + i, c) == stub.image_embed(i, c);
        }
        differing += !same;
    }
    EXPECT_EQ(differing, 1u);
}

TEST_F(PipelineTest, ScatterMatchesTwoBranchOracle) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const SelectionResult sel = select_random(dims.image_tokens, 1 + rng.below(dims.image_tokens), rng);
        Matrix clustered(dims.other_tokens() + sel.size(), dims.hidden);
        for (double& v : clustered.data()) v = rng.normal();
        const Matrix full = scatter(clustered, stub.image_embed, sel, dims);
        for (std::size_t r = 0; r < dims.full_length(); ++r) {
            for (std::size_t c = 0; c < dims.hidden; ++c) {
                double want;
                if (r < dims.system_tokens) {
                    want = clustered(r, c);
                } else if (r < dims.system_tokens + dims.image_tokens) {
                    const std::size_t i = r - dims.system_tokens;
                    const auto it = std::find(sel.indices.begin(), sel.indices.end(), i);
                    want = it != sel.indices.end()
                               ? clustered(dims.system_tokens + static_cast<std::size_t>(it - sel.indices.begin()), c)
                               : stub.image_embed(i, c);
                } else {
                    want = clustered(r - dims.image_tokens + sel.size(), c);
                }
                ASSERT_EQ(full(r, c), want);
            }
        }
    }
}

TEST(SegAttentionTest, HandBuiltSingleHead) {
    // 1 system, 2 image, 1 user, 1 output token; the SEG row is row 4.
    ModelDims d;
    d.system_tokens = 1;
    d.image_tokens = 2;
    d.user_tokens = 1;
    d.output_tokens = 1;
    Matrix logits{{0, -1e300, -1e300, -1e300, -1e300},
                  {0, 0, -1e300, -1e300, -1e300},
                  {0, 0, 0, -1e300, -1e300},
                  {0, 0, 0, 0, -1e300},
                  {std::log(1.0), std::log(2.0), std::log(3.0), std::log(4.0), 0.0}};
    const std::vector<Matrix> attn{softmax_rows(logits)};
    const SegAttention seg = extract_seg_attention(attn, 4, d);
    ASSERT_EQ(seg.scores.size(), 2u);
    EXPECT_NEAR(seg.scores[0], 2.0 / 11.0, 1e-15);
    EXPECT_NEAR(seg.scores[1], 3.0 / 11.0, 1e-15);
}

TEST_F(PipelineTest, SegAttentionAveragesHeadsAndRejectsClusteredTensor) {
    const SelectionResult all = SelectionResult::all(dims.image_tokens);
    const AssembledSequence seq = assemble_sequence(weights, stub, all);
    const StageOutput out = run_stage(seq.hidden, seq.positions, weights, 0, 1, Stage::Scattering, all.indices);
    const SegAttention seg = extract_seg_attention(out.last_attention, seq.seg_index, dims);
    double sum = 0;
    for (std::size_t i = 0; i < dims.image_tokens; ++i) {
        double avg = 0;
        for (const Matrix& h : out.last_attention) avg += h(seq.seg_index, dims.system_tokens + i);
        EXPECT_NEAR(seg.scores[i], avg / static_cast<double>(dims.heads), 1e-15);
        EXPECT_GE(seg.scores[i], 0.0);
        sum += seg.scores[i];
    }
    EXPECT_LE(sum, 1.0 + 1e-6);

    const SelectionResult few = select_uniform(dims.image_tokens, 8);
    const AssembledSequence small = assemble_sequence(weights, stub, few);
    const StageOutput c = run_stage(small.hidden, small.positions, weights, 0, 1, Stage::Clustering, few.indices);
    EXPECT_THROW(extract_seg_attention(c.last_attention, small.seg_index, dims), StateError);
}

TEST(PruneTest, DirectOrdering) {
    SegAttention a{{0.5, 0.1, 0.9, 0.3}, 0};
    EXPECT_EQ(prune(a, 2).indices, (std::vector<std::size_t>{0, 2}));
    EXPECT_EQ(prune(a, 4).indices, (std::vector<std::size_t>{0, 1, 2, 3}));
    EXPECT_THROW(prune(a, 5), ArgumentError);
}

TEST(PruneTest, MatchesSortOracle) {
    Rng rng(31);
    for (int trial = 0; trial < 1000; ++trial) {
        SegAttention a;
        a.scores.resize(1 + rng.below(64));
        for (double& v : a.scores) v = static_cast<double>(rng.below(6)) / 8.0;
        const std::size_t k = 1 + rng.below(a.scores.size());
        std::vector<std::size_t> order(a.scores.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return a.scores[x] > a.scores[y]; });
        order.resize(k);
        std::sort(order.begin(), order.end());
        EXPECT_EQ(prune(a, k).indices, order);
    }
}

TEST_F(PipelineTest, NoPruningMatchesPlainForward) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const VisionStubOutput s = vision_stub(dims, 100 + seed, 4, 5.0);
        const Matrix plain = forward_full(weights, s);
        const auto want = plain.row(plain.rows() - 1);
        for (std::size_t lc = 1; lc <= dims.layers; ++lc) {
            const CspConfig c{lc, dims.image_tokens, (dims.layers - lc) / 2, dims.image_tokens};
            Rng rng(seed);
            const CspResult r = run_csp(weights, s, c, rng);
            EXPECT_LE(max_relative_error(r.seg_hidden, want), 1e-9) << "L_c=" << lc;
        }
    }
}

TEST_F(PipelineTest, TraceFollowsStageShape) {
    const CspConfig c{2, 16, 3, 8};
    Rng rng(0);
    const CspResult r = run_csp(weights, stub, c, rng);
    ASSERT_EQ(r.trace.layers.size(), dims.layers);
    const std::size_t counts[] = {16, 16, 64, 64, 64, 8, 8, 8};
    for (std::size_t l = 0; l < dims.layers; ++l) {
        EXPECT_EQ(r.trace.layers[l].active.size(), counts[l]) << "layer " << l;
        EXPECT_EQ(r.trace.layers[l].sequence_length, dims.other_tokens() + counts[l]);
    }
    EXPECT_EQ(r.trace.layers[5].active, r.retained.indices);
    EXPECT_EQ(r.seg_attention.source_layer, 4u);
    EXPECT_EQ(r.trace.mean_image_tokens(), n_avg(c, dims.image_tokens, dims.layers));
}

TEST_F(PipelineTest, MeterMatchesStagedClosedForm) {
    Rng pick(44);
    for (int trial = 0; trial < 10; ++trial) {
        CspConfig c;
        c.cluster_layers = 1 + pick.below(dims.layers);
        c.scatter_layers = pick.below(dims.layers - c.cluster_layers + 1);
        c.cluster_tokens = 1 + pick.below(dims.image_tokens);
        c.prune_tokens = 1 + pick.below(dims.image_tokens);
        MacMeter meter;
        Rng rng(trial);
        const CspResult r = run_csp(weights, stub, c, rng, nullptr, &meter);
        EXPECT_EQ(meter.total(), staged_flops(c, dims, 1.0).mac_total);
        EXPECT_EQ(r.trace.mean_image_tokens(), n_avg(c, dims.image_tokens, dims.layers));
    }
}

TEST_F(PipelineTest, ZeroScatterPrunesAmongClusteredTokens) {
    const CspConfig c{3, 12, 0, 8, ClusterStrategy::Uniform};
    Rng rng(0);
    const CspResult r = run_csp(weights, stub, c, rng);
    EXPECT_EQ(r.seg_attention.source_layer, 2u);
    ASSERT_EQ(r.retained.size(), 8u);
    for (std::size_t idx : r.retained.indices) EXPECT_TRUE(r.clustered.contains(idx));
    for (std::size_t i = 0; i < dims.image_tokens; ++i) {
        if (!r.clustered.contains(i)) EXPECT_EQ(r.seg_attention.scores[i], 0.0);
    }

    const CspConfig wide{3, 4, 0, 8, ClusterStrategy::Uniform};
    const CspResult w = run_csp(weights, stub, wide, rng);
    EXPECT_EQ(w.retained, w.clustered);
}

TEST_F(PipelineTest, DeterministicForSameSeed) {
    const CspConfig c{2, 16, 2, 8, ClusterStrategy::Random};
    Rng a(5), b(5);
    const CspResult x = run_csp(weights, stub, c, a);
    const CspResult y = run_csp(weights, stub, c, b);
    EXPECT_EQ(x.retained, y.retained);
    EXPECT_EQ(x.seg_hidden, y.seg_hidden);
    EXPECT_EQ(x.clustered, y.clustered);
}

TEST_F(PipelineTest, SegFirstNeedsMasks) {
    const CspConfig c{2, 16, 2, 8, ClusterStrategy::SegFirst};
    Rng rng(0);
    EXPECT_THROW(run_csp(weights, stub, c, rng), ArgumentError);
    InstanceMaskSet masks{8, 8, {std::vector<std::uint8_t>(64, 1)}};
    const CspResult r = run_csp(weights, stub, c, rng, &masks);
    EXPECT_EQ(r.clustered.size(), 16u);
    InstanceMaskSet wrong{4, 4, {std::vector<std::uint8_t>(16, 1)}};
    EXPECT_THROW(run_csp(weights, stub, c, rng, &wrong), ArgumentError);
}

TEST_F(PipelineTest, PrunedStageKeepsPairwiseLogits) {
    // Logits among retained tokens in a pruning layer equal those of the same
    // layer run over the full sequence with identical inputs.
    const CspConfig c{2, 16, 2, 8};
    Rng rng(0);
    const CspResult r = run_csp(weights, stub, c, rng);
    const SelectionResult all = SelectionResult::all(dims.image_tokens);
    Rng h(9);
    Matrix full(dims.full_length(), dims.hidden);
    for (double& v : full.data()) v = h.normal();
    const auto full_pos = sequence_positions(dims, all.indices);
    const auto want = attention_logits(full, full_pos, weights.layers[4], dims.heads);
    const Matrix sub = gather_image_subset(full, dims, all.indices, r.retained.indices);
    const auto got = attention_logits(sub, sequence_positions(dims, r.retained.indices), weights.layers[4], dims.heads);
    for (std::size_t head = 0; head < dims.heads; ++head) {
        for (std::size_t i = 0; i < r.retained.size(); ++i) {
            for (std::size_t j = 0; j < r.retained.size(); ++j) {
                EXPECT_NEAR(got[head](dims.system_tokens + i, dims.system_tokens + j),
                            want[head](dims.system_tokens + r.retained.indices[i],
                                       dims.system_tokens + r.retained.indices[j]),
                            1e-6);
            }
        }
    }
}

TEST_F(PipelineTest, SegAttentionPrefersPlantedTokens) {
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const VisionStubOutput s = vision_stub(dims, seed, 4, 5.0);
        Rng rng(seed);
        const CspResult r = run_csp(weights, s, CspConfig{2, 16, 2, 8}, rng);
        double planted = 0, rest = 0;
        for (std::size_t i = 0; i < dims.image_tokens; ++i) {
            const bool p = std::binary_search(s.planted.begin(), s.planted.end(), i);
            (p ? planted : rest) += r.seg_attention.scores[i];
        }
        wins += planted / 4.0 > rest / 60.0;
    }
    EXPECT_GE(wins, 95);
}

TEST_F(PipelineTest, ReferenceConfigRetainsPlantedTokens) {
    int full_hits = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const VisionStubOutput s = vision_stub(dims, seed, 4, 5.0);
        Rng rng(seed);
        const CspResult r = run_csp(weights, s, CspConfig{2, 16, 2, 8}, rng);
        full_hits += planted_recall(s.planted, r.retained) == 1.0;
    }
    EXPECT_GE(full_hits, 90);
}

TEST(Recall, Fractions) {
    const std::vector<std::size_t> planted{1, 5, 9, 20};
    EXPECT_DOUBLE_EQ(planted_recall(planted, SelectionResult{{1, 2, 9}}), 0.5);
    EXPECT_DOUBLE_EQ(planted_recall({}, SelectionResult{{1}}), 1.0);
}

}  // namespace
}  // namespace csp
