#include "csp/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "csp/error.hpp"

namespace csp {

namespace {

constexpr double kNormEps = 1e-6;
constexpr std::uint64_t kSignalSeed = 0x5e6c0a11ULL;
constexpr double kConceptGain = 1.0;

Matrix random_matrix(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
    Matrix m(rows, cols);
    for (double& v : m.data()) {
        v = rng.normal() * scale;
    }
    return m;
}

Matrix rms_norm(const Matrix& x) {
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto in = x.row(r);
        double ms = 0.0;
        for (double v : in) {
            ms += v * v;
        }
        const double inv = 1.0 / std::sqrt(ms / static_cast<double>(in.size()) + kNormEps);
        auto dst = out.row(r);
        for (std::size_t c = 0; c < in.size(); ++c) {
            dst[c] = in[c] * inv;
        }
    }
    return out;
}

void add_inplace(Matrix& acc, const Matrix& delta) {
    auto dst = acc.data();
    auto src = delta.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += src[i];
    }
}

void check_positions(std::span<const std::uint64_t> positions, std::size_t n) {
    if (positions.size() != n) {
        throw ShapeError("decoder_layer: " + std::to_string(positions.size()) + " positions for " + std::to_string(n) +
                         " tokens");
    }
    for (std::size_t i = 1; i < positions.size(); ++i) {
        if (positions[i] <= positions[i - 1]) {
            throw ArgumentError("decoder_layer: positions must be strictly increasing");
        }
    }
}

void check_layer(const Matrix& hidden, const LayerWeights& w, std::size_t heads) {
    const std::size_t d = hidden.cols();
    if (heads == 0 || d % heads != 0 || (d / heads) % 2 != 0) {
        throw ShapeError("decoder_layer: hidden size " + std::to_string(d) + " incompatible with " +
                         std::to_string(heads) + " heads");
    }
    if (w.wq.rows() != d || w.wq.cols() != d || w.wk.rows() != d || w.wv.rows() != d || w.wo.cols() != d ||
        w.w_gate.rows() != d || w.w_up.rows() != d || w.w_down.cols() != d) {
        throw ShapeError("decoder_layer: weights do not match hidden size " + std::to_string(d));
    }
}

// Head h occupies columns [h*dh, (h+1)*dh); RoPE rotates within each head.
void apply_rope_per_head(Matrix& proj, std::span<const std::uint64_t> positions, std::size_t heads) {
    const std::size_t dh = proj.cols() / heads;
    for (std::size_t r = 0; r < proj.rows(); ++r) {
        auto row = proj.row(r);
        for (std::size_t h = 0; h < heads; ++h) {
            rope_rotate_inplace(row.subspan(h * dh, dh), positions[r]);
        }
    }
}

std::vector<Matrix> head_logits(const Matrix& normed, std::span<const std::uint64_t> positions, const LayerWeights& w,
                                std::size_t heads, MacMeter* meter) {
    Matrix q = matmul(normed, w.wq, meter);
    Matrix k = matmul(normed, w.wk, meter);
    apply_rope_per_head(q, positions, heads);
    apply_rope_per_head(k, positions, heads);

    const std::size_t dh = normed.cols() / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Matrix> logits;
    logits.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Matrix s = matmul(q.col_block(h * dh, dh), k.col_block(h * dh, dh).transposed(), meter);
        for (double& v : s.data()) {
            v *= scale;
        }
        logits.push_back(std::move(s));
    }
    return logits;
}

}  // namespace

void ModelDims::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) {
            throw ArgumentError(std::string("ModelDims: ") + what);
        }
    };
    require(layers >= 1, "layer count must be >= 1");
    require(hidden >= 1, "hidden size must be >= 1");
    require(ffn >= 1, "FFN size must be >= 1");
    require(heads >= 1, "head count must be >= 1");
    require(hidden % heads == 0, "hidden size must be divisible by head count");
    require(image_tokens >= 1, "image token count must be >= 1");
    require(system_tokens >= 1, "system token count must be >= 1");
    require(user_tokens >= 1, "user token count must be >= 1");
    require(output_tokens >= 1, "output token count must be >= 1");
}

ModelDims toy_dims() {
    return ModelDims{};
}

std::vector<double> planted_signal_direction(std::size_t hidden) {
    Rng rng(kSignalSeed);
    std::vector<double> u(hidden);
    for (double& v : u) {
        v = rng.normal();
    }
    const double len = norm2(u);
    for (double& v : u) {
        v /= len;
    }
    return u;
}

DecoderWeights init_weights(const ModelDims& dims, std::uint64_t seed) {
    dims.validate();
    if (dims.head_dim() % 2 != 0) {
        throw ArgumentError("ModelDims: head dimension must be even for RoPE");
    }
    Rng rng(seed);
    const std::size_t d = dims.hidden;
    const std::size_t m = dims.ffn;
    const std::size_t dh = dims.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    const double residual_scale = scale / std::sqrt(2.0 * static_cast<double>(dims.layers));
    const std::vector<double> signal_dir = planted_signal_direction(d);

    DecoderWeights w;
    w.dims = dims;
    w.layers.reserve(dims.layers);
    for (std::size_t l = 0; l < dims.layers; ++l) {
        LayerWeights lw;
        lw.wq = random_matrix(d, d, scale, rng);
        lw.wk = random_matrix(d, d, scale, rng);
        lw.wv = random_matrix(d, d, scale, rng);
        lw.wo = random_matrix(d, d, residual_scale, rng);
        lw.w_gate = random_matrix(d, m, scale, rng);
        lw.w_up = random_matrix(d, m, scale, rng);
        lw.w_down = random_matrix(m, d, residual_scale, rng);
        // Concept channel: first coordinate of each head's slowest RoPE pair
        // reads the signal direction in both queries and keys.
        for (std::size_t h = 0; h < dims.heads; ++h) {
            const std::size_t col = h * dh + dh - 2;
            for (std::size_t r = 0; r < d; ++r) {
                lw.wq(r, col) += kConceptGain * signal_dir[r];
                lw.wk(r, col) += kConceptGain * signal_dir[r];
            }
        }
        w.layers.push_back(std::move(lw));
    }
    w.system_embed = random_matrix(dims.system_tokens, d, 1.0, rng);
    w.user_embed = random_matrix(dims.user_tokens, d, 1.0, rng);
    w.output_embed = random_matrix(dims.output_tokens, d, 1.0, rng);
    return w;
}

VisionStubOutput vision_stub(const ModelDims& dims, std::uint64_t seed, std::size_t planted_count,
                             double planted_gain) {
    dims.validate();
    if (planted_count > dims.image_tokens) {
        throw ArgumentError("vision_stub: planted_count " + std::to_string(planted_count) + " exceeds N = " +
                            std::to_string(dims.image_tokens));
    }
    Rng rng(seed);
    const std::size_t n = dims.image_tokens;
    const std::size_t d = dims.hidden;

    const std::vector<double> signal = planted_signal_direction(d);

    VisionStubOutput out;
    out.image_embed = random_matrix(n, d, 1.0, rng);
    out.image_keys = random_matrix(n, d, 1.0, rng);

    // Partial Fisher-Yates over [0, N).
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) {
        pool[i] = i;
    }
    for (std::size_t i = 0; i < planted_count; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
        std::swap(pool[i], pool[j]);
    }
    out.planted.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(planted_count));
    std::sort(out.planted.begin(), out.planted.end());

    for (std::size_t idx : out.planted) {
        auto e = out.image_embed.row(idx);
        auto k = out.image_keys.row(idx);
        for (std::size_t c = 0; c < d; ++c) {
            e[c] += planted_gain * signal[c];
            k[c] += planted_gain * signal[c];
        }
    }

    // Scaled so that q_cls . k / sqrt(d) is the key's signal component.
    const double q_scale = std::sqrt(static_cast<double>(d));
    out.cls_query.resize(d);
    out.seg_query.resize(d);
    for (std::size_t c = 0; c < d; ++c) {
        out.cls_query[c] = q_scale * signal[c];
        out.seg_query[c] = q_scale * signal[c];
    }
    return out;
}

std::vector<Matrix> attention_logits(const Matrix& hidden, std::span<const std::uint64_t> positions,
                                     const LayerWeights& w, std::size_t heads, MacMeter* meter) {
    check_layer(hidden, w, heads);
    check_positions(positions, hidden.rows());
    return head_logits(rms_norm(hidden), positions, w, heads, meter);
}

LayerOutput decoder_layer(const Matrix& hidden, std::span<const std::uint64_t> positions, const LayerWeights& w,
                          std::size_t heads, MacMeter* meter) {
    check_layer(hidden, w, heads);
    check_positions(positions, hidden.rows());
    const std::size_t n = hidden.rows();
    const std::size_t d = hidden.cols();
    const std::size_t dh = d / heads;

    const Matrix normed = rms_norm(hidden);
    std::vector<Matrix> logits = head_logits(normed, positions, w, heads, meter);
    const Matrix v = matmul(normed, w.wv, meter);

    LayerOutput out;
    out.attention.reserve(heads);
    Matrix context(n, d);
    for (std::size_t h = 0; h < heads; ++h) {
        Matrix& s = logits[h];
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                s(i, j) = -std::numeric_limits<double>::infinity();
            }
        }
        Matrix probs = softmax_rows(s);
        const Matrix ctx = matmul(probs, v.col_block(h * dh, dh), meter);
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(ctx.row(i).begin(), dh, context.row(i).begin() + static_cast<std::ptrdiff_t>(h * dh));
        }
        out.attention.push_back(std::move(probs));
    }

    out.hidden = hidden;
    add_inplace(out.hidden, matmul(context, w.wo, meter));

    const Matrix normed2 = rms_norm(out.hidden);
    Matrix gate = matmul(normed2, w.w_gate, meter);
    const Matrix up = matmul(normed2, w.w_up, meter);
    auto g = gate.data();
    auto u = up.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double silu = g[i] / (1.0 + std::exp(-g[i]));
        g[i] = silu * u[i];
    }
    add_inplace(out.hidden, matmul(gate, w.w_down, meter));
    return out;
}

FullSequence full_sequence(const DecoderWeights& weights, const VisionStubOutput& stub) {
    const ModelDims& dims = weights.dims;
    if (stub.image_embed.rows() != dims.image_tokens || stub.image_embed.cols() != dims.hidden) {
        throw ShapeError("full_sequence: image embeddings do not match model dims");
    }
    FullSequence seq;
    seq.hidden = Matrix(dims.full_length(), dims.hidden);
    std::size_t r = 0;
    auto append = [&](const Matrix& src) {
        for (std::size_t i = 0; i < src.rows(); ++i, ++r) {
            std::copy_n(src.row(i).begin(), dims.hidden, seq.hidden.row(r).begin());
        }
    };
    append(weights.system_embed);
    append(stub.image_embed);
    append(weights.user_embed);
    append(weights.output_embed);
    auto seg = seq.hidden.row(dims.seg_index_full());
    for (std::size_t c = 0; c < dims.hidden; ++c) {
        seg[c] += stub.seg_query[c];
    }
    seq.positions.resize(dims.full_length());
    for (std::size_t i = 0; i < seq.positions.size(); ++i) {
        seq.positions[i] = i;
    }
    return seq;
}

Matrix forward_full(const DecoderWeights& weights, const VisionStubOutput& stub, MacMeter* meter) {
    FullSequence seq = full_sequence(weights, stub);
    for (const LayerWeights& layer : weights.layers) {
        seq.hidden = decoder_layer(seq.hidden, seq.positions, layer, weights.dims.heads, meter).hidden;
    }
    return seq.hidden;
}

}  // namespace csp
