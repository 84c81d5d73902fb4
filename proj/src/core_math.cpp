#include "csp/core_math.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "csp/error.hpp"

namespace csp {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) {
            throw ShapeError("ragged matrix literal");
        }
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r) {
        for (std::size_t c = 0; c < cols_; ++c) {
            t(c, r) = (*this)(r, c);
        }
    }
    return t;
}

Matrix Matrix::select_rows(std::span<const std::size_t> indices) const {
    Matrix out(indices.size(), cols_);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= rows_) {
            throw ShapeError("row index " + std::to_string(indices[i]) + " out of range");
        }
        std::copy_n(row(indices[i]).begin(), cols_, out.row(i).begin());
    }
    return out;
}

Matrix Matrix::col_block(std::size_t first, std::size_t count) const {
    if (first + count > cols_) {
        throw ShapeError("column block exceeds matrix width");
    }
    Matrix out(rows_, count);
    for (std::size_t r = 0; r < rows_; ++r) {
        std::copy_n(row(r).begin() + static_cast<std::ptrdiff_t>(first), count, out.row(r).begin());
    }
    return out;
}

std::uint64_t Rng::next_u64() noexcept {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double Rng::uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t bound) noexcept {
    // Rejection on the top of the range removes modulo bias.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x = next_u64();
    while (x >= limit) {
        x = next_u64();
    }
    return x % bound;
}

double Rng::normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) {
        u1 = uniform();
    }
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) noexcept {
    Rng r(base ^ (a * 0xd1b54a32d192ed03ULL));
    r.next_u64();
    Rng s(r.next_u64() ^ (b * 0x8cb92ba72f3d8dd7ULL));
    return s.next_u64();
}

Matrix matmul(const Matrix& a, const Matrix& b, MacMeter* meter) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " times " +
                         std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out_row = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            const auto b_row = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                out_row[j] += aik * b_row[j];
            }
        }
    }
    if (meter != nullptr) {
        meter->add(static_cast<std::uint64_t>(a.rows()) * a.cols() * b.cols());
    }
    return out;
}

Matrix softmax_rows(const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto in = m.row(r);
        auto dst = out.row(r);
        const double peak = *std::max_element(in.begin(), in.end());
        if (!std::isfinite(peak)) {
            throw ArgumentError("softmax_rows: row " + std::to_string(r) + " has no finite maximum");
        }
        double sum = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) {
            dst[c] = std::exp(in[c] - peak);
            sum += dst[c];
        }
        for (double& v : dst) {
            v /= sum;
        }
    }
    return out;
}

void rope_rotate_inplace(std::span<double> vec, std::uint64_t position, double base) {
    const std::size_t d = vec.size();
    if (d % 2 != 0) {
        throw ShapeError("rope_rotate: odd dimension " + std::to_string(d));
    }
    if (position == 0) {
        return;
    }
    const double pos = static_cast<double>(position);
    for (std::size_t j = 0; j < d / 2; ++j) {
        const double theta = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(d));
        const double c = std::cos(pos * theta);
        const double s = std::sin(pos * theta);
        const double x0 = vec[2 * j];
        const double x1 = vec[2 * j + 1];
        vec[2 * j] = x0 * c - x1 * s;
        vec[2 * j + 1] = x0 * s + x1 * c;
    }
}

std::vector<double> rope_rotate(std::span<const double> vec, std::uint64_t position, double base) {
    std::vector<double> out(vec.begin(), vec.end());
    rope_rotate_inplace(out, position, base);
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ShapeError("dot: length mismatch");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

double norm2(std::span<const double> v) {
    return std::sqrt(dot(v, v));
}

}  // namespace csp
