#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace csp {

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }

    Matrix transposed() const;

    /// Rows `indices` gathered in order.
    Matrix select_rows(std::span<const std::size_t> indices) const;

    /// Columns [first, first + count).
    Matrix col_block(std::size_t first, std::size_t count) const;

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Counts multiply-accumulates issued through matmul. One meter per pipeline run.
class MacMeter {
public:
    void add(std::uint64_t macs) noexcept { total_ += macs; }
    std::uint64_t total() const noexcept { return total_; }
    void reset() noexcept { total_ = 0; }

private:
    std::uint64_t total_ = 0;
};

/// SplitMix64 (Steele, Lea, Flood 2014). State advances by the golden-gamma
/// constant and each output is a finalizer-mixed copy of the state; streams are
/// fully determined by the seed on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) noexcept : state_(seed) {}

    std::uint64_t next_u64() noexcept;

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept;

    /// Uniform integer in [0, bound). bound must be nonzero.
    std::uint64_t below(std::uint64_t bound) noexcept;

    /// Standard normal via Box-Muller; one draw per call.
    double normal() noexcept;

    /// Independent child generator; advances this one.
    Rng fork() noexcept { return Rng(next_u64()); }

    std::uint64_t state() const noexcept { return state_; }

private:
    std::uint64_t state_;
};

/// Seed derivation for parallel work items: mixes (base, a, b) into a new seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) noexcept;

/// Standard product. Adds a.rows * a.cols * b.cols to `meter` when given.
Matrix matmul(const Matrix& a, const Matrix& b, MacMeter* meter = nullptr);

/// Row-wise softmax with max subtraction. Entries equal to -inf get probability 0.
Matrix softmax_rows(const Matrix& m);

inline constexpr double kRopeBase = 10000.0;

/// Rotates consecutive pairs (2j, 2j+1) by position * base^(-2j/d).
std::vector<double> rope_rotate(std::span<const double> vec, std::uint64_t position, double base = kRopeBase);

/// In-place variant used on projection rows.
void rope_rotate_inplace(std::span<double> vec, std::uint64_t position, double base = kRopeBase);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);

}  // namespace csp
