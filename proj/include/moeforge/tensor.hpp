#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "moeforge/error.hpp"
#include "moeforge/rng.hpp"

namespace moeforge {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data))
    {
        if (data_.size() != rows_ * cols_)
            throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " != " +
                             std::to_string(rows_) + "x" + std::to_string(cols_));
        for (double v : data_)
            if (!std::isfinite(v))
                throw InvalidArgument("Matrix: non-finite entry");
    }

    Matrix(std::initializer_list<std::initializer_list<double>> rows)
    {
        rows_ = rows.size();
        cols_ = rows_ == 0 ? 0 : rows.begin()->size();
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_)
                throw ShapeError("Matrix: ragged initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Matrix random_normal(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0)
    {
        Matrix m(rows, cols);
        for (auto& v : m.data_)
            v = rng.normal(0.0, stddev);
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline std::string shape_str(const Matrix& m)
{
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

/// Standard product; each entry accumulated left to right over the inner index.
inline Matrix matmul(const Matrix& a, const Matrix& b)
{
    if (a.cols() != b.rows())
        throw ShapeError("matmul: " + shape_str(a) + " by " + shape_str(b));
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < a.cols(); ++p)
                acc += a(i, p) * b(p, j);
            out(i, j) = acc;
        }
    return out;
}

/// Row vector times matrix: out_j = sum_p x_p * m(p, j), accumulated in p order.
inline Vector vecmat(std::span<const double> x, const Matrix& m)
{
    if (x.size() != m.rows())
        throw ShapeError("vecmat: vector of length " + std::to_string(x.size()) + " by " + shape_str(m));
    Vector out(m.cols(), 0.0);
    for (std::size_t j = 0; j < m.cols(); ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < m.rows(); ++p)
            acc += x[p] * m(p, j);
        out[j] = acc;
    }
    return out;
}

/// Matrix times column vector: out_i = sum_j m(i, j) * v_j. Used for products with a transpose.
inline Vector matvec(const Matrix& m, std::span<const double> v)
{
    if (v.size() != m.cols())
        throw ShapeError("matvec: " + shape_str(m) + " by vector of length " + std::to_string(v.size()));
    Vector out(m.rows(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j)
            acc += m(i, j) * v[j];
        out[i] = acc;
    }
    return out;
}

inline double sigmoid(double z) noexcept
{
    if (z >= 0.0)
        return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline double swish(double z) noexcept { return z * sigmoid(z); }

/// d/dz [z * sigmoid(z)]
inline double swish_grad(double z) noexcept
{
    const double s = sigmoid(z);
    return s * (1.0 + z * (1.0 - s));
}

/// log(1 + e^z) without overflow.
inline double softplus(double z) noexcept
{
    return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

inline Vector swish(std::span<const double> x)
{
    Vector out(x.size());
    std::transform(x.begin(), x.end(), out.begin(), [](double z) { return swish(z); });
    return out;
}

inline constexpr double kMasked = -std::numeric_limits<double>::infinity();

/// Max-subtracted softmax. Entries equal to kMasked get probability 0.
inline Vector softmax(std::span<const double> logits)
{
    if (logits.empty())
        throw InvalidArgument("softmax: empty input");
    double hi = kMasked;
    for (double v : logits)
        hi = std::max(hi, v);
    if (hi == kMasked)
        throw InvalidArgument("softmax: every entry is masked");
    Vector out(logits.size(), 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (logits[i] == kMasked)
            continue;
        out[i] = std::exp(logits[i] - hi);
        sum += out[i];
    }
    for (double& v : out)
        v /= sum;
    return out;
}

inline double dot(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size())
        throw ShapeError("dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        acc += a[i] * b[i];
    return acc;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size())
        throw ShapeError("squared_distance: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        acc += diff * diff;
    }
    return acc;
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y)
{
    if (x.size() != y.size())
        throw ShapeError("axpy: length mismatch");
    for (std::size_t i = 0; i < x.size(); ++i)
        y[i] += alpha * x[i];
}

inline Vector random_normal_vector(std::size_t n, Rng& rng, double stddev = 1.0)
{
    Vector v(n);
    for (auto& e : v)
        e = rng.normal(0.0, stddev);
    return v;
}

} // namespace moeforge
