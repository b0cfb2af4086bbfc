#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include "melora/rng.hpp"

namespace melora {

/// Shape or argument violations on matrix operations.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Dense row-major matrix of doubles. Treated as an immutable value once an
/// operation returns; every public operation allocates a fresh result.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r > 0 ? rows.begin()->size() : 0;
        Matrix m(r, c);
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c) {
                throw DimensionError("from_rows: ragged row " + std::to_string(i) +
                                     " has " + std::to_string(row.size()) +
                                     " entries, expected " + std::to_string(c));
            }
            std::size_t j = 0;
            for (double v : row) m(i, j++) = v;
            ++i;
        }
        return m;
    }

    /// Entries drawn row-major from the given generator.
    static Matrix gaussian(std::size_t rows, std::size_t cols, GaussianRng& rng,
                           double stddev = 1.0) {
        Matrix m(rows, cols);
        for (double& v : m.data_) v = rng.normal(stddev);
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    const std::vector<double>& values() const { return data_; }
    std::vector<double>& values() { return data_; }

    bool operator==(const Matrix&) const = default;

    Matrix transposed() const {
        Matrix t(cols_, rows_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double frobenius_norm() const {
        double sum = 0.0;
        for (double v : data_) sum += v * v;
        return std::sqrt(sum);
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::abs(v));
        return m;
    }

    Matrix& operator+=(const Matrix& rhs);
    Matrix& operator-=(const Matrix& rhs);

    Matrix& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

namespace detail {
inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) +
                             " vs " + shape_str(b));
    }
}
} // namespace detail

inline Matrix& Matrix::operator+=(const Matrix& rhs) {
    detail::require_same_shape(*this, rhs, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += rhs.data_[i];
    return *this;
}

inline Matrix& Matrix::operator-=(const Matrix& rhs) {
    detail::require_same_shape(*this, rhs, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= rhs.data_[i];
    return *this;
}

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(Matrix a, double s) { return a *= s; }
inline Matrix operator*(double s, Matrix a) { return a *= s; }

inline Matrix operator-(const Matrix& a) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = -a.values()[i];
    return out;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: dimension mismatch " + shape_str(a) + " * " +
                             shape_str(b));
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
        }
    }
    return out;
}

/// Side-by-side concatenation [a | b].
inline Matrix hconcat(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw DimensionError("hconcat: row mismatch " + shape_str(a) + " vs " +
                             shape_str(b));
    }
    Matrix out(a.rows(), a.cols() + b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
        for (std::size_t j = 0; j < b.cols(); ++j) out(i, a.cols() + j) = b(i, j);
    }
    return out;
}

/// Stacked concatenation [a; b].
inline Matrix vconcat(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw DimensionError("vconcat: column mismatch " + shape_str(a) + " vs " +
                             shape_str(b));
    }
    Matrix out(a.rows() + b.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
    for (std::size_t i = 0; i < b.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) out(a.rows() + i, j) = b(i, j);
    return out;
}

/// Block-diagonal assembly: block k occupies the k-th diagonal slot and every
/// off-block entry is written as literal 0.
inline Matrix block_diag(const std::vector<Matrix>& blocks) {
    if (blocks.empty()) throw DimensionError("block_diag: empty block list");
    std::size_t rows = 0, cols = 0;
    for (const Matrix& b : blocks) {
        rows += b.rows();
        cols += b.cols();
    }
    Matrix out(rows, cols);
    std::size_t r0 = 0, c0 = 0;
    for (const Matrix& b : blocks) {
        for (std::size_t i = 0; i < b.rows(); ++i)
            for (std::size_t j = 0; j < b.cols(); ++j) out(r0 + i, c0 + j) = b(i, j);
        r0 += b.rows();
        c0 += b.cols();
    }
    return out;
}

/// Copy of `count` contiguous rows starting at `first`.
inline Matrix row_block(const Matrix& m, std::size_t first, std::size_t count) {
    if (first + count > m.rows()) {
        throw DimensionError("row_block: rows [" + std::to_string(first) + "," +
                             std::to_string(first + count) + ") out of range for " +
                             shape_str(m));
    }
    Matrix out(count, m.cols());
    for (std::size_t i = 0; i < count; ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(first + i, j);
    return out;
}

/// Copy of `count` contiguous columns starting at `first`.
inline Matrix col_block(const Matrix& m, std::size_t first, std::size_t count) {
    if (first + count > m.cols()) {
        throw DimensionError("col_block: cols [" + std::to_string(first) + "," +
                             std::to_string(first + count) + ") out of range for " +
                             shape_str(m));
    }
    Matrix out(m.rows(), count);
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < count; ++j) out(i, j) = m(i, first + j);
    return out;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    detail::require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

/// ||a - b||_F / max(||a||_F, ||b||_F), with 0/0 defined as 0.
inline double relative_frobenius_diff(const Matrix& a, const Matrix& b) {
    detail::require_same_shape(a, b, "relative_frobenius_diff");
    const double ref = std::max(a.frobenius_norm(), b.frobenius_norm());
    if (ref == 0.0) return 0.0;
    return (a - b).frobenius_norm() / ref;
}

} // namespace melora
