#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "melora/matrix.hpp"

namespace melora {

/// Iterative decomposition failed to reach its tolerance within the sweep cap.
class ConvergenceError : public std::runtime_error {
public:
    ConvergenceError(const std::string& what, std::size_t sweeps)
        : std::runtime_error(what), sweeps_(sweeps) {}

    std::size_t sweeps() const { return sweeps_; }

private:
    std::size_t sweeps_;
};

struct SvdOptions {
    /// Convergence: every off-diagonal Gram entry satisfies
    /// |a_i . a_j| <= tolerance * ||a_i|| * ||a_j||.
    double tolerance = 1e-12;
    std::size_t max_sweeps = 100;
};

/// Thin SVD with k = min(rows, cols) triples.
struct SvdResult {
    std::vector<double> singular_values; // descending, all >= 0
    Matrix left_vectors;                 // rows x k, orthonormal columns
    Matrix right_vectors;                // cols x k, orthonormal columns
};

/// One-sided Jacobi SVD (Hestenes). Columns of a working copy are rotated
/// pairwise until mutually orthogonal; their norms are the singular values.
/// Accurate and dependency-free at the matrix sizes this library targets.
inline SvdResult svd(const Matrix& m, const SvdOptions& opts = {}) {
    if (m.rows() == 0 || m.cols() == 0) throw DimensionError("svd: empty matrix");
    if (m.rows() < m.cols()) {
        SvdResult t = svd(m.transposed(), opts);
        return SvdResult{std::move(t.singular_values), std::move(t.right_vectors),
                         std::move(t.left_vectors)};
    }

    const std::size_t rows = m.rows();
    const std::size_t k = m.cols();
    Matrix work = m;
    Matrix v = Matrix::identity(k);

    // Rotations are orthogonal on the right, so the Frobenius norm is
    // invariant; columns below roundoff of it carry sigma ~ 0 and must not
    // keep triggering rotations against each other.
    double fro2 = 0.0;
    for (double val : work.values()) fro2 += val * val;
    const double column_floor = fro2 * 1e-30;

    bool converged = false;
    std::size_t sweep = 0;
    for (; sweep < opts.max_sweeps && !converged; ++sweep) {
        converged = true;
        for (std::size_t i = 0; i + 1 < k; ++i) {
            for (std::size_t j = i + 1; j < k; ++j) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t r = 0; r < rows; ++r) {
                    const double wi = work(r, i);
                    const double wj = work(r, j);
                    alpha += wi * wi;
                    beta += wj * wj;
                    gamma += wi * wj;
                }
                if (alpha <= column_floor || beta <= column_floor) continue;
                if (std::abs(gamma) <= opts.tolerance * std::sqrt(alpha * beta)) continue;
                converged = false;

                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;

                for (std::size_t r = 0; r < rows; ++r) {
                    const double wi = work(r, i);
                    const double wj = work(r, j);
                    work(r, i) = c * wi - s * wj;
                    work(r, j) = s * wi + c * wj;
                }
                for (std::size_t r = 0; r < k; ++r) {
                    const double vi = v(r, i);
                    const double vj = v(r, j);
                    v(r, i) = c * vi - s * vj;
                    v(r, j) = s * vi + c * vj;
                }
            }
        }
    }
    if (!converged) {
        throw ConvergenceError("svd: Jacobi sweeps did not converge within " +
                                   std::to_string(opts.max_sweeps) + " sweeps",
                               opts.max_sweeps);
    }

    std::vector<double> norms(k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
        double sum = 0.0;
        for (std::size_t r = 0; r < rows; ++r) sum += work(r, j) * work(r, j);
        norms[j] = std::sqrt(sum);
    }

    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

    SvdResult out;
    out.singular_values.resize(k);
    out.left_vectors = Matrix(rows, k);
    out.right_vectors = Matrix(k, k);

    std::vector<bool> column_valid(k, false);
    for (std::size_t pos = 0; pos < k; ++pos) {
        const std::size_t src = order[pos];
        out.singular_values[pos] = norms[src];
        for (std::size_t r = 0; r < k; ++r) out.right_vectors(r, pos) = v(r, src);
        if (norms[src] * norms[src] > column_floor) {
            const double inv = 1.0 / norms[src];
            for (std::size_t r = 0; r < rows; ++r)
                out.left_vectors(r, pos) = work(r, src) * inv;
            column_valid[pos] = true;
        }
    }

    // Zero singular values leave their left column undefined; complete the
    // basis so the orthonormality contract holds regardless of rank.
    for (std::size_t pos = 0; pos < k; ++pos) {
        if (column_valid[pos]) continue;
        double best_norm2 = -1.0;
        std::vector<double> best(rows, 0.0);
        for (std::size_t axis = 0; axis < rows; ++axis) {
            std::vector<double> w(rows, 0.0);
            w[axis] = 1.0;
            for (std::size_t c = 0; c < k; ++c) {
                if (!column_valid[c]) continue;
                double dot = out.left_vectors(axis, c);
                for (std::size_t r = 0; r < rows; ++r)
                    w[r] -= dot * out.left_vectors(r, c);
            }
            double n2 = 0.0;
            for (double x : w) n2 += x * x;
            if (n2 > best_norm2) {
                best_norm2 = n2;
                best = std::move(w);
            }
        }
        // One re-orthogonalization pass for numerical cleanliness.
        for (std::size_t c = 0; c < k; ++c) {
            if (!column_valid[c]) continue;
            double dot = 0.0;
            for (std::size_t r = 0; r < rows; ++r) dot += best[r] * out.left_vectors(r, c);
            for (std::size_t r = 0; r < rows; ++r) best[r] -= dot * out.left_vectors(r, c);
        }
        double n = 0.0;
        for (double x : best) n += x * x;
        n = std::sqrt(n);
        for (std::size_t r = 0; r < rows; ++r) out.left_vectors(r, pos) = best[r] / n;
        column_valid[pos] = true;
    }

    return out;
}

/// U diag(sigma) V^T, for reconstruction checks.
inline Matrix svd_reconstruct(const SvdResult& r) {
    const std::size_t k = r.singular_values.size();
    Matrix scaled = r.left_vectors;
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < scaled.rows(); ++i)
            scaled(i, j) *= r.singular_values[j];
    return matmul(scaled, r.right_vectors.transposed());
}

/// Number of singular values strictly greater than `threshold` (raw,
/// unnormalized values).
inline std::size_t rank(const Matrix& m, double threshold, const SvdOptions& opts = {}) {
    if (!(threshold > 0.0)) {
        throw std::invalid_argument("rank: threshold must be positive, got " +
                                    std::to_string(threshold));
    }
    const SvdResult r = svd(m, opts);
    std::size_t count = 0;
    for (double s : r.singular_values)
        if (s > threshold) ++count;
    return count;
}

} // namespace melora
