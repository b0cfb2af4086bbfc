#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "melora/matrix.hpp"
#include "melora/rng.hpp"
#include "melora/svd.hpp"

namespace melora {

enum class AdapterKind { lora, melora };

inline const char* to_string(AdapterKind k) {
    return k == AdapterKind::lora ? "lora" : "melora";
}

/// One low-rank pair: the update B*A scaled by alpha/rank approximates the
/// weight change of a frozen d_out x d_in base matrix.
struct LoraAdapter {
    Matrix a;             // rank x d_in
    Matrix b;             // d_out x rank
    std::size_t rank = 0;
    double alpha = 16.0;
    double dropout_p = 0.0;

    std::size_t d_in() const { return a.cols(); }
    std::size_t d_out() const { return b.rows(); }
    double scale() const { return alpha / static_cast<double>(rank); }

    /// Effective update scale * B * A.
    Matrix delta_w() const { return scale() * matmul(b, a); }
};

/// Ordered ensemble of n mini low-rank pairs over disjoint contiguous feature
/// blocks. Algebraically the update is block-diagonal: block i maps input
/// rows [i*d_in/n, (i+1)*d_in/n) to output rows [i*d_out/n, (i+1)*d_out/n).
struct MeloraAdapter {
    std::vector<LoraAdapter> minis;
    std::size_t n = 1;
    std::size_t r_mini = 1;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    double alpha = 16.0;
    double dropout_p = 0.0;

    std::size_t block_in() const { return d_in / n; }
    std::size_t block_out() const { return d_out / n; }
    double scale() const { return alpha / static_cast<double>(r_mini); }

    Matrix delta_w() const;
};

namespace detail {

inline void require_positive(std::size_t v, const char* what, const char* fn) {
    if (v == 0) {
        throw std::invalid_argument(std::string(fn) + ": " + what + " must be positive");
    }
}

inline void require_divisible(std::size_t d, std::size_t n, const char* what,
                              const char* fn) {
    if (n == 0 || d % n != 0) {
        throw std::invalid_argument(std::string(fn) + ": " + what + "=" +
                                    std::to_string(d) + " not divisible by n=" +
                                    std::to_string(n));
    }
}

} // namespace detail

/// A entries ~ Gaussian(0, std) with std = 1/r unless overridden; B is all
/// zeros so the update is exactly zero at initialization.
inline LoraAdapter init_lora(std::size_t d_in, std::size_t d_out, std::size_t r,
                             double alpha, std::uint64_t seed, double dropout_p = 0.0,
                             double init_std = 0.0) {
    detail::require_positive(d_in, "d_in", "init_lora");
    detail::require_positive(d_out, "d_out", "init_lora");
    if (r < 1 || r > std::min(d_in, d_out)) {
        throw std::invalid_argument("init_lora: rank " + std::to_string(r) +
                                    " out of range for base " + std::to_string(d_out) +
                                    "x" + std::to_string(d_in) + " (max " +
                                    std::to_string(std::min(d_in, d_out)) + ")");
    }
    if (!(alpha > 0.0)) throw std::invalid_argument("init_lora: alpha must be positive");
    if (dropout_p < 0.0 || dropout_p >= 1.0) {
        throw std::invalid_argument("init_lora: dropout_p must lie in [0,1)");
    }
    const double stddev = init_std > 0.0 ? init_std : 1.0 / static_cast<double>(r);
    GaussianRng rng(seed);
    LoraAdapter ad;
    ad.a = Matrix::gaussian(r, d_in, rng, stddev);
    ad.b = Matrix(d_out, r);
    ad.rank = r;
    ad.alpha = alpha;
    ad.dropout_p = dropout_p;
    return ad;
}

/// n mini pairs sampled sequentially from one seeded stream, so n=1 is
/// bit-identical to init_lora with the same seed.
inline MeloraAdapter init_melora(std::size_t d_in, std::size_t d_out, std::size_t n,
                                 std::size_t r_mini, double alpha, std::uint64_t seed,
                                 double dropout_p = 0.0, double init_std = 0.0) {
    detail::require_positive(n, "n", "init_melora");
    detail::require_divisible(d_in, n, "d_in", "init_melora");
    detail::require_divisible(d_out, n, "d_out", "init_melora");
    const std::size_t bin = d_in / n;
    const std::size_t bout = d_out / n;
    if (r_mini < 1 || r_mini > std::min(bin, bout)) {
        throw std::invalid_argument("init_melora: r_mini " + std::to_string(r_mini) +
                                    " out of range for block " + std::to_string(bout) +
                                    "x" + std::to_string(bin) + " (max " +
                                    std::to_string(std::min(bin, bout)) + ")");
    }
    if (!(alpha > 0.0)) throw std::invalid_argument("init_melora: alpha must be positive");
    if (dropout_p < 0.0 || dropout_p >= 1.0) {
        throw std::invalid_argument("init_melora: dropout_p must lie in [0,1)");
    }
    const double stddev = init_std > 0.0 ? init_std : 1.0 / static_cast<double>(r_mini);

    MeloraAdapter ad;
    ad.n = n;
    ad.r_mini = r_mini;
    ad.d_in = d_in;
    ad.d_out = d_out;
    ad.alpha = alpha;
    ad.dropout_p = dropout_p;
    ad.minis.reserve(n);
    GaussianRng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        LoraAdapter mini;
        mini.a = Matrix::gaussian(r_mini, bin, rng, stddev);
        mini.b = Matrix(bout, r_mini);
        mini.rank = r_mini;
        mini.alpha = alpha;
        mini.dropout_p = dropout_p;
        ad.minis.push_back(std::move(mini));
    }
    return ad;
}

namespace detail {

inline void require_base_and_input(std::size_t d_out, std::size_t d_in, const Matrix& w,
                                   const Matrix& x, const char* fn) {
    if (w.rows() != d_out || w.cols() != d_in) {
        throw DimensionError(std::string(fn) + ": base " + shape_str(w) +
                             " does not match adapter " + std::to_string(d_out) + "x" +
                             std::to_string(d_in));
    }
    if (x.rows() != d_in) {
        throw DimensionError(std::string(fn) + ": input " + shape_str(x) +
                             " incompatible with d_in=" + std::to_string(d_in));
    }
}

inline void add_scaled_block(Matrix& out, std::size_t row_offset, double s,
                             const Matrix& block) {
    for (std::size_t i = 0; i < block.rows(); ++i)
        for (std::size_t j = 0; j < block.cols(); ++j)
            out(row_offset + i, j) += s * block(i, j);
}

/// Forward with a separate adapter-branch input (the training path routes a
/// dropout-masked copy through the adapter while the base path sees raw x).
inline Matrix lora_forward_impl(const LoraAdapter& ad, const Matrix& w,
                                const Matrix& x_base, const Matrix& x_adapter) {
    require_base_and_input(ad.d_out(), ad.d_in(), w, x_base, "lora_forward");
    Matrix out = matmul(w, x_base);
    const Matrix prod = matmul(ad.b, matmul(ad.a, x_adapter));
    add_scaled_block(out, 0, ad.scale(), prod);
    return out;
}

inline Matrix melora_forward_impl(const MeloraAdapter& ad, const Matrix& w,
                                  const Matrix& x_base, const Matrix& x_adapter) {
    require_base_and_input(ad.d_out, ad.d_in, w, x_base, "melora_forward");
    Matrix out = matmul(w, x_base);
    const double s = ad.scale();
    for (std::size_t i = 0; i < ad.n; ++i) {
        const Matrix xi = row_block(x_adapter, i * ad.block_in(), ad.block_in());
        const Matrix prod = matmul(ad.minis[i].b, matmul(ad.minis[i].a, xi));
        add_scaled_block(out, i * ad.block_out(), s, prod);
    }
    return out;
}

} // namespace detail

/// h = W x + (alpha/r) B A x.
inline Matrix lora_forward(const LoraAdapter& ad, const Matrix& w, const Matrix& x) {
    return detail::lora_forward_impl(ad, w, x, x);
}

/// h = W x + (alpha/r) concat_i(B_i A_i x_i) over contiguous input blocks x_i.
inline Matrix melora_forward(const MeloraAdapter& ad, const Matrix& w, const Matrix& x) {
    return detail::melora_forward_impl(ad, w, x, x);
}

/// Zero-padded equivalent factors: a_eq = diag(A_1..A_n), b_eq = diag(B_1..B_n).
/// Their product (times the scale) equals the ensemble update; off-block
/// entries are literal zeros.
struct SparseExpansion {
    Matrix a_eq; // (n*r_mini) x d_in
    Matrix b_eq; // d_out x (n*r_mini)
};

inline SparseExpansion expand_to_sparse(const MeloraAdapter& ad) {
    std::vector<Matrix> a_blocks, b_blocks;
    a_blocks.reserve(ad.n);
    b_blocks.reserve(ad.n);
    for (const LoraAdapter& mini : ad.minis) {
        a_blocks.push_back(mini.a);
        b_blocks.push_back(mini.b);
    }
    return SparseExpansion{block_diag(a_blocks), block_diag(b_blocks)};
}

inline Matrix MeloraAdapter::delta_w() const {
    const SparseExpansion eq = expand_to_sparse(*this);
    return scale() * matmul(eq.b_eq, eq.a_eq);
}

/// W + scale * B * A. Not idempotent: merging twice adds the update twice.
inline Matrix merge(const LoraAdapter& ad, const Matrix& w) {
    if (w.rows() != ad.d_out() || w.cols() != ad.d_in()) {
        throw DimensionError("merge: base " + shape_str(w) + " does not match adapter " +
                             std::to_string(ad.d_out()) + "x" + std::to_string(ad.d_in()));
    }
    return w + ad.delta_w();
}

inline Matrix merge(const MeloraAdapter& ad, const Matrix& w) {
    if (w.rows() != ad.d_out || w.cols() != ad.d_in) {
        throw DimensionError("merge: base " + shape_str(w) + " does not match adapter " +
                             std::to_string(ad.d_out) + "x" + std::to_string(ad.d_in));
    }
    return w + ad.delta_w();
}

/// Trainable entries of one adapted matrix:
/// n * (d_in/n * r + r * d_out/n) = r * (d_in + d_out), independent of n.
inline std::uint64_t count_params(std::size_t d_in, std::size_t d_out, std::size_t n,
                                  std::size_t r_mini) {
    detail::require_positive(r_mini, "r_mini", "count_params");
    detail::require_divisible(d_in, n, "d_in", "count_params");
    detail::require_divisible(d_out, n, "d_out", "count_params");
    const std::size_t bin = d_in / n;
    const std::size_t bout = d_out / n;
    if (r_mini > std::min(bin, bout)) {
        throw std::invalid_argument("count_params: r_mini " + std::to_string(r_mini) +
                                    " exceeds block min dim " +
                                    std::to_string(std::min(bin, bout)));
    }
    return static_cast<std::uint64_t>(n) *
           (static_cast<std::uint64_t>(bin) * r_mini +
            static_cast<std::uint64_t>(r_mini) * bout);
}

/// Guaranteed rank of the block-diagonal update when every block is full rank.
inline std::size_t equivalent_rank(std::size_t n, std::size_t r_mini) {
    detail::require_positive(n, "n", "equivalent_rank");
    detail::require_positive(r_mini, "r_mini", "equivalent_rank");
    return n * r_mini;
}

/// Multiply-accumulate cost of the adapter path at equivalent rank r split
/// into n blocks (per input column): 2rd/n total, 2rd/n^2 on the critical
/// path when blocks run in parallel. n=1 gives the plain low-rank cost 2rd.
struct FlopCount {
    std::uint64_t serial_ops = 0;
    std::uint64_t parallel_critical_path = 0;
};

inline FlopCount flop_count(std::size_t d, std::size_t r, std::size_t n) {
    detail::require_positive(d, "d", "flop_count");
    detail::require_positive(r, "r", "flop_count");
    detail::require_divisible(d, n, "d", "flop_count");
    detail::require_divisible(r, n, "r", "flop_count");
    const std::uint64_t per_block = 2ull * (r / n) * (d / n);
    return FlopCount{per_block * n, per_block};
}

/// Overwrites both factors with Gaussian entries; stands in for a trained
/// state in rank analyses and property checks.
inline void fill_gaussian(LoraAdapter& ad, GaussianRng& rng, double stddev = 1.0) {
    ad.a = Matrix::gaussian(ad.a.rows(), ad.a.cols(), rng, stddev);
    ad.b = Matrix::gaussian(ad.b.rows(), ad.b.cols(), rng, stddev);
}

inline void fill_gaussian(MeloraAdapter& ad, GaussianRng& rng, double stddev = 1.0) {
    for (LoraAdapter& mini : ad.minis) fill_gaussian(mini, rng, stddev);
}

/// Inverted dropout: zero entries with probability p, scale survivors by
/// 1/(1-p). One mask covers the whole input, shared across all blocks.
inline Matrix inverted_dropout(const Matrix& x, double p, GaussianRng& rng) {
    if (p <= 0.0) return x;
    if (p >= 1.0) throw std::invalid_argument("inverted_dropout: p must lie in [0,1)");
    Matrix out(x.rows(), x.cols());
    const double keep_scale = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const bool keep = rng.uniform() > p;
        out.values()[i] = keep ? x.values()[i] * keep_scale : 0.0;
    }
    return out;
}

} // namespace melora
