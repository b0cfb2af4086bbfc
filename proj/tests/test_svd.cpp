#include <catch2/catch_amalgamated.hpp>

#include "melora/matrix.hpp"
#include "melora/svd.hpp"

using namespace melora;

namespace {

double orthonormality_error(const Matrix& m) {
    const Matrix gram = matmul(m.transposed(), m);
    return max_abs_diff(gram, Matrix::identity(gram.rows()));
}

} // namespace

TEST_CASE("svd of a diagonal matrix returns the diagonal", "[svd]") {
    Matrix m(3, 3);
    m(0, 0) = 3.0;
    m(1, 1) = 2.0;
    m(2, 2) = 1.0;
    const SvdResult r = svd(m);
    REQUIRE(r.singular_values.size() == 3);
    CHECK(std::abs(r.singular_values[0] - 3.0) < 1e-14);
    CHECK(std::abs(r.singular_values[1] - 2.0) < 1e-14);
    CHECK(std::abs(r.singular_values[2] - 1.0) < 1e-14);
}

TEST_CASE("svd of the zero matrix is all zeros with orthonormal factors", "[svd]") {
    const SvdResult r = svd(Matrix(4, 4));
    for (double s : r.singular_values) CHECK(s == 0.0);
    CHECK(orthonormality_error(r.left_vectors) < 1e-12);
    CHECK(orthonormality_error(r.right_vectors) < 1e-12);
}

TEST_CASE("svd separates a rank-2 product cleanly", "[svd]") {
    GaussianRng rng(41);
    const Matrix m = matmul(Matrix::gaussian(8, 2, rng), Matrix::gaussian(2, 8, rng));
    const SvdResult r = svd(m);
    std::size_t above = 0;
    for (double s : r.singular_values) {
        if (s > 1e-8) {
            ++above;
        } else {
            CHECK(s < 1e-8);
        }
    }
    CHECK(above == 2);
}

TEST_CASE("svd reconstruction and orthonormality on random shapes", "[svd][property]") {
    GaussianRng rng(43);
    for (int trial = 0; trial < 25; ++trial) {
        const std::size_t rows = 2 + rng.index(63);
        const std::size_t cols = 2 + rng.index(63);
        const Matrix m = Matrix::gaussian(rows, cols, rng);
        const SvdResult r = svd(m);
        CHECK(relative_frobenius_diff(svd_reconstruct(r), m) < 1e-8);
        CHECK(orthonormality_error(r.left_vectors) < 1e-10);
        CHECK(orthonormality_error(r.right_vectors) < 1e-10);
        for (std::size_t i = 1; i < r.singular_values.size(); ++i) {
            CHECK(r.singular_values[i - 1] >= r.singular_values[i]);
            CHECK(r.singular_values[i] >= 0.0);
        }
    }
}

TEST_CASE("svd reconstructs rank-deficient matrices", "[svd]") {
    GaussianRng rng(47);
    const Matrix m = matmul(Matrix::gaussian(12, 3, rng), Matrix::gaussian(3, 7, rng));
    const SvdResult r = svd(m);
    CHECK(relative_frobenius_diff(svd_reconstruct(r), m) < 1e-8);
    CHECK(orthonormality_error(r.left_vectors) < 1e-10);
}

TEST_CASE("svd rejects an empty matrix", "[svd]") {
    REQUIRE_THROWS_AS(svd(Matrix()), DimensionError);
}

TEST_CASE("svd reports non-convergence with the sweep cap", "[svd]") {
    GaussianRng rng(53);
    const Matrix m = Matrix::gaussian(16, 16, rng);
    SvdOptions opts;
    opts.max_sweeps = 1;
    try {
        svd(m, opts);
        FAIL("expected ConvergenceError");
    } catch (const ConvergenceError& e) {
        CHECK(e.sweeps() == 1);
        CHECK(std::string(e.what()).find("1") != std::string::npos);
    }
}

TEST_CASE("rank counts strictly above the threshold", "[svd]") {
    CHECK(rank(Matrix::identity(5), 0.1) == 5);
    CHECK(rank(Matrix(5, 5), 0.1) == 0);
    // sigma == threshold must not count
    CHECK(rank(Matrix::identity(3), 1.0) == 0);
}

TEST_CASE("rank of a Gaussian block-diagonal 16x16 is full", "[svd]") {
    GaussianRng rng(59);
    std::vector<Matrix> blocks;
    for (int i = 0; i < 4; ++i) blocks.push_back(Matrix::gaussian(4, 4, rng));
    CHECK(rank(block_diag(blocks), 1e-8) == 16);
}

TEST_CASE("rank requires a positive threshold", "[svd]") {
    REQUIRE_THROWS_AS(rank(Matrix::identity(3), 0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(rank(Matrix::identity(3), -1.0), std::invalid_argument);
}
