#include <catch2/catch_amalgamated.hpp>

#include "melora/adapters.hpp"
#include "melora/svd.hpp"

using namespace melora;

namespace {

// Counts every multiply-accumulate on the adapter path for one input column,
// independently of flop_count's closed form.
std::uint64_t counted_adapter_macs(const MeloraAdapter& ad, const Matrix& x) {
    std::uint64_t macs = 0;
    const auto counted_matvec = [&macs](const Matrix& m, const Matrix& v) {
        Matrix out(m.rows(), 1);
        for (std::size_t i = 0; i < m.rows(); ++i)
            for (std::size_t k = 0; k < m.cols(); ++k) {
                out(i, 0) += m(i, k) * v(k, 0);
                ++macs;
            }
        return out;
    };
    for (std::size_t i = 0; i < ad.n; ++i) {
        const Matrix xi = row_block(x, i * ad.block_in(), ad.block_in());
        counted_matvec(ad.minis[i].b, counted_matvec(ad.minis[i].a, xi));
    }
    return macs;
}

MeloraAdapter gaussian_filled(std::size_t d_in, std::size_t d_out, std::size_t n,
                              std::size_t r, std::uint64_t seed, double alpha = 16.0) {
    MeloraAdapter ad = init_melora(d_in, d_out, n, r, alpha, seed);
    GaussianRng rng(derive_seed(seed, 99));
    fill_gaussian(ad, rng);
    return ad;
}

} // namespace

TEST_CASE("init_lora zeroes B so the update vanishes", "[adapters]") {
    const LoraAdapter ad = init_lora(12, 8, 3, 16.0, 123);
    REQUIRE(ad.b == Matrix(8, 3));
    CHECK(ad.delta_w() == Matrix(8, 12));

    GaussianRng rng(5);
    const Matrix w = Matrix::gaussian(8, 12, rng);
    const Matrix x = Matrix::gaussian(12, 4, rng);
    CHECK(lora_forward(ad, w, x) == matmul(w, x));
}

TEST_CASE("init_lora is bitwise reproducible per seed", "[adapters]") {
    const LoraAdapter a1 = init_lora(16, 16, 4, 16.0, 2024);
    const LoraAdapter a2 = init_lora(16, 16, 4, 16.0, 2024);
    const LoraAdapter a3 = init_lora(16, 16, 4, 16.0, 2025);
    CHECK(a1.a == a2.a);
    CHECK(!(a1.a == a3.a));
}

TEST_CASE("init_lora validates the rank range", "[adapters]") {
    REQUIRE_THROWS_AS(init_lora(8, 4, 5, 16.0, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(init_lora(8, 4, 0, 16.0, 1), std::invalid_argument);
}

TEST_CASE("init_melora rejects non-divisible dimensions naming d and n",
          "[adapters]") {
    REQUIRE_THROWS_MATCHES(init_melora(10, 10, 3, 1, 16.0, 1), std::invalid_argument,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("10") &&
                               Catch::Matchers::ContainsSubstring("3")));
    REQUIRE_THROWS_AS(init_melora(12, 12, 4, 4, 16.0, 1), std::invalid_argument);
}

TEST_CASE("n=1 ensemble is structurally a plain adapter", "[adapters]") {
    const LoraAdapter lora = init_lora(16, 12, 2, 16.0, 77);
    const MeloraAdapter mel = init_melora(16, 12, 1, 2, 16.0, 77);
    REQUIRE(mel.minis.size() == 1);
    CHECK(mel.minis[0].a == lora.a);
    CHECK(mel.minis[0].b == lora.b);
}

TEST_CASE("n=1 forward is bitwise identical to the plain forward", "[adapters]") {
    GaussianRng rng(81);
    for (int trial = 0; trial < 10; ++trial) {
        const std::uint64_t seed = rng.next_u64();
        LoraAdapter lora = init_lora(16, 16, 4, 16.0, seed);
        MeloraAdapter mel = init_melora(16, 16, 1, 4, 16.0, seed);
        GaussianRng fill_a(seed + 1), fill_b(seed + 1);
        fill_gaussian(lora, fill_a);
        fill_gaussian(mel, fill_b);
        const Matrix w = Matrix::gaussian(16, 16, rng);
        const Matrix x = Matrix::gaussian(16, 3, rng);
        REQUIRE(lora_forward(lora, w, x) == melora_forward(mel, w, x));
    }
}

TEST_CASE("melora params example: n=8, r=1, d=768 gives 1536 per matrix",
          "[adapters]") {
    const MeloraAdapter ad = init_melora(768, 768, 8, 1, 16.0, 1);
    std::uint64_t entries = 0;
    for (const LoraAdapter& mini : ad.minis) entries += mini.a.size() + mini.b.size();
    CHECK(entries == 1536);
    CHECK(count_params(768, 768, 8, 1) == 1536);
}

TEST_CASE("lora_forward matches the dense update oracle at scale 1", "[adapters]") {
    GaussianRng rng(83);
    LoraAdapter ad = init_lora(10, 10, 4, 4.0, 31); // alpha == r, scale 1
    fill_gaussian(ad, rng);
    const Matrix w = Matrix::gaussian(10, 10, rng);
    const Matrix x = Matrix::gaussian(10, 5, rng);
    const Matrix dense = matmul(w, x) + matmul(matmul(ad.b, ad.a), x);
    CHECK(max_abs_diff(lora_forward(ad, w, x), dense) < 1e-12);
}

TEST_CASE("doubling alpha doubles the adapter contribution", "[adapters]") {
    GaussianRng rng(89);
    LoraAdapter ad = init_lora(12, 12, 2, 8.0, 17);
    fill_gaussian(ad, rng);
    LoraAdapter doubled = ad;
    doubled.alpha = 16.0;
    const Matrix w = Matrix::gaussian(12, 12, rng);
    const Matrix x = Matrix::gaussian(12, 3, rng);
    const Matrix wx = matmul(w, x);
    const Matrix c1 = lora_forward(ad, w, x) - wx;
    const Matrix c2 = lora_forward(doubled, w, x) - wx;
    CHECK(relative_frobenius_diff(2.0 * c1, c2) < 1e-12);
}

TEST_CASE("melora_forward is the base map at init", "[adapters]") {
    GaussianRng rng(91);
    const MeloraAdapter ad = init_melora(24, 24, 4, 2, 16.0, 3);
    const Matrix w = Matrix::gaussian(24, 24, rng);
    const Matrix x = Matrix::gaussian(24, 6, rng);
    REQUIRE(melora_forward(ad, w, x) == matmul(w, x));
}

TEST_CASE("melora forward forms agree within 1e-12", "[adapters][property]") {
    GaussianRng rng(97);
    for (int trial = 0; trial < 30; ++trial) {
        const MeloraAdapter ad = gaussian_filled(32, 32, 4, 2, rng.next_u64());
        const Matrix w = Matrix::gaussian(32, 32, rng);
        const Matrix x = Matrix::gaussian(32, 4, rng);

        const Matrix concat_form = melora_forward(ad, w, x);
        const SparseExpansion eq = expand_to_sparse(ad);
        const Matrix sparse_form =
            matmul(w, x) + ad.scale() * matmul(eq.b_eq, matmul(eq.a_eq, x));
        std::vector<Matrix> prods;
        for (const LoraAdapter& mini : ad.minis) prods.push_back(matmul(mini.b, mini.a));
        const Matrix diag_form = matmul(w, x) + ad.scale() * matmul(block_diag(prods), x);

        CHECK(relative_frobenius_diff(concat_form, sparse_form) < 1e-12);
        CHECK(relative_frobenius_diff(concat_form, diag_form) < 1e-12);
    }
}

TEST_CASE("expand_to_sparse lays blocks along the diagonal", "[adapters]") {
    MeloraAdapter ad = init_melora(4, 4, 2, 1, 16.0, 5);
    ad.minis[0].a = Matrix::from_rows({{1.0, 2.0}});
    ad.minis[1].a = Matrix::from_rows({{3.0, 4.0}});
    const SparseExpansion eq = expand_to_sparse(ad);
    REQUIRE(eq.a_eq == Matrix::from_rows({{1, 2, 0, 0}, {0, 0, 3, 4}}));
    REQUIRE(eq.b_eq.rows() == 4);
    REQUIRE(eq.b_eq.cols() == 2);
}

TEST_CASE("expanded product is zero at init and full-rank when filled",
          "[adapters]") {
    const MeloraAdapter fresh = init_melora(16, 16, 4, 1, 16.0, 9);
    const SparseExpansion eq0 = expand_to_sparse(fresh);
    CHECK(matmul(eq0.b_eq, eq0.a_eq) == Matrix(16, 16));

    GaussianRng rng(101);
    for (int trial = 0; trial < 10; ++trial) {
        const MeloraAdapter ad = gaussian_filled(16, 16, 4, 1, rng.next_u64());
        const SparseExpansion eq = expand_to_sparse(ad);
        CHECK(rank(matmul(eq.b_eq, eq.a_eq), 1e-8) == 4);
    }
}

TEST_CASE("merge at init returns the base unchanged", "[adapters]") {
    GaussianRng rng(103);
    const Matrix w = Matrix::gaussian(12, 12, rng);
    CHECK(merge(init_lora(12, 12, 2, 16.0, 1), w) == w);
    CHECK(merge(init_melora(12, 12, 3, 2, 16.0, 1), w) == w);
}

TEST_CASE("merged map equals adapter forward on random inputs", "[adapters]") {
    GaussianRng rng(107);
    const MeloraAdapter ad = gaussian_filled(24, 24, 2, 2, 4242);
    const Matrix w = Matrix::gaussian(24, 24, rng);
    const Matrix merged = merge(ad, w);
    for (int trial = 0; trial < 100; ++trial) {
        const Matrix x = Matrix::gaussian(24, 1, rng);
        CHECK(max_abs_diff(matmul(merged, x), melora_forward(ad, w, x)) < 1e-10);
    }
}

TEST_CASE("merging twice adds the update twice", "[adapters]") {
    GaussianRng rng(109);
    const MeloraAdapter ad = gaussian_filled(16, 16, 2, 1, 777);
    const Matrix w = Matrix::gaussian(16, 16, rng);
    const Matrix twice = merge(ad, merge(ad, w));
    CHECK(max_abs_diff(twice - w, 2.0 * ad.delta_w()) < 1e-12);
}

TEST_CASE("count_params reproduces the golden totals", "[adapters]") {
    // 12 layers x {q, v} = 24 adapted matrices at hidden dim 768.
    CHECK(count_params(768, 768, 1, 8) == 12288);
    CHECK(24 * count_params(768, 768, 1, 8) == 294912);
    for (std::size_t n : {2, 4, 8}) {
        CHECK(count_params(768, 768, n, 1) == 1536);
        CHECK(24 * count_params(768, 768, n, 1) == 36864);
    }
    CHECK(count_params(768, 768, 2, 4) == 6144);
    CHECK(24 * count_params(768, 768, 2, 4) == 147456);
    REQUIRE_THROWS_AS(count_params(10, 10, 3, 1), std::invalid_argument);
}

TEST_CASE("equivalent_rank is n*r and matches the measured rank",
          "[adapters][property]") {
    CHECK(equivalent_rank(8, 1) == 8);
    CHECK(equivalent_rank(1, 6) == 6);
    GaussianRng rng(113);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = std::vector<std::size_t>{2, 4}[rng.index(2)];
        const std::size_t r = 1 + rng.index(2);
        const std::size_t d = n * (r + 1 + rng.index(3));
        const MeloraAdapter ad = gaussian_filled(d, d, n, r, rng.next_u64());
        const SparseExpansion eq = expand_to_sparse(ad);
        CHECK(rank(matmul(eq.b_eq, eq.a_eq), 1e-8) == equivalent_rank(n, r));
    }
}

TEST_CASE("rank of the scaled update never exceeds n*r", "[adapters][property]") {
    GaussianRng rng(127);
    for (int trial = 0; trial < 20; ++trial) {
        const MeloraAdapter ad = gaussian_filled(24, 24, 4, 2, rng.next_u64());
        CHECK(rank(ad.delta_w(), 1e-8) <= equivalent_rank(4, 2));
    }
}

TEST_CASE("flop_count matches the closed form and the counted oracle",
          "[adapters]") {
    const FlopCount lora_cost = flop_count(768, 8, 1);
    CHECK(lora_cost.serial_ops == 12288);
    CHECK(lora_cost.parallel_critical_path == 12288);

    const FlopCount split = flop_count(768, 8, 4);
    CHECK(split.serial_ops == 3072);
    CHECK(split.parallel_critical_path == 768);

    REQUIRE_THROWS_AS(flop_count(768, 6, 4), std::invalid_argument);

    // Instrumented forward: equivalent rank 8 split over n=4 blocks in d=32.
    GaussianRng rng(131);
    const MeloraAdapter ad = gaussian_filled(32, 32, 4, 2, 555);
    const Matrix x = Matrix::gaussian(32, 1, rng);
    CHECK(counted_adapter_macs(ad, x) == flop_count(32, 8, 4).serial_ops);
}

TEST_CASE("block perturbations stay inside their output block",
          "[adapters][property]") {
    GaussianRng rng(137);
    const MeloraAdapter ad = gaussian_filled(32, 32, 4, 2, 999);
    const Matrix w(32, 32); // zero base isolates the adapter path
    Matrix x = Matrix::gaussian(32, 3, rng);
    const Matrix before = melora_forward(ad, w, x);
    const std::size_t block = 2;
    for (std::size_t r = block * 8; r < (block + 1) * 8; ++r)
        for (std::size_t c = 0; c < 3; ++c) x(r, c) += rng.normal();
    const Matrix after = melora_forward(ad, w, x);
    for (std::size_t r = 0; r < 32; ++r) {
        const bool inside = r >= block * 8 && r < (block + 1) * 8;
        for (std::size_t c = 0; c < 3; ++c) {
            if (!inside) CHECK(before(r, c) == after(r, c));
        }
    }
}

TEST_CASE("inverted dropout zeroes or rescales every entry", "[adapters]") {
    GaussianRng rng(139);
    const Matrix x = Matrix::gaussian(16, 4, rng);
    GaussianRng mask_rng(7);
    const Matrix dropped = inverted_dropout(x, 0.5, mask_rng);
    std::size_t zeros = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = dropped.values()[i];
        if (v == 0.0) {
            ++zeros;
        } else {
            CHECK(std::abs(v - 2.0 * x.values()[i]) < 1e-15);
        }
    }
    CHECK(zeros > 0);
    CHECK(zeros < x.size());

    GaussianRng unused(1);
    CHECK(inverted_dropout(x, 0.0, unused) == x);
}
