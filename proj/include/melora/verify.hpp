#pragma once

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "melora/analysis.hpp"
#include "melora/checkpoint.hpp"
#include "melora/harness.hpp"
#include "melora/train.hpp"

namespace melora {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct VerifyOptions {
    std::uint64_t seed = 42;
    std::string filter;   // substring over check names; empty runs all
    std::string sabotage; // fault-injection key, e.g. "rank-additivity"
};

namespace detail {

inline CheckResult check_pass(std::string name, std::string detail = "") {
    return CheckResult{std::move(name), true, std::move(detail)};
}

inline CheckResult check_fail(std::string name, std::string detail) {
    return CheckResult{std::move(name), false, std::move(detail)};
}

inline Matrix random_low_rank(std::size_t rows, std::size_t cols, std::size_t r,
                              GaussianRng& rng) {
    return matmul(Matrix::gaussian(rows, r, rng), Matrix::gaussian(r, cols, rng));
}

inline MeloraAdapter random_filled_melora(std::size_t d_in, std::size_t d_out,
                                          std::size_t n, std::size_t r, double alpha,
                                          GaussianRng& rng) {
    MeloraAdapter ad = init_melora(d_in, d_out, n, r, alpha, rng.next_u64());
    fill_gaussian(ad, rng);
    return ad;
}

} // namespace detail

/// The named invariant suite behind `verify`. Checks are small seeded
/// property trials; `sabotage` flips a deliberate fault into the matching
/// check so the failure path stays exercised end to end.
inline std::vector<CheckResult> run_verify(const VerifyOptions& opts) {
    using detail::check_fail;
    using detail::check_pass;

    std::vector<std::pair<std::string, std::function<CheckResult(const std::string&)>>>
        registry;

    // Rank never exceeds the sum under addition.
    registry.emplace_back("eq2-rank-subadditivity", [&](const std::string& name) {
        GaussianRng rng(derive_seed(opts.seed, 1001));
        for (int trial = 0; trial < 40; ++trial) {
            const std::size_t d = 8 + rng.index(17);
            const std::size_t r1 = 1 + rng.index(3);
            const std::size_t r2 = 1 + rng.index(3);
            const Matrix m1 = detail::random_low_rank(d, d, r1, rng);
            const Matrix m2 = detail::random_low_rank(d, d, r2, rng);
            const std::size_t lhs = rank(m1 + m2, 1e-8);
            const std::size_t bound = rank(m1, 1e-8) + rank(m2, 1e-8);
            if (lhs > bound) {
                return check_fail(name, "rank(M1+M2)=" + std::to_string(lhs) + " > " +
                                            std::to_string(bound));
            }
        }
        return check_pass(name, "40 trials");
    });

    // Concatenation keeps rank between max and sum; M2 = M1 makes the lower
    // bound tight.
    registry.emplace_back("eq3-concat-bounds", [&](const std::string& name) {
        GaussianRng rng(derive_seed(opts.seed, 1002));
        for (int trial = 0; trial < 40; ++trial) {
            const std::size_t d = 8 + rng.index(17);
            const std::size_t r1 = 1 + rng.index(3);
            const Matrix m1 = detail::random_low_rank(d, d, r1, rng);
            const Matrix m2 = (trial % 4 == 0)
                                  ? m1
                                  : detail::random_low_rank(d, d, 1 + rng.index(3), rng);
            const std::size_t rc = rank(hconcat(m1, m2), 1e-8);
            const std::size_t ra = rank(m1, 1e-8);
            const std::size_t rb = rank(m2, 1e-8);
            if (rc < std::max(ra, rb) || rc > ra + rb) {
                return check_fail(name, "rank(concat)=" + std::to_string(rc) +
                                            " outside [" +
                                            std::to_string(std::max(ra, rb)) + "," +
                                            std::to_string(ra + rb) + "]");
            }
            if (trial % 4 == 0 && rc != ra) {
                return check_fail(name, "identical halves should hit the lower bound");
            }
        }
        return check_pass(name, "40 trials incl. tight lower bound");
    });

    // Diagonal concatenation adds ranks exactly.
    registry.emplace_back("eq4-diag-additivity", [&](const std::string& name) {
        GaussianRng rng(derive_seed(opts.seed, 1003));
        const bool sabotaged = opts.sabotage == "rank-additivity";
        for (int trial = 0; trial < 50; ++trial) {
            const std::size_t count = 2 + rng.index(3);
            std::vector<Matrix> blocks;
            std::size_t expected = 0;
            for (std::size_t i = 0; i < count; ++i) {
                const std::size_t r = 1 + rng.index(2);
                blocks.push_back(detail::random_low_rank(6, 5, r, rng));
                expected += rank(blocks.back(), 1e-8);
            }
            Matrix diag = block_diag(blocks);
            if (sabotaged) {
                // Fault hook: leak mass across blocks so additivity breaks.
                diag(0, diag.cols() - 1) += 0.5;
                diag(diag.rows() - 1, 0) += 0.5;
            }
            const std::size_t got = rank(diag, 1e-8);
            if (got != expected) {
                return check_fail(name, "rank(diag)=" + std::to_string(got) +
                                            " != sum of block ranks " +
                                            std::to_string(expected));
            }
        }
        return check_pass(name, "50 trials");
    });

    registry.emplace_back("svd-reconstruction", [&](const std::string& name) {
        GaussianRng rng(derive_seed(opts.seed, 1004));
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t rows = 2 + rng.index(63);
            const std::size_t cols = 2 + rng.index(63);
            const Matrix m = Matrix::gaussian(rows, cols, rng);
            const double err = relative_frobenius_diff(svd_reconstruct(svd(m)), m);
            if (!(err < 1e-8)) {
                return check_fail(name, "relative error " + std::to_string(err) +
                                            " for " + shape_str(m));
            }
        }
        return check_pass(name, "20 random shapes up to 64x64");
    });

    // The three algebraic forms of the ensemble forward agree.
    registry.emplace_back("eq5-form-equivalence", [&](const std::string& name) {
        GaussianRng rng(derive_seed(opts.seed, 1005));
        for (int trial = 0; trial < 50; ++trial) {
            const std::size_t n = std::vector<std::size_t>{1, 2, 4}[rng.index(3)];
            const std::size_t d = n * (2 + rng.index(6));
            const std::size_t r = 1 + rng.index(2);
            MeloraAdapter ad = detail::random_filled_melora(d, d, n, r, 16.0, rng);
            const Matrix w = Matrix::gaussian(d, d, rng);
            const Matrix x = Matrix::gaussian(d, 1 + rng.index(4), rng);

            const Matrix concat_form = melora_forward(ad, w, x);
            const SparseExpansion eq = expand_to_sparse(ad);
            const Matrix sparse_form =
                matmul(w, x) + ad.scale() * matmul(eq.b_eq, matmul(eq.a_eq, x));
            std::vector<Matrix> prods;
            for (const LoraAdapter& mini : ad.minis)
                prods.push_back(matmul(mini.b, mini.a));
            const Matrix diag_form =
                matmul(w, x) + ad.scale() * matmul(block_diag(prods), x);

            const double e1 = relative_frobenius_diff(concat_form, sparse_form);
            const double e2 = relative_frobenius_diff(concat_form, diag_form);
            if (!(e1 < 1e-12 && e2 < 1e-12)) {
                return check_fail(name, "forms disagree: " + std::to_string(e1) + ", " +
                                            std::to_string(e2));
            }
        }
        return check_pass(name, "50 random adapters");
    });

    // n=1 ensembles degenerate to the plain adapter, bit for bit.
    registry.emplace_back("eq5-n1-degeneracy", [&](const std::string& name) {
        GaussianRng rng(derive_seed(opts.seed, 1006));
        for (int trial = 0; trial < 10; ++trial) {
            const std::size_t d = 4 + rng.index(13);
            const std::size_t r = 1 + rng.index(3);
            const std::uint64_t seed = rng.next_u64();
            const LoraAdapter lora = init_lora(d, d, r, 16.0, seed);
            const MeloraAdapter mel = init_melora(d, d, 1, r, 16.0, seed);
            if (!(lora.a == mel.minis[0].a)) {
                return check_fail(name, "n=1 init differs from plain init");
            }
            const Matrix w = Matrix::gaussian(d, d, rng);
            const Matrix x = Matrix::gaussian(d, 3, rng);
            if (!(lora_forward(lora, w, x) == melora_forward(mel, w, x))) {
                return check_fail(name, "n=1 forward differs bitwise");
            }
        }
        return check_pass(name, "10 seeds, bitwise");
    });

    registry.emplace_back("rank-ceiling", [&](const std::string& name) {
        GaussianRng rng(derive_seed(opts.seed, 1007));
        for (int trial = 0; trial < 30; ++trial) {
            const std::size_t n = std::vector<std::size_t>{2, 4}[rng.index(2)];
            const std::size_t d = n * (3 + rng.index(5));
            const std::size_t r = 1 + rng.index(2);
            MeloraAdapter ad = detail::random_filled_melora(d, d, n, r, 16.0, rng);
            const std::size_t got = rank(ad.delta_w(), 1e-8);
            if (got != equivalent_rank(n, r)) {
                return check_fail(name, "rank " + std::to_string(got) + " != n*r " +
                                            std::to_string(equivalent_rank(n, r)));
            }
        }
        return check_pass(name, "30 Gaussian fills hit n*r exactly");
    });

    registry.emplace_back("zero-init-noop", [&](const std::string& name) {
        GaussianRng rng(derive_seed(opts.seed, 1008));
        for (int trial = 0; trial < 10; ++trial) {
            const std::size_t d = 8 + 2 * rng.index(9);
            const Matrix w = Matrix::gaussian(d, d, rng);
            const Matrix x = Matrix::gaussian(d, 4, rng);
            const Matrix wx = matmul(w, x);
            const LoraAdapter lora = init_lora(d, d, 2, 16.0, rng.next_u64());
            const MeloraAdapter mel = init_melora(d, d, 2, 1, 16.0, rng.next_u64());
            if (!(lora_forward(lora, w, x) == wx) || !(melora_forward(mel, w, x) == wx)) {
                return check_fail(name, "fresh adapter changed the forward pass");
            }
        }
        return check_pass(name, "exact no-op at init");
    });

    // Perturbing one input block moves only the matching output block.
    registry.emplace_back("block-locality", [&](const std::string& name) {
        GaussianRng rng(derive_seed(opts.seed, 1009));
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t n = 4;
            const std::size_t d = 32;
            MeloraAdapter ad = detail::random_filled_melora(d, d, n, 2, 16.0, rng);
            const Matrix w(d, d); // zero base isolates the adapter contribution
            Matrix x = Matrix::gaussian(d, 3, rng);
            const Matrix before = melora_forward(ad, w, x);
            const std::size_t block = rng.index(n);
            for (std::size_t r = block * ad.block_in(); r < (block + 1) * ad.block_in(); ++r)
                for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) += rng.normal();
            const Matrix after = melora_forward(ad, w, x);
            for (std::size_t r = 0; r < d; ++r) {
                const bool inside = r >= block * ad.block_out() &&
                                    r < (block + 1) * ad.block_out();
                for (std::size_t c = 0; c < x.cols(); ++c) {
                    if (!inside && before(r, c) != after(r, c)) {
                        return check_fail(name, "output row " + std::to_string(r) +
                                                    " moved outside block " +
                                                    std::to_string(block));
                    }
                }
            }
        }
        return check_pass(name, "20 block perturbations");
    });

    registry.emplace_back("alpha-homogeneity", [&](const std::string& name) {
        GaussianRng rng(derive_seed(opts.seed, 1010));
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t d = 16;
            MeloraAdapter ad = detail::random_filled_melora(d, d, 2, 2, 8.0, rng);
            MeloraAdapter doubled = ad;
            doubled.alpha = 2.0 * ad.alpha;
            for (LoraAdapter& mini : doubled.minis) mini.alpha = doubled.alpha;
            const Matrix w = Matrix::gaussian(d, d, rng);
            const Matrix x = Matrix::gaussian(d, 3, rng);
            const Matrix wx = matmul(w, x);
            const Matrix c1 = melora_forward(ad, w, x) - wx;
            const Matrix c2 = melora_forward(doubled, w, x) - wx;
            if (!(relative_frobenius_diff(2.0 * c1, c2) < 1e-12)) {
                return check_fail(name, "contribution not linear in alpha");
            }
        }
        return check_pass(name, "20 trials");
    });

    registry.emplace_back("grad-finite-difference", [&](const std::string& name) {
        GaussianRng rng(derive_seed(opts.seed, 1011));
        const double h = 1e-5;
        for (int trial = 0; trial < 6; ++trial) {
            const std::size_t d = 8;
            AdaptedLinear layer{Matrix::gaussian(d, d, rng),
                                detail::random_filled_melora(d, d, 2, 1, 16.0, rng)};
            const Matrix x = Matrix::gaussian(d, 3, rng);
            const Matrix target = Matrix::gaussian(d, 3, rng);
            const LossResult base = mse_loss(layer.forward(x), target);
            const Gradients grads = backward(layer, x, base.upstream);
            const std::vector<Matrix*> params = trainable_params(layer);
            const std::vector<const Matrix*> glist = gradient_list(grads);
            for (std::size_t t = 0; t < params.size(); ++t) {
                for (std::size_t i = 0; i < params[t]->size(); ++i) {
                    double& entry = params[t]->values()[i];
                    const double orig = entry;
                    entry = orig + h;
                    const double up = mse_loss(layer.forward(x), target).value;
                    entry = orig - h;
                    const double dn = mse_loss(layer.forward(x), target).value;
                    entry = orig;
                    const double fd = (up - dn) / (2.0 * h);
                    const double an = glist[t]->values()[i];
                    const double allowed =
                        std::max(1e-9, 1e-6 * std::max(std::abs(fd), std::abs(an)));
                    if (!(std::abs(fd - an) <= allowed)) {
                        return check_fail(name, "entry mismatch: analytic " +
                                                    std::to_string(an) + " vs fd " +
                                                    std::to_string(fd));
                    }
                }
            }
        }
        return check_pass(name, "6 instances, every entry");
    });

    registry.emplace_back("adamw-first-step", [&](const std::string& name) {
        Matrix p(2, 2, 1.0);
        Matrix g = Matrix::from_rows({{0.3, -0.7}, {1.5, -0.1}});
        AdamW opt;
        opt.step({&p}, {&g}, 0.01);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double moved = 1.0 - p.values()[i];
            const double expect = 0.01 * (g.values()[i] > 0 ? 1.0 : -1.0);
            if (std::abs(moved - expect) > 1e-6) {
                return check_fail(name, "first step is not ~lr*sign(grad)");
            }
        }
        return check_pass(name);
    });

    registry.emplace_back("schedule-shape", [&](const std::string& name) {
        const LrSchedule s(0.5, 10, 100);
        if (s.at(0) != 0.0 || std::abs(s.at(10) - 0.5) > 1e-15 || s.at(100) != 0.0) {
            return check_fail(name, "endpoint values wrong");
        }
        std::size_t peaks = 0;
        for (std::size_t t = 1; t + 1 <= 100; ++t) {
            if (s.at(t) > s.at(t - 1) && s.at(t) >= s.at(t + 1)) ++peaks;
            if (s.at(t) < 0.0) return check_fail(name, "negative lr");
        }
        if (peaks != 1) return check_fail(name, std::to_string(peaks) + " peaks");
        return check_pass(name);
    });

    registry.emplace_back("frozen-base", [&](const std::string& name) {
        GaussianRng rng(derive_seed(opts.seed, 1012));
        const std::size_t d = 16;
        AdaptedLinear layer{Matrix::gaussian(d, d, rng),
                            init_melora(d, d, 2, 1, 16.0, rng.next_u64())};
        const Matrix w_before = layer.w;
        const Matrix teacher = Matrix::gaussian(d, d, rng);
        TrainOptions o;
        o.steps = 20;
        o.base_lr = 0.01;
        o.seed = derive_seed(opts.seed, 1013);
        train(layer,
              [&](std::size_t, GaussianRng& r) {
                  Batch b;
                  b.x = Matrix::gaussian(d, 4, r);
                  b.target = matmul(teacher, b.x);
                  return b;
              },
              o);
        if (!(layer.w == w_before)) return check_fail(name, "base weight changed");
        return check_pass(name, "20 steps, base bit-identical");
    });

    registry.emplace_back("param-count-constancy", [&](const std::string& name) {
        for (std::size_t r : {1, 2, 4}) {
            const std::uint64_t ref = count_params(768, 768, 1, r);
            for (std::size_t n : {2, 4, 8}) {
                if (count_params(768, 768, n, r) != ref) {
                    return check_fail(name, "params vary with n at r=" + std::to_string(r));
                }
            }
        }
        return check_pass(name, "constant in n");
    });

    registry.emplace_back("checkpoint-roundtrip", [&](const std::string& name) {
        GaussianRng rng(derive_seed(opts.seed, 1014));
        MeloraAdapter ad = detail::random_filled_melora(16, 8, 2, 2, 16.0, rng);
        const auto path = std::filesystem::temp_directory_path() /
                          ("melora-verify-" + std::to_string(rng.next_u64()) + ".ckpt");
        save_checkpoint(path, ad, opts.seed);
        const Checkpoint ck = load_checkpoint(path);
        std::filesystem::remove(path);
        const auto* loaded = std::get_if<MeloraAdapter>(&ck.adapter);
        if (!loaded) return check_fail(name, "mode changed across roundtrip");
        for (std::size_t i = 0; i < ad.n; ++i) {
            if (!(loaded->minis[i].a == ad.minis[i].a) ||
                !(loaded->minis[i].b == ad.minis[i].b)) {
                return check_fail(name, "entries not bit-identical");
            }
        }
        return check_pass(name, "bit-exact");
    });

    registry.emplace_back("serial-stack-overlap", [&](const std::string& name) {
        std::size_t prev = SIZE_MAX;
        for (double overlap : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            const std::size_t r = serial_stack_rank_demo(3, 4, 32, overlap, opts.seed);
            if (r > prev) {
                return check_fail(name, "rank rose with overlap (" + std::to_string(r) +
                                            " after " + std::to_string(prev) + ")");
            }
            prev = r;
        }
        if (serial_stack_rank_demo(4, 2, 32, 1.0, opts.seed) != 2) {
            return check_fail(name, "full overlap should pin rank at r");
        }
        if (parallel_stack_rank(4, 2, 32, opts.seed) != 8) {
            return check_fail(name, "block-diagonal budget should reach k*r");
        }
        return check_pass(name, "monotone in overlap; endpoints exact");
    });

    std::vector<CheckResult> results;
    for (auto& [name, fn] : registry) {
        if (!opts.filter.empty() && name.find(opts.filter) == std::string::npos) continue;
        results.push_back(fn(name));
    }
    return results;
}

inline std::string verify_csv(const std::vector<CheckResult>& results) {
    std::string out = "check,outcome,detail\n";
    for (const CheckResult& r : results) {
        std::string detail = r.detail;
        for (char& c : detail)
            if (c == ',') c = ';';
        out += r.name + "," + (r.passed ? "pass" : "fail") + "," + detail + "\n";
    }
    return out;
}

} // namespace melora
