// Acceptance suite: one line per criterion, nonzero exit if any fails.
// Every tolerance is pinned here; nothing defers to later calibration.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "melora/analysis.hpp"
#include "melora/harness.hpp"
#include "melora/io.hpp"
#include "melora/losses.hpp"
#include "melora/train.hpp"

using namespace melora;

namespace {

namespace fs = std::filesystem;

struct Criterion {
    std::string name;
    std::function<bool(std::string&)> body;
};

bool check(bool ok, std::string& detail, const std::string& message) {
    if (!ok && detail.empty()) detail = message;
    return ok;
}

// --- 1: parameter-count reproduction -------------------------------------

bool criterion_params(std::string& detail) {
    const auto shapes = load_model_shapes(MELORA_PRESETS_PATH);
    const ModelShape* roberta = find_shape(shapes, "roberta-base-qv");
    const ModelShape* llama = find_shape(shapes, "llama2-7b-qv");
    if (!roberta || !llama) {
        detail = "presets missing";
        return false;
    }
    bool ok = true;
    ok &= check(audit_params(*roberta, AdapterKind::lora, 1, 8) == 294912, detail,
                "roberta lora r=8 != 294912");
    for (std::size_t n : {2, 4, 8}) {
        ok &= check(audit_params(*roberta, AdapterKind::melora, n, 1) == 36864, detail,
                    "roberta melora r=1 != 36864");
    }
    ok &= check(audit_params(*roberta, AdapterKind::melora, 2, 4) == 147456, detail,
                "roberta melora 4x2 != 147456");
    ok &= check(audit_params(*llama, AdapterKind::lora, 1, 64) == 33554432, detail,
                "llama lora r=64 != 33554432");
    ok &= check(audit_params(*llama, AdapterKind::melora, 16, 1) == 524288, detail,
                "llama melora 1x16 != 524288");
    return ok;
}

// --- 2: rank additivity over 200 trials -----------------------------------

bool criterion_rank_additivity(std::string& detail) {
    GaussianRng rng(20240001);
    const std::size_t n_choices[] = {2, 4, 8};
    const std::size_t r_choices[] = {1, 2, 4};
    const std::size_t d_choices[] = {16, 32, 64};
    std::size_t trials = 0;
    while (trials < 200) {
        const std::size_t n = n_choices[rng.index(3)];
        const std::size_t r = r_choices[rng.index(3)];
        const std::size_t d = d_choices[rng.index(3)];
        if (r > d / n) continue; // infeasible block shape
        MeloraAdapter ad = init_melora(d, d, n, r, 16.0, rng.next_u64());
        fill_gaussian(ad, rng);
        const SparseExpansion eq = expand_to_sparse(ad);
        const std::size_t got = rank(matmul(eq.b_eq, eq.a_eq), 1e-8);
        if (got != n * r) {
            detail = "trial " + std::to_string(trials) + ": rank " + std::to_string(got) +
                     " != " + std::to_string(n * r) + " (n=" + std::to_string(n) +
                     ", r=" + std::to_string(r) + ", d=" + std::to_string(d) + ")";
            return false;
        }
        ++trials;
    }
    return true;
}

// --- 3: forward-form equivalence ------------------------------------------

bool criterion_forward_equivalence(std::string& detail) {
    GaussianRng rng(20240002);
    for (std::size_t trial = 0; trial < 500; ++trial) {
        const std::size_t n = std::vector<std::size_t>{1, 2, 4, 8}[rng.index(4)];
        const std::size_t block = 2 + rng.index(7);
        const std::size_t d = n * block;
        const std::size_t r = 1 + rng.index(std::min<std::size_t>(block, 2));
        MeloraAdapter ad = init_melora(d, d, n, r, 16.0, rng.next_u64());
        fill_gaussian(ad, rng);
        const Matrix w = Matrix::gaussian(d, d, rng);
        const Matrix x = Matrix::gaussian(d, 1 + rng.index(5), rng);

        const Matrix concat_form = melora_forward(ad, w, x);
        const SparseExpansion eq = expand_to_sparse(ad);
        const Matrix sparse_form =
            matmul(w, x) + ad.scale() * matmul(eq.b_eq, matmul(eq.a_eq, x));
        const double err = relative_frobenius_diff(concat_form, sparse_form);
        if (!(err < 1e-12)) {
            detail = "trial " + std::to_string(trial) + ": relative error " +
                     std::to_string(err);
            return false;
        }
    }
    // n=1 degeneracy, bitwise.
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t d = 4 + 2 * rng.index(7);
        const std::size_t r = 1 + rng.index(3);
        const std::uint64_t seed = rng.next_u64();
        LoraAdapter lora = init_lora(d, d, r, 16.0, seed);
        MeloraAdapter mel = init_melora(d, d, 1, r, 16.0, seed);
        GaussianRng fa(seed + 9), fb(seed + 9);
        fill_gaussian(lora, fa);
        fill_gaussian(mel, fb);
        const Matrix w = Matrix::gaussian(d, d, rng);
        const Matrix x = Matrix::gaussian(d, 3, rng);
        if (!(lora_forward(lora, w, x) == melora_forward(mel, w, x))) {
            detail = "n=1 ensemble and plain adapter disagree bitwise";
            return false;
        }
    }
    return true;
}

// --- 4: gradient correctness ------------------------------------------------

bool criterion_gradients(std::string& detail) {
    GaussianRng rng(20240003);
    const double h = 1e-5;
    for (std::size_t instance = 0; instance < 50; ++instance) {
        const bool use_melora = instance % 2 == 0;
        const bool use_ce = instance % 4 < 2;
        const std::size_t n = use_melora ? std::vector<std::size_t>{2, 4}[rng.index(2)] : 1;
        const std::size_t block = 2 + rng.index(3); // d <= 16
        const std::size_t d = use_melora ? n * block : 4 + rng.index(13);
        const std::size_t d_out = use_melora ? d : 2 + rng.index(8);
        const std::size_t r = 1 + rng.index(2);
        const std::size_t batch = 1 + rng.index(5);

        AdaptedLinear layer;
        layer.w = Matrix::gaussian(d_out, d, rng);
        if (use_melora) {
            MeloraAdapter ad = init_melora(d, d_out, n, std::min(r, block), 16.0,
                                           rng.next_u64());
            fill_gaussian(ad, rng);
            layer.adapter = std::move(ad);
        } else {
            LoraAdapter ad = init_lora(d, d_out, std::min<std::size_t>(r, d_out), 16.0,
                                       rng.next_u64());
            fill_gaussian(ad, rng);
            layer.adapter = std::move(ad);
        }

        const Matrix x = Matrix::gaussian(d, batch, rng);
        Matrix target;
        std::vector<std::size_t> labels;
        if (use_ce) {
            for (std::size_t j = 0; j < batch; ++j) labels.push_back(rng.index(d_out));
        } else {
            target = Matrix::gaussian(d_out, batch, rng);
        }
        const auto loss_value = [&]() {
            const Matrix pred = layer.forward(x);
            return use_ce ? cross_entropy_loss(pred, labels).value
                          : mse_loss(pred, target).value;
        };
        const Matrix pred = layer.forward(x);
        const LossResult base =
            use_ce ? cross_entropy_loss(pred, labels) : mse_loss(pred, target);
        const Gradients grads = backward(layer, x, base.upstream);

        const std::vector<Matrix*> params = trainable_params(layer);
        const std::vector<const Matrix*> glist = gradient_list(grads);
        for (std::size_t t = 0; t < params.size(); ++t) {
            for (std::size_t i = 0; i < params[t]->size(); ++i) {
                double& entry = params[t]->values()[i];
                const double orig = entry;
                entry = orig + h;
                const double up = loss_value();
                entry = orig - h;
                const double dn = loss_value();
                entry = orig;
                const double fd = (up - dn) / (2.0 * h);
                const double an = glist[t]->values()[i];
                // 1e-6 relative with a 1e-9 absolute floor on the difference
                const double allowed =
                    std::max(1e-9, 1e-6 * std::max(std::abs(fd), std::abs(an)));
                if (!(std::abs(fd - an) <= allowed)) {
                    detail = "instance " + std::to_string(instance) + ": analytic " +
                             std::to_string(an) + " vs fd " + std::to_string(fd);
                    return false;
                }
            }
        }
    }
    return true;
}

// --- 5: serial vs parallel stacking -----------------------------------------

bool criterion_stacking(std::string& detail) {
    bool ok = true;
    const std::size_t full_overlap = serial_stack_rank_demo(4, 2, 32, 1.0, 42);
    const std::size_t no_overlap = serial_stack_rank_demo(4, 2, 32, 0.0, 42);
    const std::size_t diag = parallel_stack_rank(4, 2, 32, 42);
    ok &= check(full_overlap == 2, detail,
                "overlap=1 summed rank " + std::to_string(full_overlap) + " != 2");
    ok &= check(no_overlap == 8, detail,
                "overlap=0 summed rank " + std::to_string(no_overlap) + " != 8");
    ok &= check(diag == 8, detail,
                "block-diagonal rank " + std::to_string(diag) + " != 8");
    return ok;
}

// --- 6: recovery experiment ---------------------------------------------------

RecoveryConfig recovery_base(std::uint64_t seed) {
    RecoveryConfig cfg;
    cfg.d = 64;
    cfg.teacher_rank = 4;
    cfg.block_compatible = true;
    cfg.adapter.kind = AdapterKind::melora;
    cfg.adapter.r = 1;
    cfg.lr = 0.02;
    cfg.warmup = 100;
    cfg.steps = 5000;
    cfg.batch = 32;
    cfg.test_batch = 1024;
    cfg.threshold = 0.1;
    cfg.seed = seed;
    return cfg;
}

bool criterion_recovery(std::string& detail) {
    RecoveryConfig covered = recovery_base(61);
    covered.adapter.n = 4; // equivalent rank 4 == teacher rank
    const RecoveryReport full = run_recovery(covered);
    if (!(full.test_mse < 1e-4)) {
        detail = "equivalent rank 4: test mse " + std::to_string(full.test_mse) +
                 " >= 1e-4";
        return false;
    }

    RecoveryConfig starved = recovery_base(61);
    starved.adapter.n = 2; // equivalent rank 2 < teacher rank 4, same budget
    const RecoveryReport under = run_recovery(starved);
    if (!(under.ey_floor > 1e-2)) {
        detail = "reported floor " + std::to_string(under.ey_floor) +
                 " unexpectedly small";
        return false;
    }
    if (!(under.test_mse > 1e-2)) {
        detail = "under-ranked mse " + std::to_string(under.test_mse) + " <= 1e-2";
        return false;
    }
    if (!(under.test_mse >= under.ey_floor)) {
        detail = "under-ranked mse " + std::to_string(under.test_mse) +
                 " fell below the spectral floor " + std::to_string(under.ey_floor);
        return false;
    }
    return true;
}

// --- 7: singular-value count ordering (direction only) ------------------------

bool criterion_sv_ordering(std::string& detail) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        RecoveryConfig base;
        base.d = 64;
        base.teacher_rank = 8;
        base.block_compatible = true;
        base.lr = 0.02;
        base.warmup = 50;
        base.steps = 1500;
        base.batch = 32;
        base.test_batch = 256;
        base.threshold = 0.1;
        base.seed = seed;

        RecoveryConfig ensemble = base;
        ensemble.adapter.kind = AdapterKind::melora;
        ensemble.adapter.n = 8;
        ensemble.adapter.r = 1;

        RecoveryConfig plain = base;
        plain.adapter.kind = AdapterKind::lora;
        plain.adapter.n = 1;
        plain.adapter.r = 1; // equal parameter budget

        const RecoveryReport re = run_recovery(ensemble);
        const RecoveryReport rp = run_recovery(plain);
        if (re.params != rp.params) {
            detail = "budgets differ: " + std::to_string(re.params) + " vs " +
                     std::to_string(rp.params);
            return false;
        }
        if (!(re.profile.count_above > rp.profile.count_above)) {
            detail = "seed " + std::to_string(seed) + ": ensemble count " +
                     std::to_string(re.profile.count_above) + " <= plain count " +
                     std::to_string(rp.profile.count_above);
            return false;
        }
    }
    return true;
}

// --- 8: sweep determinism through the CLI --------------------------------------

bool criterion_determinism(std::string& detail) {
    const fs::path dir = fs::temp_directory_path() / "melora-acceptance";
    fs::create_directories(dir);
    const fs::path cfg = dir / "sweep.cfg";
    write_file_atomic(cfg,
                      "task = recovery\nmode = melora\nn = 1,2,4\nr_mini = 1\n"
                      "seeds = 1,2\nd = 32\nteacher_rank = 4\nsteps = 150\n"
                      "warmup = 20\nbatch = 16\ntest_batch = 128\n");
    const fs::path out1 = dir / "run1.csv";
    const fs::path out2 = dir / "run2.csv";
    for (const fs::path& out : {out1, out2}) {
        const std::string cmd = std::string(MELORA_CLI_PATH) + " sweep --config " +
                                cfg.string() + " --out " + out.string() + " > " +
                                (dir / "sweep.log").string() + " 2>&1";
        const int status = std::system(cmd.c_str());
        if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
            detail = "sweep command failed";
            return false;
        }
    }
    const std::string b1 = read_file_bytes(out1);
    const std::string b2 = read_file_bytes(out2);
    if (b1.empty() || b1 != b2) {
        detail = "sweep CSVs differ across reruns";
        return false;
    }
    return true;
}

} // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {"parameter-count-reproduction", criterion_params},
        {"rank-additivity-200-trials", criterion_rank_additivity},
        {"forward-form-equivalence", criterion_forward_equivalence},
        {"gradient-finite-difference", criterion_gradients},
        {"serial-vs-parallel-stacking", criterion_stacking},
        {"recovery-rank-coverage", criterion_recovery},
        {"sv-count-ordering", criterion_sv_ordering},
        {"sweep-determinism", criterion_determinism},
    };

    std::size_t failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        std::string detail;
        bool ok = false;
        try {
            ok = criteria[i].body(detail);
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("criterion-%zu %-32s %s (%.2f s)%s%s\n", i + 1,
                    criteria[i].name.c_str(), ok ? "PASS" : "FAIL", secs,
                    detail.empty() ? "" : " -- ", detail.c_str());
        std::fflush(stdout);
        if (!ok) ++failures;
    }
    std::printf("acceptance: %zu/%zu criteria passed\n", criteria.size() - failures,
                criteria.size());
    return failures == 0 ? 0 : 1;
}
