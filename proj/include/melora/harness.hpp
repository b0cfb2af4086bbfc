#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <future>
#include <numeric>
#include <string>
#include <vector>

#include "melora/analysis.hpp"
#include "melora/config.hpp"
#include "melora/train.hpp"

namespace melora {

/// Which adapter to attach and how.
struct AdapterSpec {
    AdapterKind kind = AdapterKind::melora;
    std::size_t n = 1;  // block count (ignored for plain lora)
    std::size_t r = 1;  // rank per mini (or the lora rank)
    double alpha = 16.0;
    double dropout = 0.0;
};

inline std::variant<LoraAdapter, MeloraAdapter> make_adapter(std::size_t d_in,
                                                             std::size_t d_out,
                                                             const AdapterSpec& s,
                                                             std::uint64_t seed) {
    if (s.kind == AdapterKind::lora) {
        return init_lora(d_in, d_out, s.r, s.alpha, seed, s.dropout);
    }
    return init_melora(d_in, d_out, s.n, s.r, s.alpha, seed, s.dropout);
}

inline std::size_t spec_equivalent_rank(const AdapterSpec& s) {
    return s.kind == AdapterKind::lora ? s.r : equivalent_rank(s.n, s.r);
}

inline std::uint64_t spec_param_count(std::size_t d_in, std::size_t d_out,
                                      const AdapterSpec& s) {
    return count_params(d_in, d_out, s.kind == AdapterKind::lora ? 1 : s.n, s.r);
}

inline RankProfile adapter_rank_profile(const std::variant<LoraAdapter, MeloraAdapter>& ad,
                                        double threshold, bool apply_scale = true) {
    return std::visit(
        [&](const auto& a) { return rank_profile(a, threshold, apply_scale); }, ad);
}

// ---------------------------------------------------------------------------
// Teacher-student recovery: the target map is the frozen base plus a known
// low-rank update; success means the adapter reproduces it on fresh inputs.
// ---------------------------------------------------------------------------

struct RecoveryTask {
    Matrix base;    // frozen W0, d x d
    Matrix delta;   // true update, rank k
    Matrix teacher; // base + delta
    std::vector<double> delta_singular_values; // via the SVD oracle
};

namespace detail {

/// Descending singular value ladder in [1.5, 3.0]; distinct values keep
/// best-approximation gaps unambiguous.
inline double sigma_ladder(std::size_t i, std::size_t k) {
    if (k <= 1) return 3.0;
    return 3.0 - 1.5 * static_cast<double>(i) / static_cast<double>(k - 1);
}

inline Matrix orthonormal_columns(std::size_t rows, std::size_t cols, GaussianRng& rng) {
    return svd(Matrix::gaussian(rows, cols, rng)).left_vectors;
}

} // namespace detail

/// With block_compatible, the update is block-diagonal over rank_k blocks
/// (one rank-1 block each), so a block ensemble with matching split can
/// represent it exactly. Otherwise the update is a dense rank-k map.
inline RecoveryTask make_recovery_task(std::size_t d, std::size_t rank_k,
                                       bool block_compatible, std::uint64_t seed) {
    GaussianRng rng(seed);
    RecoveryTask task;
    task.base = Matrix::gaussian(d, d, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    if (rank_k == 0) {
        task.delta = Matrix(d, d);
    } else if (block_compatible) {
        if (d % rank_k != 0) {
            throw std::invalid_argument("make_recovery_task: d=" + std::to_string(d) +
                                        " not divisible by rank k=" +
                                        std::to_string(rank_k));
        }
        const std::size_t bs = d / rank_k;
        task.delta = Matrix(d, d);
        for (std::size_t i = 0; i < rank_k; ++i) {
            Matrix u = Matrix::gaussian(bs, 1, rng);
            Matrix v = Matrix::gaussian(bs, 1, rng);
            u *= 1.0 / u.frobenius_norm();
            v *= 1.0 / v.frobenius_norm();
            const double sigma = detail::sigma_ladder(i, rank_k);
            for (std::size_t r = 0; r < bs; ++r)
                for (std::size_t c = 0; c < bs; ++c)
                    task.delta(i * bs + r, i * bs + c) = sigma * u(r, 0) * v(c, 0);
        }
    } else {
        const Matrix u = detail::orthonormal_columns(d, rank_k, rng);
        const Matrix v = detail::orthonormal_columns(d, rank_k, rng);
        Matrix scaled = u;
        for (std::size_t j = 0; j < rank_k; ++j)
            for (std::size_t i = 0; i < d; ++i)
                scaled(i, j) *= detail::sigma_ladder(j, rank_k);
        task.delta = matmul(scaled, v.transposed());
    }
    task.teacher = task.base + task.delta;
    if (rank_k > 0) task.delta_singular_values = svd(task.delta).singular_values;
    return task;
}

/// Expected-MSE floor for approximating a map whose update has the given
/// singular values by any map of rank <= keep, over unit Gaussian inputs:
/// sum of squared discarded singular values divided by the output dimension.
inline double eckart_young_mse_floor(const std::vector<double>& singular_values,
                                     std::size_t keep, std::size_t d_out) {
    double tail = 0.0;
    for (std::size_t i = keep; i < singular_values.size(); ++i)
        tail += singular_values[i] * singular_values[i];
    return tail / static_cast<double>(d_out);
}

struct RecoveryConfig {
    std::size_t d = 64;
    std::size_t teacher_rank = 4;
    bool block_compatible = true;
    AdapterSpec adapter;
    double lr = 0.02;
    std::size_t warmup = 100;
    std::size_t steps = 2000;
    std::size_t batch = 32;
    std::size_t test_batch = 1024;
    double weight_decay = 0.0;
    double threshold = 0.1;
    std::uint64_t seed = 42;
};

struct RecoveryReport {
    double final_train_loss = 0.0;
    double test_mse = 0.0;
    RankProfile profile;
    std::uint64_t params = 0;
    std::size_t equiv_rank = 0;
    double ey_floor = 0.0; // floor at the adapter's equivalent rank
    std::vector<double> teacher_singular_values;
    TrainReport train_report;
    std::variant<LoraAdapter, MeloraAdapter> trained_adapter;
};

inline RecoveryReport run_recovery(const RecoveryConfig& cfg) {
    const RecoveryTask task =
        make_recovery_task(cfg.d, cfg.teacher_rank, cfg.block_compatible,
                           derive_seed(cfg.seed, 11));
    AdaptedLinear layer{task.base,
                        make_adapter(cfg.d, cfg.d, cfg.adapter, derive_seed(cfg.seed, 13))};

    const BatchFn gen = [&](std::size_t, GaussianRng& rng) {
        Batch b;
        b.x = Matrix::gaussian(cfg.d, cfg.batch, rng);
        b.target = matmul(task.teacher, b.x);
        return b;
    };
    TrainOptions opts;
    opts.steps = cfg.steps;
    opts.base_lr = cfg.lr;
    opts.warmup_steps = cfg.warmup;
    opts.optimizer.weight_decay = cfg.weight_decay;
    opts.loss = LossKind::mse;
    opts.seed = derive_seed(cfg.seed, 17);

    RecoveryReport report;
    report.train_report = train(layer, gen, opts);
    report.final_train_loss = report.train_report.final_loss;

    GaussianRng test_rng(derive_seed(cfg.seed, 19));
    const Matrix x_test = Matrix::gaussian(cfg.d, cfg.test_batch, test_rng);
    report.test_mse =
        mse_loss(layer.forward(x_test), matmul(task.teacher, x_test)).value;

    report.profile = adapter_rank_profile(layer.adapter, cfg.threshold);
    report.params = spec_param_count(cfg.d, cfg.d, cfg.adapter);
    report.equiv_rank = spec_equivalent_rank(cfg.adapter);
    report.teacher_singular_values = task.delta_singular_values;
    report.ey_floor =
        eckart_young_mse_floor(task.delta_singular_values, report.equiv_rank, cfg.d);
    report.trained_adapter = std::move(layer.adapter);
    return report;
}

// ---------------------------------------------------------------------------
// Synthetic classification: labels come from the argmax of a teacher map with
// a low-rank offset; exercises cross-entropy and rectangular bases.
// ---------------------------------------------------------------------------

struct ClassifyConfig {
    std::size_t d = 64;
    std::size_t classes = 16;
    std::size_t teacher_rank = 4;
    AdapterSpec adapter;
    double lr = 0.02;
    std::size_t warmup = 50;
    std::size_t steps = 500;
    std::size_t batch = 32;
    std::size_t test_batch = 1024;
    double weight_decay = 0.0;
    double threshold = 0.1;
    std::uint64_t seed = 42;
};

struct ClassifyReport {
    double accuracy = 0.0;
    double baseline_accuracy = 0.0;
    RankProfile profile;
    std::uint64_t params = 0;
    std::size_t equiv_rank = 0;
    TrainReport train_report;
    std::variant<LoraAdapter, MeloraAdapter> trained_adapter;
};

namespace detail {

inline std::vector<std::size_t> argmax_columns(const Matrix& m) {
    std::vector<std::size_t> out(m.cols());
    for (std::size_t j = 0; j < m.cols(); ++j) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < m.rows(); ++i)
            if (m(i, j) > m(best, j)) best = i;
        out[j] = best;
    }
    return out;
}

inline double label_accuracy(const std::vector<std::size_t>& pred,
                             const std::vector<std::size_t>& truth) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == truth[i];
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

} // namespace detail

inline ClassifyReport run_classify(const ClassifyConfig& cfg) {
    GaussianRng init_rng(derive_seed(cfg.seed, 21));
    const Matrix base = Matrix::gaussian(cfg.classes, cfg.d, init_rng,
                                         1.0 / std::sqrt(static_cast<double>(cfg.d)));
    const Matrix u = detail::orthonormal_columns(cfg.classes, cfg.teacher_rank, init_rng);
    const Matrix v = detail::orthonormal_columns(cfg.d, cfg.teacher_rank, init_rng);
    Matrix scaled = u;
    for (std::size_t j = 0; j < cfg.teacher_rank; ++j)
        for (std::size_t i = 0; i < cfg.classes; ++i)
            scaled(i, j) *= detail::sigma_ladder(j, cfg.teacher_rank);
    const Matrix teacher = base + matmul(scaled, v.transposed());

    AdaptedLinear layer{base, make_adapter(cfg.d, cfg.classes, cfg.adapter,
                                           derive_seed(cfg.seed, 23))};

    GaussianRng test_rng(derive_seed(cfg.seed, 29));
    const Matrix x_test = Matrix::gaussian(cfg.d, cfg.test_batch, test_rng);
    const std::vector<std::size_t> y_test =
        detail::argmax_columns(matmul(teacher, x_test));

    ClassifyReport report;
    report.baseline_accuracy = detail::label_accuracy(
        detail::argmax_columns(layer.forward(x_test)), y_test);

    const BatchFn gen = [&](std::size_t, GaussianRng& rng) {
        Batch b;
        b.x = Matrix::gaussian(cfg.d, cfg.batch, rng);
        b.labels = detail::argmax_columns(matmul(teacher, b.x));
        return b;
    };
    TrainOptions opts;
    opts.steps = cfg.steps;
    opts.base_lr = cfg.lr;
    opts.warmup_steps = cfg.warmup;
    opts.optimizer.weight_decay = cfg.weight_decay;
    opts.loss = LossKind::cross_entropy;
    opts.seed = derive_seed(cfg.seed, 31);
    report.train_report = train(layer, gen, opts);

    report.accuracy = detail::label_accuracy(
        detail::argmax_columns(layer.forward(x_test)), y_test);
    report.profile = adapter_rank_profile(layer.adapter, cfg.threshold);
    report.params = spec_param_count(cfg.d, cfg.classes, cfg.adapter);
    report.equiv_rank = spec_equivalent_rank(cfg.adapter);
    report.trained_adapter = std::move(layer.adapter);
    return report;
}

// ---------------------------------------------------------------------------
// Single-head attention on an associative-recall task. All projections are
// frozen; adapters attach to the query and value projections only.
// ---------------------------------------------------------------------------

struct AttentionConfig {
    std::size_t d = 32;
    std::size_t vocab = 16; // first half keys, second half values
    std::size_t seq = 8;    // seq-1 key/value pairs plus one query position
    AdapterSpec adapter;
    double lr = 0.02;
    std::size_t warmup = 50;
    std::size_t steps = 500;
    std::size_t batch = 32;
    std::size_t test_batch = 256;
    double weight_decay = 0.0;
    double threshold = 0.1;
    std::uint64_t seed = 42;
};

struct AttentionReport {
    double accuracy = 0.0;
    double baseline_accuracy = 0.0;
    double final_loss = 0.0;
    RankProfile q_profile;
    RankProfile v_profile;
    std::uint64_t params = 0;     // q and v adapters combined
    std::size_t equiv_rank = 0;   // per adapted matrix
    TrainReport train_report;
    std::variant<LoraAdapter, MeloraAdapter> trained_q;
    std::variant<LoraAdapter, MeloraAdapter> trained_v;
};

namespace detail {

struct AttentionModel {
    Matrix key_embed;   // d x (vocab/2), frozen
    Matrix val_embed;   // d x (vocab/2), frozen
    Matrix wk, wo;      // d x d, frozen
    Matrix unembed;     // vocab x d, frozen
    AdaptedLinear q_layer; // adapted query projection
    AdaptedLinear v_layer; // adapted value projection
    std::size_t d = 0, vocab = 0, seq = 0;
};

inline AttentionModel make_attention_model(const AttentionConfig& cfg,
                                           std::uint64_t seed) {
    if (cfg.vocab % 2 != 0 || cfg.vocab < 4) {
        throw std::invalid_argument("attention: vocab must be even and >= 4");
    }
    if (cfg.seq < 2 || cfg.seq - 1 > cfg.vocab / 2) {
        throw std::invalid_argument("attention: need 2 <= seq and seq-1 <= vocab/2");
    }
    GaussianRng rng(seed);
    const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    AttentionModel m;
    m.d = cfg.d;
    m.vocab = cfg.vocab;
    m.seq = cfg.seq;
    m.key_embed = Matrix::gaussian(cfg.d, cfg.vocab / 2, rng);
    m.val_embed = Matrix::gaussian(cfg.d, cfg.vocab / 2, rng);
    m.wk = Matrix::gaussian(cfg.d, cfg.d, rng, sd);
    m.wo = Matrix::gaussian(cfg.d, cfg.d, rng, sd);
    m.unembed = Matrix::gaussian(cfg.vocab, cfg.d, rng, sd);
    m.q_layer = AdaptedLinear{Matrix::gaussian(cfg.d, cfg.d, rng, sd),
                              make_adapter(cfg.d, cfg.d, cfg.adapter,
                                           derive_seed(seed, 33))};
    m.v_layer = AdaptedLinear{Matrix::gaussian(cfg.d, cfg.d, rng, sd),
                              make_adapter(cfg.d, cfg.d, cfg.adapter,
                                           derive_seed(seed, 37))};
    return m;
}

/// One batch of recall episodes. Position t < seq-1 embeds a key/value pair
/// (sum of the two embeddings); the final position embeds the queried key.
struct AttentionBatch {
    Matrix x_all;   // d x (batch*seq), per-sequence column groups
    Matrix x_query; // d x batch, final-position columns
    std::vector<std::size_t> targets; // value token ids
};

inline AttentionBatch make_attention_batch(const AttentionModel& m, std::size_t batch,
                                           GaussianRng& rng) {
    const std::size_t pairs = m.seq - 1;
    const std::size_t half = m.vocab / 2;
    AttentionBatch out;
    out.x_all = Matrix(m.d, batch * m.seq);
    out.x_query = Matrix(m.d, batch);
    out.targets.resize(batch);

    std::vector<std::size_t> keys(half);
    for (std::size_t s = 0; s < batch; ++s) {
        std::iota(keys.begin(), keys.end(), 0);
        for (std::size_t i = 0; i < pairs; ++i) { // partial Fisher-Yates
            const std::size_t j = i + rng.index(half - i);
            std::swap(keys[i], keys[j]);
        }
        const std::size_t query_slot = rng.index(pairs);
        for (std::size_t t = 0; t < pairs; ++t) {
            const std::size_t value = rng.index(half);
            if (t == query_slot) out.targets[s] = half + value;
            for (std::size_t r = 0; r < m.d; ++r) {
                out.x_all(r, s * m.seq + t) =
                    m.key_embed(r, keys[t]) + m.val_embed(r, value);
            }
        }
        for (std::size_t r = 0; r < m.d; ++r) {
            const double q = m.key_embed(r, keys[query_slot]);
            out.x_all(r, s * m.seq + pairs) = q;
            out.x_query(r, s) = q;
        }
    }
    return out;
}

struct AttentionForward {
    Matrix logits;  // vocab x batch
    Matrix q;       // d x batch
    Matrix v;       // d x (batch*seq)
    Matrix k;       // d x (batch*seq)
    Matrix weights; // seq x batch, softmax attention from the query position
    Matrix context; // d x batch
};

inline AttentionForward attention_forward(const AttentionModel& m,
                                          const AttentionBatch& batch) {
    const std::size_t bsz = batch.x_query.cols();
    AttentionForward f;
    f.q = m.q_layer.forward(batch.x_query);
    f.v = m.v_layer.forward(batch.x_all);
    f.k = matmul(m.wk, batch.x_all);

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(m.d));
    Matrix scores(m.seq, bsz);
    for (std::size_t s = 0; s < bsz; ++s) {
        for (std::size_t t = 0; t < m.seq; ++t) {
            double dot = 0.0;
            for (std::size_t r = 0; r < m.d; ++r)
                dot += f.k(r, s * m.seq + t) * f.q(r, s);
            scores(t, s) = dot * inv_sqrt_d;
        }
    }
    f.weights = softmax_columns(scores);

    f.context = Matrix(m.d, bsz);
    for (std::size_t s = 0; s < bsz; ++s)
        for (std::size_t t = 0; t < m.seq; ++t) {
            const double w = f.weights(t, s);
            for (std::size_t r = 0; r < m.d; ++r)
                f.context(r, s) += w * f.v(r, s * m.seq + t);
        }

    f.logits = matmul(m.unembed, matmul(m.wo, f.context));
    return f;
}

struct AttentionGrads {
    Gradients q; // w.r.t. the query adapter
    Gradients v; // w.r.t. the value adapter
};

/// Manual backprop through unembed/wo/attention softmax into the two adapted
/// projections. Upstream is dLoss/dLogits.
inline AttentionGrads attention_backward(const AttentionModel& m,
                                         const AttentionBatch& batch,
                                         const AttentionForward& f,
                                         const Matrix& upstream) {
    const std::size_t bsz = batch.x_query.cols();
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(m.d));

    const Matrix d_context =
        matmul(m.wo.transposed(), matmul(m.unembed.transposed(), upstream));

    Matrix d_v(m.d, bsz * m.seq);
    Matrix d_q(m.d, bsz);
    for (std::size_t s = 0; s < bsz; ++s) {
        // dV_t = w_t * d_context ; da_t = v_t . d_context
        std::vector<double> d_weights(m.seq, 0.0);
        for (std::size_t t = 0; t < m.seq; ++t) {
            const double w = f.weights(t, s);
            double dot = 0.0;
            for (std::size_t r = 0; r < m.d; ++r) {
                d_v(r, s * m.seq + t) = w * d_context(r, s);
                dot += f.v(r, s * m.seq + t) * d_context(r, s);
            }
            d_weights[t] = dot;
        }
        // softmax jacobian: ds = a o (da - <a, da>)
        double mix = 0.0;
        for (std::size_t t = 0; t < m.seq; ++t) mix += f.weights(t, s) * d_weights[t];
        for (std::size_t t = 0; t < m.seq; ++t) {
            const double d_score = f.weights(t, s) * (d_weights[t] - mix) * inv_sqrt_d;
            for (std::size_t r = 0; r < m.d; ++r)
                d_q(r, s) += f.k(r, s * m.seq + t) * d_score;
        }
    }

    AttentionGrads g;
    g.q = backward(m.q_layer, batch.x_query, d_q);
    g.v = backward(m.v_layer, batch.x_all, d_v);
    return g;
}

inline double attention_accuracy(const AttentionModel& m, const AttentionBatch& batch) {
    const AttentionForward f = attention_forward(m, batch);
    return label_accuracy(argmax_columns(f.logits), batch.targets);
}

} // namespace detail

inline AttentionReport run_attention(const AttentionConfig& cfg) {
    detail::AttentionModel model =
        detail::make_attention_model(cfg, derive_seed(cfg.seed, 41));

    GaussianRng test_rng(derive_seed(cfg.seed, 43));
    const detail::AttentionBatch test_batch =
        detail::make_attention_batch(model, cfg.test_batch, test_rng);

    AttentionReport report;
    report.baseline_accuracy = detail::attention_accuracy(model, test_batch);

    std::vector<Matrix*> params = trainable_params(model.q_layer);
    for (Matrix* p : trainable_params(model.v_layer)) params.push_back(p);

    const LrSchedule schedule =
        cfg.steps > 0 ? LrSchedule(cfg.lr, cfg.warmup, cfg.steps) : LrSchedule();
    AdamWConfig opt_cfg;
    opt_cfg.weight_decay = cfg.weight_decay;
    AdamW opt(opt_cfg);
    GaussianRng data_rng(derive_seed(cfg.seed, 47));

    report.train_report.rows.reserve(cfg.steps);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        const detail::AttentionBatch batch =
            detail::make_attention_batch(model, cfg.batch, data_rng);
        const detail::AttentionForward f = detail::attention_forward(model, batch);
        const LossResult loss = cross_entropy_loss(f.logits, batch.targets);
        if (!std::isfinite(loss.value)) throw DivergenceError(step);

        const detail::AttentionGrads grads =
            detail::attention_backward(model, batch, f, loss.upstream);
        std::vector<const Matrix*> grad_list = gradient_list(grads.q);
        for (const Matrix* g : gradient_list(grads.v)) grad_list.push_back(g);

        const double lr = schedule.at(step);
        opt.step(params, grad_list, lr);

        double gnorm = grads.q.norm();
        gnorm = std::sqrt(gnorm * gnorm + grads.v.norm() * grads.v.norm());
        const double ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
        report.train_report.rows.push_back(TrainRow{step, lr, loss.value, gnorm, ms});
        report.train_report.total_wall_ms += ms;
    }
    if (!report.train_report.rows.empty()) {
        report.train_report.final_loss = report.train_report.rows.back().loss;
        report.final_loss = report.train_report.final_loss;
    }

    report.accuracy = detail::attention_accuracy(model, test_batch);
    report.q_profile = adapter_rank_profile(model.q_layer.adapter, cfg.threshold);
    report.v_profile = adapter_rank_profile(model.v_layer.adapter, cfg.threshold);
    report.params = 2 * spec_param_count(cfg.d, cfg.d, cfg.adapter);
    report.equiv_rank = spec_equivalent_rank(cfg.adapter);
    report.trained_q = std::move(model.q_layer.adapter);
    report.trained_v = std::move(model.v_layer.adapter);
    return report;
}

// ---------------------------------------------------------------------------
// Sweep runner: a grid over (n, r, seed) with per-row results and mean/std
// aggregates, written as CSV in canonical order.
// ---------------------------------------------------------------------------

struct SweepConfig {
    std::string task = "recovery"; // recovery | classify | attention
    AdapterKind mode = AdapterKind::melora;
    std::vector<std::uint64_t> n_list{1, 2, 4};
    std::vector<std::uint64_t> r_list{1};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::size_t d = 64;
    std::size_t teacher_rank = 4;
    bool block_compatible = true;
    std::size_t classes = 16;
    std::size_t vocab = 16;
    std::size_t seq = 8;
    double alpha = 16.0;
    double dropout = 0.0;
    double lr = 0.02;
    double weight_decay = 0.0;
    std::size_t warmup = 50;
    std::size_t steps = 500;
    std::size_t batch = 32;
    std::size_t test_batch = 1024;
    double threshold = 0.1;
    std::size_t jobs = 1;
};

inline SweepConfig parse_sweep_config(const KeyValueConfig& kv,
                                      std::uint64_t default_seed) {
    kv.require_known({"task", "mode", "n", "r_mini", "seeds", "d", "teacher_rank",
                      "block_compatible", "classes", "vocab", "seq", "alpha", "dropout",
                      "lr", "weight_decay", "warmup", "steps", "batch", "test_batch",
                      "threshold"});
    SweepConfig cfg;
    cfg.task = kv.get_string("task", cfg.task);
    if (cfg.task != "recovery" && cfg.task != "classify" && cfg.task != "attention") {
        throw FormatError(kv.origin() + ": task must be recovery, classify or attention");
    }
    const std::string mode = kv.get_string("mode", "melora");
    if (mode == "lora") {
        cfg.mode = AdapterKind::lora;
    } else if (mode == "melora") {
        cfg.mode = AdapterKind::melora;
    } else {
        throw FormatError(kv.origin() + ": mode must be lora or melora");
    }
    cfg.n_list = kv.get_uint_list("n", cfg.n_list);
    cfg.r_list = kv.get_uint_list("r_mini", cfg.r_list);
    cfg.seeds = kv.get_uint_list("seeds", {default_seed});
    cfg.d = kv.get_uint("d", cfg.d);
    cfg.teacher_rank = kv.get_uint("teacher_rank", cfg.teacher_rank);
    cfg.block_compatible = kv.get_bool("block_compatible", cfg.block_compatible);
    cfg.classes = kv.get_uint("classes", cfg.classes);
    cfg.vocab = kv.get_uint("vocab", cfg.vocab);
    cfg.seq = kv.get_uint("seq", cfg.seq);
    cfg.alpha = kv.get_double("alpha", cfg.alpha);
    cfg.dropout = kv.get_double("dropout", cfg.dropout);
    cfg.lr = kv.get_double("lr", cfg.lr);
    cfg.weight_decay = kv.get_double("weight_decay", cfg.weight_decay);
    cfg.warmup = kv.get_uint("warmup", cfg.warmup);
    cfg.steps = kv.get_uint("steps", cfg.steps);
    cfg.batch = kv.get_uint("batch", cfg.batch);
    cfg.test_batch = kv.get_uint("test_batch", cfg.test_batch);
    cfg.threshold = kv.get_double("threshold", cfg.threshold);
    return cfg;
}

struct SweepRow {
    std::string task;
    AdapterKind mode = AdapterKind::melora;
    std::size_t n = 1;
    std::size_t r = 1;
    double alpha = 16.0;
    std::string seed_label; // seed value, or "mean"/"std" for aggregates
    std::uint64_t params = 0;
    std::size_t equiv_rank = 0;
    std::size_t steps = 0;
    double final_metric = 0.0;
    double sv_count = 0.0; // integral for run rows, fractional for aggregates
    double wall_ms = 0.0;
    bool failed = false;
    std::string error;
};

namespace detail {

struct SweepOutcome {
    double metric = 0.0;
    std::size_t sv_count = 0;
    double wall_ms = 0.0;
    bool failed = false;
    std::string error;
};

inline SweepOutcome run_sweep_cell(const SweepConfig& cfg, const AdapterSpec& spec,
                                   std::uint64_t seed) {
    SweepOutcome out;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        if (cfg.task == "recovery") {
            RecoveryConfig rc;
            rc.d = cfg.d;
            rc.teacher_rank = cfg.teacher_rank;
            rc.block_compatible = cfg.block_compatible;
            rc.adapter = spec;
            rc.lr = cfg.lr;
            rc.weight_decay = cfg.weight_decay;
            rc.warmup = cfg.warmup;
            rc.steps = cfg.steps;
            rc.batch = cfg.batch;
            rc.test_batch = cfg.test_batch;
            rc.threshold = cfg.threshold;
            rc.seed = seed;
            const RecoveryReport r = run_recovery(rc);
            out.metric = r.test_mse;
            out.sv_count = r.profile.count_above;
        } else if (cfg.task == "classify") {
            ClassifyConfig cc;
            cc.d = cfg.d;
            cc.classes = cfg.classes;
            cc.teacher_rank = cfg.teacher_rank;
            cc.adapter = spec;
            cc.lr = cfg.lr;
            cc.weight_decay = cfg.weight_decay;
            cc.warmup = cfg.warmup;
            cc.steps = cfg.steps;
            cc.batch = cfg.batch;
            cc.test_batch = cfg.test_batch;
            cc.threshold = cfg.threshold;
            cc.seed = seed;
            const ClassifyReport r = run_classify(cc);
            out.metric = r.accuracy;
            out.sv_count = r.profile.count_above;
        } else {
            AttentionConfig ac;
            ac.d = cfg.d;
            ac.vocab = cfg.vocab;
            ac.seq = cfg.seq;
            ac.adapter = spec;
            ac.lr = cfg.lr;
            ac.weight_decay = cfg.weight_decay;
            ac.warmup = cfg.warmup;
            ac.steps = cfg.steps;
            ac.batch = cfg.batch;
            ac.test_batch = cfg.test_batch;
            ac.threshold = cfg.threshold;
            ac.seed = seed;
            const AttentionReport r = run_attention(ac);
            out.metric = r.accuracy;
            out.sv_count = r.q_profile.count_above + r.v_profile.count_above;
        }
    } catch (const std::exception& e) {
        out.failed = true;
        out.error = e.what();
    }
    out.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    return out;
}

} // namespace detail

/// Rows come back in canonical (n, r, seed) order with a mean and a
/// population-std row appended per (n, r) cell; failed runs keep their slot
/// and are excluded from the aggregates.
inline std::vector<SweepRow> run_sweep(const SweepConfig& cfg_in) {
    // Canonical (n, r, seed) ordering no matter how the lists were written.
    SweepConfig cfg = cfg_in;
    std::sort(cfg.n_list.begin(), cfg.n_list.end());
    std::sort(cfg.r_list.begin(), cfg.r_list.end());
    std::sort(cfg.seeds.begin(), cfg.seeds.end());

    struct Cell {
        AdapterSpec spec;
        std::size_t n, r;
        std::uint64_t seed;
    };
    std::vector<Cell> cells;
    for (std::uint64_t n : cfg.n_list) {
        for (std::uint64_t r : cfg.r_list) {
            AdapterSpec spec;
            spec.kind = cfg.mode;
            spec.n = static_cast<std::size_t>(n);
            spec.r = static_cast<std::size_t>(r);
            spec.alpha = cfg.alpha;
            spec.dropout = cfg.dropout;
            for (std::uint64_t seed : cfg.seeds) {
                cells.push_back(Cell{spec, static_cast<std::size_t>(n),
                                     static_cast<std::size_t>(r), seed});
            }
        }
    }

    std::vector<detail::SweepOutcome> outcomes(cells.size());
    if (cfg.jobs <= 1) {
        for (std::size_t i = 0; i < cells.size(); ++i)
            outcomes[i] = detail::run_sweep_cell(cfg, cells[i].spec, cells[i].seed);
    } else {
        // Runs are independent; results land in indexed slots so output order
        // never depends on completion order.
        std::vector<std::future<detail::SweepOutcome>> futures(cells.size());
        std::size_t next = 0;
        while (next < cells.size()) {
            const std::size_t wave = std::min(cfg.jobs, cells.size() - next);
            for (std::size_t w = 0; w < wave; ++w) {
                const std::size_t idx = next + w;
                futures[idx] = std::async(std::launch::async, [&cfg, &cells, idx]() {
                    return detail::run_sweep_cell(cfg, cells[idx].spec, cells[idx].seed);
                });
            }
            for (std::size_t w = 0; w < wave; ++w)
                outcomes[next + w] = futures[next + w].get();
            next += wave;
        }
    }

    std::vector<SweepRow> rows;
    const std::size_t per_cell = cfg.seeds.size();
    for (std::size_t c = 0; c < cells.size(); c += per_cell) {
        std::vector<double> metrics, svs;
        for (std::size_t s = 0; s < per_cell; ++s) {
            const Cell& cell = cells[c + s];
            const detail::SweepOutcome& o = outcomes[c + s];
            SweepRow row;
            row.task = cfg.task;
            row.mode = cfg.mode;
            row.n = cell.n;
            row.r = cell.r;
            row.alpha = cfg.alpha;
            row.seed_label = std::to_string(cell.seed);
            try {
                row.params = cfg.task == "attention"
                                 ? 2 * spec_param_count(cfg.d, cfg.d, cell.spec)
                                 : spec_param_count(
                                       cfg.d,
                                       cfg.task == "classify" ? cfg.classes : cfg.d,
                                       cell.spec);
            } catch (const std::invalid_argument&) {
                row.params = 0; // cell already failed for the same reason
            }
            row.equiv_rank = spec_equivalent_rank(cell.spec);
            row.steps = cfg.steps;
            row.failed = o.failed;
            row.error = o.error;
            row.final_metric = o.metric;
            row.sv_count = static_cast<double>(o.sv_count);
            row.wall_ms = o.wall_ms;
            if (!o.failed) {
                metrics.push_back(o.metric);
                svs.push_back(static_cast<double>(o.sv_count));
            }
            rows.push_back(std::move(row));
        }

        const auto mean = [](const std::vector<double>& v) {
            return v.empty() ? std::nan("")
                             : std::accumulate(v.begin(), v.end(), 0.0) /
                                   static_cast<double>(v.size());
        };
        const auto pop_std = [&](const std::vector<double>& v) {
            if (v.empty()) return std::nan("");
            const double mu = mean(v);
            double acc = 0.0;
            for (double x : v) acc += (x - mu) * (x - mu);
            return std::sqrt(acc / static_cast<double>(v.size()));
        };

        for (const char* label : {"mean", "std"}) {
            SweepRow agg = rows[rows.size() - per_cell];
            agg.seed_label = label;
            agg.failed = false;
            agg.error.clear();
            agg.wall_ms = 0.0;
            const bool is_mean = std::string(label) == "mean";
            agg.final_metric = is_mean ? mean(metrics) : pop_std(metrics);
            agg.sv_count = is_mean ? mean(svs) : pop_std(svs);
            rows.push_back(std::move(agg));
        }
    }
    return rows;
}

/// CSV schema:
/// task,mode,n,r_mini,alpha,seed,params,equiv_rank,steps,final_metric,sv_count,wall_ms.
/// Timing defaults to zero so fixed seeds give byte-identical files.
inline std::string sweep_csv(const std::vector<SweepRow>& rows,
                             bool include_timing = false) {
    std::string out =
        "task,mode,n,r_mini,alpha,seed,params,equiv_rank,steps,final_metric,sv_count,"
        "wall_ms\n";
    char buf[320];
    for (const SweepRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%zu,%zu,%.12g,%s,%llu,%zu,%zu,%.12g,%.12g,%.3f\n",
                      r.task.c_str(), to_string(r.mode), r.n, r.r, r.alpha,
                      r.seed_label.c_str(), static_cast<unsigned long long>(r.params),
                      r.equiv_rank, r.steps, r.failed ? std::nan("") : r.final_metric,
                      r.failed ? std::nan("") : r.sv_count,
                      include_timing ? r.wall_ms : 0.0);
        out += buf;
    }
    return out;
}

} // namespace melora
