#pragma once

#include <chrono>
#include <cstdio>
#include <functional>
#include <ostream>
#include <variant>
#include <vector>

#include "melora/adapters.hpp"
#include "melora/losses.hpp"
#include "melora/optim.hpp"

namespace melora {

/// Frozen base weight plus one attached adapter; the trainable unit. The base
/// is never touched by a training step.
struct AdaptedLinear {
    Matrix w; // d_out x d_in, frozen
    std::variant<LoraAdapter, MeloraAdapter> adapter;

    AdapterKind kind() const {
        return std::holds_alternative<LoraAdapter>(adapter) ? AdapterKind::lora
                                                            : AdapterKind::melora;
    }

    std::size_t d_in() const {
        if (const auto* l = std::get_if<LoraAdapter>(&adapter)) return l->d_in();
        return std::get<MeloraAdapter>(adapter).d_in;
    }

    std::size_t d_out() const {
        if (const auto* l = std::get_if<LoraAdapter>(&adapter)) return l->d_out();
        return std::get<MeloraAdapter>(adapter).d_out;
    }

    double dropout_p() const {
        return std::visit([](const auto& ad) { return ad.dropout_p; }, adapter);
    }

    Matrix forward(const Matrix& x) const {
        return std::visit(
            [&](const auto& ad) { return detail_forward(ad, x); }, adapter);
    }

    /// Forward with a distinct adapter-branch input (dropout training path).
    Matrix forward_split(const Matrix& x_base, const Matrix& x_adapter) const {
        return std::visit(
            [&](const auto& ad) { return detail_forward_split(ad, x_base, x_adapter); },
            adapter);
    }

    Matrix delta_w() const {
        return std::visit([](const auto& ad) { return ad.delta_w(); }, adapter);
    }

private:
    Matrix detail_forward(const LoraAdapter& ad, const Matrix& x) const {
        return lora_forward(ad, w, x);
    }
    Matrix detail_forward(const MeloraAdapter& ad, const Matrix& x) const {
        return melora_forward(ad, w, x);
    }
    Matrix detail_forward_split(const LoraAdapter& ad, const Matrix& xb,
                                const Matrix& xa) const {
        return detail::lora_forward_impl(ad, w, xb, xa);
    }
    Matrix detail_forward_split(const MeloraAdapter& ad, const Matrix& xb,
                                const Matrix& xa) const {
        return detail::melora_forward_impl(ad, w, xb, xa);
    }
};

/// Per-mini factor gradients (single entry for a plain low-rank adapter) plus
/// the gradient w.r.t. the layer input for chaining.
struct Gradients {
    std::vector<Matrix> a; // one per mini, shape of A_i
    std::vector<Matrix> b; // one per mini, shape of B_i
    Matrix input;          // d_in x batch

    double norm() const {
        double sum = 0.0;
        for (const Matrix& g : a)
            for (double v : g.values()) sum += v * v;
        for (const Matrix& g : b)
            for (double v : g.values()) sum += v * v;
        return std::sqrt(sum);
    }
};

/// Gradients of the adapted forward pass. With scale s and upstream block g_i:
///   dB_i = s * g_i * (A_i x_i)^T
///   dA_i = s * B_i^T * g_i * x_i^T
///   dx   = W^T g, plus s * A_i^T B_i^T g_i within each input block.
/// `x` must be the adapter-branch input that produced the forward pass.
inline Gradients backward(const AdaptedLinear& layer, const Matrix& x,
                          const Matrix& upstream) {
    if (x.rows() != layer.d_in()) {
        throw DimensionError("backward: input " + shape_str(x) +
                             " incompatible with d_in=" + std::to_string(layer.d_in()));
    }
    if (upstream.rows() != layer.d_out() || upstream.cols() != x.cols()) {
        throw DimensionError("backward: upstream " + shape_str(upstream) +
                             " incompatible with output " +
                             std::to_string(layer.d_out()) + "x" +
                             std::to_string(x.cols()));
    }

    Gradients out;
    out.input = matmul(layer.w.transposed(), upstream);

    const auto per_block = [&](const LoraAdapter& mini, double s, std::size_t in_off,
                               std::size_t out_off) {
        const Matrix xi = row_block(x, in_off, mini.d_in());
        const Matrix gi = row_block(upstream, out_off, mini.d_out());
        const Matrix axi = matmul(mini.a, xi);
        out.b.push_back(s * matmul(gi, axi.transposed()));
        const Matrix btg = matmul(mini.b.transposed(), gi);
        out.a.push_back(s * matmul(btg, xi.transposed()));
        const Matrix dxi = s * matmul(mini.a.transposed(), btg);
        for (std::size_t i = 0; i < dxi.rows(); ++i)
            for (std::size_t j = 0; j < dxi.cols(); ++j)
                out.input(in_off + i, j) += dxi(i, j);
    };

    if (const auto* l = std::get_if<LoraAdapter>(&layer.adapter)) {
        per_block(*l, l->scale(), 0, 0);
    } else {
        const auto& m = std::get<MeloraAdapter>(layer.adapter);
        for (std::size_t i = 0; i < m.n; ++i)
            per_block(m.minis[i], m.scale(), i * m.block_in(), i * m.block_out());
    }
    return out;
}

/// Mutable views of the trainable factors, ordered A_i then B_i per mini.
inline std::vector<Matrix*> trainable_params(AdaptedLinear& layer) {
    std::vector<Matrix*> out;
    if (auto* l = std::get_if<LoraAdapter>(&layer.adapter)) {
        out.push_back(&l->a);
        out.push_back(&l->b);
    } else {
        auto& m = std::get<MeloraAdapter>(layer.adapter);
        for (LoraAdapter& mini : m.minis) {
            out.push_back(&mini.a);
            out.push_back(&mini.b);
        }
    }
    return out;
}

/// Matching flat view of a Gradients value (same ordering as trainable_params).
inline std::vector<const Matrix*> gradient_list(const Gradients& g) {
    std::vector<const Matrix*> out;
    for (std::size_t i = 0; i < g.a.size(); ++i) {
        out.push_back(&g.a[i]);
        out.push_back(&g.b[i]);
    }
    return out;
}

class DivergenceError : public std::runtime_error {
public:
    explicit DivergenceError(std::size_t step)
        : std::runtime_error("training diverged (non-finite loss) at step " +
                             std::to_string(step)),
          step_(step) {}

    std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

enum class LossKind { mse, cross_entropy };

struct Batch {
    Matrix x;                        // d_in x batch
    Matrix target;                   // used by mse
    std::vector<std::size_t> labels; // used by cross_entropy
};

using BatchFn = std::function<Batch(std::size_t step, GaussianRng& rng)>;

struct TrainRow {
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double wall_ms = 0.0;
};

struct TrainReport {
    std::vector<TrainRow> rows;
    double final_loss = 0.0;
    double total_wall_ms = 0.0;

    /// CSV columns: step,lr,loss,grad_norm,wall_ms. Timing defaults to zero so
    /// identical configs yield byte-identical files; pass include_timing for
    /// measured values.
    void write_csv(std::ostream& os, bool include_timing = false) const {
        os << "step,lr,loss,grad_norm,wall_ms\n";
        char buf[128];
        for (const TrainRow& r : rows) {
            std::snprintf(buf, sizeof(buf), "%zu,%.12g,%.12g,%.12g,%.3f\n", r.step, r.lr,
                          r.loss, r.grad_norm, include_timing ? r.wall_ms : 0.0);
            os << buf;
        }
    }
};

struct TrainOptions {
    std::size_t steps = 0;
    double base_lr = 1e-2;
    std::size_t warmup_steps = 0;
    AdamWConfig optimizer;
    LossKind loss = LossKind::mse;
    std::uint64_t seed = 42;
};

/// Single-threaded forward/backward/step loop; bitwise deterministic for a
/// given seed. The frozen base of `layer` is never written.
inline TrainReport train(AdaptedLinear& layer, const BatchFn& next_batch,
                         const TrainOptions& o) {
    TrainReport report;
    if (o.steps == 0) return report;

    GaussianRng data_rng(derive_seed(o.seed, 101));
    GaussianRng dropout_rng(derive_seed(o.seed, 102));
    const LrSchedule schedule(o.base_lr, o.warmup_steps, o.steps);
    AdamW opt(o.optimizer);
    const std::vector<Matrix*> params = trainable_params(layer);
    const double dropout_p = layer.dropout_p();

    report.rows.reserve(o.steps);
    for (std::size_t step = 0; step < o.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        const Batch batch = next_batch(step, data_rng);

        const Matrix* x_adapter = &batch.x;
        Matrix dropped;
        if (dropout_p > 0.0) {
            dropped = inverted_dropout(batch.x, dropout_p, dropout_rng);
            x_adapter = &dropped;
        }

        const Matrix pred = layer.forward_split(batch.x, *x_adapter);
        const LossResult loss = o.loss == LossKind::mse
                                    ? mse_loss(pred, batch.target)
                                    : cross_entropy_loss(pred, batch.labels);
        if (!std::isfinite(loss.value)) throw DivergenceError(step);

        const Gradients grads = backward(layer, *x_adapter, loss.upstream);
        const double lr = schedule.at(step);
        opt.step(params, gradient_list(grads), lr);

        const double ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
        report.rows.push_back(TrainRow{step, lr, loss.value, grads.norm(), ms});
        report.total_wall_ms += ms;
    }
    report.final_loss = report.rows.back().loss;
    return report;
}

} // namespace melora
