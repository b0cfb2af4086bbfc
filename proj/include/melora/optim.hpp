#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "melora/matrix.hpp"

namespace melora {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
};

/// AdamW with decoupled weight decay: params shrink by lr * decay before the
/// bias-corrected moment update. Moment buffers are allocated on first use
/// and must keep their shapes for the optimizer's lifetime.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads,
              double lr) {
        if (params.size() != grads.size()) {
            throw std::invalid_argument("AdamW::step: " + std::to_string(params.size()) +
                                        " params vs " + std::to_string(grads.size()) +
                                        " grads");
        }
        if (m_.empty()) {
            for (const Matrix* p : params) {
                m_.emplace_back(p->rows(), p->cols());
                v_.emplace_back(p->rows(), p->cols());
            }
        }
        if (m_.size() != params.size()) {
            throw std::invalid_argument("AdamW::step: parameter count changed");
        }

        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t t = 0; t < params.size(); ++t) {
            Matrix& p = *params[t];
            const Matrix& g = *grads[t];
            detail::require_same_shape(p, g, "AdamW::step");
            detail::require_same_shape(p, m_[t], "AdamW::step");
            for (std::size_t i = 0; i < p.size(); ++i) {
                double& pv = p.values()[i];
                const double gv = g.values()[i];
                pv -= lr * cfg_.weight_decay * pv;
                double& mv = m_[t].values()[i];
                double& vv = v_[t].values()[i];
                mv = cfg_.beta1 * mv + (1.0 - cfg_.beta1) * gv;
                vv = cfg_.beta2 * vv + (1.0 - cfg_.beta2) * gv * gv;
                const double mhat = mv / bc1;
                const double vhat = vv / bc2;
                pv -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
            }
        }
    }

    std::size_t steps_taken() const { return step_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    std::vector<Matrix> m_, v_;
    std::size_t step_ = 0;
};

/// Linear warmup from 0 to base_lr over warmup_steps, then linear decay to 0
/// at total_steps. Peaks exactly once, at warmup_steps.
struct LrSchedule {
    double base_lr = 0.0;
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 1;

    LrSchedule() = default;

    LrSchedule(double base, std::size_t warmup, std::size_t total)
        : base_lr(base), warmup_steps(warmup), total_steps(total) {
        if (!(base >= 0.0)) throw std::invalid_argument("LrSchedule: base_lr must be >= 0");
        if (total == 0) throw std::invalid_argument("LrSchedule: total_steps must be >= 1");
        if (warmup > 0 && warmup >= total) {
            throw std::invalid_argument("LrSchedule: warmup_steps " +
                                        std::to_string(warmup) +
                                        " must be below total_steps " +
                                        std::to_string(total));
        }
    }

    double at(std::size_t step) const {
        if (step >= total_steps) return 0.0;
        if (warmup_steps > 0 && step <= warmup_steps) {
            return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
        }
        return base_lr * static_cast<double>(total_steps - step) /
               static_cast<double>(total_steps - warmup_steps);
    }
};

} // namespace melora
