#pragma once

#include <cmath>
#include <vector>

#include "melora/matrix.hpp"

namespace melora {

struct LossResult {
    double value = 0.0;
    Matrix upstream; // dLoss/dPred, same shape as the prediction
};

/// Mean squared error over all entries; upstream = 2 (pred - target) / count.
inline LossResult mse_loss(const Matrix& pred, const Matrix& target) {
    detail::require_same_shape(pred, target, "mse_loss");
    const double count = static_cast<double>(pred.size());
    LossResult out;
    out.upstream = Matrix(pred.rows(), pred.cols());
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred.values()[i] - target.values()[i];
        sum += d * d;
        out.upstream.values()[i] = 2.0 * d / count;
    }
    out.value = sum / count;
    return out;
}

/// Column-wise softmax, stabilized by per-column max subtraction.
inline Matrix softmax_columns(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t j = 0; j < logits.cols(); ++j) {
        double mx = logits(0, j);
        for (std::size_t i = 1; i < logits.rows(); ++i) mx = std::max(mx, logits(i, j));
        double denom = 0.0;
        for (std::size_t i = 0; i < logits.rows(); ++i) {
            out(i, j) = std::exp(logits(i, j) - mx);
            denom += out(i, j);
        }
        for (std::size_t i = 0; i < logits.rows(); ++i) out(i, j) /= denom;
    }
    return out;
}

/// Mean negative log-softmax of the true class. Columns are examples;
/// upstream = (softmax - onehot) / batch.
inline LossResult cross_entropy_loss(const Matrix& logits,
                                     const std::vector<std::size_t>& labels) {
    if (labels.size() != logits.cols()) {
        throw DimensionError("cross_entropy_loss: " + std::to_string(labels.size()) +
                             " labels for " + std::to_string(logits.cols()) +
                             " logit columns");
    }
    for (std::size_t j = 0; j < labels.size(); ++j) {
        if (labels[j] >= logits.rows()) {
            throw std::invalid_argument("cross_entropy_loss: label " +
                                        std::to_string(labels[j]) + " out of range for " +
                                        std::to_string(logits.rows()) + " classes");
        }
    }
    const double batch = static_cast<double>(logits.cols());
    LossResult out;
    out.upstream = softmax_columns(logits);
    double sum = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) {
        double mx = logits(0, j);
        for (std::size_t i = 1; i < logits.rows(); ++i) mx = std::max(mx, logits(i, j));
        double lse = 0.0;
        for (std::size_t i = 0; i < logits.rows(); ++i) lse += std::exp(logits(i, j) - mx);
        sum += mx + std::log(lse) - logits(labels[j], j);
        out.upstream(labels[j], j) -= 1.0;
    }
    for (double& v : out.upstream.values()) v /= batch;
    out.value = sum / batch;
    return out;
}

} // namespace melora
