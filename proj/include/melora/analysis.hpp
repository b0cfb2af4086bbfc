#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "melora/adapters.hpp"
#include "melora/config.hpp"
#include "melora/errors.hpp"
#include "melora/svd.hpp"

namespace melora {

struct MatrixSlot {
    std::string name;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
};

/// Model geometry for parameter audits. Shapes are data, not code: presets
/// live in a text file so audits run without any model weights.
struct ModelShape {
    std::string name;
    std::size_t hidden_dim = 0;
    std::size_t num_layers = 0;
    std::vector<MatrixSlot> per_layer;       // adapted matrices within one layer
    std::uint64_t full_finetune_params = 0;  // display metadata only

    std::size_t adapted_matrix_count() const { return num_layers * per_layer.size(); }
};

/// Total trainable entries across all adapted matrices; exact integer.
inline std::uint64_t audit_params(const ModelShape& shape, AdapterKind mode,
                                  std::size_t n, std::size_t r_mini) {
    const std::size_t blocks = mode == AdapterKind::lora ? 1 : n;
    std::uint64_t total = 0;
    for (const MatrixSlot& slot : shape.per_layer) {
        std::uint64_t per_matrix = 0;
        try {
            per_matrix = count_params(slot.d_in, slot.d_out, blocks, r_mini);
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("audit_params: matrix '" + slot.name + "' (" +
                                        std::to_string(slot.d_out) + "x" +
                                        std::to_string(slot.d_in) + "): " + e.what());
        }
        total += per_matrix * shape.num_layers;
    }
    return total;
}

/// Preset file format: blocks introduced by 'preset = <name>', then
/// hidden_dim, num_layers, adapted_matrices (comma list of names, each a
/// hidden_dim x hidden_dim projection), full_finetune_params.
inline std::vector<ModelShape> load_model_shapes(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open preset file " + path.string());
    const std::string origin = path.filename().string();

    std::vector<ModelShape> shapes;
    ModelShape current;
    bool open = false;
    std::string line;
    std::size_t lineno = 0;

    const auto finish = [&]() {
        if (!open) return;
        if (current.hidden_dim == 0 || current.num_layers == 0 ||
            current.per_layer.empty()) {
            throw FormatError(origin + ": preset '" + current.name +
                              "' is missing hidden_dim, num_layers or adapted_matrices");
        }
        shapes.push_back(current);
        current = ModelShape{};
        open = false;
    };

    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw FormatError(origin + ":" + std::to_string(lineno) +
                              ": expected 'key = value'");
        }
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));

        if (key == "preset") {
            finish();
            current.name = value;
            open = true;
            continue;
        }
        if (!open) {
            throw FormatError(origin + ":" + std::to_string(lineno) + ": key '" + key +
                              "' before any 'preset ='");
        }
        if (key == "hidden_dim") {
            current.hidden_dim = static_cast<std::size_t>(std::stoull(value));
        } else if (key == "num_layers") {
            current.num_layers = static_cast<std::size_t>(std::stoull(value));
        } else if (key == "adapted_matrices") {
            for (const std::string& name : detail::split_list(value))
                current.per_layer.push_back(MatrixSlot{name, 0, 0});
        } else if (key == "full_finetune_params") {
            current.full_finetune_params = std::stoull(value);
        } else {
            throw FormatError(origin + ":" + std::to_string(lineno) + ": unknown key '" +
                              key + "'");
        }
    }
    finish();

    for (ModelShape& s : shapes) {
        for (MatrixSlot& slot : s.per_layer) {
            slot.d_in = s.hidden_dim;
            slot.d_out = s.hidden_dim;
        }
    }
    return shapes;
}

inline const ModelShape* find_shape(const std::vector<ModelShape>& shapes,
                                    const std::string& name) {
    for (const ModelShape& s : shapes)
        if (s.name == name) return &s;
    return nullptr;
}

/// Singular values of the effective update and how many exceed the threshold.
struct RankProfile {
    std::vector<double> singular_values; // descending
    double threshold = 0.1;
    std::size_t count_above = 0;
};

namespace detail {

inline RankProfile profile_from_delta(const Matrix& delta, double threshold) {
    RankProfile p;
    p.threshold = threshold;
    p.singular_values = svd(delta).singular_values;
    for (double s : p.singular_values)
        if (s > threshold) ++p.count_above;
    return p;
}

} // namespace detail

/// With apply_scale, profiles scale * B * A (the update actually added to the
/// base); otherwise the raw product B * A.
inline RankProfile rank_profile(const LoraAdapter& ad, double threshold,
                                bool apply_scale = true) {
    Matrix delta = matmul(ad.b, ad.a);
    if (apply_scale) delta *= ad.scale();
    return detail::profile_from_delta(delta, threshold);
}

inline RankProfile rank_profile(const MeloraAdapter& ad, double threshold,
                                bool apply_scale = true) {
    const SparseExpansion eq = expand_to_sparse(ad);
    Matrix delta = matmul(eq.b_eq, eq.a_eq);
    if (apply_scale) delta *= ad.scale();
    return detail::profile_from_delta(delta, threshold);
}

/// Rank achieved by summing num_stacked low-rank products whose consecutive
/// left factors share a fraction of their columns. With overlap 1 the sum
/// never exceeds rank r no matter how many terms are added; with overlap 0
/// it reaches num_stacked * r almost surely.
inline std::size_t serial_stack_rank_demo(std::size_t num_stacked, std::size_t r,
                                          std::size_t d, double overlap,
                                          std::uint64_t seed) {
    if (num_stacked == 0 || r == 0) {
        throw std::invalid_argument("serial_stack_rank_demo: num_stacked and r must be positive");
    }
    if (num_stacked * r > d) {
        throw std::invalid_argument("serial_stack_rank_demo: num_stacked*r = " +
                                    std::to_string(num_stacked * r) + " exceeds d = " +
                                    std::to_string(d));
    }
    if (overlap < 0.0 || overlap > 1.0) {
        throw std::invalid_argument("serial_stack_rank_demo: overlap must lie in [0,1]");
    }
    const std::size_t shared =
        std::min<std::size_t>(r, static_cast<std::size_t>(std::ceil(overlap * static_cast<double>(r))));

    GaussianRng rng(derive_seed(seed, 7));
    Matrix sum(d, d);
    Matrix prev_b;
    for (std::size_t j = 0; j < num_stacked; ++j) {
        // Draw order is fixed regardless of overlap so the same seed explores
        // the overlap axis with identical raw material.
        Matrix bj = Matrix::gaussian(d, r, rng);
        const Matrix aj = Matrix::gaussian(r, d, rng);
        if (j > 0) {
            for (std::size_t c = 0; c < shared; ++c)
                for (std::size_t row = 0; row < d; ++row) bj(row, c) = prev_b(row, c);
        }
        sum += matmul(bj, aj);
        prev_b = std::move(bj);
    }
    return rank(sum, 1e-8);
}

/// Block-diagonal counterpart at the same budget: num_blocks rank-r products
/// on disjoint blocks always reach num_blocks * r.
inline std::size_t parallel_stack_rank(std::size_t num_blocks, std::size_t r,
                                       std::size_t d, std::uint64_t seed) {
    if (num_blocks == 0 || d % num_blocks != 0) {
        throw std::invalid_argument("parallel_stack_rank: d=" + std::to_string(d) +
                                    " not divisible by num_blocks=" +
                                    std::to_string(num_blocks));
    }
    const std::size_t bs = d / num_blocks;
    if (r > bs) {
        throw std::invalid_argument("parallel_stack_rank: r=" + std::to_string(r) +
                                    " exceeds block size " + std::to_string(bs));
    }
    GaussianRng rng(derive_seed(seed, 7));
    std::vector<Matrix> blocks;
    blocks.reserve(num_blocks);
    for (std::size_t i = 0; i < num_blocks; ++i) {
        const Matrix b = Matrix::gaussian(bs, r, rng);
        const Matrix a = Matrix::gaussian(r, bs, rng);
        blocks.push_back(matmul(b, a));
    }
    return rank(block_diag(blocks), 1e-8);
}

/// CSV row for rank reports:
/// matrix_name,mode,n,r_mini,params,equivalent_rank,sv_count_above_threshold.
struct RankReportRow {
    std::string matrix_name;
    AdapterKind mode = AdapterKind::lora;
    std::size_t n = 1;
    std::size_t r_mini = 1;
    std::uint64_t params = 0;
    std::size_t equivalent_rank = 0;
    std::size_t sv_count = 0;
};

inline std::string rank_report_csv(const std::vector<RankReportRow>& rows) {
    std::string out = "matrix_name,mode,n,r_mini,params,equivalent_rank,sv_count_above_threshold\n";
    char buf[256];
    for (const RankReportRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%zu,%zu,%llu,%zu,%zu\n",
                      r.matrix_name.c_str(), to_string(r.mode), r.n, r.r_mini,
                      static_cast<unsigned long long>(r.params), r.equivalent_rank,
                      r.sv_count);
        out += buf;
    }
    return out;
}

} // namespace melora
