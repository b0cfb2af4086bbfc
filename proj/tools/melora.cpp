// Command-line front end: verify | count-params | analyze-rank | demo-rank |
// train | sweep. Exit codes: 0 success, 1 verification/assertion failure,
// 2 usage error, 3 I/O-or-format error. No environment variables; behaviour
// comes from flags and config files only.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "melora/analysis.hpp"
#include "melora/checkpoint.hpp"
#include "melora/harness.hpp"
#include "melora/io.hpp"
#include "melora/verify.hpp"

#ifndef MELORA_DEFAULT_PRESETS
#define MELORA_DEFAULT_PRESETS "presets/model-shapes.cfg"
#endif

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

std::string human_count(std::uint64_t v) {
    char buf[64];
    if (v >= 1000000000ull) {
        std::snprintf(buf, sizeof(buf), "%.3gB", static_cast<double>(v) / 1e9);
    } else if (v >= 1000000ull) {
        std::snprintf(buf, sizeof(buf), "%.3gM", static_cast<double>(v) / 1e6);
    } else if (v >= 1000ull) {
        std::snprintf(buf, sizeof(buf), "%.3gk", static_cast<double>(v) / 1e3);
    } else {
        std::snprintf(buf, sizeof(buf), "%llu", static_cast<unsigned long long>(v));
    }
    return buf;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

melora::AdapterKind parse_mode(const std::string& mode) {
    if (mode == "lora") return melora::AdapterKind::lora;
    if (mode == "melora") return melora::AdapterKind::melora;
    throw std::invalid_argument("mode must be lora or melora, got '" + mode + "'");
}

struct VerifyArgs {
    std::uint64_t seed = 42;
    std::string out;
    std::string filter;
    std::string sabotage;
};

int cmd_verify(const VerifyArgs& args) {
    if (!args.sabotage.empty() && args.sabotage != "rank-additivity") {
        std::cerr << "unknown --sabotage key '" << args.sabotage
                  << "' (supported: rank-additivity)\n";
        return kExitUsage;
    }
    melora::VerifyOptions opts;
    opts.seed = args.seed;
    opts.filter = args.filter;
    opts.sabotage = args.sabotage;
    const std::vector<melora::CheckResult> results = melora::run_verify(opts);

    std::size_t failed = 0;
    for (const melora::CheckResult& r : results) {
        if (r.passed) {
            std::cout << "ok   " << r.name;
            if (!r.detail.empty()) std::cout << " (" << r.detail << ")";
            std::cout << "\n";
        } else {
            ++failed;
            std::cout << "FAIL " << r.name << ": " << r.detail << "\n";
        }
    }
    std::cout << results.size() - failed << "/" << results.size() << " checks passed\n";
    if (!args.out.empty()) melora::write_file_atomic(args.out, melora::verify_csv(results));
    if (results.empty()) {
        std::cerr << "no checks matched filter '" << args.filter << "'\n";
        return kExitUsage;
    }
    return failed == 0 ? kExitOk : kExitCheckFailed;
}

struct CountParamsArgs {
    std::string presets_path = MELORA_DEFAULT_PRESETS;
    std::string preset;
    std::size_t d = 0;
    std::size_t layers = 0;
    std::string matrices = "q,v";
    std::string mode = "lora";
    std::size_t n = 1;
    std::size_t r = 8;
    std::uint64_t seed = 42;
    std::string out;
};

int cmd_count_params(const CountParamsArgs& args) {
    melora::ModelShape shape;
    if (!args.preset.empty()) {
        const auto shapes = melora::load_model_shapes(args.presets_path);
        const melora::ModelShape* found = melora::find_shape(shapes, args.preset);
        if (!found) {
            std::cerr << "unknown preset '" << args.preset << "' in " << args.presets_path
                      << "\n";
            return kExitUsage;
        }
        shape = *found;
    } else {
        if (args.d == 0 || args.layers == 0) {
            std::cerr << "need either --preset or both --d and --layers\n";
            return kExitUsage;
        }
        shape.name = "custom";
        shape.hidden_dim = args.d;
        shape.num_layers = args.layers;
        for (const std::string& name : melora::detail::split_list(args.matrices))
            shape.per_layer.push_back(melora::MatrixSlot{name, args.d, args.d});
        if (shape.per_layer.empty()) {
            std::cerr << "--matrices must name at least one matrix\n";
            return kExitUsage;
        }
    }

    std::uint64_t total = 0;
    if (args.mode == "ft") {
        if (shape.full_finetune_params == 0) {
            std::cerr << "preset '" << shape.name << "' carries no full_finetune_params\n";
            return kExitUsage;
        }
        total = shape.full_finetune_params;
    } else {
        total = melora::audit_params(shape, parse_mode(args.mode), args.n, args.r);
    }

    std::cout << total << " (~" << human_count(total) << ")\n";
    if (!args.out.empty()) {
        std::ostringstream csv;
        csv << "shape,mode,n,r_mini,params\n"
            << shape.name << "," << args.mode << "," << args.n << "," << args.r << ","
            << total << "\n";
        melora::write_file_atomic(args.out, csv.str());
    }
    return kExitOk;
}

struct AnalyzeRankArgs {
    std::string checkpoint;
    double threshold = 0.1;
    bool unscaled = false;
    std::uint64_t seed = 42;
    std::string out;
};

int cmd_analyze_rank(const AnalyzeRankArgs& args) {
    const melora::Checkpoint ck = melora::load_checkpoint(args.checkpoint);

    melora::RankReportRow row;
    row.matrix_name = std::filesystem::path(args.checkpoint).stem().string();
    row.mode = ck.kind;
    if (const auto* l = std::get_if<melora::LoraAdapter>(&ck.adapter)) {
        row.n = 1;
        row.r_mini = l->rank;
        row.params = melora::count_params(l->d_in(), l->d_out(), 1, l->rank);
        row.equivalent_rank = l->rank;
        row.sv_count =
            melora::rank_profile(*l, args.threshold, !args.unscaled).count_above;
    } else {
        const auto& m = std::get<melora::MeloraAdapter>(ck.adapter);
        row.n = m.n;
        row.r_mini = m.r_mini;
        row.params = melora::count_params(m.d_in, m.d_out, m.n, m.r_mini);
        row.equivalent_rank = melora::equivalent_rank(m.n, m.r_mini);
        row.sv_count =
            melora::rank_profile(m, args.threshold, !args.unscaled).count_above;
    }

    const std::string csv = melora::rank_report_csv({row});
    std::cout << csv;
    if (!args.out.empty()) melora::write_file_atomic(args.out, csv);
    return kExitOk;
}

struct DemoRankArgs {
    std::size_t stacked = 4;
    std::size_t r = 2;
    std::size_t d = 32;
    std::vector<double> overlaps{0.0, 0.25, 0.5, 0.75, 1.0};
    std::uint64_t seed = 42;
    std::string out;
};

int cmd_demo_rank(const DemoRankArgs& args) {
    const std::size_t diag_rank =
        melora::parallel_stack_rank(args.stacked, args.r, args.d, args.seed);
    std::string csv = "overlap,summed_rank,block_diag_rank\n";
    for (double overlap : args.overlaps) {
        const std::size_t summed =
            melora::serial_stack_rank_demo(args.stacked, args.r, args.d, overlap, args.seed);
        std::cout << "overlap " << fmt(overlap) << ": summed rank " << summed
                  << ", block-diagonal rank " << diag_rank << "\n";
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%.12g,%zu,%zu\n", overlap, summed, diag_rank);
        csv += buf;
    }
    if (!args.out.empty()) melora::write_file_atomic(args.out, csv);
    return kExitOk;
}

struct TrainArgs {
    std::string task = "recovery";
    std::string mode = "melora";
    std::size_t n = 4;
    std::size_t r = 1;
    double alpha = 16.0;
    double dropout = 0.0;
    std::size_t d = 64;
    std::size_t classes = 16;
    std::size_t vocab = 16;
    std::size_t seq = 8;
    std::size_t teacher_rank = 4;
    bool dense_teacher = false;
    double lr = 0.02;
    std::size_t warmup = 100;
    std::size_t steps = 2000;
    std::size_t batch = 32;
    std::size_t test_batch = 1024;
    double weight_decay = 0.0;
    double threshold = 0.1;
    std::uint64_t seed = 42;
    std::string out;
    std::string rank_out;
    std::string save_checkpoint_path;
    bool timing = false;
};

int cmd_train(const TrainArgs& args) {
    melora::AdapterSpec spec;
    spec.kind = parse_mode(args.mode);
    spec.n = args.n;
    spec.r = args.r;
    spec.alpha = args.alpha;
    spec.dropout = args.dropout;

    melora::TrainReport train_report;
    std::vector<melora::RankReportRow> rank_rows;
    const auto save_adapter = [&](const std::string& path,
                                  const std::variant<melora::LoraAdapter,
                                                     melora::MeloraAdapter>& ad) {
        std::visit([&](const auto& a) { melora::save_checkpoint(path, a, args.seed); },
                   ad);
    };

    if (args.task == "recovery") {
        melora::RecoveryConfig cfg;
        cfg.d = args.d;
        cfg.teacher_rank = args.teacher_rank;
        cfg.block_compatible = !args.dense_teacher;
        cfg.adapter = spec;
        cfg.lr = args.lr;
        cfg.warmup = args.warmup;
        cfg.steps = args.steps;
        cfg.batch = args.batch;
        cfg.test_batch = args.test_batch;
        cfg.weight_decay = args.weight_decay;
        cfg.threshold = args.threshold;
        cfg.seed = args.seed;
        const melora::RecoveryReport rep = melora::run_recovery(cfg);
        train_report = rep.train_report;
        std::cout << "task recovery: test mse " << fmt(rep.test_mse) << ", params "
                  << rep.params << ", equivalent rank " << rep.equiv_rank
                  << ", sv>threshold " << rep.profile.count_above << "\n";
        std::cout << "rank-" << rep.equiv_rank << " floor from teacher spectrum: "
                  << fmt(rep.ey_floor) << "\n";
        std::cout << "wall " << fmt(rep.train_report.total_wall_ms) << " ms\n";
        rank_rows.push_back({"delta_w", spec.kind, spec.n, spec.r, rep.params,
                             rep.equiv_rank, rep.profile.count_above});
        if (!args.save_checkpoint_path.empty())
            save_adapter(args.save_checkpoint_path, rep.trained_adapter);
    } else if (args.task == "classify") {
        melora::ClassifyConfig cfg;
        cfg.d = args.d;
        cfg.classes = args.classes;
        cfg.teacher_rank = args.teacher_rank;
        cfg.adapter = spec;
        cfg.lr = args.lr;
        cfg.warmup = args.warmup;
        cfg.steps = args.steps;
        cfg.batch = args.batch;
        cfg.test_batch = args.test_batch;
        cfg.weight_decay = args.weight_decay;
        cfg.threshold = args.threshold;
        cfg.seed = args.seed;
        const melora::ClassifyReport rep = melora::run_classify(cfg);
        train_report = rep.train_report;
        std::cout << "task classify: accuracy " << fmt(rep.accuracy) << " (baseline "
                  << fmt(rep.baseline_accuracy) << "), params " << rep.params
                  << ", equivalent rank " << rep.equiv_rank << ", sv>threshold "
                  << rep.profile.count_above << "\n";
        std::cout << "wall " << fmt(rep.train_report.total_wall_ms) << " ms\n";
        rank_rows.push_back({"delta_w", spec.kind, spec.n, spec.r, rep.params,
                             rep.equiv_rank, rep.profile.count_above});
        if (!args.save_checkpoint_path.empty())
            save_adapter(args.save_checkpoint_path, rep.trained_adapter);
    } else if (args.task == "attention") {
        melora::AttentionConfig cfg;
        cfg.d = args.d;
        cfg.vocab = args.vocab;
        cfg.seq = args.seq;
        cfg.adapter = spec;
        cfg.lr = args.lr;
        cfg.warmup = args.warmup;
        cfg.steps = args.steps;
        cfg.batch = args.batch;
        cfg.test_batch = args.test_batch;
        cfg.weight_decay = args.weight_decay;
        cfg.threshold = args.threshold;
        cfg.seed = args.seed;
        const melora::AttentionReport rep = melora::run_attention(cfg);
        train_report = rep.train_report;
        std::cout << "task attention: accuracy " << fmt(rep.accuracy) << " (baseline "
                  << fmt(rep.baseline_accuracy) << "), params " << rep.params
                  << ", equivalent rank " << rep.equiv_rank << "\n";
        std::cout << "w_q sv>threshold " << rep.q_profile.count_above
                  << ", w_v sv>threshold " << rep.v_profile.count_above << "\n";
        std::cout << "wall " << fmt(rep.train_report.total_wall_ms) << " ms\n";
        const std::uint64_t per =
            melora::spec_param_count(args.d, args.d, spec);
        rank_rows.push_back({"w_q", spec.kind, spec.n, spec.r, per,
                             rep.equiv_rank, rep.q_profile.count_above});
        rank_rows.push_back({"w_v", spec.kind, spec.n, spec.r, per,
                             rep.equiv_rank, rep.v_profile.count_above});
        if (!args.save_checkpoint_path.empty()) {
            // Two adapted matrices, two files: <path> for Q, <path>.v for V.
            save_adapter(args.save_checkpoint_path, rep.trained_q);
            save_adapter(args.save_checkpoint_path + ".v", rep.trained_v);
        }
    } else {
        std::cerr << "unknown task '" << args.task
                  << "' (expected recovery, classify or attention)\n";
        return kExitUsage;
    }

    if (!args.out.empty()) {
        std::ostringstream os;
        train_report.write_csv(os, args.timing);
        melora::write_file_atomic(args.out, os.str());
    }
    if (!args.rank_out.empty()) {
        melora::write_file_atomic(args.rank_out, melora::rank_report_csv(rank_rows));
    }
    return kExitOk;
}

struct SweepArgs {
    std::string config;
    std::size_t jobs = 1;
    bool timing = false;
    std::uint64_t seed = 42;
    std::string out = "sweep.csv";
};

int cmd_sweep(const SweepArgs& args) {
    const melora::KeyValueConfig kv = melora::KeyValueConfig::parse_file(args.config);
    melora::SweepConfig cfg = melora::parse_sweep_config(kv, args.seed);
    cfg.jobs = args.jobs;
    const std::vector<melora::SweepRow> rows = melora::run_sweep(cfg);
    melora::write_file_atomic(args.out, melora::sweep_csv(rows, args.timing));

    std::size_t failures = 0;
    for (const melora::SweepRow& r : rows) {
        if (r.failed) {
            ++failures;
            std::cerr << "run failed (n=" << r.n << ", r=" << r.r << ", seed="
                      << r.seed_label << "): " << r.error << "\n";
        }
    }
    std::cout << rows.size() << " rows written to " << args.out;
    if (failures > 0) std::cout << " (" << failures << " failed runs)";
    std::cout << "\n";
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Block-diagonal mini-ensemble low-rank adapters: rank algebra, "
                 "training harness and cost audits"};
    app.require_subcommand(1);

    VerifyArgs verify_args;
    CLI::App* verify = app.add_subcommand("verify", "run the invariant suites");
    verify->add_option("--seed", verify_args.seed, "base seed")->capture_default_str();
    verify->add_option("--out", verify_args.out, "write check results CSV here");
    verify->add_option("--filter", verify_args.filter, "substring filter on check names");
    verify->add_option("--sabotage", verify_args.sabotage,
                       "inject a known fault (test hook): rank-additivity");

    CountParamsArgs count_args;
    CLI::App* count = app.add_subcommand("count-params", "audit trainable parameters");
    count->add_option("--presets", count_args.presets_path, "model shape preset file")
        ->capture_default_str();
    count->add_option("--preset", count_args.preset, "preset name, e.g. roberta-base-qv");
    count->add_option("--d", count_args.d, "hidden dim for a custom shape");
    count->add_option("--layers", count_args.layers, "layer count for a custom shape");
    count->add_option("--matrices", count_args.matrices,
                      "adapted matrices per layer (comma list)")
        ->capture_default_str();
    count->add_option("--mode", count_args.mode, "lora | melora | ft")
        ->capture_default_str();
    count->add_option("--n", count_args.n, "mini adapter count")->capture_default_str();
    count->add_option("--r", count_args.r, "rank (per mini for melora)")
        ->capture_default_str();
    count->add_option("--seed", count_args.seed, "unused; accepted for uniformity")
        ->capture_default_str();
    count->add_option("--out", count_args.out, "write a one-row CSV here");

    AnalyzeRankArgs rank_args;
    CLI::App* analyze = app.add_subcommand("analyze-rank",
                                           "singular-value profile of a checkpoint");
    analyze->add_option("--checkpoint", rank_args.checkpoint, "adapter checkpoint path")
        ->required();
    analyze->add_option("--threshold", rank_args.threshold,
                        "count singular values strictly above this")
        ->capture_default_str();
    analyze->add_flag("--unscaled", rank_args.unscaled,
                      "profile raw B*A without the alpha/r scale");
    analyze->add_option("--seed", rank_args.seed, "unused; accepted for uniformity")
        ->capture_default_str();
    analyze->add_option("--out", rank_args.out, "write the profile CSV here");

    DemoRankArgs demo_args;
    CLI::App* demo = app.add_subcommand(
        "demo-rank", "summed vs block-diagonal stacking rank comparison");
    demo->add_option("--stacked", demo_args.stacked, "number of stacked adapters")
        ->capture_default_str();
    demo->add_option("--r", demo_args.r, "rank per adapter")->capture_default_str();
    demo->add_option("--d", demo_args.d, "ambient dimension")->capture_default_str();
    demo->add_option("--overlap", demo_args.overlaps,
                     "column-space overlap fractions to evaluate")
        ->expected(-1);
    demo->add_option("--seed", demo_args.seed, "base seed")->capture_default_str();
    demo->add_option("--out", demo_args.out, "write comparison CSV here");

    TrainArgs train_args;
    CLI::App* train_cmd = app.add_subcommand("train", "run one desk-scale experiment");
    train_cmd->add_option("--task", train_args.task, "recovery | classify | attention")
        ->capture_default_str();
    train_cmd->add_option("--mode", train_args.mode, "lora | melora")
        ->capture_default_str();
    train_cmd->add_option("--n", train_args.n, "mini adapter count")->capture_default_str();
    train_cmd->add_option("--r", train_args.r, "rank per mini")->capture_default_str();
    train_cmd->add_option("--alpha", train_args.alpha, "adapter scale numerator")
        ->capture_default_str();
    train_cmd->add_option("--dropout", train_args.dropout, "adapter-branch dropout")
        ->capture_default_str();
    train_cmd->add_option("--d", train_args.d, "feature dimension")->capture_default_str();
    train_cmd->add_option("--classes", train_args.classes, "classify: class count")
        ->capture_default_str();
    train_cmd->add_option("--vocab", train_args.vocab, "attention: vocabulary size")
        ->capture_default_str();
    train_cmd->add_option("--seq", train_args.seq, "attention: sequence length")
        ->capture_default_str();
    train_cmd->add_option("--teacher-rank", train_args.teacher_rank,
                          "true update rank of the teacher")
        ->capture_default_str();
    train_cmd->add_flag("--dense-teacher", train_args.dense_teacher,
                        "use a dense low-rank teacher instead of block-compatible");
    train_cmd->add_option("--lr", train_args.lr, "peak learning rate")
        ->capture_default_str();
    train_cmd->add_option("--warmup", train_args.warmup, "linear warmup steps")
        ->capture_default_str();
    train_cmd->add_option("--steps", train_args.steps, "training steps")
        ->capture_default_str();
    train_cmd->add_option("--batch", train_args.batch, "batch size")
        ->capture_default_str();
    train_cmd->add_option("--test-batch", train_args.test_batch, "held-out batch size")
        ->capture_default_str();
    train_cmd->add_option("--weight-decay", train_args.weight_decay,
                          "decoupled weight decay")
        ->capture_default_str();
    train_cmd->add_option("--threshold", train_args.threshold,
                          "singular value count threshold")
        ->capture_default_str();
    train_cmd->add_option("--seed", train_args.seed, "run seed")->capture_default_str();
    train_cmd->add_option("--out", train_args.out, "write per-step training CSV here");
    train_cmd->add_option("--rank-out", train_args.rank_out,
                          "write rank profile CSV here");
    train_cmd->add_option("--save-checkpoint", train_args.save_checkpoint_path,
                          "write the trained adapter checkpoint here");
    train_cmd->add_flag("--timing", train_args.timing,
                        "emit measured wall times in CSV output");

    SweepArgs sweep_args;
    CLI::App* sweep = app.add_subcommand("sweep", "grid of runs over n, r and seeds");
    sweep->add_option("--config", sweep_args.config, "sweep config file")->required();
    sweep->add_option("--jobs", sweep_args.jobs, "parallel workers")
        ->capture_default_str();
    sweep->add_flag("--timing", sweep_args.timing,
                    "emit measured wall times in CSV output");
    sweep->add_option("--seed", sweep_args.seed,
                      "fallback seed when the config lists none")
        ->capture_default_str();
    sweep->add_option("--out", sweep_args.out, "output CSV path")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (verify->parsed()) return cmd_verify(verify_args);
        if (count->parsed()) return cmd_count_params(count_args);
        if (analyze->parsed()) return cmd_analyze_rank(rank_args);
        if (demo->parsed()) return cmd_demo_rank(demo_args);
        if (train_cmd->parsed()) return cmd_train(train_args);
        if (sweep->parsed()) return cmd_sweep(sweep_args);
    } catch (const melora::FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kExitIo;
    } catch (const melora::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const melora::DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCheckFailed;
    } catch (const melora::ConvergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCheckFailed;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitCheckFailed;
    }
    return kExitUsage;
}
