#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "melora/checkpoint.hpp"
#include "melora/io.hpp"

using namespace melora;

namespace {

namespace fs = std::filesystem;

struct RunResult {
    int exit_code = -1;
    std::string output; // stdout + stderr
};

fs::path scratch_dir() {
    const fs::path dir = fs::temp_directory_path() / "melora-cli-tests";
    fs::create_directories(dir);
    return dir;
}

RunResult run_cli(const std::string& args) {
    const fs::path out_file = scratch_dir() / "cli-output.txt";
    const std::string cmd =
        std::string(MELORA_CLI_PATH) + " " + args + " > " + out_file.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(out_file);
    r.output.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    return r;
}

} // namespace

TEST_CASE("help exits zero and lists every subcommand", "[cli]") {
    const RunResult r = run_cli("--help");
    CHECK(r.exit_code == 0);
    for (const char* cmd :
         {"verify", "count-params", "analyze-rank", "demo-rank", "train", "sweep"}) {
        CHECK(r.output.find(cmd) != std::string::npos);
    }
    CHECK(run_cli("count-params --help").exit_code == 0);
    CHECK(run_cli("sweep --help").exit_code == 0);
}

TEST_CASE("missing subcommands and unknown flags are usage errors", "[cli]") {
    CHECK(run_cli("").exit_code == 2);
    CHECK(run_cli("count-params --no-such-flag 1").exit_code == 2);
    CHECK(run_cli("frobnicate").exit_code == 2);
}

TEST_CASE("count-params prints exact and rounded totals", "[cli]") {
    const std::string presets = std::string("--presets ") + MELORA_PRESETS_PATH;
    RunResult r =
        run_cli("count-params " + presets + " --preset roberta-base-qv --mode lora --r 8");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("294912 (~295k)") != std::string::npos);

    r = run_cli("count-params " + presets +
                " --preset roberta-base-qv --mode melora --r 1 --n 8");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("36864 (~36.9k)") != std::string::npos);

    r = run_cli("count-params " + presets +
                " --preset llama2-7b-qv --mode melora --r 1 --n 16");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("524288 (~524k)") != std::string::npos);

    r = run_cli("count-params " + presets + " --preset llama2-7b-qv --mode lora --r 64");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("33554432 (~33.6M)") != std::string::npos);

    r = run_cli("count-params " + presets + " --preset llama2-7b-qv --mode ft");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("7000000000 (~7B)") != std::string::npos);

    // custom shape path, no preset file involved
    r = run_cli("count-params --d 768 --layers 12 --matrices q,v --mode lora --r 8");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("294912 (~295k)") != std::string::npos);
}

TEST_CASE("count-params rejects bad shapes and presets", "[cli]") {
    const std::string presets = std::string("--presets ") + MELORA_PRESETS_PATH;
    CHECK(run_cli("count-params " + presets +
                  " --preset roberta-base-qv --mode melora --r 1 --n 5")
              .exit_code == 2);
    CHECK(run_cli("count-params " + presets + " --preset nope --mode lora --r 8")
              .exit_code == 2);
    CHECK(run_cli("count-params --mode lora --r 8").exit_code == 2);
}

TEST_CASE("analyze-rank reads checkpoints end to end", "[cli]") {
    const fs::path dir = scratch_dir();

    const fs::path fresh = dir / "fresh.ckpt";
    save_checkpoint(fresh, init_melora(32, 32, 8, 1, 16.0, 3), 3);
    RunResult r = run_cli("analyze-rank --checkpoint " + fresh.string());
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("fresh,melora,8,1,64,8,0") != std::string::npos);

    MeloraAdapter filled = init_melora(32, 32, 8, 1, 16.0, 3);
    GaussianRng rng(5);
    fill_gaussian(filled, rng);
    const fs::path trained = dir / "filled.ckpt";
    save_checkpoint(trained, filled, 3);
    r = run_cli("analyze-rank --checkpoint " + trained.string() + " --threshold 1e-8");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("filled,melora,8,1,64,8,8") != std::string::npos);
}

TEST_CASE("analyze-rank maps format problems to exit 3", "[cli]") {
    const fs::path dir = scratch_dir();

    const fs::path bad = dir / "bad.ckpt";
    write_file_atomic(bad, "JUNKJUNKJUNKJUNK");
    RunResult r = run_cli("analyze-rank --checkpoint " + bad.string());
    CHECK(r.exit_code == 3);
    CHECK(r.output.find("magic") != std::string::npos);

    const fs::path trunc = dir / "trunc.ckpt";
    save_checkpoint(trunc, init_melora(16, 16, 2, 1, 16.0, 1), 1);
    std::string bytes = read_file_bytes(trunc);
    bytes.resize(bytes.size() / 2);
    write_file_atomic(trunc, bytes);
    r = run_cli("analyze-rank --checkpoint " + trunc.string());
    CHECK(r.exit_code == 3);
    CHECK(r.output.find("unexpected end of file") != std::string::npos);

    CHECK(run_cli("analyze-rank --checkpoint " + (dir / "none.ckpt").string())
              .exit_code == 3);
}

TEST_CASE("verify passes on a healthy build and honours --filter", "[cli]") {
    RunResult r = run_cli("verify");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("FAIL") == std::string::npos);
    CHECK(r.output.find("eq4-diag-additivity") != std::string::npos);

    r = run_cli("verify --filter eq5");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("eq5-form-equivalence") != std::string::npos);
    CHECK(r.output.find("eq2-rank-subadditivity") == std::string::npos);

    CHECK(run_cli("verify --filter no-such-check").exit_code == 2);
}

TEST_CASE("verify sabotage hook trips the named check", "[cli]") {
    const RunResult r = run_cli("verify --sabotage rank-additivity");
    CHECK(r.exit_code == 1);
    CHECK(r.output.find("FAIL eq4-diag-additivity") != std::string::npos);
    CHECK(run_cli("verify --sabotage bogus").exit_code == 2);
}

TEST_CASE("verify writes its CSV through the atomic path", "[cli]") {
    const fs::path out = scratch_dir() / "verify.csv";
    const RunResult r = run_cli("verify --filter eq5 --out " + out.string());
    CHECK(r.exit_code == 0);
    const std::string csv = read_file_bytes(out);
    CHECK(csv.rfind("check,outcome,detail\n", 0) == 0);
    CHECK(csv.find("eq5-form-equivalence,pass") != std::string::npos);
    CHECK(!fs::exists(out.string() + ".tmp"));
}

TEST_CASE("unwritable --out fails with exit 3 and leaves no partial file", "[cli]") {
    const std::string out = "/nonexistent-dir/melora-out.csv";
    const RunResult r = run_cli("verify --filter eq5 --out " + out);
    CHECK(r.exit_code == 3);
    CHECK(!fs::exists(out));
}

TEST_CASE("demo-rank prints the stacking comparison", "[cli]") {
    const RunResult r = run_cli("demo-rank --stacked 4 --r 2 --d 32 --overlap 1.0");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("summed rank 2") != std::string::npos);
    CHECK(r.output.find("block-diagonal rank 8") != std::string::npos);
}

TEST_CASE("train runs a short recovery and saves artifacts", "[cli]") {
    const fs::path dir = scratch_dir();
    const fs::path out = dir / "train.csv";
    const fs::path rank_out = dir / "rank.csv";
    const fs::path ckpt = dir / "trained.ckpt";
    const RunResult r = run_cli(
        "train --task recovery --mode melora --n 4 --r 1 --d 32 --teacher-rank 4 "
        "--steps 60 --warmup 10 --batch 8 --test-batch 64 --out " +
        out.string() + " --rank-out " + rank_out.string() + " --save-checkpoint " +
        ckpt.string());
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("test mse") != std::string::npos);

    const std::string csv = read_file_bytes(out);
    CHECK(csv.rfind("step,lr,loss,grad_norm,wall_ms\n", 0) == 0);
    const std::string rank_csv = read_file_bytes(rank_out);
    CHECK(rank_csv.find("delta_w,melora,4,1,64,4,") != std::string::npos);

    const Checkpoint ck = load_checkpoint(ckpt);
    CHECK(ck.kind == AdapterKind::melora);
}

TEST_CASE("sweep is byte-identical across reruns by default", "[cli]") {
    const fs::path dir = scratch_dir();
    const fs::path cfg = dir / "sweep.cfg";
    write_file_atomic(cfg,
                      "task = recovery\nmode = melora\nn = 1,2\nr_mini = 1\n"
                      "seeds = 1,2\nd = 16\nteacher_rank = 2\nsteps = 40\nwarmup = 5\n"
                      "batch = 8\ntest_batch = 64\n");
    const fs::path out1 = dir / "sweep1.csv";
    const fs::path out2 = dir / "sweep2.csv";
    CHECK(run_cli("sweep --config " + cfg.string() + " --out " + out1.string())
              .exit_code == 0);
    CHECK(run_cli("sweep --config " + cfg.string() + " --out " + out2.string())
              .exit_code == 0);
    const std::string b1 = read_file_bytes(out1);
    const std::string b2 = read_file_bytes(out2);
    REQUIRE(!b1.empty());
    REQUIRE(b1 == b2);
    CHECK(b1.rfind("task,mode,n,r_mini,alpha,seed,", 0) == 0);
}

TEST_CASE("sweep rejects malformed configs with exit 3", "[cli]") {
    const fs::path cfg = scratch_dir() / "bad-sweep.cfg";
    write_file_atomic(cfg, "task = recovery\nmystery = 1\n");
    const RunResult r = run_cli("sweep --config " + cfg.string());
    CHECK(r.exit_code == 3);
    CHECK(r.output.find("mystery") != std::string::npos);
}
