// Drives the installed binary as a subprocess, so exit codes, flag parsing,
// and cross-process determinism are checked against the real entry point.
// The harness exports the binary path in FEDDIFFUSE_CLI.

#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include <json.hpp>

#include "feddiffuse/dataset.hpp"
#include "feddiffuse/experiment.hpp"

using namespace feddiffuse;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

int run_cli(const std::string& args, const fs::path& log) {
    const char* cli = std::getenv("FEDDIFFUSE_CLI");
    REQUIRE(cli != nullptr);
    ::unsetenv("FEDDIFFUSE_DATA_DIR");
    const std::string cmd =
        std::string("\"") + cli + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

fs::path write_tiny_config(const fs::path& dir) {
    const fs::path path = dir / "tiny.json";
    std::ofstream out(path);
    out << R"({
  "model": {"base_channels": 4, "depth": 1, "time_embed_dim": 8, "image_side": 8},
  "federation": {"clients": 2, "rounds": 1, "epochs": 1, "batch": 16,
                 "lr": 1e-3, "optimizer": "adam"},
  "diffusion": {"timesteps": 10, "beta_start": 0.01, "beta_end": 0.2},
  "evaluation": {"samples": 8, "sample_grid": 8},
  "data": {"subset": 32, "fixture_count": 64},
  "seed": 42
})";
    return path;
}

}  // namespace

TEST_CASE("the fixture subcommand writes a loadable idx pair") {
    const fs::path dir = fresh_dir("feddiffuse_cli_fixture");
    const int rc = run_cli("fixture --out \"" + (dir / "data").string() +
                               "\" --count 48 --side 8 --seed 123",
                           dir / "log.txt");
    CHECK(rc == 0);
    CHECK(slurp(dir / "log.txt").find("wrote 48 images") != std::string::npos);
    const Dataset ds =
        load_idx(dir / "data" / "train-images-idx3-ubyte", dir / "data" / "train-labels-idx1-ubyte");
    CHECK(ds.count() == 48);
    CHECK(ds.rows == 8);
    CHECK(ds.cols == 8);

    const int gz = run_cli("fixture --out \"" + (dir / "gz").string() +
                               "\" --count 16 --side 8 --seed 123 --gzip",
                           dir / "gzlog.txt");
    CHECK(gz == 0);
    CHECK(fs::exists(dir / "gz" / "train-images-idx3-ubyte.gz"));
    CHECK(fs::exists(dir / "gz" / "train-labels-idx1-ubyte.gz"));
    ExperimentConfig cfg;
    cfg.data_dir = (dir / "gz").string();
    cfg.model.image_side = 8;
    CHECK(load_experiment_dataset(cfg).count() == 16);
    fs::remove_all(dir);
}

TEST_CASE("a run from a config file produces artifacts and a summary") {
    const fs::path dir = fresh_dir("feddiffuse_cli_run");
    const fs::path cfg = write_tiny_config(dir);
    const fs::path out = dir / "out";
    const int rc = run_cli("--config \"" + cfg.string() + "\" --out \"" + out.string() + "\"",
                           dir / "log.txt");
    CHECK(rc == 0);
    CHECK(fs::exists(out / "metrics.csv"));
    CHECK(fs::exists(out / "ledger.json"));
    CHECK(fs::exists(out / "partition.json"));
    CHECK(fs::exists(out / "resolved_config.json"));
    CHECK(fs::exists(out / "samples" / "global.pgm"));
    CHECK(fs::exists(out / "checkpoints" / "global.bin"));
    const std::string log = slurp(dir / "log.txt");
    CHECK(log.find("round 1") != std::string::npos);
    CHECK(log.find("score") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("independent processes produce identical artifacts") {
    const fs::path dir = fresh_dir("feddiffuse_cli_repro");
    const fs::path cfg = write_tiny_config(dir);
    const std::string base = "--config \"" + cfg.string() + "\" --method udec --out \"";
    REQUIRE(run_cli(base + (dir / "a").string() + "\"", dir / "a.log") == 0);
    REQUIRE(run_cli(base + (dir / "b").string() + "\"", dir / "b.log") == 0);
    CHECK(slurp(dir / "a" / "metrics.csv") == slurp(dir / "b" / "metrics.csv"));
    CHECK(slurp(dir / "a" / "ledger.json") == slurp(dir / "b" / "ledger.json"));
    CHECK(slurp(dir / "a" / "partition.json") == slurp(dir / "b" / "partition.json"));
    CHECK(slurp(dir / "a" / "resolved_config.json") == slurp(dir / "b" / "resolved_config.json"));
    CHECK(slurp(dir / "a" / "checkpoints" / "client_0.bin") ==
          slurp(dir / "b" / "checkpoints" / "client_0.bin"));
    fs::remove_all(dir);
}

TEST_CASE("flags override config file values") {
    const fs::path dir = fresh_dir("feddiffuse_cli_flags");
    const fs::path cfg = write_tiny_config(dir);
    const fs::path data = dir / "data";
    REQUIRE(run_cli("fixture --out \"" + data.string() + "\" --count 48 --side 8 --seed 7",
                    dir / "fix.log") == 0);
    const fs::path out = dir / "out";
    const int rc = run_cli("--config \"" + cfg.string() + "\" --data-dir \"" + data.string() +
                               "\" --subset 0 --clients 3 --out \"" + out.string() + "\"",
                           dir / "log.txt");
    REQUIRE(rc == 0);
    const nlohmann::json part = nlohmann::json::parse(slurp(out / "partition.json"));
    REQUIRE(part.at("shards").size() == 3);
    std::size_t covered = 0;
    for (const auto& shard : part.at("shards")) covered += shard.at("size").get<std::size_t>();
    CHECK(covered == 48);
    fs::remove_all(dir);
}

TEST_CASE("configuration errors exit with status two") {
    const fs::path dir = fresh_dir("feddiffuse_cli_errors");
    const fs::path cfg = write_tiny_config(dir);
    SECTION("splitting needs at least two clients") {
        const int rc = run_cli("--config \"" + cfg.string() + "\" --method usplit --clients 1",
                               dir / "log.txt");
        CHECK(rc == 2);
        CHECK(slurp(dir / "log.txt").find("error:") != std::string::npos);
    }
    SECTION("unknown method names are rejected") {
        CHECK(run_cli("--config \"" + cfg.string() + "\" --method fedavg", dir / "log.txt") == 2);
    }
    SECTION("unknown flags fail parsing") {
        CHECK(run_cli("--config \"" + cfg.string() + "\" --warmup 5", dir / "log.txt") != 0);
    }
    fs::remove_all(dir);
}

TEST_CASE("a missing dataset directory exits with status three") {
    const fs::path dir = fresh_dir("feddiffuse_cli_nodata");
    const fs::path cfg = write_tiny_config(dir);
    const int rc = run_cli("--config \"" + cfg.string() + "\" --data-dir \"" +
                               (dir / "nowhere").string() + "\"",
                           dir / "log.txt");
    CHECK(rc == 3);
    CHECK(slurp(dir / "log.txt").find("no IDX pair") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("the sweep subcommand writes a comparison table") {
    const fs::path dir = fresh_dir("feddiffuse_cli_sweep");
    const fs::path cfg = write_tiny_config(dir);
    const fs::path out = dir / "sweep";
    const int rc = run_cli("sweep --config \"" + cfg.string() +
                               "\" --axis method --values full,udec --seeds 1 --out \"" +
                               out.string() + "\"",
                           dir / "log.txt");
    REQUIRE(rc == 0);
    const std::string csv = slurp(out / "comparison.csv");
    CHECK(csv.rfind("method,clients,epochs,partition,traffic,score_mean,score_std\n", 0) == 0);
    CHECK(csv.find("\nfull,") != std::string::npos);
    CHECK(csv.find("\nudec,") != std::string::npos);
    CHECK(fs::exists(out / "method=full" / "seed=0" / "metrics.csv"));
    fs::remove_all(dir);
}
