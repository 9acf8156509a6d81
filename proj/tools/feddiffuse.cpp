// Experiment runner: `run` trains and scores one configuration, `sweep`
// repeats it along one axis, `fixture` materializes the synthetic dataset as
// IDX files.  Flags override config-file values; a resolved snapshot of the
// final configuration is written next to the other artifacts.

#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include "feddiffuse/feddiffuse.hpp"

namespace {

struct CliOptions {
    std::string config_path;
    bool desk_scale = false;
    std::string out = "out";

    std::string method, partition, optimizer, precision, data_dir;
    int clients = 0, rounds = 0, epochs = 0, batch = 0, timesteps = 0;
    int samples = 0, seed_index = 0;
    double lr = 0.0, dirichlet_beta = 0.0;
    std::uint64_t seed = 0;
    std::size_t subset = 0, fixture_count = 0;
};

// defaults -> config file -> desk-scale preset -> explicit flags
feddiffuse::ExperimentConfig resolve(const CLI::App& cmd, const CliOptions& opt) {
    feddiffuse::ExperimentConfig cfg;
    if (cmd.count("--config")) cfg = feddiffuse::load_experiment_config(opt.config_path);
    if (opt.desk_scale) cfg.apply_desk_scale();
    if (cmd.count("--method")) cfg.fed.method = feddiffuse::parse_method(opt.method);
    if (cmd.count("--clients")) cfg.fed.clients = opt.clients;
    if (cmd.count("--rounds")) cfg.fed.rounds = opt.rounds;
    if (cmd.count("--epochs")) cfg.fed.epochs = opt.epochs;
    if (cmd.count("--batch")) cfg.fed.batch = opt.batch;
    if (cmd.count("--lr")) cfg.fed.lr = opt.lr;
    if (cmd.count("--optimizer")) cfg.fed.optimizer = feddiffuse::parse_optimizer(opt.optimizer);
    if (cmd.count("--partition")) cfg.partition = feddiffuse::parse_partition_kind(opt.partition);
    if (cmd.count("--dirichlet-beta")) cfg.dirichlet_beta = opt.dirichlet_beta;
    if (cmd.count("--timesteps")) cfg.timesteps = opt.timesteps;
    if (cmd.count("--seed")) cfg.seed = opt.seed;
    if (cmd.count("--seed-index")) cfg.seed_index = opt.seed_index;
    if (cmd.count("--samples")) cfg.eval_samples = opt.samples;
    if (cmd.count("--precision")) cfg.model.precision = feddiffuse::parse_precision(opt.precision);
    if (cmd.count("--data-dir")) cfg.data_dir = opt.data_dir;
    if (cmd.count("--subset")) cfg.subset = opt.subset;
    if (cmd.count("--fixture-count")) cfg.fixture_count = opt.fixture_count;
    cfg.validate();
    return cfg;
}

void add_run_flags(CLI::App& cmd, CliOptions& opt) {
    cmd.add_option("--config", opt.config_path, "JSON config file");
    cmd.add_flag("--desk-scale", opt.desk_scale, "CI-speed preset (2000 images, R=3, E=1)");
    cmd.add_option("--method", opt.method, "full|usplit|ulatdec|udec");
    cmd.add_option("--clients", opt.clients, "number of clients K");
    cmd.add_option("--rounds", opt.rounds, "federated rounds R");
    cmd.add_option("--epochs", opt.epochs, "local epochs E");
    cmd.add_option("--batch", opt.batch, "local batch size B");
    cmd.add_option("--lr", opt.lr, "learning rate");
    cmd.add_option("--optimizer", opt.optimizer, "sgd|adam");
    cmd.add_option("--partition", opt.partition, "iid|label-skew|quantity-skew");
    cmd.add_option("--dirichlet-beta", opt.dirichlet_beta, "Dirichlet concentration");
    cmd.add_option("--timesteps", opt.timesteps, "diffusion steps T");
    cmd.add_option("--seed", opt.seed, "master seed");
    cmd.add_option("--seed-index", opt.seed_index, "repeat-run index (shares data seed)");
    cmd.add_option("--samples", opt.samples, "evaluation sample count");
    cmd.add_option("--precision", opt.precision, "f32|f64 compute precision");
    cmd.add_option("--data-dir", opt.data_dir, "IDX dataset directory");
    cmd.add_option("--subset", opt.subset, "restrict to first N images (seeded draw)");
    cmd.add_option("--fixture-count", opt.fixture_count, "synthetic dataset size");
    cmd.add_option("--out", opt.out, "output directory");
}

void warn_empty_shards(const feddiffuse::ExperimentConfig& cfg) {
    const feddiffuse::Dataset ds = feddiffuse::load_experiment_dataset(cfg);
    feddiffuse::PartitionSpec spec;
    spec.kind = cfg.partition;
    spec.clients = cfg.fed.clients;
    spec.beta = cfg.dirichlet_beta;
    spec.seed = cfg.data_seed();
    for (const auto& shard : feddiffuse::make_partition(ds, spec).shards) {
        if (shard.indices.empty()) {
            std::fprintf(stderr, "warning: client %d has an empty shard and will be skipped\n",
                         shard.client);
        }
    }
}

int run_command(const CLI::App& cmd, const CliOptions& opt) {
    const feddiffuse::ExperimentConfig cfg = resolve(cmd, opt);
    warn_empty_shards(cfg);
    const feddiffuse::ExperimentResult res = feddiffuse::run_experiment(cfg, opt.out);
    for (const auto& rm : res.training.metrics) {
        std::printf("round %d  mean_loss %.6f  cumulative_params %llu\n", rm.round, rm.mean_loss,
                    static_cast<unsigned long long>(rm.cumulative_params));
    }
    std::printf("score %.6f (std %.6f)  traffic %llu params  ->  %s\n", res.scores.mean,
                res.scores.stddev, static_cast<unsigned long long>(res.training.ledger.total()),
                opt.out.c_str());
    return 0;
}

int sweep_command(const CLI::App& cmd, const CliOptions& opt, const std::string& axis,
                  const std::vector<std::string>& values, int seeds) {
    const feddiffuse::ExperimentConfig base = resolve(cmd, opt);
    feddiffuse::sweep(base, feddiffuse::parse_sweep_axis(axis), values, seeds, opt.out);
    std::printf("sweep complete  ->  %s/comparison.csv\n", opt.out.c_str());
    return 0;
}

int fixture_command(const std::string& out, std::size_t count, int side, std::uint64_t seed,
                    bool gzip) {
    const feddiffuse::Dataset ds = feddiffuse::make_fixture_dataset(count, side, seed);
    std::filesystem::create_directories(out);
    const char* suffix = gzip ? ".gz" : "";
    const auto images = std::filesystem::path(out) / ("train-images-idx3-ubyte" + std::string(suffix));
    const auto labels = std::filesystem::path(out) / ("train-labels-idx1-ubyte" + std::string(suffix));
    feddiffuse::write_idx(ds, images, labels);
    std::printf("wrote %zu images to %s\n", ds.count(), out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated diffusion training simulator"};
    app.require_subcommand(0, 1);

    CliOptions run_opt;
    add_run_flags(app, run_opt);

    CLI::App* sweep_cmd = app.add_subcommand("sweep", "run one axis over several values");
    CliOptions sweep_opt;
    std::string axis;
    std::vector<std::string> values;
    int sweep_seeds = 3;
    add_run_flags(*sweep_cmd, sweep_opt);
    sweep_cmd->add_option("--axis", axis, "clients|epochs|method|partition")->required();
    sweep_cmd->add_option("--values", values, "comma-separated axis values")
        ->required()
        ->delimiter(',');
    sweep_cmd->add_option("--seeds", sweep_seeds, "repeat runs per value");

    CLI::App* fixture_cmd = app.add_subcommand("fixture", "write the synthetic dataset as IDX");
    std::string fix_out = "data";
    std::size_t fix_count = 60000;
    int fix_side = 28;
    std::uint64_t fix_seed = 0x0f1d5eedULL;
    bool fix_gzip = false;
    fixture_cmd->add_option("--out", fix_out, "output directory");
    fixture_cmd->add_option("--count", fix_count, "number of images");
    fixture_cmd->add_option("--side", fix_side, "image side length");
    fixture_cmd->add_option("--seed", fix_seed, "generator seed");
    fixture_cmd->add_flag("--gzip", fix_gzip, "gzip-compress the IDX files");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*fixture_cmd) return fixture_command(fix_out, fix_count, fix_side, fix_seed, fix_gzip);
        if (*sweep_cmd) return sweep_command(*sweep_cmd, sweep_opt, axis, values, sweep_seeds);
        return run_command(app, run_opt);
    } catch (const feddiffuse::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const feddiffuse::IngestError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const feddiffuse::NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
