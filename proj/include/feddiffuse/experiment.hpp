#pragma once

#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "feddiffuse/checkpoint.hpp"
#include "feddiffuse/dataset.hpp"
#include "feddiffuse/errors.hpp"
#include "feddiffuse/evaluation.hpp"
#include "feddiffuse/federation.hpp"
#include "feddiffuse/fixture.hpp"
#include "feddiffuse/model.hpp"
#include "feddiffuse/partition.hpp"
#include "feddiffuse/rng.hpp"
#include "feddiffuse/schedule.hpp"

namespace feddiffuse {

inline Method parse_method(const std::string& s) {
    if (s == "full") return Method::full;
    if (s == "usplit") return Method::usplit;
    if (s == "ulatdec") return Method::ulatdec;
    if (s == "udec") return Method::udec;
    throw ConfigError("method: expected one of full|usplit|ulatdec|udec, got '" + s + "'");
}

inline PartitionKind parse_partition_kind(const std::string& s) {
    if (s == "iid") return PartitionKind::iid;
    if (s == "label-skew") return PartitionKind::label_skew;
    if (s == "quantity-skew") return PartitionKind::quantity_skew;
    throw ConfigError("partition: expected one of iid|label-skew|quantity-skew, got '" + s + "'");
}

inline OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    throw ConfigError("optimizer: expected sgd|adam, got '" + s + "'");
}

inline Precision parse_precision(const std::string& s) {
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    throw ConfigError("precision: expected f32|f64, got '" + s + "'");
}

// Everything a run depends on.  `seed` is the master seed; the partition,
// training, and evaluation streams are derived from it (with `seed_index`
// distinguishing repeat runs that must share data and partition).
struct ExperimentConfig {
    ModelConfig model;
    FederationConfig fed;  // fed.seed is derived from `seed` at run time
    int timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    PartitionKind partition = PartitionKind::iid;
    double dirichlet_beta = 0.5;
    FeatureKind extractor = FeatureKind::raw_pixels;
    int feature_cap = 256;
    int eval_samples = 512;
    int sample_grid = 64;
    std::string data_dir;             // IDX directory; empty -> env var -> fixture
    std::size_t subset = 0;           // 0 = whole dataset
    std::size_t fixture_count = 60000;
    std::uint64_t seed = 0;
    int seed_index = 0;

    std::uint64_t data_seed() const { return derive_seed(seed, stream_tag::data); }
    std::uint64_t training_seed() const {
        return derive_seed(seed, stream_tag::training, static_cast<std::uint64_t>(seed_index));
    }
    std::uint64_t evaluation_seed() const { return derive_seed(seed, stream_tag::evaluation); }

    // CI-speed preset: small subset, short round budget, and a shortened
    // noising chain whose total variance injection matches the full-length
    // default (alpha_bar_T stays ~1e-4).
    void apply_desk_scale() {
        subset = 2000;
        fed.rounds = 3;
        fed.epochs = 1;
        eval_samples = 128;
        timesteps = 100;
        beta_start = 1e-3;
        beta_end = 0.18;
    }

    void validate() const {
        model.validate();
        fed.validate();
        if (timesteps < 1) throw ConfigError("diffusion: timesteps must be >= 1");
        if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
            throw ConfigError("diffusion: need 0 < beta_start <= beta_end < 1");
        }
        if (partition != PartitionKind::iid && !(dirichlet_beta > 0.0)) {
            throw ConfigError("partition: dirichlet_beta must be > 0");
        }
        if (eval_samples < 2) throw ConfigError("evaluation: samples must be >= 2");
        if (sample_grid < 1) throw ConfigError("evaluation: sample_grid must be >= 1");
        if (feature_cap < 1) throw ConfigError("evaluation: feature_cap must be >= 1");
        if (seed_index < 0) throw ConfigError("seed_index must be >= 0");
        if (fixture_count < 1) throw ConfigError("data: fixture_count must be >= 1");
    }
};

namespace detail {

inline void check_keys(const nlohmann::json& obj, const char* section,
                       std::initializer_list<const char*> allowed) {
    for (const auto& [key, value] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed) {
            if (key == a) {
                ok = true;
                break;
            }
        }
        if (!ok) {
            throw ConfigError(std::string("config: unknown key '") + key + "' in section '" +
                              section + "'");
        }
    }
}

template <typename T>
void maybe(const nlohmann::json& obj, const char* key, T& out) {
    if (obj.contains(key)) {
        try {
            out = obj.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(std::string("config: bad value for '") + key + "'");
        }
    }
}

inline void maybe_str(const nlohmann::json& obj, const char* key, std::string& out) {
    maybe<std::string>(obj, key, out);
}

// Shortest round-trippable decimal form, so repeated emission is stable.
inline std::string fmt_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    double back = std::strtod(buf, nullptr);
    for (int prec = 1; prec < 17; ++prec) {
        char probe[64];
        std::snprintf(probe, sizeof(probe), "%.*g", prec, v);
        if (std::strtod(probe, nullptr) == back) return probe;
    }
    return buf;
}

inline std::string join_doubles(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ';';
        out += fmt_double(v[i]);
    }
    return out;
}

}  // namespace detail

inline nlohmann::json experiment_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["model"] = {{"in_channels", c.model.in_channels},
                  {"base_channels", c.model.base_channels},
                  {"depth", c.model.depth},
                  {"time_embed_dim", c.model.time_embed_dim},
                  {"image_side", c.model.image_side},
                  {"precision", c.model.precision == Precision::f64 ? "f64" : "f32"}};
    j["federation"] = {{"method", method_name(c.fed.method)}, {"clients", c.fed.clients},
                       {"rounds", c.fed.rounds},             {"epochs", c.fed.epochs},
                       {"batch", c.fed.batch},               {"lr", c.fed.lr},
                       {"optimizer", optimizer_name(c.fed.optimizer)}};
    j["diffusion"] = {{"timesteps", c.timesteps},
                      {"beta_start", c.beta_start},
                      {"beta_end", c.beta_end}};
    j["partition"] = {{"kind", partition_name(c.partition)}, {"dirichlet_beta", c.dirichlet_beta}};
    j["evaluation"] = {{"extractor", feature_kind_name(c.extractor)},
                       {"feature_cap", c.feature_cap},
                       {"samples", c.eval_samples},
                       {"sample_grid", c.sample_grid}};
    j["data"] = {{"dir", c.data_dir}, {"subset", c.subset}, {"fixture_count", c.fixture_count}};
    j["seed"] = c.seed;
    j["seed_index"] = c.seed_index;
    return j;
}

// Parses a config file on top of `base`.  A true `desk_scale` key applies
// the preset after all file keys (file -> preset -> flags resolution order).
inline ExperimentConfig experiment_from_json(const nlohmann::json& j, ExperimentConfig base = {}) {
    detail::check_keys(j, "top level",
                       {"model", "federation", "diffusion", "partition", "evaluation", "data",
                        "seed", "seed_index", "desk_scale", "derived"});
    ExperimentConfig c = base;
    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::check_keys(m, "model",
                           {"in_channels", "base_channels", "depth", "time_embed_dim",
                            "image_side", "precision"});
        detail::maybe(m, "in_channels", c.model.in_channels);
        detail::maybe(m, "base_channels", c.model.base_channels);
        detail::maybe(m, "depth", c.model.depth);
        detail::maybe(m, "time_embed_dim", c.model.time_embed_dim);
        detail::maybe(m, "image_side", c.model.image_side);
        if (m.contains("precision")) c.model.precision = parse_precision(m.at("precision"));
    }
    if (j.contains("federation")) {
        const auto& f = j.at("federation");
        detail::check_keys(f, "federation",
                           {"method", "clients", "rounds", "epochs", "batch", "lr", "optimizer"});
        if (f.contains("method")) c.fed.method = parse_method(f.at("method"));
        detail::maybe(f, "clients", c.fed.clients);
        detail::maybe(f, "rounds", c.fed.rounds);
        detail::maybe(f, "epochs", c.fed.epochs);
        detail::maybe(f, "batch", c.fed.batch);
        detail::maybe(f, "lr", c.fed.lr);
        if (f.contains("optimizer")) c.fed.optimizer = parse_optimizer(f.at("optimizer"));
    }
    if (j.contains("diffusion")) {
        const auto& d = j.at("diffusion");
        detail::check_keys(d, "diffusion", {"timesteps", "beta_start", "beta_end"});
        detail::maybe(d, "timesteps", c.timesteps);
        detail::maybe(d, "beta_start", c.beta_start);
        detail::maybe(d, "beta_end", c.beta_end);
    }
    if (j.contains("partition")) {
        const auto& p = j.at("partition");
        detail::check_keys(p, "partition", {"kind", "dirichlet_beta"});
        if (p.contains("kind")) c.partition = parse_partition_kind(p.at("kind"));
        detail::maybe(p, "dirichlet_beta", c.dirichlet_beta);
    }
    if (j.contains("evaluation")) {
        const auto& e = j.at("evaluation");
        detail::check_keys(e, "evaluation", {"extractor", "feature_cap", "samples", "sample_grid"});
        if (e.contains("extractor")) {
            const std::string s = e.at("extractor");
            if (s == "raw_pixels") {
                c.extractor = FeatureKind::raw_pixels;
            } else if (s == "random_projection") {
                c.extractor = FeatureKind::random_projection;
            } else {
                throw ConfigError("evaluation: unknown extractor '" + s + "'");
            }
        }
        detail::maybe(e, "feature_cap", c.feature_cap);
        detail::maybe(e, "samples", c.eval_samples);
        detail::maybe(e, "sample_grid", c.sample_grid);
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::check_keys(d, "data", {"dir", "subset", "fixture_count"});
        detail::maybe_str(d, "dir", c.data_dir);
        detail::maybe(d, "subset", c.subset);
        detail::maybe(d, "fixture_count", c.fixture_count);
    }
    detail::maybe(j, "seed", c.seed);
    detail::maybe(j, "seed_index", c.seed_index);
    bool desk = false;
    detail::maybe(j, "desk_scale", desk);
    if (desk) c.apply_desk_scale();
    return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                               ExperimentConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return experiment_from_json(j, std::move(base));
}

// Dataset resolution: explicit directory, then FEDDIFFUSE_DATA_DIR, then the
// built-in synthetic fixture.  The fixture seed is fixed so that, like files
// on disk, the data does not change with the experiment seed.
inline Dataset load_experiment_dataset(const ExperimentConfig& cfg) {
    std::string dir = cfg.data_dir;
    if (dir.empty()) {
        if (const char* env = std::getenv("FEDDIFFUSE_DATA_DIR")) dir = env;
    }
    Dataset ds;
    if (!dir.empty()) {
        const std::filesystem::path base(dir);
        const std::vector<std::pair<std::string, std::string>> candidates = {
            {"train-images-idx3-ubyte", "train-labels-idx1-ubyte"},
            {"train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"},
        };
        bool loaded = false;
        for (const auto& [img, lab] : candidates) {
            if (std::filesystem::exists(base / img) && std::filesystem::exists(base / lab)) {
                ds = load_idx(base / img, base / lab);
                loaded = true;
                break;
            }
        }
        if (!loaded) {
            throw IngestError("no IDX pair (train-images-idx3-ubyte[.gz] / "
                              "train-labels-idx1-ubyte[.gz]) under " +
                              base.string());
        }
    } else {
        ds = make_fixture_dataset(cfg.fixture_count, cfg.model.image_side, 0x0f1d5eedULL);
    }
    if (cfg.subset > 0 && cfg.subset < ds.count()) {
        std::vector<std::size_t> order(ds.count());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(cfg.data_seed(), stream_tag::data));
        rng.shuffle(order);
        order.resize(cfg.subset);
        Dataset sub;
        sub.rows = ds.rows;
        sub.cols = ds.cols;
        sub.class_count = ds.class_count;
        sub.pixels.resize(cfg.subset * ds.image_size());
        sub.labels.resize(cfg.subset);
        for (std::size_t i = 0; i < cfg.subset; ++i) {
            sub.labels[i] = ds.labels[order[i]];
            std::copy(ds.image(order[i]), ds.image(order[i]) + ds.image_size(),
                      sub.pixels.data() + i * sub.image_size());
        }
        return sub;
    }
    return ds;
}

// Reference stats computed in feature-extractor chunks, so the whole dataset
// never has to exist as a double tensor at once.
inline FeatureStats reference_stats(const Dataset& ds, const FeatureExtractor& fx) {
    const std::size_t chunk = 1024;
    Eigen::MatrixXd features(static_cast<Eigen::Index>(ds.count()), fx.output_dim);
    std::vector<std::size_t> idx;
    for (std::size_t pos = 0; pos < ds.count(); pos += chunk) {
        const std::size_t take = std::min(chunk, ds.count() - pos);
        idx.resize(take);
        std::iota(idx.begin(), idx.end(), pos);
        features.middleRows(static_cast<Eigen::Index>(pos), static_cast<Eigen::Index>(take)) =
            fx.extract(ds.batch(idx));
    }
    return fit_stats(features);
}

struct ExperimentResult {
    TrainingResult training;
    ScoreSummary scores;
    SegmentLayout layout;
};

namespace detail {

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    atomic_write(path, text);
}

inline nlohmann::json segment_counts_json(const SegmentCounts& c) {
    return {{"encoder", c.encoder}, {"bottleneck", c.bottleneck}, {"decoder", c.decoder}};
}

inline std::string ledger_json(const FederationConfig& fed, const CommLedger& ledger) {
    nlohmann::json j;
    j["method"] = method_name(fed.method);
    j["clients"] = fed.clients;
    j["rounds"] = nlohmann::json::array();
    std::uint64_t running = 0;
    for (const RoundTraffic& rt : ledger.rounds) {
        nlohmann::json round;
        round["round"] = rt.round;
        round["clients"] = nlohmann::json::array();
        for (std::size_t k = 0; k < rt.clients.size(); ++k) {
            round["clients"].push_back({{"client", k},
                                        {"download", segment_counts_json(rt.clients[k].download)},
                                        {"upload", segment_counts_json(rt.clients[k].upload)}});
        }
        running += rt.total();
        round["round_total"] = rt.total();
        round["cumulative"] = running;
        j["rounds"].push_back(std::move(round));
    }
    j["total"] = ledger.total();
    return j.dump(2) + "\n";
}

inline std::string partition_json(const Partition& part, const Dataset& ds) {
    nlohmann::json j;
    j["kind"] = partition_name(part.spec.kind);
    j["clients"] = part.spec.clients;
    j["beta"] = part.spec.beta;
    j["seed"] = part.spec.seed;
    j["proportions"] = part.proportions;
    j["shards"] = nlohmann::json::array();
    for (const ClientShard& s : part.shards) {
        std::vector<std::size_t> hist(static_cast<std::size_t>(ds.class_count), 0);
        for (std::size_t i : s.indices) hist[static_cast<std::size_t>(ds.labels[i])]++;
        j["shards"].push_back({{"client", s.client},
                               {"size", s.indices.size()},
                               {"label_histogram", hist},
                               {"indices", s.indices}});
    }
    return j.dump(2) + "\n";
}

inline std::string metrics_csv(const ExperimentConfig& cfg, const TrainingResult& tr,
                               const ScoreSummary& scores) {
    std::string csv =
        "round,method,mean_client_loss,client_losses,cumulative_params,"
        "score_mean,score_std,client_scores\n";
    for (const RoundMetrics& rm : tr.metrics) {
        csv += std::to_string(rm.round);
        csv += ',';
        csv += method_name(cfg.fed.method);
        csv += ',';
        csv += fmt_double(rm.mean_loss);
        csv += ',';
        csv += join_doubles(rm.client_losses);
        csv += ',';
        csv += std::to_string(rm.cumulative_params);
        csv += ",,,\n";
    }
    csv += "final,";
    csv += method_name(cfg.fed.method);
    csv += ",,,";
    csv += std::to_string(tr.ledger.total());
    csv += ',';
    csv += fmt_double(scores.mean);
    csv += ',';
    csv += fmt_double(scores.stddev);
    csv += ',';
    csv += join_doubles(scores.per_client);
    csv += '\n';
    return csv;
}

inline std::string resolved_config_json(const ExperimentConfig& cfg, const SegmentLayout& layout) {
    nlohmann::json j = experiment_to_json(cfg);
    j["derived"] = {
        {"seeds",
         {{"data", cfg.data_seed()},
          {"training", cfg.training_seed()},
          {"evaluation", cfg.evaluation_seed()}}},
        {"layout",
         {{"encoder", {layout.encoder.begin, layout.encoder.end}},
          {"bottleneck", {layout.bottleneck.begin, layout.bottleneck.end}},
          {"decoder", {layout.decoder.begin, layout.decoder.end}},
          {"total", layout.total()}}},
    };
    return j.dump(2) + "\n";
}

}  // namespace detail

// Full pipeline: data -> partition -> training -> scoring -> artifacts.
// Writes metrics.csv, ledger.json, partition.json, samples/*.pgm,
// checkpoints/*.bin and resolved_config.json under out_dir.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                       const std::filesystem::path& out_dir) {
    cfg.validate();
    const Dataset ds = load_experiment_dataset(cfg);
    const NoiseSchedule sched = build_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end);
    PartitionSpec pspec;
    pspec.kind = cfg.partition;
    pspec.clients = cfg.fed.clients;
    pspec.beta = cfg.dirichlet_beta;
    pspec.seed = cfg.data_seed();
    const Partition part = make_partition(ds, pspec);

    FederationConfig fed = cfg.fed;
    fed.seed = cfg.training_seed();

    ExperimentResult res;
    res.training = run_training(fed, cfg.model, sched, ds, part);
    res.layout = res.training.layout;

    const FeatureExtractor fx =
        make_feature_extractor(cfg.extractor, cfg.model.image_side * cfg.model.image_side,
                               cfg.evaluation_seed(), cfg.feature_cap);
    const FeatureStats ref = reference_stats(ds, fx);

    std::filesystem::create_directories(out_dir / "samples");
    std::filesystem::create_directories(out_dir / "checkpoints");

    // Score each deliverable model, reusing its scoring samples for the
    // sample sheet.
    struct Scored {
        std::string name;
        const ParameterVector* params;
    };
    std::vector<Scored> deliverables;
    if (res.training.client_params.empty()) {
        deliverables.push_back({"global", &res.training.global});
    } else {
        for (std::size_t k = 0; k < res.training.client_params.size(); ++k) {
            deliverables.push_back({"client_" + std::to_string(k),
                                    &res.training.client_params[k]});
        }
    }
    std::vector<double> scores;
    for (std::size_t i = 0; i < deliverables.size(); ++i) {
        const Denoiser model(cfg.model, *deliverables[i].params);
        const ImageBatch samples = clamp_unit(
            ddpm_sample(model, sched, cfg.eval_samples, cfg.model.in_channels,
                        cfg.model.image_side, cfg.model.image_side,
                        derive_seed(cfg.evaluation_seed(), static_cast<std::uint64_t>(i))));
        scores.push_back(frechet_distance(fit_stats(samples, fx), ref));
        const int grid_n = std::min(cfg.sample_grid, samples.n);
        ImageBatch sheet(grid_n, samples.c, samples.h, samples.w);
        std::copy(samples.data(), samples.data() + sheet.size(), sheet.data());
        write_pgm_grid(out_dir / "samples" / (deliverables[i].name + ".pgm"), sheet, 8);
        save_checkpoint(out_dir / "checkpoints" / (deliverables[i].name + ".bin"),
                        {cfg.model, res.layout, *deliverables[i].params});
    }
    res.scores = summarize_scores(std::move(scores));

    detail::write_text_atomic(out_dir / "metrics.csv",
                              detail::metrics_csv(cfg, res.training, res.scores));
    detail::write_text_atomic(out_dir / "ledger.json", detail::ledger_json(fed, res.training.ledger));
    detail::write_text_atomic(out_dir / "partition.json", detail::partition_json(part, ds));
    detail::write_text_atomic(out_dir / "resolved_config.json",
                              detail::resolved_config_json(cfg, res.layout));
    return res;
}

enum class SweepAxis { clients, epochs, method, partition };

inline SweepAxis parse_sweep_axis(const std::string& s) {
    if (s == "clients") return SweepAxis::clients;
    if (s == "epochs") return SweepAxis::epochs;
    if (s == "method") return SweepAxis::method;
    if (s == "partition") return SweepAxis::partition;
    throw ConfigError("sweep: axis must be one of clients|epochs|method|partition, got '" + s +
                      "'");
}

// Runs each axis value over `seeds` repeat runs (shared data/partition seed,
// distinct training seeds) and aggregates one comparison row per value.  The
// comparison table is rewritten after every completed value so partial
// results survive a failed run.
inline void sweep(const ExperimentConfig& base, SweepAxis axis,
                  const std::vector<std::string>& values, int seeds,
                  const std::filesystem::path& out_root) {
    if (values.empty()) throw ConfigError("sweep: empty values list");
    if (seeds < 1) throw ConfigError("sweep: seeds must be >= 1");
    std::string csv = "method,clients,epochs,partition,traffic,score_mean,score_std\n";
    const char* axis_name = axis == SweepAxis::clients   ? "clients"
                            : axis == SweepAxis::epochs  ? "epochs"
                            : axis == SweepAxis::method  ? "method"
                                                         : "partition";
    for (const std::string& value : values) {
        ExperimentConfig cfg = base;
        switch (axis) {
            case SweepAxis::clients: cfg.fed.clients = std::stoi(value); break;
            case SweepAxis::epochs: cfg.fed.epochs = std::stoi(value); break;
            case SweepAxis::method: cfg.fed.method = parse_method(value); break;
            case SweepAxis::partition: cfg.partition = parse_partition_kind(value); break;
        }
        std::vector<double> run_scores;
        std::uint64_t traffic = 0;
        for (int s = 0; s < seeds; ++s) {
            cfg.seed_index = s;
            const std::filesystem::path run_dir =
                out_root / (std::string(axis_name) + "=" + value) / ("seed=" + std::to_string(s));
            std::filesystem::create_directories(run_dir);
            ExperimentResult r = run_experiment(cfg, run_dir);
            run_scores.push_back(r.scores.mean);
            if (s == 0) traffic = r.training.ledger.total();
        }
        const ScoreSummary agg = summarize_scores(std::move(run_scores));
        csv += std::string(method_name(cfg.fed.method)) + "," + std::to_string(cfg.fed.clients) +
               "," + std::to_string(cfg.fed.epochs) + "," + partition_name(cfg.partition) + "," +
               std::to_string(traffic) + "," + detail::fmt_double(agg.mean) + "," +
               detail::fmt_double(agg.stddev) + "\n";
        detail::write_text_atomic(out_root / "comparison.csv", csv);
    }
}

}  // namespace feddiffuse
