#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "feddiffuse/federation.hpp"
#include "feddiffuse/fixture.hpp"

using namespace feddiffuse;

namespace {

ModelConfig tiny_config() {
    ModelConfig mc;
    mc.base_channels = 4;
    mc.depth = 1;
    mc.time_embed_dim = 8;
    mc.image_side = 8;
    mc.precision = Precision::f64;
    return mc;
}

FederationConfig tiny_fed() {
    FederationConfig fed;
    fed.clients = 1;
    fed.rounds = 2;
    fed.epochs = 1;
    fed.batch = 8;
    fed.lr = 0.01;
    fed.optimizer = OptimizerKind::sgd;
    fed.seed = 77;
    return fed;
}

std::vector<double> slice(const ParameterVector& v, const SegmentLayout& layout, Segment s) {
    const SegmentRange& r = layout.range(s);
    return std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(r.begin),
                               v.begin() + static_cast<std::ptrdiff_t>(r.end));
}

std::vector<std::size_t> iota_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
}

}  // namespace

TEST_CASE("an empty shard returns the starting parameters unchanged") {
    const ModelConfig mc = tiny_config();
    const NoiseSchedule sched = build_schedule(10, 0.01, 0.2);
    const Dataset ds = make_fixture_dataset(8, 8, 3);
    const Denoiser start = build_denoiser(mc, 5);
    const ClientUpdate cu = client_update(start, ds, {}, sched, tiny_fed(), 1, 0);
    CHECK(cu.params == start.params());
    CHECK(cu.batch_losses.empty());
    CHECK(std::isnan(cu.mean_loss));
}

TEST_CASE("one client update follows textbook descent on its derived streams") {
    const ModelConfig mc = tiny_config();
    const NoiseSchedule sched = build_schedule(10, 0.01, 0.2);
    const Dataset ds = make_fixture_dataset(8, 8, 3);
    FederationConfig fed = tiny_fed();
    fed.epochs = 1;
    const Denoiser start = build_denoiser(mc, fed.seed);
    const std::vector<std::size_t> shard = iota_indices(8);
    const int round = 2, client = 0;
    const ClientUpdate cu = client_update(start, ds, shard, sched, fed, round, client);

    // Replay the documented streams: shuffle, then per-item keyed draws.
    std::vector<std::size_t> order = shard;
    Rng shuffle_rng(derive_seed(fed.seed, stream_tag::batch_shuffle,
                                static_cast<std::uint64_t>(round),
                                static_cast<std::uint64_t>(client), std::uint64_t{0}));
    shuffle_rng.shuffle(order);
    const std::uint64_t draw_base =
        derive_seed(fed.seed, stream_tag::loss_draw, static_cast<std::uint64_t>(round),
                    static_cast<std::uint64_t>(client), std::uint64_t{0});
    const std::vector<std::uint64_t> keys(order.begin(), order.end());
    const LossDraws draws =
        make_keyed_loss_draws(keys, mc.in_channels, mc.image_side, mc.image_side, sched, draw_base);
    const ImageBatch batch = ds.batch(order);
    const auto [loss, grad] = start.loss_gradient(batch, sched, draws);
    ParameterVector expected = start.params();
    for (std::size_t i = 0; i < expected.size(); ++i) expected[i] -= fed.lr * grad[i];

    REQUIRE(cu.batch_losses.size() == 1);
    CHECK(cu.batch_losses[0] == loss);
    CHECK(cu.mean_loss == loss);
    CHECK(cu.params == expected);
}

TEST_CASE("a single client run reduces to chained local updates") {
    const ModelConfig mc = tiny_config();
    const NoiseSchedule sched = build_schedule(10, 0.01, 0.2);
    const Dataset ds = make_fixture_dataset(16, 8, 4);
    FederationConfig fed = tiny_fed();
    fed.rounds = 3;
    fed.epochs = 2;
    PartitionSpec spec;
    spec.kind = PartitionKind::iid;
    spec.clients = 1;
    spec.seed = fed.seed;
    const Partition part = make_partition(ds, spec);
    const TrainingResult res = run_training(fed, mc, sched, ds, part);

    Denoiser cur = build_denoiser(mc, fed.seed);
    for (int round = 1; round <= fed.rounds; ++round) {
        ClientUpdate cu = client_update(cur, ds, part.shards[0].indices, sched, fed, round, 0);
        cur = cur.with_params(std::move(cu.params));
    }
    CHECK(res.global == cur.params());
}

TEST_CASE("udec trains encoder and bottleneck locally and shares the decoder") {
    const ModelConfig mc = tiny_config();
    const NoiseSchedule sched = build_schedule(10, 0.01, 0.2);
    const Dataset ds = make_fixture_dataset(16, 8, 4);
    FederationConfig fed = tiny_fed();
    fed.method = Method::udec;
    fed.clients = 2;
    fed.rounds = 2;
    PartitionSpec spec;
    spec.kind = PartitionKind::iid;
    spec.clients = 2;
    spec.seed = 9;
    const Partition part = make_partition(ds, spec);
    const TrainingResult res = run_training(fed, mc, sched, ds, part);
    const ParameterVector init = build_denoiser(mc, fed.seed).params();

    CHECK(slice(res.global, res.layout, Segment::encoder) ==
          slice(init, res.layout, Segment::encoder));
    CHECK(slice(res.global, res.layout, Segment::bottleneck) ==
          slice(init, res.layout, Segment::bottleneck));
    CHECK(slice(res.global, res.layout, Segment::decoder) !=
          slice(init, res.layout, Segment::decoder));

    REQUIRE(res.client_params.size() == 2);
    for (const ParameterVector& cp : res.client_params) {
        CHECK(slice(cp, res.layout, Segment::decoder) ==
              slice(res.global, res.layout, Segment::decoder));
        CHECK(slice(cp, res.layout, Segment::encoder) !=
              slice(init, res.layout, Segment::encoder));
    }
    CHECK(slice(res.client_params[0], res.layout, Segment::encoder) !=
          slice(res.client_params[1], res.layout, Segment::encoder));
}

TEST_CASE("ulatdec keeps only the encoder local") {
    const ModelConfig mc = tiny_config();
    const NoiseSchedule sched = build_schedule(10, 0.01, 0.2);
    const Dataset ds = make_fixture_dataset(16, 8, 4);
    FederationConfig fed = tiny_fed();
    fed.method = Method::ulatdec;
    fed.clients = 2;
    fed.rounds = 2;
    PartitionSpec spec;
    spec.kind = PartitionKind::iid;
    spec.clients = 2;
    spec.seed = 9;
    const Partition part = make_partition(ds, spec);
    const TrainingResult res = run_training(fed, mc, sched, ds, part);
    const ParameterVector init = build_denoiser(mc, fed.seed).params();

    CHECK(slice(res.global, res.layout, Segment::encoder) ==
          slice(init, res.layout, Segment::encoder));
    CHECK(slice(res.global, res.layout, Segment::bottleneck) !=
          slice(init, res.layout, Segment::bottleneck));
    REQUIRE(res.client_params.size() == 2);
    for (const ParameterVector& cp : res.client_params) {
        CHECK(slice(cp, res.layout, Segment::bottleneck) ==
              slice(res.global, res.layout, Segment::bottleneck));
        CHECK(slice(cp, res.layout, Segment::decoder) ==
              slice(res.global, res.layout, Segment::decoder));
    }
}

TEST_CASE("training runs are reproducible end to end") {
    const ModelConfig mc = tiny_config();
    const NoiseSchedule sched = build_schedule(10, 0.01, 0.2);
    const Dataset ds = make_fixture_dataset(16, 8, 4);
    FederationConfig fed = tiny_fed();
    fed.method = Method::usplit;
    fed.clients = 2;
    fed.rounds = 2;
    PartitionSpec spec;
    spec.kind = PartitionKind::iid;
    spec.clients = 2;
    spec.seed = 9;
    const Partition part = make_partition(ds, spec);
    const TrainingResult a = run_training(fed, mc, sched, ds, part);
    const TrainingResult b = run_training(fed, mc, sched, ds, part);
    CHECK(a.global == b.global);
    CHECK(a.ledger.total() == b.ledger.total());
    REQUIRE(a.plans.size() == 2);
    for (std::size_t r = 0; r < a.plans.size(); ++r) {
        CHECK(a.plans[r].upload == b.plans[r].upload);
    }
    CHECK(a.client_params.empty());
    REQUIRE(a.metrics.size() == b.metrics.size());
    for (std::size_t r = 0; r < a.metrics.size(); ++r) {
        CHECK(a.metrics[r].mean_loss == b.metrics[r].mean_loss);
    }
}

TEST_CASE("metrics track losses and cumulative traffic") {
    const ModelConfig mc = tiny_config();
    const NoiseSchedule sched = build_schedule(10, 0.01, 0.2);
    const Dataset ds = make_fixture_dataset(16, 8, 4);
    FederationConfig fed = tiny_fed();
    fed.clients = 2;
    fed.rounds = 3;
    PartitionSpec spec;
    spec.kind = PartitionKind::iid;
    spec.clients = 2;
    spec.seed = 11;
    const Partition part = make_partition(ds, spec);
    const TrainingResult res = run_training(fed, mc, sched, ds, part);
    REQUIRE(res.metrics.size() == 3);
    std::uint64_t prev = 0;
    for (std::size_t r = 0; r < res.metrics.size(); ++r) {
        const RoundMetrics& rm = res.metrics[r];
        CHECK(rm.round == static_cast<int>(r) + 1);
        REQUIRE(rm.client_losses.size() == 2);
        double acc = 0.0;
        for (double l : rm.client_losses) {
            CHECK(std::isfinite(l));
            acc += l;
        }
        CHECK(rm.mean_loss == Catch::Approx(acc / 2.0).epsilon(1e-14));
        CHECK(rm.cumulative_params > prev);
        prev = rm.cumulative_params;
    }
    CHECK(prev == res.ledger.total());
    CHECK(res.ledger.total() ==
          expected_traffic(Method::full, fed.clients, fed.rounds, res.layout));
}

TEST_CASE("a client with no data is skipped in the loss average") {
    const ModelConfig mc = tiny_config();
    const NoiseSchedule sched = build_schedule(10, 0.01, 0.2);
    const Dataset ds = make_fixture_dataset(8, 8, 4);
    FederationConfig fed = tiny_fed();
    fed.clients = 2;
    fed.rounds = 1;
    Partition part;
    part.shards.resize(2);
    part.shards[0].indices = iota_indices(8);
    const TrainingResult res = run_training(fed, mc, sched, ds, part);
    REQUIRE(res.metrics.size() == 1);
    CHECK(std::isfinite(res.metrics[0].client_losses[0]));
    CHECK(std::isnan(res.metrics[0].client_losses[1]));
    CHECK(res.metrics[0].mean_loss == res.metrics[0].client_losses[0]);
}

TEST_CASE("run_training rejects inconsistent inputs") {
    const ModelConfig mc = tiny_config();
    const NoiseSchedule sched = build_schedule(10, 0.01, 0.2);
    const Dataset ds = make_fixture_dataset(8, 8, 4);
    FederationConfig fed = tiny_fed();
    fed.clients = 3;
    Partition two;
    two.shards.resize(2);
    two.shards[0].indices = iota_indices(8);
    CHECK_THROWS_AS(run_training(fed, mc, sched, ds, two), std::invalid_argument);

    fed.clients = 1;
    Partition one;
    one.shards.resize(1);
    one.shards[0].indices = iota_indices(8);
    ModelConfig wide = mc;
    wide.image_side = 16;
    CHECK_THROWS_AS(run_training(fed, wide, sched, ds, one), ConfigError);

    Partition empty;
    empty.shards.resize(1);
    CHECK_THROWS_AS(run_training(fed, mc, sched, ds, empty), ConfigError);
}
