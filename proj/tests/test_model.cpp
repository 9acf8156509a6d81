#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "feddiffuse/diffusion.hpp"
#include "feddiffuse/model.hpp"
#include "feddiffuse/rng.hpp"
#include "feddiffuse/schedule.hpp"

using namespace feddiffuse;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.in_channels = 1;
    cfg.base_channels = 4;
    cfg.depth = 1;
    cfg.time_embed_dim = 8;
    cfg.image_side = 8;
    cfg.precision = Precision::f64;
    return cfg;
}

ImageBatch random_batch(int n, int c, int h, int w, Rng& rng) {
    ImageBatch x(n, c, h, w);
    for (auto& v : x.v) v = rng.normal() * 0.5;
    return x;
}

}  // namespace

TEST_CASE("model configuration validation") {
    ModelConfig cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.depth = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.time_embed_dim = 7;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.base_channels = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    // 28 is not divisible by 2^3; the network pads to 32 internally.
    ModelConfig deep;
    deep.image_side = 28;
    deep.depth = 3;
    CHECK(deep.padded_side() == 32);
    CHECK(tiny_config().padded_side() == 8);
}

TEST_CASE("segment layout tiles the parameter vector") {
    const Denoiser model = build_denoiser(tiny_config(), 99);
    const SegmentLayout& layout = model.layout();
    CHECK(layout.encoder.begin == 0);
    CHECK(layout.encoder.end == layout.bottleneck.begin);
    CHECK(layout.bottleneck.end == layout.decoder.begin);
    CHECK(layout.decoder.end == model.param_count());
    for (Segment s : all_segments) CHECK(layout.size(s) > 0);
    CHECK(layout.total() == model.param_count());
    CHECK(model.param_count() < 5000);

    // read/write round-trip per segment.
    ParameterVector p = model.params();
    const auto enc = read_segment(p, layout, Segment::encoder);
    CHECK(enc.size() == layout.size(Segment::encoder));
    std::vector<double> zeros(enc.size(), 0.0);
    write_segment(p, layout, Segment::encoder, zeros);
    for (std::size_t i = layout.encoder.begin; i < layout.encoder.end; ++i) CHECK(p[i] == 0.0);
    for (std::size_t i = layout.bottleneck.begin; i < layout.decoder.end; ++i) {
        CHECK(p[i] == model.params()[i]);
    }
    CHECK_THROWS_AS(write_segment(p, layout, Segment::decoder, zeros), std::invalid_argument);
}

TEST_CASE("initialization is seed-deterministic") {
    const Denoiser a = build_denoiser(tiny_config(), 7);
    const Denoiser b = build_denoiser(tiny_config(), 7);
    const Denoiser c = build_denoiser(tiny_config(), 8);
    CHECK(a.params() == b.params());
    CHECK(a.params() != c.params());

    // Biases start at zero, weights within the fan-in bound.
    const UNet net(tiny_config());
    const std::size_t b_off = net.init_conv.b_off;
    for (int i = 0; i < net.init_conv.cout; ++i) {
        CHECK(a.params()[b_off + static_cast<std::size_t>(i)] == 0.0);
    }
    const double bound = std::sqrt(6.0 / 9.0);
    for (std::size_t i = 0; i < net.init_conv.weight_count(); ++i) {
        CHECK(std::abs(a.params()[net.init_conv.w_off + i]) <= bound);
    }
}

TEST_CASE("predict validates shapes and returns finite values") {
    const Denoiser model = build_denoiser(tiny_config(), 5);
    Rng rng(31);
    const ImageBatch x = random_batch(3, 1, 8, 8, rng);
    const ImageBatch eps = model.predict(x, {1, 5, 9});
    REQUIRE(eps.n == 3);
    REQUIRE(eps.c == 1);
    REQUIRE(eps.h == 8);
    REQUIRE(eps.w == 8);
    for (double v : eps.v) REQUIRE(std::isfinite(v));

    CHECK_THROWS_AS(model.predict(x, {1, 5}), std::invalid_argument);
    const ImageBatch wrong = random_batch(2, 1, 9, 9, rng);
    CHECK_THROWS_AS(model.predict(wrong, {1, 2}), std::invalid_argument);
    CHECK_THROWS_AS(Denoiser(tiny_config(), ParameterVector(10)), std::invalid_argument);
}

TEST_CASE("timestep conditioning changes the prediction") {
    const Denoiser model = build_denoiser(tiny_config(), 6);
    Rng rng(32);
    const ImageBatch x = random_batch(1, 1, 8, 8, rng);
    const ImageBatch a = model.predict(x, {1});
    const ImageBatch b = model.predict(x, {40});
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a.v[i] - b.v[i]);
    CHECK(diff > 1e-6);
}

TEST_CASE("float32 and float64 paths agree closely") {
    ModelConfig cfg = tiny_config();
    const Denoiser f64 = build_denoiser(cfg, 21);
    cfg.precision = Precision::f32;
    const Denoiser f32 = Denoiser(cfg, f64.params());
    Rng rng(33);
    const ImageBatch x = random_batch(2, 1, 8, 8, rng);
    const ImageBatch y64 = f64.predict(x, {3, 17});
    const ImageBatch y32 = f32.predict(x, {3, 17});
    for (std::size_t i = 0; i < y64.size(); ++i) {
        CHECK(std::abs(y64.v[i] - y32.v[i]) < 5e-3);
    }
}

TEST_CASE("padding path matches configuration on a non-divisible side") {
    ModelConfig cfg = tiny_config();
    cfg.image_side = 7;
    cfg.depth = 2;
    cfg.base_channels = 4;
    CHECK(cfg.padded_side() == 8);
    const Denoiser model = build_denoiser(cfg, 77);
    Rng rng(34);
    const ImageBatch x = random_batch(2, 1, 7, 7, rng);
    const ImageBatch y = model.predict(x, {2, 3});
    CHECK(y.h == 7);
    CHECK(y.w == 7);
    for (double v : y.v) REQUIRE(std::isfinite(v));
}

TEST_CASE("analytic loss gradient matches finite differences") {
    const ModelConfig cfg = tiny_config();
    const NoiseSchedule sched = build_schedule(50, 1e-3, 0.2);
    const Denoiser model = build_denoiser(cfg, 13);
    Rng rng(35);
    const ImageBatch x0 = random_batch(2, 1, 8, 8, rng);
    const LossDraws draws = make_loss_draws(2, 1, 8, 8, sched, rng);

    const auto [loss, grad] = model.loss_gradient(x0, sched, draws);
    REQUIRE(loss > 0.0);
    REQUIRE(grad.size() == model.param_count());

    // The 1e-4 floor in the denominator absorbs finite-difference resolution
    // noise (~eps*|loss|/h) on structurally dead directions, e.g. conv biases
    // whose constant shift the following per-channel normalization removes.
    ParameterVector p = model.params();
    const double h = 1e-5;
    const std::size_t stride = std::max<std::size_t>(1, p.size() / 60);
    double max_rel = 0.0;
    for (std::size_t i = 0; i < p.size(); i += stride) {
        const double saved = p[i];
        p[i] = saved + h;
        const double fp = model.with_params(p).loss_gradient(x0, sched, draws).first;
        p[i] = saved - h;
        const double fm = model.with_params(p).loss_gradient(x0, sched, draws).first;
        p[i] = saved;
        const double num = (fp - fm) / (2.0 * h);
        max_rel = std::max(max_rel,
                           std::abs(grad[i] - num) / (std::abs(grad[i]) + std::abs(num) + 1e-4));
    }
    CHECK(max_rel < 1e-4);
}

TEST_CASE("normalization-invariant bias directions have exactly zero pull") {
    // In the tiny config every GroupNorm runs one channel per group, so a
    // constant per-channel shift from the preceding convolution's bias is
    // removed exactly; the analytic gradient must vanish to roundoff.
    const ModelConfig cfg = tiny_config();
    const NoiseSchedule sched = build_schedule(50, 1e-3, 0.2);
    const Denoiser model = build_denoiser(cfg, 15);
    Rng rng(37);
    ImageBatch x0(2, 1, 8, 8);
    for (auto& v : x0.v) v = rng.normal() * 0.5;
    const LossDraws draws = make_loss_draws(2, 1, 8, 8, sched, rng);
    const auto grad = model.loss_gradient(x0, sched, draws).second;

    const UNet net(cfg);
    REQUIRE(GroupNorm::pick_groups(net.cs[0]) == net.cs[0]);
    for (int i = 0; i < net.enc[0].conv1.cout; ++i) {
        CHECK(std::abs(grad[net.enc[0].conv1.b_off + static_cast<std::size_t>(i)]) < 1e-12);
    }
    for (int i = 0; i < net.mid->conv1.cout; ++i) {
        CHECK(std::abs(grad[net.mid->conv1.b_off + static_cast<std::size_t>(i)]) < 1e-12);
    }
}

TEST_CASE("loss gradient rejects mismatched draws") {
    const ModelConfig cfg = tiny_config();
    const NoiseSchedule sched = build_schedule(50, 1e-3, 0.2);
    const Denoiser model = build_denoiser(cfg, 14);
    Rng rng(36);
    const ImageBatch x0 = random_batch(2, 1, 8, 8, rng);
    LossDraws draws = make_loss_draws(3, 1, 8, 8, sched, rng);  // wrong batch size
    CHECK_THROWS_AS(model.loss_gradient(x0, sched, draws), std::invalid_argument);
}
