#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "feddiffuse/errors.hpp"
#include "feddiffuse/rng.hpp"
#include "feddiffuse/schedule.hpp"
#include "feddiffuse/tensor.hpp"

namespace feddiffuse {

// Anything that predicts the noise component of a noised batch.  t carries one
// 1-based timestep per image.
class NoisePredictor {
  public:
    virtual ~NoisePredictor() = default;
    virtual ImageBatch predict(const ImageBatch& xt, const std::vector<int>& t) const = 0;
};

namespace detail {

inline void check_timesteps(const std::vector<int>& t, int n, const NoiseSchedule& sched,
                            const char* where) {
    if (static_cast<int>(t.size()) != n) {
        throw std::invalid_argument(std::string(where) + ": timestep count " +
                                    std::to_string(t.size()) + " does not match batch size " +
                                    std::to_string(n));
    }
    for (int v : t) {
        if (!sched.valid_t(v)) {
            throw std::invalid_argument(std::string(where) + ": timestep " + std::to_string(v) +
                                        " outside [1, " + std::to_string(sched.T) + "]");
        }
    }
}

}  // namespace detail

// Closed-form forward noising: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, per image.
inline ImageBatch q_sample(const ImageBatch& x0, const std::vector<int>& t, const ImageBatch& eps,
                           const NoiseSchedule& sched) {
    require_same_shape(x0, eps, "q_sample");
    detail::check_timesteps(t, x0.n, sched, "q_sample");
    ImageBatch out(x0.n, x0.c, x0.h, x0.w);
    const std::size_t m = x0.image_size();
    for (int i = 0; i < x0.n; ++i) {
        const double ab = sched.alpha_bar_at(t[static_cast<std::size_t>(i)]);
        const double a = std::sqrt(ab);
        const double b = std::sqrt(1.0 - ab);
        const double* src = x0.image(i);
        const double* ns = eps.image(i);
        double* dst = out.image(i);
        for (std::size_t p = 0; p < m; ++p) dst[p] = a * src[p] + b * ns[p];
    }
    return out;
}

// Mean of the reverse transition given a noise estimate:
// (x_t - beta_t / sqrt(1 - ab_t) * eps_hat) / sqrt(1 - beta_t).
inline ImageBatch posterior_mean(const ImageBatch& xt, const std::vector<int>& t,
                                 const ImageBatch& eps_hat, const NoiseSchedule& sched) {
    require_same_shape(xt, eps_hat, "posterior_mean");
    detail::check_timesteps(t, xt.n, sched, "posterior_mean");
    ImageBatch out(xt.n, xt.c, xt.h, xt.w);
    const std::size_t m = xt.image_size();
    for (int i = 0; i < xt.n; ++i) {
        const int ti = t[static_cast<std::size_t>(i)];
        const double inv = 1.0 / std::sqrt(1.0 - sched.beta_at(ti));
        const double coef = sched.beta_at(ti) / std::sqrt(1.0 - sched.alpha_bar_at(ti));
        const double* x = xt.image(i);
        const double* e = eps_hat.image(i);
        double* dst = out.image(i);
        for (std::size_t p = 0; p < m; ++p) dst[p] = inv * (x[p] - coef * e[p]);
    }
    return out;
}

// One (timestep, noise image) pair per batch item, fixed before the loss is
// evaluated so the same draw can be replayed against different models.
struct LossDraws {
    std::vector<int> t;
    ImageBatch eps;
};

// Sequential draws from a single stream: per item, first the timestep, then
// the noise pixels.
inline LossDraws make_loss_draws(int n, int c, int h, int w, const NoiseSchedule& sched, Rng& rng) {
    LossDraws d;
    d.t.resize(static_cast<std::size_t>(n));
    d.eps = ImageBatch(n, c, h, w);
    const std::size_t m = d.eps.image_size();
    for (int i = 0; i < n; ++i) {
        d.t[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(1, sched.T));
        double* e = d.eps.image(i);
        for (std::size_t p = 0; p < m; ++p) e[p] = rng.normal();
    }
    return d;
}

// Draws keyed to item identity: each item's (t, eps) comes from its own
// stream derived from (base_seed, item_key), so reordering a batch or moving
// an item between batches does not change its draw.
inline LossDraws make_keyed_loss_draws(std::span<const std::uint64_t> item_keys, int c, int h,
                                       int w, const NoiseSchedule& sched,
                                       std::uint64_t base_seed) {
    const int n = static_cast<int>(item_keys.size());
    LossDraws d;
    d.t.resize(static_cast<std::size_t>(n));
    d.eps = ImageBatch(n, c, h, w);
    const std::size_t m = d.eps.image_size();
    for (int i = 0; i < n; ++i) {
        Rng rng(derive_seed(base_seed, item_keys[static_cast<std::size_t>(i)]));
        d.t[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(1, sched.T));
        double* e = d.eps.image(i);
        for (std::size_t p = 0; p < m; ++p) e[p] = rng.normal();
    }
    return d;
}

// Monte-Carlo estimate of the noise-prediction objective on one batch: the
// squared error between drawn and predicted noise, summed over pixels and
// averaged over the batch.
inline double simple_loss(const NoisePredictor& pred, const ImageBatch& x0,
                          const NoiseSchedule& sched, const LossDraws& draws) {
    require_same_shape(x0, draws.eps, "simple_loss");
    const ImageBatch xt = q_sample(x0, draws.t, draws.eps, sched);
    const ImageBatch eps_hat = pred.predict(xt, draws.t);
    require_same_shape(x0, eps_hat, "simple_loss: prediction");
    double acc = 0.0;
    const std::size_t total = x0.size();
    for (std::size_t p = 0; p < total; ++p) {
        const double diff = draws.eps.v[p] - eps_hat.v[p];
        acc += diff * diff;
    }
    const double loss = acc / static_cast<double>(x0.n);
    if (!std::isfinite(loss)) {
        throw NumericError("simple_loss: non-finite loss " + std::to_string(loss));
    }
    return loss;
}

inline double simple_loss(const NoisePredictor& pred, const ImageBatch& x0,
                          const NoiseSchedule& sched, Rng& rng) {
    return simple_loss(pred, x0, sched, make_loss_draws(x0.n, x0.c, x0.h, x0.w, sched, rng));
}

// Ancestral sampling from pure noise.  Each image consumes its own stream
// derived from (seed, image index): first the x_T pixels, then one noise
// image per step with t > 1; the final step adds no noise.
inline ImageBatch ddpm_sample(const NoisePredictor& pred, const NoiseSchedule& sched, int n, int c,
                              int h, int w, std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("ddpm_sample: need n >= 1");
    ImageBatch x(n, c, h, w);
    std::vector<Rng> streams;
    streams.reserve(static_cast<std::size_t>(n));
    const std::size_t m = x.image_size();
    for (int i = 0; i < n; ++i) {
        streams.emplace_back(derive_seed(seed, stream_tag::sampling, static_cast<std::uint64_t>(i)));
        double* img = x.image(i);
        for (std::size_t p = 0; p < m; ++p) img[p] = streams.back().normal();
    }
    std::vector<int> tvec(static_cast<std::size_t>(n));
    for (int t = sched.T; t >= 1; --t) {
        std::fill(tvec.begin(), tvec.end(), t);
        const ImageBatch eps_hat = pred.predict(x, tvec);
        x = posterior_mean(x, tvec, eps_hat, sched);
        if (t > 1) {
            const double st = sched.sigma_at(t);
            for (int i = 0; i < n; ++i) {
                double* img = x.image(i);
                for (std::size_t p = 0; p < m; ++p) {
                    img[p] += st * streams[static_cast<std::size_t>(i)].normal();
                }
            }
        }
        if (!x.all_finite()) {
            throw NumericError("ddpm_sample: non-finite state at t = " + std::to_string(t));
        }
    }
    return x;
}

}  // namespace feddiffuse
