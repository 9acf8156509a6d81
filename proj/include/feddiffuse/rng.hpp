#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace feddiffuse {

// splitmix64 finalizer; good avalanche, used to key independent streams.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Folds an ordered key tuple into a base seed. Streams derived from the same
// base with different keys are independent for all practical purposes.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
    std::uint64_t s = mix64(base);
    for (std::uint64_t p : parts) s = mix64(s ^ mix64(p));
    return s;
}

template <typename... Parts>
std::uint64_t derive_seed(std::uint64_t base, Parts... parts) {
    return derive_seed(base, {static_cast<std::uint64_t>(parts)...});
}

// Purpose tags keep unrelated draw streams from ever sharing a seed.
namespace stream_tag {
constexpr std::uint64_t model_init = 0x01;
constexpr std::uint64_t data = 0x02;
constexpr std::uint64_t partition = 0x03;
constexpr std::uint64_t round_plan = 0x04;
constexpr std::uint64_t batch_shuffle = 0x05;
constexpr std::uint64_t loss_draw = 0x06;
constexpr std::uint64_t sampling = 0x07;
constexpr std::uint64_t evaluation = 0x08;
constexpr std::uint64_t training = 0x09;
constexpr std::uint64_t fixture = 0x0a;
}  // namespace stream_tag

// Deterministic draw stream. mt19937_64 is bit-exact across platforms; the
// distributions on top are implemented here because the standard library's
// are not.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform double in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; draws come in cached pairs.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform01();  // (0, 1]
        double u2 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Unbiased integer in [0, n) by masked rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n <= 1) return 0;
        std::uint64_t mask = ~std::uint64_t{0} >> __builtin_clzll(n - 1 | 1);
        for (;;) {
            std::uint64_t x = gen_() & mask;
            if (x < n) return x;
        }
    }

    // Inclusive range.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    bool coin() { return (gen_() >> 63) != 0; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Gamma(shape, 1) via Marsaglia-Tsang; shapes below one are boosted
    // through Gamma(shape + 1) * U^(1/shape).
    double gamma(double shape) {
        if (shape < 1.0) {
            double u = 1.0 - uniform01();
            return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        double d = shape - 1.0 / 3.0;
        double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            double u = 1.0 - uniform01();
            if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
        }
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace feddiffuse
