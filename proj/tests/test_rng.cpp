#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "feddiffuse/feddiffuse.hpp"

using namespace feddiffuse;

TEST_CASE("mix64 matches the splitmix64 reference outputs") {
    // Reference values from an independent implementation of the splitmix64
    // step function (state x, one advance).
    CHECK(mix64(0) == 0xe220a8397b1dcdafULL);
    CHECK(mix64(1) == 0x910a2dec89025cc1ULL);
    CHECK(mix64(42) == 0xbdd732262feb6e95ULL);
    CHECK(mix64(0xdeadbeefULL) == 0x4adfb90f68c9eb9bULL);
}

TEST_CASE("derive_seed is order-sensitive and arity-sensitive") {
    const std::uint64_t base = 17;
    CHECK(derive_seed(base, 1, 2) != derive_seed(base, 2, 1));
    CHECK(derive_seed(base, 1) != derive_seed(base, 1, 0));
    CHECK(derive_seed(base, 1, 2) == derive_seed(base, {1, 2}));
    CHECK(derive_seed(base, stream_tag::sampling) != derive_seed(base, stream_tag::training));

    // Distinct purpose tags must key distinct streams.
    std::vector<std::uint64_t> tags = {
        stream_tag::model_init, stream_tag::data,       stream_tag::partition,
        stream_tag::round_plan, stream_tag::batch_shuffle, stream_tag::loss_draw,
        stream_tag::sampling,   stream_tag::evaluation, stream_tag::training,
        stream_tag::fixture};
    std::vector<std::uint64_t> derived;
    for (auto t : tags) derived.push_back(derive_seed(base, t));
    std::sort(derived.begin(), derived.end());
    CHECK(std::adjacent_find(derived.begin(), derived.end()) == derived.end());
}

TEST_CASE("identical seeds give identical mixed-call sequences") {
    Rng a(123), b(123), c(124);
    bool any_difference_from_c = false;
    for (int i = 0; i < 1000; ++i) {
        const double ua = a.uniform01();
        CHECK(ua == b.uniform01());
        CHECK(a.normal() == b.normal());
        CHECK(a.below(97) == b.below(97));
        CHECK(a.coin() == b.coin());
        if (ua != c.uniform01()) any_difference_from_c = true;
        c.normal();
        c.below(97);
        c.coin();
    }
    CHECK(any_difference_from_c);
}

TEST_CASE("uniform01 stays in [0,1) with the right moments") {
    Rng rng(7);
    const int n = 200000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform01();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        sum += u;
        sum2 += u * u;
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    CHECK(std::abs(mean - 0.5) < 0.004);
    CHECK(std::abs(var - 1.0 / 12.0) < 0.003);
}

TEST_CASE("normal has standard moments") {
    Rng rng(11);
    const int n = 200000;
    double sum = 0.0, sum2 = 0.0, sum3 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sum2 += x * x;
        sum3 += x * x * x;
    }
    const double mean = sum / n;
    CHECK(std::abs(mean) < 0.012);
    CHECK(std::abs(sum2 / n - 1.0) < 0.025);
    CHECK(std::abs(sum3 / n) < 0.05);
}

TEST_CASE("below is bounded and covers all residues") {
    Rng rng(5);
    CHECK(rng.below(0) == 0);
    CHECK(rng.below(1) == 0);
    std::map<std::uint64_t, int> counts;
    for (int i = 0; i < 10000; ++i) {
        const std::uint64_t x = rng.below(7);
        REQUIRE(x < 7);
        counts[x]++;
    }
    CHECK(counts.size() == 7);
    for (const auto& [value, count] : counts) CHECK(count > 1000);

    // A power-of-two bound exercises the no-rejection path.
    for (int i = 0; i < 1000; ++i) REQUIRE(rng.below(8) < 8);
}

TEST_CASE("uniform_int is inclusive on both ends") {
    Rng rng(3);
    bool saw_lo = false, saw_hi = false;
    for (int i = 0; i < 5000; ++i) {
        const std::int64_t x = rng.uniform_int(-3, 3);
        REQUIRE(x >= -3);
        REQUIRE(x <= 3);
        saw_lo |= (x == -3);
        saw_hi |= (x == 3);
    }
    CHECK(saw_lo);
    CHECK(saw_hi);
}

TEST_CASE("coin is balanced") {
    Rng rng(19);
    int heads = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) heads += rng.coin() ? 1 : 0;
    CHECK(std::abs(heads / double(n) - 0.5) < 0.012);
}

TEST_CASE("shuffle permutes and is uniform over small permutations") {
    Rng rng(23);
    std::vector<int> v = {1, 2, 3, 4, 5, 6, 7, 8};
    auto sorted = v;
    rng.shuffle(v);
    auto check = v;
    std::sort(check.begin(), check.end());
    CHECK(check == sorted);

    std::map<std::vector<int>, int> perm_counts;
    for (int i = 0; i < 6000; ++i) {
        std::vector<int> p = {0, 1, 2};
        rng.shuffle(p);
        perm_counts[p]++;
    }
    CHECK(perm_counts.size() == 6);
    for (const auto& [perm, count] : perm_counts) {
        CHECK(count > 850);
        CHECK(count < 1150);
    }
}

TEST_CASE("gamma matches mean and variance of the target distribution") {
    for (const double shape : {0.5, 2.5, 4.0}) {
        Rng rng(static_cast<std::uint64_t>(shape * 100));
        const int n = 100000;
        double sum = 0.0, sum2 = 0.0;
        for (int i = 0; i < n; ++i) {
            const double x = rng.gamma(shape);
            REQUIRE(x > 0.0);
            sum += x;
            sum2 += x * x;
        }
        const double mean = sum / n;
        const double var = sum2 / n - mean * mean;
        CHECK(std::abs(mean - shape) < 0.05);
        CHECK(std::abs(var - shape) < 0.15);
    }
}
