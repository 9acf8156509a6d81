#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "feddiffuse/dataset.hpp"
#include "feddiffuse/errors.hpp"
#include "feddiffuse/rng.hpp"

namespace feddiffuse {

enum class PartitionKind { iid, label_skew, quantity_skew };

inline const char* partition_name(PartitionKind k) {
    switch (k) {
        case PartitionKind::iid: return "iid";
        case PartitionKind::label_skew: return "label-skew";
        default: return "quantity-skew";
    }
}

struct PartitionSpec {
    PartitionKind kind = PartitionKind::iid;
    int clients = 2;
    double beta = 0.5;  // Dirichlet concentration; unused for iid
    std::uint64_t seed = 0;

    void validate() const {
        if (clients < 1) throw ConfigError("partition: clients must be >= 1");
        if (kind != PartitionKind::iid && !(beta > 0.0)) {
            throw ConfigError("partition: dirichlet beta must be > 0");
        }
    }
};

struct ClientShard {
    int client = 0;
    std::vector<std::size_t> indices;
};

struct Partition {
    PartitionSpec spec;
    std::vector<ClientShard> shards;
    // realized Dirichlet draws: one row per class for label skew, a single
    // row for quantity skew, empty for iid
    std::vector<std::vector<double>> proportions;

    std::vector<std::size_t> shard_sizes() const {
        std::vector<std::size_t> s;
        s.reserve(shards.size());
        for (const ClientShard& sh : shards) s.push_back(sh.indices.size());
        return s;
    }
};

// Normalized Gamma(beta, 1) draws.  Rejects the measure-zero all-zero
// outcome (possible via underflow at tiny beta) by redrawing.
inline std::vector<double> dirichlet_sample(double beta, int k, Rng& rng) {
    if (!(beta > 0.0) || k < 1) {
        throw std::invalid_argument("dirichlet_sample: need beta > 0 and k >= 1");
    }
    std::vector<double> p(static_cast<std::size_t>(k));
    for (;;) {
        double sum = 0.0;
        for (auto& v : p) {
            v = rng.gamma(beta);
            sum += v;
        }
        if (sum > 0.0) {
            for (auto& v : p) v /= sum;
            return p;
        }
    }
}

// Converts proportions of `total` into exact integer counts: floors first,
// then hands the leftover units to the largest fractional remainders (ties
// broken toward lower index).
inline std::vector<std::size_t> largest_remainder_counts(const std::vector<double>& props,
                                                         std::size_t total) {
    const std::size_t k = props.size();
    std::vector<std::size_t> counts(k);
    std::vector<std::pair<double, std::size_t>> rema(k);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < k; ++i) {
        const double quota = props[i] * static_cast<double>(total);
        counts[i] = static_cast<std::size_t>(quota);
        assigned += counts[i];
        rema[i] = {quota - static_cast<double>(counts[i]), i};
    }
    std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (std::size_t j = 0; assigned < total; ++j, ++assigned) {
        counts[rema[j % k].second] += 1;
    }
    return counts;
}

namespace detail {

inline std::vector<ClientShard> empty_shards(int k) {
    std::vector<ClientShard> shards(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) shards[static_cast<std::size_t>(i)].client = i;
    return shards;
}

inline void sort_shards(std::vector<ClientShard>& shards) {
    for (ClientShard& s : shards) std::sort(s.indices.begin(), s.indices.end());
}

// Splits `order` into consecutive runs of the given sizes.
inline void assign_runs(const std::vector<std::size_t>& order,
                        const std::vector<std::size_t>& counts,
                        std::vector<ClientShard>& shards) {
    std::size_t pos = 0;
    for (std::size_t k = 0; k < counts.size(); ++k) {
        auto& dst = shards[k].indices;
        dst.insert(dst.end(), order.begin() + static_cast<std::ptrdiff_t>(pos),
                   order.begin() + static_cast<std::ptrdiff_t>(pos + counts[k]));
        pos += counts[k];
    }
}

}  // namespace detail

// Seeded shuffle, then a near-equal contiguous split (sizes differ by <= 1).
inline std::vector<ClientShard> partition_iid(const Dataset& ds, int k, Rng& rng) {
    if (k < 1) throw ConfigError("partition_iid: clients must be >= 1");
    if (static_cast<std::size_t>(k) > ds.count()) {
        throw ConfigError("partition_iid: more clients (" + std::to_string(k) +
                          ") than images (" + std::to_string(ds.count()) + ")");
    }
    std::vector<std::size_t> order(ds.count());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    const std::size_t base = ds.count() / static_cast<std::size_t>(k);
    const std::size_t extra = ds.count() % static_cast<std::size_t>(k);
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), base);
    for (std::size_t i = 0; i < extra; ++i) counts[i] += 1;
    std::vector<ClientShard> shards = detail::empty_shards(k);
    detail::assign_runs(order, counts, shards);
    detail::sort_shards(shards);
    return shards;
}

// Per class: a Dirichlet draw decides each client's proportion of that
// class's (shuffled) instances; largest-remainder rounding conserves the
// class count exactly.
inline std::pair<std::vector<ClientShard>, std::vector<std::vector<double>>> partition_label_skew(
    const Dataset& ds, int k, double beta, Rng& rng) {
    if (k < 1) throw ConfigError("partition_label_skew: clients must be >= 1");
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.class_count));
    for (std::size_t i = 0; i < ds.count(); ++i) {
        by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    }
    for (int c = 0; c < ds.class_count; ++c) {
        if (by_class[static_cast<std::size_t>(c)].empty()) {
            throw ConfigError("partition_label_skew: class " + std::to_string(c) + " is empty");
        }
    }
    std::vector<ClientShard> shards = detail::empty_shards(k);
    std::vector<std::vector<double>> props;
    props.reserve(by_class.size());
    for (auto& cls : by_class) {
        std::vector<double> p = dirichlet_sample(beta, k, rng);
        rng.shuffle(cls);
        detail::assign_runs(cls, largest_remainder_counts(p, cls.size()), shards);
        props.push_back(std::move(p));
    }
    detail::sort_shards(shards);
    return {std::move(shards), std::move(props)};
}

// One Dirichlet draw decides each client's share of the whole (shuffled)
// index list.
inline std::pair<std::vector<ClientShard>, std::vector<double>> partition_quantity_skew(
    const Dataset& ds, int k, double beta, Rng& rng) {
    if (k < 1) throw ConfigError("partition_quantity_skew: clients must be >= 1");
    std::vector<double> p = dirichlet_sample(beta, k, rng);
    std::vector<std::size_t> order(ds.count());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    std::vector<ClientShard> shards = detail::empty_shards(k);
    detail::assign_runs(order, largest_remainder_counts(p, order.size()), shards);
    detail::sort_shards(shards);
    return {std::move(shards), std::move(p)};
}

inline Partition make_partition(const Dataset& ds, const PartitionSpec& spec) {
    spec.validate();
    Rng rng(derive_seed(spec.seed, stream_tag::partition));
    Partition out;
    out.spec = spec;
    switch (spec.kind) {
        case PartitionKind::iid:
            out.shards = partition_iid(ds, spec.clients, rng);
            break;
        case PartitionKind::label_skew: {
            auto [shards, props] = partition_label_skew(ds, spec.clients, spec.beta, rng);
            out.shards = std::move(shards);
            out.proportions = std::move(props);
            break;
        }
        case PartitionKind::quantity_skew: {
            auto [shards, props] = partition_quantity_skew(ds, spec.clients, spec.beta, rng);
            out.shards = std::move(shards);
            out.proportions.push_back(std::move(props));
            break;
        }
    }
    return out;
}

}  // namespace feddiffuse
