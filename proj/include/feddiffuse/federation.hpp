#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "feddiffuse/dataset.hpp"
#include "feddiffuse/diffusion.hpp"
#include "feddiffuse/errors.hpp"
#include "feddiffuse/model.hpp"
#include "feddiffuse/optimizer.hpp"
#include "feddiffuse/partition.hpp"
#include "feddiffuse/rng.hpp"
#include "feddiffuse/schedule.hpp"

namespace feddiffuse {

enum class Method { full, usplit, ulatdec, udec };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::full: return "full";
        case Method::usplit: return "usplit";
        case Method::ulatdec: return "ulatdec";
        default: return "udec";
    }
}

// Segments the federator and clients exchange each round.
inline std::vector<Segment> exchanged_segments(Method m) {
    switch (m) {
        case Method::full:
        case Method::usplit:
            return {Segment::encoder, Segment::bottleneck, Segment::decoder};
        case Method::ulatdec: return {Segment::bottleneck, Segment::decoder};
        default: return {Segment::decoder};
    }
}

inline int segment_index(Segment s) {
    switch (s) {
        case Segment::encoder: return 0;
        case Segment::bottleneck: return 1;
        default: return 2;
    }
}

// Which segments each client reports at the end of a round.
struct RoundPlan {
    int round = 0;
    std::vector<std::array<bool, 3>> upload;

    int clients() const { return static_cast<int>(upload.size()); }
    bool uploads(int k, Segment s) const {
        return upload[static_cast<std::size_t>(k)][static_cast<std::size_t>(segment_index(s))];
    }
    int reporter_count(Segment s) const {
        int n = 0;
        for (int k = 0; k < clients(); ++k) n += uploads(k, s) ? 1 : 0;
        return n;
    }
};

inline RoundPlan plan_all_segments(int k, int round = 0) {
    RoundPlan p;
    p.round = round;
    p.upload.assign(static_cast<std::size_t>(k), {true, true, true});
    return p;
}

// Random pairing: in each pair one client reports the encoder and the other
// the decoder, with the bottleneck going to a random member.  An odd
// leftover reports the bottleneck plus a random one of encoder/decoder.
// Draw order is fixed (shuffle, then per pair a role coin and a bottleneck
// coin, then the leftover coin) so plans are reproducible per seed.
inline RoundPlan assign_usplit_tasks(int k, Rng& rng) {
    if (k < 2) throw ConfigError("assign_usplit_tasks: need at least 2 clients");
    std::vector<std::size_t> order(static_cast<std::size_t>(k));
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    RoundPlan plan;
    plan.upload.assign(static_cast<std::size_t>(k), {false, false, false});
    for (int i = 0; i + 1 < k; i += 2) {
        const std::size_t a = order[static_cast<std::size_t>(i)];
        const std::size_t b = order[static_cast<std::size_t>(i) + 1];
        const bool a_encodes = rng.coin();
        plan.upload[a_encodes ? a : b][0] = true;
        plan.upload[a_encodes ? b : a][2] = true;
        plan.upload[rng.coin() ? a : b][1] = true;
    }
    if (k % 2 == 1) {
        const std::size_t c = order.back();
        plan.upload[c][1] = true;
        plan.upload[c][rng.coin() ? 0 : 2] = true;
    }
    return plan;
}

// Per-direction, per-segment parameter counts.
struct SegmentCounts {
    std::uint64_t encoder = 0, bottleneck = 0, decoder = 0;

    std::uint64_t total() const { return encoder + bottleneck + decoder; }
    void add(Segment s, std::uint64_t n) {
        switch (s) {
            case Segment::encoder: encoder += n; break;
            case Segment::bottleneck: bottleneck += n; break;
            default: decoder += n; break;
        }
    }
    std::uint64_t get(Segment s) const {
        switch (s) {
            case Segment::encoder: return encoder;
            case Segment::bottleneck: return bottleneck;
            default: return decoder;
        }
    }
};

struct ClientTraffic {
    SegmentCounts download, upload;
    std::uint64_t total() const { return download.total() + upload.total(); }
};

struct RoundTraffic {
    int round = 0;
    std::vector<ClientTraffic> clients;
    std::uint64_t total() const {
        std::uint64_t n = 0;
        for (const ClientTraffic& c : clients) n += c.total();
        return n;
    }
};

struct CommLedger {
    std::vector<RoundTraffic> rounds;
    std::uint64_t total() const {
        std::uint64_t n = 0;
        for (const RoundTraffic& r : rounds) n += r.total();
        return n;
    }
};

// Exact per-round accounting, shared by the trainer and the mock simulator
// so the ledger can never drift from the formulas.  Full/USplit broadcast
// the whole vector; UDec/ULatDec move only the exchanged segments; USplit
// uploads follow the round plan.
inline RoundTraffic round_traffic(Method m, int k, const SegmentLayout& layout,
                                  const RoundPlan* plan, int round) {
    RoundTraffic rt;
    rt.round = round;
    rt.clients.resize(static_cast<std::size_t>(k));
    const bool full_download = (m == Method::full || m == Method::usplit);
    const std::vector<Segment> exchanged = exchanged_segments(m);
    for (int c = 0; c < k; ++c) {
        ClientTraffic& ct = rt.clients[static_cast<std::size_t>(c)];
        if (full_download) {
            for (Segment s : all_segments) ct.download.add(s, layout.size(s));
        } else {
            for (Segment s : exchanged) ct.download.add(s, layout.size(s));
        }
        if (m == Method::usplit) {
            if (!plan) throw std::invalid_argument("round_traffic: usplit requires a plan");
            for (Segment s : all_segments) {
                if (plan->uploads(c, s)) ct.upload.add(s, layout.size(s));
            }
        } else {
            for (Segment s : exchanged) ct.upload.add(s, layout.size(s));
        }
    }
    return rt;
}

// Closed-form cumulative traffic.  USplit with odd K is plan-dependent
// (the leftover client's upload varies per round), so the realized plan
// sequence must be supplied; even K admits the closed form R(K + K/2)P.
inline std::uint64_t expected_traffic(Method m, int k, int r, const SegmentLayout& layout,
                                      std::span<const RoundPlan> plans = {}) {
    if (k < 1 || r < 1) throw std::invalid_argument("expected_traffic: need K >= 1 and R >= 1");
    const std::uint64_t K = static_cast<std::uint64_t>(k);
    const std::uint64_t R = static_cast<std::uint64_t>(r);
    const std::uint64_t P = layout.total();
    switch (m) {
        case Method::full: return 2 * R * K * P;
        case Method::udec: return 2 * R * K * layout.decoder.size();
        case Method::ulatdec:
            return 2 * R * K * (layout.bottleneck.size() + layout.decoder.size());
        case Method::usplit: break;
    }
    const std::uint64_t downloads = R * K * P;
    if (!plans.empty()) {
        if (plans.size() != static_cast<std::size_t>(r)) {
            throw std::invalid_argument("expected_traffic: need one plan per round");
        }
        std::uint64_t uploads = 0;
        for (const RoundPlan& plan : plans) {
            if (plan.clients() != k) {
                throw std::invalid_argument("expected_traffic: plan client count mismatch");
            }
            for (int c = 0; c < k; ++c) {
                for (Segment s : all_segments) {
                    if (plan.uploads(c, s)) uploads += layout.size(s);
                }
            }
        }
        return downloads + uploads;
    }
    if (k % 2 != 0) {
        throw std::invalid_argument(
            "expected_traffic: usplit with odd K is plan-dependent; pass the realized plans");
    }
    return downloads + R * (K / 2) * P;
}

// Ledger produced without any training, drawing the same per-round plans the
// trainer would (seed -> round stream), with parameter counts taken from the
// declared layout.
inline std::pair<CommLedger, std::vector<RoundPlan>> simulate_traffic(Method m, int k, int r,
                                                                      const SegmentLayout& layout,
                                                                      std::uint64_t seed) {
    CommLedger ledger;
    std::vector<RoundPlan> plans;
    for (int round = 1; round <= r; ++round) {
        const RoundPlan* plan_ptr = nullptr;
        if (m == Method::usplit) {
            Rng rng(derive_seed(seed, stream_tag::round_plan, static_cast<std::uint64_t>(round)));
            RoundPlan plan = assign_usplit_tasks(k, rng);
            plan.round = round;
            plans.push_back(std::move(plan));
            plan_ptr = &plans.back();
        }
        ledger.rounds.push_back(round_traffic(m, k, layout, plan_ptr, round));
    }
    return {std::move(ledger), std::move(plans)};
}

// Layout of the full-scale model configuration (2,996,315 parameters),
// used for traffic accounting at that scale without building the network.
inline SegmentLayout reference_layout() { return make_layout(1'237'982, 966'000, 792'333); }

namespace detail {

// Weighted blend over one index range, written as base-plus-deltas against
// the first positive-weight update so that identical updates reproduce their
// value bit-for-bit.
inline void blend_range(ParameterVector& out, const std::vector<ParameterVector>& updates,
                        const std::vector<double>& alpha, std::size_t begin, std::size_t end,
                        const char* what) {
    std::size_t ref = updates.size();
    for (std::size_t k = 0; k < alpha.size(); ++k) {
        if (alpha[k] > 0.0) {
            ref = k;
            break;
        }
    }
    if (ref == updates.size()) {
        throw ConfigError(std::string(what) + ": zero total weight");
    }
    const ParameterVector& base = updates[ref];
    std::copy(base.begin() + static_cast<std::ptrdiff_t>(begin),
              base.begin() + static_cast<std::ptrdiff_t>(end),
              out.begin() + static_cast<std::ptrdiff_t>(begin));
    for (std::size_t k = 0; k < updates.size(); ++k) {
        if (k == ref || alpha[k] == 0.0) continue;
        const ParameterVector& u = updates[k];
        const double a = alpha[k];
        for (std::size_t i = begin; i < end; ++i) out[i] += a * (u[i] - base[i]);
    }
}

inline std::vector<double> normalized_weights(const std::vector<std::size_t>& sizes,
                                              const std::vector<bool>& mask, const char* what) {
    double total = 0.0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
        if (mask.empty() || mask[k]) total += static_cast<double>(sizes[k]);
    }
    if (!(total > 0.0)) throw ConfigError(std::string(what) + ": zero total weight");
    std::vector<double> alpha(sizes.size(), 0.0);
    for (std::size_t k = 0; k < sizes.size(); ++k) {
        if (mask.empty() || mask[k]) alpha[k] = static_cast<double>(sizes[k]) / total;
    }
    return alpha;
}

}  // namespace detail

// Dataset-size-weighted average of full parameter vectors.
inline ParameterVector aggregate_full(const std::vector<ParameterVector>& updates,
                                      const std::vector<std::size_t>& sizes) {
    if (updates.empty() || updates.size() != sizes.size()) {
        throw std::invalid_argument("aggregate_full: need matching non-empty updates and sizes");
    }
    for (const ParameterVector& u : updates) {
        if (u.size() != updates.front().size()) {
            throw std::invalid_argument("aggregate_full: parameter vectors differ in length");
        }
    }
    const std::vector<double> alpha = detail::normalized_weights(sizes, {}, "aggregate_full");
    ParameterVector out(updates.front().size());
    detail::blend_range(out, updates, alpha, 0, out.size(), "aggregate_full");
    return out;
}

// Per-segment weighted average over that segment's reporters, with weights
// renormalized within the reporter set.  Non-reported entries of an update
// are never read.
inline ParameterVector aggregate_split(const std::vector<ParameterVector>& updates,
                                       const RoundPlan& plan, const std::vector<std::size_t>& sizes,
                                       const SegmentLayout& layout) {
    if (updates.empty() || updates.size() != sizes.size() ||
        plan.clients() != static_cast<int>(updates.size())) {
        throw std::invalid_argument("aggregate_split: updates, sizes and plan disagree on K");
    }
    for (const ParameterVector& u : updates) {
        if (u.size() != layout.total()) {
            throw std::invalid_argument("aggregate_split: parameter vector length != layout total");
        }
    }
    for (Segment s : all_segments) {
        if (plan.reporter_count(s) == 0) {
            throw ConfigError(std::string("aggregate_split: no reporter for segment ") +
                              segment_name(s));
        }
    }
    ParameterVector out(layout.total());
    for (Segment s : all_segments) {
        std::vector<bool> mask(updates.size());
        for (std::size_t k = 0; k < updates.size(); ++k) {
            mask[k] = plan.uploads(static_cast<int>(k), s);
        }
        const std::vector<double> alpha =
            detail::normalized_weights(sizes, mask, "aggregate_split");
        const SegmentRange& r = layout.range(s);
        detail::blend_range(out, updates, alpha, r.begin, r.end, "aggregate_split");
    }
    return out;
}

struct FederationConfig {
    Method method = Method::full;
    int clients = 2;
    int rounds = 15;
    int epochs = 5;
    int batch = 128;
    double lr = 1e-4;
    OptimizerKind optimizer = OptimizerKind::adam;
    std::uint64_t seed = 0;

    void validate() const {
        if (clients < 1) throw ConfigError("federation: clients must be >= 1");
        if (method == Method::usplit && clients < 2) {
            throw ConfigError("federation: usplit needs at least 2 clients");
        }
        if (rounds < 1) throw ConfigError("federation: rounds must be >= 1");
        if (epochs < 1) throw ConfigError("federation: epochs must be >= 1");
        if (batch < 1) throw ConfigError("federation: batch must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("federation: lr must be > 0");
    }
};

struct ClientUpdate {
    ParameterVector params;
    std::vector<double> batch_losses;
    double mean_loss = std::numeric_limits<double>::quiet_NaN();
};

// E local epochs of mini-batch descent on the shard, starting from `start`.
// Optimizer state is created fresh here, so it never survives a round.
// Streams are derived as:
//   batch order, epoch e:  (seed, batch_shuffle, round, client, e)
//   loss draws, epoch e:   ((seed, loss_draw, round, client, e), item index)
// keying each item's (t, eps) to its dataset index, so a draw does not
// depend on where the shuffle placed the item.  An empty shard returns
// `start` unchanged.
inline ClientUpdate client_update(const Denoiser& start, const Dataset& ds,
                                  std::span<const std::size_t> shard, const NoiseSchedule& sched,
                                  const FederationConfig& fed, int round, int client) {
    ClientUpdate cu;
    if (shard.empty()) {
        cu.params = start.params();
        return cu;
    }
    Denoiser model = start;
    OptimizerState opt = OptimizerState::make(fed.optimizer, fed.lr, start.param_count());
    std::vector<std::size_t> order(shard.begin(), shard.end());
    const ModelConfig& mc = start.config();
    for (int e = 0; e < fed.epochs; ++e) {
        Rng shuffle_rng(derive_seed(fed.seed, stream_tag::batch_shuffle,
                                    static_cast<std::uint64_t>(round),
                                    static_cast<std::uint64_t>(client),
                                    static_cast<std::uint64_t>(e)));
        shuffle_rng.shuffle(order);
        const std::uint64_t draw_base =
            derive_seed(fed.seed, stream_tag::loss_draw, static_cast<std::uint64_t>(round),
                        static_cast<std::uint64_t>(client), static_cast<std::uint64_t>(e));
        for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(fed.batch)) {
            const std::size_t take =
                std::min(order.size() - pos, static_cast<std::size_t>(fed.batch));
            std::span<const std::size_t> chunk(order.data() + pos, take);
            std::vector<std::uint64_t> keys(chunk.begin(), chunk.end());
            const LossDraws draws = make_keyed_loss_draws(keys, mc.in_channels, mc.image_side,
                                                          mc.image_side, sched, draw_base);
            const ImageBatch batch = ds.batch(chunk);
            auto [loss, grad] = model.loss_gradient(batch, sched, draws);
            ParameterVector p = model.params();
            apply_update_inplace(p, grad, opt);
            model = model.with_params(std::move(p));
            cu.batch_losses.push_back(loss);
        }
    }
    cu.params = model.params();
    double acc = 0.0;
    for (double l : cu.batch_losses) acc += l;
    cu.mean_loss = acc / static_cast<double>(cu.batch_losses.size());
    return cu;
}

struct RoundMetrics {
    int round = 0;
    double mean_loss = 0.0;
    std::vector<double> client_losses;
    std::uint64_t cumulative_params = 0;
};

struct TrainingResult {
    ParameterVector global;
    // composed per-client models (local segments + final global exchanged
    // segments); populated for udec/ulatdec only
    std::vector<ParameterVector> client_params;
    SegmentLayout layout;
    CommLedger ledger;
    std::vector<RoundPlan> plans;  // usplit only
    std::vector<RoundMetrics> metrics;
};

// The round loop: broadcast (exchanged segments of) the global vector, run
// client updates, aggregate with dataset-size weights, account every
// transfer.  Locally-owned segments of udec/ulatdec clients persist across
// rounds.
inline TrainingResult run_training(const FederationConfig& fed, const ModelConfig& mcfg,
                                   const NoiseSchedule& sched, const Dataset& ds,
                                   const Partition& part) {
    fed.validate();
    mcfg.validate();
    if (static_cast<int>(part.shards.size()) != fed.clients) {
        throw std::invalid_argument("run_training: partition has " +
                                    std::to_string(part.shards.size()) + " shards for " +
                                    std::to_string(fed.clients) + " clients");
    }
    if (ds.rows != mcfg.image_side || ds.cols != mcfg.image_side || mcfg.in_channels != 1) {
        throw ConfigError("run_training: model expects 1x" + std::to_string(mcfg.image_side) +
                          "x" + std::to_string(mcfg.image_side) + " images, dataset is 1x" +
                          std::to_string(ds.rows) + "x" + std::to_string(ds.cols));
    }
    const std::vector<std::size_t> sizes = part.shard_sizes();
    std::size_t total_size = 0;
    for (std::size_t s : sizes) total_size += s;
    if (total_size == 0) throw ConfigError("run_training: all shards are empty");

    const Denoiser init = build_denoiser(mcfg, fed.seed);
    TrainingResult res;
    res.layout = init.layout();
    ParameterVector theta = init.params();
    const std::vector<Segment> exchanged = exchanged_segments(fed.method);
    const bool partial = (fed.method == Method::udec || fed.method == Method::ulatdec);
    std::vector<ParameterVector> locals(static_cast<std::size_t>(fed.clients), theta);

    for (int round = 1; round <= fed.rounds; ++round) {
        const RoundPlan* plan_ptr = nullptr;
        if (fed.method == Method::usplit) {
            Rng rng(derive_seed(fed.seed, stream_tag::round_plan,
                                static_cast<std::uint64_t>(round)));
            RoundPlan plan = assign_usplit_tasks(fed.clients, rng);
            plan.round = round;
            res.plans.push_back(std::move(plan));
            plan_ptr = &res.plans.back();
        }
        res.ledger.rounds.push_back(
            round_traffic(fed.method, fed.clients, res.layout, plan_ptr, round));

        std::vector<ParameterVector> updates(static_cast<std::size_t>(fed.clients));
        RoundMetrics rm;
        rm.round = round;
        rm.client_losses.assign(static_cast<std::size_t>(fed.clients),
                                std::numeric_limits<double>::quiet_NaN());
        for (int k = 0; k < fed.clients; ++k) {
            const std::size_t ki = static_cast<std::size_t>(k);
            for (Segment s : exchanged) {
                const SegmentRange& r = res.layout.range(s);
                std::copy(theta.begin() + static_cast<std::ptrdiff_t>(r.begin),
                          theta.begin() + static_cast<std::ptrdiff_t>(r.end),
                          locals[ki].begin() + static_cast<std::ptrdiff_t>(r.begin));
            }
            const std::vector<std::size_t>& shard = part.shards[ki].indices;
            if (shard.empty()) {
                updates[ki] = locals[ki];
                continue;
            }
            ClientUpdate cu = client_update(init.with_params(locals[ki]), ds, shard, sched, fed,
                                            round, k);
            updates[ki] = std::move(cu.params);
            locals[ki] = updates[ki];
            rm.client_losses[ki] = cu.mean_loss;
        }

        switch (fed.method) {
            case Method::full:
                theta = aggregate_full(updates, sizes);
                break;
            case Method::usplit:
                theta = aggregate_split(updates, *plan_ptr, sizes, res.layout);
                break;
            default: {
                const std::vector<double> alpha =
                    detail::normalized_weights(sizes, {}, "run_training");
                for (Segment s : exchanged) {
                    const SegmentRange& r = res.layout.range(s);
                    detail::blend_range(theta, updates, alpha, r.begin, r.end, "run_training");
                }
                break;
            }
        }
        for (double v : theta) {
            if (!std::isfinite(v)) {
                throw NumericError("run_training: non-finite global parameter after round " +
                                   std::to_string(round));
            }
        }

        double acc = 0.0;
        int counted = 0;
        for (double l : rm.client_losses) {
            if (std::isfinite(l)) {
                acc += l;
                ++counted;
            }
        }
        rm.mean_loss = counted > 0 ? acc / counted : std::numeric_limits<double>::quiet_NaN();
        rm.cumulative_params = res.ledger.total();
        res.metrics.push_back(std::move(rm));
    }

    res.global = std::move(theta);
    if (partial) {
        res.client_params.reserve(locals.size());
        for (std::size_t k = 0; k < locals.size(); ++k) {
            ParameterVector composed = locals[k];
            for (Segment s : exchanged) {
                const SegmentRange& r = res.layout.range(s);
                std::copy(res.global.begin() + static_cast<std::ptrdiff_t>(r.begin),
                          res.global.begin() + static_cast<std::ptrdiff_t>(r.end),
                          composed.begin() + static_cast<std::ptrdiff_t>(r.begin));
            }
            res.client_params.push_back(std::move(composed));
        }
    }
    return res;
}

}  // namespace feddiffuse
