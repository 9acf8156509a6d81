#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "feddiffuse/diffusion.hpp"
#include "feddiffuse/errors.hpp"
#include "feddiffuse/layers.hpp"
#include "feddiffuse/rng.hpp"
#include "feddiffuse/schedule.hpp"
#include "feddiffuse/tensor.hpp"

namespace feddiffuse {

using ParameterVector = std::vector<double>;

enum class Segment { encoder, bottleneck, decoder };

inline constexpr std::array<Segment, 3> all_segments = {Segment::encoder, Segment::bottleneck,
                                                        Segment::decoder};

inline const char* segment_name(Segment s) {
    switch (s) {
        case Segment::encoder: return "encoder";
        case Segment::bottleneck: return "bottleneck";
        default: return "decoder";
    }
}

struct SegmentRange {
    std::size_t begin = 0, end = 0;
    std::size_t size() const { return end - begin; }
};

// Contiguous, disjoint index ranges covering [0, total()) in the order
// encoder, bottleneck, decoder.
struct SegmentLayout {
    SegmentRange encoder, bottleneck, decoder;

    std::size_t total() const { return decoder.end; }

    const SegmentRange& range(Segment s) const {
        switch (s) {
            case Segment::encoder: return encoder;
            case Segment::bottleneck: return bottleneck;
            default: return decoder;
        }
    }

    std::size_t size(Segment s) const { return range(s).size(); }
};

inline SegmentLayout make_layout(std::size_t enc, std::size_t bot, std::size_t dec) {
    SegmentLayout l;
    l.encoder = {0, enc};
    l.bottleneck = {enc, enc + bot};
    l.decoder = {enc + bot, enc + bot + dec};
    return l;
}

inline std::vector<double> read_segment(const ParameterVector& params, const SegmentLayout& layout,
                                        Segment seg) {
    const SegmentRange& r = layout.range(seg);
    if (r.end > params.size()) {
        throw std::invalid_argument("read_segment: layout range exceeds parameter vector");
    }
    return std::vector<double>(params.begin() + static_cast<std::ptrdiff_t>(r.begin),
                               params.begin() + static_cast<std::ptrdiff_t>(r.end));
}

inline void write_segment(ParameterVector& params, const SegmentLayout& layout, Segment seg,
                          std::span<const double> values) {
    const SegmentRange& r = layout.range(seg);
    if (r.end > params.size()) {
        throw std::invalid_argument("write_segment: layout range exceeds parameter vector");
    }
    if (values.size() != r.size()) {
        throw std::invalid_argument("write_segment: got " + std::to_string(values.size()) +
                                    " values for a segment of size " + std::to_string(r.size()));
    }
    std::copy(values.begin(), values.end(), params.begin() + static_cast<std::ptrdiff_t>(r.begin));
}

enum class Precision { f32, f64 };

struct ModelConfig {
    int in_channels = 1;
    int base_channels = 16;
    int depth = 3;
    int time_embed_dim = 32;
    int image_side = 28;
    Precision precision = Precision::f32;

    int padded_side() const {
        const int f = 1 << depth;
        return (image_side + f - 1) / f * f;
    }

    void validate() const {
        if (in_channels < 1) throw ConfigError("model: in_channels must be >= 1");
        if (base_channels < 1) throw ConfigError("model: base_channels must be >= 1");
        if (depth < 1 || depth > 6) throw ConfigError("model: depth must be in [1, 6]");
        if (time_embed_dim < 2 || time_embed_dim % 2 != 0) {
            throw ConfigError("model: time_embed_dim must be even and >= 2");
        }
        if (image_side < 1) throw ConfigError("model: image_side must be >= 1");
    }
};

// Residual block: pre-activation norm/SiLU around two 3x3 convolutions, a
// per-channel time-embedding shift after the first, and a 1x1 projection on
// the residual path when the channel count changes.
struct ResBlock {
    int cin = 0, cout = 0;
    GroupNorm gn1;
    Conv2d conv1;
    Linear time_proj;
    GroupNorm gn2;
    Conv2d conv2;
    std::optional<Conv2d> skip;

    ResBlock(ParamAlloc& a, int cin_, int cout_, int emb)
        : cin(cin_),
          cout(cout_),
          gn1(a, cin_, GroupNorm::pick_groups(cin_)),
          conv1(a, cin_, cout_, 3, 1, 1),
          time_proj(a, emb, cout_),
          gn2(a, cout_, GroupNorm::pick_groups(cout_)),
          conv2(a, cout_, cout_, 3, 1, 1) {
        if (cin_ != cout_) skip.emplace(a, cin_, cout_, 1, 1, 0);
    }

    void init(double* p, Rng& rng) const {
        gn1.init(p, rng);
        conv1.init(p, rng);
        time_proj.init(p, rng);
        gn2.init(p, rng);
        conv2.init(p, rng);
        if (skip) skip->init(p, rng);
    }

    template <typename T>
    struct Cache {
        GroupNorm::Cache<T> g1, g2;
        SiluCache<T> s1, s2;
        Conv2d::Cache<T> c1, c2, sk;
        Linear::Cache<T> tp;
    };

    template <typename T>
    Tensor<T> forward(const T* p, const Tensor<T>& x, const MatRM<T>& temb_act,
                      Cache<T>* c) const {
        Tensor<T> z1 = gn1.forward(p, x, c ? &c->g1 : nullptr);
        Tensor<T> a1 = silu_forward(z1, c ? &c->s1 : nullptr);
        Tensor<T> h = conv1.forward(p, a1, c ? &c->c1 : nullptr);
        // The per-channel time shift lands after the second normalization;
        // a shift applied before it would be removed along with the mean.
        Tensor<T> z2 = gn2.forward(p, h, c ? &c->g2 : nullptr);
        MatRM<T> shift = time_proj.forward(p, temb_act, c ? &c->tp : nullptr);
        const Eigen::Index plane = static_cast<Eigen::Index>(z2.plane_size());
        for (int i = 0; i < z2.n; ++i) {
            for (int ch = 0; ch < z2.c; ++ch) {
                ArrayMap<T> zp(z2.plane(i, ch), plane);
                zp += shift(i, ch);
            }
        }
        Tensor<T> a2 = silu_forward(z2, c ? &c->s2 : nullptr);
        Tensor<T> out = conv2.forward(p, a2, c ? &c->c2 : nullptr);
        if (skip) {
            Tensor<T> r = skip->forward(p, x, c ? &c->sk : nullptr);
            for (std::size_t q = 0; q < out.size(); ++q) out.v[q] += r.v[q];
        } else {
            for (std::size_t q = 0; q < out.size(); ++q) out.v[q] += x.v[q];
        }
        return out;
    }

    template <typename T>
    Tensor<T> backward(const T* p, const Cache<T>& c, const Tensor<T>& gy, T* gp,
                       MatRM<T>& g_temb_act) const {
        Tensor<T> gx = skip ? skip->backward(p, c.sk, gy, gp) : gy;
        Tensor<T> ga2 = conv2.backward(p, c.c2, gy, gp);
        Tensor<T> gz2 = silu_backward(c.s2, ga2);
        MatRM<T> gshift(gz2.n, gz2.c);
        const Eigen::Index plane = static_cast<Eigen::Index>(gz2.plane_size());
        for (int i = 0; i < gz2.n; ++i) {
            for (int ch = 0; ch < gz2.c; ++ch) {
                gshift(i, ch) = static_cast<T>(
                    detail::fixed_sum(gz2.plane(i, ch), static_cast<std::size_t>(plane)));
            }
        }
        g_temb_act += time_proj.backward(p, c.tp, gshift, gp);
        Tensor<T> gh = gn2.backward(p, c.g2, gz2, gp);
        Tensor<T> ga1 = conv1.backward(p, c.c1, gh, gp);
        Tensor<T> gz1 = silu_backward(c.s1, ga1);
        Tensor<T> gmain = gn1.backward(p, c.g1, gz1, gp);
        for (std::size_t q = 0; q < gx.size(); ++q) gx.v[q] += gmain.v[q];
        return gx;
    }
};

// U-shaped noise predictor over the flat parameter vector.  Channel widths
// double per level up to the last downsample, which preserves them; skip
// connections concatenate encoder activations into the decoder.  Parameters
// are allocated in construction order: everything before the middle block is
// the encoder segment, the middle block is the bottleneck, the rest is the
// decoder.
struct UNet {
    ModelConfig cfg;
    Linear time_fc1, time_fc2;
    Conv2d init_conv;
    std::vector<ResBlock> enc;
    std::vector<Conv2d> down;
    std::unique_ptr<ResBlock> mid;
    std::vector<Conv2d> up_conv;
    std::vector<ResBlock> dec;
    GroupNorm out_norm;
    Conv2d out_conv;
    SegmentLayout layout;
    std::vector<int> cs;

    explicit UNet(const ModelConfig& cfg_) : cfg(cfg_) {
        cfg.validate();
        cs.resize(static_cast<std::size_t>(cfg.depth));
        for (int l = 0; l < cfg.depth; ++l) cs[static_cast<std::size_t>(l)] = cfg.base_channels << l;
        const int c_mid = cs.back();
        const int emb = cfg.time_embed_dim;

        ParamAlloc a;
        time_fc1 = Linear(a, emb, emb);
        time_fc2 = Linear(a, emb, emb);
        init_conv = Conv2d(a, cfg.in_channels, cs[0], 3, 1, 1);
        enc.reserve(static_cast<std::size_t>(cfg.depth));
        down.reserve(static_cast<std::size_t>(cfg.depth));
        for (int l = 0; l < cfg.depth; ++l) {
            const int c = cs[static_cast<std::size_t>(l)];
            const int c_next = (l + 1 < cfg.depth) ? cs[static_cast<std::size_t>(l) + 1] : c_mid;
            enc.emplace_back(a, c, c, emb);
            down.emplace_back(a, c, c_next, 3, 2, 1);
        }
        layout.encoder = {0, a.next};
        mid = std::make_unique<ResBlock>(a, c_mid, c_mid, emb);
        layout.bottleneck = {layout.encoder.end, a.next};
        up_conv.resize(static_cast<std::size_t>(cfg.depth));
        for (int l = cfg.depth - 1; l >= 0; --l) {
            const int c_in = (l == cfg.depth - 1) ? c_mid : cs[static_cast<std::size_t>(l) + 1];
            const int c = cs[static_cast<std::size_t>(l)];
            up_conv[static_cast<std::size_t>(l)] = Conv2d(a, c_in, c, 3, 1, 1);
            dec.emplace_back(a, 2 * c, c, emb);
        }
        out_norm = GroupNorm(a, cs[0], GroupNorm::pick_groups(cs[0]));
        out_conv = Conv2d(a, cs[0], cfg.in_channels, 3, 1, 1);
        layout.decoder = {layout.bottleneck.end, a.next};
    }

    // dec[j] handles level (depth - 1 - j); this maps a level to its block.
    ResBlock& dec_at(int level) { return dec[static_cast<std::size_t>(cfg.depth - 1 - level)]; }
    const ResBlock& dec_at(int level) const {
        return dec[static_cast<std::size_t>(cfg.depth - 1 - level)];
    }

    std::size_t param_count() const { return layout.total(); }

    void init_params(double* p, Rng& rng) const {
        time_fc1.init(p, rng);
        time_fc2.init(p, rng);
        init_conv.init(p, rng);
        for (int l = 0; l < cfg.depth; ++l) {
            enc[static_cast<std::size_t>(l)].init(p, rng);
            down[static_cast<std::size_t>(l)].init(p, rng);
        }
        mid->init(p, rng);
        for (int l = cfg.depth - 1; l >= 0; --l) {
            up_conv[static_cast<std::size_t>(l)].init(p, rng);
            dec_at(l).init(p, rng);
        }
        out_norm.init(p, rng);
        out_conv.init(p, rng);
    }

    template <typename T>
    struct Cache {
        Linear::Cache<T> fc1, fc2;
        MatRM<T> s1_in, s2_in;
        Conv2d::Cache<T> init;
        std::vector<typename ResBlock::template Cache<T>> enc_blocks;
        std::vector<Conv2d::Cache<T>> downs;
        typename ResBlock::template Cache<T> mid_block;
        std::vector<Conv2d::Cache<T>> ups;
        std::vector<typename ResBlock::template Cache<T>> dec_blocks;
        GroupNorm::Cache<T> out_norm;
        SiluCache<T> out_act;
        Conv2d::Cache<T> out_conv;
    };

    template <typename T>
    Tensor<T> forward(const T* p, const Tensor<T>& x, const std::vector<int>& t,
                      Cache<T>* c) const {
        if (x.c != cfg.in_channels || x.h != cfg.image_side || x.w != cfg.image_side) {
            throw std::invalid_argument("denoiser: input shape does not match configuration");
        }
        if (static_cast<int>(t.size()) != x.n) {
            throw std::invalid_argument("denoiser: one timestep per image required");
        }
        if (c) {
            c->enc_blocks.resize(static_cast<std::size_t>(cfg.depth));
            c->downs.resize(static_cast<std::size_t>(cfg.depth));
            c->ups.resize(static_cast<std::size_t>(cfg.depth));
            c->dec_blocks.resize(static_cast<std::size_t>(cfg.depth));
        }
        MatRM<T> temb0 = time_embedding_batch<T>(t, cfg.time_embed_dim);
        MatRM<T> h1 = time_fc1.forward(p, temb0, c ? &c->fc1 : nullptr);
        MatRM<T> a1 = silu_mat_forward(h1, c ? &c->s1_in : nullptr);
        MatRM<T> h2 = time_fc2.forward(p, a1, c ? &c->fc2 : nullptr);
        MatRM<T> temb_act = silu_mat_forward(h2, c ? &c->s2_in : nullptr);

        const int S = cfg.padded_side();
        Tensor<T> xx = (S == cfg.image_side) ? x : pad_center(x, S, S);
        xx = init_conv.forward(p, xx, c ? &c->init : nullptr);
        std::vector<Tensor<T>> skips;
        skips.reserve(static_cast<std::size_t>(cfg.depth));
        for (int l = 0; l < cfg.depth; ++l) {
            xx = enc[static_cast<std::size_t>(l)].forward(
                p, xx, temb_act, c ? &c->enc_blocks[static_cast<std::size_t>(l)] : nullptr);
            skips.push_back(xx);
            xx = down[static_cast<std::size_t>(l)].forward(
                p, xx, c ? &c->downs[static_cast<std::size_t>(l)] : nullptr);
        }
        xx = mid->forward(p, xx, temb_act, c ? &c->mid_block : nullptr);
        for (int l = cfg.depth - 1; l >= 0; --l) {
            xx = upsample2_forward(xx);
            xx = up_conv[static_cast<std::size_t>(l)].forward(
                p, xx, c ? &c->ups[static_cast<std::size_t>(l)] : nullptr);
            xx = concat_channels(skips[static_cast<std::size_t>(l)], xx);
            xx = dec_at(l).forward(p, xx, temb_act,
                                   c ? &c->dec_blocks[static_cast<std::size_t>(l)] : nullptr);
        }
        Tensor<T> z = out_norm.forward(p, xx, c ? &c->out_norm : nullptr);
        Tensor<T> act = silu_forward(z, c ? &c->out_act : nullptr);
        Tensor<T> y = out_conv.forward(p, act, c ? &c->out_conv : nullptr);
        if (S != cfg.image_side) y = crop_center(y, cfg.image_side, cfg.image_side);
        return y;
    }

    template <typename T>
    void backward(const T* p, const Cache<T>& c, const Tensor<T>& gy, T* gp) const {
        const int S = cfg.padded_side();
        Tensor<T> g = (S == cfg.image_side) ? gy : pad_center(gy, S, S);
        g = out_conv.backward(p, c.out_conv, g, gp);
        g = silu_backward(c.out_act, g);
        g = out_norm.backward(p, c.out_norm, g, gp);

        MatRM<T> g_temb_act = MatRM<T>::Zero(gy.n, cfg.time_embed_dim);
        std::vector<Tensor<T>> g_skips(static_cast<std::size_t>(cfg.depth));
        for (int l = 0; l < cfg.depth; ++l) {
            g = dec_at(l).backward(p, c.dec_blocks[static_cast<std::size_t>(l)], g, gp,
                                   g_temb_act);
            auto [g_skip, g_main] = split_channels(g, cs[static_cast<std::size_t>(l)]);
            g_skips[static_cast<std::size_t>(l)] = std::move(g_skip);
            g = up_conv[static_cast<std::size_t>(l)].backward(
                p, c.ups[static_cast<std::size_t>(l)], g_main, gp);
            g = upsample2_backward(g);
        }
        g = mid->backward(p, c.mid_block, g, gp, g_temb_act);
        for (int l = cfg.depth - 1; l >= 0; --l) {
            g = down[static_cast<std::size_t>(l)].backward(
                p, c.downs[static_cast<std::size_t>(l)], g, gp);
            const Tensor<T>& gs = g_skips[static_cast<std::size_t>(l)];
            for (std::size_t q = 0; q < g.size(); ++q) g.v[q] += gs.v[q];
            g = enc[static_cast<std::size_t>(l)].backward(
                p, c.enc_blocks[static_cast<std::size_t>(l)], g, gp, g_temb_act);
        }
        init_conv.backward(p, c.init, g, gp);

        MatRM<T> gh2 = silu_mat_backward(c.s2_in, g_temb_act);
        MatRM<T> ga1 = time_fc2.backward(p, c.fc2, gh2, gp);
        MatRM<T> gh1 = silu_mat_backward(c.s1_in, ga1);
        time_fc1.backward(p, c.fc1, gh1, gp);
    }
};

// Owns a parameter vector and the network metadata needed to run it.  The
// parameters are immutable once constructed; training produces new instances
// via with_params.
class Denoiser final : public NoisePredictor {
  public:
    Denoiser(ModelConfig cfg, ParameterVector params)
        : cfg_(cfg), net_(std::make_shared<UNet>(cfg)), params_(std::move(params)) {
        if (params_.size() != net_->param_count()) {
            throw std::invalid_argument("denoiser: expected " +
                                        std::to_string(net_->param_count()) + " parameters, got " +
                                        std::to_string(params_.size()));
        }
    }

    const ModelConfig& config() const { return cfg_; }
    const SegmentLayout& layout() const { return net_->layout; }
    const ParameterVector& params() const { return params_; }
    std::size_t param_count() const { return params_.size(); }

    Denoiser with_params(ParameterVector p) const { return Denoiser(cfg_, net_, std::move(p)); }

    ImageBatch predict(const ImageBatch& xt, const std::vector<int>& t) const override {
        if (cfg_.precision == Precision::f64) {
            return net_->forward<double>(params_.data(), xt, t, nullptr);
        }
        std::vector<float> pbuf(params_.begin(), params_.end());
        Tensor<float> x32 = tensor_cast<float>(xt);
        Tensor<float> y32 = net_->forward<float>(pbuf.data(), x32, t, nullptr);
        return tensor_cast<double>(y32);
    }

    // Loss and full parameter gradient for one batch under fixed draws.
    std::pair<double, std::vector<double>> loss_gradient(const ImageBatch& x0,
                                                         const NoiseSchedule& sched,
                                                         const LossDraws& draws) const {
        require_same_shape(x0, draws.eps, "loss_gradient");
        const ImageBatch xt = q_sample(x0, draws.t, draws.eps, sched);
        if (cfg_.precision == Precision::f64) {
            return loss_gradient_impl<double>(xt, x0, draws);
        }
        return loss_gradient_impl<float>(xt, x0, draws);
    }

  private:
    Denoiser(ModelConfig cfg, std::shared_ptr<UNet> net, ParameterVector params)
        : cfg_(cfg), net_(std::move(net)), params_(std::move(params)) {
        if (params_.size() != net_->param_count()) {
            throw std::invalid_argument("denoiser: parameter vector length mismatch");
        }
    }

    template <typename T>
    std::pair<double, std::vector<double>> loss_gradient_impl(const ImageBatch& xt,
                                                              const ImageBatch& x0,
                                                              const LossDraws& draws) const {
        std::vector<T> pbuf(params_.begin(), params_.end());
        Tensor<T> xT = tensor_cast<T>(xt);
        typename UNet::template Cache<T> cache;
        Tensor<T> eps_hat = net_->forward<T>(pbuf.data(), xT, draws.t, &cache);

        double acc = 0.0;
        Tensor<T> gy(x0.n, x0.c, x0.h, x0.w);
        const double inv_n = 1.0 / static_cast<double>(x0.n);
        for (std::size_t q = 0; q < x0.size(); ++q) {
            const double diff = static_cast<double>(eps_hat.v[q]) - draws.eps.v[q];
            acc += diff * diff;
            gy.v[q] = static_cast<T>(2.0 * inv_n * diff);
        }
        const double loss = acc * inv_n;
        if (!std::isfinite(loss)) {
            throw NumericError("loss_gradient: non-finite loss " + std::to_string(loss));
        }
        std::vector<T> gp(params_.size(), T(0));
        net_->backward<T>(pbuf.data(), cache, gy, gp.data());
        std::vector<double> grad(gp.begin(), gp.end());
        for (double g : grad) {
            if (!std::isfinite(g)) throw NumericError("loss_gradient: non-finite gradient entry");
        }
        return {loss, std::move(grad)};
    }

    ModelConfig cfg_;
    std::shared_ptr<UNet> net_;
    ParameterVector params_;
};

inline Denoiser build_denoiser(const ModelConfig& cfg, Rng& rng) {
    UNet net(cfg);
    ParameterVector params(net.param_count());
    net.init_params(params.data(), rng);
    return Denoiser(cfg, std::move(params));
}

inline Denoiser build_denoiser(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, stream_tag::model_init));
    return build_denoiser(cfg, rng);
}

}  // namespace feddiffuse
