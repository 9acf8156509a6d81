#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <vector>

#include "feddiffuse/rng.hpp"
#include "feddiffuse/tensor.hpp"

namespace feddiffuse {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Sinusoidal position code for a single timestep: first half sin(t * w_i),
// second half cos(t * w_i), with w_i = 10000^(-2i/dim), so w_0 = 1.
inline std::vector<double> time_embedding(int t, int dim) {
    if (dim < 2 || dim % 2 != 0) {
        throw std::invalid_argument("time_embedding: dim must be even and >= 2");
    }
    std::vector<double> e(static_cast<std::size_t>(dim));
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double w = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
        e[static_cast<std::size_t>(i)] = std::sin(static_cast<double>(t) * w);
        e[static_cast<std::size_t>(half + i)] = std::cos(static_cast<double>(t) * w);
    }
    return e;
}

template <typename T>
MatRM<T> time_embedding_batch(const std::vector<int>& t, int dim) {
    MatRM<T> m(static_cast<Eigen::Index>(t.size()), dim);
    for (std::size_t i = 0; i < t.size(); ++i) {
        const std::vector<double> e = time_embedding(t[i], dim);
        for (int j = 0; j < dim; ++j) {
            m(static_cast<Eigen::Index>(i), j) = static_cast<T>(e[static_cast<std::size_t>(j)]);
        }
    }
    return m;
}

// Hands out disjoint index ranges of the flat parameter vector in
// construction order.
struct ParamAlloc {
    std::size_t next = 0;
    std::size_t take(std::size_t count) {
        const std::size_t off = next;
        next += count;
        return off;
    }
};

namespace detail {

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

// Reductions with a summation tree fixed by the length alone.  Vectorized
// library reductions reorder terms based on the buffer's address, which makes
// repeated runs disagree in the last bits; these stay bit-reproducible no
// matter where the allocator placed the data.
template <typename T>
double fixed_sum(const T* p, std::size_t n) {
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        a0 += static_cast<double>(p[i]);
        a1 += static_cast<double>(p[i + 1]);
        a2 += static_cast<double>(p[i + 2]);
        a3 += static_cast<double>(p[i + 3]);
    }
    for (; i < n; ++i) a0 += static_cast<double>(p[i]);
    return (a0 + a1) + (a2 + a3);
}

template <typename T>
double fixed_dot(const T* a, const T* b, std::size_t n) {
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        a0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
        a1 += static_cast<double>(a[i + 1]) * static_cast<double>(b[i + 1]);
        a2 += static_cast<double>(a[i + 2]) * static_cast<double>(b[i + 2]);
        a3 += static_cast<double>(a[i + 3]) * static_cast<double>(b[i + 3]);
    }
    for (; i < n; ++i) a0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return (a0 + a1) + (a2 + a3);
}

template <typename T>
double fixed_sumsq_about(const T* p, std::size_t n, double c) {
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const double d0 = static_cast<double>(p[i]) - c;
        const double d1 = static_cast<double>(p[i + 1]) - c;
        const double d2 = static_cast<double>(p[i + 2]) - c;
        const double d3 = static_cast<double>(p[i + 3]) - c;
        a0 += d0 * d0;
        a1 += d1 * d1;
        a2 += d2 * d2;
        a3 += d3 * d3;
    }
    for (; i < n; ++i) {
        const double d = static_cast<double>(p[i]) - c;
        a0 += d * d;
    }
    return (a0 + a1) + (a2 + a3);
}

}  // namespace detail

template <typename T>
struct SiluCache {
    Tensor<T> in;
};

template <typename T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
Tensor<T> silu_forward(const Tensor<T>& x, SiluCache<T>* cache) {
    Tensor<T> y(x.n, x.c, x.h, x.w);
    ConstArrayMap<T> xa(x.v.data(), static_cast<Eigen::Index>(x.size()));
    ArrayMap<T> ya(y.v.data(), static_cast<Eigen::Index>(y.size()));
    ya = xa / (T(1) + (-xa).exp());
    if (cache) cache->in = x;
    return y;
}

template <typename T>
Tensor<T> silu_backward(const SiluCache<T>& cache, const Tensor<T>& gy) {
    const Tensor<T>& x = cache.in;
    Tensor<T> gx(x.n, x.c, x.h, x.w);
    ConstArrayMap<T> xa(x.v.data(), static_cast<Eigen::Index>(x.size()));
    ConstArrayMap<T> ga(gy.v.data(), static_cast<Eigen::Index>(gy.size()));
    ArrayMap<T> out(gx.v.data(), static_cast<Eigen::Index>(gx.size()));
    auto s = T(1) / (T(1) + (-xa).exp());
    out = ga * s * (T(1) + xa * (T(1) - s));
    return gx;
}

template <typename T>
MatRM<T> silu_mat_forward(const MatRM<T>& x, MatRM<T>* cache_in) {
    if (cache_in) *cache_in = x;
    return x.array() * (T(1) / (T(1) + (-x.array()).exp()));
}

template <typename T>
MatRM<T> silu_mat_backward(const MatRM<T>& cached_in, const MatRM<T>& gy) {
    auto s = (T(1) / (T(1) + (-cached_in.array()).exp())).eval();
    return gy.array() * s * (T(1) + cached_in.array() * (T(1) - s));
}

// 2-D convolution over NCHW tensors, realized as GEMMs against im2col patch
// matrices covering several images at a time.  Weights live in the flat
// parameter vector as [cout][cin*k*k] row-major followed by [cout] biases.
struct Conv2d {
    int cin = 0, cout = 0, k = 0, stride = 1, pad = 0;
    std::size_t w_off = 0, b_off = 0;

    Conv2d() = default;
    Conv2d(ParamAlloc& alloc, int cin_, int cout_, int k_, int stride_, int pad_)
        : cin(cin_), cout(cout_), k(k_), stride(stride_), pad(pad_) {
        w_off = alloc.take(weight_count());
        b_off = alloc.take(static_cast<std::size_t>(cout));
    }

    std::size_t weight_count() const {
        return static_cast<std::size_t>(cout) * static_cast<std::size_t>(cin) *
               static_cast<std::size_t>(k) * static_cast<std::size_t>(k);
    }
    std::size_t param_count() const { return weight_count() + static_cast<std::size_t>(cout); }

    int out_side(int side) const { return (side + 2 * pad - k) / stride + 1; }

    void init(double* params, Rng& rng) const {
        const double fan_in = static_cast<double>(cin) * k * k;
        const double bound = std::sqrt(6.0 / fan_in);
        for (std::size_t i = 0; i < weight_count(); ++i) {
            params[w_off + i] = rng.uniform01() * 2.0 * bound - bound;
        }
        for (int i = 0; i < cout; ++i) params[b_off + static_cast<std::size_t>(i)] = 0.0;
    }

    template <typename T>
    struct Cache {
        Tensor<T> in;
    };

    // Images per im2col block: batching columns of several images into one
    // GEMM keeps the multiplies large enough to run near peak.
    template <typename T>
    int group_size(int n, Eigen::Index ck2, Eigen::Index npos) const {
        const std::size_t budget = std::size_t{32} << 20;
        const std::size_t per_image = static_cast<std::size_t>(ck2) * npos * sizeof(T);
        const std::size_t g = std::max<std::size_t>(1, budget / std::max<std::size_t>(1, per_image));
        return static_cast<int>(std::min<std::size_t>(g, static_cast<std::size_t>(n)));
    }

    // Writes image `image`'s patch matrix into columns [c0, c0 + npos) of col.
    // Stride-1 rows are contiguous input slices, copied in one block between
    // zero-filled borders.
    template <typename T>
    void fill_col(const Tensor<T>& x, int image, int ho, int wo, MatRM<T>& col,
                  Eigen::Index c0) const {
        for (int ci = 0; ci < cin; ++ci) {
            const T* plane = x.plane(image, ci);
            for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                    const Eigen::Index r = (static_cast<Eigen::Index>(ci) * k + ky) * k + kx;
                    const int ox_lo = (stride == 1) ? std::max(0, pad - kx) : 0;
                    const int ox_hi =
                        (stride == 1) ? std::min(wo, x.w + pad - kx) : wo;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int iy = oy * stride - pad + ky;
                        T* dst = col.data() + r * col.cols() + c0 +
                                 static_cast<Eigen::Index>(oy) * wo;
                        if (iy < 0 || iy >= x.h) {
                            std::fill(dst, dst + wo, T(0));
                            continue;
                        }
                        const T* row = plane + static_cast<std::size_t>(iy) * x.w;
                        if (stride == 1) {
                            std::fill(dst, dst + ox_lo, T(0));
                            std::copy(row + ox_lo - pad + kx, row + ox_hi - pad + kx,
                                      dst + ox_lo);
                            std::fill(dst + ox_hi, dst + wo, T(0));
                        } else {
                            for (int ox = 0; ox < wo; ++ox) {
                                const int ix = ox * stride - pad + kx;
                                dst[ox] = (ix < 0 || ix >= x.w) ? T(0) : row[ix];
                            }
                        }
                    }
                }
            }
        }
    }

    bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }

    // Output grid congruent with the input grid; such kernels decompose into
    // k*k offset GEMMs over a zero-padded copy, with no patch matrix at all.
    bool same_shape() const { return stride == 1 && k == 2 * pad + 1 && k > 1; }

    template <typename T>
    using StridedMap = Eigen::Map<MatRM<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
    template <typename T>
    using ConstStridedMap = Eigen::Map<const MatRM<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

    // Copies one image into a (cin x Hp*Wp) zero-bordered buffer with `slack`
    // readable-but-ignored elements past the end.
    template <typename T>
    void fill_padded(const Tensor<T>& x, int image, AlignedVector<T>& xpad) const {
        const int Hp = x.h + 2 * pad, Wp = x.w + 2 * pad;
        const std::size_t plane_p = static_cast<std::size_t>(Hp) * Wp;
        std::fill(xpad.begin(), xpad.end(), T(0));
        for (int ci = 0; ci < cin; ++ci) {
            const T* src = x.plane(image, ci);
            T* dst = xpad.data() + static_cast<std::size_t>(ci) * plane_p;
            for (int yy = 0; yy < x.h; ++yy) {
                std::copy(src + static_cast<std::size_t>(yy) * x.w,
                          src + static_cast<std::size_t>(yy + 1) * x.w,
                          dst + static_cast<std::size_t>(yy + pad) * Wp + pad);
            }
        }
    }

    // Repacks [cout][cin][k][k] weights into k*k dense (cout x cin) slices.
    template <typename T>
    std::vector<MatRM<T>> repack_weights(const T* w) const {
        const int kk = k * k;
        std::vector<MatRM<T>> wk(static_cast<std::size_t>(kk));
        for (int q = 0; q < kk; ++q) wk[static_cast<std::size_t>(q)].resize(cout, cin);
        for (int co = 0; co < cout; ++co) {
            for (int ci = 0; ci < cin; ++ci) {
                const T* cell = w + (static_cast<std::size_t>(co) * cin + ci) * kk;
                for (int q = 0; q < kk; ++q) wk[static_cast<std::size_t>(q)](co, ci) = cell[q];
            }
        }
        return wk;
    }

    template <typename T>
    Tensor<T> forward(const T* params, const Tensor<T>& x, Cache<T>* cache) const {
        const int ho = out_side(x.h), wo = out_side(x.w);
        Tensor<T> y(x.n, cout, ho, wo);
        const Eigen::Index ck2 = static_cast<Eigen::Index>(cin) * k * k;
        const Eigen::Index npos = static_cast<Eigen::Index>(ho) * wo;
        Eigen::Map<const MatRM<T>> W(params + w_off, cout, ck2);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(params + b_off, cout);
        if (cache) cache->in = x;
        if (pointwise()) {
            // Channel mixing only; the input planes already form the patch
            // matrix, so multiply in place.
            for (int i = 0; i < x.n; ++i) {
                Eigen::Map<const MatRM<T>> src(x.image(i), cin, npos);
                Eigen::Map<MatRM<T>> dst(y.image(i), cout, npos);
                dst.noalias() = W * src;
                dst.colwise() += b;
            }
            return y;
        }
        if (same_shape()) {
            const int Hp = x.h + 2 * pad, Wp = x.w + 2 * pad;
            const Eigen::Index plane_p = static_cast<Eigen::Index>(Hp) * Wp;
            // Wide grid: wo valid columns plus 2*pad seam columns per row;
            // the seams land outside the crop below.
            const Eigen::Index nwide = static_cast<Eigen::Index>(ho) * Wp;
            const std::vector<MatRM<T>> wk = repack_weights<T>(params + w_off);
            AlignedVector<T> xpad(static_cast<std::size_t>(cin) * plane_p + k, T(0));
            MatRM<T> ywide(cout, nwide);
            for (int i = 0; i < x.n; ++i) {
                fill_padded(x, i, xpad);
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        const Eigen::Index off = static_cast<Eigen::Index>(ky) * Wp + kx;
                        ConstStridedMap<T> a(xpad.data() + off, cin, nwide,
                                             Eigen::OuterStride<>(plane_p));
                        if (ky == 0 && kx == 0) {
                            ywide.noalias() = wk[0] * a;
                        } else {
                            ywide.noalias() += wk[static_cast<std::size_t>(ky * k + kx)] * a;
                        }
                    }
                }
                for (int co = 0; co < cout; ++co) {
                    const T* src = ywide.data() + static_cast<Eigen::Index>(co) * nwide;
                    T* dst = y.plane(i, co);
                    const T bias = b(co);
                    for (int oy = 0; oy < ho; ++oy) {
                        ConstArrayMap<T> row(src + static_cast<Eigen::Index>(oy) * Wp, wo);
                        ArrayMap<T> out(dst + static_cast<Eigen::Index>(oy) * wo, wo);
                        out = row + bias;
                    }
                }
            }
            return y;
        }
        const int G = group_size<T>(x.n, ck2, npos);
        MatRM<T> col(ck2, static_cast<Eigen::Index>(G) * npos);
        MatRM<T> out(cout, static_cast<Eigen::Index>(G) * npos);
        for (int i0 = 0; i0 < x.n; i0 += G) {
            const int g = std::min(G, x.n - i0);
            const Eigen::Index width = static_cast<Eigen::Index>(g) * npos;
            for (int j = 0; j < g; ++j) fill_col(x, i0 + j, ho, wo, col, j * npos);
            out.leftCols(width).noalias() = W * col.leftCols(width);
            for (int j = 0; j < g; ++j) {
                Eigen::Map<MatRM<T>> dst(y.image(i0 + j), cout, npos);
                dst = out.block(0, j * npos, cout, npos);
                dst.colwise() += b;
            }
        }
        return y;
    }

    template <typename T>
    Tensor<T> backward(const T* params, const Cache<T>& cache, const Tensor<T>& gy,
                       T* gparams) const {
        const Tensor<T>& x = cache.in;
        const int ho = gy.h, wo = gy.w;
        Tensor<T> gx(x.n, x.c, x.h, x.w);
        const Eigen::Index ck2 = static_cast<Eigen::Index>(cin) * k * k;
        const Eigen::Index npos = static_cast<Eigen::Index>(ho) * wo;
        Eigen::Map<const MatRM<T>> W(params + w_off, cout, ck2);
        Eigen::Map<MatRM<T>> gW(gparams + w_off, cout, ck2);
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gb(gparams + b_off, cout);
        if (pointwise()) {
            for (int i = 0; i < x.n; ++i) {
                Eigen::Map<const MatRM<T>> src(x.image(i), cin, npos);
                Eigen::Map<const MatRM<T>> g(gy.image(i), cout, npos);
                Eigen::Map<MatRM<T>> gdst(gx.image(i), cin, npos);
                gW.noalias() += g * src.transpose();
                for (int co = 0; co < cout; ++co) {
                    gb(co) += static_cast<T>(detail::fixed_sum(
                        gy.image(i) + static_cast<std::size_t>(co) * npos,
                        static_cast<std::size_t>(npos)));
                }
                gdst.noalias() = W.transpose() * g;
            }
            return gx;
        }
        if (same_shape()) {
            const int Hp = x.h + 2 * pad, Wp = x.w + 2 * pad;
            const Eigen::Index plane_p = static_cast<Eigen::Index>(Hp) * Wp;
            const Eigen::Index nwide = static_cast<Eigen::Index>(ho) * Wp;
            const int kk = k * k;
            const std::vector<MatRM<T>> wk = repack_weights<T>(params + w_off);
            std::vector<MatRM<T>> gwk(static_cast<std::size_t>(kk));
            for (int q = 0; q < kk; ++q) {
                gwk[static_cast<std::size_t>(q)] = MatRM<T>::Zero(cout, cin);
            }
            AlignedVector<T> xpad(static_cast<std::size_t>(cin) * plane_p + k);
            AlignedVector<T> gxpad(static_cast<std::size_t>(cin) * plane_p + k);
            // Wide gradient grid with zeroed seam columns, so seam positions
            // cancel out of every product below.
            MatRM<T> gwide = MatRM<T>::Zero(cout, nwide);
            for (int i = 0; i < x.n; ++i) {
                fill_padded(x, i, xpad);
                for (int co = 0; co < cout; ++co) {
                    const T* src = gy.plane(i, co);
                    T* dst = gwide.data() + static_cast<Eigen::Index>(co) * nwide;
                    for (int oy = 0; oy < ho; ++oy) {
                        std::copy(src + static_cast<std::size_t>(oy) * wo,
                                  src + static_cast<std::size_t>(oy + 1) * wo,
                                  dst + static_cast<Eigen::Index>(oy) * Wp);
                    }
                }
                for (int co = 0; co < cout; ++co) {
                    gb(co) += static_cast<T>(detail::fixed_sum(
                        gy.image(i) + static_cast<std::size_t>(co) * npos,
                        static_cast<std::size_t>(npos)));
                }
                std::fill(gxpad.begin(), gxpad.end(), T(0));
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        const Eigen::Index off = static_cast<Eigen::Index>(ky) * Wp + kx;
                        ConstStridedMap<T> a(xpad.data() + off, cin, nwide,
                                             Eigen::OuterStride<>(plane_p));
                        StridedMap<T> ga(gxpad.data() + off, cin, nwide,
                                         Eigen::OuterStride<>(plane_p));
                        const std::size_t q = static_cast<std::size_t>(ky * k + kx);
                        gwk[q].noalias() += gwide * a.transpose();
                        ga.noalias() += wk[q].transpose() * gwide;
                    }
                }
                for (int ci = 0; ci < cin; ++ci) {
                    const T* src = gxpad.data() + static_cast<std::size_t>(ci) * plane_p;
                    T* dst = gx.plane(i, ci);
                    for (int yy = 0; yy < x.h; ++yy) {
                        std::copy(src + static_cast<std::size_t>(yy + pad) * Wp + pad,
                                  src + static_cast<std::size_t>(yy + pad) * Wp + pad + x.w,
                                  dst + static_cast<std::size_t>(yy) * x.w);
                    }
                }
            }
            for (int co = 0; co < cout; ++co) {
                for (int ci = 0; ci < cin; ++ci) {
                    T* cell = gparams + w_off + (static_cast<std::size_t>(co) * cin + ci) * kk;
                    for (int q = 0; q < kk; ++q) {
                        cell[q] += gwk[static_cast<std::size_t>(q)](co, ci);
                    }
                }
            }
            return gx;
        }
        const int G = group_size<T>(x.n, ck2, npos);
        MatRM<T> col(ck2, static_cast<Eigen::Index>(G) * npos);
        MatRM<T> gcol(ck2, static_cast<Eigen::Index>(G) * npos);
        MatRM<T> gout(cout, static_cast<Eigen::Index>(G) * npos);
        for (int i0 = 0; i0 < x.n; i0 += G) {
            const int g = std::min(G, x.n - i0);
            const Eigen::Index width = static_cast<Eigen::Index>(g) * npos;
            for (int j = 0; j < g; ++j) {
                fill_col(x, i0 + j, ho, wo, col, j * npos);
                gout.block(0, j * npos, cout, npos) =
                    Eigen::Map<const MatRM<T>>(gy.image(i0 + j), cout, npos);
            }
            gW.noalias() += gout.leftCols(width) * col.leftCols(width).transpose();
            for (int co = 0; co < cout; ++co) {
                gb(co) += static_cast<T>(detail::fixed_sum(
                    gout.data() + static_cast<Eigen::Index>(co) * gout.cols(),
                    static_cast<std::size_t>(width)));
            }
            gcol.leftCols(width).noalias() = W.transpose() * gout.leftCols(width);
            for (int j = 0; j < g; ++j) {
                T* img = gx.image(i0 + j);
                for (int ci = 0; ci < cin; ++ci) {
                    T* plane = img + static_cast<std::size_t>(ci) * gx.plane_size();
                    for (int ky = 0; ky < k; ++ky) {
                        for (int kx = 0; kx < k; ++kx) {
                            const Eigen::Index r =
                                (static_cast<Eigen::Index>(ci) * k + ky) * k + kx;
                            const T* src = gcol.data() + r * gcol.cols() +
                                           static_cast<Eigen::Index>(j) * npos;
                            const int ox_lo = (stride == 1) ? std::max(0, pad - kx) : 0;
                            const int ox_hi =
                                (stride == 1) ? std::min(wo, x.w + pad - kx) : wo;
                            for (int oy = 0; oy < ho; ++oy) {
                                const int iy = oy * stride - pad + ky;
                                if (iy < 0 || iy >= x.h) continue;
                                T* row = plane + static_cast<std::size_t>(iy) * x.w;
                                const T* srow = src + static_cast<std::size_t>(oy) * wo;
                                if (stride == 1) {
                                    T* acc = row - pad + kx;
                                    for (int ox = ox_lo; ox < ox_hi; ++ox) acc[ox] += srow[ox];
                                } else {
                                    for (int ox = 0; ox < wo; ++ox) {
                                        const int ix = ox * stride - pad + kx;
                                        if (ix >= 0 && ix < x.w) row[ix] += srow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        return gx;
    }
};

// Normalizes each (image, channel group) block to zero mean and unit
// variance, then applies a learned per-channel affine map.
struct GroupNorm {
    int channels = 0, groups = 1;
    double eps = 1e-5;
    std::size_t g_off = 0, b_off = 0;

    GroupNorm() = default;
    GroupNorm(ParamAlloc& alloc, int channels_, int groups_)
        : channels(channels_), groups(groups_) {
        g_off = alloc.take(static_cast<std::size_t>(channels));
        b_off = alloc.take(static_cast<std::size_t>(channels));
    }

    static int pick_groups(int channels) {
        for (int g = std::min(8, channels); g > 1; --g) {
            if (channels % g == 0) return g;
        }
        return 1;
    }

    std::size_t param_count() const { return 2 * static_cast<std::size_t>(channels); }

    void init(double* params, Rng&) const {
        for (int i = 0; i < channels; ++i) {
            params[g_off + static_cast<std::size_t>(i)] = 1.0;
            params[b_off + static_cast<std::size_t>(i)] = 0.0;
        }
    }

    template <typename T>
    struct Cache {
        Tensor<T> xhat;
        std::vector<T> inv_std;  // one per (image, group)
    };

    template <typename T>
    Tensor<T> forward(const T* params, const Tensor<T>& x, Cache<T>* cache) const {
        Tensor<T> y(x.n, x.c, x.h, x.w);
        Tensor<T> xhat(x.n, x.c, x.h, x.w);
        const int cpg = channels / groups;
        const std::size_t plane = x.plane_size();
        const Eigen::Index m = static_cast<Eigen::Index>(cpg) * plane;
        std::vector<T> inv_std(static_cast<std::size_t>(x.n) * groups);
        for (int i = 0; i < x.n; ++i) {
            for (int g = 0; g < groups; ++g) {
                const T* src = x.plane(i, g * cpg);
                const std::size_t ms = static_cast<std::size_t>(m);
                const double mean = detail::fixed_sum(src, ms) / static_cast<double>(m);
                const double var =
                    detail::fixed_sumsq_about(src, ms, mean) / static_cast<double>(m);
                const T istd = static_cast<T>(1.0 / std::sqrt(var + eps));
                inv_std[static_cast<std::size_t>(i) * groups + g] = istd;
                for (int cc = 0; cc < cpg; ++cc) {
                    const int ch = g * cpg + cc;
                    const T gamma = params[g_off + static_cast<std::size_t>(ch)];
                    const T beta = params[b_off + static_cast<std::size_t>(ch)];
                    ConstArrayMap<T> xc(x.plane(i, ch), static_cast<Eigen::Index>(plane));
                    ArrayMap<T> xh(xhat.plane(i, ch), static_cast<Eigen::Index>(plane));
                    ArrayMap<T> yp(y.plane(i, ch), static_cast<Eigen::Index>(plane));
                    xh = (xc - static_cast<T>(mean)) * istd;
                    yp = gamma * xh + beta;
                }
            }
        }
        if (cache) {
            cache->xhat = std::move(xhat);
            cache->inv_std = std::move(inv_std);
        }
        return y;
    }

    template <typename T>
    Tensor<T> backward(const T* params, const Cache<T>& cache, const Tensor<T>& gy,
                       T* gparams) const {
        const Tensor<T>& xhat = cache.xhat;
        Tensor<T> gx(gy.n, gy.c, gy.h, gy.w);
        const int cpg = channels / groups;
        const Eigen::Index plane = static_cast<Eigen::Index>(gy.plane_size());
        const double m = static_cast<double>(cpg) * static_cast<double>(plane);
        std::vector<double> sg(static_cast<std::size_t>(channels));
        std::vector<double> sgx(static_cast<std::size_t>(channels));
        for (int i = 0; i < gy.n; ++i) {
            for (int ch = 0; ch < channels; ++ch) {
                const T* gp = gy.plane(i, ch);
                const T* xp = xhat.plane(i, ch);
                const std::size_t ps = static_cast<std::size_t>(plane);
                sg[static_cast<std::size_t>(ch)] = detail::fixed_sum(gp, ps);
                sgx[static_cast<std::size_t>(ch)] = detail::fixed_dot(gp, xp, ps);
                gparams[b_off + static_cast<std::size_t>(ch)] +=
                    static_cast<T>(sg[static_cast<std::size_t>(ch)]);
                gparams[g_off + static_cast<std::size_t>(ch)] +=
                    static_cast<T>(sgx[static_cast<std::size_t>(ch)]);
            }
            for (int g = 0; g < groups; ++g) {
                // gxhat = gy * gamma; gx = istd * (gxhat - mean(gxhat)
                //                                   - xhat * mean(gxhat * xhat))
                double mean_g = 0.0, mean_gx = 0.0;
                for (int cc = 0; cc < cpg; ++cc) {
                    const int ch = g * cpg + cc;
                    const double gamma =
                        static_cast<double>(params[g_off + static_cast<std::size_t>(ch)]);
                    mean_g += gamma * sg[static_cast<std::size_t>(ch)];
                    mean_gx += gamma * sgx[static_cast<std::size_t>(ch)];
                }
                mean_g /= m;
                mean_gx /= m;
                const T istd = cache.inv_std[static_cast<std::size_t>(i) * groups + g];
                for (int cc = 0; cc < cpg; ++cc) {
                    const int ch = g * cpg + cc;
                    const T gamma = params[g_off + static_cast<std::size_t>(ch)];
                    ConstArrayMap<T> gp(gy.plane(i, ch), plane);
                    ConstArrayMap<T> xp(xhat.plane(i, ch), plane);
                    ArrayMap<T> out(gx.plane(i, ch), plane);
                    out = istd * (gamma * gp - static_cast<T>(mean_g) -
                                  xp * static_cast<T>(mean_gx));
                }
            }
        }
        return gx;
    }
};

// Fully connected map on row-major (n x in) matrices; weights [out][in] plus
// [out] biases in the flat parameter vector.
struct Linear {
    int in = 0, out = 0;
    std::size_t w_off = 0, b_off = 0;

    Linear() = default;
    Linear(ParamAlloc& alloc, int in_, int out_) : in(in_), out(out_) {
        w_off = alloc.take(static_cast<std::size_t>(in) * static_cast<std::size_t>(out));
        b_off = alloc.take(static_cast<std::size_t>(out));
    }

    std::size_t param_count() const {
        return static_cast<std::size_t>(in) * out + static_cast<std::size_t>(out);
    }

    void init(double* params, Rng& rng) const {
        const double bound = std::sqrt(6.0 / static_cast<double>(in));
        const std::size_t wn = static_cast<std::size_t>(in) * out;
        for (std::size_t i = 0; i < wn; ++i) {
            params[w_off + i] = rng.uniform01() * 2.0 * bound - bound;
        }
        for (int i = 0; i < out; ++i) params[b_off + static_cast<std::size_t>(i)] = 0.0;
    }

    template <typename T>
    struct Cache {
        MatRM<T> in;
    };

    template <typename T>
    MatRM<T> forward(const T* params, const MatRM<T>& x, Cache<T>* cache) const {
        Eigen::Map<const MatRM<T>> W(params + w_off, out, in);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(params + b_off, out);
        MatRM<T> y = x * W.transpose();
        y.rowwise() += b.transpose();
        if (cache) cache->in = x;
        return y;
    }

    template <typename T>
    MatRM<T> backward(const T* params, const Cache<T>& cache, const MatRM<T>& gy,
                      T* gparams) const {
        Eigen::Map<const MatRM<T>> W(params + w_off, out, in);
        Eigen::Map<MatRM<T>> gW(gparams + w_off, out, in);
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gb(gparams + b_off, out);
        gW.noalias() += gy.transpose() * cache.in;
        std::vector<double> acc(static_cast<std::size_t>(out), 0.0);
        for (Eigen::Index r = 0; r < gy.rows(); ++r) {
            const T* row = gy.data() + r * gy.cols();
            for (int j = 0; j < out; ++j) acc[static_cast<std::size_t>(j)] += row[j];
        }
        for (int j = 0; j < out; ++j) gb(j) += static_cast<T>(acc[static_cast<std::size_t>(j)]);
        return gy * W;
    }
};

// Nearest-neighbour x2 upsample and its adjoint.
template <typename T>
Tensor<T> upsample2_forward(const Tensor<T>& x) {
    Tensor<T> y(x.n, x.c, x.h * 2, x.w * 2);
    for (int i = 0; i < x.n; ++i) {
        for (int ch = 0; ch < x.c; ++ch) {
            const T* src = x.plane(i, ch);
            T* dst = y.plane(i, ch);
            for (int yy = 0; yy < y.h; ++yy) {
                const T* row = src + static_cast<std::size_t>(yy / 2) * x.w;
                T* drow = dst + static_cast<std::size_t>(yy) * y.w;
                for (int xx = 0; xx < y.w; ++xx) drow[xx] = row[xx / 2];
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& gy) {
    Tensor<T> gx(gy.n, gy.c, gy.h / 2, gy.w / 2);
    for (int i = 0; i < gy.n; ++i) {
        for (int ch = 0; ch < gy.c; ++ch) {
            const T* src = gy.plane(i, ch);
            T* dst = gx.plane(i, ch);
            for (int yy = 0; yy < gy.h; ++yy) {
                const T* row = src + static_cast<std::size_t>(yy) * gy.w;
                T* drow = dst + static_cast<std::size_t>(yy / 2) * gx.w;
                for (int xx = 0; xx < gy.w; ++xx) drow[xx / 2] += row[xx];
            }
        }
    }
    return gx;
}

// Zero-pad to a centered (H, W) window; crop_center is its adjoint when the
// offsets match, which they do for same-parity sizes.
template <typename T>
Tensor<T> pad_center(const Tensor<T>& x, int H, int W) {
    const int oy = (H - x.h) / 2, ox = (W - x.w) / 2;
    Tensor<T> y(x.n, x.c, H, W);
    for (int i = 0; i < x.n; ++i) {
        for (int ch = 0; ch < x.c; ++ch) {
            const T* src = x.plane(i, ch);
            T* dst = y.plane(i, ch);
            for (int yy = 0; yy < x.h; ++yy) {
                std::copy(src + static_cast<std::size_t>(yy) * x.w,
                          src + static_cast<std::size_t>(yy + 1) * x.w,
                          dst + static_cast<std::size_t>(yy + oy) * W + ox);
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> crop_center(const Tensor<T>& x, int H, int W) {
    const int oy = (x.h - H) / 2, ox = (x.w - W) / 2;
    Tensor<T> y(x.n, x.c, H, W);
    for (int i = 0; i < x.n; ++i) {
        for (int ch = 0; ch < x.c; ++ch) {
            const T* src = x.plane(i, ch);
            T* dst = y.plane(i, ch);
            for (int yy = 0; yy < H; ++yy) {
                const T* row = src + static_cast<std::size_t>(yy + oy) * x.w + ox;
                std::copy(row, row + W, dst + static_cast<std::size_t>(yy) * W);
            }
        }
    }
    return y;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> y(a.n, a.c + b.c, a.h, a.w);
    for (int i = 0; i < a.n; ++i) {
        std::copy(a.image(i), a.image(i) + a.image_size(), y.image(i));
        std::copy(b.image(i), b.image(i) + b.image_size(), y.image(i) + a.image_size());
    }
    return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& g, int c_first) {
    Tensor<T> ga(g.n, c_first, g.h, g.w);
    Tensor<T> gb(g.n, g.c - c_first, g.h, g.w);
    for (int i = 0; i < g.n; ++i) {
        const T* src = g.image(i);
        std::copy(src, src + ga.image_size(), ga.image(i));
        std::copy(src + ga.image_size(), src + g.image_size(), gb.image(i));
    }
    return {std::move(ga), std::move(gb)};
}

}  // namespace feddiffuse
