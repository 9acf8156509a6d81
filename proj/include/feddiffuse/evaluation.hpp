#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "feddiffuse/diffusion.hpp"
#include "feddiffuse/errors.hpp"
#include "feddiffuse/model.hpp"
#include "feddiffuse/rng.hpp"
#include "feddiffuse/tensor.hpp"

namespace feddiffuse {

struct FeatureStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    std::size_t count = 0;
};

enum class FeatureKind { raw_pixels, random_projection };

inline const char* feature_kind_name(FeatureKind k) {
    return k == FeatureKind::raw_pixels ? "raw_pixels" : "random_projection";
}

// Fixed (never trained) linear feature map.  An empty projection means
// identity on flattened pixels.
struct FeatureExtractor {
    FeatureKind kind = FeatureKind::raw_pixels;
    int input_dim = 0;
    int output_dim = 0;
    std::uint64_t seed = 0;
    Eigen::MatrixXd projection;  // output_dim x input_dim, orthonormal rows

    Eigen::MatrixXd extract(const ImageBatch& images) const {
        const int d = static_cast<int>(images.image_size());
        if (d != input_dim) {
            throw std::invalid_argument("feature extractor built for " +
                                        std::to_string(input_dim) + " pixels, got " +
                                        std::to_string(d));
        }
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
            flat(images.data(), images.n, d);
        if (projection.size() == 0) return flat;
        return flat * projection.transpose();
    }
};

// raw_pixels keeps pixel coordinates up to `cap` dimensions, then falls back
// to a seeded random orthonormal projection for covariance conditioning;
// random_projection always projects to min(cap, pixels).
inline FeatureExtractor make_feature_extractor(FeatureKind kind, int pixel_count,
                                               std::uint64_t seed, int cap = 256) {
    if (pixel_count < 1 || cap < 1) {
        throw std::invalid_argument("make_feature_extractor: need pixel_count >= 1 and cap >= 1");
    }
    FeatureExtractor fx;
    fx.kind = kind;
    fx.input_dim = pixel_count;
    fx.seed = seed;
    if (kind == FeatureKind::raw_pixels && pixel_count <= cap) {
        fx.output_dim = pixel_count;
        return fx;
    }
    const int d = std::min(cap, pixel_count);
    fx.output_dim = d;
    Rng rng(derive_seed(seed, stream_tag::evaluation));
    Eigen::MatrixXd g(pixel_count, d);
    for (int i = 0; i < pixel_count; ++i) {
        for (int j = 0; j < d; ++j) g(i, j) = rng.normal();
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(pixel_count, d);
    fx.projection = q.transpose();
    return fx;
}

// Unbiased mean/covariance of extracted features, with a small ridge added
// to the covariance diagonal.
inline FeatureStats fit_stats(const Eigen::MatrixXd& features, double ridge = 1e-6) {
    const Eigen::Index n = features.rows();
    if (n < 2) throw std::invalid_argument("fit_stats: need at least 2 samples");
    FeatureStats st;
    st.count = static_cast<std::size_t>(n);
    st.mean = features.colwise().mean();
    Eigen::MatrixXd centered = features.rowwise() - st.mean.transpose();
    st.cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
    st.cov = 0.5 * (st.cov + st.cov.transpose());
    st.cov.diagonal().array() += ridge;
    return st;
}

inline FeatureStats fit_stats(const ImageBatch& images, const FeatureExtractor& fx,
                              double ridge = 1e-6) {
    return fit_stats(fx.extract(images), ridge);
}

// Squared Frechet distance between Gaussians:
// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)),
// with the cross term computed as the trace square root of the symmetric
// product Sa^(1/2) Sb Sa^(1/2); negative eigenvalues clamp to zero.
inline double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    if (a.mean.size() != b.mean.size()) {
        throw std::invalid_argument("frechet_distance: dimension mismatch (" +
                                    std::to_string(a.mean.size()) + " vs " +
                                    std::to_string(b.mean.size()) + ")");
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(a.cov);
    if (ea.info() != Eigen::Success) throw NumericError("frechet_distance: eigensolver failed");
    Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    Eigen::MatrixXd sqrt_a = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();

    Eigen::MatrixXd inner = sqrt_a * b.cov * sqrt_a;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(inner);
    if (em.info() != Eigen::Success) throw NumericError("frechet_distance: eigensolver failed");
    double cross = 0.0;
    for (Eigen::Index i = 0; i < em.eigenvalues().size(); ++i) {
        const double ev = em.eigenvalues()[i];
        if (!std::isfinite(ev)) throw NumericError("frechet_distance: non-finite eigenvalue");
        cross += std::sqrt(std::max(0.0, ev));
    }
    const double mean_term = (a.mean - b.mean).squaredNorm();
    const double d2 = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    return std::max(0.0, d2);
}

inline ImageBatch clamp_unit(ImageBatch x) {
    for (double& v : x.v) v = std::clamp(v, -1.0, 1.0);
    return x;
}

// Samples n images from the model and scores them against reference stats.
inline double score_model(const NoisePredictor& model, const FeatureStats& reference,
                          const FeatureExtractor& fx, const NoiseSchedule& sched, int n, int c,
                          int h, int w, std::uint64_t seed) {
    if (n < 2) throw std::invalid_argument("score_model: need n >= 2");
    const ImageBatch samples = clamp_unit(ddpm_sample(model, sched, n, c, h, w, seed));
    return frechet_distance(fit_stats(samples, fx), reference);
}

struct ScoreSummary {
    std::vector<double> per_client;
    double mean = 0.0;
    double stddev = 0.0;
};

inline ScoreSummary summarize_scores(std::vector<double> scores) {
    ScoreSummary s;
    s.per_client = std::move(scores);
    double acc = 0.0;
    for (double v : s.per_client) acc += v;
    s.mean = acc / static_cast<double>(s.per_client.size());
    double var = 0.0;
    for (double v : s.per_client) var += (v - s.mean) * (v - s.mean);
    s.stddev = s.per_client.size() > 1
                   ? std::sqrt(var / static_cast<double>(s.per_client.size() - 1))
                   : 0.0;
    return s;
}

// PGM (P5) grid writer; pixels de-normalized from [-1, 1] to [0, 255].
inline void write_pgm_grid(const std::filesystem::path& path, const ImageBatch& images,
                           int columns) {
    if (images.n < 1 || columns < 1) {
        throw std::invalid_argument("write_pgm_grid: need images and columns >= 1");
    }
    const int cols = std::min(columns, images.n);
    const int rows = (images.n + cols - 1) / cols;
    const int W = cols * images.w;
    const int H = rows * images.h;
    std::vector<std::uint8_t> canvas(static_cast<std::size_t>(W) * H, 0);
    for (int i = 0; i < images.n; ++i) {
        const int gy = (i / cols) * images.h;
        const int gx = (i % cols) * images.w;
        const double* src = images.image(i);  // first channel only
        for (int y = 0; y < images.h; ++y) {
            for (int x = 0; x < images.w; ++x) {
                const double v = (src[static_cast<std::size_t>(y) * images.w + x] + 1.0) * 127.5;
                canvas[static_cast<std::size_t>(gy + y) * W + gx + x] =
                    static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
            }
        }
    }
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IngestError("cannot open " + tmp.string() + " for writing");
        out << "P5\n" << W << " " << H << "\n255\n";
        out.write(reinterpret_cast<const char*>(canvas.data()),
                  static_cast<std::streamsize>(canvas.size()));
        if (!out) throw IngestError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace feddiffuse
