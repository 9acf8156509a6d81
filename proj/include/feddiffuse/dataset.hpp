#pragma once

#include <zlib.h>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "feddiffuse/errors.hpp"
#include "feddiffuse/tensor.hpp"

namespace feddiffuse {

// Grayscale labeled images kept as raw bytes; batches are assembled on
// demand, scaled from [0, 255] to [-1, 1].
struct Dataset {
    int rows = 0, cols = 0;
    int class_count = 0;
    std::vector<std::uint8_t> pixels;  // count * rows * cols
    std::vector<int> labels;

    std::size_t count() const { return labels.size(); }
    std::size_t image_size() const {
        return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    }
    const std::uint8_t* image(std::size_t i) const { return pixels.data() + i * image_size(); }

    ImageBatch batch(std::span<const std::size_t> indices) const {
        ImageBatch b(static_cast<int>(indices.size()), 1, rows, cols);
        const std::size_t m = image_size();
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (indices[i] >= count()) {
                throw std::invalid_argument("dataset batch: index " + std::to_string(indices[i]) +
                                            " out of range");
            }
            const std::uint8_t* src = image(indices[i]);
            double* dst = b.image(static_cast<int>(i));
            for (std::size_t p = 0; p < m; ++p) {
                dst[p] = static_cast<double>(src[p]) / 127.5 - 1.0;
            }
        }
        return b;
    }
};

namespace detail {

// Reads a whole file through zlib, which transparently handles both gzip
// streams and plain bytes.
inline std::vector<std::uint8_t> read_maybe_gz(const std::filesystem::path& path) {
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f) throw IngestError("cannot open " + path.string());
    std::vector<std::uint8_t> out;
    std::vector<std::uint8_t> buf(1 << 16);
    for (;;) {
        const int n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
        if (n < 0) {
            int errnum = 0;
            const char* msg = gzerror(f, &errnum);
            const std::string text = msg ? msg : "unknown zlib error";
            gzclose(f);
            throw IngestError("error reading " + path.string() + ": " + text);
        }
        if (n == 0) break;
        out.insert(out.end(), buf.begin(), buf.begin() + n);
    }
    gzclose(f);
    return out;
}

inline std::uint32_t be32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

}  // namespace detail

inline constexpr std::uint32_t idx_image_magic = 0x00000803;
inline constexpr std::uint32_t idx_label_magic = 0x00000801;

// IDX image/label pair loader (the MNIST-family container format).  Counts
// must agree between the two files.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
    const std::vector<std::uint8_t> img = detail::read_maybe_gz(images_path);
    const std::vector<std::uint8_t> lab = detail::read_maybe_gz(labels_path);

    if (img.size() < 16) throw IngestError(images_path.string() + ": too short for an IDX header");
    if (detail::be32(img.data()) != idx_image_magic) {
        throw IngestError(images_path.string() + ": bad magic, expected image IDX");
    }
    const std::uint32_t n_img = detail::be32(img.data() + 4);
    const std::uint32_t rows = detail::be32(img.data() + 8);
    const std::uint32_t cols = detail::be32(img.data() + 12);
    const std::size_t expect_img = 16 + static_cast<std::size_t>(n_img) * rows * cols;
    if (img.size() != expect_img) {
        throw IngestError(images_path.string() + ": payload is " + std::to_string(img.size() - 16) +
                          " bytes, header promises " + std::to_string(expect_img - 16));
    }

    if (lab.size() < 8) throw IngestError(labels_path.string() + ": too short for an IDX header");
    if (detail::be32(lab.data()) != idx_label_magic) {
        throw IngestError(labels_path.string() + ": bad magic, expected label IDX");
    }
    const std::uint32_t n_lab = detail::be32(lab.data() + 4);
    if (lab.size() != 8 + static_cast<std::size_t>(n_lab)) {
        throw IngestError(labels_path.string() + ": payload length disagrees with header count");
    }
    if (n_img != n_lab) {
        throw IngestError("image count " + std::to_string(n_img) + " (" + images_path.string() +
                          ") does not match label count " + std::to_string(n_lab) + " (" +
                          labels_path.string() + ")");
    }

    Dataset ds;
    ds.rows = static_cast<int>(rows);
    ds.cols = static_cast<int>(cols);
    ds.pixels.assign(img.begin() + 16, img.end());
    ds.labels.resize(n_lab);
    int max_label = -1;
    for (std::uint32_t i = 0; i < n_lab; ++i) {
        ds.labels[i] = static_cast<int>(lab[8 + i]);
        max_label = std::max(max_label, ds.labels[i]);
    }
    ds.class_count = max_label + 1;
    return ds;
}

}  // namespace feddiffuse
