#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "feddiffuse/dataset.hpp"
#include "feddiffuse/errors.hpp"
#include "feddiffuse/rng.hpp"

namespace feddiffuse {

// Synthetic stand-in for a 10-class grayscale image set.  Each class is a
// distinct geometric pattern with seeded jitter in position, scale, phase and
// intensity, so classes are separable but not constant.
namespace fixture_detail {

inline void draw_pattern(std::uint8_t* img, int side, int label, Rng& rng) {
    const int fg = static_cast<int>(rng.uniform_int(170, 255));
    const int bg = static_cast<int>(rng.uniform_int(0, 40));
    for (int i = 0; i < side * side; ++i) img[i] = static_cast<std::uint8_t>(bg);
    auto set = [&](int y, int x) {
        if (y >= 0 && y < side && x >= 0 && x < side) {
            img[y * side + x] = static_cast<std::uint8_t>(fg);
        }
    };
    const int cx = side / 2 + static_cast<int>(rng.uniform_int(0, 6)) - 3;
    const int cy = side / 2 + static_cast<int>(rng.uniform_int(0, 6)) - 3;
    switch (label) {
        case 0: {  // horizontal stripes
            const int period = 3 + static_cast<int>(rng.uniform_int(0, 2));
            const int phase = static_cast<int>(rng.uniform_int(0, period - 1));
            for (int y = 0; y < side; ++y) {
                if ((y + phase) % period < (period + 1) / 2) {
                    for (int x = 0; x < side; ++x) set(y, x);
                }
            }
            break;
        }
        case 1: {  // vertical stripes
            const int period = 3 + static_cast<int>(rng.uniform_int(0, 2));
            const int phase = static_cast<int>(rng.uniform_int(0, period - 1));
            for (int x = 0; x < side; ++x) {
                if ((x + phase) % period < (period + 1) / 2) {
                    for (int y = 0; y < side; ++y) set(y, x);
                }
            }
            break;
        }
        case 2: {  // filled rectangle
            const int hw = side / 4 + static_cast<int>(rng.uniform_int(0, 3));
            const int hh = side / 4 + static_cast<int>(rng.uniform_int(0, 3));
            for (int y = cy - hh; y <= cy + hh; ++y) {
                for (int x = cx - hw; x <= cx + hw; ++x) set(y, x);
            }
            break;
        }
        case 3: {  // hollow rectangle
            const int hw = side / 3 + static_cast<int>(rng.uniform_int(0, 2));
            const int hh = side / 3 + static_cast<int>(rng.uniform_int(0, 2));
            for (int x = cx - hw; x <= cx + hw; ++x) {
                set(cy - hh, x);
                set(cy - hh + 1, x);
                set(cy + hh, x);
                set(cy + hh - 1, x);
            }
            for (int y = cy - hh; y <= cy + hh; ++y) {
                set(y, cx - hw);
                set(y, cx - hw + 1);
                set(y, cx + hw);
                set(y, cx + hw - 1);
            }
            break;
        }
        case 4: {  // filled disk
            const int r = side / 4 + static_cast<int>(rng.uniform_int(0, 3));
            for (int y = 0; y < side; ++y) {
                for (int x = 0; x < side; ++x) {
                    const int dy = y - cy, dx = x - cx;
                    if (dy * dy + dx * dx <= r * r) set(y, x);
                }
            }
            break;
        }
        case 5: {  // ring
            const int r = side / 3 + static_cast<int>(rng.uniform_int(0, 2));
            const int inner = r - 2 - static_cast<int>(rng.uniform_int(0, 1));
            for (int y = 0; y < side; ++y) {
                for (int x = 0; x < side; ++x) {
                    const int dy = y - cy, dx = x - cx;
                    const int d2 = dy * dy + dx * dx;
                    if (d2 <= r * r && d2 >= inner * inner) set(y, x);
                }
            }
            break;
        }
        case 6: {  // checkerboard
            const int cell = 3 + static_cast<int>(rng.uniform_int(0, 2));
            const int phase = static_cast<int>(rng.uniform_int(0, 1));
            for (int y = 0; y < side; ++y) {
                for (int x = 0; x < side; ++x) {
                    if ((y / cell + x / cell + phase) % 2 == 0) set(y, x);
                }
            }
            break;
        }
        case 7: {  // cross
            const int half = 1 + static_cast<int>(rng.uniform_int(0, 2));
            for (int y = 0; y < side; ++y) {
                for (int d = -half; d <= half; ++d) set(y, cx + d);
            }
            for (int x = 0; x < side; ++x) {
                for (int d = -half; d <= half; ++d) set(cy + d, x);
            }
            break;
        }
        case 8: {  // diagonal stripes
            const int period = 4 + static_cast<int>(rng.uniform_int(0, 2));
            const int phase = static_cast<int>(rng.uniform_int(0, period - 1));
            for (int y = 0; y < side; ++y) {
                for (int x = 0; x < side; ++x) {
                    if ((x + y + phase) % period < (period + 1) / 2) set(y, x);
                }
            }
            break;
        }
        default: {  // X shape
            const int half = 1 + static_cast<int>(rng.uniform_int(0, 1));
            for (int y = 0; y < side; ++y) {
                const int off = y - cy;
                for (int d = -half; d <= half; ++d) {
                    set(y, cx + off + d);
                    set(y, cx - off + d);
                }
            }
            break;
        }
    }
    // mild pixel noise so images within a class are never identical
    for (int i = 0; i < side * side; ++i) {
        const int jitter = static_cast<int>(rng.uniform_int(0, 24)) - 12;
        const int v = static_cast<int>(img[i]) + jitter;
        img[i] = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
    }
}

}  // namespace fixture_detail

inline Dataset make_fixture_dataset(std::size_t count, int side, std::uint64_t seed) {
    if (count < 1 || side < 4) {
        throw ConfigError("fixture: need count >= 1 and side >= 4");
    }
    Rng rng(derive_seed(seed, stream_tag::fixture));
    Dataset ds;
    ds.rows = side;
    ds.cols = side;
    ds.class_count = 10;
    ds.pixels.resize(count * static_cast<std::size_t>(side) * side);
    ds.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        ds.labels[i] = static_cast<int>(i % 10);
        fixture_detail::draw_pattern(ds.pixels.data() + i * ds.image_size(), side, ds.labels[i],
                                     rng);
    }
    // joint shuffle so labels are not periodic in index order
    std::vector<std::size_t> perm(count);
    for (std::size_t i = 0; i < count; ++i) perm[i] = i;
    rng.shuffle(perm);
    Dataset out;
    out.rows = side;
    out.cols = side;
    out.class_count = 10;
    out.pixels.resize(ds.pixels.size());
    out.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        out.labels[i] = ds.labels[perm[i]];
        std::copy(ds.image(perm[i]), ds.image(perm[i]) + ds.image_size(),
                  out.pixels.data() + i * out.image_size());
    }
    return out;
}

// IDX writers for fixtures; paths ending in .gz come out gzip-compressed.
namespace fixture_detail {

inline void append_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.extension() == ".gz") {
        gzFile f = gzopen(path.string().c_str(), "wb");
        if (!f) throw IngestError("cannot open " + path.string() + " for writing");
        const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
        gzclose(f);
        if (n != static_cast<int>(bytes.size())) {
            throw IngestError("short gzip write to " + path.string());
        }
        return;
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IngestError("short write to " + path.string());
}

}  // namespace fixture_detail

inline void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
    std::vector<std::uint8_t> img;
    img.reserve(16 + ds.pixels.size());
    fixture_detail::append_be32(img, idx_image_magic);
    fixture_detail::append_be32(img, static_cast<std::uint32_t>(ds.count()));
    fixture_detail::append_be32(img, static_cast<std::uint32_t>(ds.rows));
    fixture_detail::append_be32(img, static_cast<std::uint32_t>(ds.cols));
    img.insert(img.end(), ds.pixels.begin(), ds.pixels.end());
    fixture_detail::write_bytes(images_path, img);

    std::vector<std::uint8_t> lab;
    lab.reserve(8 + ds.count());
    fixture_detail::append_be32(lab, idx_label_magic);
    fixture_detail::append_be32(lab, static_cast<std::uint32_t>(ds.count()));
    for (int l : ds.labels) lab.push_back(static_cast<std::uint8_t>(l));
    fixture_detail::write_bytes(labels_path, lab);
}

}  // namespace feddiffuse
