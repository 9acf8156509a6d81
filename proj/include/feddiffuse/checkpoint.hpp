#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "feddiffuse/errors.hpp"
#include "feddiffuse/model.hpp"

namespace feddiffuse {

struct Checkpoint {
    ModelConfig config;
    SegmentLayout layout;
    ParameterVector params;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

struct ByteReader {
    const unsigned char* p;
    std::size_t len, pos = 0;
    std::string path;

    void need(std::size_t n) const {
        if (pos + n > len) {
            throw IngestError("checkpoint " + path + ": truncated at byte " + std::to_string(pos));
        }
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
};

// Write-to-temp-then-rename so readers never observe a half-written file.
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IngestError("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IngestError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline constexpr std::array<char, 8> checkpoint_magic = {'F', 'D', 'C', 'K', 'P', 'T', '0', '1'};

// Little-endian binary layout: magic, six u32 config fields, u64 parameter
// count, six u64 segment bounds, then the raw f64 parameter array.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    std::string out;
    out.reserve(80 + ck.params.size() * 8);
    out.append(checkpoint_magic.data(), checkpoint_magic.size());
    detail::put_u32(out, static_cast<std::uint32_t>(ck.config.in_channels));
    detail::put_u32(out, static_cast<std::uint32_t>(ck.config.base_channels));
    detail::put_u32(out, static_cast<std::uint32_t>(ck.config.depth));
    detail::put_u32(out, static_cast<std::uint32_t>(ck.config.time_embed_dim));
    detail::put_u32(out, static_cast<std::uint32_t>(ck.config.image_side));
    detail::put_u32(out, ck.config.precision == Precision::f64 ? 1u : 0u);
    detail::put_u64(out, ck.params.size());
    for (Segment s : all_segments) {
        detail::put_u64(out, ck.layout.range(s).begin);
        detail::put_u64(out, ck.layout.range(s).end);
    }
    for (double v : ck.params) detail::put_f64(out, v);
    detail::atomic_write(path, out);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open checkpoint " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    detail::ByteReader r{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), 0,
                         path.string()};
    r.need(8);
    if (std::memcmp(bytes.data(), checkpoint_magic.data(), 8) != 0) {
        throw IngestError("checkpoint " + path.string() + ": bad magic");
    }
    r.pos = 8;

    Checkpoint ck;
    ck.config.in_channels = static_cast<int>(r.u32());
    ck.config.base_channels = static_cast<int>(r.u32());
    ck.config.depth = static_cast<int>(r.u32());
    ck.config.time_embed_dim = static_cast<int>(r.u32());
    ck.config.image_side = static_cast<int>(r.u32());
    ck.config.precision = r.u32() == 1 ? Precision::f64 : Precision::f32;
    const std::uint64_t count = r.u64();
    SegmentRange ranges[3];
    for (auto& range : ranges) {
        range.begin = r.u64();
        range.end = r.u64();
    }
    ck.layout.encoder = ranges[0];
    ck.layout.bottleneck = ranges[1];
    ck.layout.decoder = ranges[2];
    if (ck.layout.encoder.begin != 0 || ck.layout.encoder.end != ck.layout.bottleneck.begin ||
        ck.layout.bottleneck.end != ck.layout.decoder.begin || ck.layout.decoder.end != count) {
        throw IngestError("checkpoint " + path.string() + ": segment bounds do not tile [0, " +
                          std::to_string(count) + ")");
    }
    ck.params.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) ck.params[i] = r.f64();
    if (r.pos != r.len) {
        throw IngestError("checkpoint " + path.string() + ": trailing bytes");
    }
    return ck;
}

}  // namespace feddiffuse
