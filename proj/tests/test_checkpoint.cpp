#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>

#include "feddiffuse/checkpoint.hpp"
#include "feddiffuse/errors.hpp"
#include "feddiffuse/model.hpp"

using namespace feddiffuse;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.base_channels = 4;
    c.depth = 1;
    c.time_embed_dim = 8;
    c.image_side = 8;
    c.precision = Precision::f64;
    return c;
}

std::filesystem::path temp_file(const char* name) {
    const auto dir = std::filesystem::temp_directory_path() / "feddiffuse_ckpt_test";
    std::filesystem::create_directories(dir);
    return dir / name;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void spit(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("checkpoints round-trip config, layout and parameters bit-exactly") {
    const ModelConfig cfg = tiny_config();
    const Denoiser model = build_denoiser(cfg, 42);
    const auto path = temp_file("roundtrip.bin");
    save_checkpoint(path, {cfg, model.layout(), model.params()});
    const Checkpoint ck = load_checkpoint(path);
    CHECK(ck.config.in_channels == cfg.in_channels);
    CHECK(ck.config.base_channels == cfg.base_channels);
    CHECK(ck.config.depth == cfg.depth);
    CHECK(ck.config.time_embed_dim == cfg.time_embed_dim);
    CHECK(ck.config.image_side == cfg.image_side);
    CHECK(ck.config.precision == cfg.precision);
    for (Segment s : all_segments) {
        CHECK(ck.layout.range(s).begin == model.layout().range(s).begin);
        CHECK(ck.layout.range(s).end == model.layout().range(s).end);
    }
    REQUIRE(ck.params.size() == model.param_count());
    CHECK(ck.params == model.params());
    // the loaded vector rebuilds a working model
    const Denoiser again(ck.config, ck.params);
    CHECK(again.param_count() == model.param_count());
}

TEST_CASE("saving twice replaces the file") {
    const ModelConfig cfg = tiny_config();
    const Denoiser a = build_denoiser(cfg, 1);
    const Denoiser b = build_denoiser(cfg, 2);
    const auto path = temp_file("replace.bin");
    save_checkpoint(path, {cfg, a.layout(), a.params()});
    save_checkpoint(path, {cfg, b.layout(), b.params()});
    CHECK(load_checkpoint(path).params == b.params());
}

TEST_CASE("a corrupted magic is rejected") {
    const ModelConfig cfg = tiny_config();
    const Denoiser model = build_denoiser(cfg, 3);
    const auto path = temp_file("magic.bin");
    save_checkpoint(path, {cfg, model.layout(), model.params()});
    std::string bytes = slurp(path);
    bytes[0] = 'X';
    spit(path, bytes);
    CHECK_THROWS_AS(load_checkpoint(path), IngestError);
    CHECK_THROWS_WITH(load_checkpoint(path), Catch::Matchers::ContainsSubstring("bad magic"));
}

TEST_CASE("truncated and padded files are rejected") {
    const ModelConfig cfg = tiny_config();
    const Denoiser model = build_denoiser(cfg, 4);
    const auto path = temp_file("trunc.bin");
    save_checkpoint(path, {cfg, model.layout(), model.params()});
    const std::string bytes = slurp(path);
    spit(path, bytes.substr(0, bytes.size() - 5));
    CHECK_THROWS_AS(load_checkpoint(path), IngestError);
    spit(path, bytes + "junk");
    CHECK_THROWS_WITH(load_checkpoint(path), Catch::Matchers::ContainsSubstring("trailing"));
    spit(path, bytes.substr(0, 4));
    CHECK_THROWS_AS(load_checkpoint(path), IngestError);
}

TEST_CASE("segment bounds that do not tile the parameter range are rejected") {
    const ModelConfig cfg = tiny_config();
    const Denoiser model = build_denoiser(cfg, 5);
    const auto path = temp_file("bounds.bin");
    save_checkpoint(path, {cfg, model.layout(), model.params()});
    std::string bytes = slurp(path);
    // encoder.begin lives right after magic + 6 u32 fields + count
    bytes[8 + 24 + 8] = 1;
    spit(path, bytes);
    CHECK_THROWS_WITH(load_checkpoint(path), Catch::Matchers::ContainsSubstring("tile"));
}

TEST_CASE("a missing file reports an open error") {
    CHECK_THROWS_AS(load_checkpoint(temp_file("does_not_exist.bin")), IngestError);
}
