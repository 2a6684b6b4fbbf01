#include <doctest.h>

#include <stdexcept>

#include <fstream>
#include <vector>

#include "growformer/checkpoint.hpp"
#include "growformer/expansion.hpp"

using namespace growformer;

namespace {

ModelConfig sample_cfg(Variant v = Variant::PostLnEncoder) {
  ModelConfig cfg;
  cfg.variant = v;
  cfg.layers = 2;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.head_dim = 4;
  cfg.ffn = 16;
  cfg.vocab = 12;
  cfg.max_seq = 16;
  return cfg;
}

std::vector<char> read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::vector<char>(std::istreambuf_iterator<char>(in),
                           std::istreambuf_iterator<char>());
}

void write_all(const std::filesystem::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("checkpoint round-trip is bitwise") {
  for (Variant v : {Variant::PostLnEncoder, Variant::PreLnDecoder}) {
    const ModelConfig cfg = sample_cfg(v);
    ParamSet params = rand_init(cfg, 3);
    const auto path = std::filesystem::temp_directory_path() / "gf_rt.grwf";
    save_checkpoint(cfg, params, path);
    auto [cfg2, params2] = load_checkpoint(path);
    CHECK(cfg2 == cfg);
    auto va = tensor_views(params), vb = tensor_views(params2);
    REQUIRE(va.size() == vb.size());
    for (std::size_t t = 0; t < va.size(); ++t) {
      CHECK(va[t].name == vb[t].name);
      REQUIRE(va[t].size == vb[t].size);
      for (std::size_t i = 0; i < va[t].size; ++i) {
        CHECK(va[t].data[i] == vb[t].data[i]);
      }
    }
    std::filesystem::remove(path);
  }
}

TEST_CASE("re-saving produces a byte-identical file") {
  const ModelConfig cfg = sample_cfg();
  ParamSet params = rand_init(cfg, 5);
  const auto p1 = std::filesystem::temp_directory_path() / "gf_a.grwf";
  const auto p2 = std::filesystem::temp_directory_path() / "gf_b.grwf";
  save_checkpoint(cfg, params, p1);
  auto loaded = load_checkpoint(p1);
  save_checkpoint(loaded.first, loaded.second, p2);
  CHECK(read_all(p1) == read_all(p2));
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("round-trip property over many seeds") {
  const ModelConfig cfg = sample_cfg(Variant::PreLnDecoder);
  const auto path = std::filesystem::temp_directory_path() / "gf_many.grwf";
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    ParamSet params = rand_init(cfg, seed);
    save_checkpoint(cfg, params, path);
    auto [cfg2, params2] = load_checkpoint(path);
    auto va = tensor_views(params), vb = tensor_views(params2);
    bool equal = true;
    for (std::size_t t = 0; t < va.size() && equal; ++t) {
      for (std::size_t i = 0; i < va[t].size; ++i) {
        if (va[t].data[i] != vb[t].data[i]) {
          equal = false;
          break;
        }
      }
    }
    CHECK(equal);
  }
  std::filesystem::remove(path);
}

TEST_CASE("corrupted payload byte fails the checksum") {
  const ModelConfig cfg = sample_cfg();
  ParamSet params = rand_init(cfg, 7);
  const auto path = std::filesystem::temp_directory_path() / "gf_corrupt.grwf";
  save_checkpoint(cfg, params, path);
  auto bytes = read_all(path);
  bytes[bytes.size() - 5] ^= 0x40;  // flip one bit deep in the payload
  write_all(path, bytes);
  CHECK_THROWS_WITH_AS(load_checkpoint(path),
                       doctest::Contains("checksum mismatch"),
                       std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("bad magic and bad version are distinct errors") {
  const ModelConfig cfg = sample_cfg();
  ParamSet params = rand_init(cfg, 9);
  const auto path = std::filesystem::temp_directory_path() / "gf_hdr.grwf";
  save_checkpoint(cfg, params, path);

  auto bytes = read_all(path);
  auto magic_broken = bytes;
  magic_broken[0] = 'X';
  write_all(path, magic_broken);
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("magic"),
                       std::runtime_error);

  auto version_broken = bytes;
  version_broken[4] = 99;
  write_all(path, version_broken);
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version"),
                       std::runtime_error);

  auto truncated = bytes;
  truncated.resize(truncated.size() - 16);
  write_all(path, truncated);
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);

  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
}
