#include "growformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <zlib.h>

namespace growformer {

namespace {

constexpr char kMagic[4] = {'G', 'R', 'W', 'F'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& data) : data_(data) {}

  void raw(void* dst, std::size_t n) {
    if (pos_ + n > data_.size()) {
      throw std::runtime_error("checkpoint truncated");
    }
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint16_t u16() {
    unsigned char b[2];
    raw(b, 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }
  std::uint32_t u32() {
    unsigned char b[4];
    raw(b, 4);
    return static_cast<std::uint32_t>(b[0]) | (std::uint32_t(b[1]) << 8) |
           (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    const std::uint64_t hi = u32();
    return lo | (hi << 32);
  }
  std::string str(std::size_t n) {
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& data_;
  std::size_t pos_ = 0;
};

std::string config_text(const ModelConfig& cfg) {
  std::ostringstream out;
  out << "variant=" << variant_name(cfg.variant) << "\n"
      << "layers=" << cfg.layers << "\n"
      << "hidden=" << cfg.hidden << "\n"
      << "heads=" << cfg.heads << "\n"
      << "head_dim=" << cfg.head_dim << "\n"
      << "ffn=" << cfg.ffn << "\n"
      << "vocab=" << cfg.vocab << "\n"
      << "max_seq=" << cfg.max_seq << "\n";
  return out.str();
}

ModelConfig parse_config_text(const std::string& text) {
  ModelConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("checkpoint config line malformed: " + line);
    }
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "variant") cfg.variant = variant_from_name(value);
    else if (key == "layers") cfg.layers = std::stoul(value);
    else if (key == "hidden") cfg.hidden = std::stoul(value);
    else if (key == "heads") cfg.heads = std::stoul(value);
    else if (key == "head_dim") cfg.head_dim = std::stoul(value);
    else if (key == "ffn") cfg.ffn = std::stoul(value);
    else if (key == "vocab") cfg.vocab = std::stoul(value);
    else if (key == "max_seq") cfg.max_seq = std::stoul(value);
    else throw std::runtime_error("checkpoint config key unknown: " + key);
  }
  cfg.validate();
  return cfg;
}

std::string float_bytes(const float* data, std::size_t n) {
  std::string out;
  out.reserve(n * 4);
  for (std::size_t i = 0; i < n; ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(data[i]);
    for (int b = 0; b < 4; ++b) {
      out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  }
  return out;
}

std::uint32_t payload_crc(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()),
            static_cast<uInt>(bytes.size())));
}

}  // namespace

void save_checkpoint(const ModelConfig& cfg, const ParamSet& params,
                     const std::filesystem::path& path) {
  cfg.validate();
  check_shapes(cfg, params);
  auto views = tensor_views(const_cast<ParamSet&>(params));

  // Shapes for manifest entries (vectors are stored as 1 x n).
  ParamSet shape_probe = make_param_set(cfg);
  std::vector<std::pair<std::uint32_t, std::uint32_t>> shapes;
  {
    auto add_mat = [&](const Matrix& m) {
      shapes.emplace_back(static_cast<std::uint32_t>(m.rows),
                          static_cast<std::uint32_t>(m.cols));
    };
    auto add_vec = [&](const std::vector<float>& v) {
      shapes.emplace_back(1u, static_cast<std::uint32_t>(v.size()));
    };
    add_mat(shape_probe.tok_emb);
    add_mat(shape_probe.pos_emb);
    add_vec(shape_probe.emb_ln_gain);
    add_vec(shape_probe.emb_ln_bias);
    for (const auto& lp : shape_probe.layers) {
      add_mat(lp.wq); add_vec(lp.bq);
      add_mat(lp.wk); add_vec(lp.bk);
      add_mat(lp.wv); add_vec(lp.bv);
      add_mat(lp.wo); add_vec(lp.bo);
      add_vec(lp.ln1_gain); add_vec(lp.ln1_bias);
      add_mat(lp.w1); add_vec(lp.b1);
      add_mat(lp.w2); add_vec(lp.b2);
      add_vec(lp.ln2_gain); add_vec(lp.ln2_bias);
    }
    add_vec(shape_probe.final_ln_gain);
    add_vec(shape_probe.final_ln_bias);
    add_mat(shape_probe.head);
    add_vec(shape_probe.head_bias);
  }

  std::string payload;
  std::string manifest;
  put_u32(manifest, static_cast<std::uint32_t>(views.size()));
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < views.size(); ++i) {
    const std::string bytes = float_bytes(views[i].data, views[i].size);
    put_u16(manifest, static_cast<std::uint16_t>(views[i].name.size()));
    manifest += views[i].name;
    put_u32(manifest, shapes[i].first);
    put_u32(manifest, shapes[i].second);
    put_u64(manifest, offset);
    put_u64(manifest, bytes.size());
    put_u32(manifest, payload_crc(bytes));
    payload += bytes;
    offset += bytes.size();
  }

  std::string file;
  file.append(kMagic, 4);
  put_u32(file, kVersion);
  const std::string cfg_text = config_text(cfg);
  put_u32(file, static_cast<std::uint32_t>(cfg_text.size()));
  file += cfg_text;
  file += manifest;
  file += payload;

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string());
    out.write(file.data(), static_cast<std::streamsize>(file.size()));
    if (!out.good()) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::pair<ModelConfig, ParamSet> load_checkpoint(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  Reader r(data);

  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("bad magic: not a GRWF checkpoint");
  }
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version));
  }
  const std::uint32_t cfg_len = r.u32();
  const ModelConfig cfg = parse_config_text(r.str(cfg_len));

  ParamSet params = make_param_set(cfg);
  auto views = tensor_views(params);
  const std::uint32_t count = r.u32();
  if (count != views.size()) {
    throw std::runtime_error("manifest tensor count inconsistent with config");
  }

  struct Entry {
    std::string name;
    std::uint64_t offset, length;
    std::uint32_t crc;
  };
  std::vector<Entry> entries;
  std::uint64_t expected_offset = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str(r.u16());
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    e.offset = r.u64();
    e.length = r.u64();
    e.crc = r.u32();
    if (e.name != views[i].name) {
      throw std::runtime_error("manifest name mismatch: expected " +
                               views[i].name + ", got " + e.name);
    }
    if (static_cast<std::uint64_t>(rows) * cols != views[i].size ||
        e.length != views[i].size * 4ull) {
      throw std::runtime_error("tensor shape inconsistent with config: " + e.name);
    }
    if (e.offset != expected_offset) {
      throw std::runtime_error("manifest offsets not contiguous at " + e.name);
    }
    expected_offset += e.length;
    entries.push_back(std::move(e));
  }

  const std::size_t payload_start = r.pos();
  if (payload_start + expected_offset != data.size()) {
    throw std::runtime_error("payload size inconsistent with manifest");
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string bytes =
        data.substr(payload_start + entries[i].offset, entries[i].length);
    if (payload_crc(bytes) != entries[i].crc) {
      throw std::runtime_error("checksum mismatch for tensor " + entries[i].name);
    }
    for (std::size_t j = 0; j < views[i].size; ++j) {
      const unsigned char* b =
          reinterpret_cast<const unsigned char*>(bytes.data()) + 4 * j;
      const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) |
                                 (std::uint32_t(b[1]) << 8) |
                                 (std::uint32_t(b[2]) << 16) |
                                 (std::uint32_t(b[3]) << 24);
      views[i].data[j] = std::bit_cast<float>(bits);
    }
  }
  return {cfg, std::move(params)};
}

}  // namespace growformer
