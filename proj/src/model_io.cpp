// Weight and config persistence. Layout is documented in docs/FORMATS.md.

#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include "actsparse/io.hpp"
#include "actsparse/model.hpp"

namespace actsparse {

namespace {

constexpr std::string_view kMagic = "actsparse-weights 1";

struct TensorRef {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  const float* data = nullptr;
};

std::vector<TensorRef> tensor_list(const Model& m) {
  std::vector<TensorRef> out;
  out.push_back({"embedding", m.embedding.rows, m.embedding.cols, m.embedding.values.data()});
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    const auto& blk = m.blocks[b];
    const std::string prefix = "blocks." + std::to_string(b) + ".";
    out.push_back({prefix + "attn_norm", 1, blk.attn_norm.size(), blk.attn_norm.data()});
    out.push_back({prefix + "mlp_norm", 1, blk.mlp_norm.size(), blk.mlp_norm.data()});
    for (LayerKind k : kAllLayers) {
      const Mat32& w = blk[k].weight();
      out.push_back({prefix + std::string(layer_name(k)), w.rows, w.cols, w.values.data()});
    }
  }
  out.push_back({"final_norm", 1, m.final_norm.size(), m.final_norm.data()});
  out.push_back({"lm_head", m.lm_head.out_features(), m.lm_head.in_features(),
                 m.lm_head.weight().values.data()});
  return out;
}

void append_le_floats(std::string& out, const float* data, std::size_t n) {
  const std::size_t start = out.size();
  out.resize(start + n * sizeof(float));
  std::memcpy(out.data() + start, data, n * sizeof(float));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < n; ++i) {
      char* p = out.data() + start + i * 4;
      std::swap(p[0], p[3]);
      std::swap(p[1], p[2]);
    }
  }
}

std::vector<float> read_le_floats(const char* src, std::size_t n) {
  std::vector<float> out(n);
  std::memcpy(out.data(), src, n * sizeof(float));
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& v : out) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      bits = (bits >> 24) | ((bits >> 8) & 0xff00u) | ((bits << 8) & 0xff0000u) | (bits << 24);
      v = std::bit_cast<float>(bits);
    }
  }
  return out;
}

template <typename T>
T parse_uint(std::string_view s, const std::string& what) {
  T v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw std::runtime_error("malformed " + what + ": '" + std::string(s) + "'");
  }
  return v;
}

struct ManifestEntry {
  std::size_t rows = 0, cols = 0;
  std::uint64_t offset = 0, length = 0;
  std::uint32_t crc = 0;
};

std::string_view field(std::string_view token, std::string_view key, const std::string& tensor) {
  if (token.substr(0, key.size()) != key || token.size() <= key.size() || token[key.size()] != '=') {
    throw std::runtime_error("manifest entry for tensor " + tensor + ": expected " +
                             std::string(key) + "=...");
  }
  return token.substr(key.size() + 1);
}

}  // namespace

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "n_blocks=" << n_blocks << '\n'
     << "d_model=" << d_model << '\n'
     << "n_heads=" << n_heads << '\n'
     << "d_ff=" << d_ff << '\n'
     << "vocab_size=" << vocab_size << '\n'
     << "max_seq=" << max_seq << '\n'
     << "rms_eps=" << format_float(rms_eps) << '\n';
  return os.str();
}

ModelConfig ModelConfig::from_text(std::string_view text) {
  ModelConfig c;
  std::unordered_map<std::string, bool> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("config: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "n_blocks") c.n_blocks = parse_uint<std::size_t>(value, key);
    else if (key == "d_model") c.d_model = parse_uint<std::size_t>(value, key);
    else if (key == "n_heads") c.n_heads = parse_uint<std::size_t>(value, key);
    else if (key == "d_ff") c.d_ff = parse_uint<std::size_t>(value, key);
    else if (key == "vocab_size") c.vocab_size = parse_uint<std::size_t>(value, key);
    else if (key == "max_seq") c.max_seq = parse_uint<std::size_t>(value, key);
    else if (key == "rms_eps") c.rms_eps = static_cast<float>(parse_double(value));
    else throw std::runtime_error("config: unknown key '" + key + "'");
    seen[key] = true;
  }
  for (const char* k : {"n_blocks", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq", "rms_eps"}) {
    if (!seen.count(k)) throw std::runtime_error(std::string("config: missing key '") + k + "'");
  }
  c.validate();
  return c;
}

void save_model(const Model& model, const std::filesystem::path& dir) {
  model.validate();
  std::filesystem::create_directories(dir);
  const auto tensors = tensor_list(model);

  std::string payload;
  std::ostringstream manifest;
  manifest << kMagic << '\n' << "tensors=" << tensors.size() << '\n';
  for (const auto& t : tensors) {
    const std::uint64_t offset = payload.size();
    append_le_floats(payload, t.data, t.rows * t.cols);
    const std::uint64_t length = payload.size() - offset;
    const auto crc = crc32_of(std::string_view(payload).substr(offset, length));
    char hex[9];
    std::snprintf(hex, sizeof hex, "%08x", crc);
    manifest << t.name << " shape=" << t.rows << 'x' << t.cols << " offset=" << offset
             << " length=" << length << " crc32=" << hex << '\n';
  }
  manifest << "end\n";

  atomic_write_file(dir / "config.txt", model.config.to_text());
  atomic_write_file(dir / "weights.bin", manifest.str() + payload);
}

Model load_model(const std::filesystem::path& dir) {
  const ModelConfig config = ModelConfig::from_text(read_file(dir / "config.txt"));
  const std::string bytes = read_file(dir / "weights.bin");

  // Manifest: text lines up to and including "end\n"; payload follows.
  std::unordered_map<std::string, ManifestEntry> entries;
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string_view {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw std::runtime_error("weights.bin: truncated manifest");
    std::string_view line(bytes.data() + pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  if (next_line() != kMagic) throw std::runtime_error("weights.bin: bad magic line");
  const auto count_line = next_line();
  if (count_line.substr(0, 8) != "tensors=") throw std::runtime_error("weights.bin: missing tensor count");
  const auto count = parse_uint<std::size_t>(count_line.substr(8), "tensor count");
  for (std::size_t i = 0; i < count; ++i) {
    const std::string line(next_line());
    std::istringstream ls(line);
    std::string name, shape, offset, length, crc;
    if (!(ls >> name >> shape >> offset >> length >> crc)) {
      throw std::runtime_error("weights.bin: malformed manifest line '" + line + "'");
    }
    ManifestEntry e;
    const auto dims = field(shape, "shape", name);
    const auto x = dims.find('x');
    if (x == std::string_view::npos) throw std::runtime_error("manifest entry for tensor " + name + ": bad shape");
    e.rows = parse_uint<std::size_t>(dims.substr(0, x), "shape of " + name);
    e.cols = parse_uint<std::size_t>(dims.substr(x + 1), "shape of " + name);
    e.offset = parse_uint<std::uint64_t>(field(offset, "offset", name), "offset of " + name);
    e.length = parse_uint<std::uint64_t>(field(length, "length", name), "length of " + name);
    const auto crc_text = field(crc, "crc32", name);
    std::uint32_t c = 0;
    const auto res = std::from_chars(crc_text.data(), crc_text.data() + crc_text.size(), c, 16);
    if (res.ec != std::errc() || res.ptr != crc_text.data() + crc_text.size()) {
      throw std::runtime_error("manifest entry for tensor " + name + ": bad crc32");
    }
    e.crc = c;
    if (!entries.emplace(name, e).second) throw std::runtime_error("duplicate tensor " + name);
  }
  if (next_line() != "end") throw std::runtime_error("weights.bin: manifest not terminated");
  const std::string_view payload = std::string_view(bytes).substr(pos);

  std::unordered_set<std::string> taken;
  auto take = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    const auto it = entries.find(name);
    if (it == entries.end()) throw std::runtime_error("missing tensor " + name);
    const ManifestEntry& e = it->second;
    if (e.rows != rows || e.cols != cols) {
      throw std::runtime_error("tensor " + name + ": manifest shape " + std::to_string(e.rows) +
                               "x" + std::to_string(e.cols) + " but config expects " +
                               std::to_string(rows) + "x" + std::to_string(cols));
    }
    if (e.length != static_cast<std::uint64_t>(rows) * cols * sizeof(float)) {
      throw std::runtime_error("tensor " + name + ": length " + std::to_string(e.length) +
                               " disagrees with its shape");
    }
    if (e.offset > payload.size() || e.length > payload.size() - e.offset) {
      throw std::runtime_error("tensor " + name + ": truncated payload");
    }
    const auto slice = payload.substr(e.offset, e.length);
    if (crc32_of(slice) != e.crc) throw std::runtime_error("tensor " + name + ": checksum mismatch");
    taken.insert(name);
    return read_le_floats(slice.data(), rows * cols);
  };

  Model m;
  m.config = config;
  const auto& c = config;
  m.embedding = Mat32(c.vocab_size, c.d_model, take("embedding", c.vocab_size, c.d_model));
  m.blocks.resize(c.n_blocks);
  for (std::size_t b = 0; b < c.n_blocks; ++b) {
    auto& blk = m.blocks[b];
    const std::string prefix = "blocks." + std::to_string(b) + ".";
    blk.attn_norm = take(prefix + "attn_norm", 1, c.d_model);
    blk.mlp_norm = take(prefix + "mlp_norm", 1, c.d_model);
    for (LayerKind k : kAllLayers) {
      const bool mlp_in = k == LayerKind::gate_proj || k == LayerKind::up_proj;
      const std::size_t rows = mlp_in ? c.d_ff : c.d_model;
      const std::size_t cols = k == LayerKind::down_proj ? c.d_ff : c.d_model;
      const std::string name = prefix + std::string(layer_name(k));
      blk[k] = Linear(Mat32(rows, cols, take(name, rows, cols)));
    }
  }
  m.final_norm = take("final_norm", 1, c.d_model);
  m.lm_head = Linear(Mat32(c.vocab_size, c.d_model, take("lm_head", c.vocab_size, c.d_model)));
  if (taken.size() != entries.size()) {
    for (const auto& [name, e] : entries) {
      if (!taken.count(name)) throw std::runtime_error("unexpected tensor " + name);
    }
  }
  m.validate();
  return m;
}

}  // namespace actsparse
