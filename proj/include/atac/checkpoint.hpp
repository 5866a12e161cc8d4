#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "model.hpp"
#include "tensor.hpp"
#include "training.hpp"

namespace atac {

namespace detail {

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t len) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int b = 0; b < 8; ++b) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

// Little-endian byte writer/reader, independent of host order.
struct ByteWriter {
  std::vector<std::uint8_t> buf;

  void u8(std::uint8_t v) { buf.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf.insert(buf.end(), s.begin(), s.end());
  }
};

struct ByteReader {
  const std::uint8_t* data;
  std::size_t size, pos = 0;

  void need(std::size_t n) const {
    if (pos + n > size) throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint8_t u8() {
    need(1);
    return data[pos++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data[pos++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data[pos++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(data + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace detail

constexpr std::uint32_t kCheckpointVersion = 1;

struct CkptTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::string model_desc;  // canonical key=value text
  std::vector<CkptTensor> tensors;
  bool has_opt = false;
  std::uint64_t opt_step = 0;
  std::vector<std::vector<float>> opt_m, opt_v;
  std::uint64_t seed = 0;
  std::uint64_t next_epoch = 0;
};

inline std::string describe_model(const ModelConfig& cfg) {
  std::ostringstream oss;
  oss << "attention_channels=" << cfg.attention_channels << "\n"
      << "input_channels=" << cfg.input_channels << "\n"
      << "input_resolution=" << cfg.input_resolution << "\n"
      << "kernel_size=" << cfg.kernel_size << "\n"
      << "stage_channels=";
  for (std::size_t i = 0; i < cfg.stage_channels.size(); ++i)
    oss << (i ? "," : "") << cfg.stage_channels[i];
  oss << "\n";
  return oss.str();
}

inline ModelConfig parse_model_desc(const std::string& desc) {
  ModelConfig cfg;
  std::istringstream in(desc);
  std::string line;
  auto number = [](const std::string& s) -> std::size_t {
    std::size_t v = 0;
    ATAC_CHECK(!s.empty(), "model description: empty number");
    for (char c : s) {
      ATAC_CHECK(c >= '0' && c <= '9', "model description: bad number '" << s << "'");
      v = v * 10 + static_cast<std::size_t>(c - '0');
    }
    return v;
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    ATAC_CHECK(eq != std::string::npos, "model description: bad line '" << line << "'");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "attention_channels") {
      cfg.attention_channels = number(val);
    } else if (key == "input_channels") {
      cfg.input_channels = number(val);
    } else if (key == "input_resolution") {
      cfg.input_resolution = number(val);
    } else if (key == "kernel_size") {
      cfg.kernel_size = number(val);
    } else if (key == "stage_channels") {
      cfg.stage_channels.clear();
      std::string item;
      std::istringstream vs(val);
      while (std::getline(vs, item, ',')) cfg.stage_channels.push_back(number(item));
    } else {
      fail("model description: unknown key '" + key + "'");
    }
  }
  return cfg;
}

template <typename T>
Checkpoint make_checkpoint(Model<T>& model, const Adam<T>* opt, std::uint64_t seed,
                           std::uint64_t next_epoch) {
  Checkpoint c;
  c.model_desc = describe_model(model.cfg);
  for (auto& [name, p] : model.named_parameters()) {
    CkptTensor t;
    t.name = name;
    t.shape = p.shape();
    t.data.assign(p.values().begin(), p.values().end());
    c.tensors.push_back(std::move(t));
  }
  if (opt) {
    c.has_opt = true;
    c.opt_step = opt->step_count();
    for (const auto& m : opt->moment1()) c.opt_m.emplace_back(m.begin(), m.end());
    for (const auto& v : opt->moment2()) c.opt_v.emplace_back(v.begin(), v.end());
  }
  c.seed = seed;
  c.next_epoch = next_epoch;
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  detail::ByteWriter w;
  w.buf.insert(w.buf.end(), {'A', 'T', 'A', 'C'});
  w.u32(kCheckpointVersion);
  w.str(c.model_desc);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) w.str(t.name);
  for (const auto& t : c.tensors) {
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    for (float v : t.data) w.f32(v);
  }
  w.u8(c.has_opt ? 1 : 0);
  if (c.has_opt) {
    ATAC_CHECK(c.opt_m.size() == c.tensors.size() && c.opt_v.size() == c.tensors.size(),
               "checkpoint: optimizer moment count does not match tensor count");
    w.u64(c.opt_step);
    for (std::size_t i = 0; i < c.tensors.size(); ++i) {
      for (float v : c.opt_m[i]) w.f32(v);
      for (float v : c.opt_v[i]) w.f32(v);
    }
  }
  w.u64(c.seed);
  w.u64(c.next_epoch);
  const std::uint32_t crc = detail::crc32(w.buf.data(), w.buf.size());
  w.u32(crc);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out.write(reinterpret_cast<const char*>(w.buf.data()),
            static_cast<std::streamsize>(w.buf.size()));
  if (!out) throw std::runtime_error("checkpoint: short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  if (buf.size() < 12) throw std::runtime_error("checkpoint: truncated file");
  if (std::memcmp(buf.data(), "ATAC", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic bytes in " + path);
  const std::uint32_t stored_crc = static_cast<std::uint32_t>(buf[buf.size() - 4]) |
                                   static_cast<std::uint32_t>(buf[buf.size() - 3]) << 8 |
                                   static_cast<std::uint32_t>(buf[buf.size() - 2]) << 16 |
                                   static_cast<std::uint32_t>(buf[buf.size() - 1]) << 24;
  if (detail::crc32(buf.data(), buf.size() - 4) != stored_crc)
    throw std::runtime_error("checkpoint: CRC mismatch, file is corrupt: " + path);

  detail::ByteReader r{buf.data(), buf.size() - 4};
  r.pos = 4;
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                             " (expected " + std::to_string(kCheckpointVersion) + ")");
  Checkpoint c;
  c.model_desc = r.str();
  const std::uint32_t count = r.u32();
  c.tensors.resize(count);
  for (auto& t : c.tensors) t.name = r.str();
  for (auto& t : c.tensors) {
    const std::uint32_t ndim = r.u32();
    t.shape.resize(ndim);
    for (auto& d : t.shape) d = r.u64();
    t.data.resize(shape_numel(t.shape));
    for (auto& v : t.data) v = r.f32();
  }
  c.has_opt = r.u8() != 0;
  if (c.has_opt) {
    c.opt_step = r.u64();
    c.opt_m.resize(count);
    c.opt_v.resize(count);
    for (std::uint32_t i = 0; i < count; ++i) {
      c.opt_m[i].resize(c.tensors[i].data.size());
      for (auto& v : c.opt_m[i]) v = r.f32();
      c.opt_v[i].resize(c.tensors[i].data.size());
      for (auto& v : c.opt_v[i]) v = r.f32();
    }
  }
  c.seed = r.u64();
  c.next_epoch = r.u64();
  if (r.pos != r.size) throw std::runtime_error("checkpoint: trailing bytes in " + path);
  return c;
}

// Rebuilds the model the checkpoint describes and overwrites its parameters.
template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& c) {
  Rng rng(0);
  auto model = Model<T>::init(parse_model_desc(c.model_desc), rng);
  auto params = model.named_parameters();
  ATAC_CHECK(params.size() == c.tensors.size(),
             "checkpoint: holds " << c.tensors.size() << " tensors, model has "
                                  << params.size() << " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, p] = params[i];
    const auto& t = c.tensors[i];
    ATAC_CHECK(name == t.name, "checkpoint: tensor '" << t.name << "' where '" << name
                                                      << "' was expected");
    ATAC_CHECK(p.shape() == t.shape, "checkpoint: shape " << shape_str(t.shape)
                                                          << " does not fit parameter " << name
                                                          << " " << shape_str(p.shape()));
    auto& vals = p.leaf_values();
    for (std::size_t j = 0; j < vals.size(); ++j) vals[j] = static_cast<T>(t.data[j]);
  }
  return model;
}

template <typename T>
void restore_adam(const Checkpoint& c, Adam<T>& opt) {
  ATAC_CHECK(c.has_opt, "checkpoint: no optimizer state stored");
  std::vector<std::vector<T>> m, v;
  for (const auto& b : c.opt_m) m.emplace_back(b.begin(), b.end());
  for (const auto& b : c.opt_v) v.emplace_back(b.begin(), b.end());
  opt.restore(c.opt_step, std::move(m), std::move(v));
}

}  // namespace atac
