#pragma once

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "data.hpp"
#include "loss.hpp"
#include "model.hpp"
#include "scoring.hpp"
#include "training.hpp"

namespace atac {

// Operator-facing mistakes: bad flags, bad config files, bad values. The
// tool exits 2 on these, 1 on runtime failures.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct RunConfig {
  // run
  std::uint64_t seed = 0;
  // Reserved gate for batch-parallel numeric paths. Every path is serial
  // today, so runs are bit-reproducible whether or not this is set.
  bool strict = true;
  std::string out_dir = "out";
  // data
  std::string train_manifest, test_manifest;
  std::size_t resolution = 64;
  std::size_t channels = 1;
  std::size_t anomalies_per_episode = 10;
  // model
  std::vector<std::size_t> stage_channels = {16, 32, 64, 64};
  std::size_t kernel_size = 3;
  std::size_t attention_channels = 64;
  // train
  double lr = 1e-3;
  double lr_decay = 0.1;
  std::size_t lr_step_epochs = 10;
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double cutmix_rate = 0.25;
  double cutmix_area_min = 0.02;
  double cutmix_area_max = 0.15;
  double cutmix_aspect_min = 1.0 / 3.0;
  double cutmix_aspect_max = 3.0;
  std::string ref_mode = "analytic";
  std::size_t ref_samples = 5000;
  // loss
  double k = 10.0;
  bool hinge = true;
  // scoring
  double omega = 0.4;
  double topk_fraction = 0.10;
  bool two_pass = true;
  double crop_margin = 0.10;
  double crop_min_frac = 0.25;
  // synth
  std::string texture = "blobs";
  std::string defect = "scratch";
  double defect_intensity = 0.5;
  std::size_t n_normal = 200;
  std::size_t n_anomalous = 100;
};

namespace detail {

inline std::string fmt_u64(std::uint64_t v) { return std::to_string(v); }

inline std::string fmt_f64(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

inline std::string fmt_bool(bool v) { return v ? "true" : "false"; }

inline std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::uint64_t parse_u64(const std::string& s, const std::string& key) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw ConfigError("config: '" + s + "' is not a non-negative integer for " + key);
  return v;
}

inline double parse_f64(const std::string& s, const std::string& key) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw ConfigError("config: '" + s + "' is not a number for " + key);
  return v;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError("config: '" + s + "' is not true/false for " + key);
}

inline std::vector<std::size_t> parse_list(const std::string& s, const std::string& key) {
  std::vector<std::size_t> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_u64(item, key));
  if (out.empty()) throw ConfigError("config: empty list for " + key);
  return out;
}

struct ConfigEntry {
  const char* section;
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

// Single source of truth for the file format, CLI overrides and the
// canonical echo. Order here is the canonical serialization order.
inline const std::vector<ConfigEntry>& config_entries() {
  static const std::vector<ConfigEntry> entries = [] {
    std::vector<ConfigEntry> e;
    auto u64 = [&e](const char* sec, const char* key, std::size_t RunConfig::*field) {
      e.push_back({sec, key, [field](const RunConfig& c) { return fmt_u64(c.*field); },
                   [field, key](RunConfig& c, const std::string& s) {
                     c.*field = parse_u64(s, key);
                   }});
    };
    auto f64 = [&e](const char* sec, const char* key, double RunConfig::*field) {
      e.push_back({sec, key, [field](const RunConfig& c) { return fmt_f64(c.*field); },
                   [field, key](RunConfig& c, const std::string& s) {
                     c.*field = parse_f64(s, key);
                   }});
    };
    auto boolean = [&e](const char* sec, const char* key, bool RunConfig::*field) {
      e.push_back({sec, key, [field](const RunConfig& c) { return fmt_bool(c.*field); },
                   [field, key](RunConfig& c, const std::string& s) {
                     c.*field = parse_bool(s, key);
                   }});
    };
    auto str = [&e](const char* sec, const char* key, std::string RunConfig::*field) {
      e.push_back({sec, key, [field](const RunConfig& c) { return c.*field; },
                   [field](RunConfig& c, const std::string& s) { c.*field = s; }});
    };

    e.push_back({"run", "seed",
                 [](const RunConfig& c) { return fmt_u64(c.seed); },
                 [](RunConfig& c, const std::string& s) { c.seed = parse_u64(s, "seed"); }});
    boolean("run", "strict", &RunConfig::strict);
    str("run", "out_dir", &RunConfig::out_dir);

    str("data", "train_manifest", &RunConfig::train_manifest);
    str("data", "test_manifest", &RunConfig::test_manifest);
    u64("data", "resolution", &RunConfig::resolution);
    u64("data", "channels", &RunConfig::channels);
    u64("data", "anomalies_per_episode", &RunConfig::anomalies_per_episode);

    e.push_back({"model", "stage_channels",
                 [](const RunConfig& c) { return fmt_list(c.stage_channels); },
                 [](RunConfig& c, const std::string& s) {
                   c.stage_channels = parse_list(s, "stage_channels");
                 }});
    u64("model", "kernel_size", &RunConfig::kernel_size);
    u64("model", "attention_channels", &RunConfig::attention_channels);

    f64("train", "lr", &RunConfig::lr);
    f64("train", "lr_decay", &RunConfig::lr_decay);
    u64("train", "lr_step_epochs", &RunConfig::lr_step_epochs);
    u64("train", "epochs", &RunConfig::epochs);
    u64("train", "batch_size", &RunConfig::batch_size);
    f64("train", "cutmix_rate", &RunConfig::cutmix_rate);
    f64("train", "cutmix_area_min", &RunConfig::cutmix_area_min);
    f64("train", "cutmix_area_max", &RunConfig::cutmix_area_max);
    f64("train", "cutmix_aspect_min", &RunConfig::cutmix_aspect_min);
    f64("train", "cutmix_aspect_max", &RunConfig::cutmix_aspect_max);
    str("train", "ref_mode", &RunConfig::ref_mode);
    u64("train", "ref_samples", &RunConfig::ref_samples);

    f64("loss", "k", &RunConfig::k);
    boolean("loss", "hinge", &RunConfig::hinge);

    f64("scoring", "omega", &RunConfig::omega);
    f64("scoring", "topk_fraction", &RunConfig::topk_fraction);
    boolean("scoring", "two_pass", &RunConfig::two_pass);
    f64("scoring", "crop_margin", &RunConfig::crop_margin);
    f64("scoring", "crop_min_frac", &RunConfig::crop_min_frac);

    str("synth", "texture", &RunConfig::texture);
    str("synth", "defect", &RunConfig::defect);
    f64("synth", "defect_intensity", &RunConfig::defect_intensity);
    u64("synth", "n_normal", &RunConfig::n_normal);
    u64("synth", "n_anomalous", &RunConfig::n_anomalous);
    return e;
  }();
  return entries;
}

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace detail

// Seed resolution: explicit flag > config file > ATAC_SEED env > 0.
inline RunConfig default_config() {
  RunConfig cfg;
  if (const char* env = std::getenv("ATAC_SEED"); env && *env)
    cfg.seed = detail::parse_u64(env, "ATAC_SEED");
  return cfg;
}

// "section.key" addressing, used by the file parser and CLI overrides alike.
inline void apply_kv(RunConfig& cfg, const std::string& section, const std::string& key,
                     const std::string& value) {
  for (const auto& e : detail::config_entries()) {
    if (section == e.section && key == e.key) {
      e.set(cfg, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + section + "." + key + "'");
}

inline void parse_config_text(RunConfig& cfg, std::istream& in, const std::string& origin) {
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError("config: bad section header at " + origin + ":" +
                          std::to_string(lineno));
      section = t.substr(1, t.size() - 2);
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: expected 'key = value' at " + origin + ":" +
                        std::to_string(lineno));
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    if (section.empty())
      throw ConfigError("config: key '" + key + "' before any [section] at " + origin + ":" +
                        std::to_string(lineno));
    apply_kv(cfg, section, key, value);
  }
}

inline RunConfig load_config(const std::string& path) {
  RunConfig cfg = default_config();
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  parse_config_text(cfg, in, path);
  return cfg;
}

// Canonical form: fixed section and key order, shortest round-trip numbers.
// Parsing a canonical file and re-serializing reproduces it byte for byte.
inline std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& e : detail::config_entries()) {
    if (section != e.section) {
      if (!section.empty()) out += "\n";
      section = e.section;
      out += "[" + section + "]\n";
    }
    out += std::string(e.key) + " = " + e.get(cfg) + "\n";
  }
  return out;
}

inline void validate_config(const RunConfig& cfg) {
  if (cfg.ref_mode != "analytic" && cfg.ref_mode != "sampled")
    throw ConfigError("config: ref_mode must be analytic or sampled, got '" + cfg.ref_mode +
                      "'");
  if (cfg.texture != "stripes" && cfg.texture != "blobs" && cfg.texture != "noise")
    throw ConfigError("config: texture must be stripes, blobs or noise, got '" + cfg.texture +
                      "'");
  if (cfg.defect != "scratch" && cfg.defect != "blot" && cfg.defect != "patch-swap")
    throw ConfigError("config: defect must be scratch, blot or patch-swap, got '" + cfg.defect +
                      "'");
  if (!(cfg.omega > 0.0 && cfg.omega < 1.0))
    throw ConfigError("config: omega must be in (0,1), got " + detail::fmt_f64(cfg.omega));
  if (!(cfg.topk_fraction > 0.0 && cfg.topk_fraction <= 1.0))
    throw ConfigError("config: topk_fraction must be in (0,1], got " +
                      detail::fmt_f64(cfg.topk_fraction));
  if (cfg.k <= 0.0) throw ConfigError("config: loss cut-off k must be positive");
  if (cfg.batch_size == 0 || cfg.lr_step_epochs == 0)
    throw ConfigError("config: batch_size and lr_step_epochs must be positive");
  if (!(cfg.lr > 0.0 && cfg.lr_decay > 0.0))
    throw ConfigError("config: lr and lr_decay must be positive");
  if (!(cfg.cutmix_rate >= 0.0 && cfg.cutmix_rate <= 1.0))
    throw ConfigError("config: cutmix_rate must be in [0,1]");
  if (!(cfg.defect_intensity >= 0.0 && cfg.defect_intensity <= 1.0))
    throw ConfigError("config: defect_intensity must be in [0,1]");
  if (!(cfg.crop_margin >= 0.0 && cfg.crop_min_frac >= 0.0 && cfg.crop_min_frac <= 1.0))
    throw ConfigError("config: crop_margin must be >= 0 and crop_min_frac in [0,1]");
}

inline ModelConfig model_config(const RunConfig& cfg) {
  ModelConfig m;
  m.input_resolution = cfg.resolution;
  m.input_channels = cfg.channels;
  m.stage_channels = cfg.stage_channels;
  m.kernel_size = cfg.kernel_size;
  m.attention_channels = cfg.attention_channels;
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return m;
}

inline ScoringConfig scoring_config(const RunConfig& cfg) {
  ScoringConfig s;
  s.omega = cfg.omega;
  s.topk_fraction = cfg.topk_fraction;
  s.two_pass = cfg.two_pass;
  s.crop.margin_frac = cfg.crop_margin;
  s.crop.min_frac = cfg.crop_min_frac;
  return s;
}

inline LossConfig loss_config(const RunConfig& cfg) {
  LossConfig l;
  l.k = cfg.k;
  l.hinge = cfg.hinge;
  return l;
}

inline CutMixConfig cutmix_config(const RunConfig& cfg) {
  CutMixConfig c;
  c.area_min = cfg.cutmix_area_min;
  c.area_max = cfg.cutmix_area_max;
  c.aspect_min = cfg.cutmix_aspect_min;
  c.aspect_max = cfg.cutmix_aspect_max;
  return c;
}

inline SynthConfig synth_config(const RunConfig& cfg) {
  SynthConfig s;
  s.resolution = cfg.resolution;
  s.texture = cfg.texture == "stripes" ? SynthConfig::Texture::stripes
              : cfg.texture == "noise" ? SynthConfig::Texture::noise
                                       : SynthConfig::Texture::blobs;
  s.defect = cfg.defect == "blot"         ? SynthConfig::Defect::blot
             : cfg.defect == "patch-swap" ? SynthConfig::Defect::patch_swap
                                          : SynthConfig::Defect::scratch;
  s.defect_intensity = cfg.defect_intensity;
  s.n_normal = cfg.n_normal;
  s.n_anomalous = cfg.n_anomalous;
  s.seed = cfg.seed;
  return s;
}

inline TrainOptions train_options(const RunConfig& cfg) {
  TrainOptions t;
  t.schedule.base_lr = cfg.lr;
  t.schedule.decay_factor = cfg.lr_decay;
  t.schedule.step_size_epochs = cfg.lr_step_epochs;
  t.schedule.total_epochs = cfg.epochs;
  t.schedule.batch_size = cfg.batch_size;
  t.loss = loss_config(cfg);
  t.scoring = scoring_config(cfg);
  t.ref_mode = cfg.ref_mode == "sampled" ? RefMode::sampled : RefMode::analytic;
  t.ref_samples = cfg.ref_samples;
  t.cutmix = cutmix_config(cfg);
  t.cutmix_rate = cfg.cutmix_rate;
  t.seed = cfg.seed;
  return t;
}

}  // namespace atac
