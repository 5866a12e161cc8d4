#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "image.hpp"
#include "ops.hpp"
#include "rng.hpp"

namespace atac {

template <typename T>
struct Sample {
  ImageT<T> image;  // unit-range HWC
  int label = 0;
  enum class Origin { real, cutmix, synthetic } origin = Origin::real;
  std::string id;

  // paste diagnostics, set for cutmix output
  bool has_paste = false;
  std::size_t paste_x0 = 0, paste_y0 = 0, paste_x1 = 0, paste_y1 = 0;
  bool degenerate_paste = false;  // pasted content equals what it replaced
};

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  int label = 0;
};

struct DatasetManifest {
  std::string root;
  std::vector<ManifestEntry> entries;
};

// One `relative/path<TAB>label` per line; '#' starts a comment line.
inline DatasetManifest read_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("manifest: cannot open " + manifest_path);
  DatasetManifest m;
  m.root = std::filesystem::path(manifest_path).parent_path().string();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size())
      throw std::runtime_error("manifest: line " + std::to_string(lineno) + " of " +
                               manifest_path + " is not 'path<TAB>label'");
    const std::string label = line.substr(tab + 1);
    if (label != "0" && label != "1")
      throw std::runtime_error("manifest: line " + std::to_string(lineno) + " of " +
                               manifest_path + " has label '" + label + "', want 0 or 1");
    m.entries.push_back({line.substr(0, tab), label == "1" ? 1 : 0});
  }
  return m;
}

inline void write_manifest(const std::string& manifest_path,
                           const std::vector<ManifestEntry>& entries) {
  std::ofstream out(manifest_path);
  if (!out) throw std::runtime_error("manifest: cannot write " + manifest_path);
  out << "# path<TAB>label\n";
  for (const auto& e : entries) out << e.path << "\t" << e.label << "\n";
  if (!out) throw std::runtime_error("manifest: short write to " + manifest_path);
}

// Decodes every entry in manifest order, resampled to resolution² and scaled
// to [0,1].
template <typename T>
std::vector<Sample<T>> load_dataset(const DatasetManifest& m, std::size_t resolution) {
  std::vector<Sample<T>> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    const auto full = (std::filesystem::path(m.root) / e.path).string();
    auto unit = to_unit<T>(read_pnm(full));
    if (unit.width != resolution || unit.height != resolution) {
      NoGradGuard<T> ng;
      auto t = to_chw(unit);
      auto resized = bilinear_resize(reshape(t, {std::size_t{1}, unit.channels, unit.height,
                                                 unit.width}),
                                     resolution, resolution);
      unit = from_chw(select0(resized, 0));
    }
    Sample<T> s;
    s.image = std::move(unit);
    s.label = e.label;
    s.id = e.path;
    out.push_back(std::move(s));
  }
  return out;
}

// All normals plus n seeded draws from the anomaly pool, without replacement.
template <typename T>
std::vector<Sample<T>> sample_episode(const std::vector<Sample<T>>& normals,
                                      const std::vector<Sample<T>>& anomalies,
                                      std::size_t n_anomalies, std::uint64_t seed) {
  ATAC_CHECK(n_anomalies <= anomalies.size(),
             "episode: requested " << n_anomalies << " anomalies but pool has "
                                   << anomalies.size());
  std::vector<std::size_t> idx(anomalies.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < n_anomalies; ++i)
    std::swap(idx[i], idx[i + rng.index(idx.size() - i)]);
  std::vector<Sample<T>> out(normals.begin(), normals.end());
  for (std::size_t i = 0; i < n_anomalies; ++i) out.push_back(anomalies[idx[i]]);
  return out;
}

struct CutMixConfig {
  double area_min = 0.02, area_max = 0.15;        // patch area as a fraction of the image
  double aspect_min = 1.0 / 3.0, aspect_max = 3.0;  // drawn log-uniformly
  enum class Source { other_normal, same_image_offset } source = Source::other_normal;
};

// Pastes a donor rectangle into a normal base at a random location; the
// result is a pseudo-anomaly. Draw order: area, aspect, paste corner, source
// corner. Passing base as its own donor gives the same-image-offset variant.
template <typename T>
Sample<T> cutmix(const Sample<T>& base, const Sample<T>& donor, const CutMixConfig& cfg,
                 Rng& rng) {
  ATAC_CHECK(base.label == 0, "cutmix: base sample must be normal");
  ATAC_CHECK(cfg.area_min > 0 && cfg.area_max < 1 && cfg.area_min <= cfg.area_max,
             "cutmix: area fraction range (" << cfg.area_min << ", " << cfg.area_max
                                             << ") must sit inside (0,1)");
  ATAC_CHECK(base.image.channels == donor.image.channels,
             "cutmix: base has " << base.image.channels << " channels, donor "
                                 << donor.image.channels);
  const std::size_t W = base.image.width, H = base.image.height, C = base.image.channels;

  const double area = rng.uniform(cfg.area_min, cfg.area_max) * static_cast<double>(W * H);
  const double aspect = rng.log_uniform(cfg.aspect_min, cfg.aspect_max);
  auto bw = static_cast<std::size_t>(std::lround(std::sqrt(area * aspect)));
  auto bh = static_cast<std::size_t>(std::lround(std::sqrt(area / aspect)));
  bw = std::max<std::size_t>(1, bw);
  bh = std::max<std::size_t>(1, bh);
  ATAC_CHECK(bw <= W && bh <= H && bw <= donor.image.width && bh <= donor.image.height,
             "cutmix: configured ranges produced a " << bw << "x" << bh
                                                     << " patch larger than the image");
  const std::size_t px = rng.index(W - bw + 1), py = rng.index(H - bh + 1);
  const std::size_t sx = rng.index(donor.image.width - bw + 1),
                    sy = rng.index(donor.image.height - bh + 1);

  Sample<T> out = base;
  out.label = 1;
  out.origin = Sample<T>::Origin::cutmix;
  out.id = base.id + ":cutmix";
  out.has_paste = true;
  out.paste_x0 = px;
  out.paste_y0 = py;
  out.paste_x1 = px + bw;
  out.paste_y1 = py + bh;
  out.degenerate_paste = true;
  for (std::size_t y = 0; y < bh; ++y)
    for (std::size_t x = 0; x < bw; ++x)
      for (std::size_t c = 0; c < C; ++c) {
        const T v = donor.image.pixels[((sy + y) * donor.image.width + (sx + x)) * C + c];
        T& dst = out.image.pixels[((py + y) * W + (px + x)) * C + c];
        if (dst != v) out.degenerate_paste = false;
        dst = v;
      }
  return out;
}

struct SynthConfig {
  std::size_t resolution = 64;
  enum class Texture { stripes, blobs, noise } texture = Texture::blobs;
  enum class Defect { scratch, blot, patch_swap } defect = Defect::scratch;
  double defect_intensity = 0.5;
  std::size_t n_normal = 0, n_anomalous = 0;
  std::uint64_t seed = 0;
};

inline const char* texture_name(SynthConfig::Texture t) {
  switch (t) {
    case SynthConfig::Texture::stripes: return "stripes";
    case SynthConfig::Texture::blobs: return "blobs";
    default: return "noise";
  }
}

inline const char* defect_name(SynthConfig::Defect d) {
  switch (d) {
    case SynthConfig::Defect::scratch: return "scratch";
    case SynthConfig::Defect::blot: return "blot";
    default: return "patch-swap";
  }
}

namespace detail {

inline std::vector<double> render_texture(const SynthConfig& cfg, Rng& rng) {
  const std::size_t R = cfg.resolution;
  std::vector<double> img(R * R, 0.5);
  switch (cfg.texture) {
    case SynthConfig::Texture::stripes: {
      const double freq = rng.uniform(2.0, 6.0);
      const double angle = rng.uniform(0.0, 3.14159265358979323846);
      const double phase = rng.uniform(0.0, 6.28318530717958647692);
      const double ca = std::cos(angle), sa = std::sin(angle);
      for (std::size_t y = 0; y < R; ++y)
        for (std::size_t x = 0; x < R; ++x) {
          const double u = (ca * static_cast<double>(x) + sa * static_cast<double>(y)) /
                           static_cast<double>(R);
          img[y * R + x] = 0.5 + 0.3 * std::sin(6.28318530717958647692 * freq * u + phase) +
                           0.02 * rng.normal();
        }
      break;
    }
    case SynthConfig::Texture::blobs: {
      const std::size_t nb = 5 + rng.index(5);
      std::fill(img.begin(), img.end(), 0.45);
      for (std::size_t b = 0; b < nb; ++b) {
        const double cx = rng.uniform(0.0, static_cast<double>(R));
        const double cy = rng.uniform(0.0, static_cast<double>(R));
        const double sigma = rng.uniform(static_cast<double>(R) / 16.0,
                                         static_cast<double>(R) / 6.0);
        const double amp = rng.uniform(-0.25, 0.25);
        for (std::size_t y = 0; y < R; ++y)
          for (std::size_t x = 0; x < R; ++x) {
            const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
            img[y * R + x] += amp * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
          }
      }
      break;
    }
    case SynthConfig::Texture::noise: {
      for (auto& v : img) v = rng.uniform();
      // two box-blur passes knock out pixel-level noise, leaving soft clouds
      for (int pass = 0; pass < 2; ++pass) {
        std::vector<double> next(img.size());
        for (std::size_t y = 0; y < R; ++y)
          for (std::size_t x = 0; x < R; ++x) {
            double acc = 0.0;
            int cnt = 0;
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const auto yy = static_cast<std::ptrdiff_t>(y) + dy;
                const auto xx = static_cast<std::ptrdiff_t>(x) + dx;
                if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(R) ||
                    xx >= static_cast<std::ptrdiff_t>(R))
                  continue;
                acc += img[static_cast<std::size_t>(yy) * R + static_cast<std::size_t>(xx)];
                ++cnt;
              }
            next[y * R + x] = acc / cnt;
          }
        img = std::move(next);
      }
      const auto [mn, mx] = std::minmax_element(img.begin(), img.end());
      const double lo = *mn, range = std::max(1e-12, *mx - lo);
      for (auto& v : img) v = 0.15 + 0.7 * (v - lo) / range;
      break;
    }
  }
  for (auto& v : img) v = std::clamp(v, 0.0, 1.0);
  return img;
}

struct DefectBox {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

inline DefectBox apply_defect(std::vector<double>& img, const SynthConfig& cfg, Rng& rng) {
  const std::size_t R = cfg.resolution;
  const double Rd = static_cast<double>(R);
  DefectBox intended;
  auto note = [&intended](std::size_t x, std::size_t y) {
    if (intended.x1 == 0 && intended.y1 == 0) {
      intended = {x, y, x + 1, y + 1};
    } else {
      intended.x0 = std::min(intended.x0, x);
      intended.y0 = std::min(intended.y0, y);
      intended.x1 = std::max(intended.x1, x + 1);
      intended.y1 = std::max(intended.y1, y + 1);
    }
  };
  switch (cfg.defect) {
    case SynthConfig::Defect::scratch: {
      const double cx = rng.uniform(Rd / 4.0, 3.0 * Rd / 4.0);
      const double cy = rng.uniform(Rd / 4.0, 3.0 * Rd / 4.0);
      const double angle = rng.uniform(0.0, 3.14159265358979323846);
      const double len = rng.uniform(Rd / 3.0, 2.0 * Rd / 3.0);
      const double thick = 0.5 + static_cast<double>(rng.index(2));
      const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
      const double dx = std::cos(angle), dy = std::sin(angle);
      for (double t = -len / 2.0; t <= len / 2.0; t += 0.25) {
        const double px = cx + t * dx, py = cy + t * dy;
        const auto x0 = static_cast<std::ptrdiff_t>(std::floor(px - thick));
        const auto y0 = static_cast<std::ptrdiff_t>(std::floor(py - thick));
        for (std::ptrdiff_t y = y0; y <= y0 + 2 * static_cast<std::ptrdiff_t>(thick) + 1; ++y)
          for (std::ptrdiff_t x = x0; x <= x0 + 2 * static_cast<std::ptrdiff_t>(thick) + 1;
               ++x) {
            if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(R) ||
                y >= static_cast<std::ptrdiff_t>(R))
              continue;
            const double ddx = static_cast<double>(x) - px, ddy = static_cast<double>(y) - py;
            if (ddx * ddx + ddy * ddy > thick * thick) continue;
            const auto ux = static_cast<std::size_t>(x), uy = static_cast<std::size_t>(y);
            img[uy * R + ux] =
                std::clamp(img[uy * R + ux] + sign * cfg.defect_intensity, 0.0, 1.0);
            note(ux, uy);
          }
      }
      break;
    }
    case SynthConfig::Defect::blot: {
      const double cx = rng.uniform(Rd / 4.0, 3.0 * Rd / 4.0);
      const double cy = rng.uniform(Rd / 4.0, 3.0 * Rd / 4.0);
      const double radius = rng.uniform(Rd / 16.0, Rd / 6.0);
      const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
      for (std::size_t y = 0; y < R; ++y)
        for (std::size_t x = 0; x < R; ++x) {
          const double ddx = static_cast<double>(x) - cx, ddy = static_cast<double>(y) - cy;
          if (ddx * ddx + ddy * ddy > radius * radius) continue;
          img[y * R + x] = std::clamp(img[y * R + x] + sign * cfg.defect_intensity, 0.0, 1.0);
          note(x, y);
        }
      break;
    }
    case SynthConfig::Defect::patch_swap: {
      const std::size_t side = R / 8 + rng.index(R / 8 + 1);
      const std::size_t bw = std::max<std::size_t>(2, side);
      const std::size_t bh = std::max<std::size_t>(2, R / 8 + rng.index(R / 8 + 1));
      std::size_t sx = rng.index(R - bw + 1), sy = rng.index(R - bh + 1);
      std::size_t dx = rng.index(R - bw + 1), dy = rng.index(R - bh + 1);
      if (sx == dx && sy == dy) dx = (dx + R / 2) % (R - bw + 1);
      std::vector<double> patch(bw * bh);
      for (std::size_t y = 0; y < bh; ++y)
        for (std::size_t x = 0; x < bw; ++x) patch[y * bw + x] = img[(sy + y) * R + (sx + x)];
      for (std::size_t y = 0; y < bh; ++y)
        for (std::size_t x = 0; x < bw; ++x) {
          img[(dy + y) * R + (dx + x)] = patch[y * bw + x];
          note(dx + x, dy + y);
        }
      break;
    }
  }
  return intended;
}

}  // namespace detail

struct SynthResult {
  std::string manifest_path;
  DatasetManifest manifest;
};

// Writes n_normal texture images and n_anomalous images carrying exactly one
// defect each, as 8-bit PGM plus a sidecar metadata file per anomaly. The
// recorded box is the bounding box of the pixels the defect actually
// changed, falling back to the drawn geometry when nothing changed (zero
// intensity). (seed, cfg) fully determines every output byte.
inline SynthResult generate_synthetic(const SynthConfig& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir))
    throw std::runtime_error("synth: cannot create output directory " + out_dir);

  auto name_of = [](const char* cls, std::size_t i) {
    std::ostringstream oss;
    oss << cls << "_" << std::setw(3) << std::setfill('0') << i << ".pgm";
    return oss.str();
  };
  auto to_image = [&cfg](const std::vector<double>& img) {
    ImageT<double> unit;
    unit.width = cfg.resolution;
    unit.height = cfg.resolution;
    unit.channels = 1;
    unit.pixels = img;
    return to_u8(unit);
  };

  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < cfg.n_normal; ++i) {
    Rng rng(derive_seed(cfg.seed, "synth-normal", i));
    const auto name = name_of("normal", i);
    write_pnm((fs::path(out_dir) / name).string(), to_image(detail::render_texture(cfg, rng)));
    entries.push_back({name, 0});
  }
  for (std::size_t i = 0; i < cfg.n_anomalous; ++i) {
    const std::uint64_t img_seed = derive_seed(cfg.seed, "synth-anomalous", i);
    Rng rng(img_seed);
    auto img = detail::render_texture(cfg, rng);
    const auto clean = img;
    const auto drawn = detail::apply_defect(img, cfg, rng);

    detail::DefectBox box = drawn;
    bool changed = false;
    for (std::size_t y = 0; y < cfg.resolution; ++y)
      for (std::size_t x = 0; x < cfg.resolution; ++x) {
        if (img[y * cfg.resolution + x] == clean[y * cfg.resolution + x]) continue;
        if (!changed) {
          box = {x, y, x + 1, y + 1};
          changed = true;
        } else {
          box.x0 = std::min(box.x0, x);
          box.y0 = std::min(box.y0, y);
          box.x1 = std::max(box.x1, x + 1);
          box.y1 = std::max(box.y1, y + 1);
        }
      }

    const auto name = name_of("anomalous", i);
    write_pnm((fs::path(out_dir) / name).string(), to_image(img));
    std::ofstream meta((fs::path(out_dir) / (name + ".meta")).string());
    if (!meta) throw std::runtime_error("synth: cannot write metadata beside " + name);
    meta << "defect_kind=" << defect_name(cfg.defect) << "\n"
         << "x0=" << box.x0 << "\ny0=" << box.y0 << "\nx1=" << box.x1 << "\ny1=" << box.y1
         << "\nseed=" << img_seed << "\n";
    entries.push_back({name, 1});
  }

  SynthResult res;
  res.manifest_path = (fs::path(out_dir) / "manifest.tsv").string();
  write_manifest(res.manifest_path, entries);
  res.manifest.root = out_dir;
  res.manifest.entries = std::move(entries);
  return res;
}

// Sidecar `key=value` reader for the ground-truth defect boxes.
inline std::vector<std::pair<std::string, std::string>> read_sidecar(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("sidecar: cannot open " + path);
  std::vector<std::pair<std::string, std::string>> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("sidecar: bad line '" + line + "' in " + path);
    kv.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  return kv;
}

}  // namespace atac
