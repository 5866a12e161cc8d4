#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "image.hpp"
#include "ops.hpp"
#include "tensor.hpp"

namespace atac {

struct ScoredSample {
  std::string id;
  int label = 0;
  double score = 0;
};

// Probability a random anomaly outscores a random normal, ties at half
// weight. Mann-Whitney with midranks; counts stay exact in doubles, so this
// equals the O(n²) pairwise definition bit for bit.
inline double auroc(const std::vector<ScoredSample>& samples) {
  std::size_t n_pos = 0, n_neg = 0;
  for (const auto& s : samples) (s.label == 1 ? n_pos : n_neg)++;
  ATAC_CHECK(n_pos > 0 && n_neg > 0, "auroc: need both classes, got " << n_pos
                                                                      << " anomalies and "
                                                                      << n_neg << " normals");
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&samples](std::size_t a, std::size_t b) {
    return samples[a].score < samples[b].score;
  });
  double rank_pos = 0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j < idx.size() && samples[idx[j]].score == samples[idx[i]].score) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t)
      if (samples[idx[t]].label == 1) rank_pos += midrank;
    i = j;
  }
  const double u = rank_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct Histogram {
  std::vector<double> edges;              // n_bins + 1 shared equal-width edges
  std::vector<std::size_t> normal, anomalous;
};

inline Histogram score_histogram(const std::vector<ScoredSample>& samples, std::size_t n_bins) {
  ATAC_CHECK(n_bins >= 1, "score_histogram: need at least one bin");
  ATAC_CHECK(!samples.empty(), "score_histogram: no samples");
  double lo = samples[0].score, hi = samples[0].score;
  for (const auto& s : samples) {
    lo = std::min(lo, s.score);
    hi = std::max(hi, s.score);
  }
  Histogram h;
  h.normal.assign(n_bins, 0);
  h.anomalous.assign(n_bins, 0);
  const double width = (hi - lo) / static_cast<double>(n_bins);
  for (std::size_t i = 0; i <= n_bins; ++i)
    h.edges.push_back(lo + width * static_cast<double>(i));
  for (const auto& s : samples) {
    std::size_t bin = 0;
    if (width > 0) {
      bin = static_cast<std::size_t>((s.score - lo) / width);
      bin = std::min(bin, n_bins - 1);  // the maximum falls into the last bin
    }
    (s.label == 1 ? h.anomalous : h.normal)[bin]++;
  }
  return h;
}

template <typename T>
struct GradCamResult {
  std::vector<T> weights;  // one per activation channel, spatial mean of the gradient
  std::size_t h = 0, w = 0;
  std::vector<T> map;      // ReLU of the weighted channel sum
  std::vector<T> overlay;  // map bilinearly upsampled to out_h x out_w
  std::size_t out_h = 0, out_w = 0;
};

// Saliency of a scalar target w.r.t. one sample of a retained activation
// tensor. Call backward(target) first; the activation gradients must still
// be on the tape. An activation the target never touched yields a zero map.
template <typename T>
GradCamResult<T> gradcam(const Tensor<T>& activations, std::size_t sample, std::size_t out_h,
                         std::size_t out_w) {
  ATAC_CHECK(activations.ndim() == 4, "gradcam: activations must be N×C×h×w, got "
                                          << shape_str(activations.shape()));
  ATAC_CHECK(sample < activations.dim(0), "gradcam: sample index out of range");
  ATAC_CHECK(activations.on_tape() || activations.requires_grad(),
             "gradcam: activations are detached from any target; re-run the forward pass with "
             "recording enabled");
  const std::size_t C = activations.dim(1), h = activations.dim(2), w = activations.dim(3);
  const std::size_t hw = h * w;
  GradCamResult<T> r;
  r.h = h;
  r.w = w;
  r.out_h = out_h;
  r.out_w = out_w;
  r.weights.assign(C, T(0));
  const auto& grad = activations.grad();
  if (!grad.empty()) {
    for (std::size_t c = 0; c < C; ++c) {
      T acc = T(0);
      const T* g = grad.data() + (sample * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) acc += g[i];
      r.weights[c] = acc / static_cast<T>(hw);
    }
  }
  r.map.assign(hw, T(0));
  const T* act = activations.values().data() + sample * C * hw;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < hw; ++i) r.map[i] += r.weights[c] * act[c * hw + i];
  for (auto& v : r.map) v = v > T(0) ? v : T(0);

  NoGradGuard<T> ng;
  auto up = bilinear_resize(Tensor<T>::from_values({1, 1, h, w}, r.map), out_h, out_w);
  r.overlay = up.values();
  return r;
}

// Min-max to [0,1]; a constant map collapses to all zeros.
template <typename T>
std::vector<T> normalize_map(const std::vector<T>& map) {
  std::vector<T> out(map.size(), T(0));
  if (map.empty()) return out;
  const auto [mn, mx] = std::minmax_element(map.begin(), map.end());
  if (*mx > *mn)
    for (std::size_t i = 0; i < map.size(); ++i) out[i] = (map[i] - *mn) / (*mx - *mn);
  return out;
}

struct HeatmapFiles {
  std::string map_pgm, overlay_ppm, mask_pgm;
};

// Writes the normalized map as PGM, a red-tinted blend over the image as
// PPM, and (given a threshold) the binarized mask as PGM.
template <typename T>
HeatmapFiles export_heatmap(const std::vector<T>& map, std::size_t h, std::size_t w,
                            const ImageT<T>& image, const std::string& path_base,
                            std::optional<double> omega = std::nullopt) {
  ATAC_CHECK(map.size() == h * w, "export_heatmap: map size " << map.size()
                                                              << " does not match " << h << "x"
                                                              << w);
  const auto norm = normalize_map(map);
  HeatmapFiles files;

  ImageT<T> map_img;
  map_img.width = w;
  map_img.height = h;
  map_img.channels = 1;
  map_img.pixels = norm;
  files.map_pgm = path_base + "_map.pgm";
  write_pnm(files.map_pgm, to_u8(map_img));

  const std::size_t H = image.height, W = image.width;
  std::vector<T> up;
  {
    NoGradGuard<T> ng;
    up = bilinear_resize(Tensor<T>::from_values({1, 1, h, w}, norm), H, W).values();
  }
  ImageT<T> overlay;
  overlay.width = W;
  overlay.height = H;
  overlay.channels = 3;
  overlay.pixels.resize(H * W * 3);
  for (std::size_t i = 0; i < H * W; ++i) {
    T gray = T(0);
    for (std::size_t c = 0; c < image.channels; ++c) gray += image.pixels[i * image.channels + c];
    gray /= static_cast<T>(image.channels);
    const T a = std::clamp(up[i], T(0), T(1));
    overlay.pixels[i * 3 + 0] = gray * (T(1) - a) + a;  // heat burns toward red
    overlay.pixels[i * 3 + 1] = gray * (T(1) - a);
    overlay.pixels[i * 3 + 2] = gray * (T(1) - a);
  }
  files.overlay_ppm = path_base + "_overlay.ppm";
  write_pnm(files.overlay_ppm, to_u8(overlay));

  if (omega) {
    ImageT<T> mask;
    mask.width = w;
    mask.height = h;
    mask.channels = 1;
    mask.pixels.resize(h * w);
    for (std::size_t i = 0; i < h * w; ++i)
      mask.pixels[i] = norm[i] > static_cast<T>(*omega) ? T(1) : T(0);
    files.mask_pgm = path_base + "_mask.pgm";
    write_pnm(files.mask_pgm, to_u8(mask));
  }
  return files;
}

}  // namespace atac
