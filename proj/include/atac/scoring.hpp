#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "model.hpp"
#include "ops.hpp"
#include "tensor.hpp"

namespace atac {

struct CropPolicy {
  double margin_frac = 0.10;  // of map extent, added on each side before scaling
  double min_frac = 0.25;     // floor on each box dimension, as a fraction of the image
};

// Pixel box is half-open [x0,x1) x [y0,y1); cell_* is the tight half-open
// map-cell box it was scaled from (pre-margin, full grid when fallback).
struct CropBox {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  std::size_t cell_x0 = 0, cell_y0 = 0, cell_x1 = 0, cell_y1 = 0;
  bool fallback = false;

  bool operator==(const CropBox&) const = default;
};

struct ScoringConfig {
  double omega = 0.4;          // threshold on the normalized attention map
  double topk_fraction = 0.10;
  bool two_pass = true;        // false scores on the first map alone
  CropPolicy crop;
};

// Channel mean of the attended features plus its min-max normalization.
// Carries no gradient: it exists to steer the crop, which is a discrete
// decision.
template <typename T>
struct AttentionMapT {
  std::size_t h = 0, w = 0;
  std::vector<T> pre_norm;
  std::vector<T> values;     // in [0,1]; all zero when the map is constant
  bool degenerate = false;
};

template <typename T>
AttentionMapT<T> channel_mean_map(const Tensor<T>& att, std::size_t sample = 0) {
  ATAC_CHECK(att.ndim() == 4, "channel_mean_map: expected N×C×h×w, got "
                                  << shape_str(att.shape()));
  ATAC_CHECK(att.dim(1) >= 1, "channel_mean_map: need at least one channel");
  ATAC_CHECK(sample < att.dim(0), "channel_mean_map: sample index out of range");
  const std::size_t C = att.dim(1), h = att.dim(2), w = att.dim(3);
  AttentionMapT<T> m;
  m.h = h;
  m.w = w;
  m.pre_norm.assign(h * w, T(0));
  const T* base = att.values().data() + sample * C * h * w;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < h * w; ++i) m.pre_norm[i] += base[c * h * w + i];
  for (auto& v : m.pre_norm) v /= static_cast<T>(C);
  const auto [mn, mx] = std::minmax_element(m.pre_norm.begin(), m.pre_norm.end());
  m.values.assign(h * w, T(0));
  if (*mx > *mn) {
    const T lo = *mn, range = *mx - lo;
    for (std::size_t i = 0; i < h * w; ++i) m.values[i] = (m.pre_norm[i] - lo) / range;
  } else {
    m.degenerate = true;  // constant map carries no localization signal
  }
  return m;
}

// Strict comparison: cells equal to omega stay inactive.
template <typename T>
std::vector<std::uint8_t> threshold_mask(const AttentionMapT<T>& m, double omega) {
  std::vector<std::uint8_t> mask(m.values.size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask[i] = m.values[i] > static_cast<T>(omega) ? 1 : 0;
  return mask;
}

inline CropBox full_image_box(std::size_t map_h, std::size_t map_w, std::size_t H,
                              std::size_t W) {
  CropBox b;
  b.x0 = 0;
  b.y0 = 0;
  b.x1 = W;
  b.y1 = H;
  b.cell_x0 = 0;
  b.cell_y0 = 0;
  b.cell_x1 = map_w;
  b.cell_y1 = map_h;
  b.fallback = true;
  return b;
}

// Tight bounding box over active cells, widened by the margin, scaled to
// pixels, clamped, then grown to the minimum-size floor. Empty mask falls
// back to the whole image.
inline CropBox extract_crop_box(const std::vector<std::uint8_t>& mask, std::size_t map_h,
                                std::size_t map_w, std::size_t H, std::size_t W,
                                const CropPolicy& pol) {
  ATAC_CHECK(mask.size() == map_h * map_w,
             "extract_crop_box: mask size " << mask.size() << " does not match map " << map_h
                                            << "x" << map_w);
  std::size_t cy0 = map_h, cy1 = 0, cx0 = map_w, cx1 = 0;
  bool any = false;
  for (std::size_t y = 0; y < map_h; ++y)
    for (std::size_t x = 0; x < map_w; ++x)
      if (mask[y * map_w + x]) {
        any = true;
        cy0 = std::min(cy0, y);
        cy1 = std::max(cy1, y);
        cx0 = std::min(cx0, x);
        cx1 = std::max(cx1, x);
      }
  if (!any) return full_image_box(map_h, map_w, H, W);

  CropBox b;
  b.cell_x0 = cx0;
  b.cell_y0 = cy0;
  b.cell_x1 = cx1 + 1;
  b.cell_y1 = cy1 + 1;

  const double my = pol.margin_frac * static_cast<double>(map_h);
  const double mx = pol.margin_frac * static_cast<double>(map_w);
  const double fy0 = std::max(0.0, static_cast<double>(cy0) - my);
  const double fy1 = std::min(static_cast<double>(map_h), static_cast<double>(cy1 + 1) + my);
  const double fx0 = std::max(0.0, static_cast<double>(cx0) - mx);
  const double fx1 = std::min(static_cast<double>(map_w), static_cast<double>(cx1 + 1) + mx);

  const double sy = static_cast<double>(H) / static_cast<double>(map_h);
  const double sx = static_cast<double>(W) / static_cast<double>(map_w);
  auto clamp_to = [](double v, std::size_t hi) {
    return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(hi)));
  };
  b.y0 = clamp_to(std::floor(fy0 * sy), H);
  b.y1 = clamp_to(std::ceil(fy1 * sy), H);
  b.x0 = clamp_to(std::floor(fx0 * sx), W);
  b.x1 = clamp_to(std::ceil(fx1 * sx), W);

  auto grow = [](std::size_t& lo, std::size_t& hi, std::size_t limit, std::size_t min_len) {
    if (hi - lo >= min_len) return;
    auto c2 = static_cast<long long>(lo) + static_cast<long long>(hi);
    auto nlo = (c2 - static_cast<long long>(min_len)) / 2;
    if (nlo < 0) nlo = 0;
    auto nhi = nlo + static_cast<long long>(min_len);
    if (nhi > static_cast<long long>(limit)) {
      nhi = static_cast<long long>(limit);
      nlo = nhi - static_cast<long long>(min_len);
    }
    lo = static_cast<std::size_t>(nlo);
    hi = static_cast<std::size_t>(nhi);
  };
  const auto min_h = static_cast<std::size_t>(std::ceil(pol.min_frac * static_cast<double>(H)));
  const auto min_w = static_cast<std::size_t>(std::ceil(pol.min_frac * static_cast<double>(W)));
  grow(b.y0, b.y1, H, std::min(min_h, H));
  grow(b.x0, b.x1, W, std::min(min_w, W));
  return b;
}

// Resamples the box content back to the full input resolution. Constant data
// transform: rejects inputs that carry gradient requirements (the box is not
// differentiated through).
template <typename T>
Tensor<T> crop_and_resize(const Tensor<T>& x, const CropBox& box) {
  ATAC_CHECK(x.ndim() == 4, "crop_and_resize: input must be N×C×H×W, got "
                                << shape_str(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  ATAC_CHECK(box.x0 < box.x1 && box.x1 <= W && box.y0 < box.y1 && box.y1 <= H,
             "crop_and_resize: box [" << box.x0 << "," << box.x1 << ")x[" << box.y0 << ","
                                      << box.y1 << ") invalid for " << W << "x" << H
                                      << " image");
  ATAC_CHECK(!detail::tracked(x),
             "crop_and_resize: input requires gradients; the box copy has no backward pass, "
             "crop detached image data only");
  const std::size_t bh = box.y1 - box.y0, bw = box.x1 - box.x0;
  std::vector<T> v(N * C * bh * bw);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = x.values().data() + (n * C + c) * H * W;
      T* dst = v.data() + (n * C + c) * bh * bw;
      for (std::size_t y = 0; y < bh; ++y)
        std::copy(src + (box.y0 + y) * W + box.x0, src + (box.y0 + y) * W + box.x1,
                  dst + y * bw);
    }
  return bilinear_resize(Tensor<T>::result({N, C, bh, bw}, std::move(v)), H, W);
}

inline std::size_t topk_count(double fraction, std::size_t cells) {
  ATAC_CHECK(fraction > 0.0 && fraction <= 1.0, "topk_count: fraction must be in (0,1], got "
                                                    << fraction);
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(cells)));
  return std::max<std::size_t>(1, k);
}

// Indices of the k largest values, ordered by descending value with ties
// broken toward the lowest flat index.
template <typename T>
std::vector<std::size_t> topk_select(const std::vector<T>& v, std::size_t k) {
  ATAC_CHECK(k >= 1 && k <= v.size(),
             "topk_select: k=" << k << " invalid for " << v.size() << " values");
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&v](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  idx.resize(k);
  return idx;
}

// Mean of the selected cells, summed in the given (descending-value) order.
// Backward distributes the incoming gradient by telescoping partials so the
// per-cell shares, also summed in flat order, total exactly the incoming
// gradient; each share equals grad/k to within an ulp.
template <typename T>
Tensor<T> topk_mean_sel(const Tensor<T>& map, std::vector<std::size_t> sel) {
  ATAC_CHECK(!sel.empty() && sel.size() <= map.size(), "topk_mean: invalid selection size");
  T acc = T(0);
  for (auto i : sel) acc += map.values()[i];
  acc /= static_cast<T>(sel.size());
  auto out = Tensor<T>::result({}, {acc});
  detail::check_finite(out, "topk_mean");
  if (detail::recording_any(map)) {
    auto ms = map.storage(), os = out.storage();
    Tape<T>::active().record(os, [ms, os, sel = std::move(sel)] {
      const T g = os->grad[0];
      auto& gx = detail::grad_of(ms);
      std::vector<std::size_t> asc(sel);
      std::sort(asc.begin(), asc.end());
      const T k = static_cast<T>(sel.size());
      T prev = T(0);
      for (std::size_t i = 0; i < asc.size(); ++i) {
        const T next = g * (static_cast<T>(i + 1) / k);
        gx[asc[i]] += next - prev;
        prev = next;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> topk_mean(const Tensor<T>& map, std::size_t k) {
  return topk_mean_sel(map, topk_select(map.values(), k));
}

// Full two-pass scoring of one batch. Pass 1 maps the raw input; the
// thresholded attention map chooses a crop; pass 2 maps the crop resampled
// to full resolution through the same parameters; the score averages the
// two top-K means. frozen_boxes, when given, bypasses box extraction (the
// finite-difference harness holds the discrete choice fixed).
template <typename T>
struct AtacForward {
  Tensor<T> scores;                          // (N,)
  Tensor<T> map1, map2;                      // (N,1,h,w)
  Tensor<T> attended1, attended2;            // (N,Ca,h,w)
  std::vector<AttentionMapT<T>> attention;   // per sample, from pass 1
  std::vector<CropBox> boxes;
  std::vector<Tensor<T>> topk1, topk2;       // per-sample scalars
  std::vector<std::vector<std::size_t>> sel1, sel2;
};

template <typename T>
AtacForward<T> atac_forward(const Model<T>& model, const Tensor<T>& x,
                            const ScoringConfig& cfg,
                            const std::vector<CropBox>* frozen_boxes = nullptr) {
  const std::size_t N = x.dim(0), H = x.dim(2), W = x.dim(3);
  AtacForward<T> r;
  auto out1 = model.run(x);
  r.attended1 = out1.attended;
  r.map1 = out1.map;
  const std::size_t h = r.map1.dim(2), w = r.map1.dim(3);
  const std::size_t k = topk_count(cfg.topk_fraction, h * w);

  for (std::size_t n = 0; n < N; ++n) {
    r.attention.push_back(channel_mean_map(r.attended1, n));
    if (frozen_boxes) {
      ATAC_CHECK(frozen_boxes->size() == N, "atac_forward: frozen box count mismatch");
      r.boxes.push_back((*frozen_boxes)[n]);
    } else {
      r.boxes.push_back(
          extract_crop_box(threshold_mask(r.attention[n], cfg.omega), h, w, H, W, cfg.crop));
    }
  }

  if (cfg.two_pass) {
    std::vector<Tensor<T>> crops;
    crops.reserve(N);
    for (std::size_t n = 0; n < N; ++n) {
      NoGradGuard<T> ng;
      auto xn = select0(x, n);
      crops.push_back(select0(crop_and_resize(reshape(xn, {std::size_t{1}, x.dim(1), H, W}),
                                              r.boxes[n]),
                              0));
    }
    auto out2 = model.run(stack0(crops));
    r.attended2 = out2.attended;
    r.map2 = out2.map;
  } else {
    r.attended2 = out1.attended;
    r.map2 = out1.map;
  }

  std::vector<Tensor<T>> per_sample;
  for (std::size_t n = 0; n < N; ++n) {
    auto m1 = select0(r.map1, n);
    r.sel1.push_back(topk_select(m1.values(), k));
    r.topk1.push_back(topk_mean_sel(m1, r.sel1.back()));
    if (cfg.two_pass) {
      auto m2 = select0(r.map2, n);
      r.sel2.push_back(topk_select(m2.values(), k));
      r.topk2.push_back(topk_mean_sel(m2, r.sel2.back()));
      per_sample.push_back(scale(add(r.topk1.back(), r.topk2.back()), T(0.5)));
    } else {
      r.sel2.push_back(r.sel1.back());
      r.topk2.push_back(r.topk1.back());
      per_sample.push_back(r.topk1.back());
    }
  }
  r.scores = stack0(per_sample);
  return r;
}

}  // namespace atac
