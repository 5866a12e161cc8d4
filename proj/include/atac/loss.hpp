#pragma once

#include <cmath>
#include <vector>

#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace atac {

// Gaussian prior the deviations are measured against. Analytic mode is the
// standard normal; sampled mode estimates the moments from seeded draws and
// exists for parity with sampling-based formulations.
struct ReferenceDistribution {
  double mu_R = 0.0;
  double sigma_R = 1.0;

  static ReferenceDistribution analytic() { return {}; }

  static ReferenceDistribution sampled(std::size_t count, Rng& rng) {
    ATAC_CHECK(count >= 2, "reference distribution: need at least 2 draws, got " << count);
    std::vector<double> draws(count);
    for (auto& d : draws) d = rng.normal();
    double mean = 0.0;
    for (double d : draws) mean += d;
    mean /= static_cast<double>(count);
    double var = 0.0;
    for (double d : draws) var += (d - mean) * (d - mean);
    var /= static_cast<double>(count);
    ReferenceDistribution ref;
    ref.mu_R = mean;
    ref.sigma_R = std::sqrt(var);
    return ref;
  }
};

struct LossConfig {
  double k = 10.0;    // cut-off: anomalies are pushed at least this many sigmas out
  bool hinge = true;  // false keeps the raw (k - |dev|) term, which is unbounded below
};

template <typename T>
T deviation(T score, const ReferenceDistribution& ref) {
  ATAC_CHECK(ref.sigma_R > 0, "deviation: sigma_R must be positive, got " << ref.sigma_R);
  return (score - static_cast<T>(ref.mu_R)) / static_cast<T>(ref.sigma_R);
}

// y=0 pulls |dev| to 0; y=1 pushes |dev| past k.
template <typename T>
T deviation_loss(T score, int y, const ReferenceDistribution& ref, const LossConfig& cfg) {
  ATAC_CHECK(y == 0 || y == 1, "deviation_loss: label must be 0 or 1, got " << y);
  const T a = std::abs(deviation(score, ref));
  if (y == 0) return a;
  const T m = static_cast<T>(cfg.k) - a;
  return cfg.hinge ? std::max(T(0), m) : m;
}

// Mean per-sample deviation loss over a score vector, on the tape.
template <typename T>
Tensor<T> batch_loss(const Tensor<T>& scores, const std::vector<int>& labels,
                     const ReferenceDistribution& ref, const LossConfig& cfg) {
  ATAC_CHECK(scores.ndim() == 1, "batch_loss: scores must be a vector, got "
                                     << shape_str(scores.shape()));
  ATAC_CHECK(scores.dim(0) == labels.size(), "batch_loss: " << scores.dim(0) << " scores vs "
                                                            << labels.size() << " labels");
  ATAC_CHECK(ref.sigma_R > 0, "batch_loss: sigma_R must be positive, got " << ref.sigma_R);
  const std::size_t n = labels.size();
  std::vector<T> m0(n), m1(n);
  for (std::size_t i = 0; i < n; ++i) {
    ATAC_CHECK(labels[i] == 0 || labels[i] == 1,
               "batch_loss: label must be 0 or 1, got " << labels[i] << " at index " << i);
    m0[i] = labels[i] == 0 ? T(1) : T(0);
    m1[i] = T(1) - m0[i];
  }
  auto mask_normal = Tensor<T>::from_values({n}, std::move(m0));
  auto mask_anomaly = Tensor<T>::from_values({n}, std::move(m1));

  const T inv_sigma = T(1) / static_cast<T>(ref.sigma_R);
  auto dev = affine(scores, inv_sigma, static_cast<T>(-ref.mu_R / ref.sigma_R));
  auto a = abs_val(dev);
  auto margin = affine(a, T(-1), static_cast<T>(cfg.k));
  auto pushed = cfg.hinge ? relu(margin) : margin;
  auto per_sample = add(mul(a, mask_normal), mul(pushed, mask_anomaly));
  return reduce_mean(per_sample);
}

}  // namespace atac
