#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace atac {

template <typename T>
struct GradCheckReport {
  T max_rel_err = T(0);
  std::size_t probes = 0;
  std::size_t skipped = 0;       // probes straddling a discrete switch (see token_fn)
  std::size_t worst_leaf = 0;
  std::size_t worst_coord = 0;
  bool pass = true;
};

// Central-difference check of d f() / d leaf against the recorded backward
// pass. f must be a scalar-valued closure over the given leaves; every call
// re-runs the full forward. Discrepancy is |fd - analytic| / max(1, |fd|,
// |analytic|), so tiny values are compared absolutely.
//
// token_fn, when given, must return a digest of the discrete choices the
// last f() evaluation made (selected top-K cells, crop box, ...). A probe
// whose +h and -h evaluations disagree on the token sits on a switching
// surface where finite differences are meaningless; it is skipped and
// counted.
template <typename T>
GradCheckReport<T> grad_check(const std::function<Tensor<T>()>& f,
                              std::vector<Tensor<T>> leaves, T h, T tol, Rng& rng,
                              std::size_t probes_per_leaf = 0,
                              const std::function<std::string()>& token_fn = {}) {
  GradCheckReport<T> rep;

  for (auto& leaf : leaves) leaf.zero_grad();
  auto y = f();
  ATAC_CHECK(y.size() == 1, "grad_check: f must be scalar-valued");
  backward(y);
  std::vector<std::vector<T>> analytic;
  for (auto& leaf : leaves) {
    if (leaf.grad().empty())
      analytic.emplace_back(leaf.size(), T(0));
    else
      analytic.push_back(leaf.grad());
  }
  Tape<T>::active().clear();

  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    std::vector<std::size_t> coords;
    if (probes_per_leaf == 0 || probes_per_leaf >= leaf.size()) {
      coords.resize(leaf.size());
      for (std::size_t i = 0; i < leaf.size(); ++i) coords[i] = i;
    } else {
      for (std::size_t i = 0; i < probes_per_leaf; ++i) coords.push_back(rng.index(leaf.size()));
    }
    for (std::size_t ci : coords) {
      const T v0 = leaf.values()[ci];
      NoGradGuard<T> ng;
      leaf.leaf_values()[ci] = v0 + h;
      const T yp = f().value();
      const std::string tp = token_fn ? token_fn() : std::string();
      leaf.leaf_values()[ci] = v0 - h;
      const T ym = f().value();
      const std::string tm = token_fn ? token_fn() : std::string();
      leaf.leaf_values()[ci] = v0;
      if (token_fn && tp != tm) {
        ++rep.skipped;
        continue;
      }
      const T fd = (yp - ym) / (2 * h);
      const T an = analytic[li][ci];
      const T denom = std::max({T(1), std::abs(fd), std::abs(an)});
      const T rel = std::abs(fd - an) / denom;
      ++rep.probes;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_leaf = li;
        rep.worst_coord = ci;
      }
    }
  }
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

}  // namespace atac
