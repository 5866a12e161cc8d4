#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "tensor.hpp"

namespace atac {

namespace detail {

template <typename T>
bool tracked(const Tensor<T>& t) {
  return t.storage()->requires_grad;
}

template <typename T>
bool recording_any(const Tensor<T>& a) {
  return Tape<T>::active().recording() && tracked(a);
}

template <typename T>
bool recording_any(const Tensor<T>& a, const Tensor<T>& b) {
  return Tape<T>::active().recording() && (tracked(a) || tracked(b));
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[i * K + k];
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    for (std::size_t j = 0; j < N; ++j) {
      const T* b = B + j * K;
      T acc = T(0);
      for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
      C[i * N + j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  for (std::size_t k = 0; k < K; ++k) {
    const T* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const T a = A[k * M + i];
      T* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// Unrolls one C×H×W image into (C·kh·kw) × (oh·ow), zero-filling padding.
// Row order matches the flattened O×I×kh×kw weight layout.
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
            std::size_t oh, std::size_t ow, T* cols) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = cols + ((c * kh + ky) * kw + kx) * (oh * ow);
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          T* out = row + oy * ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(out, out + ow, T(0));
            continue;
          }
          const T* src = x + (c * H + iy) * W;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) ? T(0) : src[ix];
          }
        }
      }
}

// Adjoint of im2col: scatters column gradients back onto the image.
template <typename T>
void col2im_acc(const T* cols, std::size_t C, std::size_t H, std::size_t W,
                std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
                std::size_t oh, std::size_t ow, T* gx) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* row = cols + ((c * kh + ky) * kw + kx) * (oh * ow);
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          const T* g = row + oy * ow;
          T* dst = gx + (c * H + iy) * W;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) dst[ix] += g[ox];
          }
        }
      }
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  ATAC_CHECK(a.shape() == b.shape(), "add: shape mismatch " << shape_str(a.shape())
                                                            << " vs " << shape_str(b.shape()));
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
  auto out = Tensor<T>::result(a.shape(), std::move(v));
  detail::check_finite(out, "add");
  if (detail::recording_any(a, b)) {
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    Tape<T>::active().record(os, [as, bs, os] {
      const auto& g = os->grad;
      if (as->requires_grad) {
        auto& ga = detail::grad_of(as);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bs->requires_grad) {
        auto& gb = detail::grad_of(bs);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  ATAC_CHECK(a.shape() == b.shape(), "sub: shape mismatch " << shape_str(a.shape())
                                                            << " vs " << shape_str(b.shape()));
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];
  auto out = Tensor<T>::result(a.shape(), std::move(v));
  detail::check_finite(out, "sub");
  if (detail::recording_any(a, b)) {
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    Tape<T>::active().record(os, [as, bs, os] {
      const auto& g = os->grad;
      if (as->requires_grad) {
        auto& ga = detail::grad_of(as);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bs->requires_grad) {
        auto& gb = detail::grad_of(bs);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  ATAC_CHECK(a.shape() == b.shape(), "mul: shape mismatch " << shape_str(a.shape())
                                                            << " vs " << shape_str(b.shape()));
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];
  auto out = Tensor<T>::result(a.shape(), std::move(v));
  detail::check_finite(out, "mul");
  if (detail::recording_any(a, b)) {
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    Tape<T>::active().record(os, [as, bs, os] {
      const auto& g = os->grad;
      if (as->requires_grad) {
        auto& ga = detail::grad_of(as);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bs->values[i];
      }
      if (bs->requires_grad) {
        auto& gb = detail::grad_of(bs);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * as->values[i];
      }
    });
  }
  return out;
}

// out = m·x + c, with plain-number coefficients.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T m, T c) {
  std::vector<T> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = m * x.values()[i] + c;
  auto out = Tensor<T>::result(x.shape(), std::move(v));
  detail::check_finite(out, "affine");
  if (detail::recording_any(x)) {
    auto xs = x.storage(), os = out.storage();
    Tape<T>::active().record(os, [xs, os, m] {
      const auto& g = os->grad;
      auto& gx = detail::grad_of(xs);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += m * g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T m) {
  return affine(x, m, T(0));
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return affine(x, T(-1), T(0));
}

template <typename T>
Tensor<T> abs_val(const Tensor<T>& x) {
  std::vector<T> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::abs(x.values()[i]);
  auto out = Tensor<T>::result(x.shape(), std::move(v));
  detail::check_finite(out, "abs_val");
  if (detail::recording_any(x)) {
    auto xs = x.storage(), os = out.storage();
    Tape<T>::active().record(os, [xs, os] {
      const auto& g = os->grad;
      auto& gx = detail::grad_of(xs);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = xs->values[i];
        if (v > T(0)) gx[i] += g[i];
        else if (v < T(0)) gx[i] -= g[i];
      }
    });
  }
  return out;
}

// Subgradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.values()[i] > T(0) ? x.values()[i] : T(0);
  auto out = Tensor<T>::result(x.shape(), std::move(v));
  detail::check_finite(out, "relu");
  if (detail::recording_any(x)) {
    auto xs = x.storage(), os = out.storage();
    Tape<T>::active().record(os, [xs, os] {
      const auto& g = os->grad;
      auto& gx = detail::grad_of(xs);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xs->values[i] > T(0)) gx[i] += g[i];
    });
  }
  return out;
}

// Broadcast multiply by a scalar tensor; both factors differentiable.
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, const Tensor<T>& s) {
  ATAC_CHECK(s.size() == 1, "mul_scalar: multiplier must be a scalar tensor, got shape "
                                << shape_str(s.shape()));
  const T sv = s.values()[0];
  std::vector<T> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.values()[i] * sv;
  auto out = Tensor<T>::result(x.shape(), std::move(v));
  detail::check_finite(out, "mul_scalar");
  if (detail::recording_any(x, s)) {
    auto xs = x.storage(), ss = s.storage(), os = out.storage();
    Tape<T>::active().record(os, [xs, ss, os] {
      const auto& g = os->grad;
      if (xs->requires_grad) {
        const T m = ss->values[0];
        auto& gx = detail::grad_of(xs);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += m * g[i];
      }
      if (ss->requires_grad) {
        T acc = T(0);
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xs->values[i];
        detail::grad_of(ss)[0] += acc;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  ATAC_CHECK(shape_numel(shape) == x.size(),
             "reshape: cannot view " << shape_str(x.shape()) << " as " << shape_str(shape));
  auto out = Tensor<T>::result(std::move(shape), x.values());
  if (detail::recording_any(x)) {
    auto xs = x.storage(), os = out.storage();
    Tape<T>::active().record(os, [xs, os] {
      const auto& g = os->grad;
      auto& gx = detail::grad_of(xs);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  ATAC_CHECK(x.ndim() == 2, "transpose2d: expected rank 2, got " << shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> v(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j * r + i] = x.values()[i * c + j];
  auto out = Tensor<T>::result({c, r}, std::move(v));
  if (detail::recording_any(x)) {
    auto xs = x.storage(), os = out.storage();
    Tape<T>::active().record(os, [xs, os, r, c] {
      const auto& g = os->grad;
      auto& gx = detail::grad_of(xs);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    });
  }
  return out;
}

// Picks index i along axis 0, dropping that axis.
template <typename T>
Tensor<T> select0(const Tensor<T>& x, std::size_t i) {
  ATAC_CHECK(x.ndim() >= 1, "select0: scalar has no axis 0");
  ATAC_CHECK(i < x.dim(0), "select0: index " << i << " out of range for axis size " << x.dim(0));
  Shape shape(x.shape().begin() + 1, x.shape().end());
  const std::size_t stride = shape_numel(shape);
  std::vector<T> v(x.values().begin() + i * stride, x.values().begin() + (i + 1) * stride);
  auto out = Tensor<T>::result(std::move(shape), std::move(v));
  if (detail::recording_any(x)) {
    auto xs = x.storage(), os = out.storage();
    Tape<T>::active().record(os, [xs, os, i, stride] {
      const auto& g = os->grad;
      auto& gx = detail::grad_of(xs);
      for (std::size_t j = 0; j < stride; ++j) gx[i * stride + j] += g[j];
    });
  }
  return out;
}

// Stacks equal-shape tensors along a new leading axis.
template <typename T>
Tensor<T> stack0(const std::vector<Tensor<T>>& parts) {
  ATAC_CHECK(!parts.empty(), "stack0: empty input");
  const Shape& inner = parts[0].shape();
  for (const auto& p : parts)
    ATAC_CHECK(p.shape() == inner, "stack0: mixed shapes " << shape_str(inner) << " vs "
                                                           << shape_str(p.shape()));
  const std::size_t stride = shape_numel(inner);
  Shape shape;
  shape.push_back(parts.size());
  shape.insert(shape.end(), inner.begin(), inner.end());
  std::vector<T> v(parts.size() * stride);
  for (std::size_t n = 0; n < parts.size(); ++n)
    std::copy(parts[n].values().begin(), parts[n].values().end(), v.begin() + n * stride);
  auto out = Tensor<T>::result(std::move(shape), std::move(v));
  bool any = false;
  for (const auto& p : parts) any = any || detail::tracked(p);
  if (Tape<T>::active().recording() && any) {
    std::vector<std::shared_ptr<TensorStorage<T>>> srcs;
    for (const auto& p : parts) srcs.push_back(p.storage());
    auto os = out.storage();
    Tape<T>::active().record(os, [srcs, os, stride] {
      const auto& g = os->grad;
      for (std::size_t n = 0; n < srcs.size(); ++n) {
        if (!srcs[n]->requires_grad) continue;
        auto& gp = detail::grad_of(srcs[n]);
        for (std::size_t j = 0; j < stride; ++j) gp[j] += g[n * stride + j];
      }
    });
  }
  return out;
}

namespace detail {

enum class ReduceKind { sum, mean, max };

template <typename T>
Tensor<T> reduce_all(const Tensor<T>& x, ReduceKind kind, const char* name) {
  ATAC_CHECK(x.size() > 0, name << ": empty tensor");
  const auto& v = x.values();
  T acc;
  std::size_t arg = 0;
  if (kind == ReduceKind::max) {
    acc = v[0];
    for (std::size_t i = 1; i < v.size(); ++i)
      if (v[i] > acc) { acc = v[i]; arg = i; }
  } else {
    acc = T(0);
    for (T e : v) acc += e;
    if (kind == ReduceKind::mean) acc /= static_cast<T>(v.size());
  }
  auto out = Tensor<T>::result({}, {acc});
  detail::check_finite(out, name);
  if (recording_any(x)) {
    auto xs = x.storage(), os = out.storage();
    const std::size_t n = v.size();
    Tape<T>::active().record(os, [xs, os, kind, arg, n] {
      const T g = os->grad[0];
      auto& gx = grad_of(xs);
      switch (kind) {
        case ReduceKind::sum:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g;
          break;
        case ReduceKind::mean:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g / static_cast<T>(n);
          break;
        case ReduceKind::max:
          gx[arg] += g;
          break;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reduce_axis_impl(const Tensor<T>& x, std::size_t axis, ReduceKind kind,
                           const char* name) {
  ATAC_CHECK(axis < x.ndim(), name << ": axis " << axis << " out of range for rank " << x.ndim());
  const std::size_t extent = x.dim(axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
  Shape shape;
  for (std::size_t i = 0; i < x.ndim(); ++i)
    if (i != axis) shape.push_back(x.dim(i));
  std::vector<T> v(outer * inner);
  std::vector<std::size_t> argmax(kind == ReduceKind::max ? outer * inner : 0);
  const auto& src = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * extent * inner + in;
      if (kind == ReduceKind::max) {
        T best = src[base];
        std::size_t bk = 0;
        for (std::size_t k = 1; k < extent; ++k) {
          const T e = src[base + k * inner];
          if (e > best) { best = e; bk = k; }
        }
        v[o * inner + in] = best;
        argmax[o * inner + in] = bk;
      } else {
        T acc = T(0);
        for (std::size_t k = 0; k < extent; ++k) acc += src[base + k * inner];
        if (kind == ReduceKind::mean) acc /= static_cast<T>(extent);
        v[o * inner + in] = acc;
      }
    }
  auto out = Tensor<T>::result(std::move(shape), std::move(v));
  detail::check_finite(out, name);
  if (recording_any(x)) {
    auto xs = x.storage(), os = out.storage();
    Tape<T>::active().record(os, [xs, os, kind, argmax, outer, inner, extent] {
      const auto& g = os->grad;
      auto& gx = grad_of(xs);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * extent * inner + in;
          const T ge = g[o * inner + in];
          switch (kind) {
            case ReduceKind::sum:
              for (std::size_t k = 0; k < extent; ++k) gx[base + k * inner] += ge;
              break;
            case ReduceKind::mean:
              for (std::size_t k = 0; k < extent; ++k)
                gx[base + k * inner] += ge / static_cast<T>(extent);
              break;
            case ReduceKind::max:
              gx[base + argmax[o * inner + in] * inner] += ge;
              break;
          }
        }
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
  return detail::reduce_all(x, detail::ReduceKind::sum, "reduce_sum");
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x) {
  return detail::reduce_all(x, detail::ReduceKind::mean, "reduce_mean");
}

// Ties route the gradient to the lowest flat index.
template <typename T>
Tensor<T> reduce_max(const Tensor<T>& x) {
  return detail::reduce_all(x, detail::ReduceKind::max, "reduce_max");
}

template <typename T>
Tensor<T> reduce_sum_axis(const Tensor<T>& x, std::size_t axis) {
  return detail::reduce_axis_impl(x, axis, detail::ReduceKind::sum, "reduce_sum_axis");
}

template <typename T>
Tensor<T> reduce_mean_axis(const Tensor<T>& x, std::size_t axis) {
  return detail::reduce_axis_impl(x, axis, detail::ReduceKind::mean, "reduce_mean_axis");
}

template <typename T>
Tensor<T> reduce_max_axis(const Tensor<T>& x, std::size_t axis) {
  return detail::reduce_axis_impl(x, axis, detail::ReduceKind::max, "reduce_max_axis");
}

// Max-subtracted along the given axis; slices sum to 1.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  ATAC_CHECK(axis < x.ndim(), "softmax: axis " << axis << " out of range for rank " << x.ndim());
  const std::size_t extent = x.dim(axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
  std::vector<T> v(x.size());
  const auto& src = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * extent * inner + in;
      T mx = src[base];
      for (std::size_t k = 1; k < extent; ++k) mx = std::max(mx, src[base + k * inner]);
      T z = T(0);
      for (std::size_t k = 0; k < extent; ++k) {
        const T e = std::exp(src[base + k * inner] - mx);
        v[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < extent; ++k) v[base + k * inner] /= z;
    }
  auto out = Tensor<T>::result(x.shape(), std::move(v));
  detail::check_finite(out, "softmax");
  if (detail::recording_any(x)) {
    auto xs = x.storage(), os = out.storage();
    Tape<T>::active().record(os, [xs, os, outer, inner, extent] {
      const auto& g = os->grad;
      const auto& y = os->values;
      auto& gx = detail::grad_of(xs);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * extent * inner + in;
          T dot = T(0);
          for (std::size_t k = 0; k < extent; ++k)
            dot += g[base + k * inner] * y[base + k * inner];
          for (std::size_t k = 0; k < extent; ++k) {
            const std::size_t idx = base + k * inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  ATAC_CHECK(a.ndim() == 2 && b.ndim() == 2,
             "matmul: expected rank-2 operands, got " << shape_str(a.shape()) << " and "
                                                      << shape_str(b.shape()));
  ATAC_CHECK(a.dim(1) == b.dim(0), "matmul: inner dimensions differ, " << a.dim(1) << " vs "
                                                                       << b.dim(0));
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<T> v(M * N, T(0));
  detail::gemm_nn(M, K, N, a.values().data(), b.values().data(), v.data());
  auto out = Tensor<T>::result({M, N}, std::move(v));
  detail::check_finite(out, "matmul");
  if (detail::recording_any(a, b)) {
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    Tape<T>::active().record(os, [as, bs, os, M, K, N] {
      const T* g = os->grad.data();
      if (as->requires_grad)
        detail::gemm_nt(M, N, K, g, bs->values.data(), detail::grad_of(as).data());
      if (bs->requires_grad)
        detail::gemm_tn(K, M, N, as->values.data(), g, detail::grad_of(bs).data());
    });
  }
  return out;
}

// x: N×C×H×W, w: O×C×kh×kw, optional b: O. Lowered to im2col + matrix product;
// the backward pass re-runs im2col rather than holding the unrolled buffer.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::size_t stride, std::size_t pad) {
  ATAC_CHECK(x.ndim() == 4, "conv2d: input must be N×C×H×W, got " << shape_str(x.shape()));
  ATAC_CHECK(w.ndim() == 4, "conv2d: weight must be O×I×kh×kw, got " << shape_str(w.shape()));
  ATAC_CHECK(stride >= 1, "conv2d: stride must be positive");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  ATAC_CHECK(w.dim(1) == C,
             "conv2d: input has " << C << " channels but weight expects " << w.dim(1));
  if (b.defined())
    ATAC_CHECK(b.ndim() == 1 && b.dim(0) == O,
               "conv2d: bias shape " << shape_str(b.shape()) << " does not match " << O
                                     << " output channels");
  ATAC_CHECK(H + 2 * pad >= kh && W + 2 * pad >= kw,
             "conv2d: kernel " << kh << "x" << kw << " exceeds padded input " << (H + 2 * pad)
                               << "x" << (W + 2 * pad));
  const std::size_t oh = (H + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (W + 2 * pad - kw) / stride + 1;
  const std::size_t ckk = C * kh * kw, hw = oh * ow;

  std::vector<T> v(N * O * hw);
  std::vector<T> cols(ckk * hw);
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col(x.values().data() + n * C * H * W, C, H, W, kh, kw, stride, pad, oh, ow,
                   cols.data());
    T* dst = v.data() + n * O * hw;
    if (b.defined()) {
      for (std::size_t o = 0; o < O; ++o)
        std::fill(dst + o * hw, dst + (o + 1) * hw, b.values()[o]);
    } else {
      std::fill(dst, dst + O * hw, T(0));
    }
    detail::gemm_nn(O, ckk, hw, w.values().data(), cols.data(), dst);
  }
  auto out = Tensor<T>::result({N, O, oh, ow}, std::move(v));
  detail::check_finite(out, "conv2d");

  const bool track_b = b.defined() && detail::tracked(b);
  if (Tape<T>::active().recording() && (detail::tracked(x) || detail::tracked(w) || track_b)) {
    auto xs = x.storage(), ws = w.storage(), os = out.storage();
    auto bs = b.defined() ? b.storage() : nullptr;
    Tape<T>::active().record(os, [xs, ws, bs, os, N, C, H, W, O, kh, kw, stride, pad, oh, ow] {
      const std::size_t ckk = C * kh * kw, hw = oh * ow;
      const auto& g = os->grad;
      std::vector<T> cols(ckk * hw);
      std::vector<T> gcols;
      for (std::size_t n = 0; n < N; ++n) {
        const T* gn = g.data() + n * O * hw;
        detail::im2col(xs->values.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, oh, ow,
                       cols.data());
        if (bs && bs->requires_grad) {
          auto& gb = detail::grad_of(bs);
          for (std::size_t o = 0; o < O; ++o) {
            T acc = T(0);
            for (std::size_t p = 0; p < hw; ++p) acc += gn[o * hw + p];
            gb[o] += acc;
          }
        }
        if (ws->requires_grad)
          detail::gemm_nt(O, hw, ckk, gn, cols.data(), detail::grad_of(ws).data());
        if (xs->requires_grad) {
          gcols.assign(ckk * hw, T(0));
          detail::gemm_tn(ckk, O, hw, ws->values.data(), gn, gcols.data());
          detail::col2im_acc(gcols.data(), C, H, W, kh, kw, stride, pad, oh, ow,
                             detail::grad_of(xs).data() + n * C * H * W);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad) {
  return conv2d(x, w, Tensor<T>(), stride, pad);
}

// Half-pixel-center sampling (align_corners=false), clamped at the borders.
// Resampling is a data transform, not a differentiable op: inputs carrying
// gradient requirements are rejected.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  ATAC_CHECK(x.ndim() == 4, "bilinear_resize: input must be N×C×H×W, got "
                                << shape_str(x.shape()));
  ATAC_CHECK(out_h >= 1 && out_w >= 1, "bilinear_resize: output dims must be >= 1");
  ATAC_CHECK(!detail::tracked(x),
             "bilinear_resize: input requires gradients; pixel-space resampling has no "
             "backward pass, resize detached image data only");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (out_h == H && out_w == W) return Tensor<T>::result(x.shape(), x.values());
  const double sy = static_cast<double>(H) / static_cast<double>(out_h);
  const double sx = static_cast<double>(W) / static_cast<double>(out_w);
  std::vector<T> v(N * C * out_h * out_w);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = x.values().data() + (n * C + c) * H * W;
      T* dst = v.data() + (n * C + c) * out_h * out_w;
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(H - 1));
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, H - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
          fx = std::clamp(fx, 0.0, static_cast<double>(W - 1));
          const std::size_t x0 = static_cast<std::size_t>(fx);
          const std::size_t x1 = std::min(x0 + 1, W - 1);
          const double wx = fx - static_cast<double>(x0);
          const double top = static_cast<double>(src[y0 * W + x0]) * (1.0 - wx) +
                             static_cast<double>(src[y0 * W + x1]) * wx;
          const double bot = static_cast<double>(src[y1 * W + x0]) * (1.0 - wx) +
                             static_cast<double>(src[y1 * W + x1]) * wx;
          dst[oy * out_w + ox] = static_cast<T>(top * (1.0 - wy) + bot * wy);
        }
      }
    }
  return Tensor<T>::result({N, C, out_h, out_w}, std::move(v));
}

}  // namespace atac
