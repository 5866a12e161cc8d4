#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace atac {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

#define ATAC_CHECK(cond, expr)                      \
  do {                                              \
    if (!(cond)) {                                  \
      std::ostringstream atac_oss_;                 \
      atac_oss_ << expr;                            \
      ::atac::fail(atac_oss_.str());                \
    }                                               \
  } while (0)

namespace detail {

// Global toggle for the finite-value scan every op runs on its output.
// On by default; NaN/Inf escaping an op is an error state, not a value.
inline bool& finite_checks() {
  static bool on = true;
  return on;
}

}  // namespace detail

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;           // empty until first accumulation
  bool requires_grad = false;
  std::int64_t node = -1;        // index on the recording tape, -1 = leaf/detached
};

template <typename T>
class Tape;

// Shared-storage handle over an N-dimensional row-major array. Tensors are
// immutable once produced by an op; only leaves (parameters, inputs) may be
// mutated, through leaf_values(), between recording passes.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from_values(std::move(shape), {});
  }

  static Tensor full(Shape shape, T v) {
    auto s = std::make_shared<TensorStorage<T>>();
    s->shape = std::move(shape);
    s->values.assign(shape_numel(s->shape), v);
    return Tensor(std::move(s));
  }

  static Tensor scalar(T v) { return full({}, v); }

  static Tensor from_values(Shape shape, std::vector<T> v) {
    auto s = std::make_shared<TensorStorage<T>>();
    s->shape = std::move(shape);
    if (v.empty()) {
      s->values.assign(shape_numel(s->shape), T(0));
    } else {
      ATAC_CHECK(v.size() == shape_numel(s->shape),
                 "tensor: data length " << v.size() << " does not match shape "
                                        << shape_str(s->shape));
      s->values = std::move(v);
    }
    return Tensor(std::move(s));
  }

  // Op-result constructor; used by ops.hpp.
  static Tensor result(Shape shape, std::vector<T> v) {
    auto s = std::make_shared<TensorStorage<T>>();
    s->shape = std::move(shape);
    ATAC_CHECK(v.size() == shape_numel(s->shape),
               "tensor: result length " << v.size() << " does not match shape "
                                        << shape_str(s->shape));
    s->values = std::move(v);
    return Tensor(std::move(s));
  }

  bool defined() const { return static_cast<bool>(s_); }

  const Shape& shape() const { return s_->shape; }
  std::size_t ndim() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape[i]; }
  std::size_t size() const { return s_->values.size(); }

  const std::vector<T>& values() const { return s_->values; }

  // Mutable access for leaves only. Checkpoint loading, optimizer updates and
  // finite-difference probes all go through here.
  std::vector<T>& leaf_values() {
    ATAC_CHECK(s_->node < 0,
               "tensor: mutation of an op result is not allowed; only leaves "
               "may be written");
    return s_->values;
  }

  T value() const {
    ATAC_CHECK(s_->values.size() == 1,
               "tensor: value() on non-scalar of shape " << shape_str(s_->shape));
    return s_->values[0];
  }

  // Multi-index read, mostly for tests.
  T at(std::initializer_list<std::size_t> idx) const {
    ATAC_CHECK(idx.size() == s_->shape.size(),
               "tensor: at() rank mismatch for shape " << shape_str(s_->shape));
    std::size_t flat = 0, k = 0;
    for (auto i : idx) {
      flat = flat * s_->shape[k] + i;
      ++k;
    }
    return s_->values[flat];
  }

  bool requires_grad() const { return s_->requires_grad; }

  Tensor& set_requires_grad(bool b) {
    ATAC_CHECK(s_->node < 0, "tensor: requires_grad can only be set on leaves");
    s_->requires_grad = b;
    return *this;
  }

  bool on_tape() const { return s_->node >= 0; }

  // Empty when no gradient has been accumulated.
  const std::vector<T>& grad() const { return s_->grad; }

  void zero_grad() { s_->grad.clear(); }

  bool same_storage(const Tensor& o) const { return s_ == o.s_; }

  bool all_finite() const {
    for (T v : s_->values)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::shared_ptr<TensorStorage<T>> storage() const { return s_; }

 private:
  explicit Tensor(std::shared_ptr<TensorStorage<T>> s) : s_(std::move(s)) {}

  std::shared_ptr<TensorStorage<T>> s_;

  friend class Tape<T>;
};

namespace detail {

template <typename T>
std::vector<T>& grad_of(const std::shared_ptr<TensorStorage<T>>& s) {
  if (s->grad.empty()) s->grad.assign(s->values.size(), T(0));
  return s->grad;
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!finite_checks()) return;
  if (!t.all_finite())
    throw std::runtime_error(std::string(op) +
                             ": non-finite value in op output (NaN/Inf error state)");
}

}  // namespace detail

// Wengert list. Nodes are recorded in execution order; backward replays the
// exact reverse order. One tape per thread.
template <typename T>
class Tape {
 public:
  static Tape& active() {
    static thread_local Tape t;
    return t;
  }

  bool recording() const { return disable_ == 0; }

  std::size_t size() const { return nodes_.size(); }

  std::int64_t record(std::shared_ptr<TensorStorage<T>> out,
                      std::function<void()> backward) {
    auto idx = static_cast<std::int64_t>(nodes_.size());
    out->requires_grad = true;
    out->node = idx;
    nodes_.push_back(Node{std::move(out), std::move(backward)});
    return idx;
  }

  // Populates grad for every requires_grad leaf reachable from loss. Repeated
  // calls without zero_grad accumulate into leaf gradients; intermediate
  // gradient state is reset on each call.
  void backward(const Tensor<T>& loss) {
    ATAC_CHECK(loss.defined() && loss.size() == 1,
               "backward: loss must be a scalar tensor");
    ATAC_CHECK(loss.storage()->node >= 0,
               "backward: loss is detached from the graph");
    auto last = loss.storage()->node;
    for (std::int64_t i = 0; i <= last; ++i) nodes_[i].out->grad.clear();
    detail::grad_of(loss.storage())[0] = T(1);
    for (std::int64_t i = last; i >= 0; --i) {
      if (nodes_[i].out->grad.empty()) continue;  // does not influence the loss
      nodes_[i].back();
    }
  }

  // Drops all recorded nodes and their gradient state. Leaf values and leaf
  // gradients are untouched.
  void clear() {
    for (auto& n : nodes_) {
      n.out->node = -1;
      n.out->requires_grad = false;
      n.out->grad.clear();
    }
    nodes_.clear();
  }

 private:
  struct Node {
    std::shared_ptr<TensorStorage<T>> out;
    std::function<void()> back;  // captures shared input storage, keeping it alive
  };

  std::vector<Node> nodes_;
  int disable_ = 0;

  template <typename U>
  friend class NoGradGuard;
};

// Suspends recording on this thread's tape for the guard's lifetime.
template <typename T>
class NoGradGuard {
 public:
  NoGradGuard() { ++Tape<T>::active().disable_; }
  ~NoGradGuard() { --Tape<T>::active().disable_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>::active().backward(loss);
}

}  // namespace atac
