#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "gridner/error.hpp"
#include "gridner/rng.hpp"

namespace gridner::diff {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Flat row-major tensor. Values are immutable after the creating op returns;
// only the grad buffer is written afterwards (by backward rules).
template <typename S>
struct TensorImpl {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated lazily by ensure_grad()
  bool requires_grad = false;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  int64_t dim(size_t i) const { return shape[i]; }
  size_t ndim() const { return shape.size(); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), S(0));
  }
};

template <typename S>
using Tensor = std::shared_ptr<TensorImpl<S>>;

// Runtime switch for forward-value finiteness checks (NaN/Inf scan after
// every op). Tests turn it on; training leaves it off.
inline bool& debug_checks() {
  static bool on = false;
  return on;
}

namespace testing {
// Gradient-fault hook for the gradcheck negative control: scales the GELU
// backward rule. 1.0 means healthy.
inline double& gelu_grad_fault() {
  static double f = 1.0;
  return f;
}
}  // namespace testing

template <typename S>
void check_finite(const char* op, const Tensor<S>& t) {
  if (!debug_checks()) return;
  for (S v : t->value) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw Error(std::string(op) + ": non-finite value in forward output");
    }
  }
}

// Ordered list of backward rules. Ops execute eagerly and append their rule,
// so tape order is a topological order of the computation by construction.
// backward() resets the transient grads of recorded op outputs, seeds the
// loss grad with 1, then replays the rules in reverse, accumulating (+=)
// into grads; leaves (parameters) keep accumulating across calls.
template <typename S>
class Tape {
 public:
  void record(const Tensor<S>& out, std::function<void()> rule) {
    if (recording_) {
      outputs_.push_back(out);
      rules_.push_back(std::move(rule));
    }
  }

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  size_t size() const { return rules_.size(); }
  void clear() {
    rules_.clear();
    outputs_.clear();
  }

  void backward(const Tensor<S>& loss) {
    if (loss->numel() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_str(loss->shape));
    }
    for (auto& out : outputs_) out->zero_grad();
    loss->ensure_grad();
    loss->grad[0] = S(1);
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> rules_;
  std::vector<Tensor<S>> outputs_;
  bool recording_ = true;
};

// Pauses rule recording for the lifetime of the guard (pure inference).
template <typename S>
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape<S>& tape) : tape_(tape), prev_(tape.recording()) {
    tape_.set_recording(false);
  }
  ~NoGradGuard() { tape_.set_recording(prev_); }

 private:
  Tape<S>& tape_;
  bool prev_;
};

namespace detail {
inline void validate_shape(const Shape& shape) {
  for (int64_t d : shape) {
    if (d < 1) {
      throw ShapeError("create: dimension sizes must be >= 1, got " +
                       shape_str(shape));
    }
  }
}

template <typename S>
Tensor<S> alloc(Shape shape, bool requires_grad) {
  auto t = std::make_shared<TensorImpl<S>>();
  t->shape = std::move(shape);
  t->value.assign(static_cast<size_t>(shape_numel(t->shape)), S(0));
  t->requires_grad = requires_grad;
  return t;
}
}  // namespace detail

// Module-level generator used by the random factories when no stream is
// passed explicitly. Reseed with seed_default_rng().
inline Rng& default_rng() {
  static Rng rng(0);
  return rng;
}

inline void seed_default_rng(uint64_t seed) { default_rng() = Rng(seed); }

template <typename S>
Tensor<S> zeros(Shape shape, bool requires_grad = false) {
  detail::validate_shape(shape);
  return detail::alloc<S>(std::move(shape), requires_grad);
}

template <typename S>
Tensor<S> full(Shape shape, double c, bool requires_grad = false) {
  detail::validate_shape(shape);
  auto t = detail::alloc<S>(std::move(shape), requires_grad);
  std::fill(t->value.begin(), t->value.end(), static_cast<S>(c));
  return t;
}

template <typename S>
Tensor<S> ones(Shape shape, bool requires_grad = false) {
  return full<S>(std::move(shape), 1.0, requires_grad);
}

template <typename S>
Tensor<S> uniform(Shape shape, double a, double b, Rng& rng,
                  bool requires_grad = false) {
  detail::validate_shape(shape);
  auto t = detail::alloc<S>(std::move(shape), requires_grad);
  for (auto& v : t->value) v = static_cast<S>(rng.uniform(a, b));
  return t;
}

template <typename S>
Tensor<S> normal(Shape shape, double mean, double std, Rng& rng,
                 bool requires_grad = false) {
  detail::validate_shape(shape);
  auto t = detail::alloc<S>(std::move(shape), requires_grad);
  for (auto& v : t->value) v = static_cast<S>(rng.normal(mean, std));
  return t;
}

// Xavier/Glorot: std = sqrt(2/(fan_in+fan_out)). For rank >= 2 the fans are
// numel/last and numel/second-to-last, which covers both [in,out] matrices
// and [kh,kw,cin,cout] kernels; rank-1 uses the length for both fans.
template <typename S>
Tensor<S> xavier(Shape shape, Rng& rng, bool requires_grad = false) {
  detail::validate_shape(shape);
  const int64_t n = shape_numel(shape);
  double fan_in, fan_out;
  if (shape.size() >= 2) {
    fan_in = static_cast<double>(n / shape.back());
    fan_out = static_cast<double>(n / shape[shape.size() - 2]);
  } else {
    fan_in = fan_out = static_cast<double>(n);
  }
  const double std = std::sqrt(2.0 / (fan_in + fan_out));
  return normal<S>(std::move(shape), 0.0, std, rng, requires_grad);
}

template <typename S>
Tensor<S> uniform(Shape shape, double a, double b, bool requires_grad = false) {
  return uniform<S>(std::move(shape), a, b, default_rng(), requires_grad);
}

template <typename S>
Tensor<S> normal(Shape shape, double mean, double std,
                 bool requires_grad = false) {
  return normal<S>(std::move(shape), mean, std, default_rng(), requires_grad);
}

template <typename S>
Tensor<S> xavier(Shape shape, bool requires_grad = false) {
  return xavier<S>(std::move(shape), default_rng(), requires_grad);
}

template <typename S>
Tensor<S> from_values(Shape shape, const std::vector<double>& values,
                      bool requires_grad = false) {
  detail::validate_shape(shape);
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("from_values: " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto t = detail::alloc<S>(std::move(shape), requires_grad);
  for (size_t i = 0; i < values.size(); ++i)
    t->value[i] = static_cast<S>(values[i]);
  return t;
}

}  // namespace gridner::diff
