#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "gridner/tensor.hpp"

// Reverse-mode ops. Each op computes eagerly, then (when recording and some
// input requires grad) appends a backward rule to the tape. Gradients
// accumulate with += so fan-out sums naturally.
//
// Broadcasting is deliberately restricted to bias-vector-over-last-axis in
// add(); every other op demands exact shapes.

namespace gridner::diff {

namespace detail {

template <typename S>
bool want_grad(const Tape<S>& tape,
               std::initializer_list<const Tensor<S>*> inputs) {
  if (!tape.recording()) return false;
  for (const Tensor<S>* t : inputs)
    if ((*t)->requires_grad) return true;
  return false;
}

// out[m,n] += a[m,k] * b[k,n]
template <typename S>
void mm_acc(S* out, const S* a, const S* b, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* orow = out + i * n;
    for (int64_t l = 0; l < k; ++l) {
      const S av = arow[l];
      if (av == S(0)) continue;
      const S* brow = b + l * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[m,p] += a[m,n] * b[p,n]^T
template <typename S>
void mm_acc_nt(S* out, const S* a, const S* b, int64_t m, int64_t n,
               int64_t p) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * n;
    S* orow = out + i * p;
    for (int64_t l = 0; l < p; ++l) {
      const S* brow = b + l * n;
      S acc = S(0);
      for (int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      orow[l] += acc;
    }
  }
}

// out[k,n] += a[m,k]^T * b[m,n]
template <typename S>
void mm_acc_tn(S* out, const S* a, const S* b, int64_t m, int64_t k,
               int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    const S* brow = b + i * n;
    for (int64_t l = 0; l < k; ++l) {
      const S av = arow[l];
      if (av == S(0)) continue;
      S* orow = out + l * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

inline void axis_extents(const Shape& shape, size_t axis, int64_t* outer,
                         int64_t* k, int64_t* inner) {
  *outer = 1;
  *inner = 1;
  for (size_t i = 0; i < axis; ++i) *outer *= shape[i];
  *k = shape[axis];
  for (size_t i = axis + 1; i < shape.size(); ++i) *inner *= shape[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  const bool same = a->shape == b->shape;
  const bool bias = !same && b->ndim() == 1 && !a->shape.empty() &&
                    b->shape[0] == a->shape.back();
  if (!same && !bias) {
    throw ShapeError("add: incompatible shapes " + shape_str(a->shape) +
                     " vs " + shape_str(b->shape));
  }
  auto out = detail::alloc<S>(a->shape, detail::want_grad(tape, {&a, &b}));
  const int64_t n = a->numel();
  if (same) {
    for (int64_t i = 0; i < n; ++i) out->value[i] = a->value[i] + b->value[i];
  } else {
    const int64_t d = b->shape[0];
    for (int64_t i = 0; i < n; ++i)
      out->value[i] = a->value[i] + b->value[i % d];
  }
  check_finite("add", out);
  if (out->requires_grad) {
    tape.record(out, [a, b, out, same]() {
      if (out->grad.empty()) return;
      const int64_t n = out->numel();
      if (a->requires_grad) {
        a->ensure_grad();
        for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        if (same) {
          for (int64_t i = 0; i < n; ++i) b->grad[i] += out->grad[i];
        } else {
          const int64_t d = b->shape[0];
          for (int64_t i = 0; i < n; ++i) b->grad[i % d] += out->grad[i];
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  if (a->shape != b->shape) {
    throw ShapeError("mul: shapes must match exactly, got " +
                     shape_str(a->shape) + " vs " + shape_str(b->shape));
  }
  auto out = detail::alloc<S>(a->shape, detail::want_grad(tape, {&a, &b}));
  const int64_t n = a->numel();
  for (int64_t i = 0; i < n; ++i) out->value[i] = a->value[i] * b->value[i];
  check_finite("mul", out);
  if (out->requires_grad) {
    tape.record(out, [a, b, out]() {
      if (out->grad.empty()) return;
      const int64_t n = out->numel();
      if (a->requires_grad) {
        a->ensure_grad();
        for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * b->value[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (int64_t i = 0; i < n; ++i) b->grad[i] += out->grad[i] * a->value[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> scale(Tape<S>& tape, const Tensor<S>& a, double c) {
  auto out = detail::alloc<S>(a->shape, detail::want_grad(tape, {&a}));
  const S sc = static_cast<S>(c);
  const int64_t n = a->numel();
  for (int64_t i = 0; i < n; ++i) out->value[i] = a->value[i] * sc;
  check_finite("scale", out);
  if (out->requires_grad) {
    tape.record(out, [a, out, sc]() {
      if (out->grad.empty()) return;
      a->ensure_grad();
      const int64_t n = out->numel();
      for (int64_t i = 0; i < n; ++i) a->grad[i] += out->grad[i] * sc;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> concat(Tape<S>& tape, const std::vector<Tensor<S>>& ts,
                 size_t axis) {
  if (ts.empty()) throw ShapeError("concat: empty input list");
  const Shape& ref = ts[0]->shape;
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range");
  int64_t axis_total = 0;
  for (const auto& t : ts) {
    if (t->ndim() != ref.size())
      throw ShapeError("concat: rank mismatch");
    for (size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && t->shape[i] != ref[i]) {
        throw ShapeError("concat: non-axis dims differ, " + shape_str(ref) +
                         " vs " + shape_str(t->shape));
      }
    }
    axis_total += t->shape[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = axis_total;

  bool want = false;
  if (tape.recording()) {
    for (const auto& t : ts) want = want || t->requires_grad;
  }
  auto out = detail::alloc<S>(out_shape, want);

  int64_t outer, k_unused, inner;
  detail::axis_extents(out_shape, axis, &outer, &k_unused, &inner);
  const int64_t out_row = axis_total * inner;
  int64_t offset = 0;
  for (const auto& t : ts) {
    const int64_t block = t->shape[axis] * inner;
    for (int64_t o = 0; o < outer; ++o) {
      std::copy_n(t->value.data() + o * block, block,
                  out->value.data() + o * out_row + offset);
    }
    offset += block;
  }
  check_finite("concat", out);
  if (out->requires_grad) {
    tape.record(out, [ts, out, axis, outer, inner, out_row]() {
      if (out->grad.empty()) return;
      int64_t offset = 0;
      for (const auto& t : ts) {
        const int64_t block = t->shape[axis] * inner;
        if (t->requires_grad) {
          t->ensure_grad();
          for (int64_t o = 0; o < outer; ++o) {
            const S* g = out->grad.data() + o * out_row + offset;
            S* tg = t->grad.data() + o * block;
            for (int64_t i = 0; i < block; ++i) tg[i] += g[i];
          }
        }
        offset += block;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> slice(Tape<S>& tape, const Tensor<S>& t, size_t axis, int64_t start,
                int64_t len) {
  if (axis >= t->ndim()) throw ShapeError("slice: axis out of range");
  if (start < 0 || len < 1 || start + len > t->shape[axis]) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of bounds for axis " +
                     std::to_string(axis) + " of " + shape_str(t->shape));
  }
  Shape out_shape = t->shape;
  out_shape[axis] = len;
  auto out = detail::alloc<S>(out_shape, detail::want_grad(tape, {&t}));

  int64_t outer, k, inner;
  detail::axis_extents(t->shape, axis, &outer, &k, &inner);
  const int64_t in_row = k * inner;
  const int64_t out_row = len * inner;
  for (int64_t o = 0; o < outer; ++o) {
    std::copy_n(t->value.data() + o * in_row + start * inner, out_row,
                out->value.data() + o * out_row);
  }
  if (out->requires_grad) {
    tape.record(out, [t, out, start, outer, inner, in_row, out_row]() {
      if (out->grad.empty()) return;
      t->ensure_grad();
      for (int64_t o = 0; o < outer; ++o) {
        const S* g = out->grad.data() + o * out_row;
        S* tg = t->grad.data() + o * in_row + start * inner;
        for (int64_t i = 0; i < out_row; ++i) tg[i] += g[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> reshape(Tape<S>& tape, const Tensor<S>& t, Shape new_shape) {
  if (shape_numel(new_shape) != t->numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(t->shape) + " as " +
                     shape_str(new_shape));
  }
  auto out = detail::alloc<S>(std::move(new_shape),
                              detail::want_grad(tape, {&t}));
  out->value = t->value;
  if (out->requires_grad) {
    tape.record(out, [t, out]() {
      if (out->grad.empty()) return;
      t->ensure_grad();
      const int64_t n = t->numel();
      for (int64_t i = 0; i < n; ++i) t->grad[i] += out->grad[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> permute(Tape<S>& tape, const Tensor<S>& t,
                  const std::vector<size_t>& perm) {
  const size_t nd = t->ndim();
  if (perm.size() != nd) throw ShapeError("permute: perm rank mismatch");
  std::vector<bool> seen(nd, false);
  for (size_t p : perm) {
    if (p >= nd || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(nd);
  for (size_t i = 0; i < nd; ++i) out_shape[i] = t->shape[perm[i]];

  std::vector<int64_t> in_strides(nd, 1);
  for (size_t i = nd; i-- > 1;)
    in_strides[i - 1] = in_strides[i] * t->shape[i];
  std::vector<int64_t> map_strides(nd);
  for (size_t i = 0; i < nd; ++i) map_strides[i] = in_strides[perm[i]];

  auto out = detail::alloc<S>(out_shape, detail::want_grad(tape, {&t}));
  const int64_t n = t->numel();
  std::vector<int64_t> src(static_cast<size_t>(n));
  {
    std::vector<int64_t> idx(nd, 0);
    for (int64_t o = 0; o < n; ++o) {
      int64_t s = 0;
      for (size_t i = 0; i < nd; ++i) s += idx[i] * map_strides[i];
      src[static_cast<size_t>(o)] = s;
      out->value[o] = t->value[s];
      for (size_t i = nd; i-- > 0;) {
        if (++idx[i] < out_shape[i]) break;
        idx[i] = 0;
      }
    }
  }
  if (out->requires_grad) {
    tape.record(out, [t, out, src = std::move(src)]() {
      if (out->grad.empty()) return;
      t->ensure_grad();
      const int64_t n = out->numel();
      for (int64_t o = 0; o < n; ++o)
        t->grad[src[static_cast<size_t>(o)]] += out->grad[o];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  if (a->ndim() != 2 || b->ndim() != 2 || a->shape[1] != b->shape[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a->shape) +
                     " x " + shape_str(b->shape));
  }
  const int64_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
  auto out = detail::alloc<S>({m, n}, detail::want_grad(tape, {&a, &b}));
  detail::mm_acc(out->value.data(), a->value.data(), b->value.data(), m, k, n);
  check_finite("matmul", out);
  if (out->requires_grad) {
    tape.record(out, [a, b, out, m, k, n]() {
      if (out->grad.empty()) return;
      if (a->requires_grad) {
        a->ensure_grad();
        detail::mm_acc_nt(a->grad.data(), out->grad.data(), b->value.data(), m,
                          n, k);
      }
      if (b->requires_grad) {
        b->ensure_grad();
        detail::mm_acc_tn(b->grad.data(), a->value.data(), out->grad.data(), m,
                          k, n);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// activations / normalization
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax(Tape<S>& tape, const Tensor<S>& t, size_t axis) {
  if (axis >= t->ndim()) throw ShapeError("softmax: axis out of range");
  int64_t outer, k, inner;
  detail::axis_extents(t->shape, axis, &outer, &k, &inner);
  auto out = detail::alloc<S>(t->shape, detail::want_grad(tape, {&t}));
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * k * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t c = 0; c < k; ++c)
        mx = std::max(mx, static_cast<double>(t->value[base + c * inner]));
      double sum = 0;
      for (int64_t c = 0; c < k; ++c) {
        const double e =
            std::exp(static_cast<double>(t->value[base + c * inner]) - mx);
        out->value[base + c * inner] = static_cast<S>(e);
        sum += e;
      }
      const double norm = 1.0 / sum;
      for (int64_t c = 0; c < k; ++c)
        out->value[base + c * inner] =
            static_cast<S>(static_cast<double>(out->value[base + c * inner]) *
                           norm);
    }
  }
  check_finite("softmax", out);
  if (out->requires_grad) {
    tape.record(out, [t, out, outer, k, inner]() {
      if (out->grad.empty()) return;
      t->ensure_grad();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * k * inner + in;
          S dot = S(0);
          for (int64_t c = 0; c < k; ++c) {
            const int64_t i = base + c * inner;
            dot += out->grad[i] * out->value[i];
          }
          for (int64_t c = 0; c < k; ++c) {
            const int64_t i = base + c * inner;
            t->grad[i] += out->value[i] * (out->grad[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

namespace detail {
inline double gauss_cdf(double x) {
  return 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
}
inline double gauss_pdf(double x) {
  return std::exp(-0.5 * x * x) * 0.39894228040143267794;
}
}  // namespace detail

// Exact GELU x * Phi(x) via the Gaussian CDF (not the tanh approximation).
template <typename S>
Tensor<S> gelu(Tape<S>& tape, const Tensor<S>& t) {
  auto out = detail::alloc<S>(t->shape, detail::want_grad(tape, {&t}));
  const int64_t n = t->numel();
  for (int64_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(t->value[i]);
    out->value[i] = static_cast<S>(x * detail::gauss_cdf(x));
  }
  check_finite("gelu", out);
  if (out->requires_grad) {
    tape.record(out, [t, out]() {
      if (out->grad.empty()) return;
      t->ensure_grad();
      const int64_t n = t->numel();
      const double fault = testing::gelu_grad_fault();
      for (int64_t i = 0; i < n; ++i) {
        const double x = static_cast<double>(t->value[i]);
        const double d = detail::gauss_cdf(x) + x * detail::gauss_pdf(x);
        t->grad[i] += static_cast<S>(static_cast<double>(out->grad[i]) * d *
                                     fault);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> sigmoid(Tape<S>& tape, const Tensor<S>& t) {
  auto out = detail::alloc<S>(t->shape, detail::want_grad(tape, {&t}));
  const int64_t n = t->numel();
  for (int64_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(t->value[i]);
    const double y =
        x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    out->value[i] = static_cast<S>(y);
  }
  check_finite("sigmoid", out);
  if (out->requires_grad) {
    tape.record(out, [t, out]() {
      if (out->grad.empty()) return;
      t->ensure_grad();
      const int64_t n = t->numel();
      for (int64_t i = 0; i < n; ++i) {
        const S y = out->value[i];
        t->grad[i] += out->grad[i] * y * (S(1) - y);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> tanh_op(Tape<S>& tape, const Tensor<S>& t) {
  auto out = detail::alloc<S>(t->shape, detail::want_grad(tape, {&t}));
  const int64_t n = t->numel();
  for (int64_t i = 0; i < n; ++i)
    out->value[i] = static_cast<S>(std::tanh(static_cast<double>(t->value[i])));
  check_finite("tanh", out);
  if (out->requires_grad) {
    tape.record(out, [t, out]() {
      if (out->grad.empty()) return;
      t->ensure_grad();
      const int64_t n = t->numel();
      for (int64_t i = 0; i < n; ++i) {
        const S y = out->value[i];
        t->grad[i] += out->grad[i] * (S(1) - y * y);
      }
    });
  }
  return out;
}

// Standardizes the last axis, then applies the elementwise affine
// gamma * xhat + beta. Variance is the biased (1/d) estimator.
template <typename S>
Tensor<S> layer_norm(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta, double eps = 1e-5) {
  if (eps <= 0) throw ConfigError("layer_norm: eps must be > 0");
  if (x->ndim() < 1) throw ShapeError("layer_norm: rank-0 input");
  const int64_t d = x->shape.back();
  if (gamma->shape != Shape{d} || beta->shape != Shape{d}) {
    throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(d) +
                     "]");
  }
  const int64_t rows = x->numel() / d;
  auto out =
      detail::alloc<S>(x->shape, detail::want_grad(tape, {&x, &gamma, &beta}));
  std::vector<S> xhat(static_cast<size_t>(x->numel()));
  std::vector<S> inv_std(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = x->value.data() + r * d;
    double mean = 0;
    for (int64_t c = 0; c < d; ++c) mean += static_cast<double>(xr[c]);
    mean /= static_cast<double>(d);
    double var = 0;
    for (int64_t c = 0; c < d; ++c) {
      const double diff = static_cast<double>(xr[c]) - mean;
      var += diff * diff;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = static_cast<S>(inv);
    for (int64_t c = 0; c < d; ++c) {
      const S h = static_cast<S>((static_cast<double>(xr[c]) - mean) * inv);
      xhat[static_cast<size_t>(r * d + c)] = h;
      out->value[r * d + c] = gamma->value[c] * h + beta->value[c];
    }
  }
  check_finite("layer_norm", out);
  if (out->requires_grad) {
    tape.record(out, [x, gamma, beta, out, d, rows, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)]() {
      if (out->grad.empty()) return;
      for (int64_t r = 0; r < rows; ++r) {
        const S* g = out->grad.data() + r * d;
        const S* h = xhat.data() + r * d;
        if (gamma->requires_grad) {
          gamma->ensure_grad();
          for (int64_t c = 0; c < d; ++c) gamma->grad[c] += g[c] * h[c];
        }
        if (beta->requires_grad) {
          beta->ensure_grad();
          for (int64_t c = 0; c < d; ++c) beta->grad[c] += g[c];
        }
        if (x->requires_grad) {
          x->ensure_grad();
          double m1 = 0, m2 = 0;
          for (int64_t c = 0; c < d; ++c) {
            const double gg = static_cast<double>(gamma->value[c]) *
                              static_cast<double>(g[c]);
            m1 += gg;
            m2 += gg * static_cast<double>(h[c]);
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          const double inv = static_cast<double>(inv_std[static_cast<size_t>(r)]);
          S* xg = x->grad.data() + r * d;
          for (int64_t c = 0; c < d; ++c) {
            const double gg = static_cast<double>(gamma->value[c]) *
                              static_cast<double>(g[c]);
            xg[c] += static_cast<S>(
                inv * (gg - m1 - static_cast<double>(h[c]) * m2));
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// embeddings
// ---------------------------------------------------------------------------

// Gathers rows of `table` ([v,d]) for each id; output shape is
// id_shape + [d]. Backward scatter-adds into the table grad so duplicate ids
// accumulate.
template <typename S>
Tensor<S> embedding_lookup(Tape<S>& tape, const Tensor<S>& table,
                           const std::vector<int64_t>& ids, Shape id_shape) {
  if (table->ndim() != 2) throw ShapeError("embedding_lookup: table not [v,d]");
  if (shape_numel(id_shape) != static_cast<int64_t>(ids.size())) {
    throw ShapeError("embedding_lookup: id_shape does not match id count");
  }
  const int64_t v = table->shape[0], d = table->shape[1];
  for (int64_t id : ids) {
    if (id < 0 || id >= v) {
      throw IndexError("embedding_lookup: id " + std::to_string(id) +
                       " out of range [0," + std::to_string(v) + ")");
    }
  }
  Shape out_shape = id_shape;
  out_shape.push_back(d);
  auto out = std::make_shared<TensorImpl<S>>();
  out->shape = std::move(out_shape);
  out->value.resize(ids.size() * static_cast<size_t>(d));
  out->requires_grad = detail::want_grad(tape, {&table});
  for (size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(table->value.data() + ids[i] * d, d,
                out->value.data() + static_cast<int64_t>(i) * d);
  }
  if (out->requires_grad) {
    tape.record(out, [table, out, ids, d]() {
      if (out->grad.empty()) return;
      table->ensure_grad();
      for (size_t i = 0; i < ids.size(); ++i) {
        const S* g = out->grad.data() + static_cast<int64_t>(i) * d;
        S* tg = table->grad.data() + ids[i] * d;
        for (int64_t c = 0; c < d; ++c) tg[c] += g[c];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// bilinear forms
// ---------------------------------------------------------------------------

// s_c = x^T U[:,c,:] z for one (x, z) pair.
template <typename S>
Tensor<S> bilinear(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& u,
                   const Tensor<S>& z) {
  if (x->ndim() != 1 || z->ndim() != 1 || u->ndim() != 3 ||
      u->shape[0] != x->shape[0] || u->shape[2] != z->shape[0]) {
    throw ShapeError("bilinear: expected x[d1], U[d1,C,d2], z[d2], got " +
                     shape_str(x->shape) + ", " + shape_str(u->shape) + ", " +
                     shape_str(z->shape));
  }
  const int64_t d1 = x->shape[0], C = u->shape[1], d2 = z->shape[0];
  auto out = detail::alloc<S>({C}, detail::want_grad(tape, {&x, &u, &z}));
  for (int64_t c = 0; c < C; ++c) {
    double acc = 0;
    for (int64_t a = 0; a < d1; ++a) {
      const S* urow = u->value.data() + (a * C + c) * d2;
      double inner = 0;
      for (int64_t b = 0; b < d2; ++b)
        inner += static_cast<double>(urow[b]) * static_cast<double>(z->value[b]);
      acc += static_cast<double>(x->value[a]) * inner;
    }
    out->value[c] = static_cast<S>(acc);
  }
  check_finite("bilinear", out);
  if (out->requires_grad) {
    tape.record(out, [x, u, z, out, d1, C, d2]() {
      if (out->grad.empty()) return;
      if (x->requires_grad) x->ensure_grad();
      if (u->requires_grad) u->ensure_grad();
      if (z->requires_grad) z->ensure_grad();
      for (int64_t c = 0; c < C; ++c) {
        const S g = out->grad[c];
        if (g == S(0)) continue;
        for (int64_t a = 0; a < d1; ++a) {
          const S* urow = u->value.data() + (a * C + c) * d2;
          if (x->requires_grad) {
            S inner = S(0);
            for (int64_t b = 0; b < d2; ++b) inner += urow[b] * z->value[b];
            x->grad[a] += g * inner;
          }
          if (u->requires_grad) {
            S* ug = u->grad.data() + (a * C + c) * d2;
            for (int64_t b = 0; b < d2; ++b)
              ug[b] += g * x->value[a] * z->value[b];
          }
          if (z->requires_grad) {
            for (int64_t b = 0; b < d2; ++b)
              z->grad[b] += g * x->value[a] * urow[b];
          }
        }
      }
    });
  }
  return out;
}

// All-pairs biaffine scores: out[i,j,c] = Xs[i]^T U[:,c,:] Xe[j].
template <typename S>
Tensor<S> pairwise_bilinear(Tape<S>& tape, const Tensor<S>& xs,
                            const Tensor<S>& u, const Tensor<S>& xe) {
  if (xs->ndim() != 2 || xe->ndim() != 2 || u->ndim() != 3 ||
      u->shape[0] != xs->shape[1] || u->shape[2] != xe->shape[1] ||
      xs->shape[0] != xe->shape[0]) {
    throw ShapeError("pairwise_bilinear: expected Xs[N,d1], U[d1,C,d2], Xe[N,d2]");
  }
  const int64_t n = xs->shape[0], d1 = u->shape[0], C = u->shape[1],
                d2 = u->shape[2];
  // T[i,c,b] = sum_a Xs[i,a] U[a,c,b]
  std::vector<S> t(static_cast<size_t>(n * C * d2), S(0));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t a = 0; a < d1; ++a) {
      const S xv = xs->value[i * d1 + a];
      if (xv == S(0)) continue;
      const S* urow = u->value.data() + a * C * d2;
      S* trow = t.data() + i * C * d2;
      for (int64_t cb = 0; cb < C * d2; ++cb) trow[cb] += xv * urow[cb];
    }
  }
  auto out =
      detail::alloc<S>({n, n, C}, detail::want_grad(tape, {&xs, &u, &xe}));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      const S* ze = xe->value.data() + j * d2;
      S* orow = out->value.data() + (i * n + j) * C;
      const S* trow = t.data() + i * C * d2;
      for (int64_t c = 0; c < C; ++c) {
        S acc = S(0);
        const S* tc = trow + c * d2;
        for (int64_t b = 0; b < d2; ++b) acc += tc[b] * ze[b];
        orow[c] = acc;
      }
    }
  }
  check_finite("pairwise_bilinear", out);
  if (out->requires_grad) {
    tape.record(out, [xs, u, xe, out, t = std::move(t), n, d1, C, d2]() {
      if (out->grad.empty()) return;
      // dT[i,c,b] = sum_j g[i,j,c] Xe[j,b]
      std::vector<S> dt(static_cast<size_t>(n * C * d2), S(0));
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
          const S* g = out->grad.data() + (i * n + j) * C;
          const S* ze = xe->value.data() + j * d2;
          S* dtrow = dt.data() + i * C * d2;
          for (int64_t c = 0; c < C; ++c) {
            const S gv = g[c];
            if (gv == S(0)) continue;
            S* dtc = dtrow + c * d2;
            for (int64_t b = 0; b < d2; ++b) dtc[b] += gv * ze[b];
          }
        }
      }
      if (xe->requires_grad) {
        xe->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
          const S* trow = t.data() + i * C * d2;
          for (int64_t j = 0; j < n; ++j) {
            const S* g = out->grad.data() + (i * n + j) * C;
            S* zg = xe->grad.data() + j * d2;
            for (int64_t c = 0; c < C; ++c) {
              const S gv = g[c];
              if (gv == S(0)) continue;
              const S* tc = trow + c * d2;
              for (int64_t b = 0; b < d2; ++b) zg[b] += gv * tc[b];
            }
          }
        }
      }
      if (xs->requires_grad) {
        xs->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
          const S* dtrow = dt.data() + i * C * d2;
          for (int64_t a = 0; a < d1; ++a) {
            const S* urow = u->value.data() + a * C * d2;
            S acc = S(0);
            for (int64_t cb = 0; cb < C * d2; ++cb) acc += dtrow[cb] * urow[cb];
            xs->grad[i * d1 + a] += acc;
          }
        }
      }
      if (u->requires_grad) {
        u->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
          const S* dtrow = dt.data() + i * C * d2;
          for (int64_t a = 0; a < d1; ++a) {
            const S xv = xs->value[i * d1 + a];
            if (xv == S(0)) continue;
            S* ug = u->grad.data() + a * C * d2;
            for (int64_t cb = 0; cb < C * d2; ++cb) ug[cb] += xv * dtrow[cb];
          }
        }
      }
    });
  }
  return out;
}

// out[i,j,c] = A[i,c] + B[j,c] + bias[c]; the linear half of the biaffine
// scorer, W(x_i (+) x_j) + b, with W already folded into A and B.
template <typename S>
Tensor<S> pair_outer_add(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b,
                         const Tensor<S>& bias) {
  if (a->ndim() != 2 || b->shape != a->shape || bias->ndim() != 1 ||
      bias->shape[0] != a->shape[1]) {
    throw ShapeError("pair_outer_add: expected A[N,C], B[N,C], bias[C]");
  }
  const int64_t n = a->shape[0], C = a->shape[1];
  auto out =
      detail::alloc<S>({n, n, C}, detail::want_grad(tape, {&a, &b, &bias}));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      S* orow = out->value.data() + (i * n + j) * C;
      const S* ar = a->value.data() + i * C;
      const S* br = b->value.data() + j * C;
      for (int64_t c = 0; c < C; ++c) orow[c] = ar[c] + br[c] + bias->value[c];
    }
  }
  check_finite("pair_outer_add", out);
  if (out->requires_grad) {
    tape.record(out, [a, b, bias, out, n, C]() {
      if (out->grad.empty()) return;
      if (a->requires_grad) a->ensure_grad();
      if (b->requires_grad) b->ensure_grad();
      if (bias->requires_grad) bias->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
          const S* g = out->grad.data() + (i * n + j) * C;
          for (int64_t c = 0; c < C; ++c) {
            if (a->requires_grad) a->grad[i * C + c] += g[c];
            if (b->requires_grad) b->grad[j * C + c] += g[c];
            if (bias->requires_grad) bias->grad[c] += g[c];
          }
        }
      }
    });
  }
  return out;
}

// Conditioned grid affine: out[i,j,:] = gamma[i,:] * ln[j,:] + beta[i,:].
// Row i supplies the condition, row j the normalized content.
template <typename S>
Tensor<S> pair_affine(Tape<S>& tape, const Tensor<S>& ln,
                      const Tensor<S>& gamma, const Tensor<S>& beta) {
  if (ln->ndim() != 2 || gamma->shape != ln->shape ||
      beta->shape != ln->shape) {
    throw ShapeError("pair_affine: expected ln/gamma/beta all [N,d]");
  }
  const int64_t n = ln->shape[0], d = ln->shape[1];
  auto out =
      detail::alloc<S>({n, n, d}, detail::want_grad(tape, {&ln, &gamma, &beta}));
  for (int64_t i = 0; i < n; ++i) {
    const S* gr = gamma->value.data() + i * d;
    const S* br = beta->value.data() + i * d;
    for (int64_t j = 0; j < n; ++j) {
      const S* lr = ln->value.data() + j * d;
      S* orow = out->value.data() + (i * n + j) * d;
      for (int64_t c = 0; c < d; ++c) orow[c] = gr[c] * lr[c] + br[c];
    }
  }
  check_finite("pair_affine", out);
  if (out->requires_grad) {
    tape.record(out, [ln, gamma, beta, out, n, d]() {
      if (out->grad.empty()) return;
      if (ln->requires_grad) ln->ensure_grad();
      if (gamma->requires_grad) gamma->ensure_grad();
      if (beta->requires_grad) beta->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
          const S* g = out->grad.data() + (i * n + j) * d;
          for (int64_t c = 0; c < d; ++c) {
            if (gamma->requires_grad)
              gamma->grad[i * d + c] += g[c] * ln->value[j * d + c];
            if (ln->requires_grad)
              ln->grad[j * d + c] += g[c] * gamma->value[i * d + c];
            if (beta->requires_grad) beta->grad[i * d + c] += g[c];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// dilated convolution
// ---------------------------------------------------------------------------

// 3x3 dilated cross-correlation over an [H,W,cin] grid with zero padding of
// width = dilation, so the output stays [H,W,cout].
template <typename S>
Tensor<S> conv2d_dilated(Tape<S>& tape, const Tensor<S>& input,
                         const Tensor<S>& kernel, int64_t dilation,
                         const Tensor<S>& bias) {
  if (dilation <= 0) throw ConfigError("conv2d_dilated: dilation must be >= 1");
  if (input->ndim() != 3 || kernel->ndim() != 4 || kernel->shape[0] != 3 ||
      kernel->shape[1] != 3 || kernel->shape[2] != input->shape[2] ||
      bias->ndim() != 1 || bias->shape[0] != kernel->shape[3]) {
    throw ShapeError("conv2d_dilated: expected input[H,W,cin], kernel[3,3,cin,cout], bias[cout]");
  }
  const int64_t h = input->shape[0], w = input->shape[1],
                cin = input->shape[2], cout = kernel->shape[3];
  auto out = detail::alloc<S>({h, w, cout},
                              detail::want_grad(tape, {&input, &kernel, &bias}));
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      S* orow = out->value.data() + (y * w + x) * cout;
      for (int64_t co = 0; co < cout; ++co) orow[co] = bias->value[co];
      for (int64_t ky = 0; ky < 3; ++ky) {
        const int64_t iy = y + (ky - 1) * dilation;
        if (iy < 0 || iy >= h) continue;
        for (int64_t kx = 0; kx < 3; ++kx) {
          const int64_t ix = x + (kx - 1) * dilation;
          if (ix < 0 || ix >= w) continue;
          const S* irow = input->value.data() + (iy * w + ix) * cin;
          const S* krow = kernel->value.data() + (ky * 3 + kx) * cin * cout;
          for (int64_t ci = 0; ci < cin; ++ci) {
            const S iv = irow[ci];
            if (iv == S(0)) continue;
            const S* kc = krow + ci * cout;
            for (int64_t co = 0; co < cout; ++co) orow[co] += iv * kc[co];
          }
        }
      }
    }
  }
  check_finite("conv2d_dilated", out);
  if (out->requires_grad) {
    tape.record(out, [input, kernel, bias, out, dilation, h, w, cin, cout]() {
      if (out->grad.empty()) return;
      if (input->requires_grad) input->ensure_grad();
      if (kernel->requires_grad) kernel->ensure_grad();
      if (bias->requires_grad) bias->ensure_grad();
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
          const S* g = out->grad.data() + (y * w + x) * cout;
          if (bias->requires_grad) {
            for (int64_t co = 0; co < cout; ++co) bias->grad[co] += g[co];
          }
          for (int64_t ky = 0; ky < 3; ++ky) {
            const int64_t iy = y + (ky - 1) * dilation;
            if (iy < 0 || iy >= h) continue;
            for (int64_t kx = 0; kx < 3; ++kx) {
              const int64_t ix = x + (kx - 1) * dilation;
              if (ix < 0 || ix >= w) continue;
              const int64_t ibase = (iy * w + ix) * cin;
              const int64_t kbase = (ky * 3 + kx) * cin * cout;
              for (int64_t ci = 0; ci < cin; ++ci) {
                const S* kc = kernel->value.data() + kbase + ci * cout;
                if (input->requires_grad) {
                  S acc = S(0);
                  for (int64_t co = 0; co < cout; ++co) acc += g[co] * kc[co];
                  input->grad[ibase + ci] += acc;
                }
                if (kernel->requires_grad) {
                  const S iv = input->value[ibase + ci];
                  if (iv == S(0)) continue;
                  S* kg = kernel->grad.data() + kbase + ci * cout;
                  for (int64_t co = 0; co < cout; ++co) kg[co] += iv * g[co];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions / loss
// ---------------------------------------------------------------------------

// out = sum_k w[k] * T_k. Used for weighted layer fusion.
template <typename S>
Tensor<S> weighted_sum(Tape<S>& tape, const std::vector<Tensor<S>>& ts,
                       const Tensor<S>& w) {
  if (ts.empty()) throw ShapeError("weighted_sum: empty input list");
  if (w->ndim() != 1 || w->shape[0] != static_cast<int64_t>(ts.size())) {
    throw ShapeError("weighted_sum: weight length must equal input count");
  }
  for (const auto& t : ts) {
    if (t->shape != ts[0]->shape)
      throw ShapeError("weighted_sum: input shapes differ");
  }
  bool want = tape.recording() && w->requires_grad;
  if (tape.recording()) {
    for (const auto& t : ts) want = want || t->requires_grad;
  }
  auto out = detail::alloc<S>(ts[0]->shape, want);
  const int64_t n = out->numel();
  for (size_t k = 0; k < ts.size(); ++k) {
    const S wk = w->value[k];
    const S* tv = ts[k]->value.data();
    for (int64_t i = 0; i < n; ++i) out->value[i] += wk * tv[i];
  }
  check_finite("weighted_sum", out);
  if (out->requires_grad) {
    tape.record(out, [ts, w, out, n]() {
      if (out->grad.empty()) return;
      for (size_t k = 0; k < ts.size(); ++k) {
        if (ts[k]->requires_grad) {
          ts[k]->ensure_grad();
          const S wk = w->value[k];
          S* tg = ts[k]->grad.data();
          for (int64_t i = 0; i < n; ++i) tg[i] += wk * out->grad[i];
        }
        if (w->requires_grad) {
          w->ensure_grad();
          S acc = S(0);
          const S* tv = ts[k]->value.data();
          for (int64_t i = 0; i < n; ++i) acc += tv[i] * out->grad[i];
          w->grad[k] += acc;
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> reduce_sum(Tape<S>& tape, const Tensor<S>& t) {
  auto out = detail::alloc<S>({1}, detail::want_grad(tape, {&t}));
  double acc = 0;
  for (S v : t->value) acc += static_cast<double>(v);
  out->value[0] = static_cast<S>(acc);
  check_finite("reduce_sum", out);
  if (out->requires_grad) {
    tape.record(out, [t, out]() {
      if (out->grad.empty()) return;
      t->ensure_grad();
      const S g = out->grad[0];
      const int64_t n = t->numel();
      for (int64_t i = 0; i < n; ++i) t->grad[i] += g;
    });
  }
  return out;
}

enum class LossDenom { kUnmaskedCount, kAllCells };

// -(1/D) sum_{mask} log(max(probs[cell, label], 1e-12)); D is the unmasked
// cell count by default, or the full cell count (the literal grid-size
// normalizer) when kAllCells is selected. Gradients at masked cells are
// exactly zero.
template <typename S>
Tensor<S> masked_cross_entropy(Tape<S>& tape, const Tensor<S>& probs,
                               const std::vector<int32_t>& labels,
                               const std::vector<uint8_t>& mask,
                               LossDenom denom = LossDenom::kUnmaskedCount) {
  if (probs->ndim() < 1) throw ShapeError("masked_cross_entropy: rank-0 probs");
  const int64_t C = probs->shape.back();
  const int64_t cells = probs->numel() / C;
  if (static_cast<int64_t>(labels.size()) != cells ||
      static_cast<int64_t>(mask.size()) != cells) {
    throw ShapeError("masked_cross_entropy: labels/mask must have one entry per cell");
  }
  int64_t count = 0;
  for (uint8_t m : mask) count += m ? 1 : 0;
  if (count == 0) throw Error("masked_cross_entropy: empty mask, no supervised cells");
  const double D = denom == LossDenom::kUnmaskedCount
                       ? static_cast<double>(count)
                       : static_cast<double>(cells);
  constexpr double kFloor = 1e-12;
  for (int32_t lab : labels) {
    if (lab < 0 || lab >= C) {
      throw IndexError("masked_cross_entropy: label " + std::to_string(lab) +
                       " out of range [0," + std::to_string(C) + ")");
    }
  }
  auto out = detail::alloc<S>({1}, detail::want_grad(tape, {&probs}));
  double acc = 0;
  for (int64_t i = 0; i < cells; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    const int32_t lab = labels[static_cast<size_t>(i)];
    acc -= std::log(
        std::max(static_cast<double>(probs->value[i * C + lab]), kFloor));
  }
  out->value[0] = static_cast<S>(acc / D);
  check_finite("masked_cross_entropy", out);
  if (out->requires_grad) {
    tape.record(out, [probs, out, labels, mask, cells, C, D]() {
      if (out->grad.empty()) return;
      probs->ensure_grad();
      const double g = static_cast<double>(out->grad[0]);
      for (int64_t i = 0; i < cells; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        const int64_t idx = i * C + labels[static_cast<size_t>(i)];
        const double p = static_cast<double>(probs->value[idx]);
        if (p > kFloor) {
          probs->grad[idx] += static_cast<S>(-g / (D * p));
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// BiLSTM (composed from primitive ops; backward comes from the tape)
// ---------------------------------------------------------------------------

template <typename S>
struct LstmDirParams {
  Tensor<S> w_ih;  // [d_in, 4H], gate order i,f,g,o
  Tensor<S> w_hh;  // [H, 4H]
  Tensor<S> b;     // [4H]
};

template <typename S>
struct BiLstmParams {
  LstmDirParams<S> fwd;
  LstmDirParams<S> bwd;
};

namespace detail {
template <typename S>
std::vector<Tensor<S>> lstm_direction(Tape<S>& tape,
                                      const std::vector<Tensor<S>>& xs,
                                      const LstmDirParams<S>& p,
                                      bool reverse) {
  const int64_t h_dim = p.w_hh->shape[0];
  const int64_t n = static_cast<int64_t>(xs.size());
  Tensor<S> h = zeros<S>({1, h_dim});
  Tensor<S> c = zeros<S>({1, h_dim});
  std::vector<Tensor<S>> outs(static_cast<size_t>(n));
  for (int64_t step = 0; step < n; ++step) {
    const int64_t t = reverse ? n - 1 - step : step;
    auto gates = add(tape, add(tape, matmul(tape, xs[static_cast<size_t>(t)], p.w_ih),
                               matmul(tape, h, p.w_hh)),
                     p.b);
    auto ig = sigmoid(tape, slice(tape, gates, 1, 0, h_dim));
    auto fg = sigmoid(tape, slice(tape, gates, 1, h_dim, h_dim));
    auto gg = tanh_op(tape, slice(tape, gates, 1, 2 * h_dim, h_dim));
    auto og = sigmoid(tape, slice(tape, gates, 1, 3 * h_dim, h_dim));
    c = add(tape, mul(tape, fg, c), mul(tape, ig, gg));
    h = mul(tape, og, tanh_op(tape, c));
    outs[static_cast<size_t>(t)] = h;
  }
  return outs;
}
}  // namespace detail

// Single-layer BiLSTM with zero initial states; per-position concatenation
// of the two directions' hidden states -> [N, 2H].
template <typename S>
Tensor<S> bilstm(Tape<S>& tape, const Tensor<S>& seq,
                 const BiLstmParams<S>& params) {
  if (seq->ndim() != 2) throw ShapeError("bilstm: expected seq [N,d_in]");
  const int64_t n = seq->shape[0];
  std::vector<Tensor<S>> xs(static_cast<size_t>(n));
  for (int64_t t = 0; t < n; ++t)
    xs[static_cast<size_t>(t)] = slice(tape, seq, 0, t, 1);
  auto fwd = detail::lstm_direction(tape, xs, params.fwd, false);
  auto bwd = detail::lstm_direction(tape, xs, params.bwd, true);
  std::vector<Tensor<S>> rows(static_cast<size_t>(n));
  for (int64_t t = 0; t < n; ++t) {
    rows[static_cast<size_t>(t)] =
        concat(tape, {fwd[static_cast<size_t>(t)], bwd[static_cast<size_t>(t)]}, 1);
  }
  return concat(tape, rows, 0);
}

}  // namespace gridner::diff
