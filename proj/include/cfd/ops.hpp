// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operators over cfd::Tensor. Reductions accumulate in double
// regardless of the tensor scalar type.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cfd/tensor.hpp"

namespace cfd {

enum class EwOp { kAdd, kSub, kMul, kDiv, kRelu, kSigmoid, kSqrt, kReciprocal, kNeg, kExp, kLog };
enum class PoolKind { kAvg, kMax, kGem };

namespace detail {

template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& x, const char* op, F f, D df) {
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  return make_result<T>(x.shape(), std::move(out), op, {x}, [df](Node<T>& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto gi = in.ensure_grad();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i] * df(in.data[i], self.data[i]);
  });
}

// da/db give the partial derivative of the output wrt each operand as a
// function of (a, b).
template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f, DA da, DB db) {
  if (a.shape() == b.shape()) {
    const auto as = a.data();
    const auto bs = b.data();
    std::vector<T> out(as.size());
    for (std::size_t i = 0; i < as.size(); ++i) out[i] = f(as[i], bs[i]);
    return make_result<T>(a.shape(), std::move(out), op, {a, b}, [da, db](Node<T>& self) {
      auto& na = *self.inputs[0];
      auto& nb = *self.inputs[1];
      if (na.requires_grad) {
        auto g = na.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * da(na.data[i], nb.data[i]);
      }
      if (nb.requires_grad) {
        auto g = nb.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * db(na.data[i], nb.data[i]);
      }
    });
  }
  Shape os = broadcast_shape(a.shape(), b.shape());
  auto sa = broadcast_strides(a.shape(), os);
  auto sb = broadcast_strides(b.shape(), os);
  const auto as = a.data();
  const auto bs = b.data();
  std::vector<T> out(numel_of(os));
  for_each_broadcast(os, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = f(as[i], bs[j]); });
  return make_result<T>(os, std::move(out), op, {a, b}, [da, db, os, sa, sb](Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    const T* g = self.grad.data();
    const T* av = na.data.data();
    const T* bv = nb.data.data();
    if (na.requires_grad) {
      T* ga = na.ensure_grad().data();
      for_each_broadcast(os, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { ga[i] += g[o] * da(av[i], bv[j]); });
    }
    if (nb.requires_grad) {
      T* gb = nb.ensure_grad().data();
      for_each_broadcast(os, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { gb[j] += g[o] * db(av[i], bv[j]); });
    }
  });
}

template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

inline Shape keep_shape(const Shape& s, const std::vector<std::size_t>& axes) {
  Shape out = s;
  for (auto a : axes) out[a] = 1;
  return out;
}

inline std::vector<std::size_t> normalize_axes(const Shape& s, std::vector<std::size_t> axes) {
  if (axes.empty()) throw ShapeError("empty axis set");
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (auto a : axes)
    if (a >= s.size()) throw ShapeError("axis " + std::to_string(a) + " out of range for " + to_string(s));
  return axes;
}

inline Shape squeeze_axes(const Shape& s, const std::vector<std::size_t>& axes) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (std::find(axes.begin(), axes.end(), i) == axes.end()) out.push_back(s[i]);
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
                        [](T, T) { return T(1); });
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
                        [](T, T) { return T(-1); });
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
                        [](T x, T) { return x; });
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
                        [](T x, T y) { return -x / (y * y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(x, "relu", [](T v) { return v > T(0) ? v : T(0); },
                       [](T v, T) { return v > T(0) ? T(1) : T(0); });
}
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(x, "sigmoid", [](T v) { return detail::stable_sigmoid(v); },
                       [](T, T y) { return y * (T(1) - y); });
}
template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  for (T v : x.data())
    if (v < T(0)) throw ValueError("sqrt of negative value");
  return detail::unary(x, "sqrt", [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}
template <typename T>
Tensor<T> reciprocal(const Tensor<T>& x) {
  return detail::unary(x, "reciprocal", [](T v) { return T(1) / v; }, [](T, T y) { return -y * y; });
}
template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return detail::unary(x, "neg", [](T v) { return -v; }, [](T, T) { return T(-1); });
}
template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}
template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary(x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
  return detail::unary(x, "mul_scalar", [c](T v) { return v * c; }, [c](T, T) { return c; });
}
/// Gradient is zero where the input was clamped.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T lo) {
  return detail::unary(x, "clamp_min", [lo](T v) { return v < lo ? lo : v; },
                       [lo](T v, T) { return v < lo ? T(0) : T(1); });
}
template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& x, T p) {
  return detail::unary(x, "pow_scalar", [p](T v) { return std::pow(v, p); },
                       [p](T v, T) { return p * std::pow(v, p - T(1)); });
}
/// 1 - x, the complement used by the attention splits.
template <typename T>
Tensor<T> one_minus(const Tensor<T>& x) {
  return detail::unary(x, "one_minus", [](T v) { return T(1) - v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> ew(EwOp op, const Tensor<T>& a) {
  switch (op) {
    case EwOp::kRelu: return relu(a);
    case EwOp::kSigmoid: return sigmoid(a);
    case EwOp::kSqrt: return sqrt(a);
    case EwOp::kReciprocal: return reciprocal(a);
    case EwOp::kNeg: return neg(a);
    case EwOp::kExp: return exp(a);
    case EwOp::kLog: return log(a);
    default: throw ValueError("binary op called with one argument");
  }
}
template <typename T>
Tensor<T> ew(EwOp op, const Tensor<T>& a, const Tensor<T>& b) {
  switch (op) {
    case EwOp::kAdd: return add(a, b);
    case EwOp::kSub: return sub(a, b);
    case EwOp::kMul: return mul(a, b);
    case EwOp::kDiv: return div(a, b);
    default: throw ValueError("unary op called with two arguments");
  }
}

// ---------------------------------------------------------------- shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  return make_result<T>(std::move(shape), x.to_vector(), "reshape", {x}, [](Node<T>& self) {
    auto& in = *self.inputs[0];
    auto g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Rows of x along axis 0 at the given indices (repeats allowed).
template <typename T>
Tensor<T> index_select0(const Tensor<T>& x, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw ShapeError("index_select0 with no indices");
  const std::size_t rows = x.dim(0);
  const std::size_t row = x.numel() / rows;
  for (auto i : idx)
    if (i >= rows) throw ShapeError("row index " + std::to_string(i) + " out of range");
  Shape s = x.shape();
  s[0] = idx.size();
  std::vector<T> out(idx.size() * row);
  const auto xs = x.data();
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(xs.begin() + idx[r] * row, row, out.begin() + r * row);
  return make_result<T>(std::move(s), std::move(out), "index_select0", {x}, [idx, row](Node<T>& self) {
    auto g = self.inputs[0]->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t k = 0; k < row; ++k) g[idx[r] * row + k] += self.grad[r * row + k];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& ts, std::size_t axis) {
  if (ts.empty()) throw ShapeError("concat of nothing");
  const Shape& ref = ts[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat axis out of range");
  Shape os = ref;
  os[axis] = 0;
  for (const auto& t : ts) {
    if (t.rank() != ref.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < ref.size(); ++d)
      if (d != axis && t.dim(d) != ref[d]) throw ShapeError("concat extent mismatch on axis " + std::to_string(d));
    os[axis] += t.dim(axis);
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  std::vector<std::size_t> inner(ts.size());
  std::size_t total_inner = 0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    inner[i] = ts[i].numel() / outer;
    total_inner += inner[i];
  }
  std::vector<T> out(outer * total_inner);
  std::size_t off = 0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto d = ts[i].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(d.begin() + o * inner[i], inner[i], out.begin() + o * total_inner + off);
    off += inner[i];
  }
  return make_result<T>(std::move(os), std::move(out), "concat", ts, [outer, inner, total_inner](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      auto& in = *self.inputs[i];
      if (in.requires_grad) {
        auto g = in.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t k = 0; k < inner[i]; ++k) g[o * inner[i] + k] += self.grad[o * total_inner + off + k];
      }
      off += inner[i];
    }
  });
}

/// Gathers individual elements by flat index into a 1-D tensor.
template <typename T>
Tensor<T> take(const Tensor<T>& x, const std::vector<std::size_t>& flat) {
  if (flat.empty()) throw ShapeError("take with no indices");
  std::vector<T> out(flat.size());
  const auto xs = x.data();
  for (std::size_t i = 0; i < flat.size(); ++i) {
    if (flat[i] >= xs.size()) throw ShapeError("take index out of range");
    out[i] = xs[flat[i]];
  }
  return make_result<T>({flat.size()}, std::move(out), "take", {x}, [flat](Node<T>& self) {
    auto g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < flat.size(); ++i) g[flat[i]] += self.grad[i];
  });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::vector<std::size_t> axes, bool keepdim = true) {
  axes = detail::normalize_axes(x.shape(), std::move(axes));
  const Shape ks = detail::keep_shape(x.shape(), axes);
  const auto si = detail::broadcast_strides(x.shape(), x.shape());
  const auto so = detail::broadcast_strides(ks, x.shape());
  std::vector<double> acc(numel_of(ks), 0.0);
  const auto xs = x.data();
  detail::for_each_broadcast(x.shape(), si, so, [&](std::size_t, std::size_t i, std::size_t o) { acc[o] += xs[i]; });
  std::vector<T> out(acc.begin(), acc.end());
  Shape os = keepdim ? ks : detail::squeeze_axes(x.shape(), axes);
  Shape xshape = x.shape();
  return make_result<T>(std::move(os), std::move(out), "sum", {x}, [xshape, si, so](Node<T>& self) {
    auto g = self.inputs[0]->ensure_grad();
    detail::for_each_broadcast(xshape, si, so, [&](std::size_t, std::size_t i, std::size_t o) { g[i] += self.grad[o]; });
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::vector<std::size_t> axes, bool keepdim = true) {
  axes = detail::normalize_axes(x.shape(), std::move(axes));
  std::size_t count = 1;
  for (auto a : axes) count *= x.dim(a);
  return mul_scalar(sum(x, axes, keepdim), T(1) / static_cast<T>(count));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return reshape(sum(x, axes, true), {1});
}
template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return mul_scalar(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

/// Max over axes; ties go to the lowest flat index.
template <typename T>
Tensor<T> max_reduce(const Tensor<T>& x, std::vector<std::size_t> axes, bool keepdim = true) {
  axes = detail::normalize_axes(x.shape(), std::move(axes));
  const Shape ks = detail::keep_shape(x.shape(), axes);
  const auto si = detail::broadcast_strides(x.shape(), x.shape());
  const auto so = detail::broadcast_strides(ks, x.shape());
  const std::size_t n_out = numel_of(ks);
  std::vector<T> out(n_out, -std::numeric_limits<T>::infinity());
  std::vector<std::size_t> arg(n_out, std::numeric_limits<std::size_t>::max());
  const auto xs = x.data();
  detail::for_each_broadcast(x.shape(), si, so, [&](std::size_t, std::size_t i, std::size_t o) {
    if (arg[o] == std::numeric_limits<std::size_t>::max() || xs[i] > out[o]) {
      out[o] = xs[i];
      arg[o] = i;
    }
  });
  Shape os = keepdim ? ks : detail::squeeze_axes(x.shape(), axes);
  return make_result<T>(std::move(os), std::move(out), "max_reduce", {x}, [arg](Node<T>& self) {
    auto g = self.inputs[0]->ensure_grad();
    for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
  });
}

template <typename T>
struct Stats {
  Tensor<T> mean;
  Tensor<T> var;
};

/// Mean and biased variance over `axes`, kept broadcastable against x.
template <typename T>
Stats<T> reduce_stats(const Tensor<T>& x, std::vector<std::size_t> axes) {
  axes = detail::normalize_axes(x.shape(), std::move(axes));
  auto m = mean(x, axes, true);
  auto centered = sub(x, m);
  auto v = mean(mul(centered, centered), axes, true);
  return {m, v};
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects 2-D operands");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul inner extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  std::vector<T> out(m * n);
  MapMat<T>(out.data(), m, n).noalias() = CMapMat<T>(a.data().data(), m, k) * CMapMat<T>(b.data().data(), k, n);
  return make_result<T>({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    CMapMat<T> g(self.grad.data(), m, n);
    if (na.requires_grad) {
      auto ga = na.ensure_grad();
      MapMat<T>(ga.data(), m, k).noalias() += g * CMapMat<T>(nb.data.data(), k, n).transpose();
    }
    if (nb.requires_grad) {
      auto gb = nb.ensure_grad();
      MapMat<T>(gb.data(), k, n).noalias() += CMapMat<T>(na.data.data(), m, k).transpose() * g;
    }
  });
}

namespace detail {

struct ConvGeom {
  std::size_t n, c, h, w, co, kh, kw, stride, pad, oh, ow;
  std::size_t k() const { return c * kh * kw; }
  std::size_t p() const { return oh * ow; }
};

/// Valid output-column range [lo, hi) for kernel column offset `dj`.
inline std::pair<long, long> valid_columns(const ConvGeom& g, long dj) {
  const long stride = static_cast<long>(g.stride), w = static_cast<long>(g.w);
  long lo = 0, hi = static_cast<long>(g.ow);
  while (lo < hi && lo * stride + dj < 0) ++lo;
  while (hi > lo && (hi - 1) * stride + dj >= w) --hi;
  return {lo, hi};
}

/// Unfolds the whole batch into a k x (n * p) column matrix; each row is
/// written front to back.
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const long h = static_cast<long>(g.h), pad = static_cast<long>(g.pad), stride = static_cast<long>(g.stride);
  const long ow = static_cast<long>(g.ow);
  const std::size_t plane = g.h * g.w;
  T* dst = col;
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const long dj = static_cast<long>(j) - pad;
        const auto [lo, hi] = valid_columns(g, dj);
        for (std::size_t b = 0; b < g.n; ++b) {
          const T* img = x + (b * g.c + ci) * plane;
          for (std::size_t oy = 0; oy < g.oh; ++oy, dst += ow) {
            const long y = static_cast<long>(oy) * stride + static_cast<long>(i) - pad;
            if (y < 0 || y >= h) {
              for (long ox = 0; ox < ow; ++ox) dst[ox] = T(0);
              continue;
            }
            const T* src = img + static_cast<std::size_t>(y) * g.w;
            for (long ox = 0; ox < lo; ++ox) dst[ox] = T(0);
            if (stride == 1) {
              for (long ox = lo; ox < hi; ++ox) dst[ox] = src[ox + dj];
            } else {
              for (long ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride + dj];
            }
            for (long ox = hi; ox < ow; ++ox) dst[ox] = T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* dx) {
  const long h = static_cast<long>(g.h), pad = static_cast<long>(g.pad), stride = static_cast<long>(g.stride);
  const long ow = static_cast<long>(g.ow);
  const std::size_t plane = g.h * g.w;
  const T* src = col;
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const long dj = static_cast<long>(j) - pad;
        const auto [lo, hi] = valid_columns(g, dj);
        for (std::size_t b = 0; b < g.n; ++b) {
          T* img = dx + (b * g.c + ci) * plane;
          for (std::size_t oy = 0; oy < g.oh; ++oy, src += ow) {
            const long y = static_cast<long>(oy) * stride + static_cast<long>(i) - pad;
            if (y < 0 || y >= h) continue;
            T* dst = img + static_cast<std::size_t>(y) * g.w;
            for (long ox = lo; ox < hi; ++ox) dst[ox * stride + dj] += src[ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation, x: n x c x h x w, kernel: c' x c x kh x kw.
/// The whole batch is unfolded into one column matrix so each direction is a
/// single GEMM.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride = 1, std::size_t pad = 0) {
  if (x.rank() != 4 || kernel.rank() != 4) throw ShapeError("conv2d expects 4-D input and kernel");
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  if (kernel.dim(1) != x.dim(1)) throw ShapeError("conv2d channel mismatch: input " + to_string(x.shape()) + ", kernel " + to_string(kernel.shape()));
  detail::ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0), kernel.dim(2), kernel.dim(3), stride, pad, 0, 0};
  const long eh = static_cast<long>(g.h + 2 * pad) - static_cast<long>(g.kh);
  const long ew_ = static_cast<long>(g.w + 2 * pad) - static_cast<long>(g.kw);
  if (eh < 0 || ew_ < 0) throw ShapeError("conv2d yields nonpositive output extent");
  g.oh = static_cast<std::size_t>(eh) / stride + 1;
  g.ow = static_cast<std::size_t>(ew_) / stride + 1;

  const std::size_t np = g.n * g.p();
  // im2col writes every entry, so the buffer is left uninitialized.
  std::unique_ptr<T[]> col(new T[g.k() * np]);
  detail::im2col(x.data().data(), g, col.get());
  RowMat<T> y = CMapMat<T>(kernel.data().data(), g.co, g.k()) * CMapMat<T>(col.get(), g.k(), np);
  std::vector<T> out(g.n * g.co * g.p());
  for (std::size_t b = 0; b < g.n; ++b)
    MapMat<T>(out.data() + b * g.co * g.p(), g.co, g.p()) = y.middleCols(static_cast<long>(b * g.p()), static_cast<long>(g.p()));
  return make_result<T>({g.n, g.co, g.oh, g.ow}, std::move(out), "conv2d", {x, kernel}, [g, np](Node<T>& self) {
    auto& nx = *self.inputs[0];
    auto& nk = *self.inputs[1];
    RowMat<T> gy(g.co, np);
    for (std::size_t b = 0; b < g.n; ++b)
      gy.middleCols(static_cast<long>(b * g.p()), static_cast<long>(g.p())) =
          CMapMat<T>(self.grad.data() + b * g.co * g.p(), g.co, g.p());
    std::unique_ptr<T[]> col(new T[g.k() * np]);
    if (nk.requires_grad) {
      detail::im2col(nx.data.data(), g, col.get());
      auto gk = nk.ensure_grad();
      MapMat<T>(gk.data(), g.co, g.k()).noalias() += gy * CMapMat<T>(col.get(), g.k(), np).transpose();
    }
    if (nx.requires_grad) {
      MapMat<T>(col.get(), g.k(), np).noalias() = CMapMat<T>(nk.data.data(), g.co, g.k()).transpose() * gy;
      auto gx = nx.ensure_grad();
      detail::col2im_add(col.get(), g, gx.data());
    }
  });
}

// ---------------------------------------------------------------- pooling

/// Generalized mean over spatial axes, (mean(x^p))^(1/p), with learnable p.
/// Input must be nonnegative.
template <typename T>
Tensor<T> gem(const Tensor<T>& x, const Tensor<T>& p) {
  if (x.rank() != 4) throw ShapeError("gem expects n x c x h x w");
  if (p.numel() != 1) throw ShapeError("gem exponent must be a scalar");
  const T pv = p.item();
  if (!(pv > T(0))) throw ValueError("gem exponent must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto xs = x.data();
  for (T v : xs)
    if (v < T(0)) throw ValueError("gem pooling requires nonnegative input");
  std::vector<T> out(n * c);
  std::vector<double> means(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < hw; ++k) acc += std::pow(static_cast<double>(xs[i * hw + k]), static_cast<double>(pv));
    means[i] = acc / static_cast<double>(hw);
    out[i] = static_cast<T>(std::pow(means[i], 1.0 / static_cast<double>(pv)));
  }
  return make_result<T>({n, c}, std::move(out), "gem", {x, p}, [means, hw](Node<T>& self) {
    auto& nx = *self.inputs[0];
    auto& np = *self.inputs[1];
    const double pv = np.data[0];
    std::span<T> gx, gp;
    if (nx.requires_grad) gx = nx.ensure_grad();
    if (np.requires_grad) gp = np.ensure_grad();
    double dp = 0.0;
    for (std::size_t i = 0; i < means.size(); ++i) {
      const double m = means[i];
      if (m <= 0.0) continue;
      const double y = std::pow(m, 1.0 / pv);
      const double gy = self.grad[i];
      if (!gx.empty()) {
        const double scale = std::pow(m, 1.0 / pv - 1.0) / static_cast<double>(hw);
        for (std::size_t k = 0; k < hw; ++k) {
          const double v = nx.data[i * hw + k];
          if (v > 0.0) gx[i * hw + k] += static_cast<T>(gy * scale * std::pow(v, pv - 1.0));
        }
      }
      if (!gp.empty()) {
        double s = 0.0;
        for (std::size_t k = 0; k < hw; ++k) {
          const double v = nx.data[i * hw + k];
          if (v > 0.0) s += std::pow(v, pv) * std::log(v);
        }
        s /= static_cast<double>(hw);
        dp += gy * y * (-std::log(m) / (pv * pv) + s / (m * pv));
      }
    }
    if (!gp.empty()) gp[0] += static_cast<T>(dp);
  });
}

/// Global spatial pooling to n x c.
template <typename T>
Tensor<T> pool(const Tensor<T>& x, PoolKind kind, double gem_p = 3.0) {
  if (x.rank() != 4) throw ShapeError("pool expects n x c x h x w, got " + to_string(x.shape()));
  const Shape nc{x.dim(0), x.dim(1)};
  switch (kind) {
    case PoolKind::kAvg: return reshape(mean(x, {2, 3}, true), nc);
    case PoolKind::kMax: return reshape(max_reduce(x, {2, 3}, true), nc);
    case PoolKind::kGem: return gem(x, Tensor<T>::scalar(static_cast<T>(gem_p)));
  }
  throw ValueError("unknown pool kind");
}

// ---------------------------------------------------------------- losses support

/// Mean softmax cross-entropy over rows with optional label smoothing.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& labels, double smoothing = 0.0) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy expects n x classes logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw ShapeError("label count does not match logits rows");
  for (auto l : labels)
    if (l >= c) throw ValueError("label " + std::to_string(l) + " out of range for " + std::to_string(c) + " classes");
  const auto z = logits.data();
  std::vector<double> prob(n * c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(z[i * c + j]));
    double se = 0.0;
    for (std::size_t j = 0; j < c; ++j) se += std::exp(static_cast<double>(z[i * c + j]) - mx);
    const double lse = mx + std::log(se);
    for (std::size_t j = 0; j < c; ++j) {
      const double logp = static_cast<double>(z[i * c + j]) - lse;
      prob[i * c + j] = std::exp(logp);
      const double q = (j == labels[i] ? 1.0 - smoothing : 0.0) + smoothing / static_cast<double>(c);
      total -= q * logp;
    }
  }
  const T loss = static_cast<T>(total / static_cast<double>(n));
  return make_result<T>({1}, {loss}, "cross_entropy", {logits}, [prob, labels, n, c, smoothing](Node<T>& self) {
    auto g = self.inputs[0]->ensure_grad();
    const double s = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double q = (j == labels[i] ? 1.0 - smoothing : 0.0) + smoothing / static_cast<double>(c);
        g[i * c + j] += static_cast<T>(s * (prob[i * c + j] - q));
      }
  });
}

}  // namespace cfd
