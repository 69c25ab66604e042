#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "tensor.hpp"

namespace metamap {

namespace detail {

inline std::vector<int64_t> row_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (size_t i = 0; i < rank; ++i) {
    const int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcastable");
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` viewed under `out` (stride 0 along broadcast axes).
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<int64_t> st(out.size(), 0);
  const auto own = row_strides(in);
  const size_t off = out.size() - in.size();
  for (size_t i = 0; i < in.size(); ++i)
    if (in[i] != 1) st[off + i] = own[i];
  return st;
}

template <class Real, class F>
std::vector<Real> ew_binary(const TensorT<Real>& a, const TensorT<Real>& b, const Shape& out,
                            F&& f) {
  const int64_t n = numel(out);
  std::vector<Real> r(static_cast<size_t>(n));
  const auto& av = a.values();
  const auto& bv = b.values();
  if (a.shape() == b.shape()) {
    for (int64_t i = 0; i < n; ++i) r[i] = f(av[i], bv[i]);
    return r;
  }
  if (a.size() == 1) {
    for (int64_t i = 0; i < n; ++i) r[i] = f(av[0], bv[i]);
    return r;
  }
  if (b.size() == 1) {
    for (int64_t i = 0; i < n; ++i) r[i] = f(av[i], bv[0]);
    return r;
  }
  // common fast path: [rows x cols] against a trailing [cols] vector
  if (a.shape().size() == 2 && b.shape().size() == 1 && a.shape()[1] == b.shape()[0]) {
    const int64_t cols = a.shape()[1];
    for (int64_t i = 0; i < n; ++i) r[i] = f(av[i], bv[i % cols]);
    return r;
  }
  const auto sa = broadcast_strides(a.shape(), out);
  const auto sb = broadcast_strides(b.shape(), out);
  const auto so = row_strides(out);
  for (int64_t i = 0; i < n; ++i) {
    int64_t rem = i, ia = 0, ib = 0;
    for (size_t d = 0; d < out.size(); ++d) {
      const int64_t c = rem / so[d];
      rem -= c * so[d];
      ia += c * sa[d];
      ib += c * sb[d];
    }
    r[i] = f(av[ia], bv[ib]);
  }
  return r;
}

inline int64_t norm_axis(int64_t axis, int64_t rank, const char* op) {
  const int64_t a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
  return a;
}

// outer/len/inner decomposition of a shape around one axis
struct AxisSplit {
  int64_t outer, len, inner;
};
inline AxisSplit split_axis(const Shape& s, int64_t axis) {
  AxisSplit r{1, s[static_cast<size_t>(axis)], 1};
  for (int64_t i = 0; i < axis; ++i) r.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

template <class Real>
TensorT<Real> sum_axis(const TensorT<Real>& x, int64_t axis, bool keepdims);
template <class Real>
TensorT<Real> reshape(const TensorT<Real>& x, Shape shape);
template <class Real>
TensorT<Real> broadcast_to(const TensorT<Real>& x, const Shape& shape);
template <class Real>
TensorT<Real> scale(const TensorT<Real>& x, Real c);
template <class Real>
TensorT<Real> mul(const TensorT<Real>& a, const TensorT<Real>& b);

// Reduce `g` back to `target` by summing over broadcast axes.
template <class Real>
TensorT<Real> reduce_to(TensorT<Real> g, const Shape& target) {
  while (g.rank() > static_cast<int64_t>(target.size())) g = sum_axis(g, 0, false);
  for (int64_t i = 0; i < g.rank(); ++i)
    if (target[static_cast<size_t>(i)] == 1 && g.dim(i) != 1) g = sum_axis(g, i, true);
  if (g.shape() != target) return reshape(g, target);  // [] vs [1] style fixups
  return g;
}

template <class Real>
TensorT<Real> add(const TensorT<Real>& a, const TensorT<Real>& b) {
  const Shape out = detail::broadcast_shape(a.shape(), b.shape(), "add");
  auto data = detail::ew_binary(a, b, out, [](Real x, Real y) { return x + y; });
  const Shape sa = a.shape(), sb = b.shape();
  return make_from_op<Real>(
      "add", out, std::move(data), {a, b},
      [sa, sb](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        return {reduce_to(g, sa), reduce_to(g, sb)};
      });
}

template <class Real>
TensorT<Real> sub(const TensorT<Real>& a, const TensorT<Real>& b) {
  const Shape out = detail::broadcast_shape(a.shape(), b.shape(), "sub");
  auto data = detail::ew_binary(a, b, out, [](Real x, Real y) { return x - y; });
  const Shape sa = a.shape(), sb = b.shape();
  return make_from_op<Real>(
      "sub", out, std::move(data), {a, b},
      [sa, sb](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        return {reduce_to(g, sa), reduce_to(scale(g, Real(-1)), sb)};
      });
}

template <class Real>
TensorT<Real> mul(const TensorT<Real>& a, const TensorT<Real>& b) {
  const Shape out = detail::broadcast_shape(a.shape(), b.shape(), "mul");
  auto data = detail::ew_binary(a, b, out, [](Real x, Real y) { return x * y; });
  const Shape sa = a.shape(), sb = b.shape();
  return make_from_op<Real>(
      "mul", out, std::move(data), {a, b},
      [a, b, sa, sb](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        return {reduce_to(mul(g, b), sa), reduce_to(mul(g, a), sb)};
      });
}

template <class Real>
TensorT<Real> scale(const TensorT<Real>& x, Real c) {
  std::vector<Real> data(x.values());
  for (auto& v : data) v *= c;
  return make_from_op<Real>(
      "scale", x.shape(), std::move(data), {x},
      [c](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        return {scale(g, c)};
      });
}

template <class Real>
TensorT<Real> add_scalar(const TensorT<Real>& x, Real c) {
  std::vector<Real> data(x.values());
  for (auto& v : data) v += c;
  return make_from_op<Real>(
      "add_scalar", x.shape(), std::move(data), {x},
      [](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        return {g};
      });
}

template <class Real>
TensorT<Real> neg(const TensorT<Real>& x) {
  return scale(x, Real(-1));
}

template <class Real>
TensorT<Real> reciprocal(const TensorT<Real>& x) {
  std::vector<Real> data(x.values());
  for (auto& v : data) v = Real(1) / v;
  return make_from_op<Real>(
      "reciprocal", x.shape(), std::move(data), {x},
      [](const TensorT<Real>& g, const TensorT<Real>& out) -> std::vector<TensorT<Real>> {
        return {neg(mul(g, mul(out, out)))};
      });
}

template <class Real>
TensorT<Real> div(const TensorT<Real>& a, const TensorT<Real>& b) {
  return mul(a, reciprocal(b));
}

template <class Real>
TensorT<Real> exp_op(const TensorT<Real>& x) {
  std::vector<Real> data(x.values());
  for (auto& v : data) v = std::exp(v);
  return make_from_op<Real>(
      "exp", x.shape(), std::move(data), {x},
      [](const TensorT<Real>& g, const TensorT<Real>& out) -> std::vector<TensorT<Real>> {
        return {mul(g, out)};
      });
}

template <class Real>
TensorT<Real> log_op(const TensorT<Real>& x) {
  std::vector<Real> data(x.values());
  for (auto& v : data) v = std::log(v);
  return make_from_op<Real>(
      "log", x.shape(), std::move(data), {x},
      [x](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        return {mul(g, reciprocal(x))};
      });
}

template <class Real>
TensorT<Real> sqrt_op(const TensorT<Real>& x) {
  std::vector<Real> data(x.values());
  for (auto& v : data) v = std::sqrt(v);
  return make_from_op<Real>(
      "sqrt", x.shape(), std::move(data), {x},
      [](const TensorT<Real>& g, const TensorT<Real>& out) -> std::vector<TensorT<Real>> {
        return {mul(g, scale(reciprocal(out), Real(0.5)))};
      });
}

template <class Real>
TensorT<Real> tanh_op(const TensorT<Real>& x) {
  std::vector<Real> data(x.values());
  for (auto& v : data) v = std::tanh(v);
  return make_from_op<Real>(
      "tanh", x.shape(), std::move(data), {x},
      [](const TensorT<Real>& g, const TensorT<Real>& out) -> std::vector<TensorT<Real>> {
        return {mul(g, sub(TensorT<Real>::ones(out.shape()), mul(out, out)))};
      });
}

// tanh-approximation GELU; the backward recomputes through the same form.
template <class Real>
TensorT<Real> gelu(const TensorT<Real>& x) {
  constexpr double kC0 = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kC1 = 0.044715;
  std::vector<Real> data(x.values());
  for (auto& v : data) {
    const double xv = static_cast<double>(v);
    v = static_cast<Real>(0.5 * xv * (1.0 + std::tanh(kC0 * (xv + kC1 * xv * xv * xv))));
  }
  return make_from_op<Real>(
      "gelu", x.shape(), std::move(data), {x},
      [x](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        auto x2 = mul(x, x);
        auto u = scale(add(x, scale(mul(x2, x), Real(kC1))), Real(kC0));
        auto t = tanh_op(u);
        auto one = TensorT<Real>::ones(x.shape());
        auto sech2 = sub(one, mul(t, t));
        auto du = scale(add_scalar(scale(x2, Real(3.0 * kC1)), Real(1)), Real(kC0));
        auto d = add(scale(add(one, t), Real(0.5)), scale(mul(mul(x, sech2), du), Real(0.5)));
        return {mul(g, d)};
      });
}

template <class Real>
TensorT<Real> transpose(const TensorT<Real>& x) {
  if (x.rank() != 2) throw DimensionError("transpose: expected rank-2, got " + shape_str(x.shape()));
  const int64_t r = x.dim(0), c = x.dim(1);
  std::vector<Real> data(static_cast<size_t>(r * c));
  const auto& xv = x.values();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) data[j * r + i] = xv[i * c + j];
  return make_from_op<Real>(
      "transpose", Shape{c, r}, std::move(data), {x},
      [](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        return {transpose(g)};
      });
}

template <class Real>
TensorT<Real> matmul(const TensorT<Real>& a, const TensorT<Real>& b);
template <class Real>
TensorT<Real> matmul_nt(const TensorT<Real>& a, const TensorT<Real>& b);
template <class Real>
TensorT<Real> matmul_tn(const TensorT<Real>& a, const TensorT<Real>& b);

// a [m x k] @ b [k x n]
template <class Real>
TensorT<Real> matmul(const TensorT<Real>& a, const TensorT<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Real> data(static_cast<size_t>(m * n), Real(0));
  const Real* __restrict av = a.values().data();
  const Real* __restrict bv = b.values().data();
  // ikj saxpy form; skipping zero entries of A shortcuts the block-masked
  // attention rows, whose off-block weights underflow to exact zero
  for (int64_t i = 0; i < m; ++i) {
    Real* __restrict out = data.data() + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const Real aip = av[i * k + p];
      if (aip == Real(0)) continue;
      const Real* __restrict brow = bv + p * n;
      for (int64_t j = 0; j < n; ++j) out[j] += aip * brow[j];
    }
  }
  return make_from_op<Real>(
      "matmul", Shape{m, n}, std::move(data), {a, b},
      [a, b](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        return {matmul_nt(g, b), matmul_tn(a, g)};
      });
}

// a [m x k] @ b^T for b [n x k]; dot-product form, no transpose copies
template <class Real>
TensorT<Real> matmul_nt(const TensorT<Real>& a, const TensorT<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<Real> data(static_cast<size_t>(m * n));
  const Real* __restrict av = a.values().data();
  const Real* __restrict bv = b.values().data();
  for (int64_t i = 0; i < m; ++i) {
    const Real* __restrict arow = av + i * k;
    Real* __restrict out = data.data() + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const Real* __restrict brow = bv + j * k;
      Real acc = Real(0);
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out[j] = acc;
    }
  }
  return make_from_op<Real>(
      "matmul_nt", Shape{m, n}, std::move(data), {a, b},
      [a, b](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        return {matmul(g, b), matmul_tn(g, a)};
      });
}

// a^T @ b for a [k x m], b [k x n]; rank-1 accumulation form
template <class Real>
TensorT<Real> matmul_tn(const TensorT<Real>& a, const TensorT<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw DimensionError("matmul_tn: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const int64_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  std::vector<Real> data(static_cast<size_t>(m * n), Real(0));
  const Real* __restrict av = a.values().data();
  const Real* __restrict bv = b.values().data();
  for (int64_t p = 0; p < k; ++p) {
    const Real* __restrict arow = av + p * m;
    const Real* __restrict brow = bv + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const Real aip = arow[i];
      if (aip == Real(0)) continue;
      Real* __restrict out = data.data() + i * n;
      for (int64_t j = 0; j < n; ++j) out[j] += aip * brow[j];
    }
  }
  return make_from_op<Real>(
      "matmul_tn", Shape{m, n}, std::move(data), {a, b},
      [a, b](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        return {matmul_nt(b, g), matmul(a, g)};
      });
}

template <class Real>
TensorT<Real> reshape(const TensorT<Real>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  const Shape orig = x.shape();
  return make_from_op<Real>(
      "reshape", std::move(shape), x.values(), {x},
      [orig](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        return {reshape(g, orig)};
      });
}

template <class Real>
TensorT<Real> broadcast_to(const TensorT<Real>& x, const Shape& shape) {
  const Shape check = detail::broadcast_shape(x.shape(), shape, "broadcast_to");
  if (check != shape)
    throw DimensionError("broadcast_to: " + shape_str(x.shape()) + " does not broadcast to " +
                         shape_str(shape));
  auto ones = TensorT<Real>::ones(shape);
  auto data = detail::ew_binary(x, ones, shape, [](Real a, Real) { return a; });
  const Shape orig = x.shape();
  return make_from_op<Real>(
      "broadcast_to", shape, std::move(data), {x},
      [orig](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        return {reduce_to(g, orig)};
      });
}

template <class Real>
TensorT<Real> sum_all(const TensorT<Real>& x) {
  Real acc = Real(0);
  for (Real v : x.values()) acc += v;
  const Shape orig = x.shape();
  return make_from_op<Real>(
      "sum", Shape{}, std::vector<Real>{acc}, {x},
      [orig](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        return {broadcast_to(g, orig)};
      });
}

template <class Real>
TensorT<Real> sum_axis(const TensorT<Real>& x, int64_t axis, bool keepdims) {
  const int64_t a = detail::norm_axis(axis, x.rank(), "sum_axis");
  Shape kd = x.shape();
  kd[static_cast<size_t>(a)] = 1;
  Shape out = kd;
  if (!keepdims) out.erase(out.begin() + a);

  const auto sp = detail::split_axis(x.shape(), a);
  std::vector<Real> data(static_cast<size_t>(numel(out)), Real(0));
  const auto& xv = x.values();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t l = 0; l < sp.len; ++l)
      for (int64_t i = 0; i < sp.inner; ++i)
        data[o * sp.inner + i] += xv[(o * sp.len + l) * sp.inner + i];

  const Shape orig = x.shape();
  const Shape kds = kd;
  return make_from_op<Real>(
      "sum_axis", std::move(out), std::move(data), {x},
      [orig, kds](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        auto gk = g.shape() == kds ? g : reshape(g, kds);
        return {broadcast_to(gk, orig)};
      });
}

template <class Real>
TensorT<Real> mean_all(const TensorT<Real>& x) {
  if (x.size() == 0) throw ContractError("mean of empty tensor");
  return scale(sum_all(x), Real(1) / static_cast<Real>(x.size()));
}

template <class Real>
TensorT<Real> mean_axis(const TensorT<Real>& x, int64_t axis, bool keepdims) {
  const int64_t a = detail::norm_axis(axis, x.rank(), "mean_axis");
  return scale(sum_axis(x, a, keepdims), Real(1) / static_cast<Real>(x.dim(a)));
}

template <class Real>
TensorT<Real> slice(const TensorT<Real>& x, int64_t axis, int64_t start, int64_t len);

template <class Real>
TensorT<Real> concat(const std::vector<TensorT<Real>>& parts, int64_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const int64_t rank = parts[0].rank();
  const int64_t a = detail::norm_axis(axis, rank, "concat");
  Shape out = parts[0].shape();
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw DimensionError("concat: rank mismatch");
    for (int64_t d = 0; d < rank; ++d)
      if (d != a && p.dim(d) != out[static_cast<size_t>(d)])
        throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                             shape_str(parts[0].shape()));
    total += p.dim(a);
  }
  out[static_cast<size_t>(a)] = total;

  const int64_t outer = a == 0 ? 1 : numel(Shape(out.begin(), out.begin() + a));
  const int64_t inner = numel(Shape(out.begin() + a + 1, out.end()));
  std::vector<Real> data(static_cast<size_t>(numel(out)));
  int64_t offset = 0;
  for (const auto& p : parts) {
    const int64_t plen = p.dim(a);
    const auto& pv = p.values();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(pv.begin() + o * plen * inner, pv.begin() + (o + 1) * plen * inner,
                data.begin() + (o * total + offset) * inner);
    offset += plen;
  }

  std::vector<int64_t> lens;
  for (const auto& p : parts) lens.push_back(p.dim(a));
  return make_from_op<Real>(
      "concat", std::move(out), std::move(data), parts,
      [lens, a](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        std::vector<TensorT<Real>> gs;
        int64_t off = 0;
        for (int64_t l : lens) {
          gs.push_back(slice(g, a, off, l));
          off += l;
        }
        return gs;
      });
}

template <class Real>
TensorT<Real> slice(const TensorT<Real>& x, int64_t axis, int64_t start, int64_t len) {
  const int64_t a = detail::norm_axis(axis, x.rank(), "slice");
  if (start < 0 || len < 0 || start + len > x.dim(a))
    throw IndexError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of bounds for axis size " +
                     std::to_string(x.dim(a)));
  Shape out = x.shape();
  out[static_cast<size_t>(a)] = len;
  const int64_t full = x.dim(a);
  const int64_t outer = a == 0 ? 1 : numel(Shape(out.begin(), out.begin() + a));
  const int64_t inner = numel(Shape(out.begin() + a + 1, out.end()));
  std::vector<Real> data(static_cast<size_t>(numel(out)));
  const auto& xv = x.values();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(xv.begin() + (o * full + start) * inner, xv.begin() + (o * full + start + len) * inner,
              data.begin() + o * len * inner);

  const Shape orig = x.shape();
  return make_from_op<Real>(
      "slice", std::move(out), std::move(data), {x},
      [orig, a, start, len, full](const TensorT<Real>& g,
                                  const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        std::vector<TensorT<Real>> parts;
        if (start > 0) {
          Shape s = orig;
          s[static_cast<size_t>(a)] = start;
          parts.push_back(TensorT<Real>::zeros(s));
        }
        parts.push_back(g);
        if (start + len < full) {
          Shape s = orig;
          s[static_cast<size_t>(a)] = full - start - len;
          parts.push_back(TensorT<Real>::zeros(s));
        }
        return {parts.size() == 1 ? g : concat(parts, a)};
      });
}

template <class Real>
TensorT<Real> scatter_add_rows(const TensorT<Real>& src, const std::vector<int64_t>& ids,
                               int64_t num_rows);

// Row-gather from a matrix; the embedding-lookup primitive.
template <class Real>
TensorT<Real> gather_rows(const TensorT<Real>& table, const std::vector<int64_t>& ids) {
  if (table.rank() != 2)
    throw DimensionError("gather_rows: table must be rank-2, got " + shape_str(table.shape()));
  const int64_t rows = table.dim(0), cols = table.dim(1);
  for (int64_t id : ids)
    if (id < 0 || id >= rows)
      throw IndexError("gather_rows: index " + std::to_string(id) + " out of range [0, " +
                       std::to_string(rows) + ")");
  std::vector<Real> data(static_cast<size_t>(ids.size()) * cols);
  const auto& tv = table.values();
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(tv.begin() + ids[i] * cols, tv.begin() + (ids[i] + 1) * cols,
              data.begin() + static_cast<int64_t>(i) * cols);
  return make_from_op<Real>(
      "gather_rows", Shape{static_cast<int64_t>(ids.size()), cols}, std::move(data), {table},
      [ids, rows](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        return {scatter_add_rows(g, ids, rows)};
      });
}

template <class Real>
TensorT<Real> scatter_add_rows(const TensorT<Real>& src, const std::vector<int64_t>& ids,
                               int64_t num_rows) {
  if (src.rank() != 2 || src.dim(0) != static_cast<int64_t>(ids.size()))
    throw DimensionError("scatter_add_rows: src shape " + shape_str(src.shape()) + " vs " +
                         std::to_string(ids.size()) + " ids");
  const int64_t cols = src.dim(1);
  for (int64_t id : ids)
    if (id < 0 || id >= num_rows)
      throw IndexError("scatter_add_rows: index " + std::to_string(id) + " out of range [0, " +
                       std::to_string(num_rows) + ")");
  std::vector<Real> data(static_cast<size_t>(num_rows * cols), Real(0));
  const auto& sv = src.values();
  for (size_t i = 0; i < ids.size(); ++i)
    for (int64_t j = 0; j < cols; ++j)
      data[ids[i] * cols + j] += sv[static_cast<int64_t>(i) * cols + j];
  return make_from_op<Real>(
      "scatter_add_rows", Shape{num_rows, cols}, std::move(data), {src},
      [ids](const TensorT<Real>& g, const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        return {gather_rows(g, ids)};
      });
}

// Constant slice-wise maximum (keepdims); used for overflow-safe softmax.
// Detached on purpose: treating the max as a constant leaves the softmax
// gradient exact while keeping exp() arguments non-positive.
template <class Real>
TensorT<Real> max_axis_detached(const TensorT<Real>& x, int64_t axis) {
  const int64_t a = detail::norm_axis(axis, x.rank(), "max_axis");
  Shape out = x.shape();
  out[static_cast<size_t>(a)] = 1;
  const auto sp = detail::split_axis(x.shape(), a);
  std::vector<Real> data(static_cast<size_t>(numel(out)));
  const auto& xv = x.values();
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t i = 0; i < sp.inner; ++i) {
      Real m = xv[o * sp.len * sp.inner + i];
      for (int64_t l = 1; l < sp.len; ++l)
        m = std::max(m, xv[(o * sp.len + l) * sp.inner + i]);
      data[o * sp.inner + i] = m;
    }
  return TensorT<Real>::from_data(std::move(out), std::move(data));
}

// Fused overflow-safe softmax. Backward: s * (g - sum(g * s)) along the axis,
// expressed through the saved output so second-order gradients flow.
template <class Real>
TensorT<Real> softmax(const TensorT<Real>& x, int64_t axis) {
  const int64_t a = detail::norm_axis(axis, x.rank(), "softmax");
  const auto sp = detail::split_axis(x.shape(), a);
  std::vector<Real> data(x.values());
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t i = 0; i < sp.inner; ++i) {
      Real* base = data.data() + o * sp.len * sp.inner + i;
      Real mx = base[0];
      for (int64_t l = 1; l < sp.len; ++l) mx = std::max(mx, base[l * sp.inner]);
      Real total = Real(0);
      for (int64_t l = 0; l < sp.len; ++l) {
        Real& v = base[l * sp.inner];
        v = std::exp(v - mx);
        total += v;
      }
      const Real inv = Real(1) / total;
      for (int64_t l = 0; l < sp.len; ++l) base[l * sp.inner] *= inv;
    }
  return make_from_op<Real>(
      "softmax", x.shape(), std::move(data), {x},
      [a](const TensorT<Real>& g, const TensorT<Real>& out) -> std::vector<TensorT<Real>> {
        auto gs = mul(g, out);
        return {sub(gs, mul(out, sum_axis(gs, a, true)))};
      });
}

// Fused log-softmax. Backward: g - exp(out) * sum(g) along the axis.
template <class Real>
TensorT<Real> log_softmax(const TensorT<Real>& x, int64_t axis) {
  const int64_t a = detail::norm_axis(axis, x.rank(), "log_softmax");
  const auto sp = detail::split_axis(x.shape(), a);
  std::vector<Real> data(x.values());
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t i = 0; i < sp.inner; ++i) {
      Real* base = data.data() + o * sp.len * sp.inner + i;
      Real mx = base[0];
      for (int64_t l = 1; l < sp.len; ++l) mx = std::max(mx, base[l * sp.inner]);
      Real total = Real(0);
      for (int64_t l = 0; l < sp.len; ++l) total += std::exp(base[l * sp.inner] - mx);
      const Real lse = mx + std::log(total);
      for (int64_t l = 0; l < sp.len; ++l) base[l * sp.inner] -= lse;
    }
  return make_from_op<Real>(
      "log_softmax", x.shape(), std::move(data), {x},
      [a](const TensorT<Real>& g, const TensorT<Real>& out) -> std::vector<TensorT<Real>> {
        return {sub(g, mul(exp_op(out), sum_axis(g, a, true)))};
      });
}

// Fused layer normalization over the last axis with learnable gain and bias.
// The backward rebuilds the normalized activations differentiably, so the
// meta-gradients through adapted layer-norm parameters stay exact.
template <class Real>
TensorT<Real> layer_norm(const TensorT<Real>& x, const TensorT<Real>& gamma,
                         const TensorT<Real>& beta, Real eps = Real(1e-5)) {
  if (gamma.rank() != 1 || beta.rank() != 1 || x.dim(x.rank() - 1) != gamma.dim(0) ||
      gamma.dim(0) != beta.dim(0))
    throw DimensionError("layer_norm: feature dims " + shape_str(x.shape()) + ", " +
                         shape_str(gamma.shape()) + ", " + shape_str(beta.shape()));
  const int64_t cols = x.dim(x.rank() - 1);
  const int64_t rows = x.size() / std::max<int64_t>(cols, 1);
  std::vector<Real> data(x.values());
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (int64_t r = 0; r < rows; ++r) {
    Real* row = data.data() + r * cols;
    Real mean = Real(0);
    for (int64_t j = 0; j < cols; ++j) mean += row[j];
    mean /= static_cast<Real>(cols);
    Real var = Real(0);
    for (int64_t j = 0; j < cols; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<Real>(cols);
    const Real inv = Real(1) / std::sqrt(var + eps);
    for (int64_t j = 0; j < cols; ++j) row[j] = (row[j] - mean) * inv * gv[j] + bv[j];
  }
  return make_from_op<Real>(
      "layer_norm", x.shape(), std::move(data), {x, gamma, beta},
      [x, gamma, eps](const TensorT<Real>& g,
                      const TensorT<Real>&) -> std::vector<TensorT<Real>> {
        auto mu = mean_axis(x, -1, true);
        auto xc = sub(x, mu);
        auto var = mean_axis(mul(xc, xc), -1, true);
        auto istd = reciprocal(sqrt_op(add_scalar(var, eps)));
        auto xhat = mul(xc, istd);
        const int64_t rank = x.rank();
        Shape flat_cols{x.size() / x.dim(rank - 1), x.dim(rank - 1)};
        auto g2 = g.rank() == 2 ? g : reshape(g, flat_cols);
        auto xhat2 = xhat.rank() == 2 ? xhat : reshape(xhat, flat_cols);
        auto dgamma = sum_axis(mul(g2, xhat2), 0, false);
        auto dbeta = sum_axis(g2, 0, false);
        auto gg = mul(g, gamma);
        auto m1 = mean_axis(gg, -1, true);
        auto m2 = mean_axis(mul(gg, xhat), -1, true);
        auto dx = mul(istd, sub(sub(gg, m1), mul(xhat, m2)));
        return {dx, dgamma, dbeta};
      });
}

// Token-level categorical cross entropy, averaged over unmasked positions.
// logits: [T x V]; targets: per-position token ids; mask: per-position flags
// (false excludes PAD / prefix positions from the mean).
template <class Real>
TensorT<Real> cross_entropy(const TensorT<Real>& logits, const std::vector<int64_t>& targets,
                            const std::vector<bool>& mask) {
  if (logits.rank() != 2)
    throw DimensionError("cross_entropy: logits must be rank-2, got " + shape_str(logits.shape()));
  const int64_t T = logits.dim(0), V = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != T || static_cast<int64_t>(mask.size()) != T)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets and " +
                         std::to_string(mask.size()) + " mask entries for " + std::to_string(T) +
                         " positions");
  int64_t count = 0;
  for (int64_t i = 0; i < T; ++i) {
    if (targets[i] < 0 || targets[i] >= V)
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " at position " +
                       std::to_string(i) + " outside vocabulary of size " + std::to_string(V));
    if (mask[i]) ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: mask excludes every position");

  std::vector<Real> w(static_cast<size_t>(T * V), Real(0));
  for (int64_t i = 0; i < T; ++i)
    if (mask[i]) w[i * V + targets[i]] = Real(1) / static_cast<Real>(count);
  auto weights = TensorT<Real>::from_data(Shape{T, V}, std::move(w));
  return neg(sum_all(mul(log_softmax(logits, 1), weights)));
}

template <class Real>
TensorT<Real> operator+(const TensorT<Real>& a, const TensorT<Real>& b) {
  return add(a, b);
}
template <class Real>
TensorT<Real> operator-(const TensorT<Real>& a, const TensorT<Real>& b) {
  return sub(a, b);
}
template <class Real>
TensorT<Real> operator*(const TensorT<Real>& a, const TensorT<Real>& b) {
  return mul(a, b);
}
template <class Real>
TensorT<Real> operator*(const TensorT<Real>& a, Real c) {
  return scale(a, c);
}
template <class Real>
TensorT<Real> operator*(Real c, const TensorT<Real>& a) {
  return scale(a, c);
}

}  // namespace metamap
