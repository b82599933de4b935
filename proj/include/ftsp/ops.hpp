#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "ftsp/tensor.hpp"

namespace ftsp {

namespace detail {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

// c (+)= op(a) op(b) with a stored [ar, ac] and b stored [br, bc].
// Runs on Eigen-owned copies: the vectorised kernels pick their code path from
// pointer alignment, so unaligned heap buffers would change rounding between runs.
inline void gemm(const Real* a, Eigen::Index ar, Eigen::Index ac, bool ta, const Real* b, Eigen::Index br,
                 Eigen::Index bc, bool tb, Real* c, bool accumulate) {
  const RowMat A = ConstMatMap(a, ar, ac);
  const RowMat B = ConstMatMap(b, br, bc);
  RowMat C;
  if (ta && tb) C.noalias() = A.transpose() * B.transpose();
  else if (ta) C.noalias() = A.transpose() * B;
  else if (tb) C.noalias() = A * B.transpose();
  else C.noalias() = A * B;
  MatMap out(c, C.rows(), C.cols());
  if (accumulate) out += C;
  else out = C;
}

inline std::size_t norm_axis(std::ptrdiff_t axis, std::size_t rank) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("axis out of range");
  return static_cast<std::size_t>(axis);
}

// outer x axis x inner decomposition of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Elementwise binary op where one operand's shape may be a trailing suffix of the other's.
template <class F, class DA, class DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  Shape out_shape;
  if (a.shape() == b.shape() || is_suffix(b.shape(), a.shape())) {
    out_shape = a.shape();
  } else if (is_suffix(a.shape(), b.shape())) {
    out_shape = b.shape();
  } else {
    throw DimensionError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t n = numel_of(out_shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  std::vector<Real> out(n);
  const auto& ad = a.data();
  const auto& bd = b.data();
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[i], bd[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[i % na], bd[i % nb]);
  }
  auto pa = a.impl_ptr();
  auto pb = b.impl_ptr();
  return make_result(name, out_shape, std::move(out), {a, b},
                     [pa, pb, da, db, na, nb](TensorImpl& self) {
                       const std::size_t count = self.data.size();
                       auto* ga = grad_of(pa);
                       auto* gb = grad_of(pb);
                       for (std::size_t i = 0; i < count; ++i) {
                         const Real x = pa->data[i % na];
                         const Real y = pb->data[i % nb];
                         const Real g = self.grad[i];
                         if (ga) (*ga)[i % na] += g * da(x, y, self.data[i]);
                         if (gb) (*gb)[i % nb] += g * db(x, y, self.data[i]);
                       }
                     });
}

// df(x, y) receives the input and the output value.
template <class F, class DF>
Tensor unary_op(const char* name, const Tensor& a, F f, DF df) {
  const auto& ad = a.data();
  std::vector<Real> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = f(ad[i]);
  auto pa = a.impl_ptr();
  return make_result(name, a.shape(), std::move(out), {a}, [pa, df](TensorImpl& self) {
    auto* ga = grad_of(pa);
    if (!ga) return;
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      (*ga)[i] += self.grad[i] * df(pa->data[i], self.data[i]);
    }
  });
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](Real x, Real y) { return x + y; }, [](Real, Real, Real) { return 1.0; },
      [](Real, Real, Real) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](Real x, Real y) { return x - y; }, [](Real, Real, Real) { return 1.0; },
      [](Real, Real, Real) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](Real x, Real y) { return x * y; }, [](Real, Real y, Real) { return y; },
      [](Real x, Real, Real) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "div", a, b, [](Real x, Real y) { return x / y; },
      [](Real, Real y, Real) { return 1.0 / y; }, [](Real x, Real y, Real) { return -x / (y * y); });
}

// Ties route the gradient to the first operand.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "maximum", a, b, [](Real x, Real y) { return x >= y ? x : y; },
      [](Real x, Real y, Real) { return x >= y ? 1.0 : 0.0; },
      [](Real x, Real y, Real) { return x >= y ? 0.0 : 1.0; });
}

inline Tensor minimum(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "minimum", a, b, [](Real x, Real y) { return x <= y ? x : y; },
      [](Real x, Real y, Real) { return x <= y ? 1.0 : 0.0; },
      [](Real x, Real y, Real) { return x <= y ? 0.0 : 1.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

inline Tensor scale(const Tensor& a, Real s) {
  return detail::unary_op(
      "scale", a, [s](Real x) { return s * x; }, [s](Real, Real) { return s; });
}

inline Tensor add_scalar(const Tensor& a, Real s) {
  return detail::unary_op(
      "add_scalar", a, [s](Real x) { return x + s; }, [](Real, Real) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      "relu", a, [](Real x) { return x > 0 ? x : 0.0; },
      [](Real x, Real) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      "sigmoid", a,
      [](Real x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const Real e = std::exp(x);
        return e / (1.0 + e);
      },
      [](Real, Real y) { return y * (1.0 - y); });
}

// log(x / (1 - x)) with x clamped into [eps, 1 - eps]; gradient is zero where clamped.
inline Tensor inverse_sigmoid(const Tensor& a, Real eps = 1e-5) {
  return detail::unary_op(
      "inverse_sigmoid", a,
      [eps](Real x) {
        const Real c = std::clamp(x, eps, 1.0 - eps);
        return std::log(c / (1.0 - c));
      },
      [eps](Real x, Real) { return (x < eps || x > 1.0 - eps) ? 0.0 : 1.0 / (x * (1.0 - x)); });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      "exp", a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      "log", a, [](Real x) { return std::log(x); }, [](Real x, Real) { return 1.0 / x; });
}

// Subgradient 0 at the origin.
inline Tensor abs(const Tensor& a) {
  return detail::unary_op(
      "abs", a, [](Real x) { return std::abs(x); },
      [](Real x, Real) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

inline Tensor square(const Tensor& a) {
  return detail::unary_op(
      "square", a, [](Real x) { return x * x; }, [](Real x, Real) { return 2.0 * x; });
}

inline Tensor clamp(const Tensor& a, Real lo, Real hi) {
  return detail::unary_op(
      "clamp", a, [lo, hi](Real x) { return std::clamp(x, lo, hi); },
      [lo, hi](Real x, Real) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

// x^p for x >= 0.
inline Tensor pow_scalar(const Tensor& a, Real p) {
  return detail::unary_op(
      "pow", a, [p](Real x) { return std::pow(x, p); },
      [p](Real x, Real) { return p == 0.0 ? 0.0 : p * std::pow(x, p - 1.0); });
}

// ---- reductions ------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  Real total = 0;
  for (Real v : a.data()) total += v;
  auto pa = a.impl_ptr();
  return detail::make_result("sum", {}, {total}, {a}, [pa](TensorImpl& self) {
    auto* ga = detail::grad_of(pa);
    if (!ga) return;
    for (Real& g : *ga) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<Real>(a.numel()));
}

// Sums out one axis (the axis is removed from the shape).
inline Tensor sum_axis(const Tensor& a, std::ptrdiff_t axis_in) {
  const std::size_t axis = detail::norm_axis(axis_in, a.rank());
  const auto sp = detail::split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<Real> out(sp.outer * sp.inner, 0.0);
  const auto& ad = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += ad[(o * sp.extent + e) * sp.inner + i];
  auto pa = a.impl_ptr();
  return detail::make_result("sum_axis", out_shape, std::move(out), {a}, [pa, sp](TensorImpl& self) {
    auto* ga = detail::grad_of(pa);
    if (!ga) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t e = 0; e < sp.extent; ++e)
        for (std::size_t i = 0; i < sp.inner; ++i)
          (*ga)[(o * sp.extent + e) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

inline Tensor mean_axis(const Tensor& a, std::ptrdiff_t axis) {
  const std::size_t extent = a.dim(axis);
  if (extent == 0) throw DimensionError("mean over empty axis");
  return scale(sum_axis(a, axis), 1.0 / static_cast<Real>(extent));
}

// ---- shape manipulation ----------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  auto pa = a.impl_ptr();
  return detail::make_result("reshape", std::move(shape), a.data(), {a}, [pa](TensorImpl& self) {
    auto* ga = detail::grad_of(pa);
    if (!ga) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
  });
}

inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r) throw DimensionError("permute rank mismatch");
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw DimensionError("invalid permutation");
    seen[p] = true;
  }
  const Shape& in = a.shape();
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out_shape(r);
  std::vector<std::size_t> src_strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[perm[i]];
    src_strides[i] = in_strides[perm[i]];
  }
  const std::size_t n = a.numel();
  // Flat source index for each output position.
  auto index = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    (*index)[o] = src;
    for (std::size_t ax = r; ax-- > 0;) {
      if (++counter[ax] < out_shape[ax]) {
        src += src_strides[ax];
        break;
      }
      src -= src_strides[ax] * (out_shape[ax] - 1);
      counter[ax] = 0;
    }
  }
  std::vector<Real> out(n);
  const auto& ad = a.data();
  for (std::size_t o = 0; o < n; ++o) out[o] = ad[(*index)[o]];
  auto pa = a.impl_ptr();
  return detail::make_result("permute", out_shape, std::move(out), {a}, [pa, index](TensorImpl& self) {
    auto* ga = detail::grad_of(pa);
    if (!ga) return;
    for (std::size_t o = 0; o < self.grad.size(); ++o) (*ga)[(*index)[o]] += self.grad[o];
  });
}

inline Tensor transpose(const Tensor& a, std::ptrdiff_t ax0, std::ptrdiff_t ax1) {
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[detail::norm_axis(ax0, a.rank())], perm[detail::norm_axis(ax1, a.rank())]);
  return permute(a, perm);
}

// Inserts a new axis at `axis` with extent `count`, repeating the input.
inline Tensor broadcast_axis(const Tensor& a, std::size_t axis, std::size_t count) {
  if (axis > a.rank()) throw DimensionError("broadcast_axis position out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
  for (std::size_t i = axis; i < a.rank(); ++i) inner *= a.shape()[i];
  Shape out_shape = a.shape();
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), count);
  std::vector<Real> out(outer * count * inner);
  const auto& ad = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < count; ++c)
      std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>(o * inner), inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * count + c) * inner));
  auto pa = a.impl_ptr();
  return detail::make_result("broadcast_axis", out_shape, std::move(out), {a},
                             [pa, outer, count, inner](TensorImpl& self) {
                               auto* ga = detail::grad_of(pa);
                               if (!ga) return;
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t c = 0; c < count; ++c)
                                   for (std::size_t i = 0; i < inner; ++i)
                                     (*ga)[o * inner + i] += self.grad[(o * count + c) * inner + i];
                             });
}

inline Tensor slice(const Tensor& a, std::ptrdiff_t axis_in, std::size_t start, std::size_t length) {
  const std::size_t axis = detail::norm_axis(axis_in, a.rank());
  const auto sp = detail::split_at(a.shape(), axis);
  if (start + length > sp.extent) throw DimensionError("slice out of range");
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  std::vector<Real> out(sp.outer * length * sp.inner);
  const auto& ad = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>((o * sp.extent + start) * sp.inner),
                length * sp.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * sp.inner));
  auto pa = a.impl_ptr();
  return detail::make_result("slice", out_shape, std::move(out), {a},
                             [pa, sp, start, length](TensorImpl& self) {
                               auto* ga = detail::grad_of(pa);
                               if (!ga) return;
                               const std::size_t block = length * sp.inner;
                               for (std::size_t o = 0; o < sp.outer; ++o)
                                 for (std::size_t i = 0; i < block; ++i)
                                   (*ga)[(o * sp.extent + start) * sp.inner + i] +=
                                       self.grad[o * block + i];
                             });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::ptrdiff_t axis_in) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const std::size_t axis = detail::norm_axis(axis_in, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != out_shape.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t i = 0; i < p.rank(); ++i) {
      if (i != axis && p.shape()[i] != parts[0].shape()[i]) {
        throw DimensionError("concat shape mismatch " + shape_str(p.shape()));
      }
    }
    out_shape[axis] += p.shape()[axis];
  }
  const auto sp = detail::split_at(out_shape, axis);
  std::vector<Real> out(numel_of(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.shape()[axis] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>((o * sp.extent + offset) * sp.inner));
    offset += p.shape()[axis];
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const Tensor& p : parts) impls.push_back(p.impl_ptr());
  return detail::make_result(
      "concat", out_shape, std::move(out), parts, [impls, offsets, sp, axis](TensorImpl& self) {
        for (std::size_t k = 0; k < impls.size(); ++k) {
          auto* g = detail::grad_of(impls[k]);
          if (!g) continue;
          const std::size_t block = impls[k]->shape[axis] * sp.inner;
          for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < block; ++i)
              (*g)[o * block + i] += self.grad[(o * sp.extent + offsets[k]) * sp.inner + i];
        }
      });
}

// Gathers entries along axis 0 (rows may repeat); backward scatter-adds.
inline Tensor index_select(const Tensor& a, const std::vector<std::size_t>& rows) {
  if (a.rank() == 0) throw DimensionError("index_select on scalar");
  const std::size_t extent = a.shape()[0];
  const std::size_t inner = extent ? a.numel() / extent : 0;
  for (std::size_t r : rows) {
    if (r >= extent) throw DimensionError("index_select row out of range");
  }
  Shape out_shape = a.shape();
  out_shape[0] = rows.size();
  std::vector<Real> out(rows.size() * inner);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * inner), inner,
                out.begin() + static_cast<std::ptrdiff_t>(i * inner));
  auto pa = a.impl_ptr();
  return detail::make_result("index_select", out_shape, std::move(out), {a},
                             [pa, rows, inner](TensorImpl& self) {
                               auto* ga = detail::grad_of(pa);
                               if (!ga) return;
                               for (std::size_t i = 0; i < rows.size(); ++i)
                                 for (std::size_t j = 0; j < inner; ++j)
                                   (*ga)[rows[i] * inner + j] += self.grad[i * inner + j];
                             });
}

// Circular shift: out[.., i, ..] = a[.., (i - shift) mod n, ..].
inline Tensor roll(const Tensor& a, std::ptrdiff_t axis_in, std::ptrdiff_t shift) {
  const std::size_t axis = detail::norm_axis(axis_in, a.rank());
  const auto sp = detail::split_at(a.shape(), axis);
  const auto n = static_cast<std::ptrdiff_t>(sp.extent);
  if (n == 0) return a;
  const std::size_t s = static_cast<std::size_t>(((shift % n) + n) % n);
  std::vector<Real> out(a.numel());
  const auto& ad = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e) {
      const std::size_t dst = (e + s) % sp.extent;
      std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>((o * sp.extent + e) * sp.inner), sp.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * sp.extent + dst) * sp.inner));
    }
  auto pa = a.impl_ptr();
  return detail::make_result("roll", a.shape(), std::move(out), {a}, [pa, sp, s](TensorImpl& self) {
    auto* ga = detail::grad_of(pa);
    if (!ga) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const std::size_t dst = (e + s) % sp.extent;
        for (std::size_t i = 0; i < sp.inner; ++i)
          (*ga)[(o * sp.extent + e) * sp.inner + i] += self.grad[(o * sp.extent + dst) * sp.inner + i];
      }
  });
}

// Picks x[..., targets[i]] for each leading position i.
inline Tensor pick(const Tensor& x, const std::vector<int>& targets) {
  const std::size_t classes = x.dim(-1);
  const std::size_t rows = x.numel() / classes;
  if (targets.size() != rows) throw DimensionError("pick: target count mismatch");
  std::vector<Real> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= classes) {
      throw DimensionError("pick: class index out of range");
    }
    out[r] = x.data()[r * classes + static_cast<std::size_t>(targets[r])];
  }
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  auto px = x.impl_ptr();
  return detail::make_result("pick", out_shape, std::move(out), {x},
                             [px, targets, classes](TensorImpl& self) {
                               auto* gx = detail::grad_of(px);
                               if (!gx) return;
                               for (std::size_t r = 0; r < targets.size(); ++r)
                                 (*gx)[r * classes + static_cast<std::size_t>(targets[r])] += self.grad[r];
                             });
}

// ---- linear algebra --------------------------------------------------------

// a[..., m, k] x b[..., k, n]; b may also be a shared rank-2 matrix.
// With transpose_b, b is read as [..., n, k].
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  if (a.rank() < 2 || b.rank() < 2) throw DimensionError("matmul needs rank >= 2 operands");
  const std::size_t m = a.dim(-2), k = a.dim(-1);
  const std::size_t bk = transpose_b ? b.dim(-1) : b.dim(-2);
  const std::size_t n = transpose_b ? b.dim(-2) : b.dim(-1);
  if (bk != k) {
    throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  const bool shared_b = b_batch.empty();
  if (!shared_b && a_batch != b_batch) {
    throw DimensionError("matmul batch extents differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t batch = numel_of(a_batch);
  Shape out_shape = a_batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<Real> out(batch * m * n);
  {
    const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
               N = static_cast<Eigen::Index>(n);
    for (std::size_t t = 0; t < batch; ++t) {
      const Real* bp = b.data().data() + (shared_b ? 0 : t * k * n);
      detail::gemm(a.data().data() + t * m * k, M, K, false, bp, transpose_b ? N : K, transpose_b ? K : N,
                   transpose_b, out.data() + t * m * n, false);
    }
  }
  auto pa = a.impl_ptr();
  auto pb = b.impl_ptr();
  return detail::make_result(
      "matmul", out_shape, std::move(out), {a, b},
      [pa, pb, batch, m, k, n, shared_b, transpose_b](TensorImpl& self) {
        auto* ga = detail::grad_of(pa);
        auto* gb = detail::grad_of(pb);
        const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
                   N = static_cast<Eigen::Index>(n);
        for (std::size_t t = 0; t < batch; ++t) {
          const Real* g = self.grad.data() + t * m * n;
          const Real* ap = pa->data.data() + t * m * k;
          const std::size_t boff = shared_b ? 0 : t * k * n;
          const Real* bp = pb->data.data() + boff;
          if (transpose_b) {
            if (ga) detail::gemm(g, M, N, false, bp, N, K, false, ga->data() + t * m * k, true);
            if (gb) detail::gemm(g, M, N, true, ap, M, K, false, gb->data() + boff, true);
          } else {
            if (ga) detail::gemm(g, M, N, false, bp, K, N, true, ga->data() + t * m * k, true);
            if (gb) detail::gemm(ap, M, K, true, g, M, N, false, gb->data() + boff, true);
          }
        }
      });
}

// x[..., in] W[in, out] + bias[out]; bias may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor()) {
  if (weight.rank() != 2) throw DimensionError("linear weight must be rank 2");
  const std::size_t in = weight.dim(0), outd = weight.dim(1);
  if (x.rank() == 0 || x.dim(-1) != in) {
    throw DimensionError("linear input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outd)) {
    throw DimensionError("linear bias shape " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  std::vector<Real> out(rows * outd);
  using detail::ConstMatMap;
  using detail::MatMap;
  const auto R = static_cast<Eigen::Index>(rows), I = static_cast<Eigen::Index>(in),
             O = static_cast<Eigen::Index>(outd);
  {
    detail::gemm(x.data().data(), R, I, false, weight.data().data(), I, O, false, out.data(), false);
    MatMap Y(out.data(), R, O);
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>> bv(bias.data().data(), O);
      Y.rowwise() += bv;
    }
  }
  auto px = x.impl_ptr();
  auto pw = weight.impl_ptr();
  auto pbias = bias.defined() ? bias.impl_ptr() : nullptr;
  return detail::make_result("linear", out_shape, std::move(out), {x, weight, bias},
                             [px, pw, pbias, R, I, O](TensorImpl& self) {
                               ConstMatMap G(self.grad.data(), R, O);
                               if (auto* gx = detail::grad_of(px)) {
                                 detail::gemm(self.grad.data(), R, O, false, pw->data.data(), I, O, true,
                                              gx->data(), true);
                               }
                               if (auto* gw = detail::grad_of(pw)) {
                                 detail::gemm(px->data.data(), R, I, true, self.grad.data(), R, O, false,
                                              gw->data(), true);
                               }
                               if (auto* gb = detail::grad_of(pbias)) {
                                 for (Eigen::Index r = 0; r < R; ++r)
                                   for (Eigen::Index o = 0; o < O; ++o) (*gb)[o] += G(r, o);
                               }
                             });
}

// ---- normalisation ---------------------------------------------------------

inline Tensor softmax(const Tensor& x, std::ptrdiff_t axis_in = -1) {
  const std::size_t axis = detail::norm_axis(axis_in, x.rank());
  const auto sp = detail::split_at(x.shape(), axis);
  std::vector<Real> out(x.numel());
  const auto& xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t e = 0; e < sp.extent; ++e) mx = std::max(mx, xd[base + e * sp.inner]);
      Real total = 0;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const Real v = std::exp(xd[base + e * sp.inner] - mx);
        out[base + e * sp.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < sp.extent; ++e) out[base + e * sp.inner] /= total;
    }
  auto px = x.impl_ptr();
  return detail::make_result("softmax", x.shape(), std::move(out), {x}, [px, sp](TensorImpl& self) {
    auto* gx = detail::grad_of(px);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.extent * sp.inner + i;
        Real dot = 0;
        for (std::size_t e = 0; e < sp.extent; ++e)
          dot += self.grad[base + e * sp.inner] * self.data[base + e * sp.inner];
        for (std::size_t e = 0; e < sp.extent; ++e) {
          const std::size_t idx = base + e * sp.inner;
          (*gx)[idx] += self.data[idx] * (self.grad[idx] - dot);
        }
      }
  });
}

// Numerically stable log-softmax over the last axis.
inline Tensor log_softmax(const Tensor& x) {
  const std::size_t c = x.dim(-1);
  const std::size_t rows = x.numel() / c;
  std::vector<Real> out(x.numel());
  const auto& xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = xd.data() + r * c;
    const Real mx = *std::max_element(row, row + c);
    Real total = 0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - mx);
    const Real lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = row[j] - lse;
  }
  auto px = x.impl_ptr();
  return detail::make_result("log_softmax", x.shape(), std::move(out), {x},
                             [px, c, rows](TensorImpl& self) {
                               auto* gx = detail::grad_of(px);
                               if (!gx) return;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 Real gsum = 0;
                                 for (std::size_t j = 0; j < c; ++j) gsum += self.grad[r * c + j];
                                 for (std::size_t j = 0; j < c; ++j) {
                                   const std::size_t idx = r * c + j;
                                   (*gx)[idx] += self.grad[idx] - std::exp(self.data[idx]) * gsum;
                                 }
                               }
                             });
}

// Normalises over the last axis; gain/bias may be undefined.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain = Tensor(), const Tensor& bias = Tensor(),
                         Real eps = 1e-5) {
  if (x.rank() == 0 || x.dim(-1) == 0) throw DimensionError("layer_norm needs a non-empty last axis");
  const std::size_t d = x.dim(-1);
  const std::size_t rows = x.numel() / d;
  if (gain.defined() && gain.numel() != d) throw DimensionError("layer_norm gain size");
  if (bias.defined() && bias.numel() != d) throw DimensionError("layer_norm bias size");
  auto xhat = std::make_shared<std::vector<Real>>(x.numel());
  auto inv_std = std::make_shared<std::vector<Real>>(rows);
  std::vector<Real> out(x.numel());
  const auto& xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = xd.data() + r * d;
    Real mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<Real>(d);
    const Real is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const Real h = (row[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * (gain.defined() ? gain.data()[j] : 1.0) + (bias.defined() ? bias.data()[j] : 0.0);
    }
  }
  auto px = x.impl_ptr();
  auto pg = gain.defined() ? gain.impl_ptr() : nullptr;
  auto pb = bias.defined() ? bias.impl_ptr() : nullptr;
  return detail::make_result(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [px, pg, pb, xhat, inv_std, rows, d](TensorImpl& self) {
        if (auto* gg = detail::grad_of(pg)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) (*gg)[i % d] += self.grad[i] * (*xhat)[i];
        }
        if (auto* gb = detail::grad_of(pb)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i % d] += self.grad[i];
        }
        auto* gx = detail::grad_of(px);
        if (!gx) return;
        const Real* gain_p = pg ? pg->data.data() : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          Real m1 = 0, m2 = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t idx = r * d + j;
            const Real dxh = self.grad[idx] * (gain_p ? gain_p[j] : 1.0);
            m1 += dxh;
            m2 += dxh * (*xhat)[idx];
          }
          m1 /= static_cast<Real>(d);
          m2 /= static_cast<Real>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t idx = r * d + j;
            const Real dxh = self.grad[idx] * (gain_p ? gain_p[j] : 1.0);
            (*gx)[idx] += (*inv_std)[r] * (dxh - m1 - (*xhat)[idx] * m2);
          }
        }
      });
}

struct BatchNormState {
  std::vector<Real> running_mean;
  std::vector<Real> running_var;
  Real momentum = 0.1;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

enum class NormMode { kTrain, kEval };

// Per-channel normalisation of x[n, d] over the n axis.
inline Tensor batch_norm(const Tensor& x, BatchNormState& state, NormMode mode,
                         const Tensor& gain = Tensor(), const Tensor& bias = Tensor(), Real eps = 1e-5) {
  if (x.rank() != 2) throw DimensionError("batch_norm expects [n, d]");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (state.running_mean.size() != d) throw DimensionError("batch_norm state channel mismatch");
  if (mode == NormMode::kTrain && n == 0) throw EmptyBatchError("batch_norm on empty batch in train mode");
  std::vector<Real> mu(d, 0.0), var(d, 0.0);
  const auto& xd = x.data();
  if (mode == NormMode::kTrain) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) mu[c] += xd[i * d + c];
    for (std::size_t c = 0; c < d; ++c) mu[c] /= static_cast<Real>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) var[c] += (xd[i * d + c] - mu[c]) * (xd[i * d + c] - mu[c]);
    for (std::size_t c = 0; c < d; ++c) var[c] /= static_cast<Real>(n);
    for (std::size_t c = 0; c < d; ++c) {
      const Real unbiased = n > 1 ? var[c] * static_cast<Real>(n) / static_cast<Real>(n - 1) : var[c];
      state.running_mean[c] = (1 - state.momentum) * state.running_mean[c] + state.momentum * mu[c];
      state.running_var[c] = (1 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    }
  } else {
    mu = state.running_mean;
    var = state.running_var;
  }
  auto inv_std = std::make_shared<std::vector<Real>>(d);
  for (std::size_t c = 0; c < d; ++c) (*inv_std)[c] = 1.0 / std::sqrt(var[c] + eps);
  auto xhat = std::make_shared<std::vector<Real>>(x.numel());
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t idx = i * d + c;
      const Real h = (xd[idx] - mu[c]) * (*inv_std)[c];
      (*xhat)[idx] = h;
      out[idx] = h * (gain.defined() ? gain.data()[c] : 1.0) + (bias.defined() ? bias.data()[c] : 0.0);
    }
  auto px = x.impl_ptr();
  auto pg = gain.defined() ? gain.impl_ptr() : nullptr;
  auto pb = bias.defined() ? bias.impl_ptr() : nullptr;
  const bool batch_stats = mode == NormMode::kTrain;
  return detail::make_result(
      "batch_norm", x.shape(), std::move(out), {x, gain, bias},
      [px, pg, pb, xhat, inv_std, n, d, batch_stats](TensorImpl& self) {
        if (auto* gg = detail::grad_of(pg)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) (*gg)[i % d] += self.grad[i] * (*xhat)[i];
        }
        if (auto* gb = detail::grad_of(pb)) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i % d] += self.grad[i];
        }
        auto* gx = detail::grad_of(px);
        if (!gx) return;
        const Real* gain_p = pg ? pg->data.data() : nullptr;
        for (std::size_t c = 0; c < d; ++c) {
          const Real g = gain_p ? gain_p[c] : 1.0;
          if (!batch_stats) {
            for (std::size_t i = 0; i < n; ++i) (*gx)[i * d + c] += self.grad[i * d + c] * g * (*inv_std)[c];
            continue;
          }
          Real m1 = 0, m2 = 0;
          for (std::size_t i = 0; i < n; ++i) {
            const Real dxh = self.grad[i * d + c] * g;
            m1 += dxh;
            m2 += dxh * (*xhat)[i * d + c];
          }
          m1 /= static_cast<Real>(n);
          m2 /= static_cast<Real>(n);
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t idx = i * d + c;
            (*gx)[idx] += (*inv_std)[c] * (self.grad[idx] * g - m1 - (*xhat)[idx] * m2);
          }
        }
      });
}

}  // namespace ftsp
