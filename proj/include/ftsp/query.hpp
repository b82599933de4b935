#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "ftsp/geometry.hpp"
#include "ftsp/nn.hpp"

namespace ftsp {

namespace detail {

inline std::vector<Real> sine_frequencies(std::size_t coords, std::size_t d) {
  const std::size_t per = d / (2 * coords);
  std::vector<Real> omega(per);
  for (std::size_t i = 0; i < per; ++i) {
    omega[i] = std::pow(10000.0, -2.0 * static_cast<Real>(i) * static_cast<Real>(2 * coords) /
                                     static_cast<Real>(d));
  }
  return omega;
}

inline void check_sine_dims(std::size_t coords, std::size_t d) {
  if (coords == 0 || d == 0 || d % (2 * coords) != 0) {
    throw ContractError("sine encoding width " + std::to_string(d) + " is not divisible by 2 x " +
                        std::to_string(coords) + " coordinates");
  }
}

}  // namespace detail

// Rows of coords[n, c] -> [n, d]. Coordinate j owns dims [j*d/c, (j+1)*d/c) holding
// interleaved sin(2 pi t w_i), cos(2 pi t w_i). Differentiable in coords.
inline Tensor sine_embed(const Tensor& coords, std::size_t d) {
  if (coords.rank() != 2) throw DimensionError("sine_embed expects [n, c] coordinates");
  const std::size_t n = coords.dim(0), c = coords.dim(1);
  detail::check_sine_dims(c, d);
  const auto omega = detail::sine_frequencies(c, d);
  const std::size_t per = omega.size();
  const Real two_pi = 2.0 * std::numbers::pi;
  std::vector<Real> out(n * d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const Real t = coords.data()[r * c + j];
      for (std::size_t i = 0; i < per; ++i) {
        const Real arg = two_pi * t * omega[i];
        out[r * d + j * 2 * per + 2 * i] = std::sin(arg);
        out[r * d + j * 2 * per + 2 * i + 1] = std::cos(arg);
      }
    }
  auto pc = coords.impl_ptr();
  return detail::make_result("sine_embed", {n, d}, std::move(out), {coords},
                             [pc, omega, n, c, d, per, two_pi](TensorImpl& self) {
                               auto* gc = detail::grad_of(pc);
                               if (!gc) return;
                               for (std::size_t r = 0; r < n; ++r)
                                 for (std::size_t j = 0; j < c; ++j) {
                                   Real acc = 0;
                                   for (std::size_t i = 0; i < per; ++i) {
                                     const std::size_t base = r * d + j * 2 * per + 2 * i;
                                     const Real w = two_pi * omega[i];
                                     // d sin = w cos, d cos = -w sin
                                     acc += self.grad[base] * w * self.data[base + 1] -
                                            self.grad[base + 1] * w * self.data[base];
                                   }
                                   (*gc)[r * c + j] += acc;
                                 }
                             });
}

inline Tensor sine_encode(std::span<const Real> coords, std::size_t d) {
  const Tensor t = Tensor::from_data({1, coords.size()}, std::vector<Real>(coords.begin(), coords.end()));
  return reshape(sine_embed(t, d), {d});
}

inline Tensor points_tensor(const std::vector<Point2>& pts) {
  std::vector<Real> v;
  v.reserve(pts.size() * 2);
  for (const auto& p : pts) {
    v.push_back(p.x);
    v.push_back(p.y);
  }
  return Tensor::from_data({pts.size(), 2}, std::move(v));
}

inline Tensor boxes_tensor(const std::vector<AnchorBox>& boxes) {
  std::vector<Real> v;
  v.reserve(boxes.size() * 4);
  for (const auto& b : boxes) v.insert(v.end(), {b.s, b.r, b.c, b.d});
  return Tensor::from_data({boxes.size(), 4}, std::move(v));
}

// theta: box (s, r, c, d) -> sine encoding -> linear -> layer norm.
struct BoxPositionEncoder {
  Linear proj;
  LayerNorm norm;
  std::size_t d = 0;

  BoxPositionEncoder() = default;
  BoxPositionEncoder(std::size_t dim, Rng& rng) : proj(dim, dim, rng), norm(dim), d(dim) {}

  // boxes[n, 4] -> [n, d]
  Tensor operator()(const Tensor& boxes) const { return norm(proj(sine_embed(boxes, d))); }

  void collect(ParamList& out, const std::string& prefix) const {
    proj.collect(out, prefix + ".proj");
    norm.collect(out, prefix + ".norm");
  }
};

// phi: point (x, y) -> sine encoding -> two-layer perceptron.
struct PointPositionEncoder {
  Mlp mlp;
  std::size_t d = 0;

  PointPositionEncoder() = default;
  PointPositionEncoder(std::size_t dim, Rng& rng) : mlp(dim, dim, dim, rng), d(dim) {}

  // points[n, 2] -> [n, d]
  Tensor operator()(const Tensor& points) const { return mlp(sine_embed(points, d)); }

  void collect(ParamList& out, const std::string& prefix) const { mlp.collect(out, prefix + ".mlp"); }
};

struct CompositeQuerySet {
  std::size_t K = 0, M = 0, A = 0, d = 0;
  Tensor point_positional;  // [K, M, d]
  Tensor char_positional;   // [K, A, d]
  Tensor point_content;     // [M, d], shared across the K groups
  Tensor char_content;      // [A, d], shared across the K groups
  std::vector<AnchorBox> boxes;             // box mode anchors (empty in point mode)
  std::vector<ControlPolygon> ref_points;   // K polygons of M reference points
  std::vector<std::vector<Point2>> char_refs;  // K x A recognition reference points

  Tensor point_queries() const { return add(point_positional, point_content); }
  Tensor char_queries() const { return add(char_positional, char_content); }
};

enum class QueryMode { kBox, kPoint };

// Owns the shared content embeddings and both positional encoders.
struct QueryBuilder {
  std::size_t M = 0, A = 0, d = 0;
  Tensor point_content;
  Tensor char_content;
  BoxPositionEncoder theta;
  PointPositionEncoder phi;

  QueryBuilder() = default;
  QueryBuilder(std::size_t points, std::size_t chars, std::size_t dim, Rng& rng)
      : M(points), A(chars), d(dim), theta(dim, rng), phi(dim, rng) {
    std::vector<Real> pc(M * d), cc(A * d);
    for (Real& v : pc) v = rng.normal(0.0, 1.0);
    for (Real& v : cc) v = rng.normal(0.0, 1.0);
    point_content = make_param({M, d}, std::move(pc));
    char_content = make_param({A, d}, std::move(cc));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.add(prefix + ".point_content", point_content);
    out.add(prefix + ".char_content", char_content);
    theta.collect(out, prefix + ".theta");
    phi.collect(out, prefix + ".phi");
  }

  // Only the encoder the given mode actually uses.
  void collect(ParamList& out, const std::string& prefix, QueryMode mode) const {
    out.add(prefix + ".point_content", point_content);
    out.add(prefix + ".char_content", char_content);
    if (mode == QueryMode::kBox) {
      theta.collect(out, prefix + ".theta");
    } else {
      phi.collect(out, prefix + ".phi");
    }
  }

  // Positional part per group from boxes[K, 4], repeated over `count` sub-queries.
  Tensor box_positional(const Tensor& boxes, std::size_t count) const {
    return broadcast_axis(theta(boxes), 1, count);
  }
  Tensor box_positional(const std::vector<AnchorBox>& boxes, std::size_t count) const {
    return box_positional(boxes_tensor(boxes), count);
  }

  // Positional part from explicit points[groups * count, 2].
  Tensor point_positional(const Tensor& pts, std::size_t groups, std::size_t count) const {
    return reshape(phi(pts), {groups, count, d});
  }
  Tensor point_positional(const std::vector<Point2>& pts, std::size_t groups, std::size_t count) const {
    return point_positional(points_tensor(pts), groups, count);
  }

  CompositeQuerySet compose_box_queries(const std::vector<AnchorBox>& boxes) const {
    if (boxes.empty()) throw ContractError("compose_box_queries needs at least one box");
    CompositeQuerySet q = empty_set(boxes.size());
    q.boxes = boxes;
    for (const auto& b : boxes) {
      // Fewer than 4 sub-queries cannot span a polygon; such sets carry no reference points.
      if (M >= 4) q.ref_points.push_back(sample_reference_points(b, M));
      q.char_refs.push_back(box_midline(b, A));
    }
    q.point_positional = box_positional(boxes, M);
    q.char_positional = box_positional(boxes, A);
    return q;
  }

  CompositeQuerySet compose_point_queries(const std::vector<ControlPolygon>& polys) const {
    if (polys.empty()) throw ContractError("compose_point_queries needs at least one polygon");
    CompositeQuerySet q = empty_set(polys.size());
    std::vector<Point2> flat, char_flat;
    for (const auto& p : polys) {
      if (p.size() != M) throw ContractError("polygon point count differs from M");
      flat.insert(flat.end(), p.points.begin(), p.points.end());
      q.char_refs.push_back(midline_points(p, A));
      char_flat.insert(char_flat.end(), q.char_refs.back().begin(), q.char_refs.back().end());
    }
    q.ref_points = polys;
    q.point_positional = point_positional(flat, polys.size(), M);
    q.char_positional = point_positional(char_flat, polys.size(), A);
    return q;
  }

 private:
  CompositeQuerySet empty_set(std::size_t K) const {
    CompositeQuerySet q;
    q.K = K;
    q.M = M;
    q.A = A;
    q.d = d;
    q.point_content = point_content;
    q.char_content = char_content;
    return q;
  }
};

}  // namespace ftsp
