#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "ftsp/errors.hpp"
#include "ftsp/ops.hpp"

namespace ftsp {

struct Point2 {
  Real x = 0;
  Real y = 0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

// Center-size box in normalised image coordinates.
struct AnchorBox {
  Real s = 0;  // center x
  Real r = 0;  // center y
  Real c = 0;  // width
  Real d = 0;  // height

  Real left() const { return s - c / 2; }
  Real right() const { return s + c / 2; }
  Real top() const { return r - d / 2; }
  Real bottom() const { return r + d / 2; }
  Real area() const { return c * d; }

  friend bool operator==(const AnchorBox&, const AnchorBox&) = default;
};

// M control points, clockwise from the top-left corner: the first M/2 run along
// the top edge left to right, the rest along the bottom edge right to left.
struct ControlPolygon {
  std::vector<Point2> points;

  std::size_t size() const { return points.size(); }
};

// Character class ids over an alphabet V; id |V| is the end-of-text padding class.
struct Transcript {
  std::vector<int> chars;
};

// Annotations of one scene; the three lists are index-aligned.
struct GroundTruth {
  std::vector<ControlPolygon> polygons;
  std::vector<Transcript> transcripts;
  std::vector<AnchorBox> boxes;

  std::size_t size() const { return polygons.size(); }
};

inline AnchorBox bounding_box_of(const std::vector<Point2>& pts) {
  if (pts.empty()) return {};
  Real x0 = pts[0].x, x1 = pts[0].x, y0 = pts[0].y, y1 = pts[0].y;
  for (const auto& p : pts) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  return {(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0};
}

inline AnchorBox bounding_box(const ControlPolygon& poly) { return bounding_box_of(poly.points); }

inline ControlPolygon sample_reference_points(const AnchorBox& box, std::size_t count) {
  if (count < 4 || count % 2 != 0) {
    throw ContractError("reference point count must be even and >= 4, got " + std::to_string(count));
  }
  const std::size_t half = count / 2;
  const Real step_den = static_cast<Real>(half - 1);
  ControlPolygon poly;
  poly.points.reserve(count);
  for (std::size_t m = 1; m <= count; ++m) {
    if (m <= half) {
      poly.points.push_back(
          {box.s - box.c / 2 + static_cast<Real>(m - 1) * box.c / step_den, box.r - box.d / 2});
    } else {
      poly.points.push_back(
          {box.s - box.c / 2 + static_cast<Real>(count - m) * box.c / step_den, box.r + box.d / 2});
    }
  }
  return poly;
}

// Signed shoelace area; positive for clockwise order in y-down image coordinates.
inline Real signed_area(const std::vector<Point2>& pts) {
  Real a = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const Point2& p = pts[i];
    const Point2& q = pts[(i + 1) % pts.size()];
    a += p.x * q.y - q.x * p.y;
  }
  return a / 2;
}

inline Real polygon_area(const ControlPolygon& poly) { return std::abs(signed_area(poly.points)); }

namespace detail {

// Row a holds the weights of the M control points producing midline point a: the
// midline joins midpoints of opposing top/bottom points and is sampled at index
// fractions (a + 0.5) / count.
inline std::vector<Real> midline_weights(std::size_t m, std::size_t count) {
  if (m < 4 || m % 2 != 0) throw ContractError("midline needs an even polygon with >= 4 points");
  const std::size_t half = m / 2;
  std::vector<Real> w(count * m, 0.0);
  for (std::size_t a = 0; a < count; ++a) {
    const Real u = (static_cast<Real>(a) + 0.5) / static_cast<Real>(count) * static_cast<Real>(half - 1);
    const std::size_t j = std::min(static_cast<std::size_t>(u), half - 2);
    const Real t = u - static_cast<Real>(j);
    w[a * m + j] += (1 - t) / 2;
    w[a * m + m - 1 - j] += (1 - t) / 2;
    w[a * m + j + 1] += t / 2;
    w[a * m + m - 2 - j] += t / 2;
  }
  return w;
}

}  // namespace detail

inline std::vector<Point2> midline_points(const ControlPolygon& poly, std::size_t count) {
  const std::size_t m = poly.size();
  const auto w = detail::midline_weights(m, count);
  std::vector<Point2> out(count);
  for (std::size_t a = 0; a < count; ++a)
    for (std::size_t j = 0; j < m; ++j) {
      out[a].x += w[a * m + j] * poly.points[j].x;
      out[a].y += w[a * m + j] * poly.points[j].y;
    }
  return out;
}

// Horizontal centerline of a box sampled at fractions (a + 0.5) / count.
inline std::vector<Point2> box_midline(const AnchorBox& box, std::size_t count) {
  std::vector<Point2> out(count);
  for (std::size_t a = 0; a < count; ++a) {
    out[a] = {box.left() + box.c * (static_cast<Real>(a) + 0.5) / static_cast<Real>(count), box.r};
  }
  return out;
}

namespace detail {

// Marks which of `cols` cell centers on the row at height yc fall inside the polygon (even-odd).
inline void fill_row(const std::vector<Point2>& pts, Real yc, Real x0, Real cell_w, std::size_t cols,
                     std::vector<unsigned char>& inside, std::vector<Real>& xs) {
  xs.clear();
  const std::size_t n = pts.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Point2& p = pts[i];
    const Point2& q = pts[(i + 1) % n];
    if ((p.y > yc) != (q.y > yc)) xs.push_back(p.x + (yc - p.y) * (q.x - p.x) / (q.y - p.y));
  }
  std::sort(xs.begin(), xs.end());
  std::fill(inside.begin(), inside.end(), 0);
  for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
    // Cell j is inside when its center x0 + (j + 0.5) * cell_w lies in [xs[k], xs[k+1]).
    const Real lo = (xs[k] - x0) / cell_w - 0.5;
    const Real hi = (xs[k + 1] - x0) / cell_w - 0.5;
    auto j0 = static_cast<std::ptrdiff_t>(std::ceil(lo));
    auto j1 = static_cast<std::ptrdiff_t>(std::ceil(hi)) - 1;
    j0 = std::max<std::ptrdiff_t>(j0, 0);
    j1 = std::min<std::ptrdiff_t>(j1, static_cast<std::ptrdiff_t>(cols) - 1);
    for (std::ptrdiff_t j = j0; j <= j1; ++j) inside[static_cast<std::size_t>(j)] = 1;
  }
}

}  // namespace detail

inline constexpr std::size_t kIouRasterSize = 256;

// Rasterised IoU: even-odd fill of both polygons on a grid spanning their joint bounding box.
inline Real polygon_iou(const ControlPolygon& a, const ControlPolygon& b,
                        std::size_t grid = kIouRasterSize) {
  if (a.size() < 3 || b.size() < 3) return 0.0;
  if (polygon_area(a) <= 0 || polygon_area(b) <= 0) return 0.0;
  std::vector<Point2> all = a.points;
  all.insert(all.end(), b.points.begin(), b.points.end());
  const AnchorBox ext = bounding_box_of(all);
  if (ext.c <= 0 || ext.d <= 0) return 0.0;
  const Real cell_w = ext.c / static_cast<Real>(grid);
  const Real cell_h = ext.d / static_cast<Real>(grid);
  std::vector<unsigned char> in_a(grid), in_b(grid);
  std::vector<Real> xs;
  std::size_t inter = 0, uni = 0;
  for (std::size_t row = 0; row < grid; ++row) {
    const Real yc = ext.top() + (static_cast<Real>(row) + 0.5) * cell_h;
    detail::fill_row(a.points, yc, ext.left(), cell_w, grid, in_a, xs);
    detail::fill_row(b.points, yc, ext.left(), cell_w, grid, in_b, xs);
    for (std::size_t j = 0; j < grid; ++j) {
      inter += in_a[j] & in_b[j];
      uni += in_a[j] | in_b[j];
    }
  }
  return uni ? static_cast<Real>(inter) / static_cast<Real>(uni) : 0.0;
}

inline Real box_iou(const AnchorBox& a, const AnchorBox& b) {
  const Real iw = std::max(0.0, std::min(a.right(), b.right()) - std::max(a.left(), b.left()));
  const Real ih = std::max(0.0, std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top()));
  const Real inter = iw * ih;
  const Real uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline Real box_giou(const AnchorBox& a, const AnchorBox& b) {
  const Real iw = std::max(0.0, std::min(a.right(), b.right()) - std::max(a.left(), b.left()));
  const Real ih = std::max(0.0, std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top()));
  const Real inter = iw * ih;
  const Real uni = a.area() + b.area() - inter;
  const Real cw = std::max(a.right(), b.right()) - std::min(a.left(), b.left());
  const Real ch = std::max(a.bottom(), b.bottom()) - std::min(a.top(), b.top());
  const Real enclosing = cw * ch;
  return inter / uni - (enclosing - uni) / enclosing;
}

// Differentiable counterpart of sample_reference_points: boxes[K, 4] -> [K, M, 2].
inline Tensor reference_points(const Tensor& boxes, std::size_t count) {
  if (count < 4 || count % 2 != 0) throw ContractError("reference point count must be even and >= 4");
  const std::size_t half = count / 2;
  // Columns: x_m then y_m, as linear combinations of (s, r, c, d).
  std::vector<Real> w(4 * count * 2, 0.0);
  for (std::size_t m = 0; m < count; ++m) {
    const std::size_t step = m < half ? m : count - 1 - m;
    const Real fx = -0.5 + static_cast<Real>(step) / static_cast<Real>(half - 1);
    const Real fy = m < half ? -0.5 : 0.5;
    w[0 * count * 2 + m * 2] = 1;
    w[2 * count * 2 + m * 2] = fx;
    w[1 * count * 2 + m * 2 + 1] = 1;
    w[3 * count * 2 + m * 2 + 1] = fy;
  }
  const Tensor flat = matmul(boxes, Tensor::from_data({4, count * 2}, std::move(w)));
  return reshape(flat, {boxes.dim(0), count, 2});
}

// points[K, M, 2] -> [K, count, 2] along each polygon's midline.
inline Tensor midline(const Tensor& points, std::size_t count) {
  const std::size_t K = points.dim(0), M = points.dim(1);
  const auto w = detail::midline_weights(M, count);
  std::vector<Real> wt(M * count);
  for (std::size_t a = 0; a < count; ++a)
    for (std::size_t j = 0; j < M; ++j) wt[j * count + a] = w[a * M + j];
  const Tensor cols = matmul(permute(points, {0, 2, 1}), Tensor::from_data({M, count}, std::move(wt)));
  return reshape(permute(cols, {0, 2, 1}), {K, count, 2});
}

// Differentiable GIoU between rows of pred[n, 4] and target[n, 4], both (s, r, c, d).
inline Tensor box_giou(const Tensor& pred, const Tensor& target) {
  if (pred.rank() != 2 || pred.dim(1) != 4 || pred.shape() != target.shape()) {
    throw DimensionError("box_giou expects matching [n, 4] tensors");
  }
  auto corners = [](const Tensor& boxes) {
    const Tensor s = slice(boxes, 1, 0, 1), r = slice(boxes, 1, 1, 1);
    const Tensor hw = scale(slice(boxes, 1, 2, 1), 0.5), hh = scale(slice(boxes, 1, 3, 1), 0.5);
    return std::array<Tensor, 4>{sub(s, hw), sub(r, hh), add(s, hw), add(r, hh)};
  };
  const auto [ax0, ay0, ax1, ay1] = corners(pred);
  const auto [bx0, by0, bx1, by1] = corners(target);
  const Tensor zero = Tensor::zeros({pred.dim(0), 1});
  const Tensor iw = maximum(sub(minimum(ax1, bx1), maximum(ax0, bx0)), zero);
  const Tensor ih = maximum(sub(minimum(ay1, by1), maximum(ay0, by0)), zero);
  const Tensor inter = mul(iw, ih);
  const Tensor area_a = mul(sub(ax1, ax0), sub(ay1, ay0));
  const Tensor area_b = mul(sub(bx1, bx0), sub(by1, by0));
  const Tensor uni = sub(add(area_a, area_b), inter);
  const Tensor cw = sub(maximum(ax1, bx1), minimum(ax0, bx0));
  const Tensor ch = sub(maximum(ay1, by1), minimum(ay0, by0));
  const Tensor enclosing = mul(cw, ch);
  const Tensor giou = sub(div(inter, uni), div(sub(enclosing, uni), enclosing));
  return reshape(giou, {pred.dim(0)});
}

}  // namespace ftsp
