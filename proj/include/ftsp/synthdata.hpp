#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <future>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ftsp/font5x7.hpp"
#include "ftsp/geometry.hpp"
#include "ftsp/rng.hpp"

namespace ftsp {

// One text line. Coordinates are canvas pixels; the curve runs through the
// vertical center of the glyphs.
struct TextInstanceSpec {
  std::array<Point2, 3> anchors{};  // start, middle (t = 0.5), end
  Real height = 0;                   // glyph cell height
  std::vector<int> chars;            // class ids into SceneSpec::alphabet
  Real intensity = 1;                // stroke gray level

  friend bool operator==(const TextInstanceSpec&, const TextInstanceSpec&) = default;
};

struct BackgroundSpec {
  Real base = 0.2;
  Real grad_x = 0, grad_y = 0;  // linear ramps across the canvas
  Real noise = 0;               // per-pixel hash noise amplitude
  std::array<Real, 3> tint{1, 1, 1};

  friend bool operator==(const BackgroundSpec&, const BackgroundSpec&) = default;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t canvas = 64;
  std::vector<std::uint32_t> alphabet;
  Real pad = 1.0;  // polygon margin around the glyph band, canvas pixels
  BackgroundSpec background;
  std::vector<TextInstanceSpec> instances;

  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct SceneConfig {
  std::size_t canvas = 64;
  std::vector<std::uint32_t> alphabet{'0', '1', '2', '3', '4', '5', '6', '7', '8', '9'};
  std::size_t max_instances = 5;
  std::size_t max_chars = 8;
  Real min_height = 7.0;
  Real max_height = 10.0;
  Real max_angle = 0.35;  // radians
  Real max_bend = 0.15;   // middle-anchor offset as a fraction of the chord
  Real margin = 1.0;
  Real pad = 1.0;
  Real max_iou = 0.1;
  std::size_t attempts = 100;

  void validate() const {
    if (alphabet.empty()) throw ConfigError("alphabet must not be empty");
    if (max_chars == 0) throw ConfigError("max_chars must be positive");
    if (min_height <= 0 || max_height < min_height) throw ConfigError("bad glyph height range");
    if (canvas < 16) throw ConfigError("canvas too small");
  }
};

inline std::vector<std::uint32_t> ascii_alphabet(std::size_t count) {
  std::vector<std::uint32_t> a;
  for (std::uint32_t c = 0x21; c <= 0x7E && a.size() < count; ++c) a.push_back(c);
  return a;
}

// Quadratic curve through three anchors at t = 0, 0.5, 1, tabulated by arc length.
class QuadCurve {
 public:
  static constexpr std::size_t kSteps = 1024;

  QuadCurve(const std::array<Point2, 3>& a, Real offset = 0) : a_(a), offset_(offset) {
    pts_.resize(kSteps + 1);
    len_.resize(kSteps + 1);
    for (std::size_t i = 0; i <= kSteps; ++i) pts_[i] = eval(static_cast<Real>(i) / kSteps);
    len_[0] = 0;
    for (std::size_t i = 1; i <= kSteps; ++i)
      len_[i] = len_[i - 1] + std::hypot(pts_[i].x - pts_[i - 1].x, pts_[i].y - pts_[i - 1].y);
  }

  Real length() const { return len_.back(); }

  // Point displaced by `offset` along the downward unit normal.
  Point2 eval(Real t) const {
    const Real w0 = 2 * t * t - 3 * t + 1, w1 = -4 * t * t + 4 * t, w2 = 2 * t * t - t;
    const Real d0 = 4 * t - 3, d1 = -8 * t + 4, d2 = 4 * t - 1;
    Point2 p{w0 * a_[0].x + w1 * a_[1].x + w2 * a_[2].x, w0 * a_[0].y + w1 * a_[1].y + w2 * a_[2].y};
    const Point2 tan = unit({d0 * a_[0].x + d1 * a_[1].x + d2 * a_[2].x, d0 * a_[0].y + d1 * a_[1].y + d2 * a_[2].y});
    p.x += -tan.y * offset_;
    p.y += tan.x * offset_;
    return p;
  }

  Real t_at(Real s) const {
    s = std::clamp(s, 0.0, length());
    const auto it = std::lower_bound(len_.begin(), len_.end(), s);
    std::size_t i = static_cast<std::size_t>(it - len_.begin());
    if (i == 0) return 0;
    const Real seg = len_[i] - len_[i - 1];
    const Real f = seg > 0 ? (s - len_[i - 1]) / seg : 0;
    return (static_cast<Real>(i - 1) + f) / kSteps;
  }

  Point2 at_length(Real s) const {
    s = std::clamp(s, 0.0, length());
    const auto it = std::lower_bound(len_.begin(), len_.end(), s);
    const std::size_t i = static_cast<std::size_t>(it - len_.begin());
    if (i == 0) return pts_[0];
    const Real seg = len_[i] - len_[i - 1];
    const Real f = seg > 0 ? (s - len_[i - 1]) / seg : 0;
    return {pts_[i - 1].x + f * (pts_[i].x - pts_[i - 1].x), pts_[i - 1].y + f * (pts_[i].y - pts_[i - 1].y)};
  }

  Point2 tangent(Real t) const {
    const Real d0 = 4 * t - 3, d1 = -8 * t + 4, d2 = 4 * t - 1;
    return unit({d0 * a_[0].x + d1 * a_[1].x + d2 * a_[2].x, d0 * a_[0].y + d1 * a_[1].y + d2 * a_[2].y});
  }

 private:
  static Point2 unit(Point2 v) {
    const Real n = std::hypot(v.x, v.y);
    return n > 0 ? Point2{v.x / n, v.y / n} : Point2{1, 0};
  }

  std::array<Point2, 3> a_;
  Real offset_;
  std::vector<Point2> pts_;
  std::vector<Real> len_;
};

inline Real glyph_advance(Real height) { return height * 6.0 / 7.0; }

// Control polygon in canvas pixels: equal arc-length steps along both offset curves.
inline ControlPolygon instance_polygon(const TextInstanceSpec& inst, Real pad, std::size_t count) {
  if (count < 4 || count % 2 != 0) throw ContractError("control point count must be even and >= 4");
  const Real off = inst.height / 2 + pad;
  const QuadCurve top(inst.anchors, -off), bottom(inst.anchors, off);
  const std::size_t half = count / 2;
  ControlPolygon poly;
  poly.points.reserve(count);
  for (std::size_t k = 0; k < half; ++k)
    poly.points.push_back(top.at_length(top.length() * static_cast<Real>(k) / static_cast<Real>(half - 1)));
  for (std::size_t k = 0; k < half; ++k)
    poly.points.push_back(
        bottom.at_length(bottom.length() * static_cast<Real>(half - 1 - k) / static_cast<Real>(half - 1)));
  return poly;
}

namespace detail {

inline ControlPolygon scaled(const ControlPolygon& p, Real sx, Real sy) {
  ControlPolygon out = p;
  for (auto& q : out.points) {
    q.x *= sx;
    q.y *= sy;
  }
  return out;
}

// Anchors for a curve of arc length `len` centred at `c`, chord at `angle`, bowed by `bend`.
inline std::array<Point2, 3> place_curve(Point2 c, Real angle, Real bend, Real len) {
  const Point2 u{std::cos(angle), std::sin(angle)}, v{-std::sin(angle), std::cos(angle)};
  const std::array<Point2, 3> unit{Point2{-u.x / 2, -u.y / 2}, Point2{bend * v.x, bend * v.y},
                                   Point2{u.x / 2, u.y / 2}};
  const Real scale = len / QuadCurve(unit).length();
  std::array<Point2, 3> out;
  for (std::size_t i = 0; i < 3; ++i) out[i] = {c.x + unit[i].x * scale, c.y + unit[i].y * scale};
  return out;
}

inline Real hash_noise(std::uint64_t seed, std::size_t x, std::size_t y) {
  const std::uint64_t h = mix_seed(seed, (static_cast<std::uint64_t>(y) << 32) ^ x);
  return static_cast<Real>(h >> 11) * (2.0 / 9007199254740992.0) - 1.0;
}

}  // namespace detail

inline SceneSpec generate_scene(std::uint64_t seed, const SceneConfig& cfg = {}) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0x5CE4E));
  SceneSpec spec;
  spec.seed = seed;
  spec.canvas = cfg.canvas;
  spec.alphabet = cfg.alphabet;
  spec.pad = cfg.pad;

  const bool dark = rng.uniform() < 0.5;
  auto& bg = spec.background;
  bg.base = dark ? rng.uniform(0.05, 0.3) : rng.uniform(0.7, 0.95);
  bg.grad_x = rng.uniform(-0.1, 0.1);
  bg.grad_y = rng.uniform(-0.1, 0.1);
  bg.noise = rng.uniform(0.0, 0.05);
  for (auto& t : bg.tint) t = rng.uniform(0.8, 1.0);

  const auto target = static_cast<std::size_t>(rng.integer(0, static_cast<int>(cfg.max_instances)));
  const Real S = static_cast<Real>(cfg.canvas);
  std::vector<ControlPolygon> placed;
  for (std::size_t n = 0; n < target; ++n) {
    bool ok = false;
    for (std::size_t attempt = 0; attempt < cfg.attempts && !ok; ++attempt) {
      TextInstanceSpec inst;
      inst.height = rng.uniform(cfg.min_height, cfg.max_height);
      const auto fit = static_cast<std::size_t>((S - 2 * cfg.margin - 2) / glyph_advance(inst.height));
      const auto max_len = std::max<std::size_t>(1, std::min(cfg.max_chars, fit));
      const auto len = static_cast<std::size_t>(rng.integer(1, static_cast<int>(max_len)));
      for (std::size_t k = 0; k < len; ++k)
        inst.chars.push_back(rng.integer(0, static_cast<int>(cfg.alphabet.size()) - 1));
      inst.intensity = dark ? rng.uniform(0.75, 1.0) : rng.uniform(0.0, 0.25);
      const Real angle = rng.uniform(-cfg.max_angle, cfg.max_angle);
      const Real arc = glyph_advance(inst.height) * static_cast<Real>(len);
      // short words bend less so the offset curves never fold
      const Real bend = rng.uniform(-cfg.max_bend, cfg.max_bend) * std::min(1.0, arc / (4 * inst.height));
      const Point2 c{rng.uniform(0, S), rng.uniform(0, S)};
      inst.anchors = detail::place_curve(c, angle, bend, arc);

      const ControlPolygon poly = instance_polygon(inst, cfg.pad, 16);
      const bool inside = std::all_of(poly.points.begin(), poly.points.end(), [&](const Point2& p) {
        return p.x >= cfg.margin && p.y >= cfg.margin && p.x <= S - cfg.margin && p.y <= S - cfg.margin;
      });
      if (!inside) continue;
      const ControlPolygon unitp = detail::scaled(poly, 1 / S, 1 / S);
      ok = std::all_of(placed.begin(), placed.end(),
                       [&](const ControlPolygon& o) { return polygon_iou(unitp, o) < cfg.max_iou; });
      if (ok) {
        placed.push_back(unitp);
        spec.instances.push_back(std::move(inst));
      }
    }
    if (!ok) break;
  }
  return spec;
}

struct RenderedScene {
  Tensor image;  // [H, W, 3]
  GroundTruth gt;
  std::vector<std::size_t> glyph_counts;  // glyphs with at least one inked pixel, per instance
};

inline GroundTruth scene_ground_truth(const SceneSpec& spec, std::size_t control_points) {
  GroundTruth gt;
  const Real S = static_cast<Real>(spec.canvas);
  for (const auto& inst : spec.instances) {
    const ControlPolygon poly = detail::scaled(instance_polygon(inst, spec.pad, control_points), 1 / S, 1 / S);
    gt.boxes.push_back(bounding_box(poly));
    gt.polygons.push_back(poly);
    gt.transcripts.push_back({inst.chars});
  }
  return gt;
}

// Rasterises the scene at size x size pixels with 3x3 supersampling.
inline RenderedScene render_scene(const SceneSpec& spec, std::size_t size, std::size_t control_points) {
  if (size == 0) throw ContractError("render size must be positive");
  const Real k = static_cast<Real>(size) / static_cast<Real>(spec.canvas);
  const auto& bg = spec.background;
  std::vector<Real> img(size * size * 3);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const Real u = (static_cast<Real>(x) + 0.5) / static_cast<Real>(size) - 0.5;
      const Real v = (static_cast<Real>(y) + 0.5) / static_cast<Real>(size) - 0.5;
      const Real g = bg.base + bg.grad_x * u + bg.grad_y * v + bg.noise * detail::hash_noise(spec.seed, x, y);
      for (std::size_t c = 0; c < 3; ++c) img[(y * size + x) * 3 + c] = std::clamp(g * bg.tint[c], 0.0, 1.0);
    }

  RenderedScene out;
  std::vector<Real> cover(size * size);
  for (const auto& inst : spec.instances) {
    std::fill(cover.begin(), cover.end(), 0.0);
    const QuadCurve mid(inst.anchors);
    const Real h = inst.height * k, w = h * 5.0 / 7.0, dot = h / 7.0;
    const Real adv = mid.length() / static_cast<Real>(inst.chars.size());
    std::size_t inked = 0;
    for (std::size_t i = 0; i < inst.chars.size(); ++i) {
      const auto cid = static_cast<std::size_t>(inst.chars[i]);
      if (cid >= spec.alphabet.size()) throw ContractError("character id outside the alphabet");
      const Glyph g = glyph_for(spec.alphabet[cid]);
      const Real s = (static_cast<Real>(i) + 0.5) * adv;
      const Point2 c0 = mid.at_length(s);
      const Point2 c{c0.x * k, c0.y * k};
      const Point2 t = mid.tangent(mid.t_at(s));
      const Real reach = std::hypot(w, h) / 2 + 1;
      const auto x0 = static_cast<std::ptrdiff_t>(std::floor(c.x - reach));
      const auto x1 = static_cast<std::ptrdiff_t>(std::ceil(c.x + reach));
      const auto y0 = static_cast<std::ptrdiff_t>(std::floor(c.y - reach));
      const auto y1 = static_cast<std::ptrdiff_t>(std::ceil(c.y + reach));
      const auto lim = static_cast<std::ptrdiff_t>(size);
      bool any = false;
      for (std::ptrdiff_t py = std::max<std::ptrdiff_t>(y0, 0); py < std::min(y1, lim); ++py)
        for (std::ptrdiff_t px = std::max<std::ptrdiff_t>(x0, 0); px < std::min(x1, lim); ++px) {
          int hits = 0;
          for (int sy = 0; sy < 3; ++sy)
            for (int sx = 0; sx < 3; ++sx) {
              const Real qx = static_cast<Real>(px) + (sx + 0.5) / 3.0 - c.x;
              const Real qy = static_cast<Real>(py) + (sy + 0.5) / 3.0 - c.y;
              const Real along = qx * t.x + qy * t.y + w / 2;
              const Real across = -qx * t.y + qy * t.x + h / 2;
              if (along < 0 || across < 0 || along >= w || across >= h) continue;
              const auto col = static_cast<std::size_t>(along / dot);
              const auto row = static_cast<std::size_t>(across / dot);
              if (col < 5 && row < 7 && ((g[col] >> row) & 1)) ++hits;
            }
          auto& cv = cover[static_cast<std::size_t>(py) * size + static_cast<std::size_t>(px)];
          cv = std::max(cv, hits / 9.0);
          any = any || hits > 0;
        }
      if (any) ++inked;
    }
    for (std::size_t p = 0; p < size * size; ++p)
      if (cover[p] > 0)
        for (std::size_t ch = 0; ch < 3; ++ch) img[p * 3 + ch] += cover[p] * (inst.intensity - img[p * 3 + ch]);
    out.glyph_counts.push_back(inked);
  }
  out.image = Tensor::from_data({size, size, 3}, std::move(img));
  out.gt = scene_ground_truth(spec, control_points);
  return out;
}

// ---- augmentation ----

struct AugmentConfig {
  std::size_t min_short = 48;
  std::size_t max_short = 96;
  std::size_t max_long = 160;
  Real crop_min_fraction = 0.7;
  std::size_t align = 8;  // output sides are multiples of this

  void validate() const {
    if (min_short == 0 || max_short < min_short) throw ConfigError("bad resize range");
    if (align == 0 || max_long < align) throw ConfigError("bad alignment");
    if (crop_min_fraction <= 0 || crop_min_fraction > 1) throw ConfigError("crop_min_fraction must be in (0, 1]");
  }
};

// Bilinear resize with half-pixel centers; same-size input is returned untouched.
inline Tensor resize_image(const Tensor& image, std::size_t H, std::size_t W) {
  const std::size_t h0 = image.dim(0), w0 = image.dim(1), C = image.dim(2);
  if (H == h0 && W == w0) return image;
  const auto& src = image.data();
  std::vector<Real> out(H * W * C);
  const Real sy = static_cast<Real>(h0) / static_cast<Real>(H), sx = static_cast<Real>(w0) / static_cast<Real>(W);
  for (std::size_t y = 0; y < H; ++y) {
    const Real fy = std::clamp((static_cast<Real>(y) + 0.5) * sy - 0.5, 0.0, static_cast<Real>(h0 - 1));
    const auto ya = static_cast<std::size_t>(fy);
    const std::size_t yb = std::min(ya + 1, h0 - 1);
    const Real ty = fy - static_cast<Real>(ya);
    for (std::size_t x = 0; x < W; ++x) {
      const Real fx = std::clamp((static_cast<Real>(x) + 0.5) * sx - 0.5, 0.0, static_cast<Real>(w0 - 1));
      const auto xa = static_cast<std::size_t>(fx);
      const std::size_t xb = std::min(xa + 1, w0 - 1);
      const Real tx = fx - static_cast<Real>(xa);
      for (std::size_t c = 0; c < C; ++c) {
        const Real top = src[(ya * w0 + xa) * C + c] * (1 - tx) + src[(ya * w0 + xb) * C + c] * tx;
        const Real bot = src[(yb * w0 + xa) * C + c] * (1 - tx) + src[(yb * w0 + xb) * C + c] * tx;
        out[(y * W + x) * C + c] = top * (1 - ty) + bot * ty;
      }
    }
  }
  return Tensor::from_data({H, W, C}, std::move(out));
}

inline Tensor crop_image(const Tensor& image, std::size_t y0, std::size_t x0, std::size_t H, std::size_t W) {
  if (y0 == 0 && x0 == 0 && H == image.dim(0) && W == image.dim(1)) return image;
  const std::size_t w0 = image.dim(1), C = image.dim(2);
  const auto& src = image.data();
  std::vector<Real> out(H * W * C);
  for (std::size_t y = 0; y < H; ++y)
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(((y0 + y) * w0 + x0) * C), W * C,
                out.begin() + static_cast<std::ptrdiff_t>(y * W * C));
  return Tensor::from_data({H, W, C}, std::move(out));
}

// Maps normalised annotations through a pixel-space crop of a W x H image.
inline GroundTruth crop_ground_truth(const GroundTruth& gt, std::size_t W, std::size_t H, std::size_t x0,
                                     std::size_t y0, std::size_t cw, std::size_t ch) {
  GroundTruth out;
  out.transcripts = gt.transcripts;
  for (const auto& poly : gt.polygons) {
    ControlPolygon p = poly;
    for (auto& q : p.points) {
      q.x = std::clamp((q.x * static_cast<Real>(W) - static_cast<Real>(x0)) / static_cast<Real>(cw), 0.0, 1.0);
      q.y = std::clamp((q.y * static_cast<Real>(H) - static_cast<Real>(y0)) / static_cast<Real>(ch), 0.0, 1.0);
    }
    out.boxes.push_back(bounding_box(p));
    out.polygons.push_back(std::move(p));
  }
  return out;
}

struct Augmented {
  Tensor image;
  GroundTruth gt;
  std::size_t resized_h = 0, resized_w = 0;
};

inline Augmented augment(const Tensor& image, const GroundTruth& gt, std::uint64_t seed,
                         const AugmentConfig& cfg = {}) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0xA06));
  const std::size_t H = image.dim(0), W = image.dim(1);
  const Real shortest = static_cast<Real>(std::min(H, W)), longest = static_cast<Real>(std::max(H, W));
  Real scale = static_cast<Real>(rng.integer(static_cast<int>(cfg.min_short), static_cast<int>(cfg.max_short))) /
               shortest;
  scale = std::min(scale, static_cast<Real>(cfg.max_long) / longest);
  const Real a = static_cast<Real>(cfg.align);
  const std::size_t cap = cfg.max_long / cfg.align * cfg.align;
  auto aligned = [&](std::size_t n) {
    const auto r = static_cast<std::size_t>(std::llround(static_cast<Real>(n) * scale / a)) * cfg.align;
    return std::clamp(r, cfg.align, cap);
  };
  const std::size_t rh = aligned(H), rw = aligned(W);
  const Tensor resized = resize_image(image, rh, rw);

  // Union of all polygons in resized pixels; the crop window must cover it.
  Real ux0 = static_cast<Real>(rw), uy0 = static_cast<Real>(rh), ux1 = 0, uy1 = 0;
  for (const auto& poly : gt.polygons)
    for (const auto& q : poly.points) {
      ux0 = std::min(ux0, q.x * static_cast<Real>(rw));
      ux1 = std::max(ux1, q.x * static_cast<Real>(rw));
      uy0 = std::min(uy0, q.y * static_cast<Real>(rh));
      uy1 = std::max(uy1, q.y * static_cast<Real>(rh));
    }
  const bool any = !gt.polygons.empty();
  auto pick = [&](std::size_t full, Real lo, Real hi) {
    std::size_t need = cfg.align;
    std::size_t lo_px = 0, hi_px = 0;
    if (any) {
      lo_px = static_cast<std::size_t>(std::max(0.0, std::floor(lo)));
      hi_px = std::min(full, static_cast<std::size_t>(std::ceil(hi)));
      need = std::max(need, (hi_px - lo_px + cfg.align - 1) / cfg.align * cfg.align);
    }
    const auto min_side = static_cast<std::size_t>(std::ceil(cfg.crop_min_fraction * static_cast<Real>(full) / a)) *
                          cfg.align;
    const std::size_t low = std::min(full, std::max(need, min_side));
    const auto steps = static_cast<int>((full - low) / cfg.align);
    const std::size_t side = low + static_cast<std::size_t>(rng.integer(0, steps)) * cfg.align;
    std::size_t first = 0, last = full - side;
    if (any) {
      first = hi_px > side ? hi_px - side : 0;
      last = std::min(last, lo_px);
    }
    const std::size_t off = first + static_cast<std::size_t>(rng.integer(0, static_cast<int>(last - first)));
    return std::pair{off, side};
  };
  const auto [y0, ch] = pick(rh, uy0, uy1);
  const auto [x0, cw] = pick(rw, ux0, ux1);
  return {crop_image(resized, y0, x0, ch, cw), crop_ground_truth(gt, rw, rh, x0, y0, cw, ch), rh, rw};
}

// ---- serialisation ----

inline nlohmann::json to_json(const SceneSpec& s) {
  using nlohmann::json;
  json insts = json::array();
  for (const auto& i : s.instances) {
    json anchors = json::array();
    for (const auto& p : i.anchors) anchors.push_back({p.x, p.y});
    insts.push_back({{"anchors", anchors}, {"height", i.height}, {"chars", i.chars}, {"intensity", i.intensity}});
  }
  const auto& b = s.background;
  return {{"seed", s.seed},
          {"canvas", s.canvas},
          {"alphabet", s.alphabet},
          {"pad", s.pad},
          {"background",
           {{"base", b.base}, {"grad_x", b.grad_x}, {"grad_y", b.grad_y}, {"noise", b.noise}, {"tint", b.tint}}},
          {"instances", insts}};
}

inline SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  try {
    s.seed = j.at("seed").get<std::uint64_t>();
    s.canvas = j.at("canvas").get<std::size_t>();
    s.alphabet = j.at("alphabet").get<std::vector<std::uint32_t>>();
    s.pad = j.at("pad").get<Real>();
    const auto& b = j.at("background");
    s.background = {b.at("base").get<Real>(), b.at("grad_x").get<Real>(), b.at("grad_y").get<Real>(),
                    b.at("noise").get<Real>(), b.at("tint").get<std::array<Real, 3>>()};
    for (const auto& i : j.at("instances")) {
      TextInstanceSpec t;
      const auto& a = i.at("anchors");
      if (a.size() != 3) throw ConfigError("instance needs 3 anchors");
      for (std::size_t k = 0; k < 3; ++k) t.anchors[k] = {a[k].at(0).get<Real>(), a[k].at(1).get<Real>()};
      t.height = i.at("height").get<Real>();
      t.chars = i.at("chars").get<std::vector<int>>();
      t.intensity = i.at("intensity").get<Real>();
      if (t.chars.empty()) throw ConfigError("instance transcript is empty");
      s.instances.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed scene spec: ") + e.what());
  }
  return s;
}

inline void write_manifest(const std::string& path, const std::vector<SceneSpec>& specs) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  for (const auto& s : specs) f << to_json(s).dump() << '\n';
  if (!f) throw IoError("write failed: " + path);
}

inline std::vector<SceneSpec> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path);
  std::vector<SceneSpec> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(scene_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<unsigned char> to_bytes(const Tensor& image) {
  std::vector<unsigned char> out(image.numel());
  const auto& d = image.data();
  for (std::size_t i = 0; i < d.size(); ++i)
    out[i] = static_cast<unsigned char>(std::lround(std::clamp(d[i], 0.0, 1.0) * 255.0));
  return out;
}

inline void write_pnm(const std::string& path, const char* magic, std::size_t W, std::size_t H,
                      const std::vector<unsigned char>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << magic << '\n' << W << ' ' << H << "\n255\n";
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

inline void write_ppm(const std::string& path, const Tensor& image) {
  write_pnm(path, "P6", image.dim(1), image.dim(0), to_bytes(image));
}

inline void write_pgm(const std::string& path, std::size_t W, std::size_t H, const std::vector<unsigned char>& px) {
  if (px.size() != W * H) throw ContractError("pgm pixel count mismatch");
  write_pnm(path, "P5", W, H, px);
}

struct PnmImage {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<unsigned char> pixels;
};

inline PnmImage read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::string magic;
  int maxval = 0;
  PnmImage img;
  f >> magic >> img.width >> img.height >> maxval;
  f.get();
  if ((magic != "P5" && magic != "P6") || maxval != 255) throw IoError(path + ": unsupported PNM");
  img.channels = magic == "P6" ? 3 : 1;
  img.pixels.resize(img.width * img.height * img.channels);
  f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!f) throw IoError(path + ": truncated");
  return img;
}

// ---- datasets ----

inline std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("FTSP_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
  }
  return n;
}

struct Sample {
  SceneSpec spec;
  Tensor image;
  GroundTruth gt;
};

// Runs fn(i) for i in [0, n) on strided workers; fn must only write slot i.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  auto job = [&](std::size_t begin) {
    for (std::size_t i = begin; i < n; i += workers) fn(i);
  };
  std::vector<std::future<void>> tasks;
  for (std::size_t w = 1; w < workers; ++w) tasks.push_back(std::async(std::launch::async, job, w));
  job(0);
  for (auto& t : tasks) t.get();
}

inline std::vector<SceneSpec> generate_scenes(std::uint64_t first, std::size_t count, const SceneConfig& cfg = {},
                                              std::size_t workers = worker_count()) {
  std::vector<SceneSpec> out(count);
  parallel_for(count, workers, [&](std::size_t i) { out[i] = generate_scene(first + i, cfg); });
  return out;
}

inline std::vector<Sample> render_all(const std::vector<SceneSpec>& specs, std::size_t size,
                                      std::size_t control_points, std::size_t workers = worker_count()) {
  std::vector<Sample> out(specs.size());
  parallel_for(specs.size(), workers, [&](std::size_t i) {
    RenderedScene r = render_scene(specs[i], size, control_points);
    out[i] = {specs[i], std::move(r.image), std::move(r.gt)};
  });
  return out;
}

}  // namespace ftsp
