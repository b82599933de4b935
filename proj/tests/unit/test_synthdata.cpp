#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <set>

#include "ftsp/synthdata.hpp"

namespace ftsp {
namespace {

constexpr std::size_t kM = 8;

Real segment_distance(Point2 p, Point2 a, Point2 b) {
  const Real vx = b.x - a.x, vy = b.y - a.y;
  const Real len2 = vx * vx + vy * vy;
  Real t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - a.x - t * vx, p.y - a.y - t * vy);
}

bool inside_even_odd(const std::vector<Point2>& poly, Point2 p) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point2 a = poly[i], b = poly[j];
    if ((a.y > p.y) != (b.y > p.y) && p.x < a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y)) in = !in;
  }
  return in;
}

bool within_dilated(const std::vector<Point2>& poly, Point2 p, Real radius) {
  if (inside_even_odd(poly, p)) return true;
  for (std::size_t i = 0; i < poly.size(); ++i)
    if (segment_distance(p, poly[i], poly[(i + 1) % poly.size()]) <= radius) return true;
  return false;
}

SceneSpec flat_scene(std::vector<TextInstanceSpec> instances) {
  SceneSpec s;
  s.seed = 3;
  s.alphabet = SceneConfig{}.alphabet;
  s.background = {0.2, 0, 0, 0, {1, 1, 1}};
  s.instances = std::move(instances);
  return s;
}

TEST(GenerateScene, SameSeedSameSpec) {
  for (std::uint64_t seed : {0u, 7u, 12345u}) EXPECT_EQ(generate_scene(seed), generate_scene(seed));
  EXPECT_NE(generate_scene(1), generate_scene(2));
}

TEST(GenerateScene, InstanceCountHistogramAndOverlap) {
  std::array<int, 6> hist{};
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const SceneSpec spec = generate_scene(seed);
    ASSERT_LE(spec.instances.size(), 5u);
    ++hist[spec.instances.size()];
    for (const auto& inst : spec.instances) {
      ASSERT_GE(inst.chars.size(), 1u);
      ASSERT_LE(inst.chars.size(), 8u);
    }
    const GroundTruth gt = scene_ground_truth(spec, 16);
    for (std::size_t i = 0; i < gt.size(); ++i)
      for (std::size_t j = i + 1; j < gt.size(); ++j)
        ASSERT_LT(polygon_iou(gt.polygons[i], gt.polygons[j]), 0.1) << "seed " << seed;
  }
  for (std::size_t n = 0; n < hist.size(); ++n) EXPECT_GT(hist[n], 0) << n << " instances never generated";
}

TEST(RenderScene, EmptySpecIsPureBackground) {
  SceneSpec spec = generate_scene(11);
  spec.instances.clear();
  const auto r = render_scene(spec, 32, kM);
  EXPECT_EQ(r.gt.size(), 0u);
  const auto& bg = spec.background;
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) {
      const Real u = (x + 0.5) / 32 - 0.5, v = (y + 0.5) / 32 - 0.5;
      const Real g = bg.base + bg.grad_x * u + bg.grad_y * v;
      for (std::size_t c = 0; c < 3; ++c)
        ASSERT_NEAR(r.image.at({y, x, c}), std::clamp(g * bg.tint[c], 0.0, 1.0), bg.noise * bg.tint[c] + 1e-12);
    }
}

TEST(RenderScene, StraightBaselineMatchesBoxReferencePoints) {
  TextInstanceSpec inst;
  inst.anchors = {Point2{10, 30}, Point2{25, 30}, Point2{40, 30}};
  inst.height = 8;
  inst.chars = {1, 2, 3};
  const auto gt = render_scene(flat_scene({inst}), 64, kM).gt;
  ASSERT_EQ(gt.size(), 1u);
  const ControlPolygon ref = sample_reference_points(gt.boxes[0], kM);
  for (std::size_t m = 0; m < kM; ++m) {
    EXPECT_NEAR(gt.polygons[0].points[m].x, ref.points[m].x, 1e-6);
    EXPECT_NEAR(gt.polygons[0].points[m].y, ref.points[m].y, 1e-6);
  }
  EXPECT_NEAR(gt.boxes[0].c, 30.0 / 64, 1e-9);
  EXPECT_NEAR(gt.boxes[0].d, 10.0 / 64, 1e-9);
}

TEST(RenderScene, GlyphPixelsStayInsideDilatedPolygon) {
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const SceneSpec spec = generate_scene(seed);
    for (const auto& inst : spec.instances) {
      const SceneSpec solo = flat_scene({inst});
      const auto r = render_scene(solo, 64, kM);
      std::vector<Point2> poly = r.gt.polygons[0].points;
      for (auto& p : poly) p = {p.x * 64, p.y * 64};
      for (std::size_t y = 0; y < 64; ++y)
        for (std::size_t x = 0; x < 64; ++x) {
          if (std::abs(r.image.at({y, x, 0}) - 0.2) < 1e-12) continue;
          ASSERT_TRUE(within_dilated(poly, {x + 0.5, y + 0.5}, 1.0)) << "seed " << seed << " pixel " << x << "," << y;
        }
    }
  }
}

TEST(RenderScene, PolygonsAreClockwiseWithMPoints) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto r = render_scene(generate_scene(seed), 64, kM);
    for (std::size_t i = 0; i < r.gt.size(); ++i) {
      ASSERT_EQ(r.gt.polygons[i].size(), kM);
      EXPECT_GT(signed_area(r.gt.polygons[i].points), 0.0);
      EXPECT_EQ(r.glyph_counts[i], r.gt.transcripts[i].chars.size());
      for (const auto& p : r.gt.polygons[i].points) {
        EXPECT_GE(p.x, 0.0);
        EXPECT_LE(p.x, 1.0);
      }
    }
  }
}

TEST(RenderScene, BitIdenticalAcrossCallsAndWorkers) {
  const auto specs = generate_scenes(100, 12);
  const auto a = render_all(specs, 64, kM, 1);
  const auto b = render_all(specs, 64, kM, 3);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image.data(), b[i].image.data());
    EXPECT_EQ(a[i].spec, specs[i]);
  }
}

TEST(RenderScene, ArbitraryCodepointsRender) {
  SceneConfig cfg;
  cfg.alphabet = {0x1EA0, 0x0110, 0x01B0, 0x4E2D};
  for (std::uint32_t cp : cfg.alphabet) {
    const Glyph g = glyph_for(cp);
    EXPECT_EQ(g, glyph_for(cp));
    for (auto col : g) EXPECT_NE(col, 0);
  }
  std::uint64_t seed = 0;
  SceneSpec spec;
  do spec = generate_scene(seed++, cfg);
  while (spec.instances.empty());
  const auto r = render_scene(spec, 64, kM);
  for (std::size_t i = 0; i < r.gt.size(); ++i) EXPECT_EQ(r.glyph_counts[i], r.gt.transcripts[i].chars.size());
}

TEST(RenderScene, AsciiAlphabetHasDistinctGlyphs) {
  const auto alpha = ascii_alphabet(95);
  EXPECT_EQ(alpha.size(), 94u);
  std::set<Glyph> seen;
  for (auto cp : alpha) seen.insert(glyph_for(cp));
  EXPECT_GT(seen.size(), 90u);
}

TEST(Augment, IdentityRangeLeavesImageUnchanged) {
  const auto r = render_scene(generate_scene(5), 64, kM);
  AugmentConfig cfg;
  cfg.min_short = cfg.max_short = 64;
  cfg.crop_min_fraction = 1.0;
  const auto out = augment(r.image, r.gt, 99, cfg);
  EXPECT_EQ(out.image.shape(), r.image.shape());
  EXPECT_EQ(out.image.data(), r.image.data());
  for (std::size_t i = 0; i < r.gt.size(); ++i)
    for (std::size_t m = 0; m < kM; ++m) {
      EXPECT_NEAR(out.gt.polygons[i].points[m].x, r.gt.polygons[i].points[m].x, 1e-15);
      EXPECT_NEAR(out.gt.polygons[i].points[m].y, r.gt.polygons[i].points[m].y, 1e-15);
    }
}

TEST(Augment, KeepsPolygonsInsideAndScalesAreas) {
  const AugmentConfig cfg;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto r = render_scene(generate_scene(seed), 64, kM);
    const auto out = augment(r.image, r.gt, seed, cfg);
    const std::size_t H = out.image.dim(0), W = out.image.dim(1);
    EXPECT_EQ(H % cfg.align, 0u);
    EXPECT_EQ(W % cfg.align, 0u);
    EXPECT_LE(std::max(out.resized_h, out.resized_w), cfg.max_long);
    ASSERT_EQ(out.gt.size(), r.gt.size());
    const Real scale = static_cast<Real>(out.resized_h) / 64.0;
    for (std::size_t i = 0; i < r.gt.size(); ++i) {
      for (const auto& p : out.gt.polygons[i].points) {
        EXPECT_GE(p.x, 0.0);
        EXPECT_LE(p.x, 1.0);
        EXPECT_GE(p.y, 0.0);
        EXPECT_LE(p.y, 1.0);
      }
      const Real before = polygon_area(r.gt.polygons[i]) * 64 * 64;
      const Real after = polygon_area(out.gt.polygons[i]) * static_cast<Real>(H * W);
      EXPECT_NEAR(after / before, scale * scale, 1e-6) << "seed " << seed;
    }
  }
}

TEST(Augment, Deterministic) {
  const auto r = render_scene(generate_scene(8), 64, kM);
  const auto a = augment(r.image, r.gt, 4), b = augment(r.image, r.gt, 4);
  EXPECT_EQ(a.image.data(), b.image.data());
  EXPECT_EQ(a.image.shape(), b.image.shape());
}

TEST(Manifest, JsonRoundTrip) {
  const auto specs = generate_scenes(0, 20);
  const auto path = (std::filesystem::temp_directory_path() / "ftsp_manifest_test.jsonl").string();
  write_manifest(path, specs);
  EXPECT_EQ(read_manifest(path), specs);
  std::filesystem::remove(path);
}

TEST(Manifest, MalformedLineIsConfigError) {
  EXPECT_THROW(scene_from_json(nlohmann::json::parse(R"({"seed": 1})")), ConfigError);
  EXPECT_THROW(read_manifest("/nonexistent/manifest.jsonl"), IoError);
}

TEST(Pnm, PpmRoundTrip) {
  const auto r = render_scene(generate_scene(3), 32, kM);
  const auto path = (std::filesystem::temp_directory_path() / "ftsp_scene.ppm").string();
  write_ppm(path, r.image);
  const PnmImage img = read_pnm(path);
  EXPECT_EQ(img.width, 32u);
  EXPECT_EQ(img.channels, 3u);
  EXPECT_EQ(img.pixels, to_bytes(r.image));
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace ftsp
