#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ftsp/criterion.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

namespace ftsp {
namespace {

using testing::micro_config;
using testing::random_image;

// Exhaustive minimum over all injective row -> column maps.
Real brute_force_min(const std::vector<Real>& cost, std::size_t rows, std::size_t cols) {
  std::vector<std::size_t> perm(cols);
  std::iota(perm.begin(), perm.end(), 0);
  Real best = std::numeric_limits<Real>::infinity();
  do {
    Real total = 0;
    for (std::size_t r = 0; r < rows; ++r) total += cost[r * cols + perm[r]];
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

TEST(Hungarian, MatchesExhaustiveSearch) {
  for (int seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const std::size_t cols = static_cast<std::size_t>(rng.integer(1, 6));
    const std::size_t rows = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(cols)));
    std::vector<Real> cost(rows * cols);
    for (Real& c : cost) c = rng.uniform(-5, 5);
    const auto assign = hungarian(cost, rows, cols);
    std::vector<std::size_t> sorted = assign;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
    EXPECT_NEAR(assignment_cost(cost, cols, assign), brute_force_min(cost, rows, cols), 1e-12) << "seed " << seed;
  }
}

TEST(Hungarian, FourByFixMatchesBruteForce) {
  for (int seed = 0; seed < 200; ++seed) {
    Rng rng(1000 + seed);
    std::vector<Real> cost(4 * 6);
    for (Real& c : cost) c = rng.uniform(0, 10);
    EXPECT_NEAR(assignment_cost(cost, 6, hungarian(cost, 4, 6)), brute_force_min(cost, 4, 6), 1e-12);
  }
}

TEST(Hungarian, RowConstantShiftKeepsAssignment) {
  Rng rng(3);
  std::vector<Real> cost(3 * 5);
  for (Real& c : cost) c = rng.uniform(0, 1);
  const auto base = hungarian(cost, 3, 5);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 5; ++c) cost[r * 5 + c] += 7.0 * static_cast<Real>(r + 1);
  EXPECT_EQ(hungarian(cost, 3, 5), base);
}

TEST(Hungarian, RejectsMoreRowsThanColumns) {
  EXPECT_THROW(hungarian(std::vector<Real>(6, 0.0), 3, 2), ContractError);
}

GroundTruth one_instance(std::size_t M, const AnchorBox& box, std::vector<int> chars) {
  GroundTruth gt;
  gt.polygons.push_back(sample_reference_points(box, M));
  gt.boxes.push_back(box);
  gt.transcripts.push_back({std::move(chars)});
  return gt;
}

TEST(Matcher, DominantAssignment) {
  const AnchorBox box{0.5, 0.5, 0.4, 0.2};
  const auto gt = one_instance(4, box, {1});
  std::vector<Real> pts;
  for (const auto& p : gt.polygons[0].points) pts.insert(pts.end(), {p.x, p.y});
  for (int i = 0; i < 4; ++i) pts.insert(pts.end(), {0.95, 0.05});
  LayerOutput layer{Tensor::from_data({2}, {0.9, 0.1}), Tensor::from_data({2, 4, 2}, pts), Tensor()};
  const auto m = match_instances(layer, gt, LossWeights{});
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m.query_of[0], 0u);
}

TEST(Matcher, EmptyGroundTruth) {
  LayerOutput layer{Tensor::from_data({2}, {0.9, 0.1}), Tensor::zeros({2, 4, 2}), Tensor()};
  EXPECT_EQ(match_instances(layer, GroundTruth{}, LossWeights{}).size(), 0u);
}

TEST(Matcher, TooManyInstancesIsAnError) {
  GroundTruth gt = one_instance(4, {0.5, 0.5, 0.2, 0.2}, {0});
  gt.polygons.push_back(gt.polygons[0]);
  gt.boxes.push_back(gt.boxes[0]);
  gt.transcripts.push_back(gt.transcripts[0]);
  LayerOutput layer{Tensor::from_data({1}, {0.5}), Tensor::zeros({1, 4, 2}), Tensor()};
  EXPECT_THROW(match_instances(layer, gt, LossWeights{}), ContractError);
}

TEST(FocalLoss, GoldenValue) {
  const Tensor conf = Tensor::from_data({1}, {0.5});
  EXPECT_NEAR(focal_loss(conf, {{0}}, 0.25, 2.0).item(), 0.25 * 0.25 * std::log(2.0), 1e-12);
  EXPECT_NEAR(focal_loss(conf, {{0}}, 0.25, 2.0).item(), 0.043322, 1e-5);
}

TEST(FocalLoss, PerfectPredictionsVanish) {
  EXPECT_LT(focal_loss(Tensor::from_data({1}, {1.0 - 1e-9}), {{0}}, 0.25, 2.0).item(), 1e-12);
  EXPECT_LT(focal_loss(Tensor::from_data({1}, {1e-9}), {}, 0.25, 2.0).item(), 1e-12);
}

TEST(FocalLoss, ClampsExtremeConfidences) {
  const Real v = focal_loss(Tensor::from_data({2}, {0.0, 1.0}), {{0}}, 0.25, 2.0).item();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_GT(v, 0.0);
}

TEST(CoordLoss, HandFixtureAndPerfect) {
  GroundTruth gt;
  gt.polygons.push_back({{{0.25, 0.75}}});
  EXPECT_NEAR(coord_loss(Tensor::from_data({1, 1, 2}, {0.5, 0.5}), {{0}}, gt).item(), 0.5, 1e-15);
  EXPECT_EQ(coord_loss(Tensor::from_data({1, 1, 2}, {0.25, 0.75}), {{0}}, gt).item(), 0.0);
}

TEST(CharLoss, UniformLogitsGiveLogClasses) {
  GroundTruth gt;
  gt.transcripts.push_back({{2}});
  EXPECT_NEAR(char_loss(Tensor::zeros({1, 1, 4}), {{0}}, gt).item(), std::log(4.0), 1e-12);
}

TEST(CharLoss, ConfidentCorrectLogitsVanish) {
  GroundTruth gt;
  gt.transcripts.push_back({{1}});
  // slot 0 -> class 1, slot 1 -> padding class 3
  const Tensor logits = Tensor::from_data({1, 2, 4}, {0, 100, 0, 0, 0, 0, 0, 100});
  EXPECT_LT(char_loss(logits, {{0}}, gt).item(), 1e-12);
}

TEST(GiouLoss, PerfectAndTouching) {
  GroundTruth gt;
  gt.boxes.push_back({0.5, 0.5, 1, 1});
  EXPECT_NEAR(giou_loss(Tensor::from_data({1, 4}, {0.5, 0.5, 1, 1}), {{0}}, gt).item(), 0.0, 1e-15);
  EXPECT_NEAR(giou_loss(Tensor::from_data({1, 4}, {1.5, 0.5, 1, 1}), {{0}}, gt).item(), 1.0, 1e-12);
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  for (int seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    GroundTruth gt;
    for (int g = 0; g < 2; ++g) {
      const AnchorBox b{rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3)};
      gt.polygons.push_back(sample_reference_points(b, 4));
      gt.boxes.push_back(b);
      gt.transcripts.push_back({{static_cast<int>(rng.integer(0, 2)), static_cast<int>(rng.integer(0, 2))}});
    }
    const MatchResult match{{2, 0}};
    Tensor conf = testing::random_tensor({3}, rng, 0.05, 0.95);
    Tensor pts = testing::random_tensor({3, 4, 2}, rng, 0.0, 1.0);
    Tensor logits = testing::random_tensor({3, 3, 4}, rng, -2, 2);
    Tensor boxes = testing::random_tensor({3, 4}, rng, 0.2, 0.6);
    const auto rf = testing::gradcheck([&] { return focal_loss(conf, match, 0.25, 2.0); }, {conf});
    const auto rc = testing::gradcheck([&] { return coord_loss(pts, match, gt); }, {pts});
    const auto rh = testing::gradcheck([&] { return char_loss(logits, match, gt); }, {logits});
    const auto rg = testing::gradcheck([&] { return giou_loss(boxes, match, gt); }, {boxes});
    EXPECT_LT(rf.max_rel_err, 1e-4) << rf.worst;
    EXPECT_LT(rc.max_rel_err, 1e-6) << rc.worst;
    EXPECT_LT(rh.max_rel_err, 1e-5) << rh.worst;
    EXPECT_LT(rg.max_rel_err, 1e-4) << rg.worst;
  }
}


GroundTruth micro_scene() {
  GroundTruth gt = one_instance(4, {0.4, 0.45, 0.5, 0.2}, {0, 2});
  return gt;
}

TEST(TotalLosses, ZeroInstanceSceneHasOnlyFocalNegatives) {
  FastTextSpotter model(micro_config());
  Rng rng(1);
  const auto preds = model.forward(random_image(16, rng));
  const auto b = total_losses(preds, GroundTruth{}, LossWeights{});
  EXPECT_EQ(b.enc_coord, 0.0);
  EXPECT_EQ(b.enc_giou, 0.0);
  EXPECT_EQ(b.dec_coord, 0.0);
  EXPECT_EQ(b.dec_char, 0.0);
  EXPECT_GT(b.enc_cls, 0.0);
  EXPECT_NEAR(b.total.item(), b.enc_cls + b.dec_cls, 1e-12);
}

TEST(TotalLosses, CoordWeightIsLinear) {
  FastTextSpotter model(micro_config());
  Rng rng(2);
  const auto preds = model.forward(random_image(16, rng));
  LossWeights w;
  const auto a = total_losses(preds, micro_scene(), w);
  w.coord *= 2;
  const auto b = total_losses(preds, micro_scene(), w);
  EXPECT_NEAR(b.dec_coord, 2 * a.dec_coord, 1e-12);
  EXPECT_NEAR(b.enc_coord, 2 * a.enc_coord, 1e-12);
  EXPECT_NEAR(b.dec_char, a.dec_char, 1e-12);
}

TEST(TotalLosses, BreakdownSumsToTotalAndIsNonnegative) {
  FastTextSpotter model(micro_config());
  Rng rng(3);
  const auto b = total_losses(model.forward(random_image(16, rng)), micro_scene(), LossWeights{});
  for (Real v : {b.enc_cls, b.enc_coord, b.enc_giou, b.dec_cls, b.dec_coord, b.dec_char}) EXPECT_GE(v, 0.0);
  EXPECT_NEAR(b.total.item(), b.enc_cls + b.enc_coord + b.enc_giou + b.dec_cls + b.dec_coord + b.dec_char, 1e-12);
  EXPECT_EQ(b.layer_matches.size(), 2u);
}

TEST(TotalLosses, HandComposedGoldenValue) {
  FastTextSpotter model(micro_config());
  Rng rng(4);
  const auto preds = model.forward(random_image(16, rng));
  const GroundTruth gt = micro_scene();
  const LossWeights w;
  // Recompose the total from the individual terms with independently computed matches.
  Real expected = 0;
  {
    const std::size_t N = preds.enc.scores.dim(0);
    std::vector<Real> cost(N);
    for (std::size_t i = 0; i < N; ++i) {
      const auto* b = preds.enc.boxes.data().data() + 4 * i;
      const AnchorBox box{b[0], b[1], b[2], b[3]};
      const AnchorBox& t = gt.boxes[0];
      cost[i] = w.cls * focal_cost(preds.enc.scores[i], w) +
                w.coord * (std::abs(box.s - t.s) + std::abs(box.r - t.r) + std::abs(box.c - t.c) + std::abs(box.d - t.d)) -
                w.giou * box_giou(box, t);
    }
    const MatchResult m{{static_cast<std::size_t>(std::min_element(cost.begin(), cost.end()) - cost.begin())}};
    expected += w.cls * focal_loss(preds.enc.scores, m, w.alpha, w.gamma).item() +
                w.coord * box_l1_loss(preds.enc.boxes, m, gt).item() + w.giou * giou_loss(preds.enc.boxes, m, gt).item();
  }
  for (const auto& layer : preds.layers) {
    const auto cost = point_match_cost(layer, gt, w);
    const MatchResult m{{static_cast<std::size_t>(std::min_element(cost.begin(), cost.end()) - cost.begin())}};
    expected += w.cls * focal_loss(layer.conf, m, w.alpha, w.gamma).item() +
                w.coord * coord_loss(layer.points, m, gt).item() + w.chr * char_loss(layer.char_logits, m, gt).item();
  }
  EXPECT_NEAR(total_losses(preds, gt, w).total.item(), expected, 1e-12);
}

TEST(TotalLosses, PermutingLayersPermutesTerms) {
  FastTextSpotter model(micro_config());
  Rng rng(5);
  auto preds = model.forward(random_image(16, rng));
  const GroundTruth gt = micro_scene();
  auto per_layer = [&](const Predictions& p) {
    std::vector<Real> v;
    for (const auto& layer : p.layers) {
      const auto m = match_instances(layer, gt, LossWeights{});
      v.push_back(coord_loss(layer.points, m, gt).item());
    }
    return v;
  };
  const auto a = per_layer(preds);
  std::swap(preds.layers[0], preds.layers[1]);
  const auto b = per_layer(preds);
  EXPECT_EQ(a[0], b[1]);
  EXPECT_EQ(a[1], b[0]);
}

TEST(TotalLosses, EveryParameterReceivesGradient) {
  FastTextSpotter model(micro_config());
  Rng rng(6);
  const auto b = total_losses(model.forward(random_image(16, rng)), micro_scene(), LossWeights{});
  b.total.backward();
  const ParamList params = model.parameters();
  for (const auto& e : params.params()) {
    Real mag = 0;
    for (Real g : e.tensor.grad()) mag += std::abs(g);
    EXPECT_GT(mag, 0.0) << e.name;
  }
}

TEST(TotalLosses, FullModelGradcheck) {
  ModelConfig cfg = micro_config();
  cfg.detach_refs = false;
  FastTextSpotter model(cfg);
  Rng rng(7);
  const Tensor image = random_image(16, rng);
  const GroundTruth gt = micro_scene();
  const ParamList params = model.parameters();
  std::vector<Tensor> leaves;
  for (const auto& e : params.params()) leaves.push_back(e.tensor);
  const auto r = testing::gradcheck([&] { return total_losses(model.forward(image), gt, LossWeights{}).total; },
                                    leaves, 300, 7);
  EXPECT_LT(r.max_rel_err, 1e-3) << r.worst;
}

}  // namespace
}  // namespace ftsp
