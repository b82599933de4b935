#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "ftsp/query.hpp"
#include "support/gradcheck.hpp"

namespace ftsp {
namespace {

TEST(SineEncode, ZeroAlternatesSinCos) {
  for (std::size_t d : {2u, 8u, 64u}) {
    const std::vector<Real> t{0.0};
    const Tensor e = sine_encode(t, d);
    for (std::size_t i = 0; i < d; ++i) EXPECT_EQ(e[i], i % 2 == 0 ? 0.0 : 1.0);
  }
}

TEST(SineEncode, HalfWithFourDims) {
  const std::vector<Real> t{0.5};
  const Tensor e = sine_encode(t, 4);
  const Real w1 = 1e-4;
  EXPECT_NEAR(e[0], std::sin(std::numbers::pi), 1e-15);
  EXPECT_NEAR(e[1], std::cos(std::numbers::pi), 1e-15);
  EXPECT_NEAR(e[2], std::sin(2 * std::numbers::pi * 0.5 * w1), 1e-15);
  EXPECT_NEAR(e[3], std::cos(2 * std::numbers::pi * 0.5 * w1), 1e-15);
}

TEST(SineEncode, CoordinatesAreConcatenated) {
  const std::vector<Real> xy{0.25, 0.75};
  const Tensor both = sine_encode(xy, 16);
  const Tensor x = sine_encode(std::vector<Real>{0.25}, 16);
  // A single coordinate over 16 dims uses different frequencies than the first half of a pair.
  const Real w1 = std::pow(10000.0, -2.0 * 1 * 4 / 16.0);
  EXPECT_NEAR(both[2], std::sin(2 * std::numbers::pi * 0.25 * w1), 1e-15);
  EXPECT_NEAR(both[8 + 2], std::sin(2 * std::numbers::pi * 0.75 * w1), 1e-15);
  EXPECT_NE(x[2], both[2]);
}

TEST(SineEncode, RejectsIndivisibleWidth) {
  EXPECT_THROW(sine_encode(std::vector<Real>{0.1, 0.2}, 6), ContractError);
  EXPECT_THROW(sine_encode(std::vector<Real>{0.1, 0.2, 0.3, 0.4}, 12), ContractError);
}

TEST(SineEncode, NeighbouringPointsAreDistinguishable) {
  auto cosine = [](const Tensor& a, const Tensor& b) {
    Real ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
      ab += a[i] * b[i];
      aa += a[i] * a[i];
      bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
  };
  Tensor prev = sine_encode(std::vector<Real>{0.0, 0.5}, 64);
  for (int i = 1; i <= 1000; ++i) {
    const Tensor cur = sine_encode(std::vector<Real>{i * 1e-3, 0.5}, 64);
    EXPECT_LT(cosine(prev, cur), 1.0) << "step " << i;
    prev = cur;
  }
}

TEST(SineEncode, BoundedOnUnitSquare) {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const Tensor e = sine_encode(std::vector<Real>{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()}, 32);
    for (Real v : e.data()) {
      EXPECT_LE(v, 1.0);
      EXPECT_GE(v, -1.0);
    }
  }
}

std::vector<AnchorBox> random_boxes(Rng& rng, std::size_t k) {
  std::vector<AnchorBox> out;
  for (std::size_t i = 0; i < k; ++i)
    out.push_back({rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4)});
  return out;
}

TEST(BoxQueries, ZeroLinearWeightsLeaveContentPlusConstant) {
  Rng rng(0);
  QueryBuilder qb(4, 3, 16, rng);
  std::fill(qb.theta.proj.weight.mutable_data().begin(), qb.theta.proj.weight.mutable_data().end(), 0.0);
  const auto q = qb.compose_box_queries(random_boxes(rng, 3));
  const Tensor queries = q.point_queries();
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t m = 0; m < 4; ++m)
      for (std::size_t e = 0; e < 16; ++e) {
        const Real diff = queries.at({k, m, e}) - qb.point_content.at({m, e});
        EXPECT_NEAR(diff, q.point_positional.at({0, 0, e}), 1e-12);
      }
}

TEST(BoxQueries, SubQueriesShareOnePositionalVector) {
  Rng rng(1);
  QueryBuilder qb(2, 2, 8, rng);
  const auto q = qb.compose_box_queries({{0.5, 0.5, 0.3, 0.2}});
  EXPECT_EQ(q.point_queries().shape(), (Shape{1, 2, 8}));
  for (std::size_t e = 0; e < 8; ++e) EXPECT_EQ(q.point_positional.at({0, 0, e}), q.point_positional.at({0, 1, e}));
}

TEST(BoxQueries, GroupPermutationIsExact) {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    QueryBuilder qb(6, 4, 16, rng);
    const auto boxes = random_boxes(rng, 5);
    std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<AnchorBox> permuted;
    for (auto p : perm) permuted.push_back(boxes[p]);
    const Tensor a = qb.compose_box_queries(boxes).point_queries();
    const Tensor b = qb.compose_box_queries(permuted).point_queries();
    for (std::size_t k = 0; k < 5; ++k)
      for (std::size_t m = 0; m < 6; ++m)
        for (std::size_t e = 0; e < 16; ++e) ASSERT_EQ(b.at({k, m, e}), a.at({perm[k], m, e}));
  }
}

TEST(PointQueries, IdenticalPointsGiveIdenticalPositionals) {
  Rng rng(3);
  QueryBuilder qb(4, 2, 16, rng);
  ControlPolygon poly{std::vector<Point2>(4, Point2{0.3, 0.6})};
  const auto q = qb.compose_point_queries({poly});
  for (std::size_t m = 1; m < 4; ++m)
    for (std::size_t e = 0; e < 16; ++e) EXPECT_EQ(q.point_positional.at({0, m, e}), q.point_positional.at({0, 0, e}));
}

TEST(PointQueries, TopAndBottomEdgesDiffer) {
  Rng rng(4);
  QueryBuilder qb(8, 2, 16, rng);
  const auto poly = sample_reference_points({0.5, 0.5, 0.4, 0.2}, 8);
  const auto q = qb.compose_point_queries({poly});
  Real diff = 0;
  for (std::size_t e = 0; e < 16; ++e) diff += std::abs(q.point_positional.at({0, 0, e}) - q.point_positional.at({0, 7, e}));
  EXPECT_GT(diff, 1e-6);
}

TEST(PointQueries, GroupPermutationIsExact) {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    QueryBuilder qb(4, 3, 16, rng);
    std::vector<ControlPolygon> polys;
    for (const auto& b : random_boxes(rng, 4)) polys.push_back(sample_reference_points(b, 4));
    const std::vector<ControlPolygon> swapped{polys[2], polys[3], polys[0], polys[1]};
    const auto a = qb.compose_point_queries(polys), b = qb.compose_point_queries(swapped);
    const std::size_t perm[4] = {2, 3, 0, 1};
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t m = 0; m < 4; ++m)
        for (std::size_t e = 0; e < 16; ++e) ASSERT_EQ(b.point_queries().at({k, m, e}), a.point_queries().at({perm[k], m, e}));
  }
}

TEST(PointQueries, RejectsWrongPointCount) {
  Rng rng(5);
  QueryBuilder qb(6, 2, 16, rng);
  EXPECT_THROW(qb.compose_point_queries({sample_reference_points({0.5, 0.5, 0.2, 0.2}, 4)}), ContractError);
}

TEST(PointQueries, GradcheckThroughPhi) {
  Rng rng(6);
  QueryBuilder qb(4, 2, 8, rng);
  Tensor pts = testing::random_tensor({4, 2}, rng, 0.1, 0.9);
  const auto r = testing::gradcheck(
      [&] { return testing::weighted_sum(qb.phi(pts), 3); },
      {pts, qb.phi.mlp.fc1.weight, qb.phi.mlp.fc2.bias});
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}

TEST(QueryModes, ShareTheSameContentObjects) {
  Rng rng(7);
  QueryBuilder qb(4, 3, 16, rng);
  const auto boxes = random_boxes(rng, 2);
  std::vector<ControlPolygon> polys;
  for (const auto& b : boxes) polys.push_back(sample_reference_points(b, 4));
  const auto a = qb.compose_box_queries(boxes), b = qb.compose_point_queries(polys);
  EXPECT_EQ(a.point_content.impl(), b.point_content.impl());
  EXPECT_EQ(a.char_content.impl(), b.char_content.impl());
  EXPECT_EQ(a.char_queries().shape(), (Shape{2, 3, 16}));
  EXPECT_EQ(b.char_queries().shape(), (Shape{2, 3, 16}));
  for (const auto& refs : a.char_refs)
    for (const auto& p : refs) {
      EXPECT_GE(p.x, 0.0);
      EXPECT_LE(p.x, 1.0);
    }
}

}  // namespace
}  // namespace ftsp
