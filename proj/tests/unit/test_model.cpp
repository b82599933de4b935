#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <set>

#include "ftsp/criterion.hpp"
#include "ftsp/model.hpp"
#include "ftsp/optim.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

namespace ftsp {
namespace {

using testing::micro_config;
using testing::random_image;

Tensor constant_image(std::size_t size, Real r, Real g, Real b) {
  std::vector<Real> v(size * size * 3);
  for (std::size_t i = 0; i < size * size; ++i) {
    v[i * 3] = r;
    v[i * 3 + 1] = g;
    v[i * 3 + 2] = b;
  }
  return Tensor::from_data({size, size, 3}, std::move(v));
}

BackboneConfig small_backbone() {
  BackboneConfig b;
  b.dims = {8, 8};
  b.heads = {2, 2};
  b.window = 2;
  return b;
}

void zero_point_heads(FastTextSpotter& model, Real bias = 0.0) {
  for (auto& head : model.point_heads()) {
    auto& w = head.fc2.weight.mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
    auto& b = head.fc2.bias.mutable_data();
    std::fill(b.begin(), b.end(), bias);
  }
}

TEST(Backbone, TwoStageGridSizes) {
  Rng rng(0);
  BackboneConfig cfg;
  const Backbone bb(cfg, 16, rng);
  const auto feats = bb(random_image(32, rng));
  ASSERT_EQ(feats.num_levels(), 2u);
  EXPECT_EQ(feats.levels[0].h, 8u);
  EXPECT_EQ(feats.levels[0].w, 8u);
  EXPECT_EQ(feats.levels[1].h, 4u);
  EXPECT_EQ(feats.levels[1].w, 4u);
  EXPECT_EQ(feats.tokens.shape(), (Shape{80, 16}));
}

TEST(Backbone, ConstantImageGivesConstantFeatures) {
  for (auto kind : {BackboneKind::kSwin, BackboneKind::kConv}) {
    Rng rng(1);
    BackboneConfig cfg;
    cfg.kind = kind;
    const Backbone bb(cfg, 16, rng);
    const auto feats = bb(constant_image(32, 0.3, 0.6, 0.9));
    for (std::size_t l = 0; l < feats.num_levels(); ++l) {
      const Tensor grid = feats.level(l);
      const std::size_t n = grid.dim(0) * grid.dim(1), d = grid.dim(2);
      for (std::size_t i = 1; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c)
          ASSERT_NEAR(grid.data()[i * d + c], grid.data()[c], 1e-5) << "level " << l;
    }
  }
}

TEST(Backbone, GradcheckOnTinyImage) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const Backbone bb(small_backbone(), 8, rng);
    Tensor image = testing::random_tensor({8, 8, 3}, rng, 0.0, 1.0);
    ParamList params;
    bb.collect(params, "bb");
    std::vector<Tensor> leaves{image};
    for (const auto& e : params.params()) leaves.push_back(e.tensor);
    const auto r = testing::gradcheck([&] { return testing::weighted_sum(bb(image).tokens, seed); }, leaves, 6, seed);
    EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
  }
}

TEST(Backbone, ShiftedWindowsWithPadding) {
  Rng rng(2);
  BackboneConfig cfg = small_backbone();
  cfg.window = 3;  // 6x6 first-stage grid is padded to a multiple of 3 with shifted masks
  const Backbone bb(cfg, 8, rng);
  Tensor image = testing::random_tensor({24, 24, 3}, rng, 0.0, 1.0);
  const auto feats = bb(image);
  EXPECT_EQ(feats.levels[0].h, 6u);
  EXPECT_EQ(feats.levels[1].h, 3u);
}

TEST(Backbone, IndivisibleImageIsContractError) {
  Rng rng(3);
  const Backbone bb(BackboneConfig{}, 16, rng);
  EXPECT_THROW(bb(random_image(30, rng)), ContractError);
  EXPECT_THROW(bb(Tensor::zeros({32, 32, 1})), DimensionError);
}

TEST(Encoder, KEqualToTokenCountProposesEveryToken) {
  ModelConfig cfg = micro_config();
  cfg.K = 20;  // 16x16 image: 4x4 + 2x2 tokens
  FastTextSpotter model(cfg);
  Rng rng(4);
  const auto enc = model.encode(model.backbone_forward(random_image(16, rng)));
  ASSERT_EQ(enc.topk.size(), 20u);
  EXPECT_EQ(std::set<std::size_t>(enc.topk.begin(), enc.topk.end()).size(), 20u);
  EXPECT_EQ(enc.proposals.size(), 20u);
}

TEST(Encoder, ProposalsSortedByScore) {
  FastTextSpotter model(micro_config());
  Rng rng(5);
  const auto enc = model.encode(model.backbone_forward(random_image(16, rng)));
  const auto& s = enc.scores.data();
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_GT(s[i], 0.0);
    EXPECT_LT(s[i], 1.0);
  }
  for (std::size_t i = 1; i < enc.topk.size(); ++i) EXPECT_GE(s[enc.topk[i - 1]], s[enc.topk[i]]);
  for (std::size_t i = 0; i < enc.topk.size(); ++i) {
    const auto* b = enc.boxes.data().data() + enc.topk[i] * 4;
    EXPECT_EQ(enc.proposals[i], (AnchorBox{b[0], b[1], b[2], b[3]}));
  }
}

TEST(Encoder, TooFewTokensIsContractError) {
  ModelConfig cfg = micro_config();
  cfg.K = 21;
  FastTextSpotter model(cfg);
  Rng rng(6);
  EXPECT_THROW(model.forward(random_image(16, rng)), ContractError);
}

TEST(Encoder, PlantedBlobIsTopProposalAfterTraining) {
  ModelConfig cfg = micro_config();
  FastTextSpotter model(cfg);
  Rng rng(7);
  const std::size_t d = cfg.d;
  std::vector<Real> tok(80 * d);
  for (Real& v : tok) v = rng.normal(0.0, 0.3);
  const std::size_t row = 5, col = 2;  // level-0 cell of an 8x8 grid
  for (std::size_t c = 0; c < d; ++c) tok[(row * 8 + col) * d + c] = c % 2 ? 2.0 : -2.0;
  MultiScaleFeatures feats{Tensor::from_data({80, d}, tok), {{8, 8, 0}, {4, 4, 64}}};

  GroundTruth gt;
  const AnchorBox target{(col + 0.5) / 8, (row + 0.5) / 8, 0.15, 0.1};
  gt.boxes.push_back(target);
  gt.polygons.push_back(sample_reference_points(target, cfg.M));
  gt.transcripts.push_back({{0}});

  const LossWeights w;
  AdamW opt(model.parameters(), {});
  for (int step = 0; step < 60; ++step) {
    opt.zero_grad();
    const auto enc = model.encode(feats);
    const MatchResult m = match_from_cost(box_match_cost(enc.scores, enc.boxes, gt, w), 1, enc.scores.dim(0));
    const Tensor loss = add(add(scale(focal_loss(enc.scores, m, w.alpha, w.gamma), w.cls),
                                scale(box_l1_loss(enc.boxes, m, gt), w.coord)),
                            scale(giou_loss(enc.boxes, m, gt), w.giou));
    loss.backward();
    opt.step(1e-3);
  }
  const auto enc = model.encode(feats);
  const AnchorBox top = enc.proposals[0];
  EXPECT_LE(std::abs(top.s - target.s) * 8, 2.0);
  EXPECT_LE(std::abs(top.r - target.r) * 8, 2.0);
}

TEST(LocationDecoder, ZeroDeltaKeepsPointsAcrossLayers) {
  for (auto mode : {QueryMode::kPoint, QueryMode::kBox}) {
    ModelConfig cfg = micro_config();
    cfg.dec_layers = 3;
    cfg.query_mode = mode;
    FastTextSpotter model(cfg);
    zero_point_heads(model);
    Rng rng(8);
    const auto p = model.forward(random_image(16, rng));
    const Tensor anchors = reference_points(index_select(p.enc.boxes, p.enc.topk), cfg.M);
    for (const auto& layer : p.layers)
      for (std::size_t i = 0; i < anchors.numel(); ++i)
        ASSERT_NEAR(layer.points.data()[i], std::clamp(anchors.data()[i], 0.0, 1.0), 1e-12);
  }
}

TEST(LocationDecoder, PointsStayInUnitSquareForLargeDeltas) {
  for (Real bias : {-40.0, 40.0, 3.0}) {
    FastTextSpotter model(micro_config());
    zero_point_heads(model, bias);
    Rng rng(9);
    const auto p = model.forward(random_image(16, rng));
    for (const auto& layer : p.layers)
      for (Real v : layer.points.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
  }
}

TEST(RecognitionDecoder, SingleSlotSoftmaxSumsToOne) {
  ModelConfig cfg = micro_config();
  cfg.K = 1;
  cfg.A = 1;
  FastTextSpotter model(cfg);
  Rng rng(10);
  const auto p = model.forward(random_image(16, rng));
  for (const auto& layer : p.layers) {
    ASSERT_EQ(layer.char_logits.shape(), (Shape{1, 1, cfg.classes()}));
    EXPECT_NEAR(sum(softmax(layer.char_logits, 2)).item(), 1.0, 1e-12);
  }
}

TEST(Decoders, SwappingProposalsSwapsOutputs) {
  for (auto attn : {SelfAttentionKind::kSac2, SelfAttentionKind::kVanilla}) {
    ModelConfig cfg = micro_config();
    cfg.K = 3;
    cfg.ld_attention = cfg.cd_attention = attn;
    FastTextSpotter model(cfg);
    model.set_mode(NormMode::kEval);
    Rng rng(11);
    const auto memory = model.encode(model.backbone_forward(random_image(16, rng))).memory;
    const std::vector<AnchorBox> boxes{{0.3, 0.3, 0.2, 0.1}, {0.6, 0.7, 0.3, 0.2}, {0.5, 0.5, 0.4, 0.1}};
    const auto a = model.decode(memory, boxes);
    const auto b = model.decode(memory, std::vector<AnchorBox>{boxes[1], boxes[0], boxes[2]});
    const std::size_t perm[3] = {1, 0, 2};
    for (std::size_t l = 0; l < a.size(); ++l)
      for (std::size_t k = 0; k < 3; ++k) {
        const Tensor ca = slice(a[l].char_logits, 0, perm[k], 1), cb = slice(b[l].char_logits, 0, k, 1);
        for (std::size_t i = 0; i < ca.numel(); ++i) ASSERT_NEAR(ca.data()[i], cb.data()[i], 1e-12);
        const Tensor pa = slice(a[l].points, 0, perm[k], 1), pb = slice(b[l].points, 0, k, 1);
        for (std::size_t i = 0; i < pa.numel(); ++i) ASSERT_NEAR(pa.data()[i], pb.data()[i], 1e-12);
        EXPECT_NEAR(a[l].conf.data()[perm[k]], b[l].conf.data()[k], 1e-12);
      }
  }
}

TEST(Model, OutputShapesAcrossConfigs) {
  std::vector<ModelConfig> cfgs(5, micro_config());
  cfgs[1].K = 3;
  cfgs[1].M = 6;
  cfgs[1].A = 2;
  cfgs[2].backbone.kind = BackboneKind::kConv;
  cfgs[3].ld_attention = cfgs[3].cd_attention = SelfAttentionKind::kVanilla;
  cfgs[4].query_mode = QueryMode::kBox;
  cfgs[4].dec_layers = 3;
  for (const auto& cfg : cfgs) {
    FastTextSpotter model(cfg);
    Rng rng(12);
    const auto p = model.forward(random_image(16, rng));
    ASSERT_EQ(p.layers.size(), cfg.dec_layers);
    EXPECT_EQ(p.enc.scores.shape(), (Shape{20}));
    EXPECT_EQ(p.enc.boxes.shape(), (Shape{20, 4}));
    for (const auto& layer : p.layers) {
      EXPECT_EQ(layer.conf.shape(), (Shape{cfg.K}));
      EXPECT_EQ(layer.points.shape(), (Shape{cfg.K, cfg.M, 2}));
      EXPECT_EQ(layer.char_logits.shape(), (Shape{cfg.K, cfg.A, cfg.alphabet + 1}));
      for (Real c : layer.conf.data()) {
        EXPECT_GT(c, 0.0);
        EXPECT_LT(c, 1.0);
      }
    }
  }
}

TEST(Model, EvalForwardIsBitIdentical) {
  FastTextSpotter model(micro_config());
  model.set_mode(NormMode::kEval);
  Rng rng(13);
  const Tensor image = random_image(16, rng);
  const auto a = model.forward(image), b = model.forward(image);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    EXPECT_EQ(a.layers[l].conf.data(), b.layers[l].conf.data());
    EXPECT_EQ(a.layers[l].points.data(), b.layers[l].points.data());
    EXPECT_EQ(a.layers[l].char_logits.data(), b.layers[l].char_logits.data());
  }
  EXPECT_EQ(a.enc.scores.data(), b.enc.scores.data());
}

TEST(Model, SameSeedSameWeights) {
  FastTextSpotter a(micro_config()), b(micro_config());
  const ParamList pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.params().size(), pb.params().size());
  for (std::size_t i = 0; i < pa.params().size(); ++i)
    EXPECT_EQ(pa.params()[i].tensor.data(), pb.params()[i].tensor.data());
}

TEST(Model, VanillaAndSac2DifferOnlyByLocalBranch) {
  for (std::size_t dec : {1u, 2u, 3u}) {
    ModelConfig cfg = micro_config();
    cfg.dec_layers = dec;
    FastTextSpotter sac2(cfg);
    cfg.ld_attention = cfg.cd_attention = SelfAttentionKind::kVanilla;
    FastTextSpotter vanilla(cfg);
    const std::size_t d = cfg.d;
    const std::size_t per_block = (cfg.kernel + 1) * d * d + 6 * d;
    EXPECT_EQ(sac2.parameters().scalar_count() - vanilla.parameters().scalar_count(), 2 * dec * per_block);
    EXPECT_EQ(per_block, 4 * d * d + 6 * d);
  }
}

TEST(Model, EveryParameterNameIsUnique) {
  FastTextSpotter model(micro_config());
  const ParamList params = model.parameters();
  std::set<std::string> names;
  for (const auto& e : params.params()) EXPECT_TRUE(names.insert(e.name).second) << e.name;
  for (const auto& b : params.buffers()) EXPECT_TRUE(names.insert(b.name).second) << b.name;
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  ModelConfig cfg = micro_config();
  cfg.query_mode = QueryMode::kBox;
  cfg.ld_attention = SelfAttentionKind::kVanilla;
  cfg.backbone.kind = BackboneKind::kConv;
  const auto j = to_json(cfg);
  EXPECT_EQ(to_json(model_config_from_json(j)), j);

  auto bad = j;
  bad["dropout"] = 0.1;
  EXPECT_THROW(model_config_from_json(bad), ConfigError);
  bad = j;
  bad["resampling"] = "eq2";
  EXPECT_THROW(model_config_from_json(bad), ConfigError);
  bad = j;
  bad["M"] = 5;
  EXPECT_THROW(model_config_from_json(bad), ConfigError);
  bad = j;
  bad["K"] = "twenty";
  EXPECT_THROW(model_config_from_json(bad), ConfigError);
}

TEST(Checkpoint, RoundTripRestoresWeightsAndNormStatistics) {
  FastTextSpotter model(micro_config());
  Rng rng(14);
  model.forward(random_image(16, rng));  // moves batch-norm running statistics
  const auto path = (std::filesystem::temp_directory_path() / "ftsp_ckpt_test.bin").string();
  save_checkpoint(model, path);
  FastTextSpotter loaded = load_checkpoint(path);
  std::filesystem::remove(path);

  const ParamList a = model.parameters(), b = loaded.parameters();
  ASSERT_EQ(a.params().size(), b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i)
    EXPECT_EQ(a.params()[i].tensor.data(), b.params()[i].tensor.data()) << a.params()[i].name;
  ASSERT_EQ(a.buffers().size(), b.buffers().size());
  ASSERT_FALSE(a.buffers().empty());
  for (std::size_t i = 0; i < a.buffers().size(); ++i) EXPECT_EQ(*a.buffers()[i].values, *b.buffers()[i].values);

  model.set_mode(NormMode::kEval);
  loaded.set_mode(NormMode::kEval);
  const Tensor image = random_image(16, rng);
  EXPECT_EQ(model.forward(image).layers.back().char_logits.data(),
            loaded.forward(image).layers.back().char_logits.data());
}

TEST(Checkpoint, CorruptFilesAreIoErrors) {
  const auto dir = std::filesystem::temp_directory_path();
  EXPECT_THROW(load_checkpoint((dir / "ftsp_missing.bin").string()), IoError);
  const auto path = (dir / "ftsp_bad_ckpt.bin").string();
  { std::ofstream(path) << "not a checkpoint\n"; }
  EXPECT_THROW(load_checkpoint(path), IoError);

  FastTextSpotter model(micro_config());
  save_checkpoint(model, path);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 7);
  EXPECT_THROW(load_checkpoint(path), IoError);
  std::filesystem::remove(path);
}

TEST(AdamW, ZeroLearningRateLeavesWeightsUnchanged) {
  FastTextSpotter model(micro_config());
  const ParamList params = model.parameters();
  std::vector<std::vector<Real>> before;
  for (const auto& e : params.params()) before.push_back(e.tensor.data());
  AdamW opt(params, {});
  Rng rng(15);
  for (int i = 0; i < 3; ++i) {
    opt.zero_grad();
    total_losses(model.forward(random_image(16, rng)), GroundTruth{}, LossWeights{}).total.backward();
    opt.step(0.0);
  }
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(params.params()[i].tensor.data(), before[i]);
}

TEST(AdamW, DecayIsAppliedToWeightsDirectly) {
  Tensor w = make_param({2}, {2.0, -4.0});
  ParamList params;
  params.add("w", w);
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  AdamW opt(params, cfg);
  opt.zero_grad();
  sum(scale(w, 0.0)).backward();  // zero gradient: only the decay acts
  opt.step(0.5);
  EXPECT_DOUBLE_EQ(w.data()[0], 2.0 * (1 - 0.05));
  EXPECT_DOUBLE_EQ(w.data()[1], -4.0 * (1 - 0.05));
}

TEST(AdamW, FirstStepMovesEachWeightByLearningRate) {
  Tensor w = make_param({3}, {1.0, -2.0, 0.5});
  ParamList params;
  params.add("w", w);
  AdamWConfig cfg;
  cfg.weight_decay = 0;
  AdamW opt(params, cfg);
  opt.zero_grad();
  sum(mul(w, Tensor::from_data({3}, {3.0, -0.1, 7.0}))).backward();
  opt.step(0.01);
  EXPECT_NEAR(w.data()[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(w.data()[1], -2.0 + 0.01, 1e-9);
  EXPECT_NEAR(w.data()[2], 0.5 - 0.01, 1e-9);
}

TEST(AdamW, ClippingCapsTheUpdateInput) {
  Tensor w = make_param({1}, {0.0});
  ParamList params;
  params.add("w", w);
  AdamWConfig cfg;
  cfg.clip_norm = 1.0;
  AdamW opt(params, cfg);
  opt.zero_grad();
  sum(scale(w, 100.0)).backward();
  EXPECT_DOUBLE_EQ(opt.step(0.1), 100.0);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamW, MinimisesAQuadratic) {
  Tensor w = make_param({2}, {5.0, -5.0});
  ParamList params;
  params.add("w", w);
  AdamWConfig cfg;
  cfg.weight_decay = 0;
  AdamW opt(params, cfg);
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    sum(square(add_scalar(w, -1.0))).backward();
    opt.step(0.05);
  }
  EXPECT_NEAR(w.data()[0], 1.0, 1e-3);
  EXPECT_NEAR(w.data()[1], 1.0, 1e-3);
}

}  // namespace
}  // namespace ftsp
