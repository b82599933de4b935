#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "ftsp/backbone.hpp"
#include "ftsp/query.hpp"
#include "ftsp/serialize.hpp"

namespace ftsp {

struct ModelConfig {
  std::size_t d = 64;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t K = 20;
  std::size_t M = 8;
  std::size_t A = 8;
  std::size_t alphabet = 10;
  std::size_t heads = 8;
  std::size_t sampling_points = 4;
  std::size_t kernel = 3;
  std::size_t ffn = 128;
  std::size_t image_size = 64;
  BackboneConfig backbone;
  SelfAttentionKind ld_attention = SelfAttentionKind::kSac2;
  SelfAttentionKind cd_attention = SelfAttentionKind::kSac2;
  // kPoint re-derives positional queries and reference points from the latest
  // predicted points at every layer; kBox keeps the anchor-box encoding throughout.
  QueryMode query_mode = QueryMode::kPoint;
  Real proposal_size = 0.05;
  // Stop gradients through reference points between stages, as in training practice.
  bool detach_refs = true;
  std::uint64_t seed = 0;

  std::size_t levels() const { return backbone.stages(); }
  std::size_t classes() const { return alphabet + 1; }
  int pad_class() const { return static_cast<int>(alphabet); }

  AttentionConfig attention() const { return {heads, d, levels(), sampling_points, kernel}; }

  void validate() const {
    if (d == 0 || enc_layers == 0 || dec_layers == 0 || K == 0 || A == 0 || alphabet == 0 || ffn == 0) {
      throw ConfigError("model sizes must all be >= 1");
    }
    if (M < 4 || M % 2 != 0) throw ConfigError("M must be even and >= 4");
    if (d % (4 * 2) != 0) throw ConfigError("d must be divisible by 8 for the sine encodings");
    attention().validate();
    backbone.validate();
    if (image_size % backbone.stride() != 0) throw ConfigError("image_size must be divisible by the backbone stride");
  }
};

// Heads of one decoder layer.
struct LayerOutput {
  Tensor conf;         // [K] in (0, 1)
  Tensor points;       // [K, M, 2] in (0, 1)
  Tensor char_logits;  // [K, A, classes]
};

struct EncoderOutput {
  MultiScaleFeatures memory;
  Tensor scores;  // [N] per-token confidence
  Tensor boxes;   // [N, 4] per-token (s, r, c, d)
  std::vector<std::size_t> topk;     // token ids by descending score
  std::vector<AnchorBox> proposals;  // boxes of the top-K tokens
};

struct Predictions {
  EncoderOutput enc;
  std::vector<LayerOutput> layers;

  const LayerOutput& last() const { return layers.back(); }
};

struct EncoderLayer {
  DeformableAttention attn;
  LayerNorm norm1, norm2;
  Mlp ffn;

  EncoderLayer() = default;
  EncoderLayer(const AttentionConfig& cfg, std::size_t hidden, Rng& rng)
      : attn(cfg, rng), norm1(cfg.d), norm2(cfg.d), ffn(cfg.d, hidden, cfg.d, rng) {}

  Tensor operator()(const Tensor& x, const Tensor& pos, const Tensor& refs, const std::vector<LevelShape>& levels,
                    AttentionRecord* record) const {
    const MultiScaleFeatures feats{x, levels};
    const Tensor y = norm1(add(x, attn(add(x, pos), refs, feats, record)));
    return norm2(add(y, ffn(y)));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    attn.collect(out, prefix + ".attn");
    norm1.collect(out, prefix + ".norm1");
    norm2.collect(out, prefix + ".norm2");
    ffn.collect(out, prefix + ".ffn");
  }
};

// Self-attention block over [K, S, d] groups, deformable cross-attention, feed-forward.
struct DecoderLayer {
  Sac2Block self_attn;
  DeformableAttention cross;
  LayerNorm norm_cross, norm_ffn;
  Mlp ffn;

  DecoderLayer() = default;
  DecoderLayer(SelfAttentionKind kind, const AttentionConfig& cfg, std::size_t hidden, Rng& rng)
      : self_attn(kind, cfg.d, cfg.heads, cfg.kernel, rng), cross(cfg, rng), norm_cross(cfg.d), norm_ffn(cfg.d),
        ffn(cfg.d, hidden, cfg.d, rng) {}

  // refs: [K*S, 2]
  Tensor operator()(const Tensor& x, const Tensor& pos, const Tensor& content, const Tensor& refs,
                    const MultiScaleFeatures& memory, NormMode mode) {
    const std::size_t K = x.dim(0), S = x.dim(1), d = x.dim(2);
    const Tensor y = self_attn(x, pos, content, mode);
    const Tensor q = reshape(add(y, pos), {K * S, d});
    Tensor flat = norm_cross(add(reshape(y, {K * S, d}), cross(q, refs, memory)));
    flat = norm_ffn(add(flat, ffn(flat)));
    return reshape(flat, {K, S, d});
  }

  void collect(ParamList& out, const std::string& prefix) {
    self_attn.collect(out, prefix + ".self");
    cross.collect(out, prefix + ".cross");
    norm_cross.collect(out, prefix + ".norm_cross");
    norm_ffn.collect(out, prefix + ".norm_ffn");
    ffn.collect(out, prefix + ".ffn");
  }
};

class FastTextSpotter {
 public:
  FastTextSpotter() = default;
  explicit FastTextSpotter(const ModelConfig& config) : cfg_(config) {
    cfg_.validate();
    Rng rng(mix_seed(cfg_.seed, 0x6d6f64656cULL));
    const AttentionConfig acfg = cfg_.attention();
    backbone_ = Backbone(cfg_.backbone, cfg_.d, rng);
    std::vector<Real> le(cfg_.levels() * cfg_.d);
    for (Real& v : le) v = rng.normal(0.0, 0.1);
    level_embed_ = make_param({cfg_.levels(), cfg_.d}, std::move(le));
    for (std::size_t l = 0; l < cfg_.enc_layers; ++l) encoder_.emplace_back(acfg, cfg_.ffn, rng);
    enc_score_ = Linear(cfg_.d, 1, rng);
    enc_box_ = Mlp(cfg_.d, cfg_.d, 4, rng);
    shrink(enc_box_.fc2, rng);
    queries_ = QueryBuilder(cfg_.M, cfg_.A, cfg_.d, rng);
    for (std::size_t l = 0; l < cfg_.dec_layers; ++l) {
      tld_.emplace_back(cfg_.ld_attention, acfg, cfg_.ffn, rng);
      trd_.emplace_back(cfg_.cd_attention, acfg, cfg_.ffn, rng);
      point_heads_.emplace_back(cfg_.d, cfg_.d, 2, rng);
      shrink(point_heads_.back().fc2, rng);
    }
    conf_head_ = Linear(cfg_.d, 1, rng);
    char_head_ = Linear(cfg_.d, cfg_.classes(), rng);
    // Start confidences low, as is usual with focal-loss training.
    std::fill(enc_score_.bias.mutable_data().begin(), enc_score_.bias.mutable_data().end(), kPriorLogit);
    std::fill(conf_head_.bias.mutable_data().begin(), conf_head_.bias.mutable_data().end(), kPriorLogit);
  }

  static constexpr Real kPriorLogit = -2.0;

  const ModelConfig& config() const { return cfg_; }
  NormMode mode() const { return mode_; }
  void set_mode(NormMode m) { mode_ = m; }

  MultiScaleFeatures backbone_forward(const Tensor& image) const { return backbone_(image); }

  // Encodes backbone features and proposes K anchor boxes from the highest scoring tokens.
  EncoderOutput encode(const MultiScaleFeatures& feats, std::vector<AttentionRecord>* records = nullptr) const {
    const std::size_t N = feats.num_tokens(), d = cfg_.d;
    if (N < cfg_.K) throw ContractError("token count " + std::to_string(N) + " is below K");
    const auto centers = feats.token_centers();
    const Tensor refs = points_tensor(centers);
    std::vector<std::size_t> level_of(N);
    for (std::size_t l = 0; l < feats.num_levels(); ++l)
      std::fill_n(level_of.begin() + static_cast<std::ptrdiff_t>(feats.levels[l].start),
                  feats.levels[l].h * feats.levels[l].w, l);
    const Tensor pos = add(sine_embed(refs, d), index_select(level_embed_, level_of));

    if (records) records->assign(encoder_.size(), {});
    Tensor x = feats.tokens;
    for (std::size_t l = 0; l < encoder_.size(); ++l)
      x = encoder_[l](x, pos, refs, feats.levels, records ? &(*records)[l] : nullptr);

    EncoderOutput out;
    out.memory = MultiScaleFeatures{x, feats.levels};
    out.scores = sigmoid(reshape(enc_score_(x), {N}));
    std::vector<Real> anchors(N * 4);
    for (std::size_t i = 0; i < N; ++i) {
      const Real size = std::min(0.99, cfg_.proposal_size * static_cast<Real>(1u << level_of[i]));
      anchors[i * 4] = centers[i].x;
      anchors[i * 4 + 1] = centers[i].y;
      anchors[i * 4 + 2] = size;
      anchors[i * 4 + 3] = size;
    }
    out.boxes = sigmoid(add(inverse_sigmoid(Tensor::from_data({N, 4}, std::move(anchors))), enc_box_(x)));

    out.topk.resize(N);
    std::iota(out.topk.begin(), out.topk.end(), 0);
    const auto& sc = out.scores.data();
    std::stable_sort(out.topk.begin(), out.topk.end(), [&](std::size_t a, std::size_t b) { return sc[a] > sc[b]; });
    out.topk.resize(cfg_.K);
    for (std::size_t i : out.topk) {
      const auto* b = out.boxes.data().data() + i * 4;
      out.proposals.push_back({b[0], b[1], b[2], b[3]});
    }
    return out;
  }

  // Runs both decoders from proposal boxes[K, 4].
  std::vector<LayerOutput> decode(const MultiScaleFeatures& memory, const Tensor& proposals) {
    const std::size_t K = proposals.dim(0), M = cfg_.M, A = cfg_.A;
    if (K == 0) throw ContractError("decode needs at least one proposal");
    const bool resample = cfg_.query_mode == QueryMode::kPoint;
    auto cut = [&](const Tensor& t) { return cfg_.detach_refs ? t.detach() : t; };

    const Tensor boxes = cut(proposals);
    const Tensor anchors = clamp(reference_points(boxes, M), 0.0, 1.0);  // [K, M, 2]
    Tensor refs = reshape(anchors, {K * M, 2});
    const Tensor anchor_logits = inverse_sigmoid(refs);
    const Tensor box_pos = resample ? Tensor() : queries_.box_positional(boxes, M);

    std::vector<LayerOutput> out(cfg_.dec_layers);
    Tensor x = broadcast_axis(queries_.point_content, 0, K);
    for (std::size_t l = 0; l < cfg_.dec_layers; ++l) {
      const Tensor pos = resample ? queries_.point_positional(refs, K, M) : box_pos;
      x = tld_[l](x, pos, queries_.point_content, refs, memory, mode_);
      const Tensor delta = reshape(point_heads_[l](x), {K * M, 2});
      const Tensor pts = sigmoid(add(resample ? inverse_sigmoid(refs) : anchor_logits, delta));
      out[l].points = reshape(pts, {K, M, 2});
      out[l].conf = sigmoid(reshape(conf_head_(mean_axis(x, 1)), {K}));
      if (resample) refs = cut(pts);
    }

    Tensor c = broadcast_axis(queries_.char_content, 0, K);
    const Tensor static_refs = reshape(midline(anchors, A), {K * A, 2});
    const Tensor static_pos = resample ? Tensor() : queries_.box_positional(boxes, A);
    for (std::size_t l = 0; l < cfg_.dec_layers; ++l) {
      Tensor char_refs = static_refs, pos = static_pos;
      if (resample) {
        char_refs = reshape(midline(cut(out[l].points), A), {K * A, 2});
        pos = queries_.point_positional(char_refs, K, A);
      }
      c = trd_[l](c, pos, queries_.char_content, char_refs, memory, mode_);
      out[l].char_logits = char_head_(c);
    }
    return out;
  }

  std::vector<LayerOutput> decode(const MultiScaleFeatures& memory, const std::vector<AnchorBox>& proposals) {
    return decode(memory, boxes_tensor(proposals));
  }

  Predictions forward(const Tensor& image, std::vector<AttentionRecord>* enc_records = nullptr) {
    Predictions p;
    p.enc = encode(backbone_forward(image), enc_records);
    p.layers = decode(p.enc.memory, index_select(p.enc.boxes, p.enc.topk));
    return p;
  }

  ParamList parameters() {
    ParamList out;
    backbone_.collect(out, "backbone");
    out.add("level_embed", level_embed_);
    for (std::size_t l = 0; l < encoder_.size(); ++l) encoder_[l].collect(out, "encoder" + std::to_string(l));
    enc_score_.collect(out, "enc_score");
    enc_box_.collect(out, "enc_box");
    queries_.collect(out, "queries", cfg_.query_mode);
    for (std::size_t l = 0; l < tld_.size(); ++l) {
      tld_[l].collect(out, "tld" + std::to_string(l));
      trd_[l].collect(out, "trd" + std::to_string(l));
      point_heads_[l].collect(out, "point_head" + std::to_string(l));
    }
    conf_head_.collect(out, "conf_head");
    char_head_.collect(out, "char_head");
    return out;
  }

  QueryBuilder& queries() { return queries_; }
  std::vector<EncoderLayer>& encoder_layers() { return encoder_; }
  std::vector<DecoderLayer>& location_layers() { return tld_; }
  std::vector<DecoderLayer>& recognition_layers() { return trd_; }
  std::vector<Mlp>& point_heads() { return point_heads_; }

 private:
  // Near-zero regression output so initial predictions sit on their anchors.
  static void shrink(Linear& l, Rng& rng) {
    for (Real& v : l.weight.mutable_data()) v = rng.uniform(-1e-3, 1e-3);
    std::fill(l.bias.mutable_data().begin(), l.bias.mutable_data().end(), 0.0);
  }

  ModelConfig cfg_;
  NormMode mode_ = NormMode::kTrain;
  Backbone backbone_;
  Tensor level_embed_;
  std::vector<EncoderLayer> encoder_;
  Linear enc_score_;
  Mlp enc_box_;
  QueryBuilder queries_;
  std::vector<DecoderLayer> tld_, trd_;
  std::vector<Mlp> point_heads_;
  Linear conf_head_, char_head_;
};

// ---- config and checkpoint I/O ---------------------------------------------

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
  }
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

inline std::string attention_name(SelfAttentionKind k) { return k == SelfAttentionKind::kSac2 ? "sac2" : "vanilla"; }

inline SelfAttentionKind parse_attention(const std::string& s) {
  if (s == "sac2") return SelfAttentionKind::kSac2;
  if (s == "vanilla") return SelfAttentionKind::kVanilla;
  throw ConfigError("attention mode must be sac2 or vanilla, got '" + s + "'");
}

inline std::string query_mode_name(QueryMode m) { return m == QueryMode::kPoint ? "eq3" : "eq1"; }

inline QueryMode parse_query_mode(const std::string& s) {
  if (s == "eq3") return QueryMode::kPoint;
  if (s == "eq1") return QueryMode::kBox;
  throw ConfigError("resampling mode must be eq1 or eq3, got '" + s + "'");
}

}  // namespace detail

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"d", c.d},
          {"enc_layers", c.enc_layers},
          {"dec_layers", c.dec_layers},
          {"K", c.K},
          {"M", c.M},
          {"A", c.A},
          {"alphabet", c.alphabet},
          {"heads", c.heads},
          {"sampling_points", c.sampling_points},
          {"kernel", c.kernel},
          {"ffn", c.ffn},
          {"image_size", c.image_size},
          {"backbone", c.backbone.kind == BackboneKind::kSwin ? "swin" : "conv"},
          {"patch", c.backbone.patch},
          {"window", c.backbone.window},
          {"stage_dims", c.backbone.dims},
          {"stage_depths", c.backbone.depths},
          {"stage_heads", c.backbone.heads},
          {"ld_attention", detail::attention_name(c.ld_attention)},
          {"cd_attention", detail::attention_name(c.cd_attention)},
          {"resampling", detail::query_mode_name(c.query_mode)},
          {"proposal_size", c.proposal_size},
          {"detach_refs", c.detach_refs},
          {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j,
                              {"d", "enc_layers", "dec_layers", "K", "M", "A", "alphabet", "heads", "sampling_points",
                               "kernel", "ffn", "image_size", "backbone", "patch", "window", "stage_dims",
                               "stage_depths", "stage_heads", "ld_attention", "cd_attention", "resampling",
                               "proposal_size", "detach_refs", "seed"},
                              "model config");
  ModelConfig c;
  detail::read_key(j, "d", c.d);
  detail::read_key(j, "enc_layers", c.enc_layers);
  detail::read_key(j, "dec_layers", c.dec_layers);
  detail::read_key(j, "K", c.K);
  detail::read_key(j, "M", c.M);
  detail::read_key(j, "A", c.A);
  detail::read_key(j, "alphabet", c.alphabet);
  detail::read_key(j, "heads", c.heads);
  detail::read_key(j, "sampling_points", c.sampling_points);
  detail::read_key(j, "kernel", c.kernel);
  detail::read_key(j, "ffn", c.ffn);
  detail::read_key(j, "image_size", c.image_size);
  detail::read_key(j, "patch", c.backbone.patch);
  detail::read_key(j, "window", c.backbone.window);
  detail::read_key(j, "stage_dims", c.backbone.dims);
  detail::read_key(j, "stage_depths", c.backbone.depths);
  detail::read_key(j, "stage_heads", c.backbone.heads);
  detail::read_key(j, "proposal_size", c.proposal_size);
  detail::read_key(j, "detach_refs", c.detach_refs);
  detail::read_key(j, "seed", c.seed);
  std::string s;
  if (j.contains("backbone")) {
    detail::read_key(j, "backbone", s);
    if (s != "swin" && s != "conv") throw ConfigError("backbone must be swin or conv");
    c.backbone.kind = s == "swin" ? BackboneKind::kSwin : BackboneKind::kConv;
  }
  if (j.contains("ld_attention")) {
    detail::read_key(j, "ld_attention", s);
    c.ld_attention = detail::parse_attention(s);
  }
  if (j.contains("cd_attention")) {
    detail::read_key(j, "cd_attention", s);
    c.cd_attention = detail::parse_attention(s);
  }
  if (j.contains("resampling")) {
    detail::read_key(j, "resampling", s);
    c.query_mode = detail::parse_query_mode(s);
  }
  c.validate();
  return c;
}

inline constexpr const char* kCheckpointMagic = "FTSP-CKPT 1";

// Text header line, config JSON line, then a count and (name, tensor) entries for
// every parameter and normalisation buffer.
inline void save_checkpoint(FastTextSpotter& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path);
  os << kCheckpointMagic << '\n' << to_json(model.config()).dump() << '\n';
  const ParamList params = model.parameters();
  std::vector<std::pair<std::string, Tensor>> entries;
  for (const auto& e : params.params()) entries.emplace_back(e.name, e.tensor);
  for (const auto& b : params.buffers()) {
    entries.emplace_back(b.name, Tensor::from_data({b.values->size()}, *b.values));
  }
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
  if (!os) throw IoError("failed writing checkpoint " + path);
}

inline FastTextSpotter load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  std::string magic, config_line;
  std::getline(is, magic);
  if (magic != kCheckpointMagic) throw IoError("not a checkpoint: " + path);
  std::getline(is, config_line);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(config_line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint config: ") + e.what());
  }
  FastTextSpotter model(model_config_from_json(j));
  ParamList params = model.parameters();
  const std::uint32_t count = detail::read_le<std::uint32_t>(is);
  std::size_t matched = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = detail::read_le<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw IoError("truncated checkpoint " + path);
    const Tensor t = read_tensor(is);
    bool found = false;
    for (const auto& e : params.params()) {
      if (e.name != name) continue;
      if (e.tensor.shape() != t.shape()) throw IoError("shape mismatch for " + name);
      Tensor dst = e.tensor;
      dst.mutable_data() = t.data();
      found = true;
    }
    for (const auto& b : params.buffers()) {
      if (b.name != name) continue;
      if (b.values->size() != t.numel()) throw IoError("size mismatch for " + name);
      *b.values = t.data();
      found = true;
    }
    if (!found) throw IoError("unexpected tensor " + name + " in checkpoint");
    ++matched;
  }
  if (matched != params.params().size() + params.buffers().size()) throw IoError("checkpoint is missing tensors");
  return model;
}

}  // namespace ftsp
