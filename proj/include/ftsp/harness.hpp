#pragma once

#include <algorithm>
#include <chrono>
#include <cstring>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ftsp/criterion.hpp"
#include "ftsp/model.hpp"
#include "ftsp/optim.hpp"
#include "ftsp/synthdata.hpp"

namespace ftsp {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t iterations = 5000;
  Real lr = 1e-4;
  std::size_t milestone = 4000;
  Real decay = 0.1;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
  Real weight_decay = 1e-5;
  Real clip_norm = 0.1;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0 writes only the final checkpoint
  bool augment = false;
  AugmentConfig augmentation;
  LossWeights loss;

  void validate() const {
    if (iterations == 0 || batch_size == 0) throw ConfigError("iterations and batch_size must be positive");
    if (milestone >= iterations) throw ConfigError("milestone must be below iterations");
    if (!(lr >= 0) || !(decay > 0) || !(eps > 0) || weight_decay < 0 || clip_norm < 0) {
      throw ConfigError("learning rate, decay and optimizer constants must be positive");
    }
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
    augmentation.validate();
    loss.validate();
  }

  Real lr_at(std::size_t iter) const { return iter >= milestone ? lr * decay : lr; }

  AdamWConfig optimizer() const { return {beta1, beta2, eps, weight_decay, clip_norm}; }
};

struct DataConfig {
  SceneConfig scene;
  std::size_t train_scenes = 500;
  std::size_t val_scenes = 100;
};

// Everything needed to reproduce one run.
struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;

  void validate() const {
    model.validate();
    train.validate();
    data.scene.validate();
    if (model.alphabet != data.scene.alphabet.size()) throw ConfigError("model alphabet differs from data alphabet");
    if (model.A < data.scene.max_chars) throw ConfigError("A must cover the longest transcript");
    if (model.K < data.scene.max_instances) throw ConfigError("K must cover the most crowded scene");
  }
};

// ---- config JSON ------------------------------------------------------------

inline nlohmann::json to_json(const TrainConfig& c) {
  const auto& a = c.augmentation;
  const auto& w = c.loss;
  return {{"iterations", c.iterations},
          {"lr", c.lr},
          {"milestone", c.milestone},
          {"decay", c.decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"weight_decay", c.weight_decay},
          {"clip_norm", c.clip_norm},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"augment", c.augment},
          {"augmentation",
           {{"min_short", a.min_short},
            {"max_short", a.max_short},
            {"max_long", a.max_long},
            {"crop_min_fraction", a.crop_min_fraction},
            {"align", a.align}}},
          {"loss",
           {{"cls", w.cls},
            {"coord", w.coord},
            {"char", w.chr},
            {"giou", w.giou},
            {"alpha", w.alpha},
            {"gamma", w.gamma},
            {"match_chars", w.match_chars}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  using detail::read_key;
  detail::reject_unknown_keys(j,
                              {"iterations", "lr", "milestone", "decay", "beta1", "beta2", "eps", "weight_decay",
                               "clip_norm", "batch_size", "seed", "checkpoint_every", "augment", "augmentation",
                               "loss"},
                              "train config");
  TrainConfig c;
  read_key(j, "iterations", c.iterations);
  read_key(j, "lr", c.lr);
  read_key(j, "milestone", c.milestone);
  read_key(j, "decay", c.decay);
  read_key(j, "beta1", c.beta1);
  read_key(j, "beta2", c.beta2);
  read_key(j, "eps", c.eps);
  read_key(j, "weight_decay", c.weight_decay);
  read_key(j, "clip_norm", c.clip_norm);
  read_key(j, "batch_size", c.batch_size);
  read_key(j, "seed", c.seed);
  read_key(j, "checkpoint_every", c.checkpoint_every);
  read_key(j, "augment", c.augment);
  if (j.contains("augmentation")) {
    const auto& a = j.at("augmentation");
    detail::reject_unknown_keys(a, {"min_short", "max_short", "max_long", "crop_min_fraction", "align"},
                                "augmentation config");
    read_key(a, "min_short", c.augmentation.min_short);
    read_key(a, "max_short", c.augmentation.max_short);
    read_key(a, "max_long", c.augmentation.max_long);
    read_key(a, "crop_min_fraction", c.augmentation.crop_min_fraction);
    read_key(a, "align", c.augmentation.align);
  }
  if (j.contains("loss")) {
    const auto& w = j.at("loss");
    detail::reject_unknown_keys(w, {"cls", "coord", "char", "giou", "alpha", "gamma", "match_chars"}, "loss config");
    read_key(w, "cls", c.loss.cls);
    read_key(w, "coord", c.loss.coord);
    read_key(w, "char", c.loss.chr);
    read_key(w, "giou", c.loss.giou);
    read_key(w, "alpha", c.loss.alpha);
    read_key(w, "gamma", c.loss.gamma);
    read_key(w, "match_chars", c.loss.match_chars);
  }
  c.validate();
  return c;
}

inline nlohmann::json to_json(const DataConfig& c) {
  const auto& s = c.scene;
  return {{"canvas", s.canvas},     {"alphabet", s.alphabet},     {"max_instances", s.max_instances},
          {"max_chars", s.max_chars}, {"min_height", s.min_height}, {"max_height", s.max_height},
          {"max_angle", s.max_angle}, {"max_bend", s.max_bend},     {"margin", s.margin},
          {"pad", s.pad},           {"max_iou", s.max_iou},       {"attempts", s.attempts},
          {"train_scenes", c.train_scenes}, {"val_scenes", c.val_scenes}};
}

inline DataConfig data_config_from_json(const nlohmann::json& j) {
  using detail::read_key;
  detail::reject_unknown_keys(j,
                              {"canvas", "alphabet", "max_instances", "max_chars", "min_height", "max_height",
                               "max_angle", "max_bend", "margin", "pad", "max_iou", "attempts", "train_scenes",
                               "val_scenes"},
                              "data config");
  DataConfig c;
  auto& s = c.scene;
  read_key(j, "canvas", s.canvas);
  read_key(j, "alphabet", s.alphabet);
  read_key(j, "max_instances", s.max_instances);
  read_key(j, "max_chars", s.max_chars);
  read_key(j, "min_height", s.min_height);
  read_key(j, "max_height", s.max_height);
  read_key(j, "max_angle", s.max_angle);
  read_key(j, "max_bend", s.max_bend);
  read_key(j, "margin", s.margin);
  read_key(j, "pad", s.pad);
  read_key(j, "max_iou", s.max_iou);
  read_key(j, "attempts", s.attempts);
  read_key(j, "train_scenes", c.train_scenes);
  read_key(j, "val_scenes", c.val_scenes);
  s.validate();
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"model", to_json(c.model)}, {"train", to_json(c.train)}, {"data", to_json(c.data)}};
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"model", "train", "data"}, "config");
  ExperimentConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("data")) c.data = data_config_from_json(j.at("data"));
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path);
  try {
    return experiment_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// ---- training ---------------------------------------------------------------

struct TrainHooks {
  std::string out_dir;  // loss.csv and checkpoints go here when set
  std::function<void(std::size_t iter, const LossBreakdown&)> on_step;
};

struct TrainResult {
  std::string csv;  // full loss log, header included
  std::vector<Real> losses;
  std::string checkpoint;
};

inline const char* train_csv_header() {
  return "iter,total,enc_cls,enc_coord,enc_giou,dec_cls,dec_coord,dec_char,lr,grad_norm";
}

namespace detail {

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << text;
  if (!f) throw IoError("write failed: " + path);
}

}  // namespace detail

inline TrainResult train(FastTextSpotter& model, const TrainConfig& cfg, const std::vector<Sample>& data,
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  if (data.empty()) throw EmptyBatchError("training set is empty");
  if (!hooks.out_dir.empty()) std::filesystem::create_directories(hooks.out_dir);

  model.set_mode(NormMode::kTrain);
  const ParamList params = model.parameters();
  AdamW opt(params, cfg.optimizer());
  TrainResult result;
  std::ostringstream csv;
  csv << train_csv_header() << '\n';

  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size(), epoch = 0, drawn = 0;
  auto next_index = [&] {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), 0);
      Rng shuffle(mix_seed(cfg.seed, 0x0E0C0000 + epoch++));
      std::shuffle(order.begin(), order.end(), shuffle.engine());
      cursor = 0;
    }
    return order[cursor++];
  };

  for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
    opt.zero_grad();
    LossBreakdown mean;
    Real total = 0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const Sample& s = data[next_index()];
      const std::uint64_t batch_seed = mix_seed(cfg.seed, drawn++);
      try {
        LossBreakdown br;
        if (cfg.augment) {
          const Augmented a = augment(s.image, s.gt, batch_seed, cfg.augmentation);
          br = total_losses(model.forward(a.image), a.gt, cfg.loss);
        } else {
          br = total_losses(model.forward(s.image), s.gt, cfg.loss);
        }
        if (!std::isfinite(br.total.item())) throw NonFiniteError("loss is not finite");
        br.total.backward();
        total += br.total.item();
        mean.enc_cls += br.enc_cls;
        mean.enc_coord += br.enc_coord;
        mean.enc_giou += br.enc_giou;
        mean.dec_cls += br.dec_cls;
        mean.dec_coord += br.dec_coord;
        mean.dec_char += br.dec_char;
      } catch (const NonFiniteError& e) {
        std::ostringstream msg;
        msg << "non-finite value at iteration " << iter << " (scene seed " << s.spec.seed << ", batch seed "
            << batch_seed << "): " << e.what();
        if (!hooks.out_dir.empty()) {
          nlohmann::json dump{{"iteration", iter}, {"batch_seed", batch_seed}, {"scene", to_json(s.spec)},
                              {"error", e.what()}};
          detail::write_text(hooks.out_dir + "/nan_dump.json", dump.dump(2) + "\n");
          detail::write_text(hooks.out_dir + "/loss.csv", csv.str());
        }
        throw TrainingError(msg.str());
      }
    }
    const Real inv = 1.0 / static_cast<Real>(cfg.batch_size);
    if (cfg.batch_size > 1) opt.scale_grads(inv);
    const Real lr = cfg.lr_at(iter);
    const Real gnorm = opt.step(lr);

    mean.total = Tensor::scalar(total * inv);
    mean.enc_cls *= inv;
    mean.enc_coord *= inv;
    mean.enc_giou *= inv;
    mean.dec_cls *= inv;
    mean.dec_coord *= inv;
    mean.dec_char *= inv;
    std::ostringstream extra;
    extra.precision(17);
    extra << ',' << lr << ',' << gnorm;
    csv << mean.csv_row(iter) << extra.str() << '\n';
    result.losses.push_back(total * inv);
    if (hooks.on_step) hooks.on_step(iter, mean);

    if (!hooks.out_dir.empty() && cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 &&
        iter + 1 < cfg.iterations) {
      save_checkpoint(model, hooks.out_dir + "/ckpt_" + std::to_string(iter + 1) + ".bin");
    }
  }
  result.csv = csv.str();
  if (!hooks.out_dir.empty()) {
    detail::write_text(hooks.out_dir + "/loss.csv", result.csv);
    result.checkpoint = hooks.out_dir + "/model.bin";
    save_checkpoint(model, result.checkpoint);
  }
  return result;
}

// ---- evaluation -------------------------------------------------------------

struct DetectedText {
  Real conf = 0;
  ControlPolygon polygon;
  std::vector<int> chars;
};

struct EvalOptions {
  Real conf_threshold = 0.5;
  Real iou_threshold = 0.5;
};

struct Metrics {
  Real precision = 0, recall = 0, f = 0;
  std::size_t tp = 0, predicted = 0, expected = 0;

  static Metrics from_counts(std::size_t tp, std::size_t predicted, std::size_t expected) {
    Metrics m;
    m.tp = tp;
    m.predicted = predicted;
    m.expected = expected;
    m.precision = predicted ? static_cast<Real>(tp) / static_cast<Real>(predicted) : 0.0;
    m.recall = expected ? static_cast<Real>(tp) / static_cast<Real>(expected) : 0.0;
    m.f = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    return m;
  }
};

struct SceneDiagnostics {
  std::uint64_t seed = 0;
  std::size_t predicted = 0, expected = 0, det_tp = 0, e2e_tp = 0, e2e_full_tp = 0;
};

struct EvalReport {
  Metrics detection, e2e_none, e2e_full;
  bool has_full = false;
  std::vector<SceneDiagnostics> scenes;
};

inline nlohmann::json to_json(const Metrics& m) {
  return {{"precision", m.precision}, {"recall", m.recall}, {"f", m.f},
          {"tp", m.tp},               {"predicted", m.predicted}, {"expected", m.expected}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json scenes = nlohmann::json::array();
  for (const auto& s : r.scenes)
    scenes.push_back({{"seed", s.seed},
                      {"predicted", s.predicted},
                      {"expected", s.expected},
                      {"det_tp", s.det_tp},
                      {"e2e_tp", s.e2e_tp},
                      {"e2e_full_tp", s.e2e_full_tp}});
  nlohmann::json j{{"detection", to_json(r.detection)}, {"e2e_none", to_json(r.e2e_none)}, {"scenes", scenes}};
  if (r.has_full) j["e2e_full"] = to_json(r.e2e_full);
  return j;
}

inline std::size_t edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Closest lexicon entry by edit distance; ties go to the lexicographically smallest.
inline const std::vector<int>& nearest_word(const std::vector<int>& word, const std::vector<std::vector<int>>& lexicon) {
  if (lexicon.empty()) throw ContractError("lexicon is empty");
  const std::vector<int>* best = &lexicon.front();
  std::size_t best_d = edit_distance(word, *best);
  for (const auto& w : lexicon) {
    const std::size_t d = edit_distance(word, w);
    if (d < best_d || (d == best_d && w < *best)) {
      best = &w;
      best_d = d;
    }
  }
  return *best;
}

inline std::vector<std::vector<int>> build_lexicon(const std::vector<GroundTruth>& gts) {
  std::vector<std::vector<int>> lex;
  for (const auto& gt : gts)
    for (const auto& t : gt.transcripts) lex.push_back(t.chars);
  std::sort(lex.begin(), lex.end());
  lex.erase(std::unique(lex.begin(), lex.end()), lex.end());
  return lex;
}

// Argmax per slot with padding slots removed.
inline std::vector<int> decode_transcript(const Tensor& logits, std::size_t k, int pad_class) {
  const std::size_t A = logits.dim(1), C = logits.dim(2);
  const Real* row = logits.data().data() + k * A * C;
  std::vector<int> out;
  for (std::size_t a = 0; a < A; ++a) {
    const Real* p = row + a * C;
    const auto best = static_cast<int>(std::max_element(p, p + C) - p);
    if (best != pad_class) out.push_back(best);
  }
  return out;
}

inline std::vector<DetectedText> extract_detections(const LayerOutput& layer, int pad_class, Real conf_threshold) {
  std::vector<DetectedText> out;
  const std::size_t K = layer.conf.dim(0), M = layer.points.dim(1);
  for (std::size_t k = 0; k < K; ++k) {
    const Real c = layer.conf.data()[k];
    if (c < conf_threshold) continue;
    DetectedText d;
    d.conf = c;
    for (std::size_t m = 0; m < M; ++m)
      d.polygon.points.push_back({layer.points.data()[(k * M + m) * 2], layer.points.data()[(k * M + m) * 2 + 1]});
    d.chars = decode_transcript(layer.char_logits, k, pad_class);
    out.push_back(std::move(d));
  }
  return out;
}

// Greedy one-to-one matching by descending confidence; returns gt index per detection or -1.
inline std::vector<int> greedy_match(const std::vector<DetectedText>& dets, const GroundTruth& gt, Real iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].conf > dets[b].conf; });
  std::vector<int> match(dets.size(), -1);
  std::vector<char> taken(gt.size(), 0);
  for (std::size_t i : order) {
    Real best = iou_threshold;
    int arg = -1;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (taken[g]) continue;
      const Real iou = polygon_iou(dets[i].polygon, gt.polygons[g]);
      if (iou >= best) {
        best = iou;
        arg = static_cast<int>(g);
      }
    }
    if (arg >= 0) {
      taken[static_cast<std::size_t>(arg)] = 1;
      match[i] = arg;
    }
  }
  return match;
}

inline EvalReport evaluate_detections(const std::vector<std::vector<DetectedText>>& dets,
                                      const std::vector<GroundTruth>& gts, const EvalOptions& opt = {},
                                      const std::vector<std::vector<int>>& lexicon = {},
                                      const std::vector<std::uint64_t>& seeds = {}) {
  if (dets.size() != gts.size()) throw ContractError("prediction and ground-truth scene counts differ");
  EvalReport r;
  r.has_full = !lexicon.empty();
  std::size_t pred = 0, expected = 0, det_tp = 0, e2e_tp = 0, full_tp = 0;
  for (std::size_t s = 0; s < dets.size(); ++s) {
    std::vector<DetectedText> kept;
    for (const auto& d : dets[s])
      if (d.conf >= opt.conf_threshold) kept.push_back(d);
    const auto match = greedy_match(kept, gts[s], opt.iou_threshold);
    SceneDiagnostics diag;
    diag.seed = s < seeds.size() ? seeds[s] : s;
    diag.predicted = kept.size();
    diag.expected = gts[s].size();
    for (std::size_t i = 0; i < kept.size(); ++i) {
      if (match[i] < 0) continue;
      ++diag.det_tp;
      const auto& truth = gts[s].transcripts[static_cast<std::size_t>(match[i])].chars;
      if (kept[i].chars == truth) ++diag.e2e_tp;
      if (r.has_full && nearest_word(kept[i].chars, lexicon) == truth) ++diag.e2e_full_tp;
    }
    pred += diag.predicted;
    expected += diag.expected;
    det_tp += diag.det_tp;
    e2e_tp += diag.e2e_tp;
    full_tp += diag.e2e_full_tp;
    r.scenes.push_back(diag);
  }
  r.detection = Metrics::from_counts(det_tp, pred, expected);
  r.e2e_none = Metrics::from_counts(e2e_tp, pred, expected);
  if (r.has_full) r.e2e_full = Metrics::from_counts(full_tp, pred, expected);
  return r;
}

inline EvalReport evaluate(FastTextSpotter& model, const std::vector<Sample>& data, const EvalOptions& opt = {},
                           const std::vector<std::vector<int>>& lexicon = {}) {
  const NormMode saved = model.mode();
  model.set_mode(NormMode::kEval);
  std::vector<std::vector<DetectedText>> dets;
  std::vector<GroundTruth> gts;
  std::vector<std::uint64_t> seeds;
  {
    NoGradGuard no_grad;
    for (const auto& s : data) {
      const Predictions p = model.forward(s.image);
      dets.push_back(extract_detections(p.last(), model.config().pad_class(), opt.conf_threshold));
      gts.push_back(s.gt);
      seeds.push_back(s.spec.seed);
    }
  }
  model.set_mode(saved);
  return evaluate_detections(dets, gts, opt, lexicon, seeds);
}

// ---- throughput -------------------------------------------------------------

inline constexpr const char* kThroughputDisclaimer =
    "disclaimer: desk-scale CPU latency of a reduced model; the published 5.38 FPS figure is not reproduced";

struct BenchReport {
  std::vector<Real> samples_ms;
  Real median = 0, p10 = 0, p90 = 0;
  bool weights_unchanged = true;
};

inline Real percentile(std::vector<Real> v, Real q) {
  if (v.empty()) throw ContractError("percentile of an empty sample");
  std::sort(v.begin(), v.end());
  const Real pos = q * static_cast<Real>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<Real>(lo)) * (v[hi] - v[lo]);
}

inline BenchReport summarize(std::vector<Real> samples) {
  BenchReport r;
  r.median = percentile(samples, 0.5);
  r.p10 = percentile(samples, 0.1);
  r.p90 = percentile(samples, 0.9);
  r.samples_ms = std::move(samples);
  return r;
}

inline std::uint64_t weight_checksum(FastTextSpotter& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const ParamList params = model.parameters();
  auto mix = [&](const std::vector<Real>& v) {
    for (Real x : v) {
      std::uint64_t bits;
      std::memcpy(&bits, &x, sizeof bits);
      h = (h ^ bits) * 0x100000001b3ULL;
    }
  };
  for (const auto& e : params.params()) mix(e.tensor.data());
  for (const auto& b : params.buffers()) mix(*b.values);
  return h;
}

inline Tensor bench_image(std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Real> v(size * size * 3);
  for (Real& x : v) x = rng.uniform();
  return Tensor::from_data({size, size, 3}, std::move(v));
}

namespace detail {

inline Real time_forward_ms(FastTextSpotter& model, const Tensor& image) {
  NoGradGuard no_grad;
  const auto t0 = std::chrono::steady_clock::now();
  const Predictions p = model.forward(image);
  const auto t1 = std::chrono::steady_clock::now();
  if (!std::isfinite(p.last().conf.data()[0])) throw NonFiniteError("benchmark forward produced non-finite output");
  return std::chrono::duration<Real, std::milli>(t1 - t0).count();
}

}  // namespace detail

inline BenchReport bench(FastTextSpotter& model, std::size_t warmup, std::size_t timed, std::uint64_t seed = 0) {
  if (timed == 0) throw ContractError("bench needs at least one timed run");
  const NormMode saved = model.mode();
  model.set_mode(NormMode::kEval);
  const Tensor image = bench_image(model.config().image_size, seed);
  const std::uint64_t before = weight_checksum(model);
  for (std::size_t i = 0; i < warmup; ++i) detail::time_forward_ms(model, image);
  std::vector<Real> samples;
  for (std::size_t i = 0; i < timed; ++i) samples.push_back(detail::time_forward_ms(model, image));
  BenchReport r = summarize(std::move(samples));
  r.weights_unchanged = weight_checksum(model) == before;
  model.set_mode(saved);
  return r;
}

struct AttentionComparison {
  BenchReport sac2, vanilla;
  Real overhead = 0;  // median_sac2 / median_vanilla - 1
};

// Times SAC2 and vanilla decoders on identical configs, alternating runs so drift hits both.
inline AttentionComparison compare_attention(ModelConfig cfg, std::size_t warmup, std::size_t timed,
                                             std::uint64_t seed = 0) {
  if (timed == 0) throw ContractError("bench needs at least one timed run");
  cfg.ld_attention = cfg.cd_attention = SelfAttentionKind::kSac2;
  FastTextSpotter sac2(cfg);
  cfg.ld_attention = cfg.cd_attention = SelfAttentionKind::kVanilla;
  FastTextSpotter vanilla(cfg);
  sac2.set_mode(NormMode::kEval);
  vanilla.set_mode(NormMode::kEval);
  const Tensor image = bench_image(cfg.image_size, seed);
  const std::uint64_t cs = weight_checksum(sac2), cv = weight_checksum(vanilla);
  for (std::size_t i = 0; i < warmup; ++i) {
    detail::time_forward_ms(sac2, image);
    detail::time_forward_ms(vanilla, image);
  }
  std::vector<Real> ts, tv;
  for (std::size_t i = 0; i < timed; ++i) {
    if (i % 2 == 0) {
      ts.push_back(detail::time_forward_ms(sac2, image));
      tv.push_back(detail::time_forward_ms(vanilla, image));
    } else {
      tv.push_back(detail::time_forward_ms(vanilla, image));
      ts.push_back(detail::time_forward_ms(sac2, image));
    }
  }
  AttentionComparison out{summarize(std::move(ts)), summarize(std::move(tv)), 0};
  out.sac2.weights_unchanged = weight_checksum(sac2) == cs;
  out.vanilla.weights_unchanged = weight_checksum(vanilla) == cv;
  out.overhead = out.sac2.median / out.vanilla.median - 1;
  return out;
}

inline std::string format_bench(const std::string& label, const BenchReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  os << label << ": median " << r.median << " ms, p10 " << r.p10 << " ms, p90 " << r.p90 << " ms over "
     << r.samples_ms.size() << " runs (" << (r.median > 0 ? 1000.0 / r.median : 0.0) << " forwards/s)";
  return os.str();
}

// ---- experiments ------------------------------------------------------------

struct Dataset {
  std::vector<Sample> train, val;
};

inline Dataset build_dataset(const ExperimentConfig& cfg) {
  const auto& d = cfg.data;
  const auto train_specs = generate_scenes(0, d.train_scenes, d.scene);
  const auto val_specs = generate_scenes(d.train_scenes, d.val_scenes, d.scene);
  return {render_all(train_specs, cfg.model.image_size, cfg.model.M),
          render_all(val_specs, cfg.model.image_size, cfg.model.M)};
}

// Renders manifest scenes; their canvas maps onto image_size pixels.
inline std::vector<Sample> samples_from_manifest(const std::string& path, const ModelConfig& model) {
  return render_all(read_manifest(path), model.image_size, model.M);
}

struct RunResult {
  TrainResult training;
  EvalReport report;
};

inline RunResult run_experiment(const ExperimentConfig& cfg, const Dataset& data, const TrainHooks& hooks = {}) {
  cfg.validate();
  FastTextSpotter model(cfg.model);
  RunResult r;
  r.training = train(model, cfg.train, data.train, hooks);
  r.report = evaluate(model, data.val, {}, build_lexicon([&] {
                        std::vector<GroundTruth> g;
                        for (const auto& s : data.val) g.push_back(s.gt);
                        return g;
                      }()));
  return r;
}

struct AblationSetting {
  bool resampling, sac2_ld, sac2_cd;
};

// Fixed row order of the ablation table.
inline const std::vector<AblationSetting>& ablation_settings() {
  static const std::vector<AblationSetting> rows{
      {false, false, false}, {true, false, false}, {true, false, true}, {true, true, false}, {true, true, true}};
  return rows;
}

inline ModelConfig apply_setting(ModelConfig m, const AblationSetting& s) {
  m.query_mode = s.resampling ? QueryMode::kPoint : QueryMode::kBox;
  m.ld_attention = s.sac2_ld ? SelfAttentionKind::kSac2 : SelfAttentionKind::kVanilla;
  m.cd_attention = s.sac2_cd ? SelfAttentionKind::kSac2 : SelfAttentionKind::kVanilla;
  return m;
}

struct AblationRow {
  AblationSetting setting{};
  std::vector<EvalReport> runs;  // one per seed
  bool finite = true;
  Metrics detection, e2e;        // seed-median values

  Real median_e2e() const { return e2e.f; }
};

inline Real median_of(std::vector<Real> v) { return percentile(std::move(v), 0.5); }

inline std::vector<AblationRow> ablate(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds,
                                       const Dataset& data,
                                       const std::function<void(std::size_t row, std::uint64_t seed,
                                                                const RunResult&)>& on_run = {}) {
  if (seeds.empty()) throw ContractError("ablation needs at least one seed");
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < ablation_settings().size(); ++i) {
    AblationRow row;
    row.setting = ablation_settings()[i];
    std::vector<Real> dp, dr, df, ep, er, ef;
    for (std::uint64_t seed : seeds) {
      ExperimentConfig cfg = base;
      cfg.model = apply_setting(base.model, row.setting);
      cfg.model.seed = seed;
      cfg.train.seed = seed;
      RunResult run;
      try {
        run = run_experiment(cfg, data);
      } catch (const TrainingError&) {
        row.finite = false;
        run.report = evaluate_detections(std::vector<std::vector<DetectedText>>(data.val.size()),
                                         std::vector<GroundTruth>(data.val.size()));
      }
      for (Real l : run.training.losses) row.finite = row.finite && std::isfinite(l);
      if (on_run) on_run(i, seed, run);
      const auto& r = run.report;
      dp.push_back(r.detection.precision);
      dr.push_back(r.detection.recall);
      df.push_back(r.detection.f);
      ep.push_back(r.e2e_none.precision);
      er.push_back(r.e2e_none.recall);
      ef.push_back(r.e2e_none.f);
      row.runs.push_back(r);
    }
    row.detection.precision = median_of(dp);
    row.detection.recall = median_of(dr);
    row.detection.f = median_of(df);
    row.e2e.precision = median_of(ep);
    row.e2e.recall = median_of(er);
    row.e2e.f = median_of(ef);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << "| resampling | SAC2 in LD | SAC2 in CD | det P | det R | det F | e2e P | e2e R | e2e H |\n";
  os << "|---|---|---|---|---|---|---|---|---|\n";
  auto mark = [](bool b) { return b ? "yes" : "no"; };
  for (const auto& r : rows) {
    os << "| " << mark(r.setting.resampling) << " | " << mark(r.setting.sac2_ld) << " | " << mark(r.setting.sac2_cd)
       << " | " << 100 * r.detection.precision << " | " << 100 * r.detection.recall << " | " << 100 * r.detection.f
       << " | " << 100 * r.e2e.precision << " | " << 100 * r.e2e.recall << " | " << 100 * r.e2e.f << " |\n";
  }
  return os.str();
}

// ---- attention maps ---------------------------------------------------------

// Per encoder layer and head: attention mass landing on each finest-level cell,
// averaged over queries and scaled so the hottest cell is 255.
inline std::vector<std::string> dump_attention(FastTextSpotter& model, const Tensor& image, const std::string& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) throw IoError("cannot create directory " + out_dir);
  const NormMode saved = model.mode();
  model.set_mode(NormMode::kEval);
  std::vector<AttentionRecord> records;
  MultiScaleFeatures feats;
  {
    NoGradGuard no_grad;
    feats = model.backbone_forward(image);
    model.encode(feats, &records);
  }
  model.set_mode(saved);
  const std::size_t h = feats.levels[0].h, w = feats.levels[0].w;
  std::vector<std::string> paths;
  for (std::size_t l = 0; l < records.size(); ++l) {
    const auto& rec = records[l];
    for (std::size_t head = 0; head < rec.heads; ++head) {
      std::vector<Real> heat(h * w, 0.0);
      for (std::size_t q = 0; q < rec.n; ++q)
        for (std::size_t lv = 0; lv < rec.levels; ++lv)
          for (std::size_t p = 0; p < rec.points; ++p) {
            const std::size_t i = ((q * rec.heads + head) * rec.levels + lv) * rec.points + p;
            const detail::BilinearTap tap = detail::bilinear_tap(rec.locations[i * 2], rec.locations[i * 2 + 1], h, w);
            for (std::size_t t = 0; t < 4; ++t)
              if (tap.valid[t]) heat[tap.index[t]] += rec.weights[i] * tap.weight[t];
          }
      const Real peak = *std::max_element(heat.begin(), heat.end());
      std::vector<unsigned char> px(h * w, 0);
      for (std::size_t i = 0; i < heat.size(); ++i)
        px[i] = static_cast<unsigned char>(peak > 0 ? std::lround(std::clamp(heat[i] / peak, 0.0, 1.0) * 255) : 0);
      const std::string path = out_dir + "/enc" + std::to_string(l) + "_head" + std::to_string(head) + ".pgm";
      write_pgm(path, w, h, px);
      paths.push_back(path);
    }
  }
  return paths;
}

}  // namespace ftsp
