#pragma once

#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "ftsp/model.hpp"

namespace ftsp {

struct LossWeights {
  Real cls = 2.0;
  Real coord = 5.0;
  Real chr = 4.0;
  Real giou = 2.0;
  Real alpha = 0.25;
  Real gamma = 2.0;
  bool match_chars = false;  // add the character term to the decoder matching cost

  void validate() const {
    if (cls < 0 || coord < 0 || chr < 0 || giou < 0) throw ConfigError("loss weights must be nonnegative");
    if (!(alpha > 0 && alpha < 1) || gamma < 0) throw ConfigError("focal alpha must be in (0,1), gamma >= 0");
  }
};

inline constexpr Real kProbClamp = 1e-7;

// Row-to-column assignment; query_of[g] is the query matched to ground truth g.
struct MatchResult {
  std::vector<std::size_t> query_of;

  std::size_t size() const { return query_of.size(); }
  Real normalizer() const { return std::max<Real>(1.0, static_cast<Real>(query_of.size())); }
};

// Minimum-cost assignment of every row to a distinct column (rows <= cols), by
// shortest augmenting paths with dual potentials. cost is row-major [rows, cols].
inline std::vector<std::size_t> hungarian(const std::vector<Real>& cost, std::size_t rows, std::size_t cols) {
  if (rows > cols) throw ContractError("hungarian needs rows <= cols");
  if (cost.size() != rows * cols) throw DimensionError("hungarian cost size");
  if (rows == 0) return {};
  const Real inf = std::numeric_limits<Real>::infinity();
  std::vector<Real> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<std::size_t> p(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<Real> minv(cols + 1, inf);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      Real delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const Real cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<std::size_t> row_to_col(rows);
  for (std::size_t j = 1; j <= cols; ++j)
    if (p[j]) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

inline Real assignment_cost(const std::vector<Real>& cost, std::size_t cols, const std::vector<std::size_t>& row_to_col) {
  Real total = 0;
  for (std::size_t r = 0; r < row_to_col.size(); ++r) total += cost[r * cols + row_to_col[r]];
  return total;
}

// Focal matching cost of calling a query with confidence b a positive.
inline Real focal_cost(Real b, const LossWeights& w) {
  b = std::clamp(b, kProbClamp, 1.0 - kProbClamp);
  const Real pos = w.alpha * std::pow(1 - b, w.gamma) * -std::log(b);
  const Real neg = (1 - w.alpha) * std::pow(b, w.gamma) * -std::log(1 - b);
  return pos - neg;
}

// Cost matrix [G, K] between ground-truth polygons and one decoder layer's queries.
inline std::vector<Real> point_match_cost(const LayerOutput& layer, const GroundTruth& gt, const LossWeights& w) {
  const std::size_t K = layer.conf.dim(0), M = layer.points.dim(1), G = gt.size();
  std::vector<Real> cost(G * K);
  const auto& pts = layer.points.data();
  for (std::size_t g = 0; g < G; ++g) {
    if (gt.polygons[g].size() != M) throw ContractError("ground-truth polygon has the wrong point count");
    for (std::size_t k = 0; k < K; ++k) {
      Real l1 = 0;
      for (std::size_t m = 0; m < M; ++m) {
        l1 += std::abs(pts[(k * M + m) * 2] - gt.polygons[g].points[m].x) +
              std::abs(pts[(k * M + m) * 2 + 1] - gt.polygons[g].points[m].y);
      }
      cost[g * K + k] = w.cls * focal_cost(layer.conf[k], w) + w.coord * l1;
    }
  }
  if (w.match_chars && layer.char_logits.defined()) {
    const std::size_t A = layer.char_logits.dim(1), C = layer.char_logits.dim(2);
    const auto& lg = layer.char_logits.data();
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t k = 0; k < K; ++k) {
        Real ce = 0;
        for (std::size_t a = 0; a < A; ++a) {
          const Real* row = lg.data() + (k * A + a) * C;
          Real mx = row[0];
          for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
          Real z = 0;
          for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
          const auto& chars = gt.transcripts[g].chars;
          const std::size_t target = a < chars.size() ? static_cast<std::size_t>(chars[a]) : C - 1;
          ce += mx + std::log(z) - row[target];
        }
        cost[g * K + k] += w.chr * ce;
      }
  }
  return cost;
}

// Cost matrix [G, N] between ground-truth boxes and encoder tokens.
inline std::vector<Real> box_match_cost(const Tensor& scores, const Tensor& boxes, const GroundTruth& gt,
                                        const LossWeights& w) {
  const std::size_t N = scores.dim(0), G = gt.size();
  std::vector<Real> cost(G * N);
  const auto& bd = boxes.data();
  for (std::size_t g = 0; g < G; ++g) {
    const AnchorBox& t = gt.boxes[g];
    for (std::size_t i = 0; i < N; ++i) {
      const AnchorBox b{bd[i * 4], bd[i * 4 + 1], bd[i * 4 + 2], bd[i * 4 + 3]};
      const Real l1 = std::abs(b.s - t.s) + std::abs(b.r - t.r) + std::abs(b.c - t.c) + std::abs(b.d - t.d);
      cost[g * N + i] = w.cls * focal_cost(scores[i], w) + w.coord * l1 - w.giou * box_giou(b, t);
    }
  }
  return cost;
}

inline MatchResult match_from_cost(const std::vector<Real>& cost, std::size_t G, std::size_t K) {
  if (G > K) throw ContractError("more ground-truth instances (" + std::to_string(G) + ") than queries (" +
                                 std::to_string(K) + ")");
  return {hungarian(cost, G, K)};
}

inline MatchResult match_instances(const LayerOutput& layer, const GroundTruth& gt, const LossWeights& w) {
  const std::size_t K = layer.conf.dim(0);
  if (gt.size() > K) throw ContractError("more ground-truth instances than queries");
  return match_from_cost(point_match_cost(layer, gt, w), gt.size(), K);
}

// ---- losses -----------------------------------------------------------------

inline Tensor focal_loss(const Tensor& conf, const MatchResult& match, Real alpha, Real gamma) {
  const std::size_t K = conf.dim(0);
  std::vector<Real> target(K, 0.0);
  for (std::size_t q : match.query_of) target[q] = 1.0;
  const Tensor t = Tensor::from_data({K}, target);
  const Tensor nt = Tensor::from_data({K}, [&] {
    std::vector<Real> v(K);
    for (std::size_t i = 0; i < K; ++i) v[i] = 1.0 - target[i];
    return v;
  }());
  const Tensor p = clamp(conf, kProbClamp, 1.0 - kProbClamp);
  const Tensor one_minus = add_scalar(neg(p), 1.0);
  const Tensor pos = scale(mul(pow_scalar(one_minus, gamma), log(p)), -alpha);
  const Tensor negt = scale(mul(pow_scalar(p, gamma), log(one_minus)), -(1 - alpha));
  return scale(sum(add(mul(t, pos), mul(nt, negt))), 1.0 / match.normalizer());
}

inline Tensor coord_loss(const Tensor& points, const MatchResult& match, const GroundTruth& gt) {
  const std::size_t K = points.dim(0), M = points.dim(1), G = match.size();
  if (G == 0) return Tensor::scalar(0.0);
  std::vector<Real> target;
  for (std::size_t g = 0; g < G; ++g) {
    if (gt.polygons[g].size() != M) throw ContractError("ground-truth polygon has the wrong point count");
    for (const auto& pt : gt.polygons[g].points) target.insert(target.end(), {pt.x, pt.y});
  }
  const Tensor picked = index_select(reshape(points, {K, M * 2}), match.query_of);
  const Tensor diff = sub(picked, Tensor::from_data({G, M * 2}, std::move(target)));
  return scale(sum(abs(diff)), 1.0 / match.normalizer());
}

// Slot targets: transcript characters then the padding class.
inline std::vector<int> padded_targets(const Transcript& t, std::size_t A, int pad) {
  if (t.chars.size() > A) throw ContractError("transcript longer than the character slot count");
  std::vector<int> out(A, pad);
  std::copy(t.chars.begin(), t.chars.end(), out.begin());
  return out;
}

inline Tensor char_loss(const Tensor& logits, const MatchResult& match, const GroundTruth& gt) {
  const std::size_t K = logits.dim(0), A = logits.dim(1), C = logits.dim(2), G = match.size();
  if (G == 0) return Tensor::scalar(0.0);
  std::vector<int> targets;
  for (std::size_t g = 0; g < G; ++g) {
    const auto t = padded_targets(gt.transcripts[g], A, static_cast<int>(C - 1));
    targets.insert(targets.end(), t.begin(), t.end());
  }
  const Tensor picked = reshape(index_select(reshape(logits, {K, A * C}), match.query_of), {G, A, C});
  return scale(sum(pick(log_softmax(picked), targets)), -1.0 / match.normalizer());
}

inline Tensor giou_loss(const Tensor& boxes, const MatchResult& match, const GroundTruth& gt) {
  const std::size_t G = match.size();
  if (G == 0) return Tensor::scalar(0.0);
  const Tensor picked = index_select(boxes, match.query_of);
  const Tensor target = boxes_tensor(gt.boxes);
  const Tensor g = box_giou(picked, target);
  return scale(sub(Tensor::scalar(static_cast<Real>(G)), sum(g)), 1.0 / match.normalizer());
}

inline Tensor box_l1_loss(const Tensor& boxes, const MatchResult& match, const GroundTruth& gt) {
  const std::size_t G = match.size();
  if (G == 0) return Tensor::scalar(0.0);
  const Tensor picked = index_select(boxes, match.query_of);
  return scale(sum(abs(sub(picked, boxes_tensor(gt.boxes)))), 1.0 / match.normalizer());
}

// Weighted components; dec_* are summed over decoder layers.
struct LossBreakdown {
  Tensor total;
  Real enc_cls = 0, enc_coord = 0, enc_giou = 0;
  Real dec_cls = 0, dec_coord = 0, dec_char = 0;
  std::vector<MatchResult> layer_matches;
  MatchResult enc_match;

  std::string csv_row(std::size_t iter) const {
    std::ostringstream os;
    os.precision(17);
    os << iter << ',' << total.item() << ',' << enc_cls << ',' << enc_coord << ',' << enc_giou << ',' << dec_cls
       << ',' << dec_coord << ',' << dec_char;
    return os.str();
  }

  static const char* csv_header() { return "iter,total,enc_cls,enc_coord,enc_giou,dec_cls,dec_coord,dec_char"; }
};

inline LossBreakdown total_losses(const Predictions& preds, const GroundTruth& gt, const LossWeights& w) {
  LossBreakdown out;
  std::vector<Tensor> terms;
  auto add_term = [&](const Tensor& t, Real weight, Real& slot) {
    const Tensor wt = scale(t, weight);
    slot += wt.item();
    terms.push_back(wt);
  };

  const auto& enc = preds.enc;
  out.enc_match = match_from_cost(box_match_cost(enc.scores, enc.boxes, gt, w), gt.size(), enc.scores.dim(0));
  add_term(focal_loss(enc.scores, out.enc_match, w.alpha, w.gamma), w.cls, out.enc_cls);
  add_term(box_l1_loss(enc.boxes, out.enc_match, gt), w.coord, out.enc_coord);
  add_term(giou_loss(enc.boxes, out.enc_match, gt), w.giou, out.enc_giou);

  for (const auto& layer : preds.layers) {
    MatchResult m = match_instances(layer, gt, w);
    add_term(focal_loss(layer.conf, m, w.alpha, w.gamma), w.cls, out.dec_cls);
    add_term(coord_loss(layer.points, m, gt), w.coord, out.dec_coord);
    add_term(char_loss(layer.char_logits, m, gt), w.chr, out.dec_char);
    out.layer_matches.push_back(std::move(m));
  }
  Tensor total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  out.total = total;
  return out;
}

}  // namespace ftsp
