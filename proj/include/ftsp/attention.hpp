#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "ftsp/geometry.hpp"
#include "ftsp/nn.hpp"

namespace ftsp {

struct AttentionConfig {
  std::size_t heads = 8;
  std::size_t d = 64;
  std::size_t levels = 2;
  std::size_t sampling_points = 4;
  std::size_t kernel = 3;

  void validate() const {
    if (heads == 0 || d % heads != 0) throw ContractError("model dim must be divisible by heads");
    if (levels == 0 || sampling_points == 0) throw ContractError("levels and points must be >= 1");
    if (kernel % 2 == 0) throw ContractError("circular kernel width must be odd");
  }
};

struct LevelShape {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t start = 0;  // first row of this level in the flattened token table
};

// Feature pyramid stored as one flattened token table [sum(h*w), d].
struct MultiScaleFeatures {
  Tensor tokens;
  std::vector<LevelShape> levels;

  std::size_t num_levels() const { return levels.size(); }
  std::size_t num_tokens() const { return tokens.dim(0); }
  std::size_t dim() const { return tokens.dim(1); }

  Tensor level(std::size_t l) const {
    const auto& s = levels.at(l);
    return reshape(slice(tokens, 0, s.start, s.h * s.w), {s.h, s.w, dim()});
  }

  // Normalised pixel-center coordinates of one level, row-major.
  std::vector<Point2> level_centers(std::size_t l) const {
    const auto& s = levels.at(l);
    std::vector<Point2> out;
    out.reserve(s.h * s.w);
    for (std::size_t i = 0; i < s.h; ++i)
      for (std::size_t j = 0; j < s.w; ++j)
        out.push_back({(static_cast<Real>(j) + 0.5) / static_cast<Real>(s.w),
                       (static_cast<Real>(i) + 0.5) / static_cast<Real>(s.h)});
    return out;
  }

  std::vector<Point2> token_centers() const {
    std::vector<Point2> out;
    for (std::size_t l = 0; l < levels.size(); ++l) {
      auto c = level_centers(l);
      out.insert(out.end(), c.begin(), c.end());
    }
    return out;
  }

  static MultiScaleFeatures from_levels(const std::vector<Tensor>& grids) {
    MultiScaleFeatures f;
    std::vector<Tensor> flat;
    std::size_t start = 0;
    for (const Tensor& g : grids) {
      if (g.rank() != 3) throw DimensionError("feature level must be [h, w, d]");
      f.levels.push_back({g.dim(0), g.dim(1), start});
      start += g.dim(0) * g.dim(1);
      flat.push_back(reshape(g, {g.dim(0) * g.dim(1), g.dim(2)}));
    }
    f.tokens = flat.size() == 1 ? flat[0] : concat(flat, 0);
    return f;
  }
};

// Optional sink for attention probabilities, used for visualisation.
struct AttentionRecord {
  // Softmax weights [n, heads, levels, points] and absolute sampling locations
  // [n, heads, levels, points, 2] of the most recent deformable call.
  std::vector<Real> weights;
  std::vector<Real> locations;
  std::size_t n = 0, heads = 0, levels = 0, points = 0;
};

// ---- dense attention -------------------------------------------------------

struct MultiHeadAttention {
  std::size_t heads = 1;
  std::size_t d = 0;
  Linear q_proj, k_proj, v_proj, o_proj;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t num_heads, Rng& rng)
      : heads(num_heads), d(dim), q_proj(dim, dim, rng), k_proj(dim, dim, rng), v_proj(dim, dim, rng),
        o_proj(dim, dim, rng) {
    if (heads == 0 || d % heads != 0) throw ContractError("attention dim not divisible by heads");
  }

  // q, k, v: [B, n, d] -> [B, n, d]. `logit_bias` is added to the [B, heads, n, n]
  // scores and must have a suffix-compatible shape.
  Tensor operator()(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& logit_bias = Tensor()) const {
    if (q.rank() != 3 || k.shape() != q.shape() || v.shape() != q.shape()) {
      throw DimensionError("attention expects matching [B, n, d] inputs");
    }
    const std::size_t B = q.dim(0), n = q.dim(1), dh = d / heads;
    auto split = [&](const Tensor& x) { return permute(reshape(x, {B, n, heads, dh}), {0, 2, 1, 3}); };
    const Tensor qh = split(q_proj(q));
    const Tensor kh = split(k_proj(k));
    const Tensor vh = split(v_proj(v));
    Tensor scores = scale(matmul(qh, kh, true), 1.0 / std::sqrt(static_cast<Real>(dh)));
    if (logit_bias.defined()) scores = add(scores, logit_bias);
    const Tensor probs = softmax(scores, -1);
    const Tensor ctx = permute(matmul(probs, vh), {0, 2, 1, 3});
    return o_proj(reshape(ctx, {B, n, d}));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    q_proj.collect(out, prefix + ".q");
    k_proj.collect(out, prefix + ".k");
    v_proj.collect(out, prefix + ".v");
    o_proj.collect(out, prefix + ".o");
  }
};

inline Tensor self_attention(const MultiHeadAttention& mha, const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2) throw DimensionError("self_attention expects [n, d]");
  const Shape s3{1, q.dim(0), q.dim(1)};
  return reshape(mha(reshape(q, s3), reshape(k, s3), reshape(v, s3)), q.shape());
}

// Attention among the M sub-queries of each group independently. Queries and keys
// carry the positional part, values do not.
inline Tensor sa_intra(const MultiHeadAttention& mha, const Tensor& content, const Tensor& pos) {
  const Tensor qk = add(content, pos);
  return mha(qk, qk, content);
}

// Attention across the K groups, independently for each sub-query index.
inline Tensor sa_inter(const MultiHeadAttention& mha, const Tensor& content, const Tensor& pos) {
  const Tensor x = transpose(content, 0, 1);
  const Tensor qk = transpose(add(content, pos), 0, 1);
  return transpose(mha(qk, qk, x), 0, 1);
}

// out[k, m] = sum_j x[k, (m + j - kernel/2) mod M] w[j]; x[K, M, din], w[kernel, din, dout].
inline Tensor circular_conv1d(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor()) {
  if (x.rank() != 3 || w.rank() != 3 || w.dim(1) != x.dim(2)) {
    throw DimensionError("circular_conv1d shapes " + shape_str(x.shape()) + " * " + shape_str(w.shape()));
  }
  const std::size_t kernel = w.dim(0);
  if (kernel % 2 == 0) throw ContractError("circular kernel width must be odd");
  const auto half = static_cast<std::ptrdiff_t>(kernel / 2);
  std::vector<Tensor> taps;
  taps.reserve(kernel);
  for (std::size_t j = 0; j < kernel; ++j) {
    // roll by s gives out[m] = x[m - s]; we need x[m + j - half].
    taps.push_back(roll(x, 1, half - static_cast<std::ptrdiff_t>(j)));
  }
  const Tensor stacked = kernel == 1 ? taps[0] : concat(taps, 2);
  return linear(stacked, reshape(w, {kernel * w.dim(1), w.dim(2)}), bias);
}

enum class SelfAttentionKind { kVanilla, kSac2 };

// Factorised self-attention over [K, M, d] queries, optionally with the
// circular-convolution local branch and content shortcut fusion.
struct Sac2Block {
  SelfAttentionKind kind = SelfAttentionKind::kSac2;
  std::size_t d = 0;
  MultiHeadAttention intra, inter;
  LayerNorm norm_intra, norm_inter;
  // Local branch and fusion, present only in the SAC2 variant.
  Tensor conv_weight;  // [kernel, d, d]
  Tensor conv_bias;    // [d]
  BatchNorm1d bn;
  Linear fuse;
  LayerNorm norm_fuse;

  Sac2Block() = default;
  Sac2Block(SelfAttentionKind k, std::size_t dim, std::size_t heads, std::size_t kernel, Rng& rng)
      : kind(k), d(dim), intra(dim, heads, rng), inter(dim, heads, rng), norm_intra(dim), norm_inter(dim) {
    if (kind == SelfAttentionKind::kSac2) {
      if (kernel % 2 == 0) throw ContractError("circular kernel width must be odd");
      const Real bound = std::sqrt(6.0 / static_cast<Real>(kernel * dim + dim));
      std::vector<Real> w(kernel * dim * dim);
      for (Real& v : w) v = rng.uniform(-bound, bound);
      conv_weight = make_param({kernel, dim, dim}, std::move(w));
      conv_bias = make_param({dim}, std::vector<Real>(dim, 0.0));
      bn = BatchNorm1d(dim);
      fuse = Linear(dim, dim, rng);
      norm_fuse = LayerNorm(dim);
    }
  }

  // Q_local = ReLU(BN(CirConv(Q))) with BN statistics over all K*M positions.
  Tensor local_branch(const Tensor& q, NormMode mode) {
    const std::size_t K = q.dim(0), M = q.dim(1);
    const Tensor conv = circular_conv1d(q, conv_weight, conv_bias);
    return relu(reshape(bn(reshape(conv, {K * M, d}), mode), {K, M, d}));
  }

  // x: [K, M, d] layer input, pos: [K, M, d], content: [M, d] shared content queries.
  Tensor operator()(const Tensor& x, const Tensor& pos, const Tensor& content, NormMode mode) {
    const Tensor q_intra = sa_intra(intra, x, pos);
    Tensor fused;
    if (kind == SelfAttentionKind::kVanilla) {
      fused = norm_intra(add(x, q_intra));
    } else {
      const Tensor q_local = local_branch(add(x, pos), mode);
      const Tensor mixed = norm_intra(add(q_intra, q_local));
      fused = norm_fuse(fuse(add(mixed, content)));
    }
    return norm_inter(add(fused, sa_inter(inter, fused, pos)));
  }

  void collect(ParamList& out, const std::string& prefix) {
    intra.collect(out, prefix + ".intra");
    inter.collect(out, prefix + ".inter");
    norm_intra.collect(out, prefix + ".norm_intra");
    norm_inter.collect(out, prefix + ".norm_inter");
    if (kind == SelfAttentionKind::kSac2) {
      out.add(prefix + ".conv.weight", conv_weight);
      out.add(prefix + ".conv.bias", conv_bias);
      bn.collect(out, prefix + ".bn");
      fuse.collect(out, prefix + ".fuse");
      norm_fuse.collect(out, prefix + ".norm_fuse");
    }
  }
};

// ---- deformable sampling ---------------------------------------------------

namespace detail {

struct BilinearTap {
  std::size_t index[4];
  Real weight[4];
  Real dwx[4];  // d weight / d px
  Real dwy[4];  // d weight / d py
  bool valid[4];
};

// align_corners=false: pixel i has its center at (i + 0.5) / extent.
inline BilinearTap bilinear_tap(Real x, Real y, std::size_t h, std::size_t w) {
  const Real px = x * static_cast<Real>(w) - 0.5;
  const Real py = y * static_cast<Real>(h) - 0.5;
  const Real fx0 = std::floor(px), fy0 = std::floor(py);
  const Real fx = px - fx0, fy = py - fy0;
  const auto x0 = static_cast<std::ptrdiff_t>(fx0), y0 = static_cast<std::ptrdiff_t>(fy0);
  BilinearTap t{};
  const std::ptrdiff_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const std::ptrdiff_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const Real wts[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
  const Real dx[4] = {-(1 - fy), (1 - fy), -fy, fy};
  const Real dy[4] = {-(1 - fx), -fx, (1 - fx), fx};
  for (int c = 0; c < 4; ++c) {
    t.valid[c] = xs[c] >= 0 && ys[c] >= 0 && xs[c] < static_cast<std::ptrdiff_t>(w) &&
                 ys[c] < static_cast<std::ptrdiff_t>(h);
    t.index[c] = t.valid[c] ? static_cast<std::size_t>(ys[c]) * w + static_cast<std::size_t>(xs[c]) : 0;
    t.weight[c] = wts[c];
    t.dwx[c] = dx[c] * static_cast<Real>(w);
    t.dwy[c] = dy[c] * static_cast<Real>(h);
  }
  return t;
}

}  // namespace detail

// Multi-scale deformable aggregation.
//   value   [N, heads, dh] flattened over levels (see MultiScaleFeatures)
//   refs    [n, 2] normalised reference points
//   offsets [n, heads, L, P, 2] added to refs
//   weights [n, heads, L, P]
// returns [n, heads * dh]. Samples outside the grid read zeros.
inline Tensor deformable_sample(const Tensor& value, const std::vector<LevelShape>& levels, const Tensor& refs,
                                const Tensor& offsets, const Tensor& weights) {
  if (value.rank() != 3 || refs.rank() != 2 || refs.dim(1) != 2 || offsets.rank() != 5 || weights.rank() != 4) {
    throw DimensionError("deformable_sample operand ranks");
  }
  const std::size_t n = refs.dim(0), H = value.dim(1), dh = value.dim(2);
  const std::size_t L = offsets.dim(2), P = offsets.dim(3);
  if (offsets.dim(0) != n || offsets.dim(1) != H || offsets.dim(4) != 2 || L != levels.size()) {
    throw DimensionError("deformable_sample offsets shape " + shape_str(offsets.shape()));
  }
  if (weights.shape() != Shape{n, H, L, P}) throw DimensionError("deformable_sample weights shape");
  std::vector<Real> out(n * H * dh, 0.0);
  const Real* vd = value.data().data();
  const Real* rd = refs.data().data();
  const Real* od = offsets.data().data();
  const Real* wd = weights.data().data();
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t h = 0; h < H; ++h) {
      Real* o = out.data() + (q * H + h) * dh;
      for (std::size_t l = 0; l < L; ++l) {
        const auto& lv = levels[l];
        for (std::size_t p = 0; p < P; ++p) {
          const std::size_t slot = ((q * H + h) * L + l) * P + p;
          const Real aw = wd[slot];
          const auto tap = detail::bilinear_tap(rd[q * 2] + od[slot * 2], rd[q * 2 + 1] + od[slot * 2 + 1], lv.h, lv.w);
          for (int c = 0; c < 4; ++c) {
            if (!tap.valid[c]) continue;
            const Real cw = aw * tap.weight[c];
            const Real* v = vd + ((lv.start + tap.index[c]) * H + h) * dh;
            for (std::size_t e = 0; e < dh; ++e) o[e] += cw * v[e];
          }
        }
      }
    }
  auto pv = value.impl_ptr(), pr = refs.impl_ptr(), po = offsets.impl_ptr(), pw = weights.impl_ptr();
  return detail::make_result(
      "deformable_sample", {n, H * dh}, std::move(out), {value, refs, offsets, weights},
      [pv, pr, po, pw, levels, n, H, dh, L, P](TensorImpl& self) {
        auto* gv = detail::grad_of(pv);
        auto* gr = detail::grad_of(pr);
        auto* go = detail::grad_of(po);
        auto* gw = detail::grad_of(pw);
        const Real* vd = pv->data.data();
        for (std::size_t q = 0; q < n; ++q)
          for (std::size_t h = 0; h < H; ++h) {
            const Real* g = self.grad.data() + (q * H + h) * dh;
            for (std::size_t l = 0; l < L; ++l) {
              const auto& lv = levels[l];
              for (std::size_t p = 0; p < P; ++p) {
                const std::size_t slot = ((q * H + h) * L + l) * P + p;
                const Real aw = pw->data[slot];
                const auto tap = detail::bilinear_tap(pr->data[q * 2] + po->data[slot * 2],
                                                      pr->data[q * 2 + 1] + po->data[slot * 2 + 1], lv.h, lv.w);
                Real dsample = 0, dx = 0, dy = 0;
                for (int c = 0; c < 4; ++c) {
                  if (!tap.valid[c]) continue;
                  const std::size_t row = ((lv.start + tap.index[c]) * H + h) * dh;
                  Real dot = 0;
                  for (std::size_t e = 0; e < dh; ++e) dot += g[e] * vd[row + e];
                  dsample += tap.weight[c] * dot;
                  dx += tap.dwx[c] * dot;
                  dy += tap.dwy[c] * dot;
                  if (gv) {
                    const Real cw = aw * tap.weight[c];
                    for (std::size_t e = 0; e < dh; ++e) (*gv)[row + e] += cw * g[e];
                  }
                }
                if (gw) (*gw)[slot] += dsample;
                if (go) {
                  (*go)[slot * 2] += aw * dx;
                  (*go)[slot * 2 + 1] += aw * dy;
                }
                if (gr) {
                  (*gr)[q * 2] += aw * dx;
                  (*gr)[q * 2 + 1] += aw * dy;
                }
              }
            }
          }
      });
}

// Bilinear read of features[H, W, d] at a normalised location loc[2].
inline Tensor bilinear_sample(const Tensor& features, const Tensor& loc) {
  if (features.rank() != 3 || loc.numel() != 2) throw DimensionError("bilinear_sample shapes");
  const std::size_t h = features.dim(0), w = features.dim(1), d = features.dim(2);
  const Tensor value = reshape(features, {h * w, 1, d});
  const Tensor ref = reshape(loc, {1, 2});
  const Tensor zero_offsets = Tensor::zeros({1, 1, 1, 1, 2});
  const Tensor unit_weight = Tensor::full({1, 1, 1, 1}, 1.0);
  return reshape(deformable_sample(value, {{h, w, 0}}, ref, zero_offsets, unit_weight), {d});
}

struct DeformableAttention {
  AttentionConfig cfg;
  Linear value_proj, offset_proj, weight_proj, out_proj;

  DeformableAttention() = default;
  DeformableAttention(const AttentionConfig& config, Rng& rng) : cfg(config) {
    cfg.validate();
    const std::size_t slots = cfg.heads * cfg.levels * cfg.sampling_points;
    value_proj = Linear(cfg.d, cfg.d, rng);
    out_proj = Linear(cfg.d, cfg.d, rng);
    offset_proj = Linear(cfg.d, slots * 2, rng);
    weight_proj = Linear(cfg.d, slots, rng);
    // Offsets start near a fan of directions per head, growing per point, with
    // near-uniform attention weights.
    for (Real& v : offset_proj.weight.mutable_data()) v = rng.uniform(-kInitialSpread, kInitialSpread);
    for (Real& v : weight_proj.weight.mutable_data()) v = rng.uniform(-kInitialSpread, kInitialSpread);
    auto& ob = offset_proj.bias.mutable_data();
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const Real theta = 2.0 * std::numbers::pi * static_cast<Real>(h) / static_cast<Real>(cfg.heads);
      for (std::size_t l = 0; l < cfg.levels; ++l)
        for (std::size_t p = 0; p < cfg.sampling_points; ++p) {
          const std::size_t slot = (h * cfg.levels + l) * cfg.sampling_points + p;
          const Real radius = kInitialOffsetStep * static_cast<Real>(p + 1);
          ob[slot * 2] = radius * std::cos(theta);
          ob[slot * 2 + 1] = radius * std::sin(theta);
        }
    }
  }

  static constexpr Real kInitialOffsetStep = 0.02;
  static constexpr Real kInitialSpread = 1e-3;

  // query[n, d], refs[n, 2] -> [n, d]
  Tensor operator()(const Tensor& query, const Tensor& refs, const MultiScaleFeatures& feats,
                    AttentionRecord* record = nullptr) const {
    const std::size_t n = query.dim(0), H = cfg.heads, L = cfg.levels, P = cfg.sampling_points;
    if (feats.num_levels() != L) throw DimensionError("feature level count differs from attention config");
    const Tensor value = reshape(value_proj(feats.tokens), {feats.num_tokens(), H, cfg.d / H});
    const Tensor offsets = reshape(offset_proj(query), {n, H, L, P, 2});
    const Tensor weights = reshape(softmax(reshape(weight_proj(query), {n, H, L * P}), -1), {n, H, L, P});
    if (record) {
      record->n = n;
      record->heads = H;
      record->levels = L;
      record->points = P;
      record->weights = weights.data();
      record->locations.resize(offsets.numel());
      for (std::size_t i = 0; i < offsets.numel() / 2; ++i) {
        const std::size_t q = i / (H * L * P);
        record->locations[i * 2] = refs.data()[q * 2] + offsets.data()[i * 2];
        record->locations[i * 2 + 1] = refs.data()[q * 2 + 1] + offsets.data()[i * 2 + 1];
      }
    }
    return out_proj(deformable_sample(value, feats.levels, refs, offsets, weights));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    value_proj.collect(out, prefix + ".value");
    offset_proj.collect(out, prefix + ".offset");
    weight_proj.collect(out, prefix + ".weight");
    out_proj.collect(out, prefix + ".out");
  }
};

}  // namespace ftsp
