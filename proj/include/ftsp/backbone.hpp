#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "ftsp/attention.hpp"

namespace ftsp {

enum class BackboneKind { kSwin, kConv };

struct BackboneConfig {
  BackboneKind kind = BackboneKind::kSwin;
  std::size_t patch = 4;
  std::size_t window = 4;
  std::vector<std::size_t> dims{32, 64};
  std::vector<std::size_t> depths{2, 2};
  std::vector<std::size_t> heads{2, 4};
  std::size_t mlp_ratio = 2;

  std::size_t stages() const { return dims.size(); }

  void validate() const {
    if (patch == 0 || window == 0) throw ContractError("patch and window must be positive");
    if (dims.empty() || depths.size() != dims.size() || heads.size() != dims.size()) {
      throw ContractError("backbone stage lists must have equal, nonzero length");
    }
    for (std::size_t s = 0; s < dims.size(); ++s) {
      if (heads[s] == 0 || dims[s] % heads[s] != 0) throw ContractError("stage dim not divisible by heads");
    }
  }

  // Image side lengths must be a multiple of this.
  std::size_t stride() const { return patch << (stages() - 1); }
};

namespace detail {

// [H, W, C] -> [H/k, W/k, k*k*C], each cell holding its k x k block row-major.
inline Tensor space_to_depth(const Tensor& x, std::size_t k) {
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  const Tensor t = permute(reshape(x, {H / k, k, W / k, k, C}), {0, 2, 1, 3, 4});
  return reshape(t, {H / k, W / k, k * k * C});
}

inline Tensor pad_grid(const Tensor& x, std::size_t H, std::size_t W) {
  Tensor out = x;
  const std::size_t C = x.dim(2);
  if (H > x.dim(0)) out = concat({out, Tensor::zeros({H - x.dim(0), x.dim(1), C})}, 0);
  if (W > x.dim(1)) out = concat({out, Tensor::zeros({H, W - x.dim(1), C})}, 1);
  return out;
}

}  // namespace detail

// Window attention block; odd blocks shift the window grid by half a window.
struct SwinBlock {
  std::size_t dim = 0, heads = 1, window = 1;
  bool shifted = false;
  LayerNorm norm1, norm2;
  MultiHeadAttention attn;
  Mlp mlp;
  Tensor rel_bias;  // [(2w-1)^2, heads]

  SwinBlock() = default;
  SwinBlock(std::size_t d, std::size_t h, std::size_t win, bool shift, std::size_t mlp_ratio, Rng& rng)
      : dim(d), heads(h), window(win), shifted(shift), norm1(d), norm2(d), attn(d, h, rng),
        mlp(d, d * mlp_ratio, d, rng) {
    const std::size_t span = 2 * win - 1;
    std::vector<Real> b(span * span * h);
    for (Real& v : b) v = rng.normal(0.0, 0.02);
    rel_bias = make_param({span * span, h}, std::move(b));
  }

  // x: [H, W, C]
  Tensor operator()(const Tensor& x) const {
    const std::size_t H = x.dim(0), W = x.dim(1);
    const std::size_t ws = std::min({window, H, W});
    const std::size_t Hp = (H + ws - 1) / ws * ws, Wp = (W + ws - 1) / ws * ws;
    const bool shift = shifted && (Hp > ws || Wp > ws);
    const auto s = static_cast<std::ptrdiff_t>(ws / 2);

    Tensor h = detail::pad_grid(norm1(x), Hp, Wp);
    if (shift) h = roll(roll(h, 0, -s), 1, -s);
    const std::size_t nh = Hp / ws, nw = Wp / ws, n = ws * ws, nwin = nh * nw;
    const Tensor windows =
        reshape(permute(reshape(h, {nh, ws, nw, ws, dim}), {0, 2, 1, 3, 4}), {nwin, n, dim});
    const Tensor out = attn(windows, windows, windows, attention_bias(ws, nh, nw, Hp, Wp, shift));
    Tensor merged = reshape(permute(reshape(out, {nh, nw, ws, ws, dim}), {0, 2, 1, 3, 4}), {Hp, Wp, dim});
    if (shift) merged = roll(roll(merged, 0, s), 1, s);
    if (Hp != H) merged = slice(merged, 0, 0, H);
    if (Wp != W) merged = slice(merged, 1, 0, W);
    const Tensor y = add(x, merged);
    return add(y, mlp(norm2(y)));
  }

  // Relative position bias [heads, n, n], plus -100 between different shifted regions.
  Tensor attention_bias(std::size_t ws, std::size_t nh, std::size_t nw, std::size_t Hp, std::size_t Wp,
                        bool shift) const {
    const std::size_t n = ws * ws, span = 2 * window - 1;
    std::vector<std::size_t> idx(n * n);
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t dy = a / ws + window - 1 - b / ws;
        const std::size_t dx = a % ws + window - 1 - b % ws;
        idx[a * n + b] = dy * span + dx;
      }
    const Tensor bias = permute(reshape(index_select(rel_bias, idx), {n, n, heads}), {2, 0, 1});
    if (!shift) return bias;

    const std::size_t s = ws / 2;
    auto region = [&](std::size_t i, std::size_t extent) { return i < extent - ws ? 0 : (i < extent - s ? 1 : 2); };
    const std::size_t nwin = nh * nw;
    std::vector<Real> mask(nwin * heads * n * n, 0.0);
    for (std::size_t wi = 0; wi < nwin; ++wi) {
      std::vector<int> label(n);
      for (std::size_t p = 0; p < n; ++p) {
        const std::size_t r = (wi / nw) * ws + p / ws, c = (wi % nw) * ws + p % ws;
        label[p] = region(r, Hp) * 3 + region(c, Wp);
      }
      for (std::size_t hh = 0; hh < heads; ++hh)
        for (std::size_t a = 0; a < n; ++a)
          for (std::size_t b = 0; b < n; ++b)
            if (label[a] != label[b]) mask[((wi * heads + hh) * n + a) * n + b] = -100.0;
    }
    return add(Tensor::from_data({nwin, heads, n, n}, std::move(mask)), bias);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    norm1.collect(out, prefix + ".norm1");
    norm2.collect(out, prefix + ".norm2");
    attn.collect(out, prefix + ".attn");
    mlp.collect(out, prefix + ".mlp");
    out.add(prefix + ".rel_bias", rel_bias);
  }
};

// Hierarchical feature extractor projecting every stage output to the model width.
struct Backbone {
  BackboneConfig cfg;
  std::size_t d = 0;
  Linear patch_embed;
  LayerNorm patch_norm;
  std::vector<std::vector<SwinBlock>> stages;
  std::vector<Linear> merges;  // merges[s] maps stage s to stage s+1
  std::vector<LayerNorm> merge_norms;
  std::vector<Linear> level_proj;
  std::vector<LayerNorm> level_norm;

  Backbone() = default;
  Backbone(const BackboneConfig& config, std::size_t model_dim, Rng& rng) : cfg(config), d(model_dim) {
    cfg.validate();
    patch_embed = Linear(cfg.patch * cfg.patch * 3, cfg.dims[0], rng);
    patch_norm = LayerNorm(cfg.dims[0]);
    for (std::size_t s = 0; s < cfg.stages(); ++s) {
      std::vector<SwinBlock> blocks;
      if (cfg.kind == BackboneKind::kSwin) {
        for (std::size_t b = 0; b < cfg.depths[s]; ++b)
          blocks.emplace_back(cfg.dims[s], cfg.heads[s], cfg.window, b % 2 == 1, cfg.mlp_ratio, rng);
      }
      stages.push_back(std::move(blocks));
      if (s + 1 < cfg.stages()) {
        merge_norms.emplace_back(4 * cfg.dims[s]);
        merges.emplace_back(4 * cfg.dims[s], cfg.dims[s + 1], rng);
      }
      level_proj.emplace_back(cfg.dims[s], d, rng);
      level_norm.emplace_back(d);
    }
  }

  std::size_t levels() const { return cfg.stages(); }

  // image: [H, W, 3] with values in [0, 1].
  MultiScaleFeatures operator()(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("image must be [H, W, 3]");
    const std::size_t stride = cfg.stride();
    if (image.dim(0) % stride != 0 || image.dim(1) % stride != 0) {
      throw ContractError("image " + shape_str(image.shape()) + " is not divisible by " + std::to_string(stride));
    }
    const bool conv = cfg.kind == BackboneKind::kConv;
    Tensor x = patch_embed(detail::space_to_depth(add_scalar(image, -0.5), cfg.patch));
    x = conv ? relu(x) : patch_norm(x);
    std::vector<Tensor> grids;
    for (std::size_t s = 0; s < cfg.stages(); ++s) {
      if (s > 0) {
        x = merges[s - 1](merge_norms[s - 1](detail::space_to_depth(x, 2)));
        if (conv) x = relu(x);
      }
      for (const auto& block : stages[s]) x = block(x);
      grids.push_back(level_norm[s](level_proj[s](x)));
    }
    return MultiScaleFeatures::from_levels(grids);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    patch_embed.collect(out, prefix + ".patch_embed");
    if (cfg.kind == BackboneKind::kSwin) patch_norm.collect(out, prefix + ".patch_norm");
    for (std::size_t s = 0; s < stages.size(); ++s) {
      const std::string p = prefix + ".stage" + std::to_string(s);
      for (std::size_t b = 0; b < stages[s].size(); ++b) stages[s][b].collect(out, p + ".block" + std::to_string(b));
      if (s < merges.size()) {
        merge_norms[s].collect(out, p + ".merge_norm");
        merges[s].collect(out, p + ".merge");
      }
      level_proj[s].collect(out, p + ".proj");
      level_norm[s].collect(out, p + ".proj_norm");
    }
  }
};

}  // namespace ftsp
