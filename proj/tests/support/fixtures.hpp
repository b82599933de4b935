#pragma once

#include "ftsp/model.hpp"

namespace ftsp::testing {

// Smallest configuration that still exercises every module.
inline ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.heads = 2;
  cfg.K = 2;
  cfg.M = 4;
  cfg.A = 3;
  cfg.alphabet = 3;
  cfg.ffn = 16;
  cfg.image_size = 16;
  cfg.sampling_points = 2;
  cfg.backbone.dims = {8, 8};
  cfg.backbone.heads = {2, 2};
  cfg.backbone.window = 2;
  return cfg;
}

inline Tensor random_image(std::size_t size, Rng& rng) {
  std::vector<Real> img(size * size * 3);
  for (Real& v : img) v = rng.uniform();
  return Tensor::from_data({size, size, 3}, img);
}

}  // namespace ftsp::testing
