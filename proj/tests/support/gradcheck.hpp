#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "ftsp/rng.hpp"
#include "ftsp/ops.hpp"

namespace ftsp::testing {

struct GradcheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

// Compares reverse-mode gradients of a scalar loss against central differences
// with step 1e-6 * max(1, |x|). Relative error is |a - n| / max(|a|, |n|, floor).
// When max_entries > 0, that many entries per leaf are sampled instead of all.
inline GradcheckResult gradcheck(const std::function<Tensor()>& loss_fn, std::vector<Tensor> leaves,
                                 std::size_t max_entries = 0, std::uint64_t seed = 0, double floor = 1e-3) {
  for (auto& leaf : leaves) leaf.zero_grad();
  const Tensor loss = loss_fn();
  loss.backward();
  GradcheckResult result;
  Rng rng(seed);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& leaf = leaves[li];
    const std::vector<Real> analytic = leaf.has_grad() ? leaf.grad() : std::vector<Real>(leaf.numel(), 0.0);
    std::vector<std::size_t> idx(leaf.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_entries > 0 && idx.size() > max_entries) {
      std::shuffle(idx.begin(), idx.end(), rng.engine());
      idx.resize(max_entries);
    }
    for (std::size_t i : idx) {
      auto& data = leaf.mutable_data();
      const Real x = data[i];
      const Real h = 1e-6 * std::max(1.0, std::abs(x));
      data[i] = x + h;
      const Real fp = loss_fn().item();
      data[i] = x - h;
      const Real fm = loss_fn().item();
      data[i] = x;
      const Real numeric = (fp - fm) / (2 * h);
      const Real a = analytic[i];
      const Real err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++result.checked;
      if (err > result.max_rel_err) {
        result.max_rel_err = err;
        result.worst = "leaf " + std::to_string(li) + " entry " + std::to_string(i) + ": analytic " +
                       std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return result;
}

inline Tensor random_tensor(Shape shape, Rng& rng, Real lo = -1.0, Real hi = 1.0, bool requires_grad = true) {
  std::vector<Real> v(numel_of(shape));
  for (Real& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// Fixed random projection so that gradchecks see a generic upstream gradient.
inline Tensor weighted_sum(const Tensor& t, std::uint64_t seed) {
  Rng rng(seed ^ 0xA5A5A5A5ULL);
  std::vector<Real> w(t.numel());
  for (Real& x : w) x = rng.uniform(-1.0, 1.0);
  return sum(mul(t, Tensor::from_data(t.shape(), std::move(w))));
}

}  // namespace ftsp::testing
