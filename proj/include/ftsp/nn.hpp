#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ftsp/ops.hpp"
#include "ftsp/rng.hpp"

namespace ftsp {

// Flat registry of trainable tensors and persistent buffers, keyed by dotted names.
class ParamList {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
  };
  struct Buffer {
    std::string name;
    std::vector<Real>* values;
  };

  void add(const std::string& name, const Tensor& t) { params_.push_back({name, t}); }
  void add_buffer(const std::string& name, std::vector<Real>* values) {
    buffers_.push_back({name, values});
  }

  const std::vector<Entry>& params() const { return params_; }
  const std::vector<Buffer>& buffers() const { return buffers_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : params_) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : params_) e.tensor.zero_grad();
  }

 private:
  std::vector<Entry> params_;
  std::vector<Buffer> buffers_;
};

inline Tensor make_param(Shape shape, std::vector<Real> values) {
  return Tensor::from_data(std::move(shape), std::move(values), true);
}

inline Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng, Real gain = 1.0) {
  const Real bound = gain * std::sqrt(6.0 / static_cast<Real>(fan_in + fan_out));
  std::vector<Real> v(fan_in * fan_out);
  for (Real& x : v) x = rng.uniform(-bound, bound);
  return make_param({fan_in, fan_out}, std::move(v));
}

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true)
      : weight(xavier_uniform(in, out, rng)) {
    if (with_bias) bias = make_param({out}, std::vector<Real>(out, 0.0));
  }

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.add(prefix + ".weight", weight);
    if (bias.defined()) out.add(prefix + ".bias", bias);
  }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;
  Real eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d)
      : gain(make_param({d}, std::vector<Real>(d, 1.0))), bias(make_param({d}, std::vector<Real>(d, 0.0))) {}

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.add(prefix + ".gain", gain);
    out.add(prefix + ".bias", bias);
  }
};

struct BatchNorm1d {
  Tensor gain;
  Tensor bias;
  BatchNormState state;
  Real eps = 1e-5;

  BatchNorm1d() = default;
  explicit BatchNorm1d(std::size_t d)
      : gain(make_param({d}, std::vector<Real>(d, 1.0))),
        bias(make_param({d}, std::vector<Real>(d, 0.0))),
        state(d) {}

  Tensor operator()(const Tensor& x, NormMode mode) { return batch_norm(x, state, mode, gain, bias, eps); }

  void collect(ParamList& out, const std::string& prefix) {
    out.add(prefix + ".gain", gain);
    out.add(prefix + ".bias", bias);
    out.add_buffer(prefix + ".running_mean", &state.running_mean);
    out.add_buffer(prefix + ".running_var", &state.running_var);
  }
};

// Two affine layers with a ReLU between them.
struct Mlp {
  Linear fc1;
  Linear fc2;

  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) : fc1(in, hidden, rng), fc2(hidden, out, rng) {}

  Tensor operator()(const Tensor& x) const { return fc2(relu(fc1(x))); }

  void collect(ParamList& out, const std::string& prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }
};

}  // namespace ftsp
