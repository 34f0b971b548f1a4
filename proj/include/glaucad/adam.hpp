#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "glaucad/error.hpp"
#include "glaucad/model.hpp"
#include "glaucad/tensor.hpp"

namespace glaucad {

// Learning rate defaults to 1e-4; betas and epsilon are the usual ADAM values.
struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("adam: learning_rate must be > 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
      throw ConfigError("adam: betas must lie in [0, 1)");
    if (!(epsilon > 0)) throw ConfigError("adam: epsilon must be > 0");
  }
};

template <class T>
struct AdamState {
  std::map<std::string, std::vector<T>> m;  // first moment per parameter
  std::map<std::string, std::vector<T>> v;  // second moment per parameter
  std::uint64_t step = 0;
};

// One bias-corrected ADAM update of a flat parameter with moment buffers.
// `t` is the 1-based step number.
template <class T>
void adam_update(std::span<T> theta, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 std::uint64_t t, const AdamConfig& cfg) {
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const T g = grad[i];
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    const T mhat = m[i] / T(c1);
    const T vhat = v[i] / T(c2);
    theta[i] -= T(cfg.learning_rate) * mhat / (std::sqrt(vhat) + T(cfg.epsilon));
  }
}

// Applies one ADAM step to every parameter using its accumulated gradient
// (parameters without a gradient see zero). Non-finite gradients abort the
// step before anything is modified.
template <class T>
void adam_step(ModelWeights<T>& params, AdamState<T>& state, const AdamConfig& cfg) {
  cfg.validate();
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) {
      if (!std::isfinite(g)) throw NumericError("adam: non-finite gradient for " + name + "; step aborted");
    }
  }
  ++state.step;
  for (auto& [name, p] : params) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != p.numel()) {
      m.assign(p.numel(), T(0));
      v.assign(p.numel(), T(0));
    }
    if (p.has_grad()) {
      adam_update<T>(p.data(), p.grad(), m, v, state.step, cfg);
    } else {
      const std::vector<T> zeros(p.numel(), T(0));
      adam_update<T>(p.data(), zeros, m, v, state.step, cfg);
    }
  }
}

}  // namespace glaucad
