#pragma once

// SGD and Adam with an explicit switch for gradient accumulation (GA).
//
// With ga_enabled == false the momentum of SGD and both moment decays of Adam
// are forced to zero, so every step depends only on the current gradient.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ipcs/errors.hpp"
#include "ipcs/tensor.hpp"

namespace ipcs {

enum class OptimizerKind { SGD, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::SGD;
  float learning_rate = 1e-3f;
  float momentum = 0.9f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float weight_decay = 0.0f;
  float epsilon = 1e-8f;
  bool ga_enabled = true;

  float effective_momentum() const { return ga_enabled ? momentum : 0.0f; }
  float effective_beta1() const { return ga_enabled ? beta1 : 0.0f; }
  float effective_beta2() const { return ga_enabled ? beta2 : 0.0f; }

  static OptimizerConfig sgd(float lr, float momentum = 0.9f, float weight_decay = 0.0f) {
    OptimizerConfig c;
    c.kind = OptimizerKind::SGD;
    c.learning_rate = lr;
    c.momentum = momentum;
    c.weight_decay = weight_decay;
    return c;
  }
  static OptimizerConfig adam(float lr, float beta1 = 0.9f, float beta2 = 0.999f, float weight_decay = 0.0f) {
    OptimizerConfig c;
    c.kind = OptimizerKind::Adam;
    c.learning_rate = lr;
    c.beta1 = beta1;
    c.beta2 = beta2;
    c.weight_decay = weight_decay;
    return c;
  }
};

inline void validate(const OptimizerConfig& c) {
  if (!(c.learning_rate > 0.0f)) throw ContractError("optimizer: learning rate must be positive");
  if (c.momentum < 0.0f || c.momentum >= 1.0f) throw ContractError("optimizer: momentum must lie in [0,1)");
  if (c.beta1 < 0.0f || c.beta1 >= 1.0f || c.beta2 < 0.0f || c.beta2 >= 1.0f)
    throw ContractError("optimizer: betas must lie in [0,1)");
  if (c.weight_decay < 0.0f) throw ContractError("optimizer: weight decay must be non-negative");
  if (!(c.epsilon > 0.0f)) throw ContractError("optimizer: epsilon must be positive");
}

struct OptimizerState {
  std::vector<std::vector<float>> first;   // SGD velocity or Adam first moment
  std::vector<std::vector<float>> second;  // Adam second moment
  std::int64_t steps = 0;
};

inline void reset_state(OptimizerState& state) {
  for (auto& b : state.first) std::fill(b.begin(), b.end(), 0.0f);
  for (auto& b : state.second) std::fill(b.begin(), b.end(), 0.0f);
  state.steps = 0;
}

namespace detail {

inline void ensure_buffers(std::vector<std::vector<float>>& buffers, std::span<const Var> params) {
  if (buffers.size() != params.size()) buffers.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    if (buffers[i].size() != params[i]->value.numel()) buffers[i].assign(params[i]->value.numel(), 0.0f);
}

}  // namespace detail

/// Applies one update to every parameter from its gradient buffer. A parameter
/// without a gradient buffer is treated as having a zero gradient.
inline void step(std::span<const Var> params, const OptimizerConfig& config, OptimizerState& state) {
  validate(config);
  for (const auto& p : params) {
    for (const float g : p->grad)
      if (!std::isfinite(g)) throw NumericError("optimizer: non-finite gradient in " + p->name);
  }
  detail::ensure_buffers(state.first, params);
  if (config.kind == OptimizerKind::Adam) detail::ensure_buffers(state.second, params);
  ++state.steps;

  const double lr = config.learning_rate;
  const double wd = config.weight_decay;
  if (config.kind == OptimizerKind::SGD) {
    const double m = config.effective_momentum();
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto w = params[k]->value.values();
      const auto& g = params[k]->grad;
      auto& v = state.first[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = (g.empty() ? 0.0 : g[i]) + wd * w[i];
        v[i] = static_cast<float>(m * v[i] + gi);
        w[i] = static_cast<float>(w[i] - lr * v[i]);
      }
    }
    return;
  }

  const double b1 = config.effective_beta1();
  const double b2 = config.effective_beta2();
  const double t = static_cast<double>(state.steps);
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k]->value.values();
    const auto& g = params[k]->grad;
    auto& m1 = state.first[k];
    auto& m2 = state.second[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = (g.empty() ? 0.0 : g[i]) + wd * w[i];
      m1[i] = static_cast<float>(b1 * m1[i] + (1.0 - b1) * gi);
      m2[i] = static_cast<float>(b2 * m2[i] + (1.0 - b2) * gi * gi);
      const double mhat = m1[i] / c1;
      const double vhat = m2[i] / c2;
      w[i] = static_cast<float>(w[i] - lr * mhat / (std::sqrt(vhat) + config.epsilon));
    }
  }
}

inline void zero_grad(std::span<const Var> params) {
  for (const auto& p : params) p->zero_grad();
}

}  // namespace ipcs
