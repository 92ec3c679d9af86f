#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "latent_loop/autograd.hpp"
#include "latent_loop/errors.hpp"
#include "latent_loop/tensor.hpp"

namespace latent_loop {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// A named trainable tensor owned elsewhere.
struct ParamSlot {
  std::string name;
  Tensor* value = nullptr;
};

/// First/second moments per parameter, keyed by slot order.
struct OptimizerState {
  std::vector<std::string> names;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::uint64_t step = 0;
};

/// Decoupled weight decay Adam: p <- p(1 - lr wd) - lr mhat / (sqrt(vhat) + eps).
inline void adamw_step(const std::vector<ParamSlot>& params, const GradientMap& grads, OptimizerState& state,
                       const AdamWConfig& cfg) {
  if (state.names.empty()) {
    for (const auto& p : params) {
      state.names.push_back(p.name);
      state.first_moment.emplace_back(p.value->shape());
      state.second_moment.emplace_back(p.value->shape());
    }
  }
  if (state.names.size() != params.size()) throw ContractError("optimizer state tracks a different parameter set");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].value;
    if (state.names[i] != params[i].name) throw ContractError("optimizer slot order changed at " + params[i].name);
    const Tensor* g = grads.find(params[i].name);
    if (!g) throw ContractError("no gradient for parameter " + params[i].name);
    if (g->shape() != p.shape() || state.first_moment[i].shape() != p.shape()) {
      throw ContractError("adamw shape mismatch for " + params[i].name + ": " + shape_string(p.shape()) + " vs " +
                          shape_string(g->shape()));
    }
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = (*g)[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] *= 1.0 - cfg.lr * cfg.weight_decay;
      p[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace latent_loop
