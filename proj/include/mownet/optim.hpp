#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mownet/errors.hpp"
#include "mownet/param_set.hpp"

namespace mownet {

namespace detail {
inline void require_matching(const ParamSet& params, const GradMap& grads, const char* where) {
  if (!params.same_keys(grads)) throw ContractError(std::string(where) + ": gradient keys do not match parameters");
}
}  // namespace detail

// p - lr * g for every entry. The input is never modified. With
// `differentiable` the subtraction is recorded, so the result stays attached
// to whatever the gradients depend on.
inline ParamSet sgd_step(const ParamSet& params, const GradMap& grads, double lr, bool differentiable = false) {
  detail::require_matching(params, grads, "sgd_step");
  ParamSet out;
  auto g = grads.begin();
  for (const auto& [name, p] : params) {
    const Tensor& gt = (g++)->second;
    if (differentiable) {
      GradModeGuard on(true);
      out.insert(name, sub(p, scale(gt, lr)));
      continue;
    }
    std::vector<double> v(p.data().begin(), p.data().end());
    auto gd = gt.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * gd[i];
    out.insert(name, Tensor::parameter(p.rows(), p.cols(), std::move(v)));
  }
  return out;
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct AdamState {
  long step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

// Adam with decoupled weight decay. Moments and the step counter in `state`
// are advanced in place; `params` is left untouched.
inline ParamSet adam_step(const ParamSet& params, const GradMap& grads, AdamState& state, double lr,
                          const AdamConfig& cfg) {
  detail::require_matching(params, grads, "adam_step");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  ParamSet out;
  auto g = grads.begin();
  for (const auto& [name, p] : params) {
    auto gd = (g++)->second.data();
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    std::vector<double> w(p.data().begin(), p.data().end());
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gd[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      w[i] -= lr * cfg.weight_decay * w[i];
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
    out.insert(name, Tensor::parameter(p.rows(), p.cols(), std::move(w)));
  }
  return out;
}

}  // namespace mownet
