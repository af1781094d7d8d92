#pragma once

#include <cmath>
#include <string>

#include "tgcnn/autodiff.hpp"
#include "tgcnn/error.hpp"

namespace tgcnn::ad {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  ParameterMap first_moment;
  ParameterMap second_moment;
  long step = 0;
};

/// One bias-corrected Adam update of every parameter that has a gradient in `grads`.
inline void adam_step(ParameterMap& params, const ParameterMap& grads, OptimizerState& state, const AdamOptions& opt = {}) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw InternalError("adam_step: gradient for unknown parameter '" + name + "'");
    Array& p = it->second;
    if (p.shape != g.shape) throw InternalError("adam_step: shape mismatch for '" + name + "'");
    auto& m = state.first_moment.try_emplace(name, p.shape, 0.0).first->second;
    auto& v = state.second_moment.try_emplace(name, p.shape, 0.0).first->second;
    if (m.shape != p.shape || v.shape != p.shape) throw InternalError("adam_step: accumulator shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
  }
}

}  // namespace tgcnn::ad
