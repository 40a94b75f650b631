#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dpf/errors.hpp"
#include "dpf/nn.hpp"

namespace dpf {

/// Adam optimizer state. Moments are kept per parameter name so the state
/// survives checkpointing and partial (per-model) updates.
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1000.0;  // global gradient-norm clip; large enough to be off in practice
  std::int64_t t = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments;  // name -> (m, v)
};

inline double global_grad_norm(const std::vector<std::pair<std::string, ad::Var>>& params) {
  double sq = 0;
  for (const auto& [name, p] : params) {
    p.node()->ensure_grad();
    for (double g : p.node()->grad.data) sq += g * g;
  }
  return std::sqrt(sq);
}

/// One Adam update with bias correction over the given parameters.
inline void adam_step(const std::vector<std::pair<std::string, ad::Var>>& params,
                      AdamState& state) {
  for (const auto& [name, p] : params) {
    p.node()->ensure_grad();
    if (!p.node()->grad.all_finite()) {
      throw NumericError("non-finite gradient for parameter " + name);
    }
  }
  double norm = global_grad_norm(params);
  double clip = norm > state.clip_norm ? state.clip_norm / norm : 1.0;
  state.t += 1;
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (const auto& [name, p] : params) {
    Tensor& value = p.node()->value;
    const Tensor& grad = p.node()->grad;
    auto it = state.moments.find(name);
    if (it == state.moments.end()) {
      it = state.moments
               .emplace(name, std::make_pair(Tensor::zeros(value.shape),
                                             Tensor::zeros(value.shape)))
               .first;
    }
    Tensor& m = it->second.first;
    Tensor& v = it->second.second;
    for (std::size_t i = 0; i < value.numel(); ++i) {
      double g = grad.data[i] * clip;
      m.data[i] = state.beta1 * m.data[i] + (1.0 - state.beta1) * g;
      v.data[i] = state.beta2 * v.data[i] + (1.0 - state.beta2) * g * g;
      double m_hat = m.data[i] / bc1;
      double v_hat = v.data[i] / bc2;
      value.data[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

}  // namespace dpf
