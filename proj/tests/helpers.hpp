#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dpf/autodiff.hpp"
#include "dpf/nn.hpp"

namespace dpf::test {

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

/// Central finite-difference gradient of `eval` with respect to every entry
/// of `param`, compared elementwise against the analytic gradient already
/// accumulated in param's grad. Returns the worst relative error.
inline double max_fd_rel_err(const ad::Var& param, const std::function<double()>& eval,
                             double step = 1e-5) {
  double worst = 0;
  Tensor& value = param.node()->value;
  param.node()->ensure_grad();
  const Tensor& grad = param.node()->grad;
  for (std::size_t i = 0; i < value.numel(); ++i) {
    double saved = value.data[i];
    value.data[i] = saved + step;
    double up = eval();
    value.data[i] = saved - step;
    double down = eval();
    value.data[i] = saved;
    double fd = (up - down) / (2 * step);
    worst = std::max(worst, rel_err(fd, grad.data[i]));
  }
  return worst;
}

}  // namespace dpf::test
