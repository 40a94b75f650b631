#pragma once

#include <cmath>
#include <vector>

#include "dpf/tensor.hpp"

namespace dpf {

/// Robot pose: position in maze cell units, heading in (-pi, pi].
struct State {
  double x = 0, y = 0, theta = 0;
};

/// Relative motion per step, expressed in the local frame of the previous
/// pose: forward/left translation and heading change.
struct Action {
  double dx = 0, dy = 0, dth = 0;
};

/// K ray-cast depths in cell units.
using Observation = std::vector<double>;

/// Local-to-global pose composition (the known dynamics model g).
inline State compose(const State& s, const Action& a) {
  double c = std::cos(s.theta), sn = std::sin(s.theta);
  return State{s.x + a.dx * c - a.dy * sn, s.y + a.dx * sn + a.dy * c,
               wrap_angle(s.theta + a.dth)};
}

/// Inverse of compose: the local-frame delta that takes `from` to `to`.
inline Action local_delta(const State& from, const State& to) {
  double c = std::cos(from.theta), sn = std::sin(from.theta);
  double gx = to.x - from.x, gy = to.y - from.y;
  return Action{c * gx + sn * gy, -sn * gx + c * gy, wrap_angle(to.theta - from.theta)};
}

}  // namespace dpf
