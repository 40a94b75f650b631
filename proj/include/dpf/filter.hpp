#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpf/autodiff.hpp"
#include "dpf/env.hpp"
#include "dpf/errors.hpp"
#include "dpf/models.hpp"
#include "dpf/rng.hpp"
#include "dpf/state.hpp"

namespace dpf {

/// Weighted particle set. Weights sum to one after every update. During
/// training, resampled particle states are detached constants while proposed
/// particles keep their gradient path into the proposer and encoder.
struct ParticleBelief {
  ad::Var particles;  // (n x 3)
  ad::Var weights;    // (n x 1)
  int t = 0;

  std::size_t size() const { return particles.rows(); }
};

struct FilterConfig {
  std::size_t n_particles = 100;  // 100 for training, 1000 for testing
  double gamma = 0.7;             // proposed-particle ratio decays as gamma^(t-1)
};

/// Number of proposed particles at step t: round(n * gamma^(t-1)), half up.
inline std::size_t proposal_count(int t, std::size_t n, double gamma) {
  if (t < 1) throw UsageError("proposal_count: t must be >= 1");
  if (!(gamma > 0.0) || gamma > 1.0) throw UsageError("proposal_count: gamma must be in (0,1]");
  double m = std::floor(static_cast<double>(n) * std::pow(gamma, t - 1) + 0.5);
  return static_cast<std::size_t>(std::min(m, static_cast<double>(n)));
}

/// Stochastic universal sampling with an explicit offset u in [0, 1/count):
/// equally spaced pointers over the cumulative weights. Every copy count lies
/// in {floor(count*w), ceil(count*w)}.
inline std::vector<std::size_t> resample_sus_with_offset(const Tensor& weights,
                                                         std::size_t count, double u) {
  if (count < 1) throw UsageError("resample_sus: count must be >= 1");
  double total = 0;
  for (double w : weights.data) total += w;
  if (std::abs(total - 1.0) > 1e-6) {
    throw UsageError("resample_sus: weights are not normalized");
  }
  std::vector<std::size_t> idx;
  idx.reserve(count);
  double step = 1.0 / static_cast<double>(count);
  double pointer = u;
  double cum = weights.data[0] / total;
  std::size_t i = 0;
  for (std::size_t j = 0; j < count; ++j) {
    // Half-open bins: a pointer exactly on a cumulative boundary selects the
    // next particle.
    while (pointer >= cum && i + 1 < weights.numel()) {
      ++i;
      cum += weights.data[i] / total;
    }
    idx.push_back(i);
    pointer += step;
  }
  return idx;
}

inline std::vector<std::size_t> resample_sus(const Tensor& weights, std::size_t count,
                                             RngStream& rng) {
  double u = rng.uniform() / static_cast<double>(count);
  return resample_sus_with_offset(weights, count, u);
}

inline Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
  std::size_t m = t.cols();
  Tensor out = Tensor::zeros({idx.size(), m});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] = t.data[idx[i] * m + j];
  return out;
}

/// Initial belief: all n particles proposed from the first observation, with
/// uniform weights 1/n.
inline ParticleBelief filter_init(const ModelParams& models, const Observation& o1,
                                  const FilterConfig& cfg, RngStream& rng) {
  std::size_t n = cfg.n_particles;
  if (n < 1) throw UsageError("filter_init: n_particles must be >= 1");
  ad::Var e = encoder(models, o1);
  ParticleBelief bel;
  bel.particles = proposer(models, e, n, rng);
  bel.weights = ad::constant(Tensor::full({n, 1}, 1.0 / static_cast<double>(n)));
  bel.t = 1;
  return bel;
}

/// Prediction: every particle moved by the dynamics applied to a sampled
/// noisy action. Weights unchanged.
inline ParticleBelief predict(const ModelParams& models, const ParticleBelief& bel,
                              const Action& a, RngStream& rng) {
  ad::Var noisy = action_sampler(models, a, bel.size(), rng);
  ParticleBelief out = bel;
  out.particles = move_particles(models, bel.particles, noisy);
  return out;
}

/// Measurement update against a precomputed encoding: weights set to the
/// observation likelihood and normalized to sum 1.
inline ParticleBelief measurement_update_enc(const ModelParams& models,
                                             const ParticleBelief& bel, const ad::Var& e) {
  ad::Var w_raw = likelihood(models, e, bel.particles);
  ad::Var total = ad::sum_all(w_raw);
  ParticleBelief out = bel;
  out.weights = ad::div(w_raw, total);
  return out;
}

inline ParticleBelief measurement_update(const ModelParams& models, const ParticleBelief& bel,
                                         const Observation& o) {
  return measurement_update_enc(models, bel, encoder(models, o));
}

/// One full filter step for t >= 2: resample the previous belief (detaching
/// the copied states), predict with the action, mix in proposed particles per
/// the gamma schedule, then reweight with the observation.
inline ParticleBelief filter_step(const ModelParams& models, const ParticleBelief& bel,
                                  const Action& a, const Observation& o,
                                  const FilterConfig& cfg, RngStream& rng) {
  std::size_t n = bel.size();
  int t_next = bel.t + 1;
  std::size_t m = proposal_count(t_next, n, cfg.gamma);
  std::size_t keep = n - m;
  ad::Var e = encoder(models, o);
  std::vector<ad::Var> parts;
  if (keep > 0) {
    std::vector<std::size_t> idx = resample_sus(bel.weights.value(), keep, rng);
    // Resampling is not differentiable: the copied states enter as constants.
    ad::Var resampled = ad::constant(gather_rows(bel.particles.value(), idx));
    ad::Var noisy = action_sampler(models, a, keep, rng);
    parts.push_back(move_particles(models, resampled, noisy));
  }
  if (m > 0) {
    parts.push_back(proposer(models, e, m, rng));
  }
  ParticleBelief next;
  next.particles = parts.size() == 1 ? parts[0] : ad::concat_rows(parts);
  next.weights = bel.weights;  // replaced below
  next.t = t_next;
  return measurement_update_enc(models, next, e);
}

/// Weighted particle mean; the heading uses the circular mean.
inline State estimate(const ParticleBelief& bel) {
  const Tensor& P = bel.particles.value();
  const Tensor& W = bel.weights.value();
  double x = 0, y = 0, sc = 0, ss = 0;
  for (std::size_t i = 0; i < P.rows(); ++i) {
    double w = W.data[i];
    x += w * P.at(i, 0);
    y += w * P.at(i, 1);
    ss += w * std::sin(P.at(i, 2));
    sc += w * std::cos(P.at(i, 2));
  }
  return State{x, y, std::atan2(ss, sc)};
}

/// One per-step record of the optional belief dump (JSON line, same container
/// style as the dataset format).
inline nlohmann::json belief_record(const ParticleBelief& bel) {
  const Tensor& P = bel.particles.value();
  const Tensor& W = bel.weights.value();
  State est = estimate(bel);
  nlohmann::json particles = nlohmann::json::array();
  nlohmann::json weights = nlohmann::json::array();
  for (std::size_t i = 0; i < P.rows(); ++i) {
    particles.push_back(
        {round_sig9(P.at(i, 0)), round_sig9(P.at(i, 1)), round_sig9(P.at(i, 2))});
    weights.push_back(round_sig9(W.data[i]));
  }
  return {{"t", bel.t},
          {"estimate", {round_sig9(est.x), round_sig9(est.y), round_sig9(est.theta)}},
          {"particles", particles},
          {"weights", weights}};
}

}  // namespace dpf
