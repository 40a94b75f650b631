#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "dpf/autodiff.hpp"
#include "dpf/env.hpp"
#include "dpf/errors.hpp"
#include "dpf/filter.hpp"
#include "dpf/models.hpp"
#include "dpf/state.hpp"

namespace dpf {

/// Per-dimension average absolute step size of the true states; the common
/// yardstick for density estimation and the error-rate metric. Computed once
/// per training set and frozen (it ships inside the checkpoint).
using StateScale = std::array<double, 3>;

inline constexpr double kScaleFloor = 1e-6;

inline StateScale compute_scale(const std::vector<Episode>& dataset) {
  StateScale sum = {0, 0, 0};
  std::size_t count = 0;
  for (const Episode& ep : dataset) {
    for (std::size_t t = 1; t < ep.states.size(); ++t) {
      const State& a = ep.states[t - 1];
      const State& b = ep.states[t];
      sum[0] += std::abs(b.x - a.x);
      sum[1] += std::abs(b.y - a.y);
      sum[2] += std::abs(wrap_angle(b.theta - a.theta));
      ++count;
    }
  }
  if (count == 0) throw DataError("compute_scale: dataset has no transitions");
  StateScale scale;
  bool all_zero = true;
  for (int d = 0; d < 3; ++d) {
    scale[d] = sum[d] / static_cast<double>(count);
    if (scale[d] > 0) all_zero = false;
    scale[d] = std::max(scale[d], kScaleFloor);
  }
  if (all_zero) throw DataError("compute_scale: degenerate scale (constant trajectory)");
  return scale;
}

/// log of the Gaussian-mixture belief density at the true state: each
/// particle is a Gaussian with the given bandwidth in scaled state space,
/// mixture-weighted by the particle weights. Differentiable in particle
/// states and weights. Heading differences are wrapped before scaling.
inline ad::Var mixture_log_density(const ad::Var& particles, const ad::Var& weights,
                                   const State& target, const StateScale& scale,
                                   double bandwidth = 1.0) {
  if (!(bandwidth > 0)) throw UsageError("mixture_log_density: bandwidth must be positive");
  std::size_t n = particles.rows();
  ad::Var delta =
      ad::sub(particles, ad::constant(Tensor::row({target.x, target.y, target.theta})));
  ad::Var dxy = ad::slice_cols(delta, 0, 2);
  ad::Var dth = ad::wrapv(ad::slice_cols(delta, 2, 3));
  ad::Var z = ad::concat_cols(
      {ad::mul(dxy, ad::constant(Tensor::row({1.0 / scale[0], 1.0 / scale[1]}))),
       ad::scale(dth, 1.0 / scale[2])});
  ad::Var q = ad::sum_cols(ad::square(z));  // (n x 1) squared scaled distances
  double log_norm = -1.5 * std::log(2.0 * M_PI) - 3.0 * std::log(bandwidth);
  ad::Var log_gauss = ad::offset(ad::scale(q, -0.5 / (bandwidth * bandwidth)), log_norm);
  (void)n;
  return ad::logsumexp_all(ad::add(ad::logv(weights), log_gauss));
}

inline ad::Var uniform_weights(std::size_t n) {
  return ad::constant(Tensor::full({n, 1}, 1.0 / static_cast<double>(n)));
}

struct Transition {
  State prev;
  Action a;
  State next;
};

inline std::vector<Transition> collect_transitions(const std::vector<Episode>& eps) {
  std::vector<Transition> out;
  for (const Episode& ep : eps) {
    for (std::size_t t = 1; t < ep.states.size(); ++t) {
      out.push_back({ep.states[t - 1], ep.actions[t], ep.states[t]});
    }
  }
  return out;
}

/// Motion-model objective: sample particles from the true previous state via
/// the action sampler and dynamics, then the negative mixture log density at
/// the true next state, averaged over the batch.
inline ad::Var motion_loss(const ModelParams& models, const std::vector<Transition>& batch,
                           std::size_t n_samples, const StateScale& scale, RngStream& rng,
                           double bandwidth = 1.0) {
  if (batch.empty()) throw UsageError("motion_loss: empty batch");
  if (n_samples < 2) throw UsageError("motion_loss: n_samples must be >= 2 for mean centering");
  std::vector<ad::Var> terms;
  terms.reserve(batch.size());
  for (const Transition& tr : batch) {
    ad::Var start = ad::repeat_rows(
        ad::constant(Tensor::row({tr.prev.x, tr.prev.y, tr.prev.theta})), n_samples);
    ad::Var noisy = action_sampler(models, tr.a, n_samples, rng);
    ad::Var moved = move_particles(models, start, noisy);
    terms.push_back(
        ad::neg(mixture_log_density(moved, uniform_weights(n_samples), tr.next, scale, bandwidth)));
  }
  return ad::mean_all(ad::concat_rows(terms));
}

/// Learned-dynamics objective: per-dimension MSE between the predicted and
/// true state deltas, with the heading residual wrapped.
inline ad::Var dynamics_mse_loss(const ModelParams& models, const std::vector<Transition>& batch) {
  if (models.cfg.use_known_dynamics) {
    throw UsageError("dynamics_mse_loss: called in known-dynamics mode");
  }
  if (batch.empty()) throw UsageError("dynamics_mse_loss: empty batch");
  std::size_t B = batch.size();
  Tensor states = Tensor::zeros({B, 3});
  Tensor actions = Tensor::zeros({B, 3});
  Tensor truth = Tensor::zeros({B, 3});
  for (std::size_t i = 0; i < B; ++i) {
    const Transition& tr = batch[i];
    states.at(i, 0) = tr.prev.x;
    states.at(i, 1) = tr.prev.y;
    states.at(i, 2) = tr.prev.theta;
    actions.at(i, 0) = tr.a.dx;
    actions.at(i, 1) = tr.a.dy;
    actions.at(i, 2) = tr.a.dth;
    truth.at(i, 0) = tr.next.x - tr.prev.x;
    truth.at(i, 1) = tr.next.y - tr.prev.y;
    truth.at(i, 2) = wrap_angle(tr.next.theta - tr.prev.theta);
  }
  ad::Var pred = dynamics_learned_delta(models, ad::constant(states), ad::constant(actions));
  ad::Var resid = ad::sub(pred, ad::constant(truth));
  ad::Var resid_wrapped = ad::concat_cols(
      {ad::slice_cols(resid, 0, 2), ad::wrapv(ad::slice_cols(resid, 2, 3))});
  return ad::mean_all(ad::square(resid_wrapped));
}

struct ObservationSample {
  Observation o;
  State s;
};

/// Proposer objective: negative mixture log density of proposed particles at
/// the true state. Gradient flows into the proposer and the shared encoder.
inline ad::Var proposer_loss(const ModelParams& models,
                             const std::vector<ObservationSample>& batch,
                             std::size_t n_samples, const StateScale& scale, RngStream& rng,
                             double bandwidth = 1.0) {
  if (batch.empty()) throw UsageError("proposer_loss: empty batch");
  if (n_samples < 1) throw UsageError("proposer_loss: n_samples must be >= 1");
  std::vector<ad::Var> terms;
  terms.reserve(batch.size());
  for (const ObservationSample& item : batch) {
    ad::Var e = encoder(models, item.o);
    ad::Var props = proposer(models, e, n_samples, rng);
    terms.push_back(
        ad::neg(mixture_log_density(props, uniform_weights(n_samples), item.s, scale, bandwidth)));
  }
  return ad::mean_all(ad::concat_rows(terms));
}

/// Contrastive likelihood objective:
///   -log(mean over matched pairs) - log(1 - mean over all mismatched pairs),
/// with both batch means taken inside the logs. Mismatched pairs are the full
/// cross of (t1 != t2) within the batch.
inline ad::Var likelihood_contrastive_loss(const ModelParams& models,
                                           const std::vector<ObservationSample>& batch) {
  std::size_t B = batch.size();
  if (B < 2) throw UsageError("likelihood_contrastive_loss: batch size must be >= 2");
  Tensor obs = Tensor::zeros({B, static_cast<std::size_t>(models.cfg.K)});
  Tensor states = Tensor::zeros({B, 3});
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t k = 0; k < batch[i].o.size(); ++k) obs.at(i, k) = batch[i].o[k];
    states.at(i, 0) = batch[i].s.x;
    states.at(i, 1) = batch[i].s.y;
    states.at(i, 2) = batch[i].s.theta;
  }
  ad::Var E = encoder_batch(models, ad::constant(obs));
  ad::Var S = ad::constant(states);
  ad::Var matched = likelihood(models, E, S);
  std::vector<ad::Var> mm_terms;
  for (std::size_t i = 0; i < B; ++i) {
    ad::Var ei = ad::repeat_rows(ad::slice_rows(E, i, i + 1), B - 1);
    std::vector<ad::Var> others;
    if (i > 0) others.push_back(ad::slice_rows(S, 0, i));
    if (i + 1 < B) others.push_back(ad::slice_rows(S, i + 1, B));
    ad::Var s_wo = others.size() == 1 ? others[0] : ad::concat_rows(others);
    mm_terms.push_back(likelihood(models, ei, s_wo));
  }
  ad::Var mean_matched = ad::mean_all(matched);
  ad::Var mean_mismatched = ad::mean_all(ad::concat_rows(mm_terms));
  return ad::sub(ad::neg(ad::logv(mean_matched)),
                 ad::logv(ad::offset(ad::neg(mean_mismatched), 1.0)));
}

/// A contiguous slice of one episode, used as a training subsequence.
struct EpisodeSlice {
  const Episode* ep = nullptr;
  std::size_t begin = 0;
  std::size_t length = 0;
};

struct E2eLossResult {
  ad::Var loss;
  double mean_log_density = 0;  // diagnostic: average per-step log belief density
};

/// End-to-end objective: run the filter over the subsequence and return
/// -log of the mean belief density at the true states (mean over time taken
/// inside the log). Resampled particle states are detached, so each step's
/// gradient covers one loop iteration.
inline E2eLossResult e2e_loss(const ModelParams& models, const EpisodeSlice& slice,
                              const FilterConfig& cfg, const StateScale& scale, RngStream& rng,
                              double bandwidth = 1.0) {
  if (slice.length < 1 || slice.ep == nullptr) throw UsageError("e2e_loss: empty subsequence");
  if (slice.begin + slice.length > slice.ep->length()) {
    throw UsageError("e2e_loss: slice out of range");
  }
  const Episode& ep = *slice.ep;
  ParticleBelief bel = filter_init(models, ep.observations[slice.begin], cfg, rng);
  std::vector<ad::Var> log_densities;
  log_densities.push_back(
      mixture_log_density(bel.particles, bel.weights, ep.states[slice.begin], scale, bandwidth));
  for (std::size_t i = 1; i < slice.length; ++i) {
    std::size_t t = slice.begin + i;
    bel = filter_step(models, bel, ep.actions[t], ep.observations[t], cfg, rng);
    log_densities.push_back(
        mixture_log_density(bel.particles, bel.weights, ep.states[t], scale, bandwidth));
  }
  ad::Var stacked = ad::concat_rows(log_densities);
  double diag = 0;
  for (const ad::Var& v : log_densities) diag += v.item();
  ad::Var loss = ad::neg(ad::offset(ad::logsumexp_all(stacked),
                                    -std::log(static_cast<double>(slice.length))));
  return {loss, diag / static_cast<double>(slice.length)};
}

/// Scaled Euclidean distance between estimate and truth over (x, y, wrapped
/// heading).
inline double scaled_distance(const State& est, const State& truth, const StateScale& scale) {
  double dx = (est.x - truth.x) / scale[0];
  double dy = (est.y - truth.y) / scale[1];
  double dth = wrap_angle(est.theta - truth.theta) / scale[2];
  return std::sqrt(dx * dx + dy * dy + dth * dth);
}

/// Fraction of steps whose scaled distance exceeds 1.
inline double error_rate(const std::vector<State>& estimates, const std::vector<State>& truths,
                         const StateScale& scale) {
  if (estimates.size() != truths.size()) throw UsageError("error_rate: length mismatch");
  if (estimates.empty()) throw UsageError("error_rate: empty input");
  std::size_t errors = 0;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    if (scaled_distance(estimates[i], truths[i], scale) > 1.0) ++errors;
  }
  return static_cast<double>(errors) / static_cast<double>(estimates.size());
}

/// Scalar loss value plus per-model gradient norms; one row of the training
/// metrics CSV.
struct LossReport {
  double loss = 0;
  double mean_log_density = 0;
  std::map<std::string, double> grad_norms;  // by model prefix (f, g, h, k, l)
};

/// Runs backward on `loss` (parameters must have zeroed grads beforehand) and
/// collects per-prefix gradient norms.
inline LossReport make_loss_report(const ad::Var& loss, const ModelParams& models,
                                   double mean_log_density = 0) {
  if (!std::isfinite(loss.item())) throw NumericError("non-finite loss value");
  ad::backward(loss);
  LossReport rep;
  rep.loss = loss.item();
  rep.mean_log_density = mean_log_density;
  for (const std::string prefix : {"f", "g", "h", "k", "l"}) {
    auto params = models.store.with_prefixes({prefix + std::string("/")});
    if (!params.empty()) rep.grad_norms[prefix] = global_grad_norm(params);
  }
  return rep;
}

}  // namespace dpf
