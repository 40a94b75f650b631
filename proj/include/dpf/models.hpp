#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "dpf/adam.hpp"
#include "dpf/autodiff.hpp"
#include "dpf/checkpoint.hpp"
#include "dpf/env.hpp"
#include "dpf/errors.hpp"
#include "dpf/nn.hpp"
#include "dpf/rng.hpp"
#include "dpf/state.hpp"

namespace dpf {

struct ModelConfig {
  int K = 5;             // rays per observation
  int enc_dim = 64;      // encoding width
  int f_width = 32;      // action sampler hidden width
  int width = 64;        // hidden width of g, h, k, l
  bool use_known_dynamics = true;
  double maze_w = 10, maze_h = 5;
  double weight_floor = 0.004;
  double proposer_keep = 0.15;  // dropout keep, applied at training and test time

  double diagonal() const { return std::hypot(maze_w, maze_h); }
};

/// The learnable models of the filter: action sampler f, dynamics g (known
/// analytic or learned), observation encoder h, particle proposer k, and
/// observation likelihood estimator l. Parameter names carry the reserved
/// prefixes f/, g/, h/, k/, l/.
struct ModelParams {
  ModelConfig cfg;
  ad::ParamStore store;
  std::array<double, 3> state_scale = {0, 0, 0};  // mean |step| per dimension, from training data
  bool scale_set = false;

  void set_scale(const std::array<double, 3>& s) {
    state_scale = s;
    scale_set = true;
  }
};

namespace detail {

inline void add_mlp(ad::ParamStore& store, const std::string& prefix,
                    const std::vector<std::size_t>& dims, RngStream& rng) {
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    store.add(prefix + "W" + std::to_string(i), ad::glorot_uniform(dims[i], dims[i + 1], rng));
    store.add(prefix + "b" + std::to_string(i), Tensor::zeros({1, dims[i + 1]}));
  }
}

inline ad::Var mlp_layer(const ModelParams& p, const std::string& prefix, std::size_t i,
                         const ad::Var& x, ad::Act act) {
  return ad::dense(x, p.store.get(prefix + "W" + std::to_string(i)),
                   p.store.get(prefix + "b" + std::to_string(i)), act);
}

}  // namespace detail

inline ModelParams make_model_params(const ModelConfig& cfg, RngStream& rng) {
  ModelParams p;
  p.cfg = cfg;
  std::size_t K = static_cast<std::size_t>(cfg.K);
  std::size_t E = static_cast<std::size_t>(cfg.enc_dim);
  std::size_t Wf = static_cast<std::size_t>(cfg.f_width);
  std::size_t W = static_cast<std::size_t>(cfg.width);
  detail::add_mlp(p.store, "f/", {6, Wf, Wf, 3}, rng);
  if (!cfg.use_known_dynamics) {
    detail::add_mlp(p.store, "g/", {5, W, W, W, 3}, rng);
  }
  detail::add_mlp(p.store, "h/", {K, W, E}, rng);
  detail::add_mlp(p.store, "k/", {E, W, W, W, W, 4}, rng);
  detail::add_mlp(p.store, "l/", {E + 18, W, W, 1}, rng);
  return p;
}

/// Noisy actions for n particles: a + f(a, eps) with the network output
/// mean-centered across particles, so the sample mean equals a exactly
/// (reparameterized sampling).
inline ad::Var action_sampler(const ModelParams& p, const Action& a, std::size_t n,
                              RngStream& rng) {
  if (n == 0) throw UsageError("action_sampler: n must be >= 1");
  Tensor eps = Tensor::zeros({n, 3});
  for (double& v : eps.data) v = rng.normal();
  ad::Var a_rows = ad::repeat_rows(ad::constant(Tensor::row({a.dx, a.dy, a.dth})), n);
  ad::Var input = ad::concat_cols({a_rows, ad::constant(eps)});
  ad::Var hmid = detail::mlp_layer(p, "f/", 0, input, ad::Act::Relu);
  hmid = detail::mlp_layer(p, "f/", 1, hmid, ad::Act::Relu);
  ad::Var out = detail::mlp_layer(p, "f/", 2, hmid, ad::Act::Linear);
  ad::Var centered = ad::sub(out, ad::mean_rows(out));
  return ad::add(centered, a_rows);
}

/// Known analytic dynamics on particle batches: local-to-global composition,
/// differentiable in both states and actions.
inline ad::Var dynamics_known_v(const ad::Var& states, const ad::Var& actions) {
  ad::Var x = ad::slice_cols(states, 0, 1);
  ad::Var y = ad::slice_cols(states, 1, 2);
  ad::Var th = ad::slice_cols(states, 2, 3);
  ad::Var adx = ad::slice_cols(actions, 0, 1);
  ad::Var ady = ad::slice_cols(actions, 1, 2);
  ad::Var adth = ad::slice_cols(actions, 2, 3);
  ad::Var c = ad::cosv(th);
  ad::Var s = ad::sinv(th);
  ad::Var nx = ad::add(x, ad::sub(ad::mul(adx, c), ad::mul(ady, s)));
  ad::Var ny = ad::add(y, ad::add(ad::mul(adx, s), ad::mul(ady, c)));
  ad::Var nth = ad::wrapv(ad::add(th, adth));
  return ad::concat_cols({nx, ny, nth});
}

/// Learned dynamics: s + scale * net(cos th, sin th, action). The residual is
/// scaled per dimension by the dataset's average step size.
inline ad::Var dynamics_learned_v(const ModelParams& p, const ad::Var& states,
                                  const ad::Var& actions) {
  if (!p.scale_set) throw UsageError("dynamics_learned: state scale not set");
  ad::Var th = ad::slice_cols(states, 2, 3);
  ad::Var input = ad::concat_cols({ad::cosv(th), ad::sinv(th), actions});
  ad::Var h = detail::mlp_layer(p, "g/", 0, input, ad::Act::Relu);
  h = detail::mlp_layer(p, "g/", 1, h, ad::Act::Relu);
  h = detail::mlp_layer(p, "g/", 2, h, ad::Act::Relu);
  ad::Var out = detail::mlp_layer(p, "g/", 3, h, ad::Act::Linear);
  ad::Var scaled = ad::mul(out, ad::constant(Tensor::row(
                                    {p.state_scale[0], p.state_scale[1], p.state_scale[2]})));
  ad::Var next = ad::add(states, scaled);
  return ad::concat_cols({ad::slice_cols(next, 0, 2), ad::wrapv(ad::slice_cols(next, 2, 3))});
}

/// Raw per-dimension delta prediction of the learned dynamics net (before
/// adding to the state); used by its MSE training objective.
inline ad::Var dynamics_learned_delta(const ModelParams& p, const ad::Var& states,
                                      const ad::Var& actions) {
  if (!p.scale_set) throw UsageError("dynamics_learned: state scale not set");
  ad::Var th = ad::slice_cols(states, 2, 3);
  ad::Var input = ad::concat_cols({ad::cosv(th), ad::sinv(th), actions});
  ad::Var h = detail::mlp_layer(p, "g/", 0, input, ad::Act::Relu);
  h = detail::mlp_layer(p, "g/", 1, h, ad::Act::Relu);
  h = detail::mlp_layer(p, "g/", 2, h, ad::Act::Relu);
  ad::Var out = detail::mlp_layer(p, "g/", 3, h, ad::Act::Linear);
  return ad::mul(out, ad::constant(Tensor::row(
                          {p.state_scale[0], p.state_scale[1], p.state_scale[2]})));
}

/// Clamps particle positions to the maze extents; headings pass through. The
/// state space is bounded by the outer walls, and keeping particles inside it
/// also keeps them inside the likelihood estimator's training distribution.
inline ad::Var clamp_to_extents(const ModelConfig& cfg, const ad::Var& states) {
  auto clamp_lo_hi = [](const ad::Var& v, double hi) {
    // relu(v) - relu(v - hi) == min(max(v, 0), hi)
    return ad::sub(ad::relu(v), ad::relu(ad::offset(v, -hi)));
  };
  return ad::concat_cols({clamp_lo_hi(ad::slice_cols(states, 0, 1), cfg.maze_w),
                          clamp_lo_hi(ad::slice_cols(states, 1, 2), cfg.maze_h),
                          ad::slice_cols(states, 2, 3)});
}

inline ad::Var move_particles(const ModelParams& p, const ad::Var& states,
                              const ad::Var& actions) {
  ad::Var next = p.cfg.use_known_dynamics ? dynamics_known_v(states, actions)
                                          : dynamics_learned_v(p, states, actions);
  return clamp_to_extents(p.cfg, next);
}

/// Shared observation encoder h: depths normalized by the maze diagonal, then
/// a small dense net. Deterministic (no dropout at this layer).
inline ad::Var encoder_batch(const ModelParams& p, const ad::Var& obs_rows) {
  if (obs_rows.cols() != static_cast<std::size_t>(p.cfg.K)) {
    throw UsageError("encoder: observation has wrong ray count");
  }
  ad::Var x = ad::scale(obs_rows, 1.0 / p.cfg.diagonal());
  ad::Var h = detail::mlp_layer(p, "h/", 0, x, ad::Act::Relu);
  return detail::mlp_layer(p, "h/", 1, h, ad::Act::Relu);
}

inline ad::Var encoder(const ModelParams& p, const Observation& o) {
  if (o.size() != static_cast<std::size_t>(p.cfg.K)) {
    throw UsageError("encoder: observation has wrong ray count");
  }
  return encoder_batch(p, ad::constant(Tensor::row(o)));
}

/// Particle proposer k: m candidate states from one encoding. Dropout (keep
/// 0.15) runs at training AND test time as the proposer's noise source. The
/// four tanh outputs decode to x, y and an atan2 heading pair, so proposals
/// always land inside the maze extents.
inline ad::Var proposer(const ModelParams& p, const ad::Var& e, std::size_t m, RngStream& rng) {
  if (m == 0) throw UsageError("proposer: m must be >= 1");
  ad::Var rows = e.rows() == 1 ? ad::repeat_rows(e, m) : e;
  if (rows.rows() != m) throw UsageError("proposer: encoding row count mismatch");
  ad::Var h = detail::mlp_layer(p, "k/", 0, rows, ad::Act::Relu);
  Tensor mask = ad::dropout_mask({m, h.cols()}, p.cfg.proposer_keep, rng);
  h = ad::mul(h, ad::constant(mask));
  h = detail::mlp_layer(p, "k/", 1, h, ad::Act::Relu);
  h = detail::mlp_layer(p, "k/", 2, h, ad::Act::Relu);
  h = detail::mlp_layer(p, "k/", 3, h, ad::Act::Relu);
  ad::Var u = detail::mlp_layer(p, "k/", 4, h, ad::Act::Tanh);
  ad::Var px = ad::scale(ad::offset(ad::slice_cols(u, 0, 1), 1.0), 0.5 * p.cfg.maze_w);
  ad::Var py = ad::scale(ad::offset(ad::slice_cols(u, 1, 2), 1.0), 0.5 * p.cfg.maze_h);
  ad::Var pth = ad::atan2v(ad::slice_cols(u, 2, 3), ad::slice_cols(u, 3, 4));
  return ad::concat_cols({px, py, pth});
}

/// Observation likelihood estimator l: sigmoid output affinely mapped to
/// [0.004, 1.0]. The floor keeps particles alive and log-gradients finite.
/// `e` may be a single encoding row (shared across particles) or one row per
/// particle state.
inline ad::Var likelihood(const ModelParams& p, const ad::Var& e, const ad::Var& states) {
  std::size_t n = states.rows();
  ad::Var rows = e.rows() == 1 ? ad::repeat_rows(e, n) : e;
  if (rows.rows() != n) throw UsageError("likelihood: encoding row count mismatch");
  ad::Var x = ad::slice_cols(states, 0, 1);
  ad::Var y = ad::slice_cols(states, 1, 2);
  ad::Var th = ad::slice_cols(states, 2, 3);
  // Fourier position features down to sub-cell periods: the net has to
  // represent the maze's depth field, which raw coordinates make needlessly
  // hard for a small MLP.
  std::vector<ad::Var> feats = {ad::scale(x, 1.0 / p.cfg.maze_w),
                                ad::scale(y, 1.0 / p.cfg.maze_h), ad::cosv(th), ad::sinv(th),
                                ad::cosv(ad::scale(th, 2.0)), ad::sinv(ad::scale(th, 2.0))};
  for (double cycles_per_cell : {0.5, 1.0, 2.0}) {
    double w = 2.0 * M_PI * cycles_per_cell;
    feats.push_back(ad::sinv(ad::scale(x, w)));
    feats.push_back(ad::cosv(ad::scale(x, w)));
    feats.push_back(ad::sinv(ad::scale(y, w)));
    feats.push_back(ad::cosv(ad::scale(y, w)));
  }
  feats.insert(feats.begin(), rows);
  ad::Var input = ad::concat_cols(feats);
  ad::Var h = detail::mlp_layer(p, "l/", 0, input, ad::Act::Relu);
  h = detail::mlp_layer(p, "l/", 1, h, ad::Act::Relu);
  ad::Var z = detail::mlp_layer(p, "l/", 2, h, ad::Act::Sigmoid);
  return ad::offset(ad::scale(z, 1.0 - p.cfg.weight_floor), p.cfg.weight_floor);
}

// ---------------------------------------------------------------------------
// Checkpoint bridging
// ---------------------------------------------------------------------------

inline Checkpoint models_to_checkpoint(const ModelParams& p, const AdamState* adam,
                                       nlohmann::json extra_meta = {}) {
  Checkpoint ck;
  ck.kind = "dpf";
  for (const auto& [name, v] : p.store.params) ck.tensors.emplace(name, v.value());
  if (adam) ck.adam = *adam;
  ck.meta = std::move(extra_meta);
  ck.meta["model"] = {{"K", p.cfg.K},
                      {"enc_dim", p.cfg.enc_dim},
                      {"f_width", p.cfg.f_width},
                      {"width", p.cfg.width},
                      {"use_known_dynamics", p.cfg.use_known_dynamics},
                      {"maze_w", p.cfg.maze_w},
                      {"maze_h", p.cfg.maze_h},
                      {"weight_floor", p.cfg.weight_floor},
                      {"proposer_keep", p.cfg.proposer_keep}};
  if (p.scale_set) ck.meta["state_scale"] = p.state_scale;
  return ck;
}

inline ModelParams models_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "dpf") throw DataError("checkpoint is not a dpf model checkpoint");
  const auto& m = ck.meta.at("model");
  ModelConfig cfg;
  cfg.K = m.at("K");
  cfg.enc_dim = m.at("enc_dim");
  cfg.f_width = m.at("f_width");
  cfg.width = m.at("width");
  cfg.use_known_dynamics = m.at("use_known_dynamics");
  cfg.maze_w = m.at("maze_w");
  cfg.maze_h = m.at("maze_h");
  cfg.weight_floor = m.at("weight_floor");
  cfg.proposer_keep = m.at("proposer_keep");
  RngStream rng(0);  // shapes only; values overwritten below
  ModelParams p = make_model_params(cfg, rng);
  for (auto& [name, v] : p.store.params) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw DataError("checkpoint missing parameter: " + name);
    if (!it->second.same_shape(v.value())) {
      throw DataError("checkpoint shape mismatch for parameter: " + name);
    }
    v.node()->value = it->second;
  }
  if (ck.meta.contains("state_scale")) {
    p.set_scale(ck.meta.at("state_scale").get<std::array<double, 3>>());
  }
  return p;
}

}  // namespace dpf
