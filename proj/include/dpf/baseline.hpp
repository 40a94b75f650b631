#pragma once

#include <string>
#include <vector>

#include "dpf/train.hpp"

namespace dpf {

/// Recurrent baseline: shared-style depth encoder, the action concatenated to
/// the encoding, two LSTM layers, two dense layers, and separate heads for
/// (x, y) and the (sin, cos) heading pair. Replaces the filtering loop with
/// learned recurrence; trained by MSE on the scaled pose.
struct BaselineConfig {
  int K = 5;
  int enc_width = 64;
  int enc_dim = 64;
  int rnn_width = 128;
  int fc_width = 128;
  double maze_w = 10, maze_h = 5;

  double diagonal() const { return std::hypot(maze_w, maze_h); }
};

struct BaselineParams {
  BaselineConfig cfg;
  ad::ParamStore store;
  std::array<double, 3> state_scale = {0, 0, 0};
  bool scale_set = false;

  void set_scale(const std::array<double, 3>& s) {
    state_scale = s;
    scale_set = true;
  }
};

inline BaselineParams make_baseline_params(const BaselineConfig& cfg, RngStream& rng) {
  BaselineParams p;
  p.cfg = cfg;
  std::size_t K = static_cast<std::size_t>(cfg.K);
  std::size_t EW = static_cast<std::size_t>(cfg.enc_width);
  std::size_t E = static_cast<std::size_t>(cfg.enc_dim);
  std::size_t R = static_cast<std::size_t>(cfg.rnn_width);
  std::size_t F = static_cast<std::size_t>(cfg.fc_width);
  p.store.add("enc/W0", ad::glorot_uniform(K, EW, rng));
  p.store.add("enc/b0", Tensor::zeros({1, EW}));
  p.store.add("enc/W1", ad::glorot_uniform(EW, E, rng));
  p.store.add("enc/b1", Tensor::zeros({1, E}));
  ad::make_lstm_cell(p.store, "lstm1/", E + 3, R, rng);
  ad::make_lstm_cell(p.store, "lstm2/", R, R, rng);
  p.store.add("fc1/W", ad::glorot_uniform(R, F, rng));
  p.store.add("fc1/b", Tensor::zeros({1, F}));
  p.store.add("fc2/W", ad::glorot_uniform(F, F, rng));
  p.store.add("fc2/b", Tensor::zeros({1, F}));
  p.store.add("head_xy/W", ad::glorot_uniform(F, 2, rng));
  p.store.add("head_xy/b", Tensor::zeros({1, 2}));
  p.store.add("head_th/W", ad::glorot_uniform(F, 2, rng));
  p.store.add("head_th/b", Tensor::zeros({1, 2}));
  return p;
}

struct BaselineState {
  ad::Var h1, c1, h2, c2;
};

inline BaselineState baseline_init_state(const BaselineParams& p, std::size_t batch) {
  std::size_t R = static_cast<std::size_t>(p.cfg.rnn_width);
  ad::Var z = ad::constant(Tensor::zeros({batch, R}));
  return {z, z, z, z};
}

struct BaselineOutput {
  ad::Var xy;      // (B x 2)
  ad::Var sincos;  // (B x 2)
};

/// One recurrent step on a batch of observations and actions.
inline BaselineOutput baseline_step(const BaselineParams& p, BaselineState& st,
                                    const ad::Var& obs_rows, const ad::Var& action_rows) {
  ad::Var x = ad::scale(obs_rows, 1.0 / p.cfg.diagonal());
  ad::Var e = ad::dense(x, p.store.get("enc/W0"), p.store.get("enc/b0"), ad::Act::Relu);
  e = ad::dense(e, p.store.get("enc/W1"), p.store.get("enc/b1"), ad::Act::Relu);
  ad::Var in = ad::concat_cols({e, action_rows});
  ad::LstmCellParams l1{p.store.get("lstm1/Wx"), p.store.get("lstm1/Wh"), p.store.get("lstm1/b")};
  ad::LstmCellParams l2{p.store.get("lstm2/Wx"), p.store.get("lstm2/Wh"), p.store.get("lstm2/b")};
  auto [h1, c1] = ad::lstm_cell(in, st.h1, st.c1, l1);
  auto [h2, c2] = ad::lstm_cell(h1, st.h2, st.c2, l2);
  st = {h1, c1, h2, c2};
  ad::Var f = ad::dense(h2, p.store.get("fc1/W"), p.store.get("fc1/b"), ad::Act::Relu);
  f = ad::dense(f, p.store.get("fc2/W"), p.store.get("fc2/b"), ad::Act::Relu);
  ad::Var xy = ad::dense(f, p.store.get("head_xy/W"), p.store.get("head_xy/b"), ad::Act::Linear);
  ad::Var sc = ad::dense(f, p.store.get("head_th/W"), p.store.get("head_th/b"), ad::Act::Linear);
  return {xy, sc};
}

inline State baseline_estimate_row(const BaselineOutput& out, std::size_t row) {
  double s = out.sincos.value().at(row, 0);
  double c = out.sincos.value().at(row, 1);
  return State{out.xy.value().at(row, 0), out.xy.value().at(row, 1), std::atan2(s, c)};
}

/// MSE over a batch of aligned subsequences: scaled (x, y) residuals plus the
/// (sin, cos) heading residuals, averaged over batch, time, and terms.
inline ad::Var baseline_loss(const BaselineParams& p, const std::vector<EpisodeSlice>& batch,
                             const StateScale& scale) {
  if (batch.empty()) throw UsageError("baseline_loss: empty batch");
  std::size_t B = batch.size();
  std::size_t L = batch[0].length;
  std::size_t K = static_cast<std::size_t>(p.cfg.K);
  for (const EpisodeSlice& s : batch) {
    if (s.length != L || s.ep == nullptr || s.begin + s.length > s.ep->length()) {
      throw UsageError("baseline_loss: ragged or invalid batch");
    }
  }
  BaselineState st = baseline_init_state(p, B);
  std::vector<ad::Var> terms;
  for (std::size_t i = 0; i < L; ++i) {
    Tensor obs = Tensor::zeros({B, K});
    Tensor act = Tensor::zeros({B, 3});
    Tensor xy_t = Tensor::zeros({B, 2});
    Tensor sc_t = Tensor::zeros({B, 2});
    for (std::size_t b = 0; b < B; ++b) {
      std::size_t t = batch[b].begin + i;
      const Episode& ep = *batch[b].ep;
      for (std::size_t k = 0; k < K; ++k) obs.at(b, k) = ep.observations[t][k];
      // The first step of a slice has no preceding measured action.
      Action a = i == 0 ? Action{} : ep.actions[t];
      act.at(b, 0) = a.dx;
      act.at(b, 1) = a.dy;
      act.at(b, 2) = a.dth;
      xy_t.at(b, 0) = ep.states[t].x / scale[0];
      xy_t.at(b, 1) = ep.states[t].y / scale[1];
      sc_t.at(b, 0) = std::sin(ep.states[t].theta);
      sc_t.at(b, 1) = std::cos(ep.states[t].theta);
    }
    BaselineOutput out = baseline_step(p, st, ad::constant(obs), ad::constant(act));
    ad::Var xy_scaled = ad::mul(out.xy, ad::constant(Tensor::row({1.0 / scale[0], 1.0 / scale[1]})));
    ad::Var resid = ad::concat_cols({ad::sub(xy_scaled, ad::constant(xy_t)),
                                     ad::sub(out.sincos, ad::constant(sc_t))});
    terms.push_back(ad::mean_all(ad::square(resid)));
  }
  return ad::mean_all(ad::concat_rows(terms));
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline Checkpoint baseline_to_checkpoint(const BaselineParams& p, nlohmann::json extra_meta = {}) {
  Checkpoint ck;
  ck.kind = "dpf-baseline";
  for (const auto& [name, v] : p.store.params) ck.tensors.emplace(name, v.value());
  ck.meta = std::move(extra_meta);
  ck.meta["model"] = {{"K", p.cfg.K},           {"enc_width", p.cfg.enc_width},
                      {"enc_dim", p.cfg.enc_dim}, {"rnn_width", p.cfg.rnn_width},
                      {"fc_width", p.cfg.fc_width}, {"maze_w", p.cfg.maze_w},
                      {"maze_h", p.cfg.maze_h}};
  if (p.scale_set) ck.meta["state_scale"] = p.state_scale;
  return ck;
}

inline BaselineParams baseline_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "dpf-baseline") throw DataError("checkpoint is not a baseline checkpoint");
  const auto& m = ck.meta.at("model");
  BaselineConfig cfg;
  cfg.K = m.at("K");
  cfg.enc_width = m.at("enc_width");
  cfg.enc_dim = m.at("enc_dim");
  cfg.rnn_width = m.at("rnn_width");
  cfg.fc_width = m.at("fc_width");
  cfg.maze_w = m.at("maze_w");
  cfg.maze_h = m.at("maze_h");
  RngStream rng(0);
  BaselineParams p = make_baseline_params(cfg, rng);
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

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

inline double train_baseline_phase(const TrainConfig& tc, BaselineParams& p,
                                   const std::vector<Episode>& train,
                                   const std::vector<Episode>& val, const StateScale& scale,
                                   MetricsWriter& metrics) {
  auto params = p.store.all();
  AdamState adam;
  adam.lr = tc.lr;
  adam.beta1 = tc.adam_beta1;
  adam.beta2 = tc.adam_beta2;
  adam.eps = tc.adam_eps;
  adam.clip_norm = tc.clip_norm;
  RngStream rng(derive_seed(tc.seed, 0x626173));

  std::vector<EpisodeSlice> val_slices;
  for (std::size_t i = 0; i < val.size() && val_slices.size() < 32; ++i) {
    for (std::size_t off = 0; off + tc.subseq_len <= val[i].length() && val_slices.size() < 32;
         off += 2 * tc.subseq_len) {
      val_slices.push_back({&val[i], off, tc.subseq_len});
    }
  }
  if (val_slices.empty()) throw DataError("baseline validation: episodes shorter than subseq_len");

  double best_val = std::numeric_limits<double>::infinity();
  auto best = detail::snapshot_params(p.store);
  int rounds_since_best = 0;
  for (int step = 1; step <= tc.max_steps_e2e; ++step) {
    p.store.zero_grad();
    std::vector<EpisodeSlice> batch;
    for (std::size_t b = 0; b < tc.batch_size; ++b) {
      const Episode& ep = train[rng.index(train.size())];
      std::size_t span = ep.length() >= tc.subseq_len ? ep.length() - tc.subseq_len + 1 : 1;
      batch.push_back({&ep, rng.index(span), std::min(tc.subseq_len, ep.length())});
    }
    ad::Var loss = baseline_loss(p, batch, scale);
    if (!std::isfinite(loss.item())) {
      save_checkpoint(tc.out_checkpoint + ".diag",
                      baseline_to_checkpoint(p, {{"diagnostic", true}}));
      throw NumericError("baseline: non-finite loss");
    }
    ad::backward(loss);
    adam_step(params, adam);
    metrics.row({"baseline", std::to_string(step), MetricsWriter::num(loss.item()), "", "", "",
                 "", "", ""});
    if (step % tc.val_every == 0) {
      ad::NoGradGuard ng;
      double v = 0;
      for (const EpisodeSlice& s : val_slices) v += baseline_loss(p, {s}, scale).item();
      v /= static_cast<double>(val_slices.size());
      metrics.row({"baseline", std::to_string(step), "", MetricsWriter::num(v), "", "", "", "",
                   ""});
      if (v < best_val) {
        best_val = v;
        best = detail::snapshot_params(p.store);
        rounds_since_best = 0;
      } else if (++rounds_since_best >= tc.patience) {
        break;
      }
    }
  }
  detail::restore_params(p.store, best);
  return best_val;
}

struct BaselineTrainResult {
  BaselineParams params;
  double best_val = 0;
};

inline BaselineTrainResult train_baseline_data(const TrainConfig& tc,
                                               const DatasetHeader& train_hd,
                                               const std::vector<Episode>& train,
                                               const std::vector<Episode>& val) {
  tc.validate();
  StateScale scale = compute_scale(train);
  BaselineConfig bc;
  bc.K = train_hd.K;
  bc.enc_width = tc.width;
  bc.enc_dim = tc.enc_dim;
  bc.maze_w = train_hd.W;
  bc.maze_h = train_hd.H;
  RngStream init_rng(derive_seed(tc.seed, 0x62696e69));
  BaselineParams p = make_baseline_params(bc, init_rng);
  p.set_scale(scale);

  Config echo = tc.echo();
  MetricsWriter metrics;
  metrics.open(tc.metrics_csv, echo.hash(),
               "phase,step,loss,val_loss,grad_f,grad_g,grad_h,grad_k,grad_l");
  double best = train_baseline_phase(tc, p, train, val, scale, metrics);

  nlohmann::json meta = {{"best_val", best}, {"config_hash", echo.hash()}};
  save_checkpoint(tc.out_checkpoint, baseline_to_checkpoint(p, meta));
  return {std::move(p), best};
}

inline BaselineTrainResult train_baseline(const TrainConfig& tc) {
  tc.validate();
  auto [train_hd, train] = load_dataset(tc.train_data);
  auto [val_hd, val] = load_dataset(tc.val_data);
  if (train_hd.K != val_hd.K || train_hd.W != val_hd.W || train_hd.H != val_hd.H) {
    throw DataError("baseline: train/validation datasets disagree on maze or ray count");
  }
  return train_baseline_data(tc, train_hd, train, val);
}

/// Same per-step error-rate protocol as the filter's evaluation.
inline EvalReport evaluate_baseline(const BaselineParams& p, const std::vector<Episode>& eps) {
  if (eps.empty()) throw DataError("evaluate: empty dataset");
  if (!p.scale_set) throw DataError("evaluate: checkpoint carries no state scale");
  ad::NoGradGuard ng;
  auto start = std::chrono::steady_clock::now();
  const StateScale scale = {p.state_scale[0], p.state_scale[1], p.state_scale[2]};
  std::size_t K = static_cast<std::size_t>(p.cfg.K);
  std::size_t max_t = 0;
  for (const Episode& ep : eps) max_t = std::max(max_t, ep.length());
  std::vector<std::size_t> errors_at(max_t, 0), counts_at(max_t, 0);
  double dist_sum = 0;
  std::size_t dist_count = 0;
  for (const Episode& ep : eps) {
    if (ep.observations[0].size() != K) {
      throw DataError("evaluate: dataset ray count does not match checkpoint");
    }
    BaselineState st = baseline_init_state(p, 1);
    for (std::size_t t = 0; t < ep.length(); ++t) {
      Tensor obs = Tensor::zeros({1, K});
      for (std::size_t k = 0; k < K; ++k) obs.at(0, k) = ep.observations[t][k];
      Action a = t == 0 ? Action{} : ep.actions[t];
      Tensor act = Tensor::row({a.dx, a.dy, a.dth});
      BaselineOutput out = baseline_step(p, st, ad::constant(obs), ad::constant(act));
      double d = scaled_distance(baseline_estimate_row(out, 0), ep.states[t], scale);
      dist_sum += d;
      ++dist_count;
      ++counts_at[t];
      if (d > 1.0) ++errors_at[t];
    }
  }
  EvalReport rep;
  std::size_t total_err = 0, total = 0;
  rep.error_rate_per_t.resize(max_t);
  for (std::size_t t = 0; t < max_t; ++t) {
    rep.error_rate_per_t[t] =
        counts_at[t] ? static_cast<double>(errors_at[t]) / static_cast<double>(counts_at[t]) : 0;
    total_err += errors_at[t];
    total += counts_at[t];
  }
  rep.error_rate_overall = static_cast<double>(total_err) / static_cast<double>(total);
  rep.mean_scaled_distance = dist_sum / static_cast<double>(dist_count);
  rep.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  rep.config_echo = {{"episodes", eps.size()}, {"method", "baseline"}};
  return rep;
}

inline EvalReport evaluate_baseline_checkpoint(const std::string& ckpt_path,
                                               const std::string& data_path) {
  BaselineParams p = baseline_from_checkpoint(load_checkpoint(ckpt_path));
  auto [hd, eps] = load_dataset(data_path);
  if (hd.K != p.cfg.K) throw DataError("evaluate: dataset K does not match checkpoint");
  if (hd.W != static_cast<int>(p.cfg.maze_w) || hd.H != static_cast<int>(p.cfg.maze_h)) {
    throw DataError("evaluate: dataset maze does not match checkpoint maze");
  }
  EvalReport rep = evaluate_baseline(p, eps);
  rep.config_echo["checkpoint"] = ckpt_path;
  rep.config_echo["data"] = data_path;
  return rep;
}

}  // namespace dpf
