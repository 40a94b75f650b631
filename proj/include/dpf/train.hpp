#pragma once

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dpf/adam.hpp"
#include "dpf/config.hpp"
#include "dpf/env.hpp"
#include "dpf/filter.hpp"
#include "dpf/losses.hpp"
#include "dpf/models.hpp"

namespace dpf {

struct TrainConfig {
  std::string scheme = "ind+e2e";  // ind | e2e | ind+e2e
  std::string train_data;
  std::string val_data;
  std::string out_checkpoint = "model.ckpt";
  std::string metrics_csv = "metrics.csv";
  std::size_t n_train_particles = 100;
  std::size_t n_test_particles = 1000;
  std::size_t subseq_len = 20;
  double gamma = 0.7;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  double clip_norm = 1000.0;
  int patience = 10;     // validation rounds without improvement
  int val_every = 200;   // optimizer steps between validations
  int max_steps_motion = 1500;
  int max_steps_measure = 2500;
  int max_steps_e2e = 1200;
  std::uint64_t seed = 1;
  bool known_dynamics = true;
  int width = 64, enc_dim = 64, f_width = 32;
  double bandwidth = 1.0;
  // The motion objective anneals its kernel from `bandwidth` down to this
  // value; a kernel wider than the odometry noise would drive the learned
  // noise to zero, so the final width must sit well below the noise scale.
  double motion_bandwidth = 0.03;
  // The proposer objective anneals its kernel from `bandwidth` to this value.
  // Kept at 1 by default: sharper kernels blow up the proposer gradients
  // through the shared encoder and starve the likelihood head.
  double proposer_bandwidth = 1.0;
  std::size_t motion_samples = 32;    // particles per transition in the motion objective
  std::size_t proposer_samples = 16;  // proposals per observation in the proposer objective
  std::size_t proposer_batch = 32;    // observations per proposer step
  std::size_t contrastive_batch = 16;

  void validate() const {
    if (scheme != "ind" && scheme != "e2e" && scheme != "ind+e2e") {
      throw UsageError("train: unknown scheme: " + scheme);
    }
    if (train_data.empty()) throw UsageError("train: train_data is required");
    if (val_data.empty()) throw UsageError("train: val_data is required");
    if (n_train_particles < 2 || subseq_len < 1 || batch_size < 1) {
      throw UsageError("train: counts must be positive");
    }
    if (patience < 1) throw UsageError("train: patience must be >= 1");
    if (val_every < 1) throw UsageError("train: val_every must be >= 1");
    if (!(gamma > 0.0) || gamma > 1.0) throw UsageError("train: gamma must be in (0,1]");
    if (!(motion_bandwidth > 0.0)) throw UsageError("train: motion_bandwidth must be positive");
    if (!(proposer_bandwidth > 0.0)) {
      throw UsageError("train: proposer_bandwidth must be positive");
    }
  }

  static TrainConfig from_config(const Config& c) {
    TrainConfig t;
    t.scheme = c.get_str("scheme", t.scheme);
    t.train_data = c.get_str("train_data", t.train_data);
    t.val_data = c.get_str("val_data", t.val_data);
    t.out_checkpoint = c.get_str("out_checkpoint", t.out_checkpoint);
    t.metrics_csv = c.get_str("metrics_csv", t.metrics_csv);
    t.n_train_particles = static_cast<std::size_t>(c.get_int("n_train_particles", 100));
    t.n_test_particles = static_cast<std::size_t>(c.get_int("n_test_particles", 1000));
    t.subseq_len = static_cast<std::size_t>(c.get_int("subseq_len", 20));
    t.gamma = c.get_double("gamma", t.gamma);
    t.batch_size = static_cast<std::size_t>(c.get_int("batch_size", 4));
    t.lr = c.get_double("lr", t.lr);
    t.adam_beta1 = c.get_double("adam_beta1", t.adam_beta1);
    t.adam_beta2 = c.get_double("adam_beta2", t.adam_beta2);
    t.adam_eps = c.get_double("adam_eps", t.adam_eps);
    t.clip_norm = c.get_double("clip_norm", t.clip_norm);
    t.patience = static_cast<int>(c.get_int("patience", t.patience));
    t.val_every = static_cast<int>(c.get_int("val_every", t.val_every));
    t.max_steps_motion = static_cast<int>(c.get_int("max_steps_motion", t.max_steps_motion));
    t.max_steps_measure = static_cast<int>(c.get_int("max_steps_measure", t.max_steps_measure));
    t.max_steps_e2e = static_cast<int>(c.get_int("max_steps_e2e", t.max_steps_e2e));
    t.seed = static_cast<std::uint64_t>(c.get_int("seed", 1));
    t.known_dynamics = c.get_bool("known_dynamics", t.known_dynamics);
    t.width = static_cast<int>(c.get_int("width", t.width));
    t.enc_dim = static_cast<int>(c.get_int("enc_dim", t.enc_dim));
    t.f_width = static_cast<int>(c.get_int("f_width", t.f_width));
    t.bandwidth = c.get_double("bandwidth", t.bandwidth);
    t.motion_bandwidth = c.get_double("motion_bandwidth", t.motion_bandwidth);
    t.proposer_bandwidth = c.get_double("proposer_bandwidth", t.proposer_bandwidth);
    t.motion_samples = static_cast<std::size_t>(c.get_int("motion_samples", 32));
    t.proposer_samples = static_cast<std::size_t>(c.get_int("proposer_samples", 16));
    t.proposer_batch = static_cast<std::size_t>(c.get_int("proposer_batch", 32));
    t.contrastive_batch = static_cast<std::size_t>(c.get_int("contrastive_batch", 16));
    t.validate();
    return t;
  }

  Config echo() const {
    Config c;
    char buf[32];
    auto put_num = [&](const std::string& k, double v) {
      std::snprintf(buf, sizeof buf, "%.9g", v);
      c.set(k, buf);
    };
    c.set("scheme", scheme);
    c.set("train_data", train_data);
    c.set("val_data", val_data);
    c.set("out_checkpoint", out_checkpoint);
    c.set("metrics_csv", metrics_csv);
    c.set("n_train_particles", std::to_string(n_train_particles));
    c.set("n_test_particles", std::to_string(n_test_particles));
    c.set("subseq_len", std::to_string(subseq_len));
    put_num("gamma", gamma);
    c.set("batch_size", std::to_string(batch_size));
    put_num("lr", lr);
    put_num("adam_beta1", adam_beta1);
    put_num("adam_beta2", adam_beta2);
    put_num("adam_eps", adam_eps);
    put_num("clip_norm", clip_norm);
    c.set("patience", std::to_string(patience));
    c.set("val_every", std::to_string(val_every));
    c.set("max_steps_motion", std::to_string(max_steps_motion));
    c.set("max_steps_measure", std::to_string(max_steps_measure));
    c.set("max_steps_e2e", std::to_string(max_steps_e2e));
    c.set("seed", std::to_string(seed));
    c.set("known_dynamics", known_dynamics ? "true" : "false");
    c.set("width", std::to_string(width));
    c.set("enc_dim", std::to_string(enc_dim));
    c.set("f_width", std::to_string(f_width));
    put_num("bandwidth", bandwidth);
    put_num("motion_bandwidth", motion_bandwidth);
    put_num("proposer_bandwidth", proposer_bandwidth);
    c.set("motion_samples", std::to_string(motion_samples));
    c.set("proposer_samples", std::to_string(proposer_samples));
    c.set("proposer_batch", std::to_string(proposer_batch));
    c.set("contrastive_batch", std::to_string(contrastive_batch));
    return c;
  }
};

/// Geometric interpolation from bw0 at step 0 to bwf at step n, constant after.
inline double annealed_bandwidth(double bw0, double bwf, int step, int n) {
  if (n <= 0 || step >= n || bw0 <= bwf) return bwf;
  return bw0 * std::pow(bwf / bw0, static_cast<double>(step) / static_cast<double>(n));
}

inline constexpr const char* kMetricsFormat = "dpf-metrics v1";

/// Append-only CSV writer. The first line carries the format version and the
/// config hash; numbers use 9 significant digits so reruns are bit-identical.
class MetricsWriter {
 public:
  MetricsWriter() = default;

  void open(const std::string& path, const std::string& config_hash,
            const std::string& columns) {
    os_.open(path);
    if (!os_) throw DataError("cannot open metrics file for writing: " + path);
    os_ << "# " << kMetricsFormat << " config " << config_hash << "\n" << columns << "\n";
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) os_ << ',';
      os_ << cells[i];
    }
    os_ << '\n';
    os_.flush();
  }

  static std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
  }

  bool is_open() const { return os_.is_open(); }

 private:
  std::ofstream os_;
};

namespace detail {

inline std::map<std::string, Tensor> snapshot_params(const ad::ParamStore& store) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, v] : store.params) out.emplace(name, v.value());
  return out;
}

inline void restore_params(ad::ParamStore& store, const std::map<std::string, Tensor>& snap) {
  for (auto& [name, v] : store.params) v.node()->value = snap.at(name);
}

inline EpisodeSlice random_slice(const std::vector<Episode>& data, std::size_t len,
                                 RngStream& rng) {
  const Episode& ep = data[rng.index(data.size())];
  std::size_t span = ep.length() >= len ? ep.length() - len + 1 : 1;
  std::size_t begin = rng.index(span);
  std::size_t length = std::min(len, ep.length() - begin);
  return {&ep, begin, length};
}

}  // namespace detail

/// Generic early-stopped optimization phase. `step_fn(step)` performs one
/// optimizer step and returns its LossReport; `val_fn()` scores the frozen
/// model on held-out data. The best-validation parameters are restored before
/// returning. Aborts with a diagnostic checkpoint on non-finite losses.
template <class StepFn, class ValFn>
double run_phase(const std::string& phase, ModelParams& models, int max_steps, int val_every,
                 int patience, StepFn step_fn, ValFn val_fn, MetricsWriter& metrics,
                 const std::string& diag_path) {
  double best_val = std::numeric_limits<double>::infinity();
  std::map<std::string, Tensor> best = detail::snapshot_params(models.store);
  int rounds_since_best = 0;
  auto validate_now = [&](int step) {
    double val = val_fn();
    metrics.row({phase, std::to_string(step), "", MetricsWriter::num(val), "", "", "", "", ""});
    if (val < best_val) {
      best_val = val;
      best = detail::snapshot_params(models.store);
      rounds_since_best = 0;
    } else {
      ++rounds_since_best;
    }
  };
  try {
    // Score the starting parameters so a phase that never improves on them
    // (e.g. fine-tuning an already-good model) restores them unchanged.
    validate_now(0);
    for (int step = 1; step <= max_steps; ++step) {
      LossReport rep = step_fn(step);
      auto norm = [&](const char* p) {
        auto it = rep.grad_norms.find(p);
        return it == rep.grad_norms.end() ? std::string() : MetricsWriter::num(it->second);
      };
      metrics.row({phase, std::to_string(step), MetricsWriter::num(rep.loss), "", norm("f"),
                   norm("g"), norm("h"), norm("k"), norm("l")});
      if (step % val_every == 0) {
        validate_now(step);
        if (rounds_since_best >= patience) break;
      }
    }
  } catch (const NumericError&) {
    // Abort with a diagnostic snapshot of the state that produced the
    // non-finite loss.
    save_checkpoint(diag_path, models_to_checkpoint(models, nullptr,
                                                    {{"diagnostic", true}, {"phase", phase}}));
    throw;
  }
  detail::restore_params(models.store, best);
  return best_val;
}

// ---------------------------------------------------------------------------
// Training schemes
// ---------------------------------------------------------------------------

struct TrainResult {
  ModelParams models;
  double best_val = 0;
  DatasetHeader data_header;
};

namespace detail {

inline std::vector<Transition> sample_transitions(const std::vector<Transition>& all,
                                                  std::size_t count, RngStream& rng) {
  std::vector<Transition> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(all[rng.index(all.size())]);
  return out;
}

inline std::vector<ObservationSample> sample_observations(const std::vector<Episode>& data,
                                                          std::size_t count, RngStream& rng) {
  std::vector<ObservationSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const Episode& ep = data[rng.index(data.size())];
    std::size_t t = rng.index(ep.length());
    out.push_back({ep.observations[t], ep.states[t]});
  }
  return out;
}

/// Spatial index over every (episode, step) state, used to assemble
/// contrastive batches of spatially close samples. Cross pairs in such a
/// batch are near-miss negatives with independent observation noise, which
/// batches drawn across episodes essentially never produce; without them the
/// likelihood never learns sub-unit pose resolution.
class NearPairIndex {
 public:
  NearPairIndex(const std::vector<Episode>& data, const StateScale& scale, double radius)
      : data_(&data), scale_(scale), radius_(radius) {
    for (std::size_t e = 0; e < data.size(); ++e) {
      for (std::size_t t = 0; t < data[e].length(); ++t) {
        entries_.push_back({e, t});
        buckets_[key(data[e].states[t])].push_back(entries_.back());
      }
    }
  }

  /// A batch whose states all lie within `radius` scaled units of a random
  /// anchor, topped up with uniform samples when the neighborhood is thin.
  std::vector<ObservationSample> sample_cluster(std::size_t count, RngStream& rng) const {
    const auto& anchor = entries_[rng.index(entries_.size())];
    const State& a = state(anchor);
    std::vector<Entry> near;
    std::array<int, 3> center = key(a);
    for (int dx = -1; dx <= 1; ++dx) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dth = -1; dth <= 1; ++dth) {
          int th = (center[2] + dth + theta_buckets_) % theta_buckets_;
          auto it = buckets_.find({center[0] + dx, center[1] + dy, th});
          if (it == buckets_.end()) continue;
          for (const Entry& e : it->second) {
            // Same-episode neighbors are skipped: adjacent steps of one
            // trajectory can carry near-identical observations, which makes
            // their cross pairs contradictory training targets.
            if (e.ep == anchor.ep) continue;
            if (scaled_distance(state(e), a, scale_) <= radius_) near.push_back(e);
          }
        }
      }
    }
    std::vector<ObservationSample> out;
    out.reserve(count);
    out.push_back({(*data_)[anchor.ep].observations[anchor.t], a});
    for (std::size_t i = 1; i < count; ++i) {
      const Entry& e = near.empty() ? entries_[rng.index(entries_.size())]
                                    : near[rng.index(near.size())];
      out.push_back({(*data_)[e.ep].observations[e.t], state(e)});
    }
    return out;
  }

 private:
  struct Entry {
    std::size_t ep, t;
  };
  const State& state(const Entry& e) const { return (*data_)[e.ep].states[e.t]; }
  std::array<int, 3> key(const State& s) const {
    double ct = radius_ * scale_[2];
    int tb = std::max(1, static_cast<int>(std::floor(2.0 * M_PI / ct)));
    theta_buckets_ = tb;
    int kt = static_cast<int>(std::floor((wrap_angle(s.theta) + M_PI) / (2.0 * M_PI) * tb));
    return {static_cast<int>(std::floor(s.x / (radius_ * scale_[0]))),
            static_cast<int>(std::floor(s.y / (radius_ * scale_[1]))),
            std::min(kt, tb - 1)};
  }
  const std::vector<Episode>* data_;
  StateScale scale_;
  double radius_;
  mutable int theta_buckets_ = 1;
  std::vector<Entry> entries_;
  std::map<std::array<int, 3>, std::vector<Entry>> buckets_;
};

}  // namespace detail

/// Individual pretraining: a motion phase for the action sampler (and learned
/// dynamics), then a measurement phase optimizing the proposer and contrastive
/// likelihood objectives jointly, sharing the encoder.
inline double train_ind(const TrainConfig& tc, ModelParams& models,
                        const std::vector<Episode>& train, const std::vector<Episode>& val,
                        const StateScale& scale, MetricsWriter& metrics) {
  std::vector<Transition> train_tr = collect_transitions(train);
  std::vector<Transition> val_tr = collect_transitions(val);
  if (val_tr.size() > 512) val_tr.resize(512);
  std::string diag = tc.out_checkpoint + ".diag";

  // Motion phase: f (and g when learned).
  {
    auto params = models.store.with_prefixes(models.cfg.use_known_dynamics
                                                 ? std::vector<std::string>{"f/"}
                                                 : std::vector<std::string>{"f/", "g/"});
    AdamState adam;
    adam.lr = tc.lr;
    adam.beta1 = tc.adam_beta1;
    adam.beta2 = tc.adam_beta2;
    adam.eps = tc.adam_eps;
    adam.clip_norm = tc.clip_norm;
    RngStream rng(derive_seed(tc.seed, 0x6d6f74));
    auto step_fn = [&](int step) {
      models.store.zero_grad();
      auto batch = detail::sample_transitions(train_tr, tc.batch_size, rng);
      double bw = annealed_bandwidth(tc.bandwidth, tc.motion_bandwidth, step,
                                     tc.max_steps_motion / 2);
      ad::Var loss = motion_loss(models, batch, tc.motion_samples, scale, rng, bw);
      if (!models.cfg.use_known_dynamics) {
        loss = ad::add(loss, dynamics_mse_loss(models, batch));
      }
      LossReport rep = make_loss_report(loss, models);
      adam_step(params, adam);
      return rep;
    };
    auto val_fn = [&]() {
      ad::NoGradGuard ng;
      RngStream vr(derive_seed(tc.seed, 0x76616c31));
      double v =
          motion_loss(models, val_tr, tc.motion_samples, scale, vr, tc.motion_bandwidth).item();
      if (!models.cfg.use_known_dynamics) v += dynamics_mse_loss(models, val_tr).item();
      return v;
    };
    run_phase("motion", models, tc.max_steps_motion, tc.val_every, tc.patience, step_fn, val_fn,
              metrics, diag);
  }

  // Measurement phase. The contrastive likelihood trains the shared encoder
  // and the likelihood head; the proposer trains only its decoder against the
  // evolving encoder, so its annealed-kernel gradients (which grow as the
  // kernel sharpens) cannot disturb what the likelihood is learning.
  double best;
  {
    auto lik_params = models.store.with_prefixes({"h/", "l/"});
    auto prop_params = models.store.with_prefixes({"k/"});
    AdamState adam_lik, adam_prop;
    for (AdamState* a : {&adam_lik, &adam_prop}) {
      a->lr = tc.lr;
      a->beta1 = tc.adam_beta1;
      a->beta2 = tc.adam_beta2;
      a->eps = tc.adam_eps;
      a->clip_norm = tc.clip_norm;
    }
    detail::NearPairIndex near(train, scale, 2.0);
    detail::NearPairIndex mid(train, scale, 6.0);
    RngStream rng(derive_seed(tc.seed, 0x6d656173));
    auto step_fn = [&](int step) {
      // Each batch mixes cross-episode spatial clusters at two radii with
      // uniform draws. The tight cluster is the only source of sub-unit
      // contrast; the wide one covers the 2-6 unit band where competing
      // aliased modes sit, which uniform pairs rarely sample; uniform draws
      // keep far negatives suppressed.
      models.store.zero_grad();
      auto contr_batch = near.sample_cluster(tc.contrastive_batch / 3, rng);
      auto mid_batch = mid.sample_cluster(tc.contrastive_batch / 3, rng);
      contr_batch.insert(contr_batch.end(), mid_batch.begin(), mid_batch.end());
      auto far_batch =
          detail::sample_observations(train, tc.contrastive_batch - contr_batch.size(), rng);
      contr_batch.insert(contr_batch.end(), far_batch.begin(), far_batch.end());
      LossReport rep = make_loss_report(likelihood_contrastive_loss(models, contr_batch), models);
      adam_step(lik_params, adam_lik);

      models.store.zero_grad();
      auto prop_batch = detail::sample_observations(train, tc.proposer_batch, rng);
      double prop_bw = annealed_bandwidth(tc.bandwidth, tc.proposer_bandwidth, step,
                                          tc.max_steps_measure / 2);
      LossReport prep = make_loss_report(
          proposer_loss(models, prop_batch, tc.proposer_samples, scale, rng, prop_bw), models);
      adam_step(prop_params, adam_prop);
      rep.loss += prep.loss;
      rep.grad_norms["k"] = prep.grad_norms["k"];
      return rep;
    };
    RngStream val_pick(derive_seed(tc.seed, 0x76616c32));
    auto val_prop = detail::sample_observations(val, 64, val_pick);
    auto val_contr = detail::sample_observations(val, 64, val_pick);
    detail::NearPairIndex near_val(val, scale, 2.0);
    auto val_near = near_val.sample_cluster(32, val_pick);
    auto val_fn = [&]() {
      ad::NoGradGuard ng;
      RngStream vr(derive_seed(tc.seed, 0x76616c33));
      return proposer_loss(models, val_prop, tc.proposer_samples, scale, vr,
                           tc.proposer_bandwidth)
                 .item() +
             likelihood_contrastive_loss(models, val_contr).item() +
             likelihood_contrastive_loss(models, val_near).item();
    };
    best = run_phase("measure", models, tc.max_steps_measure, tc.val_every, tc.patience, step_fn,
                     val_fn, metrics, diag);
  }
  return best;
}

/// End-to-end phase: the full filter on random subsequences, all models.
inline double train_e2e(const TrainConfig& tc, ModelParams& models,
                        const std::vector<Episode>& train, const std::vector<Episode>& val,
                        const StateScale& scale, MetricsWriter& metrics) {
  FilterConfig fc;
  fc.n_particles = tc.n_train_particles;
  fc.gamma = tc.gamma;
  auto params = models.store.all();
  AdamState adam;
  adam.lr = tc.lr;
  adam.beta1 = tc.adam_beta1;
  adam.beta2 = tc.adam_beta2;
  adam.eps = tc.adam_eps;
  adam.clip_norm = tc.clip_norm;
  RngStream rng(derive_seed(tc.seed, 0x653265));

  auto step_fn = [&](int) {
    models.store.zero_grad();
    std::vector<ad::Var> terms;
    double diag = 0;
    for (std::size_t b = 0; b < tc.batch_size; ++b) {
      EpisodeSlice slice = detail::random_slice(train, tc.subseq_len, rng);
      E2eLossResult r = e2e_loss(models, slice, fc, scale, rng, tc.bandwidth);
      terms.push_back(r.loss);
      diag += r.mean_log_density;
    }
    ad::Var loss = ad::mean_all(ad::concat_rows(terms));
    LossReport rep = make_loss_report(loss, models, diag / static_cast<double>(tc.batch_size));
    adam_step(params, adam);
    return rep;
  };
  // Validate on the deployment metric, not the training loss: the subsequence
  // objective rewards local tracking and can quietly trade away the global
  // acquisition the filter needs over a full episode. Scores full validation
  // episodes with the evaluation protocol (fixed stream, late-step error rate).
  FilterConfig vfc;
  vfc.n_particles = std::min<std::size_t>(tc.n_test_particles, 400);
  vfc.gamma = tc.gamma;
  auto val_fn = [&]() {
    ad::NoGradGuard ng;
    std::size_t errors = 0, total = 0;
    for (std::size_t i = 0; i < val.size(); ++i) {
      const Episode& ep = val[i];
      RngStream vr(derive_seed(derive_seed(tc.seed, 0x76616c34), i));
      ParticleBelief bel = filter_init(models, ep.observations[0], vfc, vr);
      for (std::size_t t = 0; t < ep.length(); ++t) {
        if (t > 0) bel = filter_step(models, bel, ep.actions[t], ep.observations[t], vfc, vr);
        if (t > 25 || ep.length() <= 26) {
          ++total;
          if (scaled_distance(estimate(bel), ep.states[t], scale) > 1.0) ++errors;
        }
      }
    }
    return static_cast<double>(errors) / static_cast<double>(total);
  };
  return run_phase("e2e", models, tc.max_steps_e2e, tc.val_every, tc.patience, step_fn, val_fn,
                   metrics, tc.out_checkpoint + ".diag");
}

/// Core training routine over in-memory datasets: runs the scheme's phases,
/// restores the best-validation parameters, writes the checkpoint and metrics
/// CSV to the paths in the config.
inline TrainResult train_dpf_data(const TrainConfig& tc, const DatasetHeader& train_hd,
                                  const std::vector<Episode>& train,
                                  const std::vector<Episode>& val) {
  tc.validate();
  StateScale scale = compute_scale(train);

  ModelConfig mc;
  mc.K = train_hd.K;
  mc.enc_dim = tc.enc_dim;
  mc.f_width = tc.f_width;
  mc.width = tc.width;
  mc.use_known_dynamics = tc.known_dynamics;
  mc.maze_w = train_hd.W;
  mc.maze_h = train_hd.H;
  RngStream init_rng(derive_seed(tc.seed, 0x696e6974));
  ModelParams models = make_model_params(mc, init_rng);
  models.set_scale(scale);

  Config echo = tc.echo();
  MetricsWriter metrics;
  metrics.open(tc.metrics_csv, echo.hash(), "phase,step,loss,val_loss,grad_f,grad_g,grad_h,grad_k,grad_l");

  double best = 0;
  if (tc.scheme == "ind" || tc.scheme == "ind+e2e") {
    best = train_ind(tc, models, train, val, scale, metrics);
  }
  if (tc.scheme == "e2e" || tc.scheme == "ind+e2e") {
    best = train_e2e(tc, models, train, val, scale, metrics);
  }

  nlohmann::json meta = {{"scheme", tc.scheme},
                         {"best_val", best},
                         {"config_hash", echo.hash()},
                         {"config", nlohmann::json::object()}};
  for (const auto& [k, v] : echo.values) meta["config"][k] = v;
  save_checkpoint(tc.out_checkpoint, models_to_checkpoint(models, nullptr, meta));
  return {std::move(models), best, train_hd};
}

/// File-path entry point used by the CLI.
inline TrainResult train_dpf(const TrainConfig& tc) {
  tc.validate();
  auto [train_hd, train] = load_dataset(tc.train_data);
  auto [val_hd, val] = load_dataset(tc.val_data);
  if (train_hd.K != val_hd.K || train_hd.W != val_hd.W || train_hd.H != val_hd.H) {
    throw DataError("train: train/validation datasets disagree on maze or ray count");
  }
  return train_dpf_data(tc, train_hd, train, val);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
  double error_rate_overall = 0;
  std::vector<double> error_rate_per_t;  // indexed by step 1..T
  double mean_scaled_distance = 0;
  double wall_clock_sec = 0;
  nlohmann::json config_echo;

  nlohmann::json to_json() const {
    return {{"error_rate", round_sig9(error_rate_overall)},
            {"error_rate_per_t", error_rate_per_t},
            {"mean_scaled_distance", round_sig9(mean_scaled_distance)},
            {"wall_clock_sec", wall_clock_sec},
            {"config", config_echo}};
  }
};

/// Runs the filter over every episode and scores per-step estimates with the
/// training-set scale stored in the model parameters.
inline EvalReport evaluate(const ModelParams& models, const std::vector<Episode>& eps,
                           std::size_t n_particles, std::uint64_t seed, double gamma = 0.7) {
  if (eps.empty()) throw DataError("evaluate: empty dataset");
  if (!models.scale_set) throw DataError("evaluate: checkpoint carries no state scale");
  ad::NoGradGuard ng;
  auto start = std::chrono::steady_clock::now();
  FilterConfig fc;
  fc.n_particles = n_particles;
  fc.gamma = gamma;
  const StateScale scale = {models.state_scale[0], models.state_scale[1],
                            models.state_scale[2]};
  std::size_t max_t = 0;
  for (const Episode& ep : eps) max_t = std::max(max_t, ep.length());
  std::vector<std::size_t> errors_at(max_t, 0), counts_at(max_t, 0);
  double dist_sum = 0;
  std::size_t dist_count = 0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const Episode& ep = eps[i];
    if (ep.observations[0].size() != static_cast<std::size_t>(models.cfg.K)) {
      throw DataError("evaluate: dataset ray count does not match checkpoint");
    }
    RngStream rng(derive_seed(seed, i));
    ParticleBelief bel = filter_init(models, ep.observations[0], fc, rng);
    for (std::size_t t = 0; t < ep.length(); ++t) {
      if (t > 0) bel = filter_step(models, bel, ep.actions[t], ep.observations[t], fc, rng);
      double d = scaled_distance(estimate(bel), ep.states[t], scale);
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
  rep.config_echo = {{"n_particles", n_particles}, {"seed", seed}, {"gamma", gamma},
                     {"episodes", eps.size()}};
  return rep;
}

/// Checkpoint + dataset entry point with compatibility checks.
inline EvalReport evaluate_checkpoint(const std::string& ckpt_path, const std::string& data_path,
                                      std::size_t n_particles, std::uint64_t seed,
                                      double gamma = 0.7) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  ModelParams models = models_from_checkpoint(ck);
  auto [hd, eps] = load_dataset(data_path);
  if (hd.K != models.cfg.K) {
    throw DataError("evaluate: dataset K=" + std::to_string(hd.K) +
                    " does not match checkpoint K=" + std::to_string(models.cfg.K));
  }
  if (hd.W != static_cast<int>(models.cfg.maze_w) ||
      hd.H != static_cast<int>(models.cfg.maze_h)) {
    throw DataError("evaluate: dataset maze does not match checkpoint maze");
  }
  EvalReport rep = evaluate(models, eps, n_particles, seed, gamma);
  rep.config_echo["checkpoint"] = ckpt_path;
  rep.config_echo["data"] = data_path;
  return rep;
}

}  // namespace dpf
