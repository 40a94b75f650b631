#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dpf/adam.hpp"
#include "dpf/losses.hpp"
#include "dpf/maze.hpp"
#include "helpers.hpp"

using namespace dpf;
using Catch::Approx;

namespace {

constexpr double kLogNorm3 = -2.7568155996140185;  // log((2*pi)^(-3/2))

ModelParams small_models(std::uint64_t seed = 1, bool known_dynamics = true) {
  ModelConfig cfg;
  cfg.K = 5;
  cfg.enc_dim = 16;
  cfg.f_width = 8;
  cfg.width = 16;
  cfg.maze_w = 10;
  cfg.maze_h = 5;
  cfg.use_known_dynamics = known_dynamics;
  RngStream rng(seed);
  ModelParams p = make_model_params(cfg, rng);
  p.set_scale({0.3, 0.3, 0.3});
  return p;
}

void zero_prefix(ModelParams& p, const std::string& prefix) {
  for (auto& [name, v] : p.store.params) {
    if (name.rfind(prefix, 0) == 0) v.node()->value = Tensor::zeros(v.value().shape);
  }
}

Episode straight_episode(std::size_t T, double step_x) {
  Episode ep;
  for (std::size_t t = 0; t < T; ++t) {
    ep.states.push_back({1.0 + step_x * static_cast<double>(t), 2.0, 0.0});
    ep.actions.push_back(t == 0 ? Action{} : Action{step_x, 0, 0});
    ep.observations.push_back(Observation{1, 1, 1, 1, 1});
  }
  return ep;
}

}  // namespace

TEST_CASE("state scale: averages absolute steps, wraps headings, floors zeros") {
  std::vector<Episode> data{straight_episode(5, 1.0)};
  StateScale s = compute_scale(data);
  CHECK(s[0] == Approx(1.0));
  CHECK(s[1] == kScaleFloor);
  CHECK(s[2] == kScaleFloor);

  Episode wrap;
  for (int t = 0; t < 4; ++t) {
    double th = (t % 2 == 0) ? M_PI - 0.1 : -M_PI + 0.1;
    wrap.states.push_back({1.0 + 0.1 * t, 2.0, th});
    wrap.actions.push_back({});
    wrap.observations.push_back(Observation(5, 1.0));
  }
  StateScale sw = compute_scale({wrap});
  CHECK(sw[2] == Approx(0.2));  // the short way around the circle, not ~2*pi

  Episode constant;
  constant.states = {{1, 1, 0}, {1, 1, 0}};
  constant.actions = {{}, {}};
  constant.observations = {Observation(5, 1.0), Observation(5, 1.0)};
  CHECK_THROWS_AS(compute_scale({constant}), DataError);
  CHECK_THROWS_AS(compute_scale({}), DataError);
}

TEST_CASE("mixture density: single particle at the target hits the peak") {
  ad::Var particles = ad::constant(Tensor::row({2.0, 1.0, 0.5}));
  ad::Var w = uniform_weights(1);
  double got = mixture_log_density(particles, w, {2.0, 1.0, 0.5}, {1, 1, 1}).item();
  CHECK(got == Approx(kLogNorm3).epsilon(1e-12));

  // Bandwidth rescales both the normalizer and the exponent.
  double b2 = mixture_log_density(particles, w, {3.0, 1.0, 0.5}, {1, 1, 1}, 2.0).item();
  CHECK(b2 == Approx(kLogNorm3 - 3.0 * std::log(2.0) - 0.5 * 1.0 / 4.0).epsilon(1e-12));

  CHECK_THROWS_AS(mixture_log_density(particles, w, {2, 1, 0.5}, {1, 1, 1}, 0.0), UsageError);
}

TEST_CASE("mixture density: matches a direct two-component evaluation") {
  ad::Var particles = ad::constant(Tensor::matrix(2, 3, {0, 0, 0, 2, 0, 0}));
  ad::Var w = ad::constant(Tensor::matrix(2, 1, {0.3, 0.7}));
  double got = mixture_log_density(particles, w, {0, 0, 0}, {1, 1, 1}).item();
  double n0 = std::exp(kLogNorm3);
  double want = std::log(0.3 * n0 + 0.7 * n0 * std::exp(-2.0));
  CHECK(got == Approx(want).epsilon(1e-12));
}

TEST_CASE("mixture density: translation invariant and linear in the weights") {
  RngStream rng(3);
  Tensor pv = Tensor::zeros({6, 3});
  for (double& v : pv.data) v = rng.normal();
  Tensor wv = Tensor::zeros({6, 1});
  double total = 0;
  for (double& v : wv.data) {
    v = rng.uniform(0.1, 1.0);
    total += v;
  }
  for (double& v : wv.data) v /= total;
  State target{0.3, -0.2, 0.1};
  double base = mixture_log_density(ad::constant(pv), ad::constant(wv), target, {1, 1, 1}).item();

  Tensor shifted = pv;
  for (std::size_t i = 0; i < 6; ++i) {
    shifted.at(i, 0) += 5.0;
    shifted.at(i, 1) -= 2.0;
  }
  State moved{target.x + 5.0, target.y - 2.0, target.theta};
  double shifted_ld =
      mixture_log_density(ad::constant(shifted), ad::constant(wv), moved, {1, 1, 1}).item();
  CHECK(shifted_ld == Approx(base).epsilon(1e-10));

  Tensor doubled = wv;
  for (double& v : doubled.data) v *= 2.0;
  double dbl = mixture_log_density(ad::constant(pv), ad::constant(doubled), target, {1, 1, 1}).item();
  CHECK(dbl == Approx(base + std::log(2.0)).epsilon(1e-10));
}

TEST_CASE("mixture density integrates to one over the state space") {
  ad::NoGradGuard ng;
  Tensor pv = Tensor::matrix(2, 3, {0.0, 0.5, 0.3, -1.0, 0.2, -2.0});
  ad::Var particles = ad::constant(pv);
  ad::Var w = ad::constant(Tensor::matrix(2, 1, {0.4, 0.6}));
  StateScale scale{1, 1, 1};
  // x, y over +-5 standard deviations; the wrapped heading over one period.
  const int nxy = 41, nth = 41;
  const double lo = -5.0, hi = 5.0;
  double dxy = (hi - lo) / (nxy - 1);
  double dth = 2.0 * M_PI / nth;
  double integral = 0;
  for (int ix = 0; ix < nxy; ++ix) {
    for (int iy = 0; iy < nxy; ++iy) {
      for (int it = 0; it < nth; ++it) {
        State s{lo + ix * dxy, lo + iy * dxy, -M_PI + (it + 0.5) * dth};
        integral += std::exp(mixture_log_density(particles, w, s, scale).item());
      }
    }
  }
  integral *= dxy * dxy * dth;
  CHECK(integral == Approx(1.0).margin(0.03));
}

TEST_CASE("motion objective: a silent sampler on noiseless data sits at the density peak") {
  ModelParams p = small_models(4);
  zero_prefix(p, "f/");
  std::vector<Transition> batch;
  RngStream gen(5);
  for (int i = 0; i < 6; ++i) {
    State prev{gen.uniform(1, 9), gen.uniform(1, 4), gen.uniform(-M_PI, M_PI)};
    Action a{gen.uniform(-0.4, 0.4), gen.uniform(-0.1, 0.1), gen.uniform(-0.3, 0.3)};
    batch.push_back({prev, a, compose(prev, a)});
  }
  RngStream rng(6);
  double loss = motion_loss(p, batch, 16, {1, 1, 1}, rng).item();
  CHECK(loss == Approx(-kLogNorm3).epsilon(1e-9));

  CHECK_THROWS_AS(motion_loss(p, {}, 16, {1, 1, 1}, rng), UsageError);
  CHECK_THROWS_AS(motion_loss(p, batch, 1, {1, 1, 1}, rng), UsageError);
}

TEST_CASE("motion objective decreases as the sampler noise matches the data") {
  // A noisy sampler spreads samples around the truth; its density at the truth
  // must be below the noiseless peak.
  ModelParams noisy = small_models(7);
  ModelParams silent = small_models(7);
  zero_prefix(silent, "f/");
  std::vector<Transition> batch{{{2, 2, 0}, {0.5, 0, 0}, {2.5, 2, 0}}};
  RngStream r1(8), r2(8);
  double loss_noisy = motion_loss(noisy, batch, 64, {1, 1, 1}, r1).item();
  double loss_silent = motion_loss(silent, batch, 64, {1, 1, 1}, r2).item();
  CHECK(loss_noisy > loss_silent);
}

TEST_CASE("learned-dynamics mse: zero net against a unit step, wrapped heading residual") {
  ModelParams p = small_models(9, /*known_dynamics=*/false);
  zero_prefix(p, "g/");
  p.set_scale({1, 1, 1});
  std::vector<Transition> batch{{{2, 2, 0}, {-1, 0, 0}, {1, 2, 0}}};
  CHECK(dynamics_mse_loss(p, batch).item() == Approx(1.0 / 3.0));

  // Predicted heading delta -pi+0.1 vs true pi-0.1: the residual wraps to 0.2.
  Tensor bias = Tensor::row({0.0, 0.0, -M_PI + 0.1});
  p.store.get("g/b3").node()->value = bias;
  std::vector<Transition> wrapb{{{2, 2, 0}, {0, 0, 0}, {2, 2, M_PI - 0.1}}};
  CHECK(dynamics_mse_loss(p, wrapb).item() == Approx(0.04 / 3.0).epsilon(1e-9));

  ModelParams known = small_models(10, true);
  CHECK_THROWS_AS(dynamics_mse_loss(known, batch), UsageError);
  CHECK_THROWS_AS(dynamics_mse_loss(p, {}), UsageError);
}

TEST_CASE("contrastive likelihood: a constant estimator scores its fixed value") {
  ModelParams p = small_models(11);
  zero_prefix(p, "l/");
  std::vector<ObservationSample> batch;
  RngStream gen(12);
  for (int i = 0; i < 4; ++i) {
    Observation o(5);
    for (double& d : o) d = gen.uniform(0, 5);
    batch.push_back({o, {gen.uniform(0, 10), gen.uniform(0, 5), gen.uniform(-M_PI, M_PI)}});
  }
  // Zeroed head: every pre-activation is 0, every weight 0.004 + 0.996*0.5.
  double c = 0.502;
  double want = -std::log(c) - std::log(1.0 - c);
  CHECK(likelihood_contrastive_loss(p, batch).item() == Approx(want).epsilon(1e-9));

  CHECK_THROWS_AS(likelihood_contrastive_loss(p, {batch[0]}), UsageError);
}

TEST_CASE("contrastive likelihood is finite and differentiable on random batches") {
  ModelParams p = small_models(13);
  std::vector<ObservationSample> batch;
  RngStream gen(14);
  for (int i = 0; i < 5; ++i) {
    Observation o(5);
    for (double& d : o) d = gen.uniform(0, 5);
    batch.push_back({o, {gen.uniform(0, 10), gen.uniform(0, 5), gen.uniform(-M_PI, M_PI)}});
  }
  p.store.zero_grad();
  ad::Var loss = likelihood_contrastive_loss(p, batch);
  REQUIRE(std::isfinite(loss.item()));
  ad::backward(loss);
  auto eval = [&] {
    ad::NoGradGuard ng;
    return likelihood_contrastive_loss(p, batch).item();
  };
  for (const auto& [name, v] : p.store.with_prefixes({"l/", "h/"})) {
    INFO(name);
    REQUIRE(test::max_fd_rel_err(v, eval) < 1e-4);
  }
}

TEST_CASE("proposer objective improves with training on a fixed batch") {
  Maze maze = build_maze(3, 3, {});
  ModelConfig cfg;
  cfg.K = 5;
  cfg.enc_dim = 16;
  cfg.f_width = 8;
  cfg.width = 16;
  cfg.maze_w = 3;
  cfg.maze_h = 3;
  RngStream init_rng(15);
  ModelParams p = make_model_params(cfg, init_rng);
  p.set_scale({0.3, 0.3, 0.3});

  std::vector<ObservationSample> batch;
  RngStream gen(16);
  for (int i = 0; i < 8; ++i) {
    State s = random_free_pose(maze, gen);
    batch.push_back({raycast(maze, s, 5, 0.0, gen), s});
  }
  StateScale scale{0.5, 0.5, 0.5};
  AdamState adam;
  adam.lr = 3e-3;
  auto params = p.store.with_prefixes({"k/", "h/"});
  RngStream rng(17);
  double first = 0, last = 0;
  for (int step = 0; step < 80; ++step) {
    p.store.zero_grad();
    ad::Var loss = proposer_loss(p, batch, 16, scale, rng);
    if (step == 0) first = loss.item();
    last = loss.item();
    ad::backward(loss);
    adam_step(params, adam);
  }
  CHECK(last < first - 0.5);
}

TEST_CASE("end-to-end objective: a one-step slice reduces to the initial belief density") {
  ModelParams p = small_models(18);
  Episode ep = straight_episode(6, 0.5);
  FilterConfig cfg;
  cfg.n_particles = 20;
  StateScale scale{1, 1, 1};

  RngStream r1(19);
  E2eLossResult res = e2e_loss(p, {&ep, 0, 1}, cfg, scale, r1);
  RngStream r2(19);
  ParticleBelief bel = filter_init(p, ep.observations[0], cfg, r2);
  double want = -mixture_log_density(bel.particles, bel.weights, ep.states[0], scale).item();
  CHECK(res.loss.item() == Approx(want).epsilon(1e-12));
  CHECK(res.mean_log_density == Approx(-want).epsilon(1e-12));

  CHECK_THROWS_AS(e2e_loss(p, {&ep, 0, 0}, cfg, scale, r1), UsageError);
  CHECK_THROWS_AS(e2e_loss(p, {&ep, 4, 5}, cfg, scale, r1), UsageError);
}

TEST_CASE("end-to-end objective: finite over a multi-step slice, gradient matches fd") {
  ModelParams p = small_models(20);
  Episode ep = straight_episode(8, 0.4);
  FilterConfig cfg;
  cfg.n_particles = 10;
  StateScale scale{0.4, 0.4, 0.4};
  const std::uint64_t seed = 21;

  // With gamma = 1 every particle is freshly proposed, nothing is resampled,
  // and the whole two-step graph stays live: finite differences must match
  // the analytic gradient for every model.
  cfg.gamma = 1.0;
  auto build_full = [&]() -> E2eLossResult {
    RngStream rng(seed);
    return e2e_loss(p, {&ep, 2, 2}, cfg, scale, rng);
  };
  p.store.zero_grad();
  E2eLossResult res = build_full();
  REQUIRE(std::isfinite(res.loss.item()));
  ad::backward(res.loss);
  auto eval_full = [&] {
    ad::NoGradGuard ng;
    return build_full().loss.item();
  };
  for (const std::string name : {"h/b1", "k/b4", "l/b2", "k/W4", "l/W2"}) {
    INFO(name);
    REQUIRE(test::max_fd_rel_err(p.store.get(name), eval_full) < 1e-3);
  }

  // With gamma < 1 the resampled states are detached. Models that only act
  // downstream of the detach point (the action sampler and the likelihood)
  // still match finite differences exactly; the encoder's analytic gradient
  // must differ from the total derivative because its influence on the init
  // belief is cut at the resampling boundary.
  cfg.gamma = 0.7;
  auto build_cut = [&]() -> E2eLossResult {
    RngStream rng(seed);
    return e2e_loss(p, {&ep, 2, 2}, cfg, scale, rng);
  };
  p.store.zero_grad();
  ad::backward(build_cut().loss);
  auto eval_cut = [&] {
    ad::NoGradGuard ng;
    return build_cut().loss.item();
  };
  for (const std::string name : {"f/b2", "l/b2", "l/W2"}) {
    INFO(name);
    REQUIRE(test::max_fd_rel_err(p.store.get(name), eval_cut) < 1e-3);
  }
  CHECK(test::max_fd_rel_err(p.store.get("h/b1"), eval_cut) > 1e-2);
}

TEST_CASE("loss report: per-model gradient norms, non-finite loss rejected") {
  ModelParams p = small_models(22);
  std::vector<Transition> batch{{{2, 2, 0}, {0.5, 0, 0}, {2.5, 2, 0}}};
  RngStream rng(23);
  p.store.zero_grad();
  ad::Var loss = motion_loss(p, batch, 8, {1, 1, 1}, rng);
  LossReport rep = make_loss_report(loss, p, 1.5);
  CHECK(rep.loss == loss.item());
  CHECK(rep.mean_log_density == 1.5);
  CHECK(rep.grad_norms.at("f") > 0.0);
  CHECK(rep.grad_norms.count("g") == 0);  // known dynamics: no learned g
  CHECK(rep.grad_norms.at("h") == 0.0);   // untouched by the motion objective

  ad::Var bad = ad::logv(ad::constant(0.0));
  CHECK_THROWS_AS(make_loss_report(bad, p), NumericError);
}

TEST_CASE("error metric: scaled distance threshold at one") {
  StateScale scale{1, 1, 1};
  std::vector<State> truth{{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
  std::vector<State> est{{0.5, 0, 0}, {1.5, 0, 0}, {0, 2, 0}};
  CHECK(error_rate(est, truth, scale) == Approx(2.0 / 3.0));

  // Exactly at the threshold is not an error.
  CHECK(error_rate({{1.0, 0, 0}}, {{0, 0, 0}}, scale) == 0.0);

  // Heading distance wraps.
  CHECK(scaled_distance({0, 0, M_PI - 0.05}, {0, 0, -M_PI + 0.05}, scale) == Approx(0.1));

  // Tightening the scale can only increase the error rate.
  StateScale tight{0.1, 0.1, 0.1};
  CHECK(error_rate(est, truth, tight) >= error_rate(est, truth, scale));

  CHECK_THROWS_AS(error_rate({}, {}, scale), UsageError);
  CHECK_THROWS_AS(error_rate(est, {{0, 0, 0}}, scale), UsageError);
}
