#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dpf/experiments.hpp"
#include "dpf/maze.hpp"

namespace {

using namespace dpf;

void apply_overrides(Config& cfg, const std::vector<std::string>& sets) {
  for (const std::string& s : sets) {
    std::size_t eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got: " + s);
    cfg.set(Config::trim(s.substr(0, eq)), Config::trim(s.substr(eq + 1)));
  }
}

Config load_with_overrides(const std::string& path, const std::vector<std::string>& sets) {
  Config cfg = path.empty() ? Config{} : Config::load(path);
  apply_overrides(cfg, sets);
  return cfg;
}

int cmd_gen_data(int maze_id, char policy, int episodes, int steps, std::uint64_t seed, int K,
                 const NoiseSpec& noise, const std::string& out) {
  Maze maze = build_maze(maze_id);
  Policy mode = policy == 'A' ? Policy::A : Policy::B;
  std::vector<Episode> eps = generate_dataset(maze, maze_id, mode, episodes, steps, noise, K, seed);
  DatasetHeader hd;
  hd.maze_id = maze_id;
  hd.W = maze.width();
  hd.H = maze.height();
  hd.policy = policy;
  hd.K = K;
  hd.noise = noise;
  hd.episodes = episodes;
  hd.steps = steps;
  hd.seed = seed;
  save_dataset(out, hd, eps);
  std::printf("wrote %d episodes of %d steps to %s\n", episodes, steps, out.c_str());
  return 0;
}

int cmd_train(const Config& cfg, bool baseline) {
  TrainConfig tc = TrainConfig::from_config(cfg);
  if (baseline) {
    BaselineTrainResult r = train_baseline(tc);
    std::printf("baseline trained: best validation loss %.9g, checkpoint %s\n", r.best_val,
                tc.out_checkpoint.c_str());
  } else {
    TrainResult r = train_dpf(tc);
    std::printf("trained scheme %s: best validation loss %.9g, checkpoint %s\n",
                tc.scheme.c_str(), r.best_val, tc.out_checkpoint.c_str());
  }
  return 0;
}

int cmd_dump_belief(const std::string& ckpt, const std::string& data, std::size_t episode,
                    std::size_t particles, std::uint64_t seed, const std::string& out) {
  ModelParams models = models_from_checkpoint(load_checkpoint(ckpt));
  auto [hd, eps] = load_dataset(data);
  if (hd.K != models.cfg.K) throw DataError("dump-belief: dataset K does not match checkpoint");
  if (episode >= eps.size()) {
    throw UsageError("dump-belief: episode index out of range (dataset has " +
                     std::to_string(eps.size()) + ")");
  }
  ad::NoGradGuard ng;
  const Episode& ep = eps[episode];
  FilterConfig fc;
  fc.n_particles = particles;
  RngStream rng(derive_seed(seed, episode));
  std::ofstream os(out);
  if (!os) throw DataError("cannot open output file: " + out);
  ParticleBelief bel = filter_init(models, ep.observations[0], fc, rng);
  os << belief_record(bel).dump() << "\n";
  for (std::size_t t = 1; t < ep.length(); ++t) {
    bel = filter_step(models, bel, ep.actions[t], ep.observations[t], fc, rng);
    os << belief_record(bel).dump() << "\n";
  }
  std::printf("wrote %zu belief records to %s\n", ep.length(), out.c_str());
  return 0;
}

std::vector<std::uint64_t> parse_seeds(const Config& cfg, const std::string& key) {
  std::vector<std::uint64_t> out;
  for (const std::string& s : cfg.get_list(key)) out.push_back(std::stoull(s));
  return out;
}

TrainConfig base_from(const Config& cfg, const std::string& fallback_train,
                      const std::string& fallback_val) {
  Config base = cfg;
  if (!base.has("train_data")) base.set("train_data", fallback_train);
  if (!base.has("val_data")) base.set("val_data", fallback_val);
  return TrainConfig::from_config(base);
}

int cmd_curve(const Config& cfg) {
  CurveConfig cc;
  cc.maze = static_cast<int>(cfg.get_int("maze", cc.maze));
  if (cfg.has("schemes")) cc.schemes = cfg.get_list("schemes");
  if (cfg.has("sizes")) {
    cc.sizes.clear();
    for (const std::string& s : cfg.get_list("sizes")) cc.sizes.push_back(std::stoul(s));
  }
  if (cfg.has("seeds")) cc.seeds = parse_seeds(cfg, "seeds");
  cc.train_data = cfg.require_str("train_data");
  cc.val_data = cfg.require_str("val_data");
  cc.test_data = cfg.require_str("test_data");
  cc.out_csv = cfg.get_str("out_csv", cc.out_csv);
  cc.workdir = cfg.get_str("workdir", cc.workdir);
  cc.threads = static_cast<int>(cfg.get_int("threads", cc.threads));
  cc.base = TrainConfig::from_config(cfg);
  learning_curve(cc);
  std::printf("wrote %s\n", cc.out_csv.c_str());
  return 0;
}

int cmd_cross_policy(const Config& cfg) {
  CrossPolicyConfig cc;
  if (cfg.has("methods")) cc.methods = cfg.get_list("methods");
  if (cfg.has("train_policies")) cc.train_policies = cfg.get_list("train_policies");
  if (cfg.has("test_policies")) cc.test_policies = cfg.get_list("test_policies");
  if (cfg.has("seeds")) cc.seeds = parse_seeds(cfg, "seeds");
  cc.train_a = cfg.require_str("train_a");
  cc.val_a = cfg.require_str("val_a");
  cc.test_a = cfg.require_str("test_a");
  cc.train_b = cfg.require_str("train_b");
  cc.val_b = cfg.require_str("val_b");
  cc.test_b = cfg.require_str("test_b");
  cc.train_size = static_cast<std::size_t>(cfg.get_int("train_size", 0));
  cc.out_csv = cfg.get_str("out_csv", cc.out_csv);
  cc.workdir = cfg.get_str("workdir", cc.workdir);
  cc.threads = static_cast<int>(cfg.get_int("threads", cc.threads));
  cc.base = base_from(cfg, cc.train_a, cc.val_a);
  cross_policy(cc);
  std::printf("wrote %s\n", cc.out_csv.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"differentiable particle filter toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a maze dataset");
  int maze_id = 1, episodes = 100, steps = 100, K = 5;
  std::string policy = "A", out = "data.jsonl";
  std::uint64_t seed = 1;
  dpf::NoiseSpec noise;
  gen->add_option("--maze", maze_id, "maze preset 1|2|3")->check(CLI::Range(1, 3));
  gen->add_option("--policy", policy, "data collection policy A|B")
      ->check(CLI::IsMember({"A", "B"}));
  gen->add_option("--episodes", episodes)->check(CLI::PositiveNumber);
  gen->add_option("--steps", steps)->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed);
  gen->add_option("--k", K, "rays per observation")->check(CLI::PositiveNumber);
  gen->add_option("--sigma-odom", noise.sigma_odom);
  gen->add_option("--sigma-obs", noise.sigma_obs);
  gen->add_option("--sigma-act", noise.sigma_act);
  gen->add_option("--out", out, "output dataset path");

  // shared train/eval options
  std::string config_path, scheme, ckpt, data, belief_out = "belief.jsonl";
  std::vector<std::string> sets;
  std::size_t particles = 1000, episode_idx = 0;
  std::uint64_t eval_seed = 1;
  double gamma = 0.7;

  auto* train = app.add_subcommand("train", "train the filter models");
  train->add_option("--config", config_path)->required();
  train->add_option("--scheme", scheme)->check(CLI::IsMember({"ind", "e2e", "ind+e2e"}));
  train->add_option("--set", sets, "override config entries as key=value");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", ckpt)->required();
  eval->add_option("--data", data)->required();
  eval->add_option("--particles", particles);
  eval->add_option("--seed", eval_seed);
  eval->add_option("--gamma", gamma);

  auto* curve = app.add_subcommand("curve", "learning-curve experiment grid");
  curve->add_option("--config", config_path)->required();
  curve->add_option("--set", sets);

  auto* cross = app.add_subcommand("cross-policy", "cross-policy generalization grid");
  cross->add_option("--config", config_path)->required();
  cross->add_option("--set", sets);

  auto* btrain = app.add_subcommand("baseline-train", "train the recurrent baseline");
  btrain->add_option("--config", config_path)->required();
  btrain->add_option("--set", sets);

  auto* beval = app.add_subcommand("baseline-eval", "evaluate a baseline checkpoint");
  beval->add_option("--checkpoint", ckpt)->required();
  beval->add_option("--data", data)->required();

  auto* dump = app.add_subcommand("dump-belief", "dump per-step particle beliefs");
  dump->add_option("--checkpoint", ckpt)->required();
  dump->add_option("--data", data)->required();
  dump->add_option("--episode", episode_idx);
  dump->add_option("--particles", particles);
  dump->add_option("--seed", eval_seed);
  dump->add_option("--out", belief_out);

  try {
    app.parse(argc, argv);
    if (gen->parsed()) {
      return cmd_gen_data(maze_id, policy[0], episodes, steps, seed, K, noise, out);
    }
    if (train->parsed() || btrain->parsed()) {
      dpf::Config cfg = load_with_overrides(config_path, sets);
      if (!scheme.empty()) cfg.set("scheme", scheme);
      return cmd_train(cfg, btrain->parsed());
    }
    if (eval->parsed()) {
      dpf::EvalReport rep = dpf::evaluate_checkpoint(ckpt, data, particles, eval_seed, gamma);
      std::cout << rep.to_json().dump(2) << "\n";
      return 0;
    }
    if (beval->parsed()) {
      dpf::EvalReport rep = dpf::evaluate_baseline_checkpoint(ckpt, data);
      std::cout << rep.to_json().dump(2) << "\n";
      return 0;
    }
    if (curve->parsed()) return cmd_curve(load_with_overrides(config_path, sets));
    if (cross->parsed()) return cmd_cross_policy(load_with_overrides(config_path, sets));
    if (dump->parsed()) {
      return cmd_dump_belief(ckpt, data, episode_idx, particles, eval_seed, belief_out);
    }
    return 1;
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const dpf::UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const dpf::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const dpf::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 3;
  }
}
