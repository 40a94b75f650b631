#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "dpf/baseline.hpp"
#include "dpf/train.hpp"

namespace dpf {

namespace detail {

/// Runs `fn(i)` for i in [0, count) across a fixed-size thread pool. Results
/// are written by index, so output ordering is deterministic regardless of
/// scheduling.
inline void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn) {
  if (threads < 1) threads = 1;
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

inline std::vector<Episode> take_episodes(const std::vector<Episode>& all, std::size_t n) {
  if (n > all.size()) {
    throw UsageError("experiment: requested " + std::to_string(n) + " episodes, dataset has " +
                     std::to_string(all.size()));
  }
  return {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n)};
}

}  // namespace detail

/// One trained-and-evaluated grid cell shared by both experiment runners.
/// `scheme` is a DPF training scheme or "baseline".
inline double run_cell(const TrainConfig& base, const std::string& scheme,
                       const DatasetHeader& hd, const std::vector<Episode>& train,
                       const std::vector<Episode>& val, const std::vector<Episode>& test,
                       std::uint64_t seed, const std::string& artifact_stem) {
  TrainConfig tc = base;
  tc.seed = seed;
  tc.out_checkpoint = artifact_stem + ".ckpt";
  tc.metrics_csv = artifact_stem + ".csv";
  std::uint64_t eval_seed = derive_seed(seed, 0xe5a1);
  if (scheme == "baseline") {
    BaselineTrainResult r = train_baseline_data(tc, hd, train, val);
    return evaluate_baseline(r.params, test).error_rate_overall;
  }
  tc.scheme = scheme;
  TrainResult r = train_dpf_data(tc, hd, train, val);
  return evaluate(r.models, test, tc.n_test_particles, eval_seed, tc.gamma).error_rate_overall;
}

// ---------------------------------------------------------------------------
// Learning curve (error rate vs number of training episodes)
// ---------------------------------------------------------------------------

struct CurveConfig {
  int maze = 1;
  std::vector<std::string> schemes = {"ind", "e2e", "ind+e2e", "baseline"};
  std::vector<std::size_t> sizes = {32, 63, 125, 250, 500, 1000};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string train_data, val_data, test_data;
  std::string out_csv = "curve.csv";
  std::string workdir = "curve_runs";
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  TrainConfig base;
};

inline void learning_curve(const CurveConfig& cc) {
  auto [hd, full_train] = load_dataset(cc.train_data);
  auto [val_hd, val] = load_dataset(cc.val_data);
  auto [test_hd, test] = load_dataset(cc.test_data);
  if (hd.K != val_hd.K || hd.K != test_hd.K || hd.W != test_hd.W || hd.H != test_hd.H) {
    throw DataError("curve: datasets disagree on maze or ray count");
  }
  std::filesystem::create_directories(cc.workdir);

  struct Cell {
    std::string scheme;
    std::size_t size;
    std::uint64_t seed;
    double error_rate;
  };
  std::vector<Cell> cells;
  for (const std::string& scheme : cc.schemes)
    for (std::size_t size : cc.sizes)
      for (std::uint64_t seed : cc.seeds) cells.push_back({scheme, size, seed, 0});
  for (const Cell& c : cells) (void)detail::take_episodes(full_train, c.size);

  detail::parallel_for(cells.size(), cc.threads, [&](std::size_t i) {
    Cell& c = cells[i];
    std::vector<Episode> sub = detail::take_episodes(full_train, c.size);
    std::string stem = cc.workdir + "/curve_" + c.scheme + "_" + std::to_string(c.size) + "_" +
                       std::to_string(c.seed);
    c.error_rate = run_cell(cc.base, c.scheme, hd, sub, val, test, c.seed, stem);
  });

  Config id;
  id.set("experiment", "curve");
  id.set("maze", std::to_string(cc.maze));
  id.set("train_data", cc.train_data);
  id.set("test_data", cc.test_data);
  for (const auto& [k, v] : cc.base.echo().values) id.set("base." + k, v);
  MetricsWriter out;
  out.open(cc.out_csv, id.hash(), "maze,scheme,n_episodes,seed,error_rate");
  for (const Cell& c : cells) {
    out.row({std::to_string(cc.maze), c.scheme, std::to_string(c.size), std::to_string(c.seed),
             MetricsWriter::num(c.error_rate)});
  }
}

// ---------------------------------------------------------------------------
// Cross-policy generalization grid
// ---------------------------------------------------------------------------

struct CrossPolicyConfig {
  std::vector<std::string> methods = {"ind+e2e", "baseline"};
  std::vector<std::string> train_policies = {"A", "B", "A+B"};
  std::vector<std::string> test_policies = {"A", "B"};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string train_a, val_a, test_a;
  std::string train_b, val_b, test_b;
  std::size_t train_size = 0;  // 0: use the full datasets
  std::string out_csv = "cross_policy.csv";
  std::string workdir = "cross_runs";
  int threads = static_cast<int>(std::thread::hardware_concurrency());
  TrainConfig base;
};

inline void cross_policy(const CrossPolicyConfig& cc) {
  auto [hd_a, full_a] = load_dataset(cc.train_a);
  auto [hd_b, full_b] = load_dataset(cc.train_b);
  auto [val_hd_a, val_a] = load_dataset(cc.val_a);
  auto [val_hd_b, val_b] = load_dataset(cc.val_b);
  auto [test_hd_a, test_a] = load_dataset(cc.test_a);
  auto [test_hd_b, test_b] = load_dataset(cc.test_b);
  if (hd_a.K != hd_b.K || hd_a.W != hd_b.W || hd_a.H != hd_b.H) {
    throw DataError("cross-policy: policy datasets disagree on maze or ray count");
  }
  std::filesystem::create_directories(cc.workdir);
  std::size_t size = cc.train_size ? cc.train_size : std::min(full_a.size(), full_b.size());

  auto training_set = [&](const std::string& policy) -> std::vector<Episode> {
    if (policy == "A") return detail::take_episodes(full_a, size);
    if (policy == "B") return detail::take_episodes(full_b, size);
    if (policy == "A+B") {
      // Equal mix at matched total size.
      std::vector<Episode> mix = detail::take_episodes(full_a, size / 2);
      std::vector<Episode> b = detail::take_episodes(full_b, size - size / 2);
      mix.insert(mix.end(), b.begin(), b.end());
      return mix;
    }
    throw UsageError("cross-policy: unknown train policy: " + policy);
  };
  auto validation_set = [&](const std::string& policy) -> const std::vector<Episode>& {
    return policy == "B" ? val_b : val_a;  // A+B validates on A
  };

  struct Cell {
    std::string method, train_policy;
    std::uint64_t seed;
    std::vector<double> error_rates;  // aligned with cc.test_policies
  };
  std::vector<Cell> cells;
  for (const std::string& method : cc.methods)
    for (const std::string& tp : cc.train_policies)
      for (std::uint64_t seed : cc.seeds) cells.push_back({method, tp, seed, {}});

  detail::parallel_for(cells.size(), cc.threads, [&](std::size_t i) {
    Cell& c = cells[i];
    std::vector<Episode> train = training_set(c.train_policy);
    TrainConfig tc = cc.base;
    tc.seed = c.seed;
    std::string stem = cc.workdir + "/cross_" + c.method + "_" + c.train_policy + "_" +
                       std::to_string(c.seed);
    tc.out_checkpoint = stem + ".ckpt";
    tc.metrics_csv = stem + ".csv";
    std::uint64_t eval_seed = derive_seed(c.seed, 0xe5a1);
    if (c.method == "baseline") {
      BaselineTrainResult r = train_baseline_data(tc, hd_a, train, validation_set(c.train_policy));
      for (const std::string& test_p : cc.test_policies) {
        c.error_rates.push_back(
            evaluate_baseline(r.params, test_p == "B" ? test_b : test_a).error_rate_overall);
      }
    } else {
      tc.scheme = c.method;
      TrainResult r = train_dpf_data(tc, hd_a, train, validation_set(c.train_policy));
      for (const std::string& test_p : cc.test_policies) {
        c.error_rates.push_back(evaluate(r.models, test_p == "B" ? test_b : test_a,
                                         tc.n_test_particles, eval_seed, tc.gamma)
                                    .error_rate_overall);
      }
    }
  });

  Config id;
  id.set("experiment", "cross_policy");
  id.set("train_a", cc.train_a);
  id.set("train_b", cc.train_b);
  id.set("train_size", std::to_string(size));
  for (const auto& [k, v] : cc.base.echo().values) id.set("base." + k, v);
  MetricsWriter out;
  out.open(cc.out_csv, id.hash(), "method,train_policy,test_policy,seed,error_rate");
  for (const Cell& c : cells) {
    for (std::size_t j = 0; j < cc.test_policies.size(); ++j) {
      out.row({c.method, c.train_policy, cc.test_policies[j], std::to_string(c.seed),
               MetricsWriter::num(c.error_rates[j])});
    }
  }
}

}  // namespace dpf
