#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <queue>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpf/errors.hpp"
#include "dpf/maze.hpp"
#include "dpf/rng.hpp"
#include "dpf/state.hpp"

namespace dpf {

struct NoiseSpec {
  double sigma_odom = 0.1;  // multiplicative noise on the odometry measurement
  double sigma_obs = 0.1;   // additive noise on ray depths, cell units
  double sigma_act = 0.05;  // multiplicative noise on the realized motion
};

inline constexpr double kFov = M_PI / 2.0;       // 90 degree field of view
inline constexpr double kAdvance = 0.5;          // policy speed, cells per step
inline constexpr double kTurnCap = M_PI / 4.0;   // policy turn rate cap
inline constexpr double kRandomProb = 0.1;       // fraction of random policy actions
inline constexpr double kContactMargin = 0.01;   // stop distance before a wall

/// Angular offset of ray i of K, spread evenly over the field of view.
inline double ray_offset(int i, int K) {
  if (K == 1) return 0.0;
  return -kFov / 2.0 + kFov * static_cast<double>(i) / static_cast<double>(K - 1);
}

/// K noisy depth rays centered on the heading. Noise is additive Gaussian,
/// clamped at zero.
inline Observation raycast(const Maze& maze, const State& pose, int K, double sigma_obs,
                           RngStream& rng) {
  if (!maze.in_bounds(pose.x, pose.y)) throw DataError("raycast: pose outside free space");
  Observation obs(static_cast<std::size_t>(K));
  for (int i = 0; i < K; ++i) {
    double d = maze.ray_distance(pose.x, pose.y, pose.theta + ray_offset(i, K));
    if (sigma_obs > 0) d += rng.normal(0, sigma_obs);
    obs[static_cast<std::size_t>(i)] = std::max(0.0, d);
  }
  return obs;
}

/// Executes an intended action with actuation noise and wall clamping.
/// Translation stops kContactMargin before the first wall contact; the
/// heading change is applied in full. Returns the new pose and the realized
/// local-frame delta.
inline std::pair<State, Action> apply_motion(const Maze& maze, const State& pose,
                                             const Action& intended, RngStream& rng,
                                             double sigma_act) {
  Action noisy = intended;
  if (sigma_act > 0) {
    noisy.dx *= 1.0 + rng.normal(0, sigma_act);
    noisy.dy *= 1.0 + rng.normal(0, sigma_act);
    noisy.dth *= 1.0 + rng.normal(0, sigma_act);
  }
  State target = compose(pose, noisy);
  double len = std::hypot(target.x - pose.x, target.y - pose.y);
  State next = target;
  if (len > 0) {
    double hit = maze.first_hit(pose.x, pose.y, target.x, target.y);
    if (hit <= 1.0) {
      double travel = std::max(0.0, hit * len - kContactMargin);
      double f = travel / len;
      next.x = pose.x + f * (target.x - pose.x);
      next.y = pose.y + f * (target.y - pose.y);
    }
  }
  return {next, local_delta(pose, next)};
}

/// Odometry measurement: each component of the true delta scaled by an
/// independent (1 + N(0, sigma^2)) factor.
inline Action odometry_measure(const Action& true_delta, double sigma_odom, RngStream& rng) {
  Action a = true_delta;
  if (sigma_odom > 0) {
    a.dx *= 1.0 + rng.normal(0, sigma_odom);
    a.dy *= 1.0 + rng.normal(0, sigma_odom);
    a.dth *= 1.0 + rng.normal(0, sigma_odom);
  }
  return a;
}

enum class Policy { A, B };

inline char policy_tag(Policy p) { return p == Policy::A ? 'A' : 'B'; }
inline Policy policy_from_tag(char c) {
  if (c == 'A') return Policy::A;
  if (c == 'B') return Policy::B;
  throw DataError(std::string("unknown policy tag: ") + c);
}

/// BFS shortest cell path; returns the first step direction toward `goal`
/// as the next cell to visit, or the current cell if already there.
inline std::pair<int, int> next_cell_on_path(const Maze& maze, int cx, int cy, int gx, int gy) {
  int W = maze.width(), H = maze.height();
  if (cx == gx && cy == gy) return {cx, cy};
  std::vector<int> prev(static_cast<std::size_t>(W) * H, -1);
  auto id = [H](int x, int y) { return x * H + y; };
  std::queue<std::pair<int, int>> q;
  q.push({cx, cy});
  prev[static_cast<std::size_t>(id(cx, cy))] = id(cx, cy);
  const int dxs[4] = {1, 0, -1, 0};
  const int dys[4] = {0, 1, 0, -1};
  bool found = false;
  while (!q.empty() && !found) {
    auto [x, y] = q.front();
    q.pop();
    for (int d = 0; d < 4; ++d) {
      if (!maze.open(x, y, d)) continue;
      int nx = x + dxs[d], ny = y + dys[d];
      if (prev[static_cast<std::size_t>(id(nx, ny))] != -1) continue;
      prev[static_cast<std::size_t>(id(nx, ny))] = id(x, y);
      if (nx == gx && ny == gy) {
        found = true;
        break;
      }
      q.push({nx, ny});
    }
  }
  if (prev[static_cast<std::size_t>(id(gx, gy))] == -1) throw DataError("unreachable goal cell");
  // Walk back from the goal to the cell adjacent to the start.
  int x = gx, y = gy;
  while (prev[static_cast<std::size_t>(id(x, y))] != id(cx, cy)) {
    int p = prev[static_cast<std::size_t>(id(x, y))];
    x = p / H;
    y = p % H;
  }
  return {x, y};
}

/// One policy decision. Mode A steers toward the deepest of K noiseless rays;
/// mode B follows the BFS shortest path to `goal` (resampled in place when
/// reached). Both mix in 10% random turns and always advance 0.5 cells.
inline Action policy_step(const Maze& maze, const State& pose, Policy mode,
                          std::pair<int, int>& goal, RngStream& rng, int K) {
  if (rng.bernoulli(kRandomProb)) {
    return Action{kAdvance, 0.0, rng.uniform(-kTurnCap, kTurnCap)};
  }
  double turn = 0.0;
  if (mode == Policy::A) {
    int best = 0;
    double best_d = -1;
    for (int i = 0; i < K; ++i) {
      double d = maze.ray_distance(pose.x, pose.y, pose.theta + ray_offset(i, K));
      if (d > best_d) {
        best_d = d;
        best = i;
      }
    }
    turn = std::clamp(ray_offset(best, K), -kTurnCap, kTurnCap);
  } else {
    int cx = static_cast<int>(std::floor(pose.x));
    int cy = static_cast<int>(std::floor(pose.y));
    cx = std::clamp(cx, 0, maze.width() - 1);
    cy = std::clamp(cy, 0, maze.height() - 1);
    if (cx == goal.first && cy == goal.second) {
      goal = {static_cast<int>(rng.index(static_cast<std::size_t>(maze.width()))),
              static_cast<int>(rng.index(static_cast<std::size_t>(maze.height())))};
    }
    auto [nx, ny] = next_cell_on_path(maze, cx, cy, goal.first, goal.second);
    double desired = std::atan2(ny + 0.5 - pose.y, nx + 0.5 - pose.x);
    turn = std::clamp(wrap_angle(desired - pose.theta), -kTurnCap, kTurnCap);
  }
  return Action{kAdvance, 0.0, turn};
}

/// Aligned observation/action/state sequences. actions[0] is zero (no motion
/// precedes the first state); actions[t] measures the motion from states[t-1]
/// to states[t].
struct Episode {
  int maze_id = 0;
  char policy = 'A';
  std::vector<State> states;
  std::vector<Action> actions;
  std::vector<Observation> observations;

  std::size_t length() const { return states.size(); }
};

inline State random_free_pose(const Maze& maze, RngStream& rng) {
  int cx = static_cast<int>(rng.index(static_cast<std::size_t>(maze.width())));
  int cy = static_cast<int>(rng.index(static_cast<std::size_t>(maze.height())));
  double x = cx + rng.uniform(0.1, 0.9);
  double y = cy + rng.uniform(0.1, 0.9);
  double theta = wrap_angle(rng.uniform(-M_PI, M_PI));
  return State{x, y, theta};
}

inline Episode generate_episode(const Maze& maze, int maze_id, Policy mode, int T,
                                const NoiseSpec& noise, int K, RngStream& rng) {
  Episode ep;
  ep.maze_id = maze_id;
  ep.policy = policy_tag(mode);
  State pose = random_free_pose(maze, rng);
  std::pair<int, int> goal = {static_cast<int>(rng.index(static_cast<std::size_t>(maze.width()))),
                              static_cast<int>(rng.index(static_cast<std::size_t>(maze.height())))};
  ep.states.push_back(pose);
  ep.actions.push_back(Action{});
  ep.observations.push_back(raycast(maze, pose, K, noise.sigma_obs, rng));
  for (int t = 1; t < T; ++t) {
    Action intended = policy_step(maze, pose, mode, goal, rng, K);
    auto [next, true_delta] = apply_motion(maze, pose, intended, rng, noise.sigma_act);
    pose = next;
    ep.states.push_back(pose);
    ep.actions.push_back(odometry_measure(true_delta, noise.sigma_odom, rng));
    ep.observations.push_back(raycast(maze, pose, K, noise.sigma_obs, rng));
  }
  return ep;
}

/// Deterministic per-seed dataset; episode i uses a stream derived from
/// (seed, i), so episodes are independent of generation order.
inline std::vector<Episode> generate_dataset(const Maze& maze, int maze_id, Policy mode,
                                             int n_episodes, int T, const NoiseSpec& noise,
                                             int K, std::uint64_t seed) {
  if (n_episodes < 1 || T < 1 || K < 1) throw UsageError("generate_dataset: parameters must be positive");
  std::vector<Episode> eps;
  eps.reserve(static_cast<std::size_t>(n_episodes));
  for (int i = 0; i < n_episodes; ++i) {
    RngStream rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    eps.push_back(generate_episode(maze, maze_id, mode, T, noise, K, rng));
  }
  return eps;
}

// ---------------------------------------------------------------------------
// Dataset container: line-delimited JSON, one header record then one episode
// record per line. Numbers carry 9 significant digits.
// ---------------------------------------------------------------------------

struct DatasetHeader {
  int format_version = 1;
  int maze_id = 0;
  int W = 0, H = 0;
  char policy = 'A';
  int K = 5;
  NoiseSpec noise;
  int episodes = 0;
  int steps = 0;
  std::uint64_t seed = 0;
};

inline double round_sig9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::strtod(buf, nullptr);
}

namespace detail {

inline nlohmann::json triples_to_json(const std::vector<State>& xs) {
  nlohmann::json a = nlohmann::json::array();
  for (const State& s : xs) a.push_back({round_sig9(s.x), round_sig9(s.y), round_sig9(s.theta)});
  return a;
}
inline nlohmann::json actions_to_json(const std::vector<Action>& xs) {
  nlohmann::json a = nlohmann::json::array();
  for (const Action& s : xs) a.push_back({round_sig9(s.dx), round_sig9(s.dy), round_sig9(s.dth)});
  return a;
}
inline nlohmann::json obs_to_json(const std::vector<Observation>& xs) {
  nlohmann::json a = nlohmann::json::array();
  for (const Observation& o : xs) {
    nlohmann::json row = nlohmann::json::array();
    for (double d : o) row.push_back(round_sig9(d));
    a.push_back(row);
  }
  return a;
}

}  // namespace detail

inline void save_dataset(const std::string& path, const DatasetHeader& hd,
                         const std::vector<Episode>& eps) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open dataset for writing: " + path);
  nlohmann::json header = {
      {"format_version", hd.format_version},
      {"kind", "dpf-dataset"},
      {"maze", hd.maze_id},
      {"W", hd.W},
      {"H", hd.H},
      {"policy", std::string(1, hd.policy)},
      {"K", hd.K},
      {"sigma_odom", hd.noise.sigma_odom},
      {"sigma_obs", hd.noise.sigma_obs},
      {"sigma_act", hd.noise.sigma_act},
      {"episodes", hd.episodes},
      {"steps", hd.steps},
      {"seed", hd.seed},
  };
  os << header.dump() << "\n";
  for (const Episode& ep : eps) {
    nlohmann::json rec = {
        {"maze_id", ep.maze_id},
        {"policy", std::string(1, ep.policy)},
        {"T", ep.states.size()},
        {"states", detail::triples_to_json(ep.states)},
        {"actions", detail::actions_to_json(ep.actions)},
        {"observations", detail::obs_to_json(ep.observations)},
    };
    os << rec.dump() << "\n";
  }
  if (!os) throw DataError("failed writing dataset: " + path);
}

inline std::pair<DatasetHeader, std::vector<Episode>> load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open dataset: " + path);
  std::string line;
  if (!std::getline(is, line)) throw DataError("empty dataset file: " + path);
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("kind", "") != "dpf-dataset") {
    throw DataError("not a dpf dataset: " + path);
  }
  DatasetHeader hd;
  hd.format_version = header.value("format_version", 1);
  hd.maze_id = header.value("maze", 0);
  hd.W = header.value("W", 0);
  hd.H = header.value("H", 0);
  hd.policy = header.value("policy", std::string("A"))[0];
  hd.K = header.value("K", 5);
  hd.noise.sigma_odom = header.value("sigma_odom", 0.1);
  hd.noise.sigma_obs = header.value("sigma_obs", 0.1);
  hd.noise.sigma_act = header.value("sigma_act", 0.05);
  hd.episodes = header.value("episodes", 0);
  hd.steps = header.value("steps", 0);
  hd.seed = header.value("seed", std::uint64_t{0});

  std::vector<Episode> eps;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
    if (rec.is_discarded()) throw DataError("bad episode record in " + path);
    Episode ep;
    ep.maze_id = rec.value("maze_id", hd.maze_id);
    ep.policy = rec.value("policy", std::string(1, hd.policy))[0];
    for (const auto& s : rec["states"]) ep.states.push_back({s[0], s[1], s[2]});
    for (const auto& a : rec["actions"]) ep.actions.push_back({a[0], a[1], a[2]});
    for (const auto& o : rec["observations"]) {
      ep.observations.push_back(o.get<Observation>());
    }
    if (ep.states.size() != ep.actions.size() || ep.states.size() != ep.observations.size()) {
      throw DataError("episode with mismatched sequence lengths in " + path);
    }
    eps.push_back(std::move(ep));
  }
  return {hd, std::move(eps)};
}

}  // namespace dpf
