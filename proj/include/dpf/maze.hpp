#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <queue>
#include <string>
#include <vector>

#include "dpf/errors.hpp"
#include "dpf/rng.hpp"
#include "dpf/tensor.hpp"

namespace dpf {

struct Vec2 {
  double x = 0, y = 0;
};

/// One axis-aligned unit wall segment on a cell edge.
struct WallSpec {
  int x = 0;
  int y = 0;
  bool vertical = false;  // vertical: from (x,y) to (x,y+1); horizontal: (x,y) to (x+1,y)
};

struct Segment {
  double x0, y0, x1, y1;
};

/// Grid world of W x H unit cells. Walls live on cell edges; the outer
/// boundary is always closed. Every cell is free space; walls have zero
/// thickness.
class Maze {
 public:
  Maze(int width, int height) : W_(width), H_(height) {
    if (width < 1 || height < 1) throw DataError("maze dimensions must be positive");
    vwall_.assign(static_cast<std::size_t>(W_ + 1) * H_, 0);
    hwall_.assign(static_cast<std::size_t>(W_) * (H_ + 1), 0);
    for (int y = 0; y < H_; ++y) {
      set_vwall(0, y);
      set_vwall(W_, y);
    }
    for (int x = 0; x < W_; ++x) {
      set_hwall(x, 0);
      set_hwall(x, H_);
    }
  }

  int width() const { return W_; }
  int height() const { return H_; }
  double diagonal() const { return std::hypot(static_cast<double>(W_), static_cast<double>(H_)); }

  bool has_vwall(int x, int y) const {
    return x >= 0 && x <= W_ && y >= 0 && y < H_ && vwall_[idx_v(x, y)] != 0;
  }
  bool has_hwall(int x, int y) const {
    return x >= 0 && x < W_ && y >= 0 && y <= H_ && hwall_[idx_h(x, y)] != 0;
  }
  void set_vwall(int x, int y) { vwall_[idx_v(x, y)] = 1; }
  void set_hwall(int x, int y) { hwall_[idx_h(x, y)] = 1; }
  void clear_vwall(int x, int y) { vwall_[idx_v(x, y)] = 0; }
  void clear_hwall(int x, int y) { hwall_[idx_h(x, y)] = 0; }

  bool in_bounds(double x, double y) const {
    return x > 0.0 && x < static_cast<double>(W_) && y > 0.0 && y < static_cast<double>(H_);
  }

  /// True if cells (x,y) and its neighbor in direction d share an open edge.
  /// d: 0=+x, 1=+y, 2=-x, 3=-y.
  bool open(int x, int y, int d) const {
    switch (d) {
      case 0: return x + 1 < W_ && !has_vwall(x + 1, y);
      case 1: return y + 1 < H_ && !has_hwall(x, y + 1);
      case 2: return x > 0 && !has_vwall(x, y);
      case 3: return y > 0 && !has_hwall(x, y);
    }
    return false;
  }

  std::vector<Segment> wall_segments() const {
    std::vector<Segment> segs;
    for (int x = 0; x <= W_; ++x)
      for (int y = 0; y < H_; ++y)
        if (has_vwall(x, y)) segs.push_back({double(x), double(y), double(x), double(y + 1)});
    for (int x = 0; x < W_; ++x)
      for (int y = 0; y <= H_; ++y)
        if (has_hwall(x, y)) segs.push_back({double(x), double(y), double(x + 1), double(y)});
    return segs;
  }

  /// Exact distance from (px,py) along direction (cos phi, sin phi) to the
  /// nearest wall, via grid traversal over edge crossings.
  double ray_distance(double px, double py, double phi) const {
    double dx = std::cos(phi), dy = std::sin(phi);
    double max_t = diagonal() + 1.0;
    double t_max_x, t_delta_x, t_max_y, t_delta_y;
    int step_x = 0, step_y = 0;
    if (dx > 0) {
      step_x = 1;
      t_delta_x = 1.0 / dx;
      t_max_x = (std::floor(px) + 1.0 - px) / dx;
    } else if (dx < 0) {
      step_x = -1;
      t_delta_x = -1.0 / dx;
      t_max_x = (px - std::floor(px)) / -dx;
      if (px == std::floor(px)) t_max_x = 0.0;
    } else {
      t_delta_x = t_max_x = max_t * 2;
    }
    if (dy > 0) {
      step_y = 1;
      t_delta_y = 1.0 / dy;
      t_max_y = (std::floor(py) + 1.0 - py) / dy;
    } else if (dy < 0) {
      step_y = -1;
      t_delta_y = -1.0 / dy;
      t_max_y = (py - std::floor(py)) / -dy;
      if (py == std::floor(py)) t_max_y = 0.0;
    } else {
      t_delta_y = t_max_y = max_t * 2;
    }
    int cx = static_cast<int>(std::floor(px));
    int cy = static_cast<int>(std::floor(py));
    while (true) {
      if (t_max_x <= t_max_y) {
        double t = t_max_x;
        int line_x = cx + (step_x > 0 ? 1 : 0);
        double yhit = py + t * dy;
        if (crosses_vwall(line_x, yhit)) return t;
        cx += step_x;
        t_max_x += t_delta_x;
        if (t > max_t) return max_t;
      } else {
        double t = t_max_y;
        int line_y = cy + (step_y > 0 ? 1 : 0);
        double xhit = px + t * dx;
        if (crosses_hwall(xhit, line_y)) return t;
        cy += step_y;
        t_max_y += t_delta_y;
        if (t > max_t) return max_t;
      }
    }
  }

  /// First wall crossing along the segment (x0,y0)->(x1,y1), as a parameter
  /// t in [0,1], or a value > 1 if the segment is clear. Brute force over all
  /// wall segments; independent of the ray-casting traversal above.
  double first_hit(double x0, double y0, double x1, double y1) const {
    double dx = x1 - x0, dy = y1 - y0;
    double best = 2.0;
    for (int x = 0; x <= W_; ++x) {
      if (dx == 0.0) break;
      double t = (static_cast<double>(x) - x0) / dx;
      if (t < 0.0 || t > 1.0 || t >= best) continue;
      double y = y0 + t * dy;
      int cell = static_cast<int>(std::floor(y));
      if (has_vwall(x, cell) || (y == std::floor(y) && has_vwall(x, cell - 1))) best = t;
    }
    for (int y = 0; y <= H_; ++y) {
      if (dy == 0.0) break;
      double t = (static_cast<double>(y) - y0) / dy;
      if (t < 0.0 || t > 1.0 || t >= best) continue;
      double x = x0 + t * dx;
      int cell = static_cast<int>(std::floor(x));
      if (has_hwall(cell, y) || (x == std::floor(x) && has_hwall(cell - 1, y))) best = t;
    }
    return best;
  }

  /// BFS reachability from cell (0,0); throws on sealed-off cells.
  void check_connected() const {
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(W_) * H_, 0);
    std::queue<std::pair<int, int>> q;
    q.push({0, 0});
    seen[0] = 1;
    int count = 1;
    while (!q.empty()) {
      auto [x, y] = q.front();
      q.pop();
      const int dxs[4] = {1, 0, -1, 0};
      const int dys[4] = {0, 1, 0, -1};
      for (int d = 0; d < 4; ++d) {
        if (!open(x, y, d)) continue;
        int nx = x + dxs[d], ny = y + dys[d];
        std::size_t id = static_cast<std::size_t>(nx) * H_ + ny;
        if (!seen[id]) {
          seen[id] = 1;
          ++count;
          q.push({nx, ny});
        }
      }
    }
    if (count != W_ * H_) throw DataError("disconnected free space in maze");
  }

 private:
  std::size_t idx_v(int x, int y) const { return static_cast<std::size_t>(x) * H_ + y; }
  std::size_t idx_h(int x, int y) const { return static_cast<std::size_t>(x) * (H_ + 1) + y; }

  bool crosses_vwall(int line_x, double y) const {
    int cell = static_cast<int>(std::floor(y));
    if (y == std::floor(y)) {
      // Corner crossing: blocked if either adjacent segment is a wall.
      return has_vwall(line_x, cell) || has_vwall(line_x, cell - 1);
    }
    return has_vwall(line_x, cell);
  }
  bool crosses_hwall(double x, int line_y) const {
    int cell = static_cast<int>(std::floor(x));
    if (x == std::floor(x)) {
      return has_hwall(cell, line_y) || has_hwall(cell - 1, line_y);
    }
    return has_hwall(cell, line_y);
  }

  int W_, H_;
  std::vector<std::uint8_t> vwall_;
  std::vector<std::uint8_t> hwall_;
};

namespace detail {

/// Depth-first carving of a perfect maze, then opening most dead ends to
/// create loops (the local symmetries that make global localization
/// ambiguous).
inline Maze generate_maze(int W, int H, std::uint64_t seed, double braid_prob) {
  Maze m(W, H);
  for (int x = 1; x < W; ++x)
    for (int y = 0; y < H; ++y) m.set_vwall(x, y);
  for (int x = 0; x < W; ++x)
    for (int y = 1; y < H; ++y) m.set_hwall(x, y);

  RngStream rng(seed);
  std::vector<std::uint8_t> visited(static_cast<std::size_t>(W) * H, 0);
  std::vector<std::pair<int, int>> stack{{0, 0}};
  visited[0] = 1;
  const int dxs[4] = {1, 0, -1, 0};
  const int dys[4] = {0, 1, 0, -1};
  while (!stack.empty()) {
    auto [x, y] = stack.back();
    int choices[4];
    int nc = 0;
    for (int d = 0; d < 4; ++d) {
      int nx = x + dxs[d], ny = y + dys[d];
      if (nx < 0 || nx >= W || ny < 0 || ny >= H) continue;
      if (!visited[static_cast<std::size_t>(nx) * H + ny]) choices[nc++] = d;
    }
    if (nc == 0) {
      stack.pop_back();
      continue;
    }
    int d = choices[rng.index(static_cast<std::size_t>(nc))];
    int nx = x + dxs[d], ny = y + dys[d];
    switch (d) {
      case 0: m.clear_vwall(x + 1, y); break;
      case 1: m.clear_hwall(x, y + 1); break;
      case 2: m.clear_vwall(x, y); break;
      case 3: m.clear_hwall(x, y); break;
    }
    visited[static_cast<std::size_t>(nx) * H + ny] = 1;
    stack.push_back({nx, ny});
  }

  // Braid: open a random closed interior edge of each dead-end cell.
  for (int x = 0; x < W; ++x) {
    for (int y = 0; y < H; ++y) {
      int open_count = 0;
      for (int d = 0; d < 4; ++d) open_count += m.open(x, y, d) ? 1 : 0;
      if (open_count != 1 || !rng.bernoulli(braid_prob)) continue;
      int closed[4];
      int nc = 0;
      for (int d = 0; d < 4; ++d) {
        int nx = x + dxs[d], ny = y + dys[d];
        if (nx < 0 || nx >= W || ny < 0 || ny >= H) continue;
        if (!m.open(x, y, d)) closed[nc++] = d;
      }
      if (nc == 0) continue;
      int d = closed[rng.index(static_cast<std::size_t>(nc))];
      switch (d) {
        case 0: m.clear_vwall(x + 1, y); break;
        case 1: m.clear_hwall(x, y + 1); break;
        case 2: m.clear_vwall(x, y); break;
        case 3: m.clear_hwall(x, y); break;
      }
    }
  }
  m.check_connected();
  return m;
}

}  // namespace detail

/// Preset mazes 1..3 (10x5, 15x9, 20x13) with fixed generator seeds.
inline Maze build_maze(int preset) {
  switch (preset) {
    case 1: return detail::generate_maze(10, 5, 101, 0.7);
    case 2: return detail::generate_maze(15, 9, 202, 0.7);
    case 3: return detail::generate_maze(20, 13, 303, 0.7);
  }
  throw DataError("unknown maze preset: " + std::to_string(preset));
}

/// Maze from an explicit wall list; validates indices and connectivity.
inline Maze build_maze(int width, int height, const std::vector<WallSpec>& walls) {
  Maze m(width, height);
  for (const WallSpec& w : walls) {
    if (w.vertical) {
      if (w.x < 0 || w.x > width || w.y < 0 || w.y >= height) {
        throw DataError("wall segment out of range");
      }
      m.set_vwall(w.x, w.y);
    } else {
      if (w.x < 0 || w.x >= width || w.y < 0 || w.y > height) {
        throw DataError("wall segment out of range");
      }
      m.set_hwall(w.x, w.y);
    }
  }
  m.check_connected();
  return m;
}

}  // namespace dpf
