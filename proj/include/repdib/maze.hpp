#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "repdib/rng.hpp"
#include "repdib/tensor.hpp"

namespace repdib {

enum class MazeKind { grid, spiral, loop };
enum class ObsMode { onehot, frame };
enum class NoiseMode { none, image, video };

const char* to_string(MazeKind k);
const char* to_string(ObsMode m);
const char* to_string(NoiseMode m);

enum class Action : int { up = 0, down = 1, left = 2, right = 3 };

// 6x6 maze. Walls are blocked edges between orthogonally adjacent cells; the
// outer boundary is implicit. Cell ids are row-major: id = row * 6 + col.
struct MazeLayout {
  static constexpr int kSize = 6;
  static constexpr int kCells = kSize * kSize;

  MazeKind kind = MazeKind::grid;
  std::set<std::pair<int, int>> walls;  // normalized (min_id, max_id) pairs

  static MazeLayout make(MazeKind kind);

  static int cell_id(int row, int col) { return row * kSize + col; }
  static bool in_bounds(int row, int col) {
    return row >= 0 && row < kSize && col >= 0 && col < kSize;
  }

  bool wall_between(int cell_a, int cell_b) const;
  // True when moving from (row, col) in direction a hits a wall or boundary.
  bool blocked(int row, int col, Action a) const;

  // Undirected adjacency honoring walls, indexed by cell id.
  std::vector<std::vector<int>> adjacency() const;

  // Golden-file dump: ASCII picture plus an explicit sorted wall-edge list.
  std::string dump() const;
};

// Breadth-first distances from a source cell over the layout graph.
std::vector<int> bfs_distances(const MazeLayout& layout, int from);
int bfs_distance(const MazeLayout& layout, int from, int to);

// Return collected by an optimal policy walking from start to goal: the final
// arriving step pays 0 and every earlier step pays -1.
double optimal_return(const MazeLayout& layout, int start, int goal);

struct MazeState {
  int row = 0, col = 0;
  int goal_row = 0, goal_col = 0;
  int step = 0;
  std::uint64_t noise_seed = 0;
  bool reached_goal = false;
  bool truncated = false;

  bool finished() const { return reached_goal || truncated; }
  int cell() const { return MazeLayout::cell_id(row, col); }
  int goal_cell() const { return MazeLayout::cell_id(goal_row, goal_col); }
};

// Observation layout parameters. The exogenous block is appended to the flat
// observation whenever the noise mode is not none; while `active` is off the
// block renders as zeros so the width never changes within a run.
struct ObsSpec {
  ObsMode mode = ObsMode::onehot;
  NoiseMode noise = NoiseMode::none;
  bool active = false;

  static constexpr int kCellPixels = 8;
  static constexpr int kFrameSide = MazeLayout::kSize * kCellPixels;  // 48
  static constexpr int kNoiseSide = 16;

  int clean_dim() const {
    return mode == ObsMode::onehot ? MazeLayout::kCells
                                   : 3 * kFrameSide * kFrameSide;
  }
  int noise_dim() const {
    return noise == NoiseMode::none ? 0 : kNoiseSide * kNoiseSide;
  }
  int dim() const { return clean_dim() + noise_dim(); }
};

// Deterministic rendering: the clean block is a function of (state cell,
// goal, layout); the exogenous block depends only on the episode noise seed,
// plus the step count in video mode.
std::vector<double> render(const MazeState& state, const MazeLayout& layout,
                           const ObsSpec& spec);

enum class GoalRule { training_set, center };

struct StepResult {
  double reward = 0.0;
  bool reached_goal = false;
  bool truncated = false;
};

// The maze as a value object: layout + observation spec + horizon. Episode
// state lives in MazeState so environments can be copied and stepped freely.
struct MazeEnv {
  MazeLayout layout;
  ObsSpec obs;
  int horizon = 200;

  // Evaluation goal: the innermost cell of the spiral corridor, one of the
  // four central cells.
  static constexpr int kCenterRow = 3;
  static constexpr int kCenterCol = 2;
  // A small finite set of training goals: the central 2x2 block.
  static constexpr std::array<std::pair<int, int>, 4> kTrainingGoals{
      {{2, 2}, {2, 3}, {3, 2}, {3, 3}}};

  MazeEnv() : layout(MazeLayout::make(MazeKind::grid)) {}
  MazeEnv(MazeKind kind, ObsSpec spec, int horizon_frames)
      : layout(MazeLayout::make(kind)), obs(spec), horizon(horizon_frames) {}

  MazeState reset(GoalRule rule, Rng& rng) const;
  // Deterministic reset used by evaluation: fixed start, center goal.
  MazeState reset_at(int row, int col) const;

  StepResult step(MazeState& state, Action a) const;

  std::vector<double> observe(const MazeState& state) const {
    return render(state, layout, obs);
  }
};

}  // namespace repdib
