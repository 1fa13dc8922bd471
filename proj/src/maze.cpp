#include "repdib/maze.hpp"

#include <algorithm>
#include <deque>
#include <sstream>

namespace repdib {

const char* to_string(MazeKind k) {
  switch (k) {
    case MazeKind::grid: return "grid";
    case MazeKind::spiral: return "spiral";
    default: return "loop";
  }
}

const char* to_string(ObsMode m) {
  return m == ObsMode::onehot ? "onehot" : "frame";
}

const char* to_string(NoiseMode m) {
  switch (m) {
    case NoiseMode::none: return "none";
    case NoiseMode::image: return "image";
    default: return "video";
  }
}

namespace {

std::pair<int, int> edge_key(int a, int b) {
  return {std::min(a, b), std::max(a, b)};
}

// Inward clockwise spiral visiting all 36 cells, starting at (0, 0). The
// corridor is the sequence of consecutive cells; every other adjacency is a
// wall.
std::vector<int> spiral_path() {
  const int n = MazeLayout::kSize;
  std::vector<std::vector<bool>> seen(n, std::vector<bool>(n, false));
  std::vector<int> path;
  int r = 0, c = 0;
  // direction order: right, down, left, up
  const int dr[4] = {0, 1, 0, -1};
  const int dc[4] = {1, 0, -1, 0};
  int dir = 0;
  for (int i = 0; i < n * n; ++i) {
    path.push_back(MazeLayout::cell_id(r, c));
    seen[r][c] = true;
    int nr = r + dr[dir], nc = c + dc[dir];
    if (!MazeLayout::in_bounds(nr, nc) || seen[nr][nc]) {
      dir = (dir + 1) % 4;
      nr = r + dr[dir];
      nc = c + dc[dir];
    }
    if (i + 1 < n * n) {
      r = nr;
      c = nc;
    }
  }
  return path;
}

}  // namespace

MazeLayout MazeLayout::make(MazeKind kind) {
  MazeLayout layout;
  layout.kind = kind;
  if (kind == MazeKind::grid) return layout;

  const std::vector<int> path = spiral_path();
  std::set<std::pair<int, int>> corridor;
  for (std::size_t i = 0; i + 1 < path.size(); ++i)
    corridor.insert(edge_key(path[i], path[i + 1]));

  // every lattice adjacency not on the corridor is a wall
  for (int r = 0; r < kSize; ++r)
    for (int c = 0; c < kSize; ++c) {
      const int id = cell_id(r, c);
      if (r + 1 < kSize) {
        auto e = edge_key(id, cell_id(r + 1, c));
        if (!corridor.count(e)) layout.walls.insert(e);
      }
      if (c + 1 < kSize) {
        auto e = edge_key(id, cell_id(r, c + 1));
        if (!corridor.count(e)) layout.walls.insert(e);
      }
    }

  if (kind == MazeKind::loop) {
    // opening at the bottom-right corner of the spiral wall: the corridor
    // cells (4,4) and (5,4) become connected, closing a single loop
    layout.walls.erase(edge_key(cell_id(4, 4), cell_id(5, 4)));
  }
  return layout;
}

bool MazeLayout::wall_between(int cell_a, int cell_b) const {
  return walls.count(edge_key(cell_a, cell_b)) > 0;
}

bool MazeLayout::blocked(int row, int col, Action a) const {
  int nr = row, nc = col;
  switch (a) {
    case Action::up: --nr; break;
    case Action::down: ++nr; break;
    case Action::left: --nc; break;
    case Action::right: ++nc; break;
  }
  if (!in_bounds(nr, nc)) return true;
  return wall_between(cell_id(row, col), cell_id(nr, nc));
}

std::vector<std::vector<int>> MazeLayout::adjacency() const {
  std::vector<std::vector<int>> adj(kCells);
  for (int r = 0; r < kSize; ++r)
    for (int c = 0; c < kSize; ++c)
      for (Action a : {Action::up, Action::down, Action::left, Action::right}) {
        if (blocked(r, c, a)) continue;
        int nr = r, nc = c;
        switch (a) {
          case Action::up: --nr; break;
          case Action::down: ++nr; break;
          case Action::left: --nc; break;
          case Action::right: ++nc; break;
        }
        adj[cell_id(r, c)].push_back(cell_id(nr, nc));
      }
  return adj;
}

std::string MazeLayout::dump() const {
  std::ostringstream os;
  os << "kind: " << to_string(kind) << "\n";
  os << "size: " << kSize << " " << kSize << "\n";
  // one picture row per grid row: cell dots with vertical walls between,
  // then a line of horizontal walls below
  for (int r = 0; r < kSize; ++r) {
    std::string cells, below;
    for (int c = 0; c < kSize; ++c) {
      cells += '.';
      if (c + 1 < kSize)
        cells += wall_between(cell_id(r, c), cell_id(r, c + 1)) ? '|' : ' ';
      if (r + 1 < kSize) {
        below += wall_between(cell_id(r, c), cell_id(r + 1, c)) ? '-' : ' ';
        if (c + 1 < kSize) below += ' ';
      }
    }
    os << cells << "\n";
    if (r + 1 < kSize) os << below << "\n";
  }
  os << "walls:\n";
  for (const auto& [a, b] : walls) {
    os << "(" << a / kSize << "," << a % kSize << ")-(" << b / kSize << ","
       << b % kSize << ")\n";
  }
  return os.str();
}

std::vector<int> bfs_distances(const MazeLayout& layout, int from) {
  std::vector<int> dist(MazeLayout::kCells, -1);
  std::deque<int> queue{from};
  dist[from] = 0;
  const auto adj = layout.adjacency();
  while (!queue.empty()) {
    const int cur = queue.front();
    queue.pop_front();
    for (int nb : adj[cur])
      if (dist[nb] < 0) {
        dist[nb] = dist[cur] + 1;
        queue.push_back(nb);
      }
  }
  return dist;
}

int bfs_distance(const MazeLayout& layout, int from, int to) {
  return bfs_distances(layout, from)[to];
}

double optimal_return(const MazeLayout& layout, int start, int goal) {
  if (start == goal) return 0.0;
  const int d = bfs_distance(layout, start, goal);
  if (d < 0) throw ContractError("optimal_return: goal unreachable");
  // the arriving move pays 0, the d - 1 moves before it pay -1 each
  return -static_cast<double>(d - 1);
}

namespace {

void fill_cell(std::vector<double>& frame, int row, int col, double r,
               double g, double b, int margin) {
  const int side = ObsSpec::kFrameSide;
  const int px = ObsSpec::kCellPixels;
  const int plane = side * side;
  for (int y = row * px + margin; y < (row + 1) * px - margin; ++y)
    for (int x = col * px + margin; x < (col + 1) * px - margin; ++x) {
      frame[0 * plane + y * side + x] = r;
      frame[1 * plane + y * side + x] = g;
      frame[2 * plane + y * side + x] = b;
    }
}

void paint(std::vector<double>& frame, int y, int x, double r, double g,
           double b) {
  const int side = ObsSpec::kFrameSide;
  const int plane = side * side;
  frame[0 * plane + y * side + x] = r;
  frame[1 * plane + y * side + x] = g;
  frame[2 * plane + y * side + x] = b;
}

// Walls and the outer border in blue, agent red, goal green, floor light grey.
std::vector<double> render_frame(const MazeState& state,
                                 const MazeLayout& layout) {
  const int side = ObsSpec::kFrameSide;
  const int px = ObsSpec::kCellPixels;
  std::vector<double> frame(3 * side * side, 0.0);
  for (int r = 0; r < MazeLayout::kSize; ++r)
    for (int c = 0; c < MazeLayout::kSize; ++c)
      fill_cell(frame, r, c, 0.85, 0.85, 0.85, 0);

  const double wr = 0.1, wg = 0.1, wb = 0.9;
  for (int i = 0; i < side; ++i) {
    paint(frame, 0, i, wr, wg, wb);
    paint(frame, side - 1, i, wr, wg, wb);
    paint(frame, i, 0, wr, wg, wb);
    paint(frame, i, side - 1, wr, wg, wb);
  }
  for (const auto& [a, b] : layout.walls) {
    const int ar = a / MazeLayout::kSize, ac = a % MazeLayout::kSize;
    const int br = b / MazeLayout::kSize, bc = b % MazeLayout::kSize;
    if (ar == br) {
      // vertical wall between horizontally adjacent cells
      const int x = bc * px;
      for (int y = ar * px; y < (ar + 1) * px; ++y) {
        paint(frame, y, x - 1, wr, wg, wb);
        paint(frame, y, x, wr, wg, wb);
      }
    } else {
      const int y = br * px;
      for (int x = ac * px; x < (ac + 1) * px; ++x) {
        paint(frame, y - 1, x, wr, wg, wb);
        paint(frame, y, x, wr, wg, wb);
      }
    }
  }

  fill_cell(frame, state.goal_row, state.goal_col, 0.1, 0.9, 0.1, 2);
  fill_cell(frame, state.row, state.col, 0.9, 0.1, 0.1, 2);
  return frame;
}

}  // namespace

std::vector<double> render(const MazeState& state, const MazeLayout& layout,
                           const ObsSpec& spec) {
  std::vector<double> obs;
  if (spec.mode == ObsMode::onehot) {
    obs.assign(MazeLayout::kCells, 0.0);
    obs[state.cell()] = 1.0;
  } else {
    obs = render_frame(state, layout);
  }
  if (spec.noise != NoiseMode::none) {
    const int n = spec.noise_dim();
    if (!spec.active) {
      obs.insert(obs.end(), n, 0.0);
    } else {
      // image mode: one tile per episode; video mode: re-rolled per step
      const std::uint64_t stream =
          spec.noise == NoiseMode::video
              ? mix_seed(state.noise_seed, static_cast<std::uint64_t>(state.step))
              : mix_seed(state.noise_seed, 0);
      Rng noise(stream);
      for (int i = 0; i < n; ++i) obs.push_back(noise.uniform());
    }
  }
  return obs;
}

MazeState MazeEnv::reset(GoalRule rule, Rng& rng) const {
  MazeState s;
  if (rule == GoalRule::center) {
    s.goal_row = kCenterRow;
    s.goal_col = kCenterCol;
  } else {
    const auto& g = kTrainingGoals[rng.uniform_int(kTrainingGoals.size())];
    s.goal_row = g.first;
    s.goal_col = g.second;
  }
  // uniform over free cells, excluding the goal
  while (true) {
    const int cell = static_cast<int>(rng.uniform_int(MazeLayout::kCells));
    s.row = cell / MazeLayout::kSize;
    s.col = cell % MazeLayout::kSize;
    if (cell != s.goal_cell()) break;
  }
  s.noise_seed = rng.raw();
  return s;
}

MazeState MazeEnv::reset_at(int row, int col) const {
  MazeState s;
  s.row = row;
  s.col = col;
  s.goal_row = kCenterRow;
  s.goal_col = kCenterCol;
  s.noise_seed = 0;
  return s;
}

StepResult MazeEnv::step(MazeState& state, Action a) const {
  if (state.finished())
    throw ContractError("maze: step() after the episode ended");
  if (!layout.blocked(state.row, state.col, a)) {
    switch (a) {
      case Action::up: --state.row; break;
      case Action::down: ++state.row; break;
      case Action::left: --state.col; break;
      case Action::right: ++state.col; break;
    }
  }
  ++state.step;
  StepResult res;
  if (state.cell() == state.goal_cell()) {
    res.reward = 0.0;
    res.reached_goal = true;
    state.reached_goal = true;
  } else {
    res.reward = -1.0;
    if (state.step >= horizon) {
      res.truncated = true;
      state.truncated = true;
    }
  }
  return res;
}

}  // namespace repdib
