#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "helpers.hpp"
#include "repdib/maze.hpp"

using namespace repdib;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  REQUIRE(is.good());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

int degree(const std::vector<std::vector<int>>& adj, int cell) {
  return static_cast<int>(adj[cell].size());
}

// Greedy BFS-optimal walk; returns the episode return.
double rollout_optimal(const MazeEnv& env, MazeState s) {
  double ret = 0.0;
  while (!s.finished()) {
    const auto dist = bfs_distances(env.layout, s.goal_cell());
    Action best = Action::up;
    int best_d = std::numeric_limits<int>::max();
    for (Action a : {Action::up, Action::down, Action::left, Action::right}) {
      if (env.layout.blocked(s.row, s.col, a)) continue;
      int nr = s.row + (a == Action::down) - (a == Action::up);
      int nc = s.col + (a == Action::right) - (a == Action::left);
      if (dist[MazeLayout::cell_id(nr, nc)] < best_d) {
        best_d = dist[MazeLayout::cell_id(nr, nc)];
        best = a;
      }
    }
    ret += env.step(s, best).reward;
  }
  return ret;
}

}  // namespace

TEST_CASE("all layouts are fully connected") {
  for (auto kind : {MazeKind::grid, MazeKind::spiral, MazeKind::loop}) {
    auto layout = MazeLayout::make(kind);
    auto dist = bfs_distances(layout, 0);
    for (int c = 0; c < MazeLayout::kCells; ++c) CHECK(dist[c] >= 0);
  }
}

TEST_CASE("grid has no walls and full lattice degrees") {
  auto layout = MazeLayout::make(MazeKind::grid);
  CHECK(layout.walls.empty());
  auto adj = layout.adjacency();
  for (int r = 1; r < 5; ++r)
    for (int c = 1; c < 5; ++c)
      CHECK(degree(adj, MazeLayout::cell_id(r, c)) == 4);
  CHECK(degree(adj, 0) == 2);
}

TEST_CASE("spiral is a single path: two endpoints, the rest degree two") {
  auto layout = MazeLayout::make(MazeKind::spiral);
  auto adj = layout.adjacency();
  int deg1 = 0, deg2 = 0;
  for (int c = 0; c < MazeLayout::kCells; ++c) {
    const int d = degree(adj, c);
    if (d == 1) ++deg1;
    if (d == 2) ++deg2;
  }
  CHECK(deg1 == 2);
  CHECK(deg2 == MazeLayout::kCells - 2);
  // endpoints: outer corner (0,0) and the innermost cell (3,2)
  CHECK(degree(adj, MazeLayout::cell_id(0, 0)) == 1);
  CHECK(degree(adj, MazeLayout::cell_id(3, 2)) == 1);
  // edge count of a path over 36 nodes
  int edges = 0;
  for (int c = 0; c < MazeLayout::kCells; ++c) edges += degree(adj, c);
  CHECK(edges / 2 == MazeLayout::kCells - 1);
}

TEST_CASE("loop contains exactly one independent cycle") {
  auto layout = MazeLayout::make(MazeKind::loop);
  auto adj = layout.adjacency();
  int edges = 0, deg1 = 0;
  for (int c = 0; c < MazeLayout::kCells; ++c) {
    edges += degree(adj, c);
    if (degree(adj, c) == 1) ++deg1;
  }
  edges /= 2;
  // cycle-space rank: E - V + components = 1 for a connected graph
  CHECK(edges - MazeLayout::kCells + 1 == 1);

  // cells on the cycle have degree >= 2; the spiral endpoint (0,0) remains a
  // dead end feeding the loop
  CHECK(deg1 >= 1);
  std::set<std::pair<int, int>> spiral_walls =
      MazeLayout::make(MazeKind::spiral).walls;
  CHECK(spiral_walls.size() == layout.walls.size() + 1);
  // the opening is the bottom-right gap between (4,4) and (5,4)
  CHECK(spiral_walls.count({MazeLayout::cell_id(4, 4),
                            MazeLayout::cell_id(5, 4)}) == 1);
  CHECK(layout.walls.count({MazeLayout::cell_id(4, 4),
                            MazeLayout::cell_id(5, 4)}) == 0);
}

TEST_CASE("layouts match the committed golden files") {
  for (auto kind : {MazeKind::grid, MazeKind::spiral, MazeKind::loop}) {
    auto layout = MazeLayout::make(kind);
    const std::string golden = read_file(
        std::string(REPDIB_DATA_DIR) + "/layouts/" + to_string(kind) + ".txt");
    CHECK(layout.dump() == golden);
  }
}

TEST_CASE("reset is reproducible and eval goals sit at the center") {
  MazeEnv env(MazeKind::grid, {}, 200);
  Rng a(9), b(9);
  MazeState sa = env.reset(GoalRule::training_set, a);
  MazeState sb = env.reset(GoalRule::training_set, b);
  CHECK(sa.cell() == sb.cell());
  CHECK(sa.goal_cell() == sb.goal_cell());
  CHECK(sa.noise_seed == sb.noise_seed);
  CHECK(sa.step == 0);

  Rng c(1);
  MazeState se = env.reset(GoalRule::center, c);
  CHECK(se.goal_row == MazeEnv::kCenterRow);
  CHECK(se.goal_col == MazeEnv::kCenterCol);
  CHECK(se.cell() != se.goal_cell());
}

TEST_CASE("reset start cells are uniform over free cells") {
  MazeEnv env(MazeKind::grid, {}, 200);
  Rng rng(77);
  const int trials = 10000;
  std::vector<int> counts(MazeLayout::kCells, 0);
  for (int i = 0; i < trials; ++i) {
    MazeState s = env.reset(GoalRule::center, rng);
    ++counts[s.cell()];
  }
  const int goal = MazeLayout::cell_id(MazeEnv::kCenterRow, MazeEnv::kCenterCol);
  CHECK(counts[goal] == 0);
  const double expected = double(trials) / (MazeLayout::kCells - 1);
  double chi2 = 0.0;
  for (int c = 0; c < MazeLayout::kCells; ++c) {
    if (c == goal) continue;
    chi2 += (counts[c] - expected) * (counts[c] - expected) / expected;
  }
  CHECK(chi2 < repdib::testing::chi2_critical_p01(MazeLayout::kCells - 2));
}

TEST_CASE("step moves, rewards and terminates per the task rules") {
  MazeEnv env(MazeKind::grid, {}, 200);
  MazeState s = env.reset_at(0, 0);

  StepResult r = env.step(s, Action::right);
  CHECK(s.row == 0);
  CHECK(s.col == 1);
  CHECK(r.reward == -1.0);
  CHECK_FALSE(r.reached_goal);

  // walk to one cell above the goal, then step onto it
  s = env.reset_at(MazeEnv::kCenterRow - 1, MazeEnv::kCenterCol);
  r = env.step(s, Action::down);
  CHECK(r.reward == 0.0);
  CHECK(r.reached_goal);
  CHECK(s.finished());
  CHECK_THROWS_AS(env.step(s, Action::up), ContractError);
}

TEST_CASE("blocked moves leave the agent in place") {
  MazeEnv env(MazeKind::spiral, {}, 200);
  MazeState s = env.reset_at(0, 0);
  // (0,0)-(1,0) is a spiral wall; the move is absorbed, reward still -1
  StepResult r = env.step(s, Action::down);
  CHECK(s.row == 0);
  CHECK(s.col == 0);
  CHECK(r.reward == -1.0);

  MazeState b = env.reset_at(0, 0);
  StepResult rb = env.step(b, Action::up);  // boundary
  CHECK(b.row == 0);
  CHECK(rb.reward == -1.0);
}

TEST_CASE("episodes truncate at the horizon with a separate flag") {
  MazeEnv env(MazeKind::grid, {}, 5);
  MazeState s = env.reset_at(0, 0);
  StepResult last;
  for (int i = 0; i < 5; ++i) last = env.step(s, Action::up);  // bump the wall
  CHECK(last.truncated);
  CHECK_FALSE(last.reached_goal);
  CHECK(s.truncated);
  CHECK_FALSE(s.reached_goal);
}

TEST_CASE("optimal returns equal the BFS oracle on sampled pairs") {
  Rng rng(5);
  for (auto kind : {MazeKind::grid, MazeKind::spiral, MazeKind::loop}) {
    MazeEnv env(kind, {}, 500);
    for (int trial = 0; trial < 20; ++trial) {
      MazeState s = env.reset(GoalRule::training_set, rng);
      const double want = optimal_return(env.layout, s.cell(), s.goal_cell());
      CHECK(rollout_optimal(env, s) == want);
    }
  }
}

TEST_CASE("onehot rendering uses row-major indexing") {
  MazeEnv env(MazeKind::grid, {}, 200);
  MazeState s = env.reset_at(2, 3);
  auto obs = env.observe(s);
  CHECK(obs.size() == 36);
  for (int i = 0; i < 36; ++i) CHECK(obs[i] == (i == 15 ? 1.0 : 0.0));
}

TEST_CASE("rendering is deterministic per state") {
  ObsSpec spec{ObsMode::frame, NoiseMode::none, false};
  MazeEnv env(MazeKind::loop, spec, 200);
  MazeState s = env.reset_at(1, 4);
  auto a = env.observe(s);
  auto b = env.observe(s);
  CHECK(a == b);
  CHECK(a.size() == std::size_t(3 * 48 * 48));
  for (double v : a) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("frame colors distinguish agent, goal, walls and floor") {
  ObsSpec spec{ObsMode::frame, NoiseMode::none, false};
  MazeEnv env(MazeKind::spiral, spec, 200);
  MazeState s = env.reset_at(0, 0);
  auto obs = env.observe(s);
  const int side = ObsSpec::kFrameSide, plane = side * side;
  auto px = [&](int y, int x) {
    return std::array<double, 3>{obs[y * side + x], obs[plane + y * side + x],
                                 obs[2 * plane + y * side + x]};
  };
  auto agent = px(4, 4);            // inside cell (0,0)
  auto goal = px(3 * 8 + 4, 2 * 8 + 4);  // inside the center goal cell
  auto floor = px(12, 12);          // interior of cell (1,1)
  CHECK(agent[0] > 0.5);  // red
  CHECK(goal[1] > 0.5);   // green
  CHECK(floor[0] == floor[1]);
}

TEST_CASE("exogenous noise differs across episodes but not within a state") {
  ObsSpec spec{ObsMode::onehot, NoiseMode::image, true};
  MazeEnv env(MazeKind::grid, spec, 200);
  Rng rng(3);
  MazeState a = env.reset(GoalRule::center, rng);
  MazeState b = env.reset(GoalRule::center, rng);
  b.row = a.row;
  b.col = a.col;
  b.goal_row = a.goal_row;
  b.goal_col = a.goal_col;

  auto oa = env.observe(a);
  auto ob = env.observe(b);
  CHECK(oa.size() == std::size_t(36 + 256));
  // clean region identical, exogenous region different
  for (int i = 0; i < 36; ++i) CHECK(oa[i] == ob[i]);
  bool differs = false;
  for (std::size_t i = 36; i < oa.size(); ++i)
    if (oa[i] != ob[i]) differs = true;
  CHECK(differs);

  // image mode: the tile is frozen within the episode
  MazeState a2 = a;
  a2.step = 50;
  auto oa2 = env.observe(a2);
  for (std::size_t i = 36; i < oa.size(); ++i) CHECK(oa[i] == oa2[i]);

  // video mode: the tile re-rolls with the step counter
  ObsSpec video{ObsMode::onehot, NoiseMode::video, true};
  MazeEnv venv(MazeKind::grid, video, 200);
  auto va = venv.observe(a);
  auto va2 = venv.observe(a2);
  bool vdiffers = false;
  for (std::size_t i = 36; i < va.size(); ++i)
    if (va[i] != va2[i]) vdiffers = true;
  CHECK(vdiffers);
}

TEST_CASE("inactive noise renders as zeros at unchanged width") {
  ObsSpec spec{ObsMode::onehot, NoiseMode::image, false};
  MazeEnv env(MazeKind::grid, spec, 200);
  MazeState s = env.reset_at(0, 0);
  auto obs = env.observe(s);
  CHECK(obs.size() == std::size_t(36 + 256));
  for (std::size_t i = 36; i < obs.size(); ++i) CHECK(obs[i] == 0.0);
}

TEST_CASE("noise never alters the dynamics") {
  ObsSpec clean{ObsMode::onehot, NoiseMode::none, false};
  ObsSpec noisy{ObsMode::onehot, NoiseMode::video, true};
  MazeEnv a(MazeKind::loop, clean, 50);
  MazeEnv b(MazeKind::loop, noisy, 50);
  Rng ra(21), rb(21);
  MazeState sa = a.reset(GoalRule::training_set, ra);
  MazeState sb = b.reset(GoalRule::training_set, rb);
  Rng actions(5);
  while (!sa.finished() && !sb.finished()) {
    const Action act = static_cast<Action>(actions.uniform_int(4));
    StepResult qa = a.step(sa, act);
    StepResult qb = b.step(sb, act);
    CHECK(sa.cell() == sb.cell());
    CHECK(qa.reward == qb.reward);
    CHECK(qa.reached_goal == qb.reached_goal);
  }
  CHECK(sa.finished() == sb.finished());
}
