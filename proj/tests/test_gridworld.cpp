#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <queue>
#include <set>

#include "advcomm/gridworld.hpp"

using namespace advcomm::gridworld;

namespace {

EnvConfig empty_world(int w, int h, int n, Task task = Task::coverage) {
  EnvConfig c;
  c.task = task;
  c.width = w;
  c.height = h;
  c.n_agents = n;
  c.obstacle_fraction = 0.0;
  c.layout = Layout::random;
  c.horizon = 1000;
  return c;
}

WorldState blank_state(const EnvConfig& c) {
  WorldState s;
  s.width = c.width;
  s.height = c.height;
  s.obstacles.assign(static_cast<std::size_t>(c.width * c.height), 0);
  s.positions.assign(static_cast<std::size_t>(c.n_agents), {});
  if (c.task != Task::path_planning) {
    s.coverage.assign(static_cast<std::size_t>(c.n_agents), std::vector<std::uint8_t>(s.obstacles.size(), 0));
  }
  return s;
}

void stage(Environment& env, WorldState s) {
  for (std::size_t i = 0; i < s.coverage.size(); ++i) s.coverage[i][s.index(s.positions[i].x, s.positions[i].y)] = 1;
  env.set_state(std::move(s));
}

// flood fill over free cells from `from`, optionally forbidding one cell
int reachable(const WorldState& s, Cell from, std::optional<Cell> forbid = std::nullopt) {
  std::vector<std::uint8_t> seen(s.obstacles.size(), 0);
  std::queue<Cell> q;
  q.push(from);
  seen[s.index(from.x, from.y)] = 1;
  int n = 0;
  const int dx[] = {1, -1, 0, 0}, dy[] = {0, 0, 1, -1};
  while (!q.empty()) {
    auto c = q.front();
    q.pop();
    ++n;
    for (int a = 0; a < 4; ++a) {
      Cell d{c.x + dx[a], c.y + dy[a]};
      if (s.blocked(d.x, d.y) || seen[s.index(d.x, d.y)] || (forbid && *forbid == d)) continue;
      seen[s.index(d.x, d.y)] = 1;
      q.push(d);
    }
  }
  return n;
}

}  // namespace

TEST(Config, Defaults) {
  auto c = EnvConfig::coverage();
  EXPECT_EQ(c.width, 24);
  EXPECT_EQ(c.comm_range, 8.0);
  EXPECT_EQ(c.fov_w, 11);
  EXPECT_EQ(EnvConfig::path_planning().comm_range, 5.0);
  EXPECT_EQ(EnvConfig::path_planning().width, 12);
  EXPECT_EQ(default_eval_horizon(EnvConfig::coverage()), 346);
  EXPECT_EQ(default_eval_horizon(EnvConfig::split_coverage()), 288);
  EXPECT_EQ(default_eval_horizon(EnvConfig::path_planning()), 50);
}

TEST(Config, RejectsInvalid) {
  auto c = EnvConfig::coverage();
  c.fov_w = 10;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = EnvConfig::coverage();
  c.obstacle_fraction = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = EnvConfig::coverage();
  c.n_agents = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = EnvConfig::coverage();
  c.si_agent = 6;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Config, JsonRoundTrip) {
  auto c = EnvConfig::split_coverage();
  c.si_agent = 2;
  c.si_placement = SiPlacement::left;
  c.seed = 77;
  nlohmann::json j = c;
  auto back = j.get<EnvConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
}

TEST(Generate, CoverageWorldDensityAndConnectivity) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = EnvConfig::coverage();
    c.seed = seed;
    Environment env(c);
    const auto& s = env.state();
    ASSERT_EQ(s.width, 24);
    ASSERT_EQ(s.height, 24);
    const int obstacles = static_cast<int>(std::count(s.obstacles.begin(), s.obstacles.end(), 1));
    EXPECT_NEAR(obstacles / 576.0, 0.40, 0.02);
    const int free = 576 - obstacles;
    EXPECT_EQ(reachable(s, s.positions[0]), free);
    std::set<std::pair<int, int>> seen;
    for (auto p : s.positions) {
      EXPECT_FALSE(s.blocked(p.x, p.y));
      seen.insert({p.x, p.y});
    }
    EXPECT_EQ(seen.size(), 6u);
  }
}

TEST(Generate, SingleAgentEmptyWorld) {
  Environment env(empty_world(5, 4, 1));
  const auto& s = env.state();
  EXPECT_EQ(std::count(s.obstacles.begin(), s.obstacles.end(), 1), 0);
  EXPECT_TRUE(s.inside(s.positions[0].x, s.positions[0].y));
}

TEST(Generate, SplitWallHasOneOpening) {
  auto c = EnvConfig::split_coverage();
  Environment env(c);
  const auto& s = env.state();
  const int wall = s.width / 2;
  std::optional<Cell> opening;
  int free_in_wall = 0;
  for (int y = 0; y < s.height; ++y)
    if (!s.obstacles[s.index(wall, y)]) {
      ++free_in_wall;
      opening = Cell{wall, y};
    }
  ASSERT_EQ(free_in_wall, 1);
  const Cell left{0, 0};
  const int all_free = static_cast<int>(std::count(s.obstacles.begin(), s.obstacles.end(), 0));
  EXPECT_EQ(reachable(s, left), all_free);
  // without the opening the left half is sealed off
  EXPECT_EQ(reachable(s, left, opening), wall * s.height);
  for (auto p : s.positions) EXPECT_LT(p.x, wall);
}

TEST(Generate, SplitDisconnectedPlacement) {
  auto c = EnvConfig::split_coverage();
  c.layout = Layout::split_disconnected;
  c.si_agent = 0;
  c.si_placement = SiPlacement::left;
  Environment env(c);
  const auto& s = env.state();
  for (int y = 0; y < s.height; ++y) EXPECT_TRUE(s.obstacles[s.index(s.width / 2, y)]);
  EXPECT_LT(s.positions[0].x, s.width / 2);
  for (std::size_t i = 1; i < s.positions.size(); ++i) EXPECT_GT(s.positions[i].x, s.width / 2);
  // a range spanning the wall still connects the agents
  auto edges = range_graph({{s.width / 2 - 1, 5}, {s.width / 2 + 1, 5}}, c.comm_range);
  EXPECT_EQ(edges.size(), 1u);
}

TEST(Generate, PathWarehouse) {
  Environment env(EnvConfig::path_planning());
  const auto& s = env.state();
  EXPECT_EQ(s.width, 12);
  EXPECT_TRUE(s.obstacles[s.index(1, 1)]);
  EXPECT_FALSE(s.obstacles[s.index(0, 1)]);
  std::set<std::pair<int, int>> starts, goals;
  for (std::size_t i = 0; i < s.positions.size(); ++i) {
    EXPECT_FALSE(s.blocked(s.positions[i].x, s.positions[i].y));
    EXPECT_FALSE(s.blocked(s.goals[i].x, s.goals[i].y));
    starts.insert({s.positions[i].x, s.positions[i].y});
    goals.insert({s.goals[i].x, s.goals[i].y});
  }
  EXPECT_EQ(starts.size(), 16u);
  EXPECT_EQ(goals.size(), 16u);
}

TEST(Step, CoverageRewardForNewCell) {
  auto c = empty_world(5, 5, 1);
  Environment env(c);
  auto s = blank_state(c);
  s.positions[0] = {2, 2};
  stage(env, s);
  auto r = env.step({kRight});
  EXPECT_EQ(r.rewards[0], 1.0);
  EXPECT_EQ(env.state().positions[0], (Cell{3, 2}));
  EXPECT_TRUE(env.state().coverage[0][env.state().index(3, 2)]);
  r = env.step({kLeft});
  EXPECT_EQ(r.rewards[0], 0.0);
}

TEST(Step, WaitKeepsPosition) {
  auto c = empty_world(5, 5, 1);
  Environment env(c);
  auto s = blank_state(c);
  s.positions[0] = {1, 3};
  stage(env, s);
  auto r = env.step({kWait});
  EXPECT_EQ(r.rewards[0], 0.0);
  EXPECT_EQ(env.state().positions[0], (Cell{1, 3}));
}

TEST(Step, BlockedByObstacleAndBoundary) {
  auto c = empty_world(3, 3, 1);
  Environment env(c);
  auto s = blank_state(c);
  s.positions[0] = {0, 0};
  s.obstacles[s.index(1, 0)] = 1;
  stage(env, s);
  env.step({kRight});
  EXPECT_EQ(env.state().positions[0], (Cell{0, 0}));
  env.step({kUp});
  EXPECT_EQ(env.state().positions[0], (Cell{0, 0}));
}

TEST(Step, RejectsMalformedActions) {
  Environment env(empty_world(4, 4, 2));
  EXPECT_THROW(env.step({0}), std::invalid_argument);
  EXPECT_THROW(env.step({0, 7}), std::invalid_argument);
}

TEST(Step, SecondAgentOnSameNewCellGetsNothing) {
  auto c = empty_world(5, 5, 2);
  Environment env(c);
  auto s = blank_state(c);
  s.positions = {{1, 2}, {3, 2}};
  stage(env, s);
  auto r = env.step({kRight, kLeft});
  EXPECT_EQ(r.rewards[0] + r.rewards[1], 1.0);
  EXPECT_EQ(r.rewards[0], 1.0);
}

TEST(Step, SplitRewardsOnlyRightHalf) {
  auto c = EnvConfig::split_coverage();
  c.width = 6;
  c.height = 3;
  c.n_agents = 1;
  Environment env(c);
  auto s = env.state();
  s.positions[0] = {1, 1};
  s.coverage.assign(1, std::vector<std::uint8_t>(s.obstacles.size(), 0));
  stage(env, s);
  EXPECT_EQ(env.step({kRight}).rewards[0], 0.0);  // (2,1), left half
  EXPECT_EQ(env.step({kRight}).rewards[0], 1.0);  // (3,1), the opening
  EXPECT_EQ(env.step({kRight}).rewards[0], 1.0);  // (4,1)
}

TEST(Step, PathReturnFiftyAtGoal) {
  auto c = EnvConfig::path_planning();
  c.n_agents = 1;
  Environment env(c);
  auto s = env.state();
  s.goals[0] = s.positions[0];
  stage(env, s);
  double ret = 0.0;
  int steps = 0;
  while (!env.done()) {
    ret += env.step({kWait}).rewards[0];
    ++steps;
  }
  EXPECT_EQ(steps, 50);
  EXPECT_EQ(ret, 50.0);
}

TEST(Step, PathConflictsExhaustive) {
  // every pair of start cells and actions in an empty 3x3 world
  auto c = empty_world(3, 3, 2, Task::path_planning);
  Environment env(c);
  for (int a = 0; a < 9; ++a)
    for (int b = 0; b < 9; ++b) {
      if (a == b) continue;
      for (int u = 0; u < kNumActions; ++u)
        for (int v = 0; v < kNumActions; ++v) {
          auto s = blank_state(c);
          s.positions = {{a / 3, a % 3}, {b / 3, b % 3}};
          s.goals = {{0, 0}, {2, 2}};
          env.set_state(s);
          env.step({u, v});
          const auto& p = env.state().positions;
          ASSERT_FALSE(p[0] == p[1]);
          const int dx[] = {0, 0, -1, 1, 0}, dy[] = {-1, 1, 0, 0, 0};
          Cell t0{s.positions[0].x + dx[u], s.positions[0].y + dy[u]};
          Cell t1{s.positions[1].x + dx[v], s.positions[1].y + dy[v]};
          const bool ok0 = s.inside(t0.x, t0.y), ok1 = s.inside(t1.x, t1.y);
          // agent 0 moves unless blocked or agent 1 still holds the cell
          const Cell e0 = ok0 && !(t0 == s.positions[1]) ? t0 : s.positions[0];
          const Cell e1 = ok1 && !(t1 == e0) ? t1 : s.positions[1];
          ASSERT_EQ(p[0], e0);
          ASSERT_EQ(p[1], e1);
          if (ok0 && ok1 && t0 == t1 && !(t0 == s.positions[0]) && !(t0 == s.positions[1])) {
            ASSERT_TRUE(p[0] == t0);
            ASSERT_TRUE(p[1] == s.positions[1]);
          }
        }
    }
}

TEST(Termination, NotDoneWhileCountersLow) {
  auto c = empty_world(20, 1, 1);
  Environment env(c);
  auto s = blank_state(c);
  s.positions[0] = {0, 0};
  stage(env, s);
  for (int k = 0; k < 15; ++k) EXPECT_FALSE(env.step({kRight}).done);
}

TEST(Termination, StallEndsTrainingEpisode) {
  auto c = empty_world(5, 5, 2);
  Environment env(c);
  auto s = blank_state(c);
  s.positions = {{0, 0}, {4, 4}};
  stage(env, s);
  for (int k = 0; k < 9; ++k) EXPECT_FALSE(env.step({kWait, kWait}).done);
  EXPECT_TRUE(env.step({kWait, kWait}).done);
}

TEST(Termination, EvaluationModeRunsFullHorizon) {
  auto c = empty_world(5, 5, 1);
  c.training_mode = false;
  c.horizon = 30;
  Environment env(c);
  int steps = 0;
  while (!env.done()) {
    env.step({kWait});
    ++steps;
  }
  EXPECT_EQ(steps, 30);
}

TEST(Termination, SplitNeedsRightSideArrival) {
  auto c = EnvConfig::split_coverage();
  c.n_agents = 2;
  Environment env(c);
  auto s = env.state();
  s.positions = {{0, 0}, {1, 0}};
  s.coverage.assign(2, std::vector<std::uint8_t>(s.obstacles.size(), 0));
  stage(env, s);
  for (int k = 0; k < 40; ++k) EXPECT_FALSE(env.step({kWait, kWait}).done);
  EXPECT_FALSE(env.stall_trigger_active());
}

TEST(Observe, CornerPaddingIsObstacle) {
  auto c = empty_world(8, 8, 1);
  c.fov_w = c.fov_h = 5;
  Environment env(c);
  auto s = blank_state(c);
  s.positions[0] = {0, 0};
  stage(env, s);
  auto o = env.observe(0);
  for (int u = 0; u < 5; ++u)
    for (int v = 0; v < 5; ++v) {
      const bool outside = u < 2 || v < 2;
      EXPECT_EQ(o.at(0, static_cast<std::size_t>(u), static_cast<std::size_t>(v)), outside ? 1.0f : 0.0f);
      if (outside) { EXPECT_EQ(o.at(1, static_cast<std::size_t>(u), static_cast<std::size_t>(v)), 0.0f); }
    }
}

TEST(Observe, FullyCoveredWindow) {
  auto c = empty_world(9, 9, 1);
  c.fov_w = c.fov_h = 3;
  Environment env(c);
  auto s = blank_state(c);
  s.positions[0] = {4, 4};
  std::fill(s.coverage[0].begin(), s.coverage[0].end(), 1);
  stage(env, s);
  auto o = env.observe(0);
  for (std::size_t k = 9; k < 18; ++k) EXPECT_EQ(o[k], 1.0f);
}

TEST(Observe, GoalProjectedToPerimeter) {
  auto c = empty_world(20, 20, 1, Task::path_planning);
  c.fov_w = c.fov_h = 5;
  Environment env(c);
  auto s = blank_state(c);
  s.positions[0] = {5, 5};
  s.goals = {{5 + 2 + 3, 5}};  // three cells beyond the right edge
  env.set_state(s);
  auto o = env.observe(0);
  float total = 0.0f;
  for (std::size_t k = 25; k < 50; ++k) total += o[k];
  EXPECT_EQ(total, 1.0f);
  EXPECT_EQ(o.at(1, 4, 2), 1.0f);

  s.goals = {{5 + 8, 5 + 4}};  // diagonal ray, t = 2/8
  env.set_state(s);
  o = env.observe(0);
  EXPECT_EQ(o.at(1, 4, 3), 1.0f);

  s.goals = {{6, 4}};  // inside the window
  env.set_state(s);
  o = env.observe(0);
  EXPECT_EQ(o.at(1, 3, 1), 1.0f);
}

TEST(CommGraph, StrictRange) {
  EXPECT_TRUE(range_graph({{0, 0}, {3, 4}}, 5.0).empty());
  EXPECT_EQ(range_graph({{0, 0}, {3, 4}}, 5.0001).size(), 1u);
}

TEST(CommGraph, CoincidentAgents) { EXPECT_EQ(range_graph({{2, 2}, {2, 2}}, 1.0).size(), 1u); }

TEST(CommGraph, LineIsPathGraph) {
  auto e = range_graph({{0, 0}, {1, 0}, {2, 0}}, 1.5);
  std::set<Edge> got(e.begin(), e.end());
  EXPECT_EQ(got, (std::set<Edge>{{0, 1}, {1, 2}}));
}

TEST(GlobalState, Channels) {
  auto c = empty_world(4, 4, 3);
  c.si_agent = 2;
  Environment env(c);
  auto s = blank_state(c);
  s.positions = {{0, 0}, {1, 1}, {2, 2}};
  s.obstacles[s.index(3, 3)] = 1;
  stage(env, s);
  auto g = env.global_state(0);
  EXPECT_EQ(g.at(0, 3, 3), 1.0f);
  EXPECT_EQ(g.at(1, 0, 0), 1.0f);
  EXPECT_EQ(g.at(2, 1, 1), 1.0f);
  EXPECT_EQ(g.at(3, 2, 2), 1.0f);
  EXPECT_EQ(g.at(4, 1, 1), 1.0f);
  EXPECT_EQ(g.at(4, 3, 0), 0.0f);
}

// random rollouts checking the listed invariants
class Rollout : public ::testing::TestWithParam<Task> {};

TEST_P(Rollout, Invariants) {
  const Task task = GetParam();
  EnvConfig c = task == Task::coverage ? EnvConfig::coverage()
                : task == Task::split_coverage ? EnvConfig::split_coverage()
                                                : EnvConfig::path_planning();
  c.training_mode = false;
  c.horizon = 120;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    c.seed = seed;
    Environment env(c);
    Environment twin(c);
    std::mt19937_64 rng(seed + 100);
    const int initial = env.covered_target_count();
    double team = 0.0;
    auto prev = env.state();
    while (!env.done()) {
      std::vector<int> a(static_cast<std::size_t>(c.n_agents));
      for (auto& x : a) x = static_cast<int>(rng() % kNumActions);
      auto r = env.step(a);
      auto r2 = twin.step(a);
      ASSERT_EQ(r.rewards, r2.rewards);
      ASSERT_EQ(r.done, r2.done);
      const auto& s = env.state();
      ASSERT_EQ(s.positions, twin.state().positions);
      for (double x : r.rewards) {
        ASSERT_TRUE(std::isfinite(x));
        team += x;
      }
      for (std::size_t i = 0; i < s.positions.size(); ++i) ASSERT_FALSE(s.blocked(s.positions[i].x, s.positions[i].y));
      if (task == Task::path_planning) {
        std::set<std::pair<int, int>> cells;
        for (auto p : s.positions) cells.insert({p.x, p.y});
        ASSERT_EQ(cells.size(), s.positions.size());
      } else {
        for (std::size_t i = 0; i < s.coverage.size(); ++i) {
          ASSERT_TRUE(s.coverage[i][s.index(s.positions[i].x, s.positions[i].y)]);
          for (std::size_t k = 0; k < s.coverage[i].size(); ++k) ASSERT_GE(s.coverage[i][k], prev.coverage[i][k]);
        }
      }
      prev = s;
    }
    if (task != Task::path_planning) { EXPECT_EQ(team, env.covered_target_count() - initial); }
  }
}

INSTANTIATE_TEST_SUITE_P(Tasks, Rollout, ::testing::Values(Task::coverage, Task::split_coverage, Task::path_planning));

TEST(Observe, Locality) {
  auto c = EnvConfig::coverage();
  c.fov_w = c.fov_h = 5;
  Environment env(c);
  for (int trial = 0; trial < 30; ++trial) {
    auto s = env.state();
    const auto base = env.observe(0);
    const Cell p = s.positions[0];
    std::mt19937_64 rng(trial);
    for (int k = 0; k < 20; ++k) {
      const int x = static_cast<int>(rng() % 24), y = static_cast<int>(rng() % 24);
      if (std::abs(x - p.x) <= 2 && std::abs(y - p.y) <= 2) continue;
      s.obstacles[s.index(x, y)] ^= 1;
      s.coverage[0][s.index(x, y)] ^= 1;
    }
    Environment other(c);
    other.set_state(s);
    const auto after = other.observe(0);
    ASSERT_TRUE(std::ranges::equal(base.data(), after.data()));
    env.reset(static_cast<std::uint64_t>(trial + 1));
  }
}

TEST(Snapshot, HasLayoutAndPositions) {
  Environment env(empty_world(3, 2, 1));
  auto j = env.snapshot();
  EXPECT_EQ(j["obstacles"].size(), 2u);
  EXPECT_EQ(j["obstacles"][0].get<std::string>(), "...");
  EXPECT_EQ(j["positions"].size(), 1u);
}
