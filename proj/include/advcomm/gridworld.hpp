#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "advcomm/diffcore/tensor.hpp"
#include "advcomm/graphnet/shift.hpp"

namespace advcomm::gridworld {

using diffcore::Tensor;
using graphnet::Edge;

enum class Task { coverage, split_coverage, path_planning };
enum class Layout { random, split, split_disconnected, warehouse };
enum class SiPlacement { shared, left };

// up/down move along y, left/right along x
enum Action : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3, kWait = 4 };
inline constexpr int kNumActions = 5;

std::string to_string(Task t);
std::string to_string(Layout l);
Task task_from_string(const std::string& s);
Layout layout_from_string(const std::string& s);

struct EnvConfig {
  Task task = Task::coverage;
  int width = 24;
  int height = 24;
  int n_agents = 6;
  double obstacle_fraction = 0.4;
  double comm_range = 8.0;
  int fov_w = 11;
  int fov_h = 11;
  int horizon = 346;
  int stall_limit = 10;
  Layout layout = Layout::random;
  std::optional<int> si_agent;
  SiPlacement si_placement = SiPlacement::shared;
  std::uint64_t seed = 0;
  // training mode enables the early-termination rules
  bool training_mode = true;

  static EnvConfig coverage();
  static EnvConfig split_coverage();
  static EnvConfig path_planning();

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
};

/// Fixed evaluation horizon: ceil(0.6 W H) for coverage, ceil(W H / 2) for
/// split coverage, 50 for path planning.
int default_eval_horizon(const EnvConfig& cfg);

void to_json(nlohmann::json& j, const EnvConfig& c);
void from_json(const nlohmann::json& j, EnvConfig& c);

struct Cell {
  int x = 0;
  int y = 0;
  bool operator==(const Cell&) const = default;
};

struct WorldState {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> obstacles;  // index x * height + y
  std::vector<Cell> positions;
  std::vector<std::vector<std::uint8_t>> coverage;  // per agent, coverage tasks
  std::vector<Cell> goals;                          // path task
  int t = 0;

  int index(int x, int y) const { return x * height + y; }
  bool inside(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  bool blocked(int x, int y) const { return !inside(x, y) || obstacles[index(x, y)] != 0; }
};

struct StepResult {
  std::vector<double> rewards;
  bool done = false;
};

class Environment {
 public:
  explicit Environment(EnvConfig cfg);

  /// Generates a fresh world from `seed`.
  void reset(std::uint64_t seed);

  StepResult step(const std::vector<int>& actions);

  const EnvConfig& config() const { return cfg_; }
  const WorldState& state() const { return s_; }
  int n_agents() const { return cfg_.n_agents; }
  bool done() const { return done_; }
  int generation_retries() const { return retries_; }
  const std::vector<int>& stall_counters() const { return stall_; }
  bool stall_trigger_active() const { return trigger_active_; }

  /// [2, fov_w, fov_h]: obstacles (1 outside the world) and own coverage or goal.
  Tensor<float> observe(int agent) const;
  /// [N, 2, fov_w, fov_h]
  Tensor<float> observe_all() const;

  /// Undirected edges for pairs closer than comm_range (strict).
  std::vector<Edge> comm_graph() const;

  /// Critic input for one agent: [5, W, H] with obstacles, own position, other
  /// cooperative positions, self-interested position, global coverage or goals.
  Tensor<float> global_state(int agent) const;
  static constexpr int kGlobalChannels = 5;

  std::vector<std::uint8_t> global_coverage() const;
  /// Cells that earn reward when first covered.
  bool is_target(int x, int y) const;
  int target_cell_count() const;
  int covered_target_count() const;

  nlohmann::json snapshot() const;

  /// Replaces the state wholesale; used by tests to stage scenarios.
  void set_state(WorldState s);

 private:
  void generate(std::mt19937_64& rng);
  void place_random_obstacles(std::mt19937_64& rng);
  void place_agents(std::mt19937_64& rng);
  bool free_space_connected() const;
  bool is_coverage_task() const { return cfg_.task != Task::path_planning; }

  EnvConfig cfg_;
  WorldState s_;
  std::vector<std::uint8_t> global_cov_;
  std::vector<int> stall_;
  bool trigger_active_ = false;
  bool done_ = false;
  int retries_ = 0;
};

/// Euclidean-range edges for arbitrary positions.
std::vector<Edge> range_graph(const std::vector<Cell>& positions, double d);

}  // namespace advcomm::gridworld
