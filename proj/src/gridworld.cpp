#include "advcomm/gridworld.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "advcomm/diffcore/init.hpp"

namespace advcomm::gridworld {

namespace {

constexpr int kDx[kNumActions] = {0, 0, -1, 1, 0};
constexpr int kDy[kNumActions] = {-1, 1, 0, 0, 0};
constexpr int kMaxRetries = 100;

}  // namespace

std::string to_string(Task t) {
  switch (t) {
    case Task::coverage: return "coverage";
    case Task::split_coverage: return "split_coverage";
    case Task::path_planning: return "path_planning";
  }
  return "?";
}

std::string to_string(Layout l) {
  switch (l) {
    case Layout::random: return "random";
    case Layout::split: return "split";
    case Layout::split_disconnected: return "split_disconnected";
    case Layout::warehouse: return "warehouse";
  }
  return "?";
}

Task task_from_string(const std::string& s) {
  if (s == "coverage") return Task::coverage;
  if (s == "split_coverage" || s == "split") return Task::split_coverage;
  if (s == "path_planning" || s == "path") return Task::path_planning;
  throw std::invalid_argument("unknown task '" + s + "'");
}

Layout layout_from_string(const std::string& s) {
  if (s == "random") return Layout::random;
  if (s == "split") return Layout::split;
  if (s == "split_disconnected") return Layout::split_disconnected;
  if (s == "warehouse") return Layout::warehouse;
  throw std::invalid_argument("unknown layout '" + s + "'");
}

EnvConfig EnvConfig::coverage() { return EnvConfig{}; }

EnvConfig EnvConfig::split_coverage() {
  EnvConfig c;
  c.task = Task::split_coverage;
  c.layout = Layout::split;
  c.obstacle_fraction = 0.0;
  c.horizon = 288;
  return c;
}

EnvConfig EnvConfig::path_planning() {
  EnvConfig c;
  c.task = Task::path_planning;
  c.layout = Layout::warehouse;
  c.width = c.height = 12;
  c.n_agents = 16;
  c.obstacle_fraction = 0.0;
  c.comm_range = 5.0;
  c.horizon = 50;
  return c;
}

void EnvConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("env config: " + m); };
  if (width < 1 || height < 1) fail("grid dimensions must be positive");
  if (n_agents < 1) fail("need at least one agent");
  if (fov_w < 1 || fov_h < 1 || fov_w % 2 == 0 || fov_h % 2 == 0) fail("field of view must be odd and positive");
  if (!(obstacle_fraction >= 0.0 && obstacle_fraction < 1.0)) fail("obstacle_fraction must lie in [0,1)");
  if (!(comm_range > 0.0)) fail("comm_range must be positive");
  if (horizon < 1) fail("horizon must be positive");
  if (si_agent && (*si_agent < 0 || *si_agent >= n_agents)) fail("si_agent out of range");
  if ((layout == Layout::split || layout == Layout::split_disconnected) && width < 3) fail("split layouts need W >= 3");
  if (task == Task::split_coverage && layout != Layout::split && layout != Layout::split_disconnected)
    fail("split_coverage needs a split layout");
}

int default_eval_horizon(const EnvConfig& cfg) {
  const long cells = static_cast<long>(cfg.width) * cfg.height;
  switch (cfg.task) {
    case Task::coverage: return static_cast<int>((cells * 6 + 9) / 10);
    case Task::split_coverage: return static_cast<int>((cells + 1) / 2);
    case Task::path_planning: return 50;
  }
  return cfg.horizon;
}

void to_json(nlohmann::json& j, const EnvConfig& c) {
  j = nlohmann::json{{"task", to_string(c.task)},
                     {"width", c.width},
                     {"height", c.height},
                     {"n_agents", c.n_agents},
                     {"obstacle_fraction", c.obstacle_fraction},
                     {"comm_range", c.comm_range},
                     {"fov_w", c.fov_w},
                     {"fov_h", c.fov_h},
                     {"horizon", c.horizon},
                     {"stall_limit", c.stall_limit},
                     {"layout", to_string(c.layout)},
                     {"si_placement", c.si_placement == SiPlacement::left ? "left" : "shared"},
                     {"seed", c.seed},
                     {"training_mode", c.training_mode}};
  j["si_agent"] = c.si_agent ? nlohmann::json(*c.si_agent) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, EnvConfig& c) {
  EnvConfig d;
  if (j.contains("task")) {
    const auto t = task_from_string(j.at("task").get<std::string>());
    d = t == Task::coverage ? EnvConfig::coverage()
        : t == Task::split_coverage ? EnvConfig::split_coverage()
                                    : EnvConfig::path_planning();
  }
  c = d;
  c.width = j.value("width", d.width);
  c.height = j.value("height", d.height);
  c.n_agents = j.value("n_agents", d.n_agents);
  c.obstacle_fraction = j.value("obstacle_fraction", d.obstacle_fraction);
  c.comm_range = j.value("comm_range", d.comm_range);
  c.fov_w = j.value("fov_w", d.fov_w);
  c.fov_h = j.value("fov_h", d.fov_h);
  c.horizon = j.value("horizon", d.horizon);
  c.stall_limit = j.value("stall_limit", d.stall_limit);
  if (j.contains("layout")) c.layout = layout_from_string(j.at("layout").get<std::string>());
  if (j.contains("si_placement")) c.si_placement = j.at("si_placement") == "left" ? SiPlacement::left : SiPlacement::shared;
  c.seed = j.value("seed", d.seed);
  c.training_mode = j.value("training_mode", d.training_mode);
  if (j.contains("si_agent") && !j.at("si_agent").is_null()) c.si_agent = j.at("si_agent").get<int>();
}

std::vector<Edge> range_graph(const std::vector<Cell>& positions, double d) {
  std::vector<Edge> edges;
  const double d2 = d * d;
  for (std::size_t i = 0; i < positions.size(); ++i)
    for (std::size_t j = i + 1; j < positions.size(); ++j) {
      const double dx = positions[i].x - positions[j].x, dy = positions[i].y - positions[j].y;
      if (dx * dx + dy * dy < d2) edges.emplace_back(i, j);
    }
  return edges;
}

Environment::Environment(EnvConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  reset(cfg_.seed);
}

void Environment::reset(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  retries_ = 0;
  generate(rng);
  const auto n = static_cast<std::size_t>(cfg_.n_agents);
  s_.t = 0;
  global_cov_.assign(static_cast<std::size_t>(s_.width * s_.height), 0);
  s_.coverage.clear();
  if (is_coverage_task()) {
    s_.coverage.assign(n, std::vector<std::uint8_t>(global_cov_.size(), 0));
    for (std::size_t i = 0; i < n; ++i) {
      const auto k = s_.index(s_.positions[i].x, s_.positions[i].y);
      s_.coverage[i][k] = 1;
      global_cov_[k] = 1;
    }
  }
  stall_.assign(n, 0);
  trigger_active_ = cfg_.task != Task::split_coverage;
  if (!trigger_active_) {
    for (const auto& p : s_.positions)
      if (p.x >= s_.width / 2) trigger_active_ = true;
  }
  done_ = false;
}

void Environment::set_state(WorldState s) {
  s_ = std::move(s);
  global_cov_.assign(static_cast<std::size_t>(s_.width * s_.height), 0);
  for (const auto& c : s_.coverage)
    for (std::size_t k = 0; k < c.size(); ++k) global_cov_[k] |= c[k];
  stall_.assign(s_.positions.size(), 0);
  trigger_active_ = cfg_.task != Task::split_coverage;
  if (!trigger_active_)
    for (const auto& p : s_.positions)
      if (p.x >= s_.width / 2) trigger_active_ = true;
  done_ = s_.t >= cfg_.horizon;
}

void Environment::generate(std::mt19937_64& rng) {
  s_.width = cfg_.width;
  s_.height = cfg_.height;
  s_.obstacles.assign(static_cast<std::size_t>(cfg_.width * cfg_.height), 0);
  const int wall = cfg_.width / 2;
  switch (cfg_.layout) {
    case Layout::random:
      place_random_obstacles(rng);
      break;
    case Layout::split:
    case Layout::split_disconnected:
      for (int y = 0; y < cfg_.height; ++y) s_.obstacles[s_.index(wall, y)] = 1;
      if (cfg_.layout == Layout::split) s_.obstacles[s_.index(wall, cfg_.height / 2)] = 0;
      break;
    case Layout::warehouse:
      for (int x = 1; x < cfg_.width; x += 2)
        for (int y = 1; y < cfg_.height; y += 2) s_.obstacles[s_.index(x, y)] = 1;
      break;
  }
  place_agents(rng);
}

bool Environment::free_space_connected() const {
  const int total = static_cast<int>(std::count(s_.obstacles.begin(), s_.obstacles.end(), 0));
  if (total == 0) return false;
  std::vector<std::uint8_t> seen(s_.obstacles.size(), 0);
  std::vector<Cell> stack;
  for (int x = 0; x < s_.width && stack.empty(); ++x)
    for (int y = 0; y < s_.height; ++y)
      if (!s_.obstacles[s_.index(x, y)]) {
        stack.push_back({x, y});
        seen[s_.index(x, y)] = 1;
        break;
      }
  int reached = 0;
  while (!stack.empty()) {
    auto c = stack.back();
    stack.pop_back();
    ++reached;
    for (int a = 0; a < 4; ++a) {
      const int nx = c.x + kDx[a], ny = c.y + kDy[a];
      if (s_.blocked(nx, ny) || seen[s_.index(nx, ny)]) continue;
      seen[s_.index(nx, ny)] = 1;
      stack.push_back({nx, ny});
    }
  }
  return reached == total;
}

// Obstacles are added one at a time in random order and each is kept only if
// the free space stays 4-connected. This yields the exact target count; plain
// rejection sampling of whole layouts almost never produces a connected 40%
// layout.
void Environment::place_random_obstacles(std::mt19937_64& rng) {
  const int cells = cfg_.width * cfg_.height;
  const int target = static_cast<int>(std::lround(cfg_.obstacle_fraction * cells));
  if (cells - target < cfg_.n_agents) throw std::invalid_argument("env config: not enough free cells for the agents");
  for (;; ++retries_) {
    if (retries_ > kMaxRetries) throw std::runtime_error("generate_world: no connected layout after bounded retries");
    std::fill(s_.obstacles.begin(), s_.obstacles.end(), 0);
    std::vector<int> order(static_cast<std::size_t>(cells));
    for (int k = 0; k < cells; ++k) order[k] = k;
    diffcore::shuffle(order.begin(), order.end(), rng);
    int placed = 0;
    for (int k : order) {
      if (placed == target) break;
      s_.obstacles[k] = 1;
      if (free_space_connected()) {
        ++placed;
      } else {
        s_.obstacles[k] = 0;
      }
    }
    if (placed == target) return;
  }
}

void Environment::place_agents(std::mt19937_64& rng) {
  const int wall = cfg_.width / 2;
  auto free_cells = [&](int x_lo, int x_hi) {
    std::vector<Cell> out;
    for (int x = std::max(0, x_lo); x < std::min(cfg_.width, x_hi); ++x)
      for (int y = 0; y < cfg_.height; ++y)
        if (!s_.obstacles[s_.index(x, y)]) out.push_back({x, y});
    return out;
  };
  auto draw = [&](std::vector<Cell>& pool) {
    if (pool.empty()) throw std::runtime_error("generate_world: no free cell left for an agent");
    const auto k = diffcore::uniform_index(rng, pool.size());
    const Cell c = pool[k];
    pool.erase(pool.begin() + static_cast<long>(k));
    return c;
  };

  const auto n = static_cast<std::size_t>(cfg_.n_agents);
  s_.positions.assign(n, {});
  if (cfg_.layout == Layout::split) {
    auto left = free_cells(0, wall);
    for (auto& p : s_.positions) p = draw(left);
  } else if (cfg_.layout == Layout::split_disconnected) {
    auto left = free_cells(0, wall), right = free_cells(wall + 1, cfg_.width);
    for (std::size_t i = 0; i < n; ++i) {
      const bool alone = cfg_.si_placement == SiPlacement::left && cfg_.si_agent && static_cast<int>(i) == *cfg_.si_agent;
      s_.positions[i] = draw(alone ? left : right);
    }
  } else {
    auto all = free_cells(0, cfg_.width);
    for (auto& p : s_.positions) p = draw(all);
  }

  s_.goals.clear();
  if (cfg_.task == Task::path_planning) {
    auto all = free_cells(0, cfg_.width);
    for (std::size_t i = 0; i < n; ++i) s_.goals.push_back(draw(all));
  }
}

bool Environment::is_target(int x, int y) const {
  if (s_.blocked(x, y)) return false;
  if (cfg_.task == Task::split_coverage) return x >= s_.width / 2;
  return true;
}

int Environment::target_cell_count() const {
  int n = 0;
  for (int x = 0; x < s_.width; ++x)
    for (int y = 0; y < s_.height; ++y) n += is_target(x, y);
  return n;
}

int Environment::covered_target_count() const {
  int n = 0;
  for (int x = 0; x < s_.width; ++x)
    for (int y = 0; y < s_.height; ++y) n += is_target(x, y) && global_cov_[s_.index(x, y)];
  return n;
}

std::vector<std::uint8_t> Environment::global_coverage() const { return global_cov_; }

StepResult Environment::step(const std::vector<int>& actions) {
  const auto n = static_cast<std::size_t>(cfg_.n_agents);
  if (actions.size() != n) {
    throw std::invalid_argument("step: expected " + std::to_string(n) + " actions, got " + std::to_string(actions.size()));
  }
  for (int a : actions)
    if (a < 0 || a >= kNumActions) throw std::invalid_argument("step: action " + std::to_string(a) + " out of range");
  if (done_) throw std::logic_error("step: episode already finished");

  StepResult r;
  r.rewards.assign(n, 0.0);
  auto& pos = s_.positions;

  if (cfg_.task == Task::path_planning) {
    // ascending index order; a move into a currently occupied cell is refused
    for (std::size_t i = 0; i < n; ++i) {
      const int nx = pos[i].x + kDx[actions[i]], ny = pos[i].y + kDy[actions[i]];
      if (s_.blocked(nx, ny)) continue;
      bool occupied = false;
      for (std::size_t j = 0; j < n && !occupied; ++j) occupied = j != i && pos[j].x == nx && pos[j].y == ny;
      if (!occupied) pos[i] = {nx, ny};
    }
    for (std::size_t i = 0; i < n; ++i) r.rewards[i] = pos[i] == s_.goals[i] ? 1.0 : 0.0;
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const int nx = pos[i].x + kDx[actions[i]], ny = pos[i].y + kDy[actions[i]];
      if (!s_.blocked(nx, ny)) pos[i] = {nx, ny};
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto k = s_.index(pos[i].x, pos[i].y);
      s_.coverage[i][k] = 1;
      if (!global_cov_[k] && is_target(pos[i].x, pos[i].y)) r.rewards[i] = 1.0;
      global_cov_[k] = 1;
    }
    for (std::size_t i = 0; i < n; ++i) stall_[i] = r.rewards[i] > 0.0 ? 0 : stall_[i] + 1;
    if (!trigger_active_) {
      for (const auto& p : pos)
        if (p.x >= s_.width / 2) trigger_active_ = true;
      if (trigger_active_) std::fill(stall_.begin(), stall_.end(), 0);
    }
  }

  ++s_.t;
  bool done = s_.t >= cfg_.horizon;
  if (cfg_.training_mode && is_coverage_task() && trigger_active_) {
    for (int c : stall_) done = done || c >= cfg_.stall_limit;
  }
  done_ = done;
  r.done = done;
  return r;
}

Tensor<float> Environment::observe(int agent) const {
  if (agent < 0 || agent >= cfg_.n_agents) throw std::out_of_range("observe: agent out of range");
  const int rx = cfg_.fov_w / 2, ry = cfg_.fov_h / 2;
  const auto fw = static_cast<std::size_t>(cfg_.fov_w), fh = static_cast<std::size_t>(cfg_.fov_h);
  Tensor<float> out({2, fw, fh});
  const Cell p = s_.positions[agent];
  for (int u = 0; u < cfg_.fov_w; ++u) {
    for (int v = 0; v < cfg_.fov_h; ++v) {
      const int x = p.x + u - rx, y = p.y + v - ry;
      const bool in = s_.inside(x, y);
      out[u * fh + v] = (!in || s_.obstacles[s_.index(x, y)]) ? 1.0f : 0.0f;
      if (in && is_coverage_task()) out[fw * fh + u * fh + v] = s_.coverage[agent][s_.index(x, y)] ? 1.0f : 0.0f;
    }
  }
  if (!is_coverage_task()) {
    const int dx = s_.goals[agent].x - p.x, dy = s_.goals[agent].y - p.y;
    int px = dx, py = dy;
    if (std::abs(dx) > rx || std::abs(dy) > ry) {
      // project onto the window border along the ray from the agent
      const double tx = dx != 0 ? static_cast<double>(rx) / std::abs(dx) : INFINITY;
      const double ty = dy != 0 ? static_cast<double>(ry) / std::abs(dy) : INFINITY;
      const double t = std::min(tx, ty);
      px = static_cast<int>(std::lround(dx * t));
      py = static_cast<int>(std::lround(dy * t));
    }
    out[fw * fh + static_cast<std::size_t>(px + rx) * fh + static_cast<std::size_t>(py + ry)] = 1.0f;
  }
  return out;
}

Tensor<float> Environment::observe_all() const {
  const auto per = static_cast<std::size_t>(2 * cfg_.fov_w * cfg_.fov_h);
  Tensor<float> out({static_cast<std::size_t>(cfg_.n_agents), 2, static_cast<std::size_t>(cfg_.fov_w),
                     static_cast<std::size_t>(cfg_.fov_h)});
  for (int i = 0; i < cfg_.n_agents; ++i) {
    auto o = observe(i);
    std::copy(o.raw(), o.raw() + per, out.raw() + i * per);
  }
  return out;
}

std::vector<Edge> Environment::comm_graph() const { return range_graph(s_.positions, cfg_.comm_range); }

Tensor<float> Environment::global_state(int agent) const {
  const auto w = static_cast<std::size_t>(s_.width), h = static_cast<std::size_t>(s_.height);
  const std::size_t plane = w * h;
  Tensor<float> out({static_cast<std::size_t>(kGlobalChannels), w, h});
  for (std::size_t k = 0; k < plane; ++k) out[k] = s_.obstacles[k];
  for (int j = 0; j < cfg_.n_agents; ++j) {
    const auto k = static_cast<std::size_t>(s_.index(s_.positions[j].x, s_.positions[j].y));
    const bool si = cfg_.si_agent && *cfg_.si_agent == j;
    const std::size_t ch = j == agent ? 1 : si ? 3 : 2;
    out[ch * plane + k] = 1.0f;
  }
  if (is_coverage_task()) {
    for (std::size_t k = 0; k < plane; ++k) out[4 * plane + k] = global_cov_[k];
  } else {
    for (const auto& g : s_.goals) out[4 * plane + static_cast<std::size_t>(s_.index(g.x, g.y))] = 1.0f;
  }
  return out;
}

nlohmann::json Environment::snapshot() const {
  nlohmann::json j;
  j["config"] = cfg_;
  j["t"] = s_.t;
  j["width"] = s_.width;
  j["height"] = s_.height;
  std::vector<std::string> rows;
  for (int y = 0; y < s_.height; ++y) {
    std::string row;
    for (int x = 0; x < s_.width; ++x) row += s_.obstacles[s_.index(x, y)] ? '#' : '.';
    rows.push_back(row);
  }
  j["obstacles"] = rows;
  auto cells = [](const std::vector<Cell>& cs) {
    auto a = nlohmann::json::array();
    for (const auto& c : cs) a.push_back({c.x, c.y});
    return a;
  };
  j["positions"] = cells(s_.positions);
  if (is_coverage_task()) {
    auto cov = nlohmann::json::array();
    for (const auto& c : s_.coverage) {
      std::vector<Cell> covered;
      for (int x = 0; x < s_.width; ++x)
        for (int y = 0; y < s_.height; ++y)
          if (c[s_.index(x, y)]) covered.push_back({x, y});
      cov.push_back(cells(covered));
    }
    j["coverage"] = cov;
  } else {
    j["goals"] = cells(s_.goals);
  }
  return j;
}

}  // namespace advcomm::gridworld
