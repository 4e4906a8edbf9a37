#include "advcomm/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace advcomm::harness {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// names

std::string to_string(CommVariant v) {
  switch (v) {
    case CommVariant::with_comms: return "with_comms";
    case CommVariant::no_comms: return "no_comms";
    case CommVariant::mask_si_outgoing: return "mask_si_outgoing";
  }
  return "?";
}

CommVariant comm_variant_from_string(const std::string& s) {
  if (s == "with_comms" || s == "full") return CommVariant::with_comms;
  if (s == "no_comms") return CommVariant::no_comms;
  if (s == "mask_si_outgoing") return CommVariant::mask_si_outgoing;
  throw std::invalid_argument("unknown comm variant '" + s + "'");
}

policy::CommMode comm_mode(CommVariant v) {
  switch (v) {
    case CommVariant::with_comms: return policy::CommMode::full;
    case CommVariant::no_comms: return policy::CommMode::no_comms;
    case CommVariant::mask_si_outgoing: return policy::CommMode::mask_si_outgoing;
  }
  return policy::CommMode::full;
}

policy::CommMode comm_mode_from_string(const std::string& s) { return comm_mode(comm_variant_from_string(s)); }

std::string column_key(Column c) {
  switch (c) {
    case Column::coop_comms: return "coop_comms";
    case Column::coop_no_comms: return "coop_no_comms";
    case Column::si_adv: return "si_adv";
    case Column::si_no_adv: return "si_no_adv";
    case Column::readapt_adv: return "readapt_adv";
  }
  return "?";
}

Column column_from_key(const std::string& s) {
  for (auto c : kColumns)
    if (column_key(c) == s) return c;
  throw std::invalid_argument("unknown result column '" + s + "'");
}

Phase column_phase(Column c) {
  switch (c) {
    case Column::coop_comms:
    case Column::coop_no_comms: return Phase::cooperative;
    case Column::si_adv:
    case Column::si_no_adv: return Phase::self_interested;
    case Column::readapt_adv: return Phase::readapt;
  }
  return Phase::cooperative;
}

CommVariant column_variant(Column c) {
  switch (c) {
    case Column::coop_comms:
    case Column::si_adv:
    case Column::readapt_adv: return CommVariant::with_comms;
    case Column::coop_no_comms: return CommVariant::no_comms;
    case Column::si_no_adv: return CommVariant::mask_si_outgoing;
  }
  return CommVariant::with_comms;
}

std::optional<Column> column_for(Phase p, CommVariant v) {
  for (auto c : kColumns)
    if (column_phase(c) == p && column_variant(c) == v) return c;
  return std::nullopt;
}

std::optional<Column> column_parent(Column c) {
  switch (c) {
    case Column::si_adv:
    case Column::si_no_adv: return Column::coop_comms;
    case Column::readapt_adv: return Column::si_adv;
    default: return std::nullopt;
  }
}

// ---------------------------------------------------------------------------
// configuration

ExperimentConfig ExperimentConfig::for_task(gridworld::Task t) {
  ExperimentConfig c;
  switch (t) {
    case gridworld::Task::coverage: c.env = gridworld::EnvConfig::coverage(); break;
    case gridworld::Task::split_coverage: c.env = gridworld::EnvConfig::split_coverage(); break;
    case gridworld::Task::path_planning: c.env = gridworld::EnvConfig::path_planning(); break;
  }
  c.trainer = t == gridworld::Task::path_planning ? trainer::TrainerConfig::path_planning() : trainer::TrainerConfig::coverage();
  c.arch = trainer::arch_for(c.env);
  return c;
}

std::string ExperimentConfig::row_label() const { return label.empty() ? gridworld::to_string(env.task) : label; }

int ExperimentConfig::horizon() const { return eval_horizon.value_or(gridworld::default_eval_horizon(env)); }

std::vector<Column> ExperimentConfig::columns() const {
  std::set<Column> out;
  for (auto p : phases)
    for (auto v : variants)
      if (auto c = column_for(p, v)) out.insert(*c);
  return {out.begin(), out.end()};
}

std::vector<Column> ExperimentConfig::runs() const {
  std::set<Column> out;
  for (auto c : columns()) {
    for (std::optional<Column> k = c; k; k = column_parent(*k)) out.insert(*k);
  }
  // enum order puts parents first
  return {out.begin(), out.end()};
}

void ExperimentConfig::validate() const {
  env.validate();
  trainer.validate();
  if (eval_episodes == 0) throw std::invalid_argument("experiment: eval_episodes must be positive");
  if (horizon() < 1) throw std::invalid_argument("experiment: eval horizon must be positive");
  if (seeds.empty()) throw std::invalid_argument("experiment: no seeds");
  if (si_agent < 0 || si_agent >= env.n_agents) throw std::invalid_argument("experiment: si_agent out of range");
  if (columns().empty()) throw std::invalid_argument("experiment: phases and variants select no result column");
  if (arch.fov_w != static_cast<std::size_t>(env.fov_w) || arch.fov_h != static_cast<std::size_t>(env.fov_h))
    throw std::invalid_argument("experiment: network window differs from the environment's field of view");
}

void to_json(json& j, const ExperimentConfig& c) {
  j = json::object();
  j["label"] = c.label;
  j["task"] = gridworld::to_string(c.env.task);
  j["env"] = c.env;
  j["arch"] = c.arch;
  j["trainer"] = c.trainer;
  j["variants"] = json::array();
  for (auto v : c.variants) j["variants"].push_back(to_string(v));
  j["phases"] = json::array();
  for (auto p : c.phases) j["phases"].push_back(trainer::to_string(p));
  j["eval_episodes"] = c.eval_episodes;
  j["eval_horizon"] = c.eval_horizon ? json(*c.eval_horizon) : json(nullptr);
  j["eval_seed"] = c.eval_seed;
  j["greedy"] = c.greedy;
  j["si_agent"] = c.si_agent;
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir.string();
}

void from_json(const json& j, ExperimentConfig& c) {
  std::string task = "coverage";
  if (j.contains("task")) {
    task = j.at("task").get<std::string>();
  } else if (j.contains("env") && j.at("env").contains("task")) {
    task = j.at("env").at("task").get<std::string>();
  }
  c = ExperimentConfig::for_task(gridworld::task_from_string(task));
  if (j.contains("env")) {
    json e = j.at("env");
    e["task"] = task;
    c.env = e.get<gridworld::EnvConfig>();
  }
  if (j.contains("trainer")) j.at("trainer").get_to(c.trainer);
  if (j.contains("arch")) j.at("arch").get_to(c.arch);
  c.arch = trainer::arch_for(c.env, c.arch);
  c.label = j.value("label", std::string{});
  if (j.contains("variants")) {
    c.variants.clear();
    for (const auto& v : j.at("variants")) c.variants.push_back(comm_variant_from_string(v.get<std::string>()));
  }
  if (j.contains("phases")) {
    c.phases.clear();
    for (const auto& p : j.at("phases")) c.phases.push_back(trainer::phase_from_string(p.get<std::string>()));
  }
  c.eval_episodes = j.value("eval_episodes", c.eval_episodes);
  if (j.contains("eval_horizon") && !j.at("eval_horizon").is_null()) c.eval_horizon = j.at("eval_horizon").get<int>();
  c.eval_seed = j.value("eval_seed", c.eval_seed);
  c.greedy = j.value("greedy", c.greedy);
  c.si_agent = j.value("si_agent", c.si_agent);
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.output_dir = j.value("output_dir", std::string{});
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("config " + path.string() + ": " + e.what());
  }
  return j.get<ExperimentConfig>();
}

std::string fnv1a_hex(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const ExperimentConfig& c) {
  json j = c;
  j.erase("output_dir");
  return fnv1a_hex(j.dump() + "\n" + kCodeVersion);
}

fs::path default_output_root() {
  if (const char* v = std::getenv("ADVCOMM_OUT"); v && *v) return v;
  return "runs";
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void to_json(json& j, const RunManifest& m) {
  j = json{{"hash", m.hash},       {"seeds", m.seeds},       {"checkpoints", m.checkpoints},
           {"code_version", m.code_version}, {"started", m.started}, {"finished", m.finished},
           {"config", m.config}};
}

void from_json(const json& j, RunManifest& m) {
  m.hash = j.at("hash").get<std::string>();
  m.seeds = j.value("seeds", std::vector<std::uint64_t>{});
  m.checkpoints = j.value("checkpoints", std::map<std::string, std::string>{});
  m.code_version = j.value("code_version", std::string{});
  m.started = j.value("started", std::string{});
  m.finished = j.value("finished", std::string{});
  m.config = j.value("config", json{});
}

// ---------------------------------------------------------------------------
// evaluation

namespace {

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// population standard deviation
double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

double group_mean(const std::vector<double>& r, const policy::Assignment& asg, policy::Group g) {
  const auto m = asg.members(g);
  if (m.empty()) return 0.0;
  double s = 0.0;
  for (auto i : m) s += r[i];
  return s / static_cast<double>(m.size());
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json j;
  in >> j;
  return j;
}

}  // namespace

void to_json(json& j, const EvalStats& e) {
  j = json{{"variant", to_string(e.variant)},
           {"episodes", e.episodes},
           {"horizon", e.horizon},
           {"seed", e.seed},
           {"greedy", e.greedy},
           {"has_si", e.has_si},
           {"episode_coop", e.episode_coop},
           {"episode_si", e.episode_si},
           {"mean_coop", e.mean_coop},
           {"std_coop", e.std_coop},
           {"mean_si", e.mean_si},
           {"std_si", e.std_si},
           {"curve_coop", e.curve_coop},
           {"curve_coop_std", e.curve_coop_std},
           {"curve_si", e.curve_si},
           {"curve_si_std", e.curve_si_std},
           {"manifest", e.manifest}};
}

void from_json(const json& j, EvalStats& e) {
  e.variant = comm_variant_from_string(j.at("variant").get<std::string>());
  e.episodes = j.at("episodes").get<std::size_t>();
  e.horizon = j.at("horizon").get<int>();
  e.seed = j.at("seed").get<std::uint64_t>();
  e.greedy = j.value("greedy", false);
  e.has_si = j.at("has_si").get<bool>();
  e.episode_coop = j.at("episode_coop").get<std::vector<double>>();
  e.episode_si = j.at("episode_si").get<std::vector<double>>();
  e.mean_coop = j.at("mean_coop").get<double>();
  e.std_coop = j.at("std_coop").get<double>();
  e.mean_si = j.at("mean_si").get<double>();
  e.std_si = j.at("std_si").get<double>();
  e.curve_coop = j.value("curve_coop", std::vector<double>{});
  e.curve_coop_std = j.value("curve_coop_std", std::vector<double>{});
  e.curve_si = j.value("curve_si", std::vector<double>{});
  e.curve_si_std = j.value("curve_si_std", std::vector<double>{});
  e.manifest = j.value("manifest", std::string{});
}

EvalStats evaluate_checkpoint(const trainer::Checkpoint& ck, const gridworld::EnvConfig& env, CommVariant variant,
                              std::size_t episodes, int horizon, std::uint64_t seed, bool greedy) {
  if (static_cast<std::size_t>(env.n_agents) != ck.assignment.size()) {
    throw std::invalid_argument("evaluate_checkpoint: checkpoint has " + std::to_string(ck.assignment.size()) +
                                " agents, environment " + std::to_string(env.n_agents));
  }
  if (env.task != ck.env.task) {
    throw std::invalid_argument("evaluate_checkpoint: checkpoint was trained on " + gridworld::to_string(ck.env.task) +
                                ", environment is " + gridworld::to_string(env.task));
  }
  if (ck.arch.fov_w != static_cast<std::size_t>(env.fov_w) || ck.arch.fov_h != static_cast<std::size_t>(env.fov_h) ||
      ck.arch.world_w != static_cast<std::size_t>(env.width) || ck.arch.world_h != static_cast<std::size_t>(env.height))
    throw std::invalid_argument("evaluate_checkpoint: observation shapes differ between checkpoint and environment");
  if (episodes == 0) throw std::invalid_argument("evaluate_checkpoint: no episodes requested");

  auto cfg = env;
  if (ck.assignment.si_agent()) cfg.si_agent = static_cast<int>(*ck.assignment.si_agent());
  const trainer::PolicyView view{ck.params, ck.arch, ck.assignment};
  auto res = trainer::evaluate(cfg, view, comm_mode(variant), episodes, horizon, seed, greedy);

  EvalStats s;
  s.variant = variant;
  s.episodes = episodes;
  s.horizon = horizon;
  s.seed = seed;
  s.greedy = greedy;
  s.has_si = res.has_si;
  for (const auto& r : res.returns) {
    s.episode_coop.push_back(group_mean(r, ck.assignment, policy::Group::cooperative));
    if (s.has_si) s.episode_si.push_back(group_mean(r, ck.assignment, policy::Group::self_interested));
  }
  s.mean_coop = mean_of(s.episode_coop);
  s.std_coop = std_of(s.episode_coop);
  s.mean_si = mean_of(s.episode_si);
  s.std_si = std_of(s.episode_si);
  s.curve_coop = res.curve_coop;
  s.curve_coop_std = res.curve_coop_std;
  s.curve_si = res.curve_si;
  s.curve_si_std = res.curve_si_std;
  return s;
}

// ---------------------------------------------------------------------------
// results table

namespace {

const char* kColumnTitles[5] = {"w/ comms", "w/o comms", "w/ adv comms", "w/o adv comms", "w/ adv comms"};

std::string cell_text(const Cell& c) {
  switch (c.state) {
    case Cell::State::not_applicable: return "N/A";
    case Cell::State::missing: return "MISSING";
    case Cell::State::value: {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.2f +- %.2f", c.mean, c.std);
      return buf;
    }
  }
  return "?";
}

std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

}  // namespace

bool ResultsTable::complete() const {
  for (const auto& r : rows) {
    auto it = cells.find(r);
    if (it == cells.end()) return false;
    for (const auto& g : it->second)
      for (const auto& c : g)
        if (c.state == Cell::State::missing) return false;
  }
  return true;
}

std::string ResultsTable::render() const {
  constexpr std::size_t w1 = 6, wc = 18;
  std::size_t w0 = 16;
  for (const auto& r : rows) w0 = std::max(w0, r.size() + 2);
  std::ostringstream o;
  o << pad("", w0 + w1) << "| " << pad("Cooperative", 2 * wc + 2) << "| " << pad("Introduction of SI agent", 2 * wc + 2)
    << "| Re-adaptation\n";
  o << pad("Task", w0) << pad("Group", w1);
  for (std::size_t c = 0; c < 5; ++c) o << "| " << pad(kColumnTitles[c], wc);
  o << "\n";
  o << std::string(w0 + w1 + 5 * (wc + 2), '-') << "\n";
  for (const auto& r : rows) {
    auto it = cells.find(r);
    for (int g = 0; g < 2; ++g) {
      o << pad(g == 0 ? r : "", w0) << pad(g == 0 ? "C" : "SI", w1);
      for (std::size_t c = 0; c < 5; ++c) o << "| " << pad(it == cells.end() ? "MISSING" : cell_text(it->second[g][c]), wc);
      o << "\n";
    }
  }
  o << "manifest " << manifest << "\n";
  return o.str();
}

void to_json(json& j, const ResultsTable& t) {
  j = json::object();
  j["manifest"] = t.manifest;
  j["rows"] = t.rows;
  j["columns"] = json::array();
  for (auto c : kColumns) j["columns"].push_back(column_key(c));
  json cells = json::object();
  for (const auto& [row, groups] : t.cells) {
    json r = json::object();
    for (int g = 0; g < 2; ++g) {
      json gj = json::object();
      for (std::size_t c = 0; c < 5; ++c) {
        const auto& cell = groups[g][c];
        if (cell.state == Cell::State::value) {
          gj[column_key(kColumns[c])] = json{{"mean", cell.mean}, {"std", cell.std}};
        } else {
          gj[column_key(kColumns[c])] = cell.state == Cell::State::not_applicable ? "N/A" : "MISSING";
        }
      }
      r[g == 0 ? "C" : "SI"] = gj;
    }
    cells[row] = r;
  }
  j["cells"] = cells;
}

void from_json(const json& j, ResultsTable& t) {
  t = {};
  t.manifest = j.value("manifest", std::string{});
  t.rows = j.at("rows").get<std::vector<std::string>>();
  for (const auto& [row, r] : j.at("cells").items()) {
    auto& groups = t.cells[row];
    for (int g = 0; g < 2; ++g) {
      const auto& gj = r.at(g == 0 ? "C" : "SI");
      for (std::size_t c = 0; c < 5; ++c) {
        Cell cell;
        const auto key = column_key(kColumns[c]);
        if (!gj.contains(key)) {
          cell.state = Cell::State::missing;
        } else if (gj.at(key).is_object()) {
          cell.state = Cell::State::value;
          cell.mean = gj.at(key).at("mean").get<double>();
          cell.std = gj.at(key).at("std").get<double>();
        } else {
          cell.state = gj.at(key).get<std::string>() == "N/A" ? Cell::State::not_applicable : Cell::State::missing;
        }
        groups[g][c] = cell;
      }
    }
  }
}

ResultsTable render_results_table(const std::vector<ColumnResult>& results, const std::vector<std::string>& rows,
                                  const std::string& manifest) {
  ResultsTable t;
  t.rows = rows;
  t.manifest = manifest;
  for (const auto& row : rows) {
    auto& groups = t.cells[row];
    for (std::size_t c = 0; c < 5; ++c) {
      const Column col = kColumns[c];
      std::vector<double> coop, si;
      bool found = false, si_seen = false;
      for (const auto& r : results) {
        if (r.row != row || r.column != col || r.per_seed.empty()) continue;
        found = true;
        for (const auto& e : r.per_seed) {
          coop.insert(coop.end(), e.episode_coop.begin(), e.episode_coop.end());
          if (e.has_si) {
            si_seen = true;
            si.insert(si.end(), e.episode_si.begin(), e.episode_si.end());
          }
        }
      }
      Cell cc, cs;
      if (found && !coop.empty()) cc = {Cell::State::value, mean_of(coop), std_of(coop)};
      if (column_phase(col) == Phase::cooperative) {
        cs.state = Cell::State::not_applicable;
      } else if (found && si_seen && !si.empty()) {
        cs = {Cell::State::value, mean_of(si), std_of(si)};
      }
      groups[0][c] = cc;
      groups[1][c] = cs;
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// experiments

fs::path checkpoint_path(const fs::path& dir, std::uint64_t seed, Column c) {
  return dir / ("seed_" + std::to_string(seed)) / (column_key(c) + ".ckpt");
}

fs::path eval_path(const fs::path& dir, std::uint64_t seed, Column c) {
  return dir / ("seed_" + std::to_string(seed)) / ("eval_" + column_key(c) + ".json");
}

fs::path log_path(const fs::path& dir, std::uint64_t seed, Column c) {
  return dir / ("seed_" + std::to_string(seed)) / ("train_" + column_key(c) + ".jsonl");
}

namespace {

// The self-interested agent is known to the world (global state, placement)
// from the phase that introduces it. A lone left-half placement also holds
// during cooperative training so the team learns in the same geometry.
gridworld::EnvConfig env_for(const ExperimentConfig& cfg, Column c) {
  auto e = cfg.env;
  const bool lone = e.layout == gridworld::Layout::split_disconnected && e.si_placement == gridworld::SiPlacement::left;
  if (column_phase(c) != Phase::cooperative || lone) {
    e.si_agent = cfg.si_agent;
  } else {
    e.si_agent.reset();
  }
  return e;
}

std::uint64_t phase_seed(std::uint64_t seed, Phase p) {
  // both variants of a phase share the seed, so the comparison is paired
  return trainer::mix_seed(seed, 0x9000 + static_cast<std::uint64_t>(p));
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const Progress& progress, bool resume) {
  cfg.validate();
  auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };
  ExperimentResult res;
  auto& man = res.manifest;
  man.hash = config_hash(cfg);
  man.seeds = cfg.seeds;
  man.started = utc_now();
  man.config = cfg;
  const fs::path dir = cfg.output_dir.empty() ? default_output_root() / (cfg.row_label() + "-" + man.hash.substr(0, 8))
                                              : cfg.output_dir;
  fs::create_directories(dir);
  man.config["output_dir"] = dir.string();

  std::vector<ColumnResult> cols;
  for (auto c : cfg.columns()) cols.push_back({cfg.row_label(), c, {}});

  for (auto seed : cfg.seeds) {
    SeedResult sr;
    sr.seed = seed;
    std::map<Column, trainer::Checkpoint> cks;
    for (auto c : cfg.runs()) {
      const auto path = checkpoint_path(dir, seed, c);
      bool loaded = false;
      if (resume && fs::exists(path) && fs::exists(fs::path(path.string() + ".json"))) {
        auto ck = trainer::load_checkpoint(path);
        if (ck.meta.value("manifest", std::string{}) == man.hash) {
          cks[c] = std::move(ck);
          loaded = true;
          say("seed " + std::to_string(seed) + " " + column_key(c) + ": reusing " + path.string());
        }
      }
      if (!loaded) {
        trainer::PhaseSpec spec;
        spec.env = env_for(cfg, c);
        spec.arch = cfg.arch;
        spec.trainer = cfg.trainer;
        spec.si_agent = static_cast<std::size_t>(cfg.si_agent);
        spec.mode = comm_mode(column_variant(c));
        spec.seed = phase_seed(seed, column_phase(c));
        const trainer::Checkpoint* prior = nullptr;
        if (auto p = column_parent(c)) prior = &cks.at(*p);
        const auto lp = log_path(dir, seed, c);
        fs::create_directories(lp.parent_path());
        std::ofstream log(lp);
        say("seed " + std::to_string(seed) + " " + column_key(c) + ": training " + trainer::to_string(column_phase(c)) +
            " (" + to_string(column_variant(c)) + ")");
        auto ck = trainer::run_phase(column_phase(c), spec, prior, [&](const json& rec) {
          json r = rec;
          r["manifest"] = man.hash;
          r["seed"] = seed;
          r["column"] = column_key(c);
          log << r.dump() << "\n";
          log.flush();
        });
        ck.meta["manifest"] = man.hash;
        ck.meta["column"] = column_key(c);
        trainer::save_checkpoint(path, ck);
        cks[c] = std::move(ck);
      }
      sr.checkpoints[c] = path;
      man.checkpoints["seed_" + std::to_string(seed) + "/" + column_key(c)] = path.string();
    }
    for (std::size_t k = 0; k < cols.size(); ++k) {
      const auto c = cols[k].column;
      say("seed " + std::to_string(seed) + " " + column_key(c) + ": evaluating " + std::to_string(cfg.eval_episodes) +
          " episodes");
      auto ev = evaluate_checkpoint(cks.at(c), env_for(cfg, c), column_variant(c), cfg.eval_episodes, cfg.horizon(),
                                    trainer::mix_seed(cfg.eval_seed, seed), cfg.greedy);
      ev.manifest = man.hash;
      write_json(eval_path(dir, seed, c), ev);
      cols[k].per_seed.push_back(ev);
      sr.evals[c] = std::move(ev);
    }
    res.seeds.push_back(std::move(sr));
  }

  res.table = render_results_table(cols, {cfg.row_label()}, man.hash);
  {
    std::ofstream t(dir / "table.txt");
    t << res.table.render();
  }
  write_json(dir / "table.json", res.table);
  man.finished = utc_now();
  write_json(dir / "manifest.json", man);
  for (const auto& w : emit_plots(dir)) say("warning: " + w);
  return res;
}

ResultsTable table_from_run(const fs::path& run_dir) {
  const RunManifest man = read_json(run_dir / "manifest.json").get<RunManifest>();
  const auto cfg = man.config.get<ExperimentConfig>();
  std::vector<ColumnResult> cols;
  for (auto c : kColumns) {
    ColumnResult r{cfg.row_label(), c, {}};
    for (auto seed : man.seeds) {
      const auto p = eval_path(run_dir, seed, c);
      if (fs::exists(p)) r.per_seed.push_back(read_json(p).get<EvalStats>());
    }
    cols.push_back(std::move(r));
  }
  return render_results_table(cols, {cfg.row_label()}, man.hash);
}

}  // namespace advcomm::harness
