#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "advcomm/diffcore.hpp"
#include "advcomm/gridworld.hpp"
#include "advcomm/policy.hpp"

namespace advcomm::policy {
void to_json(nlohmann::json& j, const ArchConfig& a);
void from_json(const nlohmann::json& j, ArchConfig& a);
}  // namespace advcomm::policy

namespace advcomm::trainer {

using diffcore::ParamTree;
using diffcore::Tape;
using diffcore::Tensor;
using diffcore::Var;
using policy::Assignment;
using policy::CommMode;
using policy::Group;

enum class Phase { cooperative, self_interested, readapt };

std::string to_string(Phase p);
Phase phase_from_string(const std::string& s);

struct TrainerConfig {
  double lr = 5e-4;
  double gamma = 0.9;
  double clip = 0.2;
  double lambda = 0.95;
  std::size_t batch_size = 5000;
  std::size_t minibatch_size = 1000;
  std::size_t sgd_iters = 5;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  bool normalize_advantages = true;
  double clip_norm = 0.5;
  std::size_t steps_cooperative = 200000;
  std::size_t steps_self_interested = 400000;
  std::size_t steps_readapt = 200000;
  // environments stepped in lockstep during collection
  std::size_t n_envs = 8;
  // evaluation snapshots during training; 0 disables
  std::size_t eval_every = 0;
  std::size_t eval_episodes = 10;

  static TrainerConfig coverage() { return {}; }
  static TrainerConfig path_planning() {
    TrainerConfig c;
    c.lr = 4e-4;
    c.gamma = 0.99;
    return c;
  }
  std::size_t steps_for(Phase p) const;
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainerConfig& c);
void from_json(const nlohmann::json& j, TrainerConfig& c);

/// Network shapes matching an environment configuration.
policy::ArchConfig arch_for(const gridworld::EnvConfig& env, policy::ArchConfig base = {});

// ---------------------------------------------------------------------------
// advantage estimation

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// One agent's segment. `bootstrap` is V(s_T) and is used only when the
/// segment was cut off rather than terminated.
GaeResult compute_gae(const std::vector<double>& rewards, const std::vector<double>& values, double bootstrap,
                      bool terminal, double gamma, double lambda);

// ---------------------------------------------------------------------------
// rollouts

struct Step {
  Tensor<float> obs;     // [N,2,fw,fh]
  Tensor<float> global;  // [N,5,W,H]
  Tensor<float> shift;   // [N,N]
  std::vector<graphnet::Edge> edges;
  std::vector<int> actions;
  std::vector<double> log_probs;
  std::vector<double> rewards;
  std::vector<double> values;
};

struct Trajectory {
  std::vector<Step> steps;
  bool terminal = false;
  bool complete = false;           // the episode ended inside this segment
  std::vector<double> bootstrap;   // V(s_T) per agent for cut-off segments
  std::uint64_t episode_seed = 0;
};

struct RolloutBatch {
  std::vector<Trajectory> trajectories;
  std::size_t env_steps = 0;
  // per completed episode, per agent
  std::vector<std::vector<double>> episode_returns;
};

struct PolicyView {
  const ParamTree<float>& params;
  const policy::ArchConfig& arch;
  const Assignment& assignment;
};

/// Runs cfg.n_envs environments in lockstep until at least n_steps steps are
/// gathered. Single-threaded and bitwise reproducible for a fixed seed.
RolloutBatch collect_rollouts(const gridworld::EnvConfig& env_cfg, const PolicyView& pol, CommMode mode,
                              std::size_t n_steps, std::size_t n_envs, std::uint64_t seed);

/// Per-step, per-agent advantage and return targets for a batch.
struct Estimates {
  std::vector<std::vector<std::vector<double>>> adv;  // [traj][t][agent]
  std::vector<std::vector<std::vector<double>>> ret;
};
Estimates estimate(const RolloutBatch& batch, double gamma, double lambda);

/// The advantage each phase ascends: the sum over cooperative agents for the
/// cooperative and re-adaptation phases, the self-interested agent's own
/// advantage otherwise.
double group_advantage(const std::vector<double>& per_agent, const Assignment& asg, Phase phase);

/// Agents whose parameters a phase trains.
Group trained_group(Phase phase);
policy::Trainable trainable_for(Phase phase);

// ---------------------------------------------------------------------------
// surrogate objectives, shared with the tabular checks

/// sum_rows min(rho * A, clip(rho, 1-eps, 1+eps) * A) with rho = exp(logp - old).
/// logp [R], old and adv [R] constants.
template <typename T>
Var<T> clipped_surrogate(Var<T> logp, const Tensor<T>& old_logp, const Tensor<T>& adv, double eps) {
  Tensor<T> neg(old_logp.shape());
  for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -old_logp[i];
  auto ratio = diffcore::exp(diffcore::add_const(logp, neg));
  auto s1 = diffcore::mul_const(ratio, adv);
  auto s2 = diffcore::mul_const(diffcore::clamp(ratio, static_cast<T>(1.0 - eps), static_cast<T>(1.0 + eps)), adv);
  return diffcore::sum(diffcore::minimum(s1, s2));
}

/// Mean entropy of the rows of log_probs [R,A] selected by mask [R].
template <typename T>
Var<T> masked_entropy(Var<T> log_probs, const Tensor<T>& mask) {
  auto p = diffcore::exp(log_probs);
  auto h = diffcore::scale(diffcore::row_sum(diffcore::mul(p, log_probs)), T{-1});
  double count = 0.0;
  for (T m : mask.data()) count += static_cast<double>(m);
  return diffcore::scale(diffcore::sum(diffcore::mul_const(h, mask)), static_cast<T>(count > 0 ? 1.0 / count : 0.0));
}

struct UpdateMetrics {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;
  std::size_t minibatches = 0;
};

/// Optimizer state kept across iterations of one phase.
struct OptimizerState {
  diffcore::Optimizer<float> actor;
  diffcore::Optimizer<float> critic;
  explicit OptimizerState(const TrainerConfig& cfg);
};

/// PPO pass over a batch for the given phase. Only the trained group's actor
/// and critic subtrees change; every other parameter is left bit-identical.
UpdateMetrics ppo_update(ParamTree<float>& params, OptimizerState& opt, const RolloutBatch& batch, const Estimates& est,
                         const policy::ArchConfig& arch, const Assignment& asg, Phase phase, const TrainerConfig& cfg,
                         std::uint64_t seed);

// ---------------------------------------------------------------------------
// evaluation

struct EvalResult {
  // per episode, per agent
  std::vector<std::vector<double>> returns;
  // per group: mean cumulative per-agent reward after step t, and its std over episodes
  std::vector<double> curve_coop, curve_coop_std, curve_si, curve_si_std;
  double mean_coop = 0.0, std_coop = 0.0, mean_si = 0.0, std_si = 0.0;
  bool has_si = false;
};

/// Fixed-horizon evaluation with early termination disabled. Episode k uses
/// environment seed `seed + k`.
EvalResult evaluate(const gridworld::EnvConfig& env_cfg, const PolicyView& pol, CommMode mode, std::size_t episodes,
                    int horizon, std::uint64_t seed, bool greedy = false, std::size_t n_envs = 10);

// ---------------------------------------------------------------------------
// checkpoints and phases

struct Checkpoint {
  ParamTree<float> params;
  policy::ArchConfig arch;
  Assignment assignment;
  gridworld::EnvConfig env;
  Phase phase = Phase::cooperative;
  nlohmann::json meta;
};

/// Writes `path` (parameter tree) and `path + ".json"` (assignment, shapes,
/// environment and free-form metadata).
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct PhaseSpec {
  gridworld::EnvConfig env;
  policy::ArchConfig arch;
  TrainerConfig trainer;
  std::size_t si_agent = 0;
  CommMode mode = CommMode::full;
  std::uint64_t seed = 0;
  // overrides the phase's step budget when set
  std::optional<std::size_t> steps;
};

using LogSink = std::function<void(const nlohmann::json&)>;

/// Cooperative starts from scratch; the other phases need `prior`.
/// self_interested copies the cooperative actor into the self-interested slot
/// and gives it a fresh critic; readapt freezes the self-interested agent.
Checkpoint run_phase(Phase phase, const PhaseSpec& spec, const Checkpoint* prior, const LogSink& log = {});

/// Deterministic 64-bit mixing used to derive sub-seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace advcomm::trainer
