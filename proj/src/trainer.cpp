#include "advcomm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace advcomm::policy {

void to_json(nlohmann::json& j, const ArchConfig& a) {
  j = nlohmann::json{{"obs_channels", a.obs_channels},   {"fov_w", a.fov_w},
                     {"fov_h", a.fov_h},                 {"conv_channels", a.conv_channels},
                     {"feature", a.feature},             {"hops", a.hops},
                     {"gnn_layers", a.gnn_layers},       {"head_hidden", a.head_hidden},
                     {"global_channels", a.global_channels}, {"world_w", a.world_w},
                     {"world_h", a.world_h},             {"critic_hidden", a.critic_hidden}};
}

void from_json(const nlohmann::json& j, ArchConfig& a) {
  const ArchConfig d = a;
  a.obs_channels = j.value("obs_channels", d.obs_channels);
  a.fov_w = j.value("fov_w", d.fov_w);
  a.fov_h = j.value("fov_h", d.fov_h);
  a.conv_channels = j.value("conv_channels", d.conv_channels);
  a.feature = j.value("feature", d.feature);
  a.hops = j.value("hops", d.hops);
  a.gnn_layers = j.value("gnn_layers", d.gnn_layers);
  a.head_hidden = j.value("head_hidden", d.head_hidden);
  a.global_channels = j.value("global_channels", d.global_channels);
  a.world_w = j.value("world_w", d.world_w);
  a.world_h = j.value("world_h", d.world_h);
  a.critic_hidden = j.value("critic_hidden", d.critic_hidden);
}

}  // namespace advcomm::policy

namespace advcomm::trainer {

namespace {

using gridworld::Environment;

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// population standard deviation
double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size()));
}

double group_mean(const std::vector<double>& per_agent, const Assignment& asg, Group g) {
  const auto members = asg.members(g);
  if (members.empty()) return 0.0;
  double s = 0.0;
  for (auto i : members) s += per_agent[i];
  return s / static_cast<double>(members.size());
}

struct StepInputs {
  Tensor<float> obs, global, shift;
  std::vector<std::vector<graphnet::Edge>> edges;
};

StepInputs gather(const std::vector<Environment*>& envs, const policy::ArchConfig& arch, const Assignment& asg,
                  CommMode mode, bool with_global) {
  const std::size_t B = envs.size(), N = asg.size();
  StepInputs in;
  in.obs = Tensor<float>({B, N, arch.obs_channels, arch.fov_w, arch.fov_h});
  in.shift = Tensor<float>({B, N, N});
  if (with_global) in.global = Tensor<float>({B, N, arch.global_channels, arch.world_w, arch.world_h});
  const std::size_t per_obs = N * arch.obs_channels * arch.fov_w * arch.fov_h;
  const std::size_t per_glob = arch.global_channels * arch.world_w * arch.world_h;
  for (std::size_t b = 0; b < B; ++b) {
    auto o = envs[b]->observe_all();
    std::copy(o.raw(), o.raw() + per_obs, in.obs.raw() + b * per_obs);
    auto edges = envs[b]->comm_graph();
    const auto s = policy::shift_for(edges, asg, mode);
    for (std::size_t k = 0; k < N * N; ++k) in.shift[b * N * N + k] = static_cast<float>(s.matrix()[k]);
    in.edges.push_back(std::move(edges));
    if (with_global) {
      for (std::size_t i = 0; i < N; ++i) {
        auto g = envs[b]->global_state(static_cast<int>(i));
        std::copy(g.raw(), g.raw() + per_glob, in.global.raw() + (b * N + i) * per_glob);
      }
    }
  }
  return in;
}

template <typename T>
Tensor<T> slice_leading(const Tensor<T>& t, std::size_t b) {
  diffcore::Shape s(t.shape().begin() + 1, t.shape().end());
  const std::size_t n = t.size() / t.dim(0);
  return Tensor<T>(s, std::vector<T>(t.raw() + b * n, t.raw() + (b + 1) * n));
}

std::vector<double> critic_values(const PolicyView& pol, const StepInputs& in) {
  Tape<float> tape(false);
  auto v = policy::critic_forward(tape, pol.params, pol.arch, pol.assignment, in.obs, in.global);
  std::vector<double> out;
  for (float x : v.value().data()) out.push_back(x);
  return out;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string to_string(Phase p) {
  switch (p) {
    case Phase::cooperative: return "cooperative";
    case Phase::self_interested: return "self_interested";
    case Phase::readapt: return "readapt";
  }
  return "?";
}

Phase phase_from_string(const std::string& s) {
  if (s == "cooperative") return Phase::cooperative;
  if (s == "self_interested") return Phase::self_interested;
  if (s == "readapt") return Phase::readapt;
  throw std::invalid_argument("unknown phase '" + s + "'");
}

std::size_t TrainerConfig::steps_for(Phase p) const {
  switch (p) {
    case Phase::cooperative: return steps_cooperative;
    case Phase::self_interested: return steps_self_interested;
    case Phase::readapt: return steps_readapt;
  }
  return 0;
}

void TrainerConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("trainer config: " + m); };
  if (!(gamma >= 0.0 && gamma < 1.0)) fail("gamma must lie in [0,1)");
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail("lambda must lie in [0,1]");
  if (!(clip > 0.0)) fail("clip must be positive");
  if (!(lr > 0.0)) fail("learning rate must be positive");
  if (batch_size == 0 || minibatch_size == 0 || minibatch_size > batch_size) fail("need 0 < minibatch <= batch");
  if (sgd_iters == 0) fail("sgd_iters must be positive");
  if (n_envs == 0) fail("n_envs must be positive");
}

void to_json(nlohmann::json& j, const TrainerConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"gamma", c.gamma},
                     {"clip", c.clip},
                     {"lambda", c.lambda},
                     {"batch_size", c.batch_size},
                     {"minibatch_size", c.minibatch_size},
                     {"sgd_iters", c.sgd_iters},
                     {"entropy_coef", c.entropy_coef},
                     {"value_coef", c.value_coef},
                     {"normalize_advantages", c.normalize_advantages},
                     {"clip_norm", c.clip_norm},
                     {"steps_cooperative", c.steps_cooperative},
                     {"steps_self_interested", c.steps_self_interested},
                     {"steps_readapt", c.steps_readapt},
                     {"n_envs", c.n_envs},
                     {"eval_every", c.eval_every},
                     {"eval_episodes", c.eval_episodes}};
}

void from_json(const nlohmann::json& j, TrainerConfig& c) {
  const TrainerConfig d = c;
  c.lr = j.value("lr", d.lr);
  c.gamma = j.value("gamma", d.gamma);
  c.clip = j.value("clip", d.clip);
  c.lambda = j.value("lambda", d.lambda);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.minibatch_size = j.value("minibatch_size", d.minibatch_size);
  c.sgd_iters = j.value("sgd_iters", d.sgd_iters);
  c.entropy_coef = j.value("entropy_coef", d.entropy_coef);
  c.value_coef = j.value("value_coef", d.value_coef);
  c.normalize_advantages = j.value("normalize_advantages", d.normalize_advantages);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.steps_cooperative = j.value("steps_cooperative", d.steps_cooperative);
  c.steps_self_interested = j.value("steps_self_interested", d.steps_self_interested);
  c.steps_readapt = j.value("steps_readapt", d.steps_readapt);
  c.n_envs = j.value("n_envs", d.n_envs);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.eval_episodes = j.value("eval_episodes", d.eval_episodes);
}

policy::ArchConfig arch_for(const gridworld::EnvConfig& env, policy::ArchConfig base) {
  base.obs_channels = 2;
  base.fov_w = static_cast<std::size_t>(env.fov_w);
  base.fov_h = static_cast<std::size_t>(env.fov_h);
  base.global_channels = Environment::kGlobalChannels;
  base.world_w = static_cast<std::size_t>(env.width);
  base.world_h = static_cast<std::size_t>(env.height);
  return base;
}

GaeResult compute_gae(const std::vector<double>& rewards, const std::vector<double>& values, double bootstrap,
                      bool terminal, double gamma, double lambda) {
  if (rewards.size() != values.size()) {
    throw std::invalid_argument("compute_gae: " + std::to_string(rewards.size()) + " rewards vs " +
                                std::to_string(values.size()) + " values");
  }
  const std::size_t T = rewards.size();
  GaeResult r;
  r.advantages.assign(T, 0.0);
  r.returns.assign(T, 0.0);
  double next_value = terminal ? 0.0 : bootstrap;
  double next_adv = 0.0;
  for (std::size_t t = T; t-- > 0;) {
    const double delta = rewards[t] + gamma * next_value - values[t];
    next_adv = delta + gamma * lambda * next_adv;
    r.advantages[t] = next_adv;
    r.returns[t] = next_adv + values[t];
    next_value = values[t];
  }
  return r;
}

RolloutBatch collect_rollouts(const gridworld::EnvConfig& env_cfg, const PolicyView& pol, CommMode mode,
                              std::size_t n_steps, std::size_t n_envs, std::uint64_t seed) {
  if (n_steps == 0) throw std::invalid_argument("collect_rollouts: n_steps must be positive");
  if (n_envs == 0) throw std::invalid_argument("collect_rollouts: n_envs must be positive");
  if (static_cast<std::size_t>(env_cfg.n_agents) != pol.assignment.size()) {
    throw std::invalid_argument("collect_rollouts: environment has " + std::to_string(env_cfg.n_agents) +
                                " agents, policy expects " + std::to_string(pol.assignment.size()));
  }
  const std::size_t E = std::min(n_envs, n_steps);
  const std::size_t per_env = (n_steps + E - 1) / E;
  const std::size_t N = pol.assignment.size();

  std::vector<Environment> envs;
  std::vector<std::uint64_t> episode_count(E, 0), episode_seed(E, 0);
  for (std::size_t e = 0; e < E; ++e) {
    auto c = env_cfg;
    c.seed = mix_seed(seed, e << 32);
    episode_seed[e] = c.seed;
    envs.emplace_back(c);
  }
  std::vector<Environment*> ptrs;
  for (auto& e : envs) ptrs.push_back(&e);

  RolloutBatch batch;
  std::vector<Trajectory> open(E);
  std::vector<std::vector<double>> running(E, std::vector<double>(N, 0.0));
  for (std::size_t e = 0; e < E; ++e) open[e].episode_seed = episode_seed[e];
  std::mt19937_64 rng(mix_seed(seed, 0xa11ce));

  for (std::size_t step = 0; step < per_env; ++step) {
    auto in = gather(ptrs, pol.arch, pol.assignment, mode, true);
    Tape<float> tape(false);
    auto out = policy::actor_forward(tape, pol.params, pol.arch, pol.assignment, in.obs, in.shift);
    auto values = policy::critic_forward(tape, pol.params, pol.arch, pol.assignment, in.obs, in.global);
    auto sample = policy::sample_actions(out.log_probs.value(), rng);

    std::vector<std::size_t> finished, cut;
    for (std::size_t e = 0; e < E; ++e) {
      Step st;
      st.obs = slice_leading(in.obs, e);
      st.global = slice_leading(in.global, e);
      st.shift = slice_leading(in.shift, e);
      st.edges = in.edges[e];
      st.actions.assign(sample.actions.begin() + static_cast<long>(e * N), sample.actions.begin() + static_cast<long>((e + 1) * N));
      st.log_probs.assign(sample.log_probs.begin() + static_cast<long>(e * N),
                          sample.log_probs.begin() + static_cast<long>((e + 1) * N));
      for (std::size_t i = 0; i < N; ++i) st.values.push_back(values.value()[e * N + i]);
      auto r = envs[e].step(st.actions);
      st.rewards = r.rewards;
      for (std::size_t i = 0; i < N; ++i) {
        if (!std::isfinite(r.rewards[i]))
          throw std::runtime_error("collect_rollouts: non-finite reward after " + std::to_string(batch.env_steps) + " steps");
        running[e][i] += r.rewards[i];
      }
      open[e].steps.push_back(std::move(st));
      ++batch.env_steps;
      if (r.done) {
        finished.push_back(e);
        if (envs[e].state().t >= env_cfg.horizon) cut.push_back(e);
      }
    }

    // time-limit endings bootstrap from the critic before the reset
    std::vector<double> boot;
    if (!cut.empty()) {
      std::vector<Environment*> sub;
      for (auto e : cut) sub.push_back(ptrs[e]);
      boot = critic_values(pol, gather(sub, pol.arch, pol.assignment, mode, true));
    }
    for (auto e : finished) {
      auto& tr = open[e];
      tr.complete = true;
      const auto it = std::find(cut.begin(), cut.end(), e);
      tr.terminal = it == cut.end();
      tr.bootstrap.assign(N, 0.0);
      if (!tr.terminal) {
        const auto k = static_cast<std::size_t>(it - cut.begin());
        for (std::size_t i = 0; i < N; ++i) tr.bootstrap[i] = boot[k * N + i];
      }
      batch.trajectories.push_back(std::move(tr));
      batch.episode_returns.push_back(running[e]);
      running[e].assign(N, 0.0);
      episode_seed[e] = mix_seed(seed, (e << 32) | ++episode_count[e]);
      envs[e].reset(episode_seed[e]);
      open[e] = Trajectory{};
      open[e].episode_seed = episode_seed[e];
    }
  }

  // segments still running are cut off at the current state
  std::vector<std::size_t> pending;
  std::vector<Environment*> sub;
  for (std::size_t e = 0; e < E; ++e)
    if (!open[e].steps.empty()) {
      pending.push_back(e);
      sub.push_back(ptrs[e]);
    }
  if (!pending.empty()) {
    auto boot = critic_values(pol, gather(sub, pol.arch, pol.assignment, mode, true));
    for (std::size_t k = 0; k < pending.size(); ++k) {
      auto& tr = open[pending[k]];
      tr.bootstrap.assign(boot.begin() + static_cast<long>(k * N), boot.begin() + static_cast<long>((k + 1) * N));
      batch.trajectories.push_back(std::move(tr));
    }
  }
  return batch;
}

Estimates estimate(const RolloutBatch& batch, double gamma, double lambda) {
  Estimates est;
  for (const auto& tr : batch.trajectories) {
    const std::size_t T = tr.steps.size();
    const std::size_t N = T ? tr.steps[0].rewards.size() : 0;
    std::vector<std::vector<double>> adv(T, std::vector<double>(N)), ret(T, std::vector<double>(N));
    for (std::size_t i = 0; i < N; ++i) {
      std::vector<double> r(T), v(T);
      for (std::size_t t = 0; t < T; ++t) {
        r[t] = tr.steps[t].rewards[i];
        v[t] = tr.steps[t].values[i];
      }
      auto g = compute_gae(r, v, tr.bootstrap.empty() ? 0.0 : tr.bootstrap[i], tr.terminal, gamma, lambda);
      for (std::size_t t = 0; t < T; ++t) {
        adv[t][i] = g.advantages[t];
        ret[t][i] = g.returns[t];
      }
    }
    est.adv.push_back(std::move(adv));
    est.ret.push_back(std::move(ret));
  }
  return est;
}

Group trained_group(Phase phase) {
  return phase == Phase::self_interested ? Group::self_interested : Group::cooperative;
}

policy::Trainable trainable_for(Phase phase) {
  const bool coop = trained_group(phase) == Group::cooperative;
  return policy::Trainable{coop, !coop};
}

double group_advantage(const std::vector<double>& per_agent, const Assignment& asg, Phase phase) {
  if (phase == Phase::self_interested) {
    if (!asg.si_agent()) throw std::invalid_argument("group_advantage: no self-interested agent assigned");
    return per_agent.at(*asg.si_agent());
  }
  double s = 0.0;
  for (auto i : asg.members(Group::cooperative)) s += per_agent.at(i);
  return s;
}

OptimizerState::OptimizerState(const TrainerConfig& cfg)
    : actor(diffcore::OptimizerConfig{diffcore::OptimizerKind::adam, cfg.lr, 0.9, 0.999, 1e-8, cfg.clip_norm, true}),
      critic(diffcore::OptimizerConfig{diffcore::OptimizerKind::adam, cfg.lr, 0.9, 0.999, 1e-8, cfg.clip_norm, true}) {}

UpdateMetrics ppo_update(ParamTree<float>& params, OptimizerState& opt, const RolloutBatch& batch, const Estimates& est,
                         const policy::ArchConfig& arch, const Assignment& asg, Phase phase, const TrainerConfig& cfg,
                         std::uint64_t seed) {
  const std::size_t N = asg.size();
  const Group g = trained_group(phase);
  const auto tr = trainable_for(phase);

  struct Ref {
    std::size_t traj, t;
    double adv;
  };
  std::vector<Ref> refs;
  for (std::size_t k = 0; k < batch.trajectories.size(); ++k)
    for (std::size_t t = 0; t < batch.trajectories[k].steps.size(); ++t)
      refs.push_back({k, t, group_advantage(est.adv[k][t], asg, phase)});
  if (refs.empty()) throw std::invalid_argument("ppo_update: empty batch");

  if (cfg.normalize_advantages && refs.size() > 1) {
    std::vector<double> a;
    for (const auto& r : refs) a.push_back(r.adv);
    const double m = mean_of(a), s = std_of(a);
    for (auto& r : refs) r.adv = (r.adv - m) / (s + 1e-8);
  }

  std::vector<float> row_mask(N, 0.0f);
  for (auto i : asg.members(g)) row_mask[i] = 1.0f;

  const auto& s0 = batch.trajectories[refs[0].traj].steps[refs[0].t];
  const std::size_t per_obs = s0.obs.size(), per_glob = s0.global.size();

  UpdateMetrics m;
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(refs.size());
  std::iota(order.begin(), order.end(), 0);
  double clipped = 0.0, rows_seen = 0.0;
  for (std::size_t it = 0; it < cfg.sgd_iters; ++it) {
    diffcore::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.minibatch_size) {
      const std::size_t M = std::min(cfg.minibatch_size, order.size() - start);
      Tensor<float> obs({M, N, arch.obs_channels, arch.fov_w, arch.fov_h});
      Tensor<float> glob({M, N, arch.global_channels, arch.world_w, arch.world_h});
      Tensor<float> shift({M, N, N});
      Tensor<float> old({M * N}), adv({M * N}), ret({M * N}), mask({M * N});
      std::vector<std::size_t> acts(M * N);
      for (std::size_t b = 0; b < M; ++b) {
        const auto& r = refs[order[start + b]];
        const auto& st = batch.trajectories[r.traj].steps[r.t];
        std::copy(st.obs.raw(), st.obs.raw() + per_obs, obs.raw() + b * per_obs);
        std::copy(st.global.raw(), st.global.raw() + per_glob, glob.raw() + b * per_glob);
        std::copy(st.shift.raw(), st.shift.raw() + N * N, shift.raw() + b * N * N);
        for (std::size_t i = 0; i < N; ++i) {
          old[b * N + i] = static_cast<float>(st.log_probs[i]);
          adv[b * N + i] = static_cast<float>(r.adv);
          ret[b * N + i] = static_cast<float>(est.ret[r.traj][r.t][i]);
          mask[b * N + i] = row_mask[i];
          acts[b * N + i] = static_cast<std::size_t>(st.actions[i]);
        }
      }

      Tape<float> tape;
      auto out = policy::actor_forward(tape, params, arch, asg, obs, shift, tr);
      auto picked = diffcore::pick(out.log_probs, acts);
      auto surr = diffcore::scale(clipped_surrogate(picked, old, adv, cfg.clip), 1.0f / static_cast<float>(M));
      auto ent = masked_entropy(out.log_probs, mask);
      auto v = policy::critic_forward(tape, params, arch, asg, obs, glob, tr);
      auto d = diffcore::add_const(v, [&] {
        Tensor<float> n(ret.shape());
        for (std::size_t k = 0; k < n.size(); ++k) n[k] = -ret[k];
        return n;
      }());
      double count = 0.0;
      for (float x : mask.data()) count += x;
      auto vloss = diffcore::scale(diffcore::sum(diffcore::mul_const(diffcore::mul(d, d), mask)),
                                   static_cast<float>(1.0 / count));
      auto objective = diffcore::sub(
          diffcore::add(surr, diffcore::scale(ent, static_cast<float>(cfg.entropy_coef))),
          diffcore::scale(vloss, static_cast<float>(cfg.value_coef)));
      if (!std::isfinite(objective.value().item())) {
        throw std::runtime_error("ppo_update: non-finite loss in minibatch " + std::to_string(m.minibatches) +
                                 " (sgd iteration " + std::to_string(it) + ")");
      }
      tape.backward(objective);
      auto grads = tape.gradients(params);

      for (const auto& prefix : {policy::actor_prefix(g), policy::critic_prefix(g)}) {
        auto sub = params.subtree(prefix);
        auto gsub = grads.subtree(prefix);
        const double norm = (prefix[0] == 'a' ? opt.actor : opt.critic).step(sub, gsub);
        if (prefix[0] == 'a') m.grad_norm = norm;
        params.merge(sub);
      }

      for (std::size_t k = 0; k < M * N; ++k) {
        const double ratio = std::exp(static_cast<double>(picked.value()[k]) - old[k]);
        clipped += std::abs(ratio - 1.0) > cfg.clip;
      }
      rows_seen += static_cast<double>(M * N);
      m.policy_loss += -surr.value().item();
      m.value_loss += vloss.value().item();
      m.entropy += ent.value().item();
      ++m.minibatches;
    }
  }
  const double mb = static_cast<double>(std::max<std::size_t>(m.minibatches, 1));
  m.policy_loss /= mb;
  m.value_loss /= mb;
  m.entropy /= mb;
  m.clip_fraction = rows_seen > 0 ? clipped / rows_seen : 0.0;
  return m;
}

EvalResult evaluate(const gridworld::EnvConfig& env_cfg, const PolicyView& pol, CommMode mode, std::size_t episodes,
                    int horizon, std::uint64_t seed, bool greedy, std::size_t n_envs) {
  if (static_cast<std::size_t>(env_cfg.n_agents) != pol.assignment.size()) {
    throw std::invalid_argument("evaluate: environment has " + std::to_string(env_cfg.n_agents) +
                                " agents, checkpoint has " + std::to_string(pol.assignment.size()));
  }
  if (horizon < 1) throw std::invalid_argument("evaluate: horizon must be positive");
  const std::size_t N = pol.assignment.size();
  const auto H = static_cast<std::size_t>(horizon);
  auto cfg = env_cfg;
  cfg.training_mode = false;
  cfg.horizon = horizon;

  EvalResult res;
  res.has_si = pol.assignment.si_agent().has_value();
  // cumulative per-agent group reward after each step, per episode
  std::vector<std::vector<double>> cum_coop, cum_si;
  std::mt19937_64 rng(mix_seed(seed, 0xe7a1));
  for (std::size_t first = 0; first < episodes; first += n_envs) {
    const std::size_t E = std::min(n_envs, episodes - first);
    std::vector<Environment> envs;
    for (std::size_t e = 0; e < E; ++e) {
      auto c = cfg;
      c.seed = seed + first + e;
      envs.emplace_back(c);
    }
    std::vector<Environment*> ptrs;
    for (auto& e : envs) ptrs.push_back(&e);
    std::vector<std::vector<double>> ret(E, std::vector<double>(N, 0.0));
    std::vector<std::vector<double>> cc(E, std::vector<double>(H)), cs(E, std::vector<double>(H));
    for (std::size_t t = 0; t < H; ++t) {
      auto in = gather(ptrs, pol.arch, pol.assignment, mode, false);
      Tape<float> tape(false);
      auto out = policy::actor_forward(tape, pol.params, pol.arch, pol.assignment, in.obs, in.shift);
      auto sample = policy::sample_actions(out.log_probs.value(), rng, greedy);
      for (std::size_t e = 0; e < E; ++e) {
        std::vector<int> a(sample.actions.begin() + static_cast<long>(e * N), sample.actions.begin() + static_cast<long>((e + 1) * N));
        auto r = envs[e].step(a);
        for (std::size_t i = 0; i < N; ++i) ret[e][i] += r.rewards[i];
        cc[e][t] = group_mean(ret[e], pol.assignment, Group::cooperative);
        cs[e][t] = res.has_si ? group_mean(ret[e], pol.assignment, Group::self_interested) : 0.0;
      }
    }
    for (std::size_t e = 0; e < E; ++e) {
      res.returns.push_back(ret[e]);
      cum_coop.push_back(cc[e]);
      cum_si.push_back(cs[e]);
    }
  }

  std::vector<double> coop, si;
  for (const auto& r : res.returns) {
    coop.push_back(group_mean(r, pol.assignment, Group::cooperative));
    if (res.has_si) si.push_back(group_mean(r, pol.assignment, Group::self_interested));
  }
  res.mean_coop = mean_of(coop);
  res.std_coop = std_of(coop);
  res.mean_si = mean_of(si);
  res.std_si = std_of(si);
  for (std::size_t t = 0; t < H && !res.returns.empty(); ++t) {
    std::vector<double> a, b;
    for (std::size_t e = 0; e < cum_coop.size(); ++e) {
      a.push_back(cum_coop[e][t]);
      b.push_back(cum_si[e][t]);
    }
    res.curve_coop.push_back(mean_of(a));
    res.curve_coop_std.push_back(std_of(a));
    if (res.has_si) {
      res.curve_si.push_back(mean_of(b));
      res.curve_si_std.push_back(std_of(b));
    }
  }
  return res;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  diffcore::save_checkpoint(path, ck.params);
  nlohmann::json j;
  j["assignment"] = {{"n_agents", ck.assignment.size()}};
  j["assignment"]["si_agent"] = ck.assignment.si_agent() ? nlohmann::json(*ck.assignment.si_agent()) : nlohmann::json(nullptr);
  j["arch"] = ck.arch;
  j["env"] = ck.env;
  j["phase"] = to_string(ck.phase);
  j["meta"] = ck.meta;
  std::ofstream os(path.string() + ".json");
  if (!os) throw std::runtime_error("save_checkpoint: cannot write " + path.string() + ".json");
  os << j.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Checkpoint ck;
  ck.params = diffcore::load_checkpoint<float>(path);
  std::ifstream is(path.string() + ".json");
  if (!is) throw std::runtime_error("load_checkpoint: missing sidecar " + path.string() + ".json");
  const auto j = nlohmann::json::parse(is);
  const auto& a = j.at("assignment");
  std::optional<std::size_t> si;
  if (!a.at("si_agent").is_null()) si = a.at("si_agent").get<std::size_t>();
  ck.assignment = Assignment(a.at("n_agents").get<std::size_t>(), si);
  ck.arch = j.at("arch").get<policy::ArchConfig>();
  ck.env = j.at("env").get<gridworld::EnvConfig>();
  ck.phase = phase_from_string(j.at("phase").get<std::string>());
  ck.meta = j.value("meta", nlohmann::json::object());
  return ck;
}

Checkpoint run_phase(Phase phase, const PhaseSpec& spec, const Checkpoint* prior, const LogSink& log) {
  spec.trainer.validate();
  spec.env.validate();
  const auto N = static_cast<std::size_t>(spec.env.n_agents);
  Checkpoint ck;
  ck.arch = spec.arch;
  ck.env = spec.env;
  ck.phase = phase;

  if (phase == Phase::cooperative) {
    ck.assignment = Assignment(N);
    ck.params = policy::init_params<float>(spec.arch, ck.assignment, mix_seed(spec.seed, 1));
  } else {
    if (!prior) throw std::invalid_argument("run_phase: " + to_string(phase) + " needs a prior checkpoint");
    if (prior->assignment.size() != N) {
      throw std::invalid_argument("run_phase: prior checkpoint has " + std::to_string(prior->assignment.size()) +
                                  " agents, environment has " + std::to_string(N));
    }
    ck.params = prior->params;
    if (phase == Phase::self_interested) {
      if (prior->params.subtree("actor.coop.").empty())
        throw std::invalid_argument("run_phase: prior checkpoint has no cooperative actor");
      ck.assignment = Assignment(N, spec.si_agent);
      policy::erase_prefix(ck.params, "actor.si.");
      policy::erase_prefix(ck.params, "critic.si.");
      for (const auto& [path, t] : prior->params.subtree("actor.coop."))
        ck.params.set("actor.si." + path.substr(std::string("actor.coop.").size()), t);
      std::mt19937_64 rng(mix_seed(spec.seed, 2));
      policy::init_critic(ck.params, spec.arch, Group::self_interested, rng);
    } else {
      if (!prior->assignment.si_agent() || prior->params.subtree("actor.si.").empty())
        throw std::invalid_argument("run_phase: readapt needs a checkpoint with a self-interested agent");
      ck.assignment = prior->assignment;
    }
  }

  OptimizerState opt(spec.trainer);
  const std::size_t budget = spec.steps.value_or(spec.trainer.steps_for(phase));
  const std::size_t iterations = std::max<std::size_t>(1, (budget + spec.trainer.batch_size - 1) / spec.trainer.batch_size);
  std::size_t env_steps = 0;
  const int eval_horizon = gridworld::default_eval_horizon(spec.env);
  for (std::size_t it = 0; it < iterations; ++it) {
    const PolicyView view{ck.params, ck.arch, ck.assignment};
    auto batch = collect_rollouts(spec.env, view, spec.mode, spec.trainer.batch_size, spec.trainer.n_envs,
                                  mix_seed(spec.seed, 1000 + it));
    auto est = estimate(batch, spec.trainer.gamma, spec.trainer.lambda);
    auto m = ppo_update(ck.params, opt, batch, est, ck.arch, ck.assignment, phase, spec.trainer,
                        mix_seed(spec.seed, 500000 + it));
    env_steps += batch.env_steps;

    nlohmann::json rec{{"phase", to_string(phase)},      {"iteration", it},
                       {"env_steps", env_steps},         {"policy_loss", m.policy_loss},
                       {"value_loss", m.value_loss},     {"entropy", m.entropy},
                       {"clip_fraction", m.clip_fraction}, {"episodes", batch.episode_returns.size()}};
    std::vector<double> coop, si;
    for (const auto& r : batch.episode_returns) {
      coop.push_back(group_mean(r, ck.assignment, Group::cooperative));
      if (ck.assignment.si_agent()) si.push_back(group_mean(r, ck.assignment, Group::self_interested));
    }
    rec["mean_return_coop"] = coop.empty() ? nlohmann::json(nullptr) : nlohmann::json(mean_of(coop));
    rec["mean_return_si"] = si.empty() ? nlohmann::json(nullptr) : nlohmann::json(mean_of(si));
    const bool last = it + 1 == iterations;
    if (spec.trainer.eval_every && ((it + 1) % spec.trainer.eval_every == 0 || last)) {
      const PolicyView after{ck.params, ck.arch, ck.assignment};
      auto ev = evaluate(spec.env, after, spec.mode, spec.trainer.eval_episodes, eval_horizon,
                         mix_seed(spec.seed, 900000 + it));
      rec["eval_coop"] = ev.mean_coop;
      rec["eval_coop_std"] = ev.std_coop;
      if (ev.has_si) {
        rec["eval_si"] = ev.mean_si;
        rec["eval_si_std"] = ev.std_si;
      }
    }
    if (log) log(rec);
  }
  ck.meta["env_steps"] = env_steps;
  ck.meta["seed"] = spec.seed;
  ck.meta["comm_mode"] = policy::to_string(spec.mode);
  return ck;
}

}  // namespace advcomm::trainer
