#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "advcomm/graphnet.hpp"
#include "advcomm/harness.hpp"
#include "advcomm/interpreter.hpp"

namespace advcomm::harness {

namespace {

using diffcore::ParamTree;
using diffcore::Tape;
using diffcore::Tensor;

policy::ArchConfig tiny_arch() {
  policy::ArchConfig a;
  a.fov_w = a.fov_h = 5;
  a.conv_channels = {3};
  a.feature = 5;
  a.hops = 2;
  a.head_hidden = 6;
  a.world_w = a.world_h = 6;
  a.critic_hidden = 6;
  return a;
}

Tensor<double> gaussian_tensor(diffcore::Shape s, std::mt19937_64& rng) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = diffcore::gaussian(rng);
  return t;
}

std::string fmt_err(double e) {
  std::ostringstream o;
  o << "max rel err " << e;
  return o.str();
}

CheckResult gradient_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto a = tiny_arch();
  const policy::Assignment asg(3, 2);
  auto p = policy::init_params<double>(a, asg, seed + 1);
  // a zero-initialized output layer would hide gradient errors upstream
  p.at("actor.coop.head.fc1.w") = gaussian_tensor({a.head_hidden, policy::kNumActions}, rng);
  p.at("actor.si.head.fc1.w") = gaussian_tensor({a.head_hidden, policy::kNumActions}, rng);
  Tensor<double> obs({2, 3, a.obs_channels, a.fov_w, a.fov_h});
  for (auto& v : obs.data()) v = static_cast<double>(rng() % 2);
  auto glob = gaussian_tensor({2, 3, a.global_channels, a.world_w, a.world_h}, rng);
  auto s = graphnet::stack_shifts<double>(std::vector<graphnet::GraphShiftOperator>(
      2, policy::shift_for({{0, 1}, {1, 2}}, asg, policy::CommMode::full)));
  const std::vector<std::size_t> acts{0, 3, 4, 1, 2, 2};
  auto target = gaussian_tensor({6}, rng);

  diffcore::GradCheckConfig cfg;
  cfg.max_per_param = 3;
  cfg.seed = seed;
  auto actor = diffcore::grad_check(p.subtree("actor."), [&](Tape<double>& t, const ParamTree<double>& q) {
    auto out = policy::actor_forward(t, q, a, asg, obs, s);
    return diffcore::sum(diffcore::pick(out.log_probs, acts));
  }, cfg);
  auto critic = diffcore::grad_check(p.subtree("critic."), [&](Tape<double>& t, const ParamTree<double>& q) {
    return diffcore::mse(policy::critic_forward(t, q, a, asg, obs, glob), t.constant(target));
  }, cfg);

  const auto da = interpreter::DecoderArch::for_target(4, 5, 5, 3);
  auto dp = interpreter::init_decoder<double>(da, seed + 2);
  auto x = gaussian_tensor({2, 4}, rng);
  Tensor<double> y({2, 5, 5}), m({2, 5, 5});
  for (std::size_t k = 0; k < y.size(); ++k) {
    y[k] = static_cast<double>(rng() % 2);
    m[k] = rng() % 4 ? 1.0 : 0.0;
  }
  auto dec = diffcore::grad_check(dp, [&](Tape<double>& t, const ParamTree<double>& q) {
    return diffcore::bce_with_mask(interpreter::decoder_logits(t, q, da, x), y, m);
  }, cfg);

  CheckResult r{"gradient", actor.pass && critic.pass && dec.pass, ""};
  r.detail = "actor " + fmt_err(actor.max_rel_err) + ", critic " + fmt_err(critic.max_rel_err) + ", decoder " +
             fmt_err(dec.max_rel_err);
  return r;
}

CheckResult equivalence_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double worst_local = 0.0, worst_shared = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t N = 1 + rng() % 8, K = rng() % 4, F = 1 + rng() % 4, G = 1 + rng() % 4;
    std::vector<graphnet::Edge> edges;
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = i + 1; j < N; ++j)
        if (rng() % 3 == 0) edges.emplace_back(i, j);
    auto S = graphnet::build_shift_operator(edges, N);
    if (N > 1 && rng() % 2) S = S.mask_outgoing(rng() % N);
    ParamTree<double> params;
    graphnet::init_bank(params, "a.", K, F, G, rng);
    graphnet::init_bank(params, "b.", K, F, G, rng);
    std::vector<std::size_t> in_a, in_b;
    for (std::size_t i = 0; i < N; ++i) (rng() % 2 ? in_a : in_b).push_back(i);
    auto x = gaussian_tensor({1, N, F}, rng);

    Tape<double> tape(false);
    const auto st = graphnet::stack_shifts<double>({S});
    const auto central =
        graphnet::hetero_graph_conv(tape.constant(x), st, params, {{"a.", in_a}, {"b.", in_b}}, K).value();
    auto bank_a = graphnet::bank_from_params(params, "a.", K), bank_b = graphnet::bank_from_params(params, "b.", K);
    std::vector<const graphnet::DenseBank*> bank_of(N, &bank_b);
    for (auto i : in_a) bank_of[i] = &bank_a;
    Eigen::MatrixXd xm(static_cast<long>(N), static_cast<long>(F));
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t f = 0; f < F; ++f) xm(static_cast<long>(i), static_cast<long>(f)) = x[i * F + f];
    const Eigen::MatrixXd local = graphnet::decentralized_layer(xm, S, bank_of);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t g = 0; g < G; ++g)
        worst_local = std::max(worst_local, std::abs(local(static_cast<long>(i), static_cast<long>(g)) - central[i * G + g]));

    // identical banks must reproduce the homogeneous convolution
    ParamTree<double> same;
    for (std::size_t k = 0; k <= K; ++k) {
      same.set(graphnet::tap_path("a.", k), params.at(graphnet::tap_path("a.", k)));
      same.set(graphnet::tap_path("b.", k), params.at(graphnet::tap_path("a.", k)));
    }
    Tape<double> t2(false);
    const auto hetero = graphnet::hetero_graph_conv(t2.constant(x), st, same, {{"a.", in_a}, {"b.", in_b}}, K).value();
    const auto homo = graphnet::graph_conv(t2.constant(x), st, same, "a.", K).value();
    for (std::size_t k = 0; k < homo.size(); ++k) worst_shared = std::max(worst_shared, std::abs(hetero[k] - homo[k]));
  }
  CheckResult r{"equivalence", worst_local <= 1e-6 && worst_shared <= 1e-9, ""};
  std::ostringstream o;
  o << "local vs central " << worst_local << ", shared banks vs homogeneous " << worst_shared;
  r.detail = o.str();
  return r;
}

CheckResult conservation_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::size_t bad = 0, episodes = 0, collisions = 0;
  gridworld::EnvConfig c;
  c.width = c.height = 8;
  c.n_agents = 3;
  c.obstacle_fraction = 0.3;
  c.fov_w = c.fov_h = 5;
  c.horizon = 40;
  for (int e = 0; e < 100; ++e, ++episodes) {
    c.seed = seed + static_cast<std::uint64_t>(e);
    c.training_mode = e % 2 == 0;
    gridworld::Environment env(c);
    const int before = env.covered_target_count();
    double team = 0.0;
    while (!env.done()) {
      std::vector<int> a(3);
      for (auto& v : a) v = static_cast<int>(rng() % gridworld::kNumActions);
      for (double r : env.step(a).rewards) team += r;
    }
    if (team != static_cast<double>(env.covered_target_count() - before)) ++bad;
  }
  auto pc = gridworld::EnvConfig::path_planning();
  pc.n_agents = 8;
  for (int e = 0; e < 20; ++e) {
    pc.seed = seed + 500 + static_cast<std::uint64_t>(e);
    gridworld::Environment env(pc);
    while (!env.done()) {
      std::vector<int> a(8);
      for (auto& v : a) v = static_cast<int>(rng() % gridworld::kNumActions);
      env.step(a);
      std::set<std::pair<int, int>> cells;
      for (auto q : env.state().positions) cells.insert({q.x, q.y});
      if (cells.size() != env.state().positions.size()) ++collisions;
    }
  }
  CheckResult r{"conservation", bad == 0 && collisions == 0, ""};
  r.detail = std::to_string(episodes) + " coverage episodes, " + std::to_string(bad) + " with return != new cells; " +
             std::to_string(collisions) + " path collisions";
  return r;
}

CheckResult determinism_suite(std::uint64_t seed) {
  gridworld::EnvConfig c;
  c.width = c.height = 6;
  c.n_agents = 3;
  c.obstacle_fraction = 0.2;
  c.fov_w = c.fov_h = 5;
  c.horizon = 12;
  const auto a = trainer::arch_for(c, tiny_arch());
  const policy::Assignment asg(3);
  const auto p = policy::init_params<float>(a, asg, seed);
  const trainer::PolicyView view{p, a, asg};
  auto one = trainer::collect_rollouts(c, view, policy::CommMode::full, 60, 3, seed);
  auto two = trainer::collect_rollouts(c, view, policy::CommMode::full, 60, 3, seed);
  bool same = one.episode_returns == two.episode_returns && one.env_steps == two.env_steps;
  trainer::TrainerConfig tc;
  tc.batch_size = 60;
  tc.minibatch_size = 20;
  tc.sgd_iters = 2;
  auto q1 = p, q2 = p;
  trainer::OptimizerState o1(tc), o2(tc);
  const auto est = trainer::estimate(one, tc.gamma, tc.lambda);
  trainer::ppo_update(q1, o1, one, est, a, asg, Phase::cooperative, tc, seed);
  trainer::ppo_update(q2, o2, one, est, a, asg, Phase::cooperative, tc, seed);
  for (const auto& path : q1.paths()) same = same && q1.at(path) == q2.at(path);
  return {"determinism", same, same ? "rollouts and one update bitwise equal" : "reruns differ"};
}

}  // namespace

std::vector<CheckResult> run_selfcheck(std::uint64_t seed) {
  return {gradient_suite(seed), equivalence_suite(seed), conservation_suite(seed), determinism_suite(seed)};
}

}  // namespace advcomm::harness
