#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "advcomm/diffcore.hpp"
#include "advcomm/graphnet.hpp"

namespace advcomm::policy {

using diffcore::ParamTree;
using diffcore::Shape;
using diffcore::Tape;
using diffcore::Tensor;
using diffcore::Var;

inline constexpr std::size_t kNumActions = 5;

enum class Group : std::uint8_t { cooperative, self_interested };
enum class CommMode { full, no_comms, mask_si_outgoing };

inline std::string to_string(CommMode m) {
  switch (m) {
    case CommMode::full: return "full";
    case CommMode::no_comms: return "no_comms";
    case CommMode::mask_si_outgoing: return "mask_si_outgoing";
  }
  return "?";
}

inline CommMode comm_mode_from_string(const std::string& s) {
  if (s == "full" || s == "with_comms") return CommMode::full;
  if (s == "no_comms") return CommMode::no_comms;
  if (s == "mask_si_outgoing") return CommMode::mask_si_outgoing;
  throw std::invalid_argument("unknown comm mode '" + s + "'");
}

inline std::string group_key(Group g) { return g == Group::cooperative ? "coop" : "si"; }

/// Which agents run the shared cooperative parameters and which one runs its own.
class Assignment {
 public:
  Assignment() = default;
  explicit Assignment(std::size_t n, std::optional<std::size_t> si = std::nullopt) : groups_(n, Group::cooperative), si_(si) {
    if (si) {
      if (*si >= n) throw std::out_of_range("assignment: self-interested agent " + std::to_string(*si) + " out of range");
      groups_[*si] = Group::self_interested;
    }
  }

  std::size_t size() const { return groups_.size(); }
  Group group(std::size_t i) const { return groups_.at(i); }
  std::optional<std::size_t> si_agent() const { return si_; }

  std::vector<std::size_t> members(Group g) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < groups_.size(); ++i)
      if (groups_[i] == g) out.push_back(i);
    return out;
  }
  std::vector<Group> present() const {
    std::vector<Group> out;
    if (!members(Group::cooperative).empty()) out.push_back(Group::cooperative);
    if (si_) out.push_back(Group::self_interested);
    return out;
  }

  bool operator==(const Assignment&) const = default;

 private:
  std::vector<Group> groups_;
  std::optional<std::size_t> si_;
};

struct ArchConfig {
  std::size_t obs_channels = 2;
  std::size_t fov_w = 11;
  std::size_t fov_h = 11;
  // 3x3 convolutions; a final conv with `feature` channels follows, then a dense map
  std::vector<std::size_t> conv_channels{16, 32};
  std::size_t feature = 64;
  std::size_t hops = 3;
  std::size_t gnn_layers = 1;
  std::size_t head_hidden = 64;
  std::size_t global_channels = 5;
  std::size_t world_w = 24;
  std::size_t world_h = 24;
  std::size_t critic_hidden = 64;
};

/// Which groups receive gradients; frozen groups are still evaluated.
struct Trainable {
  bool coop = true;
  bool si = true;
  bool of(Group g) const { return g == Group::cooperative ? coop : si; }
};

inline std::string actor_prefix(Group g) { return "actor." + group_key(g) + "."; }
inline std::string critic_prefix(Group g) { return "critic." + group_key(g) + "."; }

inline std::string gnn_prefix(Group g, std::size_t layer, std::size_t layers) {
  return actor_prefix(g) + (layers == 1 ? "gnn." : "gnn.l" + std::to_string(layer) + ".");
}

namespace detail {

template <typename T>
void init_dense(ParamTree<T>& p, const std::string& prefix, std::size_t in, std::size_t out, double gain,
                std::mt19937_64& rng) {
  p.set(prefix + "w", diffcore::orthogonal<T>(in, out, gain, rng));
  p.set(prefix + "b", Tensor<T>({out}));
}

template <typename T>
void init_conv(ParamTree<T>& p, const std::string& prefix, std::size_t in, std::size_t out, double gain,
               std::mt19937_64& rng) {
  p.set(prefix + "w", diffcore::orthogonal<T>(out, in * 9, gain, rng).reshaped({out, in, 3, 3}));
  p.set(prefix + "b", Tensor<T>({out}));
}

}  // namespace detail

/// Conv stack + dense map to `feature`. Pooling (2x average) sits between conv
/// layers while both spatial dims are at least 2.
template <typename T>
void init_cnn(ParamTree<T>& p, const std::string& prefix, std::size_t in_ch, std::size_t h, std::size_t w,
              const ArchConfig& a, std::mt19937_64& rng) {
  const double g = std::sqrt(2.0);
  std::vector<std::size_t> chans = a.conv_channels;
  chans.push_back(a.feature);
  std::size_t c = in_ch;
  for (std::size_t l = 0; l < chans.size(); ++l) {
    detail::init_conv(p, prefix + "conv" + std::to_string(l) + ".", c, chans[l], g, rng);
    c = chans[l];
    if (l + 1 < chans.size() && h >= 2 && w >= 2) {
      h /= 2;
      w /= 2;
    }
  }
  detail::init_dense(p, prefix + "fc.", c * h * w, a.feature, g, rng);
}

/// x [R,C,H,W] -> [R,feature]
template <typename T>
Var<T> cnn(Var<T> x, const ParamTree<T>& p, const std::string& prefix, const ArchConfig& a, bool trainable) {
  auto& tape = *x.tape;
  const std::size_t layers = a.conv_channels.size() + 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto base = prefix + "conv" + std::to_string(l) + ".";
    x = diffcore::leaky_relu(diffcore::conv2d(x, tape.param(p, base + "w", trainable), tape.param(p, base + "b", trainable), 1));
    const auto& s = x.shape();
    if (l + 1 < layers && s[2] >= 2 && s[3] >= 2) x = diffcore::avgpool2x(x);
  }
  const auto& s = x.shape();
  x = diffcore::reshape(x, {s[0], s[1] * s[2] * s[3]});
  return diffcore::leaky_relu(
      diffcore::dense(x, tape.param(p, prefix + "fc.w", trainable), tape.param(p, prefix + "fc.b", trainable)));
}

template <typename T>
void init_actor(ParamTree<T>& p, const ArchConfig& a, Group g, std::mt19937_64& rng) {
  const auto pre = actor_prefix(g);
  init_cnn(p, pre + "enc.", a.obs_channels, a.fov_w, a.fov_h, a, rng);
  for (std::size_t l = 0; l < a.gnn_layers; ++l)
    graphnet::init_bank(p, gnn_prefix(g, l, a.gnn_layers), a.hops, a.feature, a.feature, rng);
  detail::init_dense(p, pre + "head.fc0.", a.feature, a.head_hidden, std::sqrt(2.0), rng);
  detail::init_dense(p, pre + "head.fc1.", a.head_hidden, kNumActions, 0.01, rng);
}

template <typename T>
void init_critic(ParamTree<T>& p, const ArchConfig& a, Group g, std::mt19937_64& rng) {
  const auto pre = critic_prefix(g);
  init_cnn(p, pre + "local.", a.obs_channels, a.fov_w, a.fov_h, a, rng);
  init_cnn(p, pre + "global.", a.global_channels, a.world_w, a.world_h, a, rng);
  detail::init_dense(p, pre + "head.fc0.", 2 * a.feature, a.critic_hidden, std::sqrt(2.0), rng);
  detail::init_dense(p, pre + "head.fc1.", a.critic_hidden, 1, 1.0, rng);
}

/// Removes every entry under `prefix`.
template <typename T>
void erase_prefix(ParamTree<T>& p, const std::string& prefix) {
  for (const auto& path : p.subtree(prefix).paths()) p.erase(path);
}

/// Fresh actor and critic parameters for every group present in `asg`.
template <typename T>
ParamTree<T> init_params(const ArchConfig& a, const Assignment& asg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamTree<T> p;
  for (Group g : asg.present()) {
    init_actor(p, a, g, rng);
    init_critic(p, a, g, rng);
  }
  return p;
}

/// Shift operator for one step under a communication mode.
inline graphnet::GraphShiftOperator shift_for(const std::vector<graphnet::Edge>& edges, const Assignment& asg,
                                              CommMode mode, graphnet::ShiftConfig cfg = {}) {
  const auto n = asg.size();
  if (mode == CommMode::no_comms) return graphnet::GraphShiftOperator::zero(n);
  auto s = graphnet::build_shift_operator(edges, n, cfg);
  if (mode == CommMode::mask_si_outgoing && asg.si_agent()) s = s.mask_outgoing(*asg.si_agent());
  return s;
}

namespace detail {

/// Runs `fn` on the rows of x [B*N, ...] belonging to each group and
/// reassembles a [B*N, D] result.
template <typename T, typename Fn>
Var<T> per_group(Var<T> x, std::size_t B, const Assignment& asg, Fn&& fn) {
  const auto N = asg.size();
  Var<T> out{};
  bool have = false;
  for (Group g : asg.present()) {
    const auto members = asg.members(g);
    if (members.size() == N) return fn(x, g);
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < B; ++b)
      for (auto a : members) rows.push_back(b * N + a);
    auto y = diffcore::scatter_rows(fn(diffcore::take_rows(x, rows), g), rows, B * N);
    out = have ? diffcore::add(out, y) : y;
    have = true;
  }
  return out;
}

}  // namespace detail

template <typename T>
struct ActorOutput {
  Var<T> encodings;  // [B,N,F], the transmitted messages
  Var<T> agnn;       // [B,N,F], after aggregation and nonlinearity
  Var<T> logits;     // [B*N,5]
  Var<T> log_probs;  // [B*N,5]
};

template <typename T>
Var<T> encode(Var<T> obs, const ParamTree<T>& p, const ArchConfig& a, const Assignment& asg, Trainable tr) {
  const auto& s = obs.shape();
  if (s.size() != 5 || s[1] != asg.size() || s[2] != a.obs_channels || s[3] != a.fov_w || s[4] != a.fov_h) {
    throw diffcore::ShapeError("actor: observations " + diffcore::shape_str(s) + " do not match [B," +
                               std::to_string(asg.size()) + "," + std::to_string(a.obs_channels) + "," +
                               std::to_string(a.fov_w) + "," + std::to_string(a.fov_h) + "]");
  }
  const auto B = s[0], N = s[1];
  auto flat = diffcore::reshape(obs, {B * N, s[2], s[3], s[4]});
  auto x = detail::per_group(flat, B, asg, [&](Var<T> rows, Group g) {
    return cnn(rows, p, actor_prefix(g) + "enc.", a, tr.of(g));
  });
  return diffcore::reshape(x, {B, N, a.feature});
}

template <typename T>
std::vector<graphnet::BankGroup> bank_groups(const ArchConfig& a, const Assignment& asg, std::size_t layer, Trainable tr) {
  std::vector<graphnet::BankGroup> out;
  for (Group g : asg.present()) out.push_back({gnn_prefix(g, layer, a.gnn_layers), asg.members(g), tr.of(g)});
  return out;
}

/// obs [B,N,C,fw,fh], shift [B,N,N].
template <typename T>
ActorOutput<T> actor_forward(Tape<T>& tape, const ParamTree<T>& p, const ArchConfig& a, const Assignment& asg,
                             const Tensor<T>& obs, const Tensor<T>& shift, Trainable tr = {}) {
  const auto B = obs.rank() == 5 ? obs.dim(0) : 0;
  if (shift.rank() != 3 || shift.dim(0) != B || shift.dim(1) != asg.size() || shift.dim(2) != asg.size()) {
    throw diffcore::ShapeError("actor: shift " + diffcore::shape_str(shift.shape()) + " does not match the batch");
  }
  ActorOutput<T> out;
  out.encodings = encode(tape.constant(obs), p, a, asg, tr);
  std::vector<std::vector<graphnet::BankGroup>> layers;
  for (std::size_t l = 0; l < a.gnn_layers; ++l) layers.push_back(bank_groups<T>(a, asg, l, tr));
  out.agnn = graphnet::agnn_forward(out.encodings, shift, p, layers, a.hops, graphnet::Nonlinearity::leaky_relu);
  const auto N = asg.size();
  auto flat = diffcore::reshape(out.agnn, {B * N, a.feature});
  out.logits = detail::per_group(flat, B, asg, [&](Var<T> rows, Group g) {
    const auto pre = actor_prefix(g) + "head.";
    auto h = diffcore::leaky_relu(
        diffcore::dense(rows, tape.param(p, pre + "fc0.w", tr.of(g)), tape.param(p, pre + "fc0.b", tr.of(g))));
    return diffcore::dense(h, tape.param(p, pre + "fc1.w", tr.of(g)), tape.param(p, pre + "fc1.b", tr.of(g)));
  });
  out.log_probs = diffcore::log_softmax(out.logits);
  return out;
}

/// obs [B,N,C,fw,fh], global [B,N,Cg,W,H] -> values [B*N].
template <typename T>
Var<T> critic_forward(Tape<T>& tape, const ParamTree<T>& p, const ArchConfig& a, const Assignment& asg,
                      const Tensor<T>& obs, const Tensor<T>& global, Trainable tr = {}) {
  const auto& gs = global.shape();
  if (gs.size() != 5 || obs.rank() != 5 || gs[0] != obs.dim(0) || gs[1] != asg.size() || gs[2] != a.global_channels ||
      gs[3] != a.world_w || gs[4] != a.world_h) {
    throw diffcore::ShapeError("critic: global state " + diffcore::shape_str(gs) + " does not match the configuration");
  }
  const auto B = gs[0], N = gs[1];
  auto lo = tape.constant(obs.reshaped({B * N, obs.dim(2), obs.dim(3), obs.dim(4)}));
  auto gl = tape.constant(global.reshaped({B * N, gs[2], gs[3], gs[4]}));
  Var<T> out{};
  bool have = false;
  for (Group g : asg.present()) {
    const auto members = asg.members(g);
    const bool all = members.size() == N;
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < B && !all; ++b)
      for (auto m : members) rows.push_back(b * N + m);
    const auto pre = critic_prefix(g);
    auto f = diffcore::concat<T>({cnn(all ? lo : diffcore::take_rows(lo, rows), p, pre + "local.", a, tr.of(g)),
                                  cnn(all ? gl : diffcore::take_rows(gl, rows), p, pre + "global.", a, tr.of(g))},
                                 1);
    auto h = diffcore::leaky_relu(
        diffcore::dense(f, tape.param(p, pre + "head.fc0.w", tr.of(g)), tape.param(p, pre + "head.fc0.b", tr.of(g))));
    auto v = diffcore::dense(h, tape.param(p, pre + "head.fc1.w", tr.of(g)), tape.param(p, pre + "head.fc1.b", tr.of(g)));
    if (!all) v = diffcore::scatter_rows(v, rows, B * N);
    out = have ? diffcore::add(out, v) : v;
    have = true;
  }
  return diffcore::reshape(out, {B * N});
}

/// Inverse-CDF draw from one categorical row.
template <typename T>
std::size_t sample_categorical(const T* probs, std::size_t n, std::mt19937_64& rng) {
  const double u = diffcore::uniform01(rng);
  double acc = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    acc += static_cast<double>(probs[k]);
    if (u < acc) return k;
  }
  // rounding left a sliver above the total; take the last action with mass
  for (std::size_t k = n; k-- > 0;)
    if (probs[k] > T{0}) return k;
  return n - 1;
}

struct JointSample {
  std::vector<int> actions;
  std::vector<double> log_probs;
  double joint_log_prob = 0.0;
};

/// Independent draws for each row of log_probs [R,A].
template <typename T>
JointSample sample_actions(const Tensor<T>& log_probs, std::mt19937_64& rng, bool greedy = false) {
  const auto R = log_probs.dim(0), A = log_probs.dim(1);
  JointSample s;
  std::vector<T> p(A);
  for (std::size_t r = 0; r < R; ++r) {
    const T* lp = log_probs.raw() + r * A;
    for (std::size_t k = 0; k < A; ++k) p[k] = static_cast<T>(std::exp(static_cast<double>(lp[k])));
    const std::size_t a = greedy ? static_cast<std::size_t>(std::max_element(lp, lp + A) - lp) : sample_categorical(p.data(), A, rng);
    s.actions.push_back(static_cast<int>(a));
    s.log_probs.push_back(static_cast<double>(lp[a]));
    s.joint_log_prob += lp[a];
  }
  return s;
}

}  // namespace advcomm::policy
