#include "advcomm/interpreter.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <limits>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

namespace advcomm::interpreter {

namespace {

using gridworld::Environment;

constexpr char kMagic[4] = {'A', 'D', 'V', 'S'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
void put(std::ostream& os, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get(std::istream& is) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) throw std::runtime_error("sample file truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<U>(v);
}

struct Batch {
  Tensor<float> obs, shift;
};

Batch gather(const std::vector<Environment*>& envs, const policy::ArchConfig& arch, const policy::Assignment& asg,
             policy::CommMode mode) {
  const std::size_t B = envs.size(), N = asg.size();
  Batch in{Tensor<float>({B, N, arch.obs_channels, arch.fov_w, arch.fov_h}), Tensor<float>({B, N, N})};
  const std::size_t per = N * arch.obs_channels * arch.fov_w * arch.fov_h;
  for (std::size_t b = 0; b < B; ++b) {
    auto o = envs[b]->observe_all();
    std::copy(o.raw(), o.raw() + per, in.obs.raw() + b * per);
    const auto s = policy::shift_for(envs[b]->comm_graph(), asg, mode);
    for (std::size_t k = 0; k < N * N; ++k) in.shift[b * N * N + k] = static_cast<float>(s.matrix()[k]);
  }
  return in;
}

bool coverage_task(const gridworld::EnvConfig& env) { return env.task != gridworld::Task::path_planning; }

// Target plane and mask for one agent, laid out [u][v] like the observation window.
void make_target(const Environment& env, const Tensor<float>& obs, std::size_t b, std::size_t agent, TargetKind kind,
                 std::vector<std::uint8_t>& target, std::vector<std::uint8_t>& mask) {
  const auto& cfg = env.config();
  const auto& s = env.state();
  const auto fw = static_cast<std::size_t>(cfg.fov_w), fh = static_cast<std::size_t>(cfg.fov_h);
  const auto N = static_cast<std::size_t>(cfg.n_agents);
  const int rx = cfg.fov_w / 2, ry = cfg.fov_h / 2;
  const auto p = s.positions[agent];
  target.assign(fw * fh, 0);
  mask.assign(fw * fh, 0);
  std::vector<std::uint8_t> team;
  if (kind == TargetKind::agnn_output_coverage) team = env.global_coverage();
  const float* plane = obs.raw() + ((b * N + agent) * 2 + 1) * fw * fh;
  for (std::size_t u = 0; u < fw; ++u) {
    for (std::size_t v = 0; v < fh; ++v) {
      const int x = p.x + static_cast<int>(u) - rx, y = p.y + static_cast<int>(v) - ry;
      const bool in = s.inside(x, y);
      const std::size_t k = u * fh + v;
      // goal maps mark a border pixel even for goals outside the world view, so the whole plane counts
      mask[k] = (in || !coverage_task(cfg)) ? 1 : 0;
      if (kind == TargetKind::first_message) {
        target[k] = plane[k] > 0.5f ? 1 : 0;
      } else if (in) {
        target[k] = team[static_cast<std::size_t>(s.index(x, y))];
      }
    }
  }
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::string to_string(TargetKind k) {
  return k == TargetKind::first_message ? "first_message" : "agnn_output_coverage";
}

TargetKind target_kind_from_string(const std::string& s) {
  if (s == "first_message") return TargetKind::first_message;
  if (s == "agnn_output_coverage") return TargetKind::agnn_output_coverage;
  throw std::invalid_argument("unknown target kind '" + s + "'");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

std::vector<const Sample*> SampleSet::select(Split s, std::optional<Group> g) const {
  std::vector<const Sample*> out;
  for (const auto& x : samples)
    if (x.split == s && (!g || x.group == *g)) out.push_back(&x);
  return out;
}

void save_samples(const std::filesystem::path& path, const SampleSet& set) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_samples: cannot write " + path.string());
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(set.kind));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(set.input_dim));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(set.target_w));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(set.target_h));
  put<std::uint64_t>(os, set.samples.size());
  const std::size_t plane = set.target_w * set.target_h;
  for (const auto& s : set.samples) {
    if (s.input.size() != set.input_dim || s.target.size() != plane || s.mask.size() != plane)
      throw std::invalid_argument("save_samples: record size does not match the header");
    put<std::uint64_t>(os, s.episode);
    put<std::uint32_t>(os, s.t);
    put<std::uint32_t>(os, s.agent);
    put<std::uint8_t>(os, s.group == Group::cooperative ? 0 : 1);
    put<std::uint8_t>(os, static_cast<std::uint8_t>(s.split));
    for (float f : s.input) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put<std::uint32_t>(os, bits);
    }
    os.write(reinterpret_cast<const char*>(s.target.data()), static_cast<std::streamsize>(plane));
    os.write(reinterpret_cast<const char*>(s.mask.data()), static_cast<std::streamsize>(plane));
  }
  if (!os) throw std::runtime_error("save_samples: write failed for " + path.string());
}

SampleSet load_samples(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_samples: cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kMagic))
    throw std::runtime_error("load_samples: " + path.string() + " is not a sample file");
  if (get<std::uint32_t>(is) != kVersion) throw std::runtime_error("load_samples: unsupported version");
  SampleSet set;
  const auto kind = get<std::uint32_t>(is);
  if (kind > 1) throw std::runtime_error("load_samples: bad target kind");
  set.kind = static_cast<TargetKind>(kind);
  set.input_dim = get<std::uint32_t>(is);
  set.target_w = get<std::uint32_t>(is);
  set.target_h = get<std::uint32_t>(is);
  const auto n = get<std::uint64_t>(is);
  const std::size_t plane = set.target_w * set.target_h;
  set.samples.reserve(n);
  for (std::uint64_t r = 0; r < n; ++r) {
    Sample s;
    s.episode = get<std::uint64_t>(is);
    s.t = get<std::uint32_t>(is);
    s.agent = get<std::uint32_t>(is);
    s.group = get<std::uint8_t>(is) == 0 ? Group::cooperative : Group::self_interested;
    const auto sp = get<std::uint8_t>(is);
    if (sp > 2) throw std::runtime_error("load_samples: bad split tag in record " + std::to_string(r));
    s.split = static_cast<Split>(sp);
    s.input.resize(set.input_dim);
    for (auto& f : s.input) {
      const auto bits = get<std::uint32_t>(is);
      std::memcpy(&f, &bits, 4);
    }
    s.target.resize(plane);
    s.mask.resize(plane);
    if (!is.read(reinterpret_cast<char*>(s.target.data()), static_cast<std::streamsize>(plane)) ||
        !is.read(reinterpret_cast<char*>(s.mask.data()), static_cast<std::streamsize>(plane)))
      throw std::runtime_error("load_samples: truncated record " + std::to_string(r));
    set.samples.push_back(std::move(s));
  }
  return set;
}

SampleSet collect_samples(const trainer::Checkpoint& ck, const gridworld::EnvConfig& env, const CollectConfig& cfg) {
  if (!(cfg.sample_prob > 0.0) || cfg.sample_prob > 1.0)
    throw std::invalid_argument("collect_samples: sample_prob must lie in (0,1]; 0 yields an empty sample set");
  const std::size_t want[3] = {cfg.n_train, cfg.n_val, cfg.n_test};
  const std::size_t total = cfg.n_train + cfg.n_val + cfg.n_test;
  if (total == 0) throw std::invalid_argument("collect_samples: all split sizes are zero");
  if (static_cast<std::size_t>(env.n_agents) != ck.assignment.size())
    throw std::invalid_argument("collect_samples: environment and checkpoint disagree on the agent count");
  if (cfg.kind == TargetKind::agnn_output_coverage && !coverage_task(env))
    throw std::invalid_argument("collect_samples: coverage targets need a coverage task");
  if (cfg.n_envs == 0) throw std::invalid_argument("collect_samples: n_envs must be positive");

  const auto& asg = ck.assignment;
  const auto coop = asg.members(Group::cooperative);
  if (coop.empty()) throw std::invalid_argument("collect_samples: no cooperative agents");
  const std::size_t N = asg.size();
  const auto per_step = static_cast<double>(coop.size()) * cfg.sample_prob;
  const std::size_t budget =
      cfg.max_env_steps ? cfg.max_env_steps : static_cast<std::size_t>(20.0 * std::ceil(static_cast<double>(total) / per_step)) + 100;

  auto ecfg = env;
  ecfg.training_mode = false;
  SampleSet set;
  set.kind = cfg.kind;
  set.input_dim = ck.arch.feature;
  set.target_w = static_cast<std::size_t>(env.fov_w);
  set.target_h = static_cast<std::size_t>(env.fov_h);

  const std::size_t E = cfg.n_envs;
  std::vector<Environment> envs;
  std::vector<std::uint64_t> episode(E);
  std::uint64_t next_episode = 0;
  for (std::size_t e = 0; e < E; ++e) {
    auto c = ecfg;
    c.seed = trainer::mix_seed(cfg.seed, next_episode);
    episode[e] = next_episode++;
    envs.emplace_back(c);
  }
  std::vector<Environment*> ptrs;
  for (auto& e : envs) ptrs.push_back(&e);

  std::mt19937_64 act_rng(trainer::mix_seed(cfg.seed, 0xac7));
  std::mt19937_64 pick_rng(trainer::mix_seed(cfg.seed, 0x5a3));
  std::size_t have[3] = {0, 0, 0};
  std::size_t steps = 0;
  const auto F = ck.arch.feature;
  while (have[0] + have[1] + have[2] < total) {
    if (steps >= budget) {
      throw std::runtime_error("collect_samples: step budget of " + std::to_string(budget) + " exhausted with " +
                               std::to_string(have[0]) + "/" + std::to_string(have[1]) + "/" + std::to_string(have[2]) +
                               " of " + std::to_string(cfg.n_train) + "/" + std::to_string(cfg.n_val) + "/" +
                               std::to_string(cfg.n_test) + " pairs");
    }
    auto in = gather(ptrs, ck.arch, asg, cfg.mode);
    diffcore::Tape<float> tape(false);
    auto out = policy::actor_forward(tape, ck.params, ck.arch, asg, in.obs, in.shift);
    const auto& feats = (cfg.kind == TargetKind::first_message ? out.encodings : out.agnn).value();
    auto actions = policy::sample_actions(out.log_probs.value(), act_rng);

    for (std::size_t e = 0; e < E && have[0] + have[1] + have[2] < total; ++e) {
      if (diffcore::uniform01(pick_rng) >= cfg.sample_prob) continue;
      // split drawn in proportion to the pairs each still needs
      const double room = static_cast<double>(total - have[0] - have[1] - have[2]);
      double u = diffcore::uniform01(pick_rng) * room;
      std::size_t sp = 0;
      for (; sp < 2; ++sp) {
        const double r = static_cast<double>(want[sp] - have[sp]);
        if (u < r) break;
        u -= r;
      }
      while (want[sp] == have[sp]) sp = (sp + 1) % 3;

      auto add = [&](std::size_t i, Group g) {
        Sample s;
        s.episode = episode[e];
        s.t = static_cast<std::uint32_t>(envs[e].state().t);
        s.agent = static_cast<std::uint32_t>(i);
        s.group = g;
        s.split = static_cast<Split>(sp);
        s.input.assign(feats.raw() + (e * N + i) * F, feats.raw() + (e * N + i + 1) * F);
        make_target(envs[e], in.obs, e, i, cfg.kind, s.target, s.mask);
        set.samples.push_back(std::move(s));
      };
      for (auto i : coop) {
        if (have[sp] == want[sp]) break;
        add(i, Group::cooperative);
        ++have[sp];
      }
      if (static_cast<Split>(sp) == Split::test && asg.si_agent()) add(*asg.si_agent(), Group::self_interested);
    }

    for (std::size_t e = 0; e < E; ++e) {
      std::vector<int> a(actions.actions.begin() + static_cast<long>(e * N), actions.actions.begin() + static_cast<long>((e + 1) * N));
      if (envs[e].step(a).done) {
        episode[e] = next_episode++;
        envs[e].reset(trainer::mix_seed(cfg.seed, episode[e]));
      }
      ++steps;
    }
  }
  return set;
}

// ---------------------------------------------------------------------------
// decoder

DecoderArch DecoderArch::for_target(std::size_t input_dim, std::size_t w, std::size_t h, std::size_t channels) {
  if (input_dim == 0 || w == 0 || h == 0 || channels == 0) throw std::invalid_argument("decoder: zero-sized dimension");
  DecoderArch a;
  a.input_dim = input_dim;
  a.out_w = w;
  a.out_h = h;
  a.channels = channels;
  // as many doublings as keep the seed map at least 2 wide
  const std::size_t m = std::min(w, h);
  while (((m + (std::size_t{1} << (a.ups + 1)) - 1) >> (a.ups + 1)) >= 2) ++a.ups;
  const std::size_t f = std::size_t{1} << a.ups;
  a.seed_w = (w + f - 1) / f;
  a.seed_h = (h + f - 1) / f;
  return a;
}

void to_json(nlohmann::json& j, const DecoderArch& a) {
  j = nlohmann::json{{"input_dim", a.input_dim}, {"out_w", a.out_w}, {"out_h", a.out_h}, {"channels", a.channels},
                     {"seed_w", a.seed_w},       {"seed_h", a.seed_h}, {"ups", a.ups}};
}

void from_json(const nlohmann::json& j, DecoderArch& a) {
  a = DecoderArch::for_target(j.at("input_dim").get<std::size_t>(), j.at("out_w").get<std::size_t>(),
                              j.at("out_h").get<std::size_t>(), j.at("channels").get<std::size_t>());
}

template <typename T>
ParamTree<T> init_decoder(const DecoderArch& a, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamTree<T> p;
  const double gain = std::sqrt(2.0);
  policy::detail::init_dense(p, "dec.fc.", a.input_dim, a.channels * a.seed_w * a.seed_h, gain, rng);
  for (std::size_t k = 0; k < a.ups; ++k)
    policy::detail::init_conv(p, "dec.up" + std::to_string(k) + ".", a.channels, a.channels, gain, rng);
  policy::detail::init_conv(p, "dec.out.", a.channels, 1, 1.0, rng);
  return p;
}

template <typename T>
diffcore::Var<T> decoder_logits(diffcore::Tape<T>& tape, const ParamTree<T>& p, const DecoderArch& a,
                                const Tensor<T>& x) {
  if (x.rank() != 2 || x.dim(1) != a.input_dim)
    throw diffcore::ShapeError("decoder: input " + diffcore::shape_str(x.shape()) + " expected [B," +
                               std::to_string(a.input_dim) + "]");
  namespace dc = diffcore;
  const auto B = x.dim(0);
  auto h = dc::leaky_relu(dc::dense(tape.constant(x), tape.param(p, "dec.fc.w"), tape.param(p, "dec.fc.b")));
  h = dc::reshape(h, {B, a.channels, a.seed_w, a.seed_h});
  for (std::size_t k = 0; k < a.ups; ++k) {
    const auto pre = "dec.up" + std::to_string(k) + ".";
    h = dc::upsample2x(h);
    h = dc::leaky_relu(dc::conv2d(h, tape.param(p, pre + "w"), tape.param(p, pre + "b"), 1));
  }
  const std::size_t f = std::size_t{1} << a.ups;
  const long cw = static_cast<long>(a.seed_w * f), ch = static_cast<long>(a.seed_h * f);
  if (cw != static_cast<long>(a.out_w) || ch != static_cast<long>(a.out_h))
    h = dc::pad2d(h, 0, static_cast<long>(a.out_w) - cw, 0, static_cast<long>(a.out_h) - ch);
  auto z = dc::conv2d(h, tape.param(p, "dec.out.w"), tape.param(p, "dec.out.b"), 1);
  return dc::reshape(z, {B, a.out_w, a.out_h});
}

template ParamTree<float> init_decoder<float>(const DecoderArch&, std::uint64_t);
template ParamTree<double> init_decoder<double>(const DecoderArch&, std::uint64_t);
template diffcore::Var<float> decoder_logits<float>(diffcore::Tape<float>&, const ParamTree<float>&, const DecoderArch&,
                                                    const Tensor<float>&);
template diffcore::Var<double> decoder_logits<double>(diffcore::Tape<double>&, const ParamTree<double>&,
                                                      const DecoderArch&, const Tensor<double>&);

namespace {
constexpr float kLowest = std::numeric_limits<float>::min();
constexpr float kHighest = 1.0f - std::numeric_limits<float>::epsilon() / 2;
}  // namespace

std::vector<std::vector<float>> decode(const ParamTree<float>& p, const DecoderArch& a,
                                       const std::vector<std::vector<float>>& inputs) {
  std::vector<std::vector<float>> out;
  constexpr std::size_t kChunk = 256;
  const std::size_t plane = a.out_w * a.out_h;
  for (std::size_t s = 0; s < inputs.size(); s += kChunk) {
    const std::size_t B = std::min(kChunk, inputs.size() - s);
    Tensor<float> x({B, a.input_dim});
    for (std::size_t b = 0; b < B; ++b) {
      if (inputs[s + b].size() != a.input_dim) throw std::invalid_argument("decode: input width mismatch");
      std::copy(inputs[s + b].begin(), inputs[s + b].end(), x.raw() + b * a.input_dim);
    }
    diffcore::Tape<float> tape(false);
    const auto& z = decoder_logits(tape, p, a, x).value();
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<float> y(plane);
      for (std::size_t k = 0; k < plane; ++k) {
        const double v = z[b * plane + k];
        const double q = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        // float rounding would otherwise reach the closed endpoints
        y[k] = std::clamp(static_cast<float>(q), kLowest, kHighest);
      }
      out.push_back(std::move(y));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// metrics

std::optional<double> average_precision(const std::vector<float>& scores, const std::vector<std::uint8_t>& targets,
                                        const std::vector<std::uint8_t>& mask) {
  if (scores.size() != targets.size() || scores.size() != mask.size())
    throw std::invalid_argument("average_precision: length mismatch");
  std::vector<std::size_t> idx;
  std::size_t positives = 0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (!mask[k]) continue;
    idx.push_back(k);
    positives += targets[k] ? 1 : 0;
  }
  if (positives == 0) return std::nullopt;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i, gained = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      gained += targets[idx[j]] ? 1 : 0;
      ++j;
    }
    tp += gained;
    seen += j - i;
    ap += static_cast<double>(gained) / static_cast<double>(positives) * static_cast<double>(tp) / static_cast<double>(seen);
    i = j;
  }
  return ap;
}

MapReport evaluate_map(const TrainedDecoder& dec, const SampleSet& set, Split split) {
  MapReport r;
  const auto all = set.select(split);
  std::vector<std::vector<float>> inputs;
  for (const auto* s : all) inputs.push_back(s->input);
  const auto outs = decode(dec.params, dec.arch, inputs);
  std::vector<double> coop, si;
  for (std::size_t k = 0; k < all.size(); ++k) {
    auto ap = average_precision(outs[k], all[k]->target, all[k]->mask);
    if (!ap) {
      ++r.skipped;
      continue;
    }
    (all[k]->group == Group::cooperative ? coop : si).push_back(*ap);
  }
  r.n_coop = coop.size();
  r.n_si = si.size();
  r.map_coop = mean_of(coop);
  r.map_si = mean_of(si);
  std::vector<double> both = coop;
  both.insert(both.end(), si.begin(), si.end());
  r.map_all = mean_of(both);
  return r;
}

double positive_prevalence(const SampleSet& set, Split split) {
  double pos = 0.0, n = 0.0;
  for (const auto* s : set.select(split, Group::cooperative)) {
    for (std::size_t k = 0; k < s->mask.size(); ++k) {
      if (!s->mask[k]) continue;
      n += 1.0;
      pos += s->target[k] ? 1.0 : 0.0;
    }
  }
  return n > 0 ? pos / n : 0.0;
}

namespace {

double val_map(const TrainedDecoder& dec, const std::vector<const Sample*>& val) {
  std::vector<std::vector<float>> inputs;
  for (const auto* s : val) inputs.push_back(s->input);
  const auto outs = decode(dec.params, dec.arch, inputs);
  std::vector<double> aps;
  for (std::size_t k = 0; k < val.size(); ++k)
    if (auto ap = average_precision(outs[k], val[k]->target, val[k]->mask)) aps.push_back(*ap);
  return mean_of(aps);
}

}  // namespace

TrainedDecoder train_decoder(const SampleSet& set, const DecoderConfig& cfg,
                             const std::function<void(const EpochRecord&)>& log) {
  const auto train = set.select(Split::train, Group::cooperative);
  const auto val = set.select(Split::val, Group::cooperative);
  if (train.empty() || val.empty()) throw std::invalid_argument("train_decoder: needs non-empty train and val splits");
  if (cfg.epochs == 0 || cfg.batch_size == 0 || cfg.eval_every == 0)
    throw std::invalid_argument("train_decoder: epochs, batch size and eval interval must be positive");

  TrainedDecoder cur;
  cur.arch = DecoderArch::for_target(set.input_dim, set.target_w, set.target_h, cfg.channels);
  cur.params = init_decoder<float>(cur.arch, cfg.seed);
  diffcore::Optimizer<float> opt(diffcore::OptimizerConfig{cfg.optimizer, cfg.lr, 0.9, 0.999, 1e-8, 0.0, false});

  TrainedDecoder best;
  bool have_best = false;
  std::mt19937_64 rng(trainer::mix_seed(cfg.seed, 0xdec));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t plane = set.target_w * set.target_h;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    diffcore::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const std::size_t B = std::min(cfg.batch_size, order.size() - s);
      Tensor<float> x({B, set.input_dim}), y({B, set.target_w, set.target_h}), m({B, set.target_w, set.target_h});
      for (std::size_t b = 0; b < B; ++b) {
        const auto* smp = train[order[s + b]];
        std::copy(smp->input.begin(), smp->input.end(), x.raw() + b * set.input_dim);
        for (std::size_t k = 0; k < plane; ++k) {
          y[b * plane + k] = smp->target[k];
          m[b * plane + k] = smp->mask[k];
        }
      }
      diffcore::Tape<float> tape;
      auto loss = diffcore::bce_with_mask(decoder_logits(tape, cur.params, cur.arch, x), y, m);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) throw std::runtime_error("train_decoder: non-finite loss in epoch " + std::to_string(epoch));
      tape.backward(loss);
      opt.step(cur.params, tape.gradients(cur.params));
      loss_sum += lv * static_cast<double>(B);
      seen += B;
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(seen), std::nullopt};
    if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
      rec.val_map = val_map(cur, val);
      if (!have_best || *rec.val_map > best.best_val_map) {
        best.params = cur.params;
        best.best_epoch = epoch;
        best.best_val_map = *rec.val_map;
        have_best = true;
      }
    }
    cur.history.push_back(rec);
    if (log) log(rec);
  }
  best.arch = cur.arch;
  best.history = cur.history;
  return best;
}

void save_decoder(const std::filesystem::path& path, const TrainedDecoder& dec) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  diffcore::save_checkpoint(path, dec.params);
  nlohmann::json j{{"arch", dec.arch}, {"best_epoch", dec.best_epoch}, {"best_val_map", dec.best_val_map}};
  auto& h = j["history"] = nlohmann::json::array();
  for (const auto& r : dec.history) {
    nlohmann::json e{{"epoch", r.epoch}, {"train_loss", r.train_loss}};
    if (r.val_map) e["val_map"] = *r.val_map;
    h.push_back(e);
  }
  std::ofstream os(path.string() + ".json");
  if (!os) throw std::runtime_error("save_decoder: cannot write " + path.string() + ".json");
  os << j.dump(2) << "\n";
}

TrainedDecoder load_decoder(const std::filesystem::path& path) {
  TrainedDecoder d;
  d.params = diffcore::load_checkpoint<float>(path);
  std::ifstream is(path.string() + ".json");
  if (!is) throw std::runtime_error("load_decoder: missing sidecar " + path.string() + ".json");
  const auto j = nlohmann::json::parse(is);
  d.arch = j.at("arch").get<DecoderArch>();
  d.best_epoch = j.value("best_epoch", std::size_t{0});
  d.best_val_map = j.value("best_val_map", 0.0);
  for (const auto& e : j.value("history", nlohmann::json::array())) {
    EpochRecord r{e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(), std::nullopt};
    if (e.contains("val_map")) r.val_map = e.at("val_map").get<double>();
    d.history.push_back(r);
  }
  return d;
}

// ---------------------------------------------------------------------------
// images

void write_png(const std::filesystem::path& path, const GrayImage& img) {
  if (img.width == 0 || img.height == 0 || img.pixels.size() != img.width * img.height)
    throw std::invalid_argument("write_png: inconsistent image");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("write_png: cannot open " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("write_png: libpng failed on " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_text text{};
  std::string key = "Comment";
  if (!img.comment.empty()) {
    text.compression = PNG_TEXT_COMPRESSION_NONE;
    text.key = key.data();
    text.text = const_cast<char*>(img.comment.c_str());
    png_set_text(png, info, &text, 1);
  }
  png_write_info(png, info);
  for (std::size_t r = 0; r < img.height; ++r)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + r * img.width));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

GrayImage read_png(const std::filesystem::path& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::runtime_error("read_png: cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  GrayImage img;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("read_png: libpng failed on " + path.string());
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY || png_get_bit_depth(png, info) != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("read_png: only 8-bit grayscale is supported");
  }
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.pixels.resize(img.width * img.height);
  for (std::size_t r = 0; r < img.height; ++r) png_read_row(png, img.pixels.data() + r * img.width, nullptr);
  png_read_end(png, info);
  png_textp texts = nullptr;
  int n_text = 0;
  png_get_text(png, info, &texts, &n_text);
  for (int k = 0; k < n_text; ++k)
    if (std::strcmp(texts[k].key, "Comment") == 0) img.comment = texts[k].text;
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

GridInfo reconstruct_grid(const TrainedDecoder& dec, const trainer::Checkpoint& ck, const gridworld::EnvConfig& env,
                          TargetKind kind, std::uint64_t episode_seed, const std::vector<int>& timesteps,
                          const std::filesystem::path& out, std::size_t scale, const std::string& comment) {
  if (static_cast<std::size_t>(env.n_agents) != ck.assignment.size())
    throw std::invalid_argument("reconstruct_grid: environment and checkpoint disagree on the agent count");
  if (scale == 0) throw std::invalid_argument("reconstruct_grid: scale must be positive");
  const std::set<int> wanted(timesteps.begin(), timesteps.end());
  for (int t : wanted)
    if (t < 0 || t >= env.horizon) throw std::invalid_argument("reconstruct_grid: step " + std::to_string(t) + " outside the episode");

  const auto& asg = ck.assignment;
  const std::size_t N = asg.size();
  std::vector<std::size_t> columns;
  if (asg.si_agent()) columns.push_back(*asg.si_agent());
  for (auto i : asg.members(Group::cooperative)) columns.push_back(i);

  const std::size_t w = static_cast<std::size_t>(env.fov_w), h = static_cast<std::size_t>(env.fov_h);
  GridInfo info;
  info.rows = wanted.size();
  info.cols = 2 * N;

  auto ecfg = env;
  ecfg.training_mode = false;
  ecfg.seed = episode_seed;
  Environment world(ecfg);
  std::mt19937_64 rng(trainer::mix_seed(episode_seed, 0x9e1d));
  const int last = wanted.empty() ? -1 : *wanted.rbegin();
  for (int t = 0; t <= last; ++t) {
    std::vector<Environment*> one{&world};
    auto in = gather(one, ck.arch, asg, policy::CommMode::full);
    diffcore::Tape<float> tape(false);
    auto fwd = policy::actor_forward(tape, ck.params, ck.arch, asg, in.obs, in.shift);
    if (wanted.count(t)) {
      const auto& feats = (kind == TargetKind::first_message ? fwd.encodings : fwd.agnn).value();
      std::vector<std::vector<float>> inputs;
      for (auto i : columns) inputs.emplace_back(feats.raw() + i * ck.arch.feature, feats.raw() + (i + 1) * ck.arch.feature);
      const auto recon = decode(dec.params, dec.arch, inputs);
      std::vector<std::vector<std::uint8_t>> row;
      for (std::size_t c = 0; c < columns.size(); ++c) {
        std::vector<std::uint8_t> target, mask;
        make_target(world, in.obs, 0, columns[c], kind, target, mask);
        std::vector<std::uint8_t> truth(w * h), rec(w * h);
        for (std::size_t k = 0; k < w * h; ++k) {
          truth[k] = mask[k] ? (target[k] ? 255 : 0) : 128;
          rec[k] = quantize(recon[c][k]);
        }
        row.push_back(std::move(truth));
        row.push_back(std::move(rec));
      }
      info.panels += row.size();
      info.panel_pixels.push_back(std::move(row));
    }
    auto a = policy::sample_actions(fwd.log_probs.value(), rng);
    if (world.step(a.actions).done && t < last)
      throw std::runtime_error("reconstruct_grid: episode ended before step " + std::to_string(last));
  }

  GrayImage img;
  if (info.rows == 0) {
    img.width = img.height = 1;
    img.pixels = {255};
  } else {
    constexpr std::size_t gap = 2;
    const std::size_t pw = w * scale, ph = h * scale;
    img.width = info.cols * pw + (info.cols + 1) * gap;
    img.height = info.rows * ph + (info.rows + 1) * gap;
    img.pixels.assign(img.width * img.height, 64);
    for (std::size_t r = 0; r < info.rows; ++r) {
      for (std::size_t c = 0; c < info.cols; ++c) {
        const auto& px = info.panel_pixels[r][c];
        const std::size_t ox = gap + c * (pw + gap), oy = gap + r * (ph + gap);
        // x runs across, y down
        for (std::size_t yy = 0; yy < ph; ++yy)
          for (std::size_t xx = 0; xx < pw; ++xx)
            img.pixels[(oy + yy) * img.width + ox + xx] = px[(xx / scale) * h + yy / scale];
      }
    }
  }
  img.comment = comment;
  write_png(out, img);
  return info;
}

}  // namespace advcomm::interpreter
