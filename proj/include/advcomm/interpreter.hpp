#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "advcomm/diffcore.hpp"
#include "advcomm/gridworld.hpp"
#include "advcomm/policy.hpp"
#include "advcomm/trainer.hpp"

namespace advcomm::interpreter {

using diffcore::ParamTree;
using diffcore::Tensor;
using policy::Group;

// first_message: encoder output -> own observation channel 1.
// agnn_output_coverage: AGNN output row -> team coverage inside the FOV window.
enum class TargetKind { first_message, agnn_output_coverage };
enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

std::string to_string(TargetKind k);
TargetKind target_kind_from_string(const std::string& s);
std::string to_string(Split s);

struct Sample {
  std::uint64_t episode = 0;
  std::uint32_t t = 0;
  std::uint32_t agent = 0;
  Group group = Group::cooperative;
  Split split = Split::train;
  std::vector<float> input;
  std::vector<std::uint8_t> target;  // binary plane, [w][h]
  std::vector<std::uint8_t> mask;
};

struct SampleSet {
  TargetKind kind = TargetKind::first_message;
  std::size_t input_dim = 0;
  std::size_t target_w = 0;
  std::size_t target_h = 0;
  std::vector<Sample> samples;

  std::vector<const Sample*> select(Split s, std::optional<Group> g = std::nullopt) const;
  std::size_t count(Split s, std::optional<Group> g = std::nullopt) const { return select(s, g).size(); }
};

/// Fixed-size little-endian records behind an "ADVS" header.
void save_samples(const std::filesystem::path& path, const SampleSet& set);
SampleSet load_samples(const std::filesystem::path& path);

struct CollectConfig {
  TargetKind kind = TargetKind::first_message;
  // cooperative pairs per split; the self-interested agent's pairs ride along
  // with every test step and are never used for training
  std::size_t n_train = 50000;
  std::size_t n_val = 10000;
  std::size_t n_test = 5000;
  double sample_prob = 0.1;
  std::uint64_t seed = 0;
  policy::CommMode mode = policy::CommMode::full;
  std::size_t n_envs = 8;
  // environment steps before giving up; 0 picks 20x the expected need
  std::size_t max_env_steps = 0;
};

SampleSet collect_samples(const trainer::Checkpoint& ck, const gridworld::EnvConfig& env, const CollectConfig& cfg);

// ---------------------------------------------------------------------------
// decoder

struct DecoderArch {
  std::size_t input_dim = 0;
  std::size_t out_w = 0, out_h = 0;
  std::size_t channels = 32;
  // derived: seed map size and number of 2x upsampling blocks
  std::size_t seed_w = 0, seed_h = 0, ups = 0;

  static DecoderArch for_target(std::size_t input_dim, std::size_t w, std::size_t h, std::size_t channels = 32);
};

void to_json(nlohmann::json& j, const DecoderArch& a);
void from_json(const nlohmann::json& j, DecoderArch& a);

template <typename T>
ParamTree<T> init_decoder(const DecoderArch& a, std::uint64_t seed);

/// x [B,input_dim] -> logits [B,out_w,out_h].
template <typename T>
diffcore::Var<T> decoder_logits(diffcore::Tape<T>& tape, const ParamTree<T>& p, const DecoderArch& a, const Tensor<T>& x);

/// Sigmoid outputs, [B][out_w*out_h].
std::vector<std::vector<float>> decode(const ParamTree<float>& p, const DecoderArch& a,
                                       const std::vector<std::vector<float>>& inputs);

struct DecoderConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  std::size_t eval_every = 10;
  std::size_t channels = 32;
  std::uint64_t seed = 0;
  diffcore::OptimizerKind optimizer = diffcore::OptimizerKind::adam;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_map;
};

struct TrainedDecoder {
  DecoderArch arch;
  ParamTree<float> params;
  std::size_t best_epoch = 0;
  double best_val_map = 0.0;
  std::vector<EpochRecord> history;
};

/// Masked BCE on cooperative training pairs; validation mAP every
/// `eval_every` epochs and after the last; keeps the best-mAP parameters.
TrainedDecoder train_decoder(const SampleSet& set, const DecoderConfig& cfg,
                             const std::function<void(const EpochRecord&)>& log = {});

// ---------------------------------------------------------------------------
// metrics

/// Average precision over masked pixels: sum over score thresholds of
/// (recall gain) x precision, with tied scores forming one threshold.
/// nullopt when the mask holds no positive pixel.
std::optional<double> average_precision(const std::vector<float>& scores, const std::vector<std::uint8_t>& targets,
                                        const std::vector<std::uint8_t>& mask);

struct MapReport {
  double map_coop = 0.0, map_si = 0.0, map_all = 0.0;
  std::size_t n_coop = 0, n_si = 0;
  // samples without a positive pixel under the mask
  std::size_t skipped = 0;
};

MapReport evaluate_map(const TrainedDecoder& dec, const SampleSet& set, Split split);

/// Fraction of masked pixels that are positive in a split's cooperative pairs.
double positive_prevalence(const SampleSet& set, Split split);

void save_decoder(const std::filesystem::path& path, const TrainedDecoder& dec);
TrainedDecoder load_decoder(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// image grids

inline std::uint8_t quantize(float v) {
  const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
  // stored as a tEXt "Comment" chunk when non-empty
  std::string comment;
};

void write_png(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_png(const std::filesystem::path& path);

struct GridInfo {
  std::size_t panels = 0;
  std::size_t rows = 0, cols = 0;
  // panel values before upscaling: [row][col] -> w*h bytes
  std::vector<std::vector<std::vector<std::uint8_t>>> panel_pixels;
};

/// Runs one episode and, at each requested step, draws per agent the true
/// target and its reconstruction side by side. The self-interested agent
/// takes the first column pair. Writes a PNG; a request for no steps yields a
/// 1x1 image.
GridInfo reconstruct_grid(const TrainedDecoder& dec, const trainer::Checkpoint& ck, const gridworld::EnvConfig& env,
                          TargetKind kind, std::uint64_t episode_seed, const std::vector<int>& timesteps,
                          const std::filesystem::path& out, std::size_t scale = 8, const std::string& comment = {});

}  // namespace advcomm::interpreter
