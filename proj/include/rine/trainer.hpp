#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rine/data.hpp"
#include "rine/head.hpp"
#include "rine/losses.hpp"
#include "rine/vit.hpp"

namespace rine {

struct TrainConfig {
  std::size_t batch_size = 128;
  double lr = 1e-3;
  std::size_t epochs = 1;
  // lr is divided by decay_factor at each listed (1-based) epoch, only when
  // epochs > 5.
  std::vector<std::size_t> decay_epochs{6, 11};
  double decay_factor = 10.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // global L2 norm, 0 disables
  std::uint64_t seed = 0;
  LossConfig loss;
  HeadConfig head{.blocks = 0, .width = 0, .projected = 1024, .depth = 4};
  bool augment = true;
  AugmentConfig augmentation;
  bool cache_features = false;  // only with augment off

  void validate() const;
  double lr_at(std::size_t epoch) const;  // epoch is 1-based
  nlohmann::json to_json() const;
  // Missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& defaults);
  static TrainConfig from_json(const nlohmann::json& j) { return from_json(j, TrainConfig()); }
  std::string digest() const;
};

// Frozen feature extractor as seen by the trainer: b×3×S×S pixels in [0,1]
// to the b×n×d CLS stack.
struct Encoder {
  std::function<Tensor(Tensor)> encode;
  std::size_t image_side = 0;
  std::size_t width = 0;
  std::size_t blocks = 0;
};

Encoder make_encoder(const Backbone& backbone);

struct AdamState {
  HeadParams<float> m;
  HeadParams<float> v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const HeadParams<float>& params);
};

// One bias-corrected Adam update; throws ParameterError naming the first
// tensor with a non-finite gradient, before anything is modified.
void adam_step(HeadParams<float>& params, const HeadGradients<float>& grads, AdamState& state, double lr,
               const TrainConfig& config);

struct HistoryRow {
  std::uint64_t step = 0;
  double ce = 0.0;
  double contrastive = 0.0;
  double lr = 0.0;

  bool operator==(const HistoryRow&) const = default;
};

std::string history_to_csv(const std::vector<HistoryRow>& history);

struct TrainState {
  HeadParams<float> params;
  AdamState adam;
  std::vector<HistoryRow> history;
  Rng rng;  // root stream; every per-step stream is derived from it
};

struct TrainOptions {
  // Stop once this many optimizer steps have been taken in total.
  std::optional<std::uint64_t> max_steps;
  // Continue from this state instead of a fresh initialization.
  const TrainState* resume = nullptr;
};

// Fills head width/blocks from the encoder when zero; throws ParameterError on
// a mismatch.
TrainConfig resolve_config(TrainConfig config, const Encoder& encoder);

std::uint64_t steps_per_epoch(std::size_t samples, std::size_t batch_size);

TrainState train(const ImageSource& source, const Encoder& encoder, const TrainConfig& config,
                 const TrainOptions& options = {});

void save_checkpoint(const TrainState& state, const TrainConfig& config, const std::filesystem::path& path);
// Throws LoadError when the checkpoint was written under a different config.
TrainState load_checkpoint(const std::filesystem::path& path, const TrainConfig& config);

// config.json, history.csv, checkpoint.rine and head.rine under dir.
void write_run(const std::filesystem::path& dir, const TrainState& state, const TrainConfig& config);

struct GridAxes {
  std::vector<double> xi{0.1, 0.2, 0.4, 0.8};
  std::vector<std::size_t> depth{1, 2, 4};
  std::vector<std::size_t> projected{128, 256, 512, 1024};
};

// xi-major, then depth, then projected.
std::vector<TrainConfig> enumerate_grid(const TrainConfig& base, const GridAxes& axes);

struct GridResult {
  TrainConfig config;
  double acc = 0.0;
  double ap = 0.0;
  std::optional<std::string> error;

  double score() const { return acc + ap; }
};

struct Validation {
  double acc;
  double ap;
};

// Scores each config, then orders by ACC+AP descending (stable); failed
// configs are kept, after all successful ones.
std::vector<GridResult> rank_configs(const std::vector<TrainConfig>& configs,
                                     const std::function<Validation(const TrainConfig&)>& evaluate);

std::vector<GridResult> grid_search(const ImageSource& train_source, const ImageSource& validation,
                                    const Backbone& backbone, const std::vector<TrainConfig>& configs);

nlohmann::json grid_to_json(const std::vector<GridResult>& results);

}  // namespace rine
