#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rine/tensor.hpp"

namespace rine {

enum class MlpActivation { gelu, quick_gelu };

// Geometry of a frozen ViT image encoder.
struct ViTConfig {
  std::size_t width = 0;   // d
  std::size_t blocks = 0;  // n
  std::size_t patch = 0;   // P
  std::size_t heads = 1;
  std::size_t image_side = 224;
  double ln_eps = 1e-5;
  bool pre_norm = false;    // LayerNorm on the embedded tokens before block 1
  bool patch_bias = false;  // patch projection carries a bias
  MlpActivation activation = MlpActivation::gelu;

  std::size_t grid() const { return image_side / patch; }
  std::size_t patches() const { return grid() * grid(); }
  std::size_t tokens() const { return patches() + 1; }
  std::size_t patch_dim() const { return patch * patch * 3; }
  std::size_t mlp_hidden() const { return 4 * width; }

  // Throws ParameterError on inconsistent geometry.
  void validate() const;

  nlohmann::json to_json() const;
  static ViTConfig from_json(const nlohmann::json& j);
  bool operator==(const ViTConfig&) const = default;
};

// Linear weights are stored input-major (in×out) so a layer is x·W + b.
struct BlockWeights {
  Tensor ln1_gamma, ln1_beta;
  Tensor q_weight, q_bias, k_weight, k_bias, v_weight, v_bias;
  Tensor out_weight, out_bias;
  Tensor ln2_gamma, ln2_beta;
  Tensor fc1_weight, fc1_bias;  // d × 4d
  Tensor fc2_weight, fc2_bias;  // 4d × d
  bool operator==(const BlockWeights&) const = default;
};

struct ViTWeights {
  // Per-channel normalization applied to [0,1] RGB pixels before patchify.
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> stddev{0.5f, 0.5f, 0.5f};
  Tensor patch_weight;  // (P²·3) × d, rows in (channel, row, col) order
  std::optional<Tensor> patch_bias;
  Tensor cls_token;   // d
  Tensor positional;  // (p+1) × d
  std::optional<Tensor> pre_ln_gamma, pre_ln_beta;
  std::vector<BlockWeights> blocks;
  bool operator==(const ViTWeights&) const = default;
};

// Per-block CLS tokens, batch × blocks × width.
using RineTensorK = Tensor;

// Splits b×3×H×W images into b×p×(P²·3) patches. Patches are in raster order
// over the patch grid; each is flattened in (channel, row, col) order.
Tensor patchify(const Tensor& images, std::size_t patch);

// b×p×(P²·3) patches → b×(p+1)×d tokens: CLS at position 0, positional rows
// added to every token.
Tensor embed(const Tensor& patches, const ViTWeights& weights, const ViTConfig& config);

// One pre-norm encoder block on b×T×d tokens. If attention_probs is given it
// receives the b×heads×T×T attention weights.
Tensor transformer_block(const Tensor& tokens, const BlockWeights& block, const ViTConfig& config,
                         Tensor* attention_probs = nullptr);

// In-place per-channel (x - mean) / std on b×3×H×W pixels.
void normalize_pixels(Tensor& images, const ViTWeights& weights);

// Normalized b×3×S×S images → K (b×n×d), the raw CLS output of every block.
RineTensorK encode_collect(const Tensor& images, const ViTWeights& weights, const ViTConfig& config);

// Validates every tensor's shape against the config.
void validate_weights(const ViTWeights& weights, const ViTConfig& config);

// Frozen backbone: configuration and weights that are never mutated.
class Backbone {
 public:
  Backbone(ViTConfig config, ViTWeights weights);

  const ViTConfig& config() const { return config_; }
  const ViTWeights& weights() const { return weights_; }

  // Pixels in [0,1], b×3×S×S with S = image_side.
  RineTensorK encode(Tensor pixels) const;

 private:
  ViTConfig config_;
  ViTWeights weights_;
};

Backbone load_backbone(const std::filesystem::path& path);
void save_backbone(const Backbone& backbone, const std::filesystem::path& path);

// Randomly initialized backbone for desk-scale experiments: matrices
// ~ N(0, 1/fan_in), zero biases, unit LayerNorm gains.
Backbone make_random_backbone(const ViTConfig& config, std::uint64_t seed);

}  // namespace rine
