#include "rine/vit.hpp"

#include <cmath>
#include <utility>

#include "rine/container.hpp"
#include "rine/kernels.hpp"
#include "rine/rng.hpp"

namespace rine {

namespace {

std::string activation_name(MlpActivation a) {
  return a == MlpActivation::gelu ? "gelu" : "quick_gelu";
}

MlpActivation parse_activation(const std::string& name) {
  if (name == "gelu") return MlpActivation::gelu;
  if (name == "quick_gelu") return MlpActivation::quick_gelu;
  throw LoadError("unknown mlp_activation \"" + name + "\"");
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

std::string block_prefix(std::size_t l) { return "block." + std::to_string(l) + "."; }

// Visits every (name, tensor) of the backbone in a fixed order.
template <typename Weights, typename Fn>
void visit_tensors(Weights& w, Fn&& fn) {
  fn("patch_embed.weight", w.patch_weight);
  if (w.patch_bias) fn("patch_embed.bias", *w.patch_bias);
  fn("cls_token", w.cls_token);
  fn("positional", w.positional);
  if (w.pre_ln_gamma) fn("pre_ln.gamma", *w.pre_ln_gamma);
  if (w.pre_ln_beta) fn("pre_ln.beta", *w.pre_ln_beta);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    auto& b = w.blocks[l];
    const auto p = block_prefix(l);
    fn(p + "ln1.gamma", b.ln1_gamma);
    fn(p + "ln1.beta", b.ln1_beta);
    fn(p + "attn.q.weight", b.q_weight);
    fn(p + "attn.q.bias", b.q_bias);
    fn(p + "attn.k.weight", b.k_weight);
    fn(p + "attn.k.bias", b.k_bias);
    fn(p + "attn.v.weight", b.v_weight);
    fn(p + "attn.v.bias", b.v_bias);
    fn(p + "attn.out.weight", b.out_weight);
    fn(p + "attn.out.bias", b.out_bias);
    fn(p + "ln2.gamma", b.ln2_gamma);
    fn(p + "ln2.beta", b.ln2_beta);
    fn(p + "mlp.fc1.weight", b.fc1_weight);
    fn(p + "mlp.fc1.bias", b.fc1_bias);
    fn(p + "mlp.fc2.weight", b.fc2_weight);
    fn(p + "mlp.fc2.bias", b.fc2_bias);
  }
}

// Expected shape of every tensor for a config.
std::vector<std::pair<std::string, Shape>> expected_shapes(const ViTConfig& c) {
  const std::size_t d = c.width;
  std::vector<std::pair<std::string, Shape>> out = {
      {"patch_embed.weight", {c.patch_dim(), d}},
      {"cls_token", {d}},
      {"positional", {c.tokens(), d}},
  };
  if (c.patch_bias) out.push_back({"patch_embed.bias", {d}});
  if (c.pre_norm) {
    out.push_back({"pre_ln.gamma", {d}});
    out.push_back({"pre_ln.beta", {d}});
  }
  for (std::size_t l = 0; l < c.blocks; ++l) {
    const auto p = block_prefix(l);
    for (const char* name : {"ln1.gamma", "ln1.beta", "attn.q.bias", "attn.k.bias", "attn.v.bias",
                             "attn.out.bias", "ln2.gamma", "ln2.beta", "mlp.fc2.bias"}) {
      out.push_back({p + name, {d}});
    }
    for (const char* name : {"attn.q.weight", "attn.k.weight", "attn.v.weight", "attn.out.weight"}) {
      out.push_back({p + name, {d, d}});
    }
    out.push_back({p + "mlp.fc1.weight", {d, c.mlp_hidden()}});
    out.push_back({p + "mlp.fc1.bias", {c.mlp_hidden()}});
    out.push_back({p + "mlp.fc2.weight", {c.mlp_hidden(), d}});
  }
  return out;
}

}  // namespace

void ViTConfig::validate() const {
  if (width == 0 || blocks == 0 || patch == 0 || heads == 0 || image_side == 0) {
    throw ParameterError("ViT config fields must all be positive");
  }
  if (image_side % patch != 0) {
    throw ParameterError("image_side " + std::to_string(image_side) + " not divisible by patch " +
                         std::to_string(patch));
  }
  if (width % heads != 0) {
    throw ParameterError("width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  if (!(ln_eps > 0.0)) throw ParameterError("ln_eps must be positive");
}

nlohmann::json ViTConfig::to_json() const {
  return {{"width", width},         {"blocks", blocks},         {"patch", patch},
          {"heads", heads},         {"image_side", image_side}, {"ln_eps", ln_eps},
          {"pre_norm", pre_norm},   {"patch_bias", patch_bias}, {"mlp_activation", activation_name(activation)}};
}

ViTConfig ViTConfig::from_json(const nlohmann::json& j) {
  ViTConfig c;
  try {
    c.width = j.at("width").get<std::size_t>();
    c.blocks = j.at("blocks").get<std::size_t>();
    c.patch = j.at("patch").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.image_side = j.value("image_side", std::size_t{224});
    c.ln_eps = j.value("ln_eps", 1e-5);
    c.pre_norm = j.value("pre_norm", false);
    c.patch_bias = j.value("patch_bias", false);
    c.activation = parse_activation(j.value("mlp_activation", std::string("gelu")));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("invalid ViT config: ") + e.what());
  }
  return c;
}

Tensor patchify(const Tensor& images, std::size_t patch) {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw ShapeError("patchify expects b×3×H×W images, got " + shape_to_string(images.shape()));
  }
  const std::size_t b = images.dim(0), h = images.dim(2), w = images.dim(3);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError("image sides " + std::to_string(h) + "×" + std::to_string(w) +
                     " not divisible by patch " + std::to_string(patch) + "; crop first");
  }
  const std::size_t gh = h / patch, gw = w / patch;
  const std::size_t len = 3 * patch * patch;
  Tensor out({b, gh * gw, len});
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t gy = 0; gy < gh; ++gy) {
      for (std::size_t gx = 0; gx < gw; ++gx) {
        float* dst = out.data() + (n * gh * gw + gy * gw + gx) * len;
        for (std::size_t c = 0; c < 3; ++c) {
          for (std::size_t r = 0; r < patch; ++r) {
            const float* src = images.data() + ((n * 3 + c) * h + gy * patch + r) * w + gx * patch;
            std::copy(src, src + patch, dst + (c * patch + r) * patch);
          }
        }
      }
    }
  }
  return out;
}

Tensor embed(const Tensor& patches, const ViTWeights& weights, const ViTConfig& config) {
  const std::size_t d = config.width;
  if (patches.rank() != 3 || patches.dim(1) != config.patches() || patches.dim(2) != config.patch_dim()) {
    throw ShapeError("embed: patches " + shape_to_string(patches.shape()) + " do not match config (p=" +
                     std::to_string(config.patches()) + ", len=" + std::to_string(config.patch_dim()) + ")");
  }
  const std::size_t b = patches.dim(0), p = patches.dim(1), t = p + 1;
  auto projected = kernels::matmul(patches.reshaped({b * p, config.patch_dim()}), weights.patch_weight);
  if (weights.patch_bias) kernels::add_row_bias(projected, *weights.patch_bias);
  Tensor tokens({b, t, d});
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t j = 0; j < d; ++j) {
      tokens.at(n, 0, j) = weights.cls_token[j] + weights.positional.at(0, j);
    }
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        tokens.at(n, i + 1, j) = projected.at(n * p + i, j) + weights.positional.at(i + 1, j);
      }
    }
  }
  return tokens;
}

Tensor transformer_block(const Tensor& tokens, const BlockWeights& block, const ViTConfig& config,
                         Tensor* attention_probs) {
  if (tokens.rank() != 3 || tokens.dim(2) != config.width) {
    throw ShapeError("transformer_block: tokens " + shape_to_string(tokens.shape()) +
                     " do not have width " + std::to_string(config.width));
  }
  const std::size_t b = tokens.dim(0), t = tokens.dim(1), d = tokens.dim(2);
  const Tensor x = tokens.reshaped({b * t, d});

  const auto h = kernels::layer_norm(x, block.ln1_gamma, block.ln1_beta, config.ln_eps);
  const auto q = kernels::linear(h, block.q_weight, block.q_bias);
  const auto k = kernels::linear(h, block.k_weight, block.k_bias);
  const auto v = kernels::linear(h, block.v_weight, block.v_bias);
  const auto attended = kernels::attention(q, k, v, b, t, config.heads, attention_probs);
  const auto mid = add(x, kernels::linear(attended, block.out_weight, block.out_bias));

  const auto h2 = kernels::layer_norm(mid, block.ln2_gamma, block.ln2_beta, config.ln_eps);
  auto hidden = kernels::linear(h2, block.fc1_weight, block.fc1_bias);
  hidden = config.activation == MlpActivation::gelu ? kernels::gelu(hidden) : kernels::quick_gelu(hidden);
  const auto out = add(mid, kernels::linear(hidden, block.fc2_weight, block.fc2_bias));
  return out.reshaped({b, t, d});
}

void normalize_pixels(Tensor& images, const ViTWeights& weights) {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw ShapeError("normalize_pixels expects b×3×H×W, got " + shape_to_string(images.shape()));
  }
  const std::size_t plane = images.dim(2) * images.dim(3);
  for (std::size_t n = 0; n < images.dim(0); ++n) {
    for (std::size_t c = 0; c < 3; ++c) {
      float* px = images.data() + (n * 3 + c) * plane;
      const float m = weights.mean[c], s = weights.stddev[c];
      for (std::size_t i = 0; i < plane; ++i) px[i] = (px[i] - m) / s;
    }
  }
}

RineTensorK encode_collect(const Tensor& images, const ViTWeights& weights, const ViTConfig& config) {
  if (weights.blocks.size() != config.blocks) {
    throw ShapeError("encode_collect: weights have " + std::to_string(weights.blocks.size()) +
                     " blocks, config declares " + std::to_string(config.blocks));
  }
  if (images.rank() != 4 || images.dim(2) != config.image_side || images.dim(3) != config.image_side) {
    throw ShapeError("encode_collect: images " + shape_to_string(images.shape()) + " are not " +
                     std::to_string(config.image_side) + "×" + std::to_string(config.image_side));
  }
  const std::size_t b = images.dim(0), d = config.width;
  Tensor z = embed(patchify(images, config.patch), weights, config);
  if (config.pre_norm) {
    z = kernels::layer_norm(z, *weights.pre_ln_gamma, *weights.pre_ln_beta, config.ln_eps);
  }
  RineTensorK k({b, config.blocks, d});
  for (std::size_t l = 0; l < config.blocks; ++l) {
    z = transformer_block(z, weights.blocks[l], config);
    for (std::size_t n = 0; n < b; ++n) {
      std::copy_n(z.data() + n * z.dim(1) * d, d, k.data() + (n * config.blocks + l) * d);
    }
  }
  return k;
}

void validate_weights(const ViTWeights& weights, const ViTConfig& config) {
  config.validate();
  if (weights.blocks.size() != config.blocks) {
    throw LoadError("weights have " + std::to_string(weights.blocks.size()) + " blocks, config declares " +
                    std::to_string(config.blocks));
  }
  if (weights.patch_bias.has_value() != config.patch_bias) {
    throw LoadError("patch_embed.bias presence disagrees with config");
  }
  if (weights.pre_ln_gamma.has_value() != config.pre_norm || weights.pre_ln_beta.has_value() != config.pre_norm) {
    throw LoadError("pre_ln presence disagrees with config");
  }
  std::map<std::string, Shape> expected;
  for (auto& [name, shape] : expected_shapes(config)) expected.emplace(name, shape);
  visit_tensors(weights, [&](const std::string& name, const Tensor& t) {
    if (t.shape() != expected.at(name)) {
      throw LoadError("tensor \"" + name + "\" has shape " + shape_to_string(t.shape()) + ", expected " +
                      shape_to_string(expected.at(name)));
    }
  });
}

Backbone::Backbone(ViTConfig config, ViTWeights weights)
    : config_(std::move(config)), weights_(std::move(weights)) {
  validate_weights(weights_, config_);
}

RineTensorK Backbone::encode(Tensor pixels) const {
  normalize_pixels(pixels, weights_);
  return encode_collect(pixels, weights_, config_);
}

Backbone load_backbone(const std::filesystem::path& path) {
  const Container file = read_container(path);
  if (file.meta.value("kind", std::string()) != "vit") {
    throw LoadError(path.string() + ": container kind is not \"vit\"");
  }
  if (!file.meta.contains("config")) throw LoadError(path.string() + ": manifest has no config");
  const ViTConfig config = ViTConfig::from_json(file.meta["config"]);
  try {
    config.validate();
  } catch (const ParameterError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }

  ViTWeights w;
  try {
    const auto& norm = file.meta.at("normalization");
    for (std::size_t c = 0; c < 3; ++c) {
      w.mean[c] = norm.at("mean").at(c).get<float>();
      w.stddev[c] = norm.at("std").at(c).get<float>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": bad normalization block: " + e.what());
  }
  if (config.patch_bias) w.patch_bias.emplace();
  if (config.pre_norm) {
    w.pre_ln_gamma.emplace();
    w.pre_ln_beta.emplace();
  }
  w.blocks.resize(config.blocks);
  std::map<std::string, Shape> expected;
  for (auto& [name, shape] : expected_shapes(config)) expected.emplace(name, shape);
  visit_tensors(w, [&](const std::string& name, Tensor& t) { t = file.require(name, expected.at(name)); });
  for (const auto& [name, tensor] : file.tensors) {
    if (!expected.count(name)) throw LoadError(path.string() + ": unexpected tensor \"" + name + "\"");
  }
  return Backbone(config, std::move(w));
}

void save_backbone(const Backbone& backbone, const std::filesystem::path& path) {
  Container file;
  const auto& w = backbone.weights();
  file.meta["kind"] = "vit";
  file.meta["config"] = backbone.config().to_json();
  file.meta["normalization"] = {{"mean", {w.mean[0], w.mean[1], w.mean[2]}},
                                {"std", {w.stddev[0], w.stddev[1], w.stddev[2]}}};
  visit_tensors(w, [&](const std::string& name, const Tensor& t) { file.tensors.emplace(name, t); });
  write_container(path, file);
}

Backbone make_random_backbone(const ViTConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  auto gaussian = [&](Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<float>(rng.normal(0.0, stddev));
    return t;
  };
  auto matrix = [&](std::size_t in, std::size_t out) {
    return gaussian({in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
  };
  const std::size_t d = config.width;
  auto ones = [&] { return Tensor({d}, 1.0f); };
  auto zeros = [](std::size_t n) { return Tensor({n}); };

  ViTWeights w;
  w.patch_weight = matrix(config.patch_dim(), d);
  if (config.patch_bias) w.patch_bias = zeros(d);
  w.cls_token = gaussian({d}, 1.0);
  w.positional = gaussian({config.tokens(), d}, 0.1);
  if (config.pre_norm) {
    w.pre_ln_gamma = ones();
    w.pre_ln_beta = zeros(d);
  }
  for (std::size_t l = 0; l < config.blocks; ++l) {
    BlockWeights b;
    b.ln1_gamma = ones();
    b.ln1_beta = zeros(d);
    b.q_weight = matrix(d, d);
    b.q_bias = zeros(d);
    b.k_weight = matrix(d, d);
    b.k_bias = zeros(d);
    b.v_weight = matrix(d, d);
    b.v_bias = zeros(d);
    b.out_weight = matrix(d, d);
    b.out_bias = zeros(d);
    b.ln2_gamma = ones();
    b.ln2_beta = zeros(d);
    b.fc1_weight = matrix(d, config.mlp_hidden());
    b.fc1_bias = zeros(config.mlp_hidden());
    b.fc2_weight = matrix(config.mlp_hidden(), d);
    b.fc2_bias = zeros(d);
    w.blocks.push_back(std::move(b));
  }
  return Backbone(config, std::move(w));
}

}  // namespace rine
