#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rine/rng.hpp"
#include "rine/tensor.hpp"

namespace rine {

// Shape and ablation switches of the trainable detector head.
struct HeadConfig {
  std::size_t blocks = 0;     // n, CLS tokens per image
  std::size_t width = 0;      // d, backbone width
  std::size_t projected = 0;  // d', projection width
  std::size_t depth = 1;      // q, layers per projection network
  double dropout = 0.5;
  bool use_tie = true;           // false: fixed uniform 1/n block weights
  bool last_block_only = false;  // use only the final block's CLS token

  std::size_t active_blocks() const { return last_block_only ? 1 : blocks; }
  void validate() const;

  nlohmann::json to_json() const;
  static HeadConfig from_json(const nlohmann::json& j);
  bool operator==(const HeadConfig&) const = default;
};

template <typename T>
struct Dense {
  BasicTensor<T> weight;  // in × out
  BasicTensor<T> bias;    // out
};

// Every trainable tensor. The same struct carries gradients.
template <typename T>
struct HeadParams {
  std::vector<Dense<T>> proj1;  // Q1: d→d', then d'→d'
  BasicTensor<T> importance;    // TIE logits, active_blocks × d'; empty without TIE
  std::vector<Dense<T>> proj2;  // Q2: d'→d'
  Dense<T> hidden1, hidden2;    // classifier d'→d' ReLU layers
  Dense<T> output;              // d'→1

  // Calls fn(name, tensor) for every tensor in a fixed order.
  template <typename Fn>
  void for_each(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    visit(*this, fn);
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const BasicTensor<T>& t) { n += t.size(); });
    return n;
  }

  template <typename U>
  HeadParams<U> cast() const {
    HeadParams<U> out;
    auto dense = [](const Dense<T>& d) { return Dense<U>{d.weight.template cast<U>(), d.bias.template cast<U>()}; };
    for (const auto& d : proj1) out.proj1.push_back(dense(d));
    if (!importance.empty()) out.importance = importance.template cast<U>();
    for (const auto& d : proj2) out.proj2.push_back(dense(d));
    out.hidden1 = dense(hidden1);
    out.hidden2 = dense(hidden2);
    out.output = dense(output);
    return out;
  }

  // Zero tensors shaped like `like`.
  static HeadParams zeros_like(const HeadParams& like) {
    HeadParams out = like;
    out.for_each([](const std::string&, BasicTensor<T>& t) { t.fill(T(0)); });
    return out;
  }

  bool operator==(const HeadParams& other) const {
    std::vector<const BasicTensor<T>*> a, b;
    for_each([&](const std::string&, const BasicTensor<T>& t) { a.push_back(&t); });
    other.for_each([&](const std::string&, const BasicTensor<T>& t) { b.push_back(&t); });
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!(*a[i] == *b[i])) return false;
    }
    return true;
  }

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn& fn) {
    for (std::size_t m = 0; m < self.proj1.size(); ++m) {
      fn("q1." + std::to_string(m) + ".weight", self.proj1[m].weight);
      fn("q1." + std::to_string(m) + ".bias", self.proj1[m].bias);
    }
    if (!self.importance.empty()) fn(std::string("tie.importance"), self.importance);
    for (std::size_t m = 0; m < self.proj2.size(); ++m) {
      fn("q2." + std::to_string(m) + ".weight", self.proj2[m].weight);
      fn("q2." + std::to_string(m) + ".bias", self.proj2[m].bias);
    }
    fn(std::string("head.hidden1.weight"), self.hidden1.weight);
    fn(std::string("head.hidden1.bias"), self.hidden1.bias);
    fn(std::string("head.hidden2.weight"), self.hidden2.weight);
    fn(std::string("head.hidden2.bias"), self.hidden2.bias);
    fn(std::string("head.output.weight"), self.output.weight);
    fn(std::string("head.output.bias"), self.output.bias);
  }
};

template <typename T>
using HeadGradients = HeadParams<T>;

enum class Mode { train, eval };

// Cached activations of one projection layer.
template <typename T>
struct LayerTrace {
  BasicTensor<T> input;
  BasicTensor<T> pre;   // x·W + b
  BasicTensor<T> mask;  // dropout mask, empty in eval mode
};

template <typename T>
struct ForwardTrace {
  Mode mode = Mode::eval;
  std::size_t batch = 0;
  std::size_t blocks = 0;
  std::vector<LayerTrace<T>> proj1;  // rows are (batch, block) pairs
  BasicTensor<T> projected;          // Q1 output, (b·n) × d'
  BasicTensor<T> weights;            // softmax(A) or uniform, n × d'
  BasicTensor<T> fused;              // weighted sum over blocks, b × d'
  std::vector<LayerTrace<T>> proj2;
  BasicTensor<T> features;           // Q2 output, b × d'
  BasicTensor<T> hidden1_pre, hidden1, hidden2_pre, hidden2;
};

template <typename T>
struct HeadOutput {
  BasicTensor<T> logits;    // b
  BasicTensor<T> features;  // b × d', input to the contrastive loss
  ForwardTrace<T> trace;
};

template <typename T>
HeadParams<T> init_params(const HeadConfig& config, Rng& rng);

// k: b×n×d CLS stack (b×1×d, or the full stack, when last_block_only).
// Train mode draws dropout masks from rng, which must then be non-null.
template <typename T>
HeadOutput<T> forward(const BasicTensor<T>& k, const HeadParams<T>& params, const HeadConfig& config, Mode mode,
                      Rng* rng = nullptr);

// Exact reverse mode through classifier, Q2, TIE and Q1. grad_features is
// added at the Q2 output; pass an empty tensor when there is none.
template <typename T>
HeadGradients<T> backward(const ForwardTrace<T>& trace, const HeadParams<T>& params, const HeadConfig& config,
                          const BasicTensor<T>& grad_logits, const BasicTensor<T>& grad_features);

// softmax over the block axis of the TIE logits, or uniform 1/n without TIE.
template <typename T>
BasicTensor<T> block_weights(const HeadParams<T>& params, const HeadConfig& config);

// Closed-form trainable scalar count.
std::uint64_t param_count(const HeadConfig& config);

void save_head(const HeadParams<float>& params, const HeadConfig& config, const std::filesystem::path& path);
struct LoadedHead {
  HeadConfig config;
  HeadParams<float> params;
};
LoadedHead load_head(const std::filesystem::path& path);
// Throws LoadError if the stored config differs from `expected`.
LoadedHead load_head(const std::filesystem::path& path, const HeadConfig& expected);

}  // namespace rine
