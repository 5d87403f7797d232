#include "rine/head.hpp"

#include <cmath>

#include "rine/container.hpp"
#include "rine/kernels.hpp"

namespace rine {

void HeadConfig::validate() const {
  if (blocks == 0 || width == 0 || projected == 0 || depth == 0) {
    throw ParameterError("head config needs blocks, width, projected and depth ≥ 1");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw ParameterError("head dropout must lie in [0, 1), got " + std::to_string(dropout));
  }
}

nlohmann::json HeadConfig::to_json() const {
  return {{"blocks", blocks},   {"width", width},     {"projected", projected},
          {"depth", depth},     {"dropout", dropout}, {"use_tie", use_tie},
          {"last_block_only", last_block_only}};
}

HeadConfig HeadConfig::from_json(const nlohmann::json& j) {
  HeadConfig c;
  try {
    c.blocks = j.at("blocks").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.projected = j.at("projected").get<std::size_t>();
    c.depth = j.at("depth").get<std::size_t>();
    c.dropout = j.value("dropout", 0.5);
    c.use_tie = j.value("use_tie", true);
    c.last_block_only = j.value("last_block_only", false);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("invalid head config: ") + e.what());
  }
  return c;
}

namespace {

template <typename T>
Dense<T> uniform_dense(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Dense<T> layer{BasicTensor<T>({in, out}), BasicTensor<T>({out})};
  for (auto& w : layer.weight.values()) w = static_cast<T>(rng.uniform(-bound, bound));
  return layer;
}

template <typename T>
void check_dense(const Dense<T>& layer, std::size_t in, std::size_t out, const char* what) {
  if (layer.weight.shape() != Shape{in, out} || layer.bias.shape() != Shape{out}) {
    throw ShapeError(std::string(what) + ": expected " + shape_to_string({in, out}) + " weights, got " +
                     shape_to_string(layer.weight.shape()));
  }
}

template <typename T>
void check_params(const HeadParams<T>& p, const HeadConfig& c) {
  if (p.proj1.size() != c.depth || p.proj2.size() != c.depth) {
    throw ShapeError("head params depth does not match config depth " + std::to_string(c.depth));
  }
  for (std::size_t m = 0; m < c.depth; ++m) {
    check_dense(p.proj1[m], m == 0 ? c.width : c.projected, c.projected, "q1");
    check_dense(p.proj2[m], c.projected, c.projected, "q2");
  }
  if (c.use_tie) {
    if (p.importance.shape() != Shape{c.active_blocks(), c.projected}) {
      throw ShapeError("TIE importance has shape " + shape_to_string(p.importance.shape()) + ", expected " +
                       shape_to_string({c.active_blocks(), c.projected}));
    }
  } else if (!p.importance.empty()) {
    throw ShapeError("TIE importance present but use_tie is off");
  }
  check_dense(p.hidden1, c.projected, c.projected, "head.hidden1");
  check_dense(p.hidden2, c.projected, c.projected, "head.hidden2");
  check_dense(p.output, c.projected, 1, "head.output");
}

// relu(x·W + b), then dropout in train mode.
template <typename T>
BasicTensor<T> projection_layer(const BasicTensor<T>& x, const Dense<T>& layer, Mode mode, double rate, Rng* rng,
                                LayerTrace<T>& trace) {
  trace.input = x;
  trace.pre = kernels::linear(x, layer.weight, layer.bias);
  auto y = kernels::relu(trace.pre);
  if (mode == Mode::train) {
    trace.mask = kernels::dropout_mask<T>(*rng, y.shape(), rate);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= trace.mask[i];
  }
  return y;
}

// Back through one projection layer; returns the input gradient when wanted.
template <typename T>
BasicTensor<T> projection_backward(const LayerTrace<T>& trace, const Dense<T>& layer, BasicTensor<T> grad,
                                   Dense<T>& out, bool need_input_grad) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!trace.mask.empty()) grad[i] *= trace.mask[i];
    if (!(trace.pre[i] > T(0))) grad[i] = T(0);
  }
  out.weight = kernels::matmul_tn(trace.input, grad);
  out.bias = kernels::sum_rows(grad);
  if (!need_input_grad) return {};
  return kernels::matmul_nt(grad, layer.weight);
}

template <typename T>
BasicTensor<T> relu_mask_grad(BasicTensor<T> grad, const BasicTensor<T>& pre) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!(pre[i] > T(0))) grad[i] = T(0);
  }
  return grad;
}

}  // namespace

template <typename T>
HeadParams<T> init_params(const HeadConfig& config, Rng& rng) {
  config.validate();
  HeadParams<T> p;
  for (std::size_t m = 0; m < config.depth; ++m) {
    p.proj1.push_back(uniform_dense<T>(m == 0 ? config.width : config.projected, config.projected, rng));
  }
  if (config.use_tie) {
    p.importance = BasicTensor<T>({config.active_blocks(), config.projected});
    for (auto& a : p.importance.values()) a = static_cast<T>(rng.normal(0.0, 0.02));
  }
  for (std::size_t m = 0; m < config.depth; ++m) {
    p.proj2.push_back(uniform_dense<T>(config.projected, config.projected, rng));
  }
  p.hidden1 = uniform_dense<T>(config.projected, config.projected, rng);
  p.hidden2 = uniform_dense<T>(config.projected, config.projected, rng);
  p.output = uniform_dense<T>(config.projected, 1, rng);
  return p;
}

template <typename T>
BasicTensor<T> block_weights(const HeadParams<T>& params, const HeadConfig& config) {
  if (config.use_tie) return kernels::softmax(params.importance, 0);
  const std::size_t n = config.active_blocks();
  return BasicTensor<T>({n, config.projected}, static_cast<T>(1.0 / static_cast<double>(n)));
}

template <typename T>
HeadOutput<T> forward(const BasicTensor<T>& k, const HeadParams<T>& params, const HeadConfig& config, Mode mode,
                      Rng* rng) {
  config.validate();
  check_params(params, config);
  if (mode == Mode::train && rng == nullptr) throw ParameterError("train-mode forward needs an rng");
  if (k.rank() != 3 || k.dim(2) != config.width) {
    throw ShapeError("head input " + shape_to_string(k.shape()) + " is not b×n×" + std::to_string(config.width));
  }
  const std::size_t b = k.dim(0), d = config.width, dp = config.projected;
  const std::size_t n = config.active_blocks();

  BasicTensor<T> x;
  if (k.dim(1) == n) {
    x = k.reshaped({b * n, d});
  } else if (config.last_block_only && k.dim(1) == config.blocks) {
    x = BasicTensor<T>({b, d});
    for (std::size_t i = 0; i < b; ++i) {
      std::copy_n(k.data() + (i * config.blocks + config.blocks - 1) * d, d, x.data() + i * d);
    }
  } else {
    throw ShapeError("head input " + shape_to_string(k.shape()) + " does not carry " + std::to_string(n) +
                     " blocks");
  }

  HeadOutput<T> out;
  auto& tr = out.trace;
  tr.mode = mode;
  tr.batch = b;
  tr.blocks = n;
  tr.proj1.resize(config.depth);
  for (std::size_t m = 0; m < config.depth; ++m) {
    x = projection_layer(x, params.proj1[m], mode, config.dropout, rng, tr.proj1[m]);
  }
  tr.projected = x;

  tr.weights = block_weights(params, config);
  tr.fused = BasicTensor<T>({b, dp});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t l = 0; l < n; ++l) {
      const T* row = tr.projected.data() + (i * n + l) * dp;
      const T* w = tr.weights.data() + l * dp;
      T* f = tr.fused.data() + i * dp;
      for (std::size_t c = 0; c < dp; ++c) f[c] += w[c] * row[c];
    }
  }

  x = tr.fused;
  tr.proj2.resize(config.depth);
  for (std::size_t m = 0; m < config.depth; ++m) {
    x = projection_layer(x, params.proj2[m], mode, config.dropout, rng, tr.proj2[m]);
  }
  tr.features = x;

  tr.hidden1_pre = kernels::linear(tr.features, params.hidden1.weight, params.hidden1.bias);
  tr.hidden1 = kernels::relu(tr.hidden1_pre);
  tr.hidden2_pre = kernels::linear(tr.hidden1, params.hidden2.weight, params.hidden2.bias);
  tr.hidden2 = kernels::relu(tr.hidden2_pre);
  out.logits = kernels::linear(tr.hidden2, params.output.weight, params.output.bias).reshaped({b});
  out.features = tr.features;
  return out;
}

template <typename T>
HeadGradients<T> backward(const ForwardTrace<T>& trace, const HeadParams<T>& params, const HeadConfig& config,
                          const BasicTensor<T>& grad_logits, const BasicTensor<T>& grad_features) {
  check_params(params, config);
  const std::size_t b = trace.batch, n = trace.blocks, dp = config.projected;
  if (trace.proj1.size() != config.depth || trace.proj2.size() != config.depth || n != config.active_blocks() ||
      trace.features.shape() != Shape{b, dp}) {
    throw ShapeError("forward trace does not match head config");
  }
  if (grad_logits.size() != b) {
    throw ShapeError("grad_logits " + shape_to_string(grad_logits.shape()) + " does not match batch " +
                     std::to_string(b));
  }
  if (!grad_features.empty() && grad_features.shape() != Shape{b, dp}) {
    throw ShapeError("grad_features " + shape_to_string(grad_features.shape()) + " is not " +
                     shape_to_string({b, dp}));
  }

  HeadGradients<T> g;
  g.proj1.resize(config.depth);
  g.proj2.resize(config.depth);

  const auto g_out = grad_logits.reshaped({b, 1});
  g.output.weight = kernels::matmul_tn(trace.hidden2, g_out);
  g.output.bias = kernels::sum_rows(g_out);
  auto g_pre2 = relu_mask_grad(kernels::matmul_nt(g_out, params.output.weight), trace.hidden2_pre);
  g.hidden2.weight = kernels::matmul_tn(trace.hidden1, g_pre2);
  g.hidden2.bias = kernels::sum_rows(g_pre2);
  auto g_pre1 = relu_mask_grad(kernels::matmul_nt(g_pre2, params.hidden2.weight), trace.hidden1_pre);
  g.hidden1.weight = kernels::matmul_tn(trace.features, g_pre1);
  g.hidden1.bias = kernels::sum_rows(g_pre1);

  auto grad = kernels::matmul_nt(g_pre1, params.hidden1.weight);
  if (!grad_features.empty()) {
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += grad_features[i];
  }
  for (std::size_t m = config.depth; m-- > 0;) {
    grad = projection_backward(trace.proj2[m], params.proj2[m], std::move(grad), g.proj2[m], true);
  }

  // grad is now dL/dfused (b × d').
  BasicTensor<T> g_projected({b * n, dp});
  BasicTensor<T> g_weights({n, dp});
  for (std::size_t i = 0; i < b; ++i) {
    const T* gf = grad.data() + i * dp;
    for (std::size_t l = 0; l < n; ++l) {
      const T* w = trace.weights.data() + l * dp;
      const T* row = trace.projected.data() + (i * n + l) * dp;
      T* gp = g_projected.data() + (i * n + l) * dp;
      T* gw = g_weights.data() + l * dp;
      for (std::size_t c = 0; c < dp; ++c) {
        gp[c] = w[c] * gf[c];
        gw[c] += gf[c] * row[c];
      }
    }
  }
  if (config.use_tie) {
    // Softmax Jacobian per feature column: dA = S ⊙ (dS - Σ_l S·dS).
    g.importance = BasicTensor<T>({n, dp});
    for (std::size_t c = 0; c < dp; ++c) {
      T dot = 0;
      for (std::size_t l = 0; l < n; ++l) dot += trace.weights.at(l, c) * g_weights.at(l, c);
      for (std::size_t l = 0; l < n; ++l) g.importance.at(l, c) = trace.weights.at(l, c) * (g_weights.at(l, c) - dot);
    }
  }

  grad = std::move(g_projected);
  for (std::size_t m = config.depth; m-- > 0;) {
    grad = projection_backward(trace.proj1[m], params.proj1[m], std::move(grad), g.proj1[m], m > 0);
  }
  return g;
}

std::uint64_t param_count(const HeadConfig& c) {
  c.validate();
  const std::uint64_t d = c.width, dp = c.projected, q = c.depth;
  const std::uint64_t layer = dp * dp + dp;
  const std::uint64_t q1 = (d * dp + dp) + (q - 1) * layer;
  const std::uint64_t q2 = q * layer;
  const std::uint64_t tie = c.use_tie ? c.active_blocks() * dp : 0;
  const std::uint64_t head = 2 * layer + (dp + 1);
  return q1 + q2 + tie + head;
}

void save_head(const HeadParams<float>& params, const HeadConfig& config, const std::filesystem::path& path) {
  check_params(params, config);
  Container file;
  file.meta["kind"] = "head";
  file.meta["config"] = config.to_json();
  params.for_each([&](const std::string& name, const Tensor& t) { file.tensors.emplace(name, t); });
  write_container(path, file);
}

LoadedHead load_head(const std::filesystem::path& path) {
  const Container file = read_container(path);
  if (file.meta.value("kind", std::string()) != "head") {
    throw LoadError(path.string() + ": container kind is not \"head\"");
  }
  if (!file.meta.contains("config")) throw LoadError(path.string() + ": manifest has no config");
  LoadedHead out{HeadConfig::from_json(file.meta["config"]), {}};
  try {
    out.config.validate();
  } catch (const ParameterError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  // Shape template from a throwaway init; every entry is then overwritten.
  Rng rng(0);
  out.params = init_params<float>(out.config, rng);
  std::size_t used = 0;
  out.params.for_each([&](const std::string& name, Tensor& t) {
    t = file.require(name, t.shape());
    ++used;
  });
  if (used != file.tensors.size()) {
    throw LoadError(path.string() + ": container holds tensors not part of the head");
  }
  return out;
}

LoadedHead load_head(const std::filesystem::path& path, const HeadConfig& expected) {
  auto loaded = load_head(path);
  if (!(loaded.config == expected)) {
    throw LoadError(path.string() + ": stored head config " + loaded.config.to_json().dump() +
                    " does not match expected " + expected.to_json().dump());
  }
  return loaded;
}

#define RINE_INSTANTIATE_HEAD(T)                                                                             \
  template HeadParams<T> init_params<T>(const HeadConfig&, Rng&);                                            \
  template BasicTensor<T> block_weights<T>(const HeadParams<T>&, const HeadConfig&);                         \
  template HeadOutput<T> forward<T>(const BasicTensor<T>&, const HeadParams<T>&, const HeadConfig&, Mode,     \
                                    Rng*);                                                                   \
  template HeadGradients<T> backward<T>(const ForwardTrace<T>&, const HeadParams<T>&, const HeadConfig&,     \
                                        const BasicTensor<T>&, const BasicTensor<T>&);

RINE_INSTANTIATE_HEAD(float)
RINE_INSTANTIATE_HEAD(double)

}  // namespace rine
