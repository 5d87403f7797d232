#include "rine/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include <spdlog/spdlog.h>

#include "rine/container.hpp"
#include "rine/metrics.hpp"

namespace rine {

namespace {

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
std::vector<T*> tensor_list(HeadParams<float>& p) {
  std::vector<T*> out;
  p.for_each([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> named_tensors(const HeadParams<float>& p) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  p.for_each([&](const std::string& name, const Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

void clip_gradients(HeadGradients<float>& grads, double max_norm) {
  double sq = 0.0;
  grads.for_each([&](const std::string&, const Tensor& t) {
    for (float v : t.values()) sq += static_cast<double>(v) * v;
  });
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double scale = max_norm / norm;
  grads.for_each([&](const std::string&, Tensor& t) {
    for (float& v : t.values()) v = static_cast<float>(v * scale);
  });
}

std::vector<std::size_t> epoch_order(const Rng& root, std::uint64_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = root.derive("shuffle").derive(epoch);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

// Backbone outputs for deterministic preprocessing, keyed by sample id.
class FeatureCache {
 public:
  FeatureCache(const ImageSource& source, const Encoder& encoder, std::size_t batch_size) {
    std::size_t skipped = 0;
    for (std::size_t start = 0; start < source.size(); start += batch_size) {
      std::vector<std::size_t> indices;
      for (std::size_t i = start; i < std::min(source.size(), start + batch_size); ++i) indices.push_back(i);
      auto batch = load_batch(source, indices,
                              [&](ImageSample s) { return preprocess_eval(s, encoder.image_side); });
      skipped += indices.size() - batch.size();
      if (batch.empty()) continue;
      const Tensor k = encoder.encode(stack_pixels(batch));
      row_ = k.size() / batch.size();
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const float* first = k.data() + b * row_;
        rows_.emplace(batch[b].id, std::vector<float>(first, first + row_));
      }
    }
    spdlog::info("cached backbone features for {} samples ({} skipped)", rows_.size(), skipped);
  }

  const std::vector<float>* find(const std::string& id) const {
    const auto it = rows_.find(id);
    return it == rows_.end() ? nullptr : &it->second;
  }

 private:
  std::unordered_map<std::string, std::vector<float>> rows_;
  std::size_t row_ = 0;
};

bool single_class(const ImageSource& source) {
  for (std::size_t i = 1; i < source.size(); ++i) {
    if (source.label(i) != source.label(0)) return false;
  }
  return true;
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 2) throw ParameterError("batch_size must be at least 2");
  if (epochs < 1) throw ParameterError("epochs must be at least 1");
  if (!(lr > 0.0)) throw ParameterError("lr must be positive");
  if (!(decay_factor > 0.0)) throw ParameterError("decay_factor must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ParameterError("Adam betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ParameterError("eps must be positive");
  if (!(weight_decay >= 0.0) || !(grad_clip >= 0.0)) {
    throw ParameterError("weight_decay and grad_clip must be nonnegative");
  }
  if (cache_features && augment) {
    throw ParameterError("cache_features requires augmentation to be off");
  }
  loss.validate();
}

double TrainConfig::lr_at(std::size_t epoch) const {
  double rate = lr;
  if (epochs > 5) {
    for (std::size_t boundary : decay_epochs) {
      if (epoch >= boundary) rate /= decay_factor;
    }
  }
  return rate;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch_size", batch_size},
          {"lr", lr},
          {"epochs", epochs},
          {"decay_epochs", decay_epochs},
          {"decay_factor", decay_factor},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"weight_decay", weight_decay},
          {"grad_clip", grad_clip},
          {"seed", seed},
          {"loss", loss.to_json()},
          {"head", head.to_json()},
          {"augment", augment},
          {"augmentation", augmentation.to_json()},
          {"cache_features", cache_features}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, const TrainConfig& defaults) {
  if (!j.is_object()) throw LoadError("train config must be a JSON object");
  nlohmann::json full = defaults.to_json();
  full.merge_patch(j);
  TrainConfig c;
  try {
    c.batch_size = full.at("batch_size").get<std::size_t>();
    c.lr = full.at("lr").get<double>();
    c.epochs = full.at("epochs").get<std::size_t>();
    c.decay_epochs = full.at("decay_epochs").get<std::vector<std::size_t>>();
    c.decay_factor = full.at("decay_factor").get<double>();
    c.beta1 = full.at("beta1").get<double>();
    c.beta2 = full.at("beta2").get<double>();
    c.eps = full.at("eps").get<double>();
    c.weight_decay = full.at("weight_decay").get<double>();
    c.grad_clip = full.at("grad_clip").get<double>();
    c.seed = full.at("seed").get<std::uint64_t>();
    c.loss = LossConfig::from_json(full.at("loss"));
    c.head = HeadConfig::from_json(full.at("head"));
    c.augment = full.at("augment").get<bool>();
    c.augmentation = AugmentConfig::from_json(full.at("augmentation"));
    c.cache_features = full.at("cache_features").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("invalid train config: ") + e.what());
  }
  return c;
}

std::string TrainConfig::digest() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_string(to_json().dump())));
  return buf;
}

Encoder make_encoder(const Backbone& backbone) {
  return {[&backbone](Tensor pixels) { return backbone.encode(std::move(pixels)); }, backbone.config().image_side,
          backbone.config().width, backbone.config().blocks};
}

AdamState AdamState::zeros_like(const HeadParams<float>& params) {
  return {HeadParams<float>::zeros_like(params), HeadParams<float>::zeros_like(params), 0};
}

void adam_step(HeadParams<float>& params, const HeadGradients<float>& grads, AdamState& state, double lr,
               const TrainConfig& config) {
  const auto g = named_tensors(grads);
  auto p = tensor_list<Tensor>(params);
  auto m = tensor_list<Tensor>(state.m);
  auto v = tensor_list<Tensor>(state.v);
  if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size()) {
    throw ShapeError("adam_step: parameter, gradient and moment sets differ");
  }
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (g[i].second->shape() != p[i]->shape() || m[i]->shape() != p[i]->shape() || v[i]->shape() != p[i]->shape()) {
      throw ShapeError("adam_step: shape mismatch for " + g[i].first);
    }
    for (float x : g[i].second->values()) {
      if (!std::isfinite(x)) throw ParameterError("non-finite gradient in " + g[i].first);
    }
  }
  const auto t = static_cast<double>(++state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto pv = p[i]->values();
    auto mv = m[i]->values();
    auto vv = v[i]->values();
    const auto gv = g[i].second->values();
    for (std::size_t e = 0; e < pv.size(); ++e) {
      const double grad = gv[e] + config.weight_decay * pv[e];
      const double mm = config.beta1 * mv[e] + (1.0 - config.beta1) * grad;
      const double vm = config.beta2 * vv[e] + (1.0 - config.beta2) * grad * grad;
      mv[e] = static_cast<float>(mm);
      vv[e] = static_cast<float>(vm);
      pv[e] = static_cast<float>(pv[e] - lr * (mm / c1) / (std::sqrt(vm / c2) + config.eps));
    }
  }
}

std::string history_to_csv(const std::vector<HistoryRow>& history) {
  std::string out = "step,ce_loss,cont_loss,lr\n";
  for (const auto& row : history) {
    out += std::to_string(row.step) + "," + format_number(row.ce) + "," + format_number(row.contrastive) + "," +
           format_number(row.lr) + "\n";
  }
  return out;
}

TrainConfig resolve_config(TrainConfig config, const Encoder& encoder) {
  if (config.head.width == 0) config.head.width = encoder.width;
  if (config.head.blocks == 0) config.head.blocks = encoder.blocks;
  if (config.head.width != encoder.width || config.head.blocks != encoder.blocks) {
    throw ParameterError("head expects n=" + std::to_string(config.head.blocks) + ", d=" +
                         std::to_string(config.head.width) + " but the backbone has n=" +
                         std::to_string(encoder.blocks) + ", d=" + std::to_string(encoder.width));
  }
  config.augmentation.crop_side = encoder.image_side;
  config.validate();
  config.head.validate();
  return config;
}

std::uint64_t steps_per_epoch(std::size_t samples, std::size_t batch_size) {
  return (samples + batch_size - 1) / batch_size;
}

TrainState train(const ImageSource& source, const Encoder& encoder, const TrainConfig& raw_config,
                 const TrainOptions& options) {
  const TrainConfig config = resolve_config(raw_config, encoder);
  if (source.size() == 0) throw DataError("training set is empty");
  const bool use_contrastive = config.loss.xi > 0.0 && !single_class(source);
  if (config.loss.xi > 0.0 && !use_contrastive) {
    spdlog::warn("training set has a single class; contrastive term disabled, CE only");
  }

  TrainState state;
  if (options.resume) {
    state = *options.resume;
  } else {
    state.rng = Rng(config.seed);
    Rng init = state.rng.derive("init");
    state.params = init_params<float>(config.head, init);
    state.adam = AdamState::zeros_like(state.params);
  }

  const std::uint64_t per_epoch = steps_per_epoch(source.size(), config.batch_size);
  std::uint64_t total = per_epoch * config.epochs;
  if (options.max_steps) total = std::min(total, *options.max_steps);

  std::optional<FeatureCache> cache;
  if (config.cache_features) cache.emplace(source, encoder, config.batch_size);

  std::vector<std::size_t> order;
  std::uint64_t order_epoch = ~std::uint64_t{0};
  while (state.adam.step < total) {
    const std::uint64_t step = state.adam.step;
    const std::uint64_t epoch = step / per_epoch;
    if (epoch != order_epoch) {
      order = epoch_order(state.rng, epoch, source.size());
      order_epoch = epoch;
    }
    const std::size_t begin = (step % per_epoch) * config.batch_size;
    const std::vector<std::size_t> indices(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                           order.begin() + static_cast<std::ptrdiff_t>(
                                                               std::min(source.size(), begin + config.batch_size)));

    Tensor k;
    std::vector<int> labels;
    if (cache) {
      std::vector<float> rows;
      std::size_t found = 0;
      for (std::size_t i : indices) {
        if (const auto* row = cache->find(source.id(i))) {
          rows.insert(rows.end(), row->begin(), row->end());
          labels.push_back(source.label(i));
          ++found;
        }
      }
      if (found > 0) k = Tensor({found, encoder.blocks, encoder.width}, std::move(rows));
    } else {
      const Rng augment_root = state.rng.derive("augment").derive(epoch);
      auto batch = load_batch(source, indices, [&](ImageSample s) {
        if (!config.augment) return preprocess_eval(s, encoder.image_side);
        Rng rng = augment_root.derive(s.id);
        return augment_train(s, rng, config.augmentation);
      });
      for (const auto& s : batch) labels.push_back(s.label);
      if (!batch.empty()) k = encoder.encode(stack_pixels(batch));
    }
    if (labels.empty()) {
      spdlog::warn("step {}: no decodable samples, update skipped", step);
      ++state.adam.step;
      continue;
    }

    Rng dropout = state.rng.derive("dropout").derive(step);
    const auto out = forward<float>(k, state.params, config.head, Mode::train, &dropout);
    const auto ce = bce_with_logits(out.logits, labels);
    CombinedLoss<float> loss;
    if (use_contrastive && labels.size() >= 2) {
      loss = combined(ce, supcontrast(out.features, labels, config.loss.tau, config.loss.normalize_features),
                      config.loss.xi);
    } else {
      loss = combined(ce, LossValue<float>{}, 0.0);
    }
    auto grads = backward(out.trace, state.params, config.head, loss.grad_logits, loss.grad_features);
    if (config.grad_clip > 0.0) clip_gradients(grads, config.grad_clip);
    const double lr = config.lr_at(static_cast<std::size_t>(epoch) + 1);
    adam_step(state.params, grads, state.adam, lr, config);
    state.history.push_back({step, loss.ce, loss.contrastive, lr});
    if ((step + 1) % per_epoch == 0 || step + 1 == total) {
      spdlog::info("epoch {} step {}/{}: ce {:.5f} cont {:.5f} lr {:g}", epoch + 1, step + 1, total, loss.ce,
                   loss.contrastive, lr);
    }
  }
  return state;
}

void save_checkpoint(const TrainState& state, const TrainConfig& config, const std::filesystem::path& path) {
  Container file;
  file.meta["kind"] = "checkpoint";
  file.meta["config"] = config.to_json();
  file.meta["config_digest"] = config.digest();
  file.meta["step"] = state.adam.step;
  file.meta["rng"] = {{"seed", state.rng.seed()}, {"counter", state.rng.counter()}};
  nlohmann::json history = nlohmann::json::array();
  for (const auto& row : state.history) history.push_back({row.step, row.ce, row.contrastive, row.lr});
  file.meta["history"] = history;
  state.params.for_each([&](const std::string& name, const Tensor& t) { file.tensors.emplace("param." + name, t); });
  state.adam.m.for_each([&](const std::string& name, const Tensor& t) { file.tensors.emplace("adam.m." + name, t); });
  state.adam.v.for_each([&](const std::string& name, const Tensor& t) { file.tensors.emplace("adam.v." + name, t); });
  write_container(path, file);
}

TrainState load_checkpoint(const std::filesystem::path& path, const TrainConfig& config) {
  const Container file = read_container(path);
  if (file.meta.value("kind", std::string()) != "checkpoint") {
    throw LoadError(path.string() + ": container kind is not \"checkpoint\"");
  }
  if (file.meta.value("config_digest", std::string()) != config.digest()) {
    throw LoadError(path.string() + ": checkpoint was written under a different training config");
  }
  TrainState state;
  try {
    Rng scratch(0);
    state.params = init_params<float>(config.head, scratch);
    state.adam = AdamState::zeros_like(state.params);
    state.params.for_each([&](const std::string& name, Tensor& t) { t = file.require("param." + name, t.shape()); });
    state.adam.m.for_each([&](const std::string& name, Tensor& t) { t = file.require("adam.m." + name, t.shape()); });
    state.adam.v.for_each([&](const std::string& name, Tensor& t) { t = file.require("adam.v." + name, t.shape()); });
    state.adam.step = file.meta.at("step").get<std::uint64_t>();
    state.rng = Rng(file.meta.at("rng").at("seed").get<std::uint64_t>(),
                    file.meta.at("rng").at("counter").get<std::uint64_t>());
    for (const auto& row : file.meta.at("history")) {
      state.history.push_back({row.at(0).get<std::uint64_t>(), row.at(1).get<double>(), row.at(2).get<double>(),
                               row.at(3).get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": malformed checkpoint manifest: " + e.what());
  }
  return state;
}

void write_run(const std::filesystem::path& dir, const TrainState& state, const TrainConfig& config) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "config.json") << config.to_json().dump(2) << "\n";
  std::ofstream(dir / "history.csv") << history_to_csv(state.history);
  save_checkpoint(state, config, dir / "checkpoint.rine");
  save_head(state.params, config.head, dir / "head.rine");
}

std::vector<TrainConfig> enumerate_grid(const TrainConfig& base, const GridAxes& axes) {
  std::vector<TrainConfig> out;
  for (double xi : axes.xi) {
    for (std::size_t q : axes.depth) {
      for (std::size_t dp : axes.projected) {
        TrainConfig c = base;
        c.loss.xi = xi;
        c.head.depth = q;
        c.head.projected = dp;
        out.push_back(c);
      }
    }
  }
  return out;
}

std::vector<GridResult> rank_configs(const std::vector<TrainConfig>& configs,
                                     const std::function<Validation(const TrainConfig&)>& evaluate) {
  std::vector<GridResult> results;
  for (const auto& c : configs) {
    GridResult r{c, 0.0, 0.0, std::nullopt};
    try {
      const Validation v = evaluate(c);
      r.acc = v.acc;
      r.ap = v.ap;
    } catch (const std::exception& e) {
      r.error = e.what();
      spdlog::warn("grid config xi={} q={} d'={} failed: {}", c.loss.xi, c.head.depth, c.head.projected, e.what());
    }
    results.push_back(std::move(r));
  }
  std::stable_sort(results.begin(), results.end(), [](const GridResult& a, const GridResult& b) {
    if (a.error.has_value() != b.error.has_value()) return !a.error.has_value();
    return a.score() > b.score();
  });
  return results;
}

std::vector<GridResult> grid_search(const ImageSource& train_source, const ImageSource& validation,
                                    const Backbone& backbone, const std::vector<TrainConfig>& configs) {
  const Encoder encoder = make_encoder(backbone);
  return rank_configs(configs, [&](const TrainConfig& raw) {
    const TrainConfig config = resolve_config(raw, encoder);
    const TrainState state = train(train_source, encoder, config);
    const auto run = infer(Detector{backbone, config.head, state.params}, validation, InferenceOptions{});
    return Validation{accuracy(run.scores, run.labels), average_precision(run.scores, run.labels)};
  });
}

nlohmann::json grid_to_json(const std::vector<GridResult>& results) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : results) {
    nlohmann::json row = {{"xi", r.config.loss.xi},
                          {"depth", r.config.head.depth},
                          {"projected", r.config.head.projected},
                          {"acc", r.acc},
                          {"ap", r.ap},
                          {"score", r.score()}};
    if (r.error) row["error"] = *r.error;
    out.push_back(row);
  }
  return out;
}

}  // namespace rine
