#include "rine/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <spdlog/spdlog.h>

namespace rine {

namespace {

void check_inputs(std::span<const double> scores, std::span<const int> labels, const char* op) {
  if (scores.empty()) throw ParameterError(std::string(op) + ": empty input");
  if (scores.size() != labels.size()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(labels.size()) + " labels");
  }
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

double accuracy(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels, "accuracy");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) correct += static_cast<int>(scores[i] >= 0.5) == labels[i];
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

double average_precision(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels, "average_precision");
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (positives == 0 || positives == labels.size()) {
    throw ParameterError("average_precision is undefined with a single class");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double precision_sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]] == 1) {
      ++hits;
      precision_sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  return precision_sum / static_cast<double>(positives);
}

std::vector<double> importance_frequency(const Tensor& importance) {
  if (importance.rank() != 2) {
    throw ShapeError("importance_frequency expects n×d', got " + shape_to_string(importance.shape()));
  }
  const std::size_t n = importance.dim(0), dp = importance.dim(1);
  std::vector<std::size_t> counts(n, 0);
  for (std::size_t k = 0; k < dp; ++k) {
    std::size_t best = 0;
    for (std::size_t l = 1; l < n; ++l) {
      if (importance.at(l, k) > importance.at(best, k)) best = l;
    }
    ++counts[best];
  }
  std::vector<double> f(n);
  for (std::size_t l = 0; l < n; ++l) f[l] = static_cast<double>(counts[l]) / static_cast<double>(dp);
  return f;
}

EvalReport aggregate(std::vector<DatasetResult> datasets) {
  EvalReport report;
  report.datasets = std::move(datasets);
  std::size_t good = 0;
  for (const auto& d : report.datasets) {
    if (d.error) {
      ++report.failed;
      continue;
    }
    report.avg_acc += d.acc;
    report.avg_ap += d.ap;
    ++good;
  }
  if (good > 0) {
    report.avg_acc /= static_cast<double>(good);
    report.avg_ap /= static_cast<double>(good);
  }
  if (report.failed > 0) spdlog::warn("AVG computed over {} of {} datasets", good, report.datasets.size());
  return report;
}

nlohmann::json report_to_json(const EvalReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& d : report.datasets) {
    nlohmann::json row = {{"name", d.name}, {"n", d.n}, {"acc", d.acc}, {"ap", d.ap}, {"skipped_files", d.skipped_files}};
    if (d.error) row["error"] = *d.error;
    rows.push_back(row);
  }
  return {{"datasets", rows}, {"avg_acc", report.avg_acc}, {"avg_ap", report.avg_ap}, {"failed", report.failed}};
}

std::string report_to_csv(const EvalReport& report) {
  std::string header = "metric";
  std::string acc = "ACC", ap = "AP";
  for (const auto& d : report.datasets) {
    header += "," + d.name;
    acc += "," + (d.error ? std::string() : format_number(d.acc));
    ap += "," + (d.error ? std::string() : format_number(d.ap));
  }
  header += ",AVG\n";
  acc += "," + format_number(report.avg_acc) + "\n";
  ap += "," + format_number(report.avg_ap) + "\n";
  return header + acc + ap;
}

std::string importance_to_csv(const std::vector<double>& frequency) {
  std::string out = "block_index,f_l\n";
  for (std::size_t l = 0; l < frequency.size(); ++l) {
    out += std::to_string(l + 1) + "," + format_number(frequency[l]) + "\n";
  }
  return out;
}

Inference infer(const Detector& detector, const ImageSource& source, const InferenceOptions& options) {
  if (options.batch_size == 0) throw ParameterError("batch_size must be positive");
  const std::size_t side = detector.backbone.config().image_side;
  PerturbConfig perturb_config = options.perturb_config;
  perturb_config.output_side = side;
  const Rng base(options.seed);

  auto transform = [&](ImageSample s) {
    if (options.perturbation) {
      Rng rng = base.derive(s.id);
      s = perturb(s, *options.perturbation, rng, perturb_config);
    }
    return preprocess_eval(s, side);
  };

  Inference out;
  std::vector<float> features;
  for (std::size_t start = 0; start < source.size(); start += options.batch_size) {
    std::vector<std::size_t> indices;
    for (std::size_t i = start; i < std::min(source.size(), start + options.batch_size); ++i) indices.push_back(i);
    auto batch = load_batch(source, indices, transform);
    out.skipped += indices.size() - batch.size();
    if (batch.empty()) continue;
    const auto k = detector.backbone.encode(stack_pixels(batch));
    const auto result = forward<float>(k, detector.params, detector.config, Mode::eval);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const double z = result.logits[i];
      out.scores.push_back(1.0 / (1.0 + std::exp(-z)));
      out.labels.push_back(batch[i].label);
      out.ids.push_back(batch[i].id);
    }
    if (options.keep_features) features.insert(features.end(), result.features.values().begin(), result.features.values().end());
  }
  if (options.keep_features && !out.scores.empty()) {
    out.features = Tensor({out.scores.size(), detector.config.projected}, std::move(features));
  }
  return out;
}

EvalReport evaluate(const Detector& detector,
                    const std::vector<std::pair<std::string, std::filesystem::path>>& datasets,
                    const InferenceOptions& options) {
  std::vector<DatasetResult> rows;
  for (const auto& [name, dir] : datasets) {
    DatasetResult row;
    row.name = name;
    try {
      const DirectoryDataset source(dir);
      const auto run = infer(detector, source, options);
      row.n = run.scores.size();
      row.skipped_files = run.skipped;
      row.acc = accuracy(run.scores, run.labels);
      row.ap = average_precision(run.scores, run.labels);
    } catch (const Error& e) {
      row.error = e.what();
      spdlog::warn("dataset {} failed: {}", name, e.what());
    }
    rows.push_back(std::move(row));
  }
  return aggregate(std::move(rows));
}

}  // namespace rine
