#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rine/data.hpp"
#include "rine/head.hpp"
#include "rine/vit.hpp"

namespace rine {

// Fraction of (score >= 0.5) == label; a score of exactly 0.5 predicts fake.
double accuracy(std::span<const double> scores, std::span<const int> labels);

// Non-interpolated average precision: mean over positives of the precision
// at each positive's rank. Ranking is by descending score with ties kept in
// input order. Throws ParameterError unless both classes are present.
double average_precision(std::span<const double> scores, std::span<const int> labels);

// f_l = |{k : argmax_l A[l][k] = l}| / d'; ties go to the smallest l.
std::vector<double> importance_frequency(const Tensor& importance);

struct DatasetResult {
  std::string name;
  std::size_t n = 0;
  double acc = 0.0;
  double ap = 0.0;
  std::size_t skipped_files = 0;
  std::optional<std::string> error;
};

struct EvalReport {
  std::vector<DatasetResult> datasets;
  double avg_acc = 0.0;  // unweighted mean over datasets without error
  double avg_ap = 0.0;
  std::size_t failed = 0;

  bool ok() const { return failed == 0; }
};

// Fills the AVG fields from the per-dataset rows.
EvalReport aggregate(std::vector<DatasetResult> datasets);

nlohmann::json report_to_json(const EvalReport& report);
// Wide layout: one row per metric, one column per dataset, AVG last.
std::string report_to_csv(const EvalReport& report);
std::string importance_to_csv(const std::vector<double>& frequency);

// A frozen backbone plus trained head.
struct Detector {
  const Backbone& backbone;
  const HeadConfig& config;
  const HeadParams<float>& params;
};

struct InferenceOptions {
  std::size_t batch_size = 64;
  std::optional<PerturbKind> perturbation;
  PerturbConfig perturb_config;
  std::uint64_t seed = 0;  // perturbation stream, keyed per sample id
  bool keep_features = false;
};

struct Inference {
  std::vector<double> scores;  // sigmoid(logit)
  std::vector<int> labels;
  std::vector<std::string> ids;
  Tensor features;  // N×d' Q2 output when keep_features
  std::size_t skipped = 0;
};

// (optional perturbation) → centre crop → encode → eval-mode head.
Inference infer(const Detector& detector, const ImageSource& source, const InferenceOptions& options);

// Per dataset acc/ap, then the AVG row. Dataset-level failures are recorded
// in the row and excluded from AVG.
EvalReport evaluate(const Detector& detector,
                    const std::vector<std::pair<std::string, std::filesystem::path>>& datasets,
                    const InferenceOptions& options);

}  // namespace rine
