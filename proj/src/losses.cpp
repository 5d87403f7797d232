#include "rine/losses.hpp"

#include <cmath>

namespace rine {

void LossConfig::validate() const {
  if (!(xi >= 0.0)) throw ParameterError("xi must be nonnegative");
  if (!(tau > 0.0)) throw ParameterError("tau must be positive");
}

nlohmann::json LossConfig::to_json() const {
  return {{"xi", xi}, {"tau", tau}, {"normalize_features", normalize_features}};
}

LossConfig LossConfig::from_json(const nlohmann::json& j) {
  LossConfig c;
  c.xi = j.value("xi", c.xi);
  c.tau = j.value("tau", c.tau);
  c.normalize_features = j.value("normalize_features", c.normalize_features);
  return c;
}

namespace {

void check_labels(const std::vector<int>& labels, std::size_t batch, const char* op) {
  if (batch == 0) throw ParameterError(std::string(op) + ": empty batch");
  if (labels.size() != batch) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(batch));
  }
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

template <typename T>
LossValue<T> bce_with_logits(const BasicTensor<T>& logits, const std::vector<int>& labels) {
  const std::size_t b = logits.size();
  check_labels(labels, b, "bce_with_logits");
  LossValue<T> out{0.0, BasicTensor<T>(logits.shape())};
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ParameterError("bce_with_logits: labels must be 0 or 1");
    const double z = logits[i];
    const double y = labels[i];
    // -[y log σ(z) + (1-y) log(1-σ(z))] = softplus(z) - y z
    out.loss += softplus(z) - y * z;
    out.grad[i] = static_cast<T>((sigmoid(z) - y) / static_cast<double>(b));
  }
  out.loss /= static_cast<double>(b);
  return out;
}

template <typename T>
LossValue<T> supcontrast(const BasicTensor<T>& features, const std::vector<int>& labels, double tau,
                         bool normalize) {
  if (features.rank() != 2) {
    throw ShapeError("supcontrast expects b×d' features, got " + shape_to_string(features.shape()));
  }
  const std::size_t b = features.dim(0), d = features.dim(1);
  check_labels(labels, b, "supcontrast");
  if (b < 2) throw ParameterError("supcontrast needs at least two samples");
  if (!(tau > 0.0)) throw ParameterError("supcontrast: tau must be positive");

  // Work in double regardless of T.
  std::vector<double> z(b * d), norms(b, 1.0);
  for (std::size_t i = 0; i < b; ++i) {
    double sq = 0.0;
    for (std::size_t c = 0; c < d; ++c) sq += static_cast<double>(features.at(i, c)) * features.at(i, c);
    if (normalize) norms[i] = std::max(std::sqrt(sq), 1e-12);
    for (std::size_t c = 0; c < d; ++c) z[i * d + c] = features.at(i, c) / norms[i];
  }
  std::vector<double> sim(b * b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += z[i * d + c] * z[j * d + c];
      sim[i * b + j] = s / tau;
    }
  }

  std::size_t anchors = 0;
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      if (j != i && labels[j] == labels[i]) {
        ++anchors;
        break;
      }
    }
  }
  LossValue<T> out{0.0, BasicTensor<T>(features.shape())};
  if (anchors == 0) return out;

  // g[i][a] = dL/dsim[i][a].
  std::vector<double> g(b * b, 0.0), prob(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t positives = 0;
    for (std::size_t j = 0; j < b; ++j) positives += (j != i && labels[j] == labels[i]);
    if (positives == 0) continue;
    double peak = -INFINITY;
    for (std::size_t a = 0; a < b; ++a) {
      if (a != i) peak = std::max(peak, sim[i * b + a]);
    }
    double total = 0.0;
    for (std::size_t a = 0; a < b; ++a) {
      prob[a] = a == i ? 0.0 : std::exp(sim[i * b + a] - peak);
      total += prob[a];
    }
    const double log_denominator = peak + std::log(total);
    double anchor_loss = 0.0;
    for (std::size_t p = 0; p < b; ++p) {
      if (p != i && labels[p] == labels[i]) anchor_loss -= sim[i * b + p] - log_denominator;
    }
    const double inv_pos = 1.0 / static_cast<double>(positives);
    out.loss += anchor_loss * inv_pos;
    const double scale = 1.0 / static_cast<double>(anchors);
    for (std::size_t a = 0; a < b; ++a) {
      if (a == i) continue;
      const double positive = labels[a] == labels[i] ? inv_pos : 0.0;
      g[i * b + a] = scale * (prob[a] / total - positive);
    }
  }
  out.loss /= static_cast<double>(anchors);

  // sim[i][a] = z_i·z_a/τ feeds both z_i and z_a.
  std::vector<double> gz(b * d, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t a = 0; a < b; ++a) {
      const double w = g[i * b + a] / tau;
      if (w == 0.0) continue;
      for (std::size_t c = 0; c < d; ++c) {
        gz[i * d + c] += w * z[a * d + c];
        gz[a * d + c] += w * z[i * d + c];
      }
    }
  }
  for (std::size_t i = 0; i < b; ++i) {
    double dot = 0.0;
    if (normalize) {
      for (std::size_t c = 0; c < d; ++c) dot += z[i * d + c] * gz[i * d + c];
    }
    for (std::size_t c = 0; c < d; ++c) {
      out.grad.at(i, c) = static_cast<T>((gz[i * d + c] - z[i * d + c] * dot) / norms[i]);
    }
  }
  return out;
}

template <typename T>
CombinedLoss<T> combined(const LossValue<T>& ce, const LossValue<T>& contrastive, double xi) {
  if (!(xi >= 0.0)) throw ParameterError("xi must be nonnegative");
  CombinedLoss<T> out;
  out.ce = ce.loss;
  out.contrastive = contrastive.loss;
  out.grad_logits = ce.grad;
  if (xi == 0.0) {
    out.loss = ce.loss;
    return out;
  }
  out.loss = ce.loss + xi * contrastive.loss;
  if (!contrastive.grad.empty()) {
    out.grad_features = contrastive.grad;
    for (auto& v : out.grad_features.values()) v = static_cast<T>(v * xi);
  }
  return out;
}

template LossValue<float> bce_with_logits(const Tensor&, const std::vector<int>&);
template LossValue<double> bce_with_logits(const Tensor64&, const std::vector<int>&);
template LossValue<float> supcontrast(const Tensor&, const std::vector<int>&, double, bool);
template LossValue<double> supcontrast(const Tensor64&, const std::vector<int>&, double, bool);
template CombinedLoss<float> combined(const LossValue<float>&, const LossValue<float>&, double);
template CombinedLoss<double> combined(const LossValue<double>&, const LossValue<double>&, double);

}  // namespace rine
