#pragma once

#include <vector>

#include <nlohmann/json.hpp>

#include "rine/tensor.hpp"

namespace rine {

struct LossConfig {
  double xi = 0.2;    // contrastive weight
  double tau = 0.1;   // contrastive temperature
  bool normalize_features = true;

  void validate() const;
  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
  bool operator==(const LossConfig&) const = default;
};

template <typename T>
struct LossValue {
  double loss = 0.0;
  BasicTensor<T> grad;
};

// Mean binary cross-entropy on logits in softplus form; grad = (σ(z) - y)/b.
template <typename T>
LossValue<T> bce_with_logits(const BasicTensor<T>& logits, const std::vector<int>& labels);

// Supervised contrastive loss over a b×d' feature batch. Anchors without a
// same-label partner are left out of the average; a batch where no anchor
// has one yields loss 0 and a zero gradient.
template <typename T>
LossValue<T> supcontrast(const BasicTensor<T>& features, const std::vector<int>& labels, double tau,
                         bool normalize = true);

template <typename T>
struct CombinedLoss {
  double loss = 0.0;
  double ce = 0.0;
  double contrastive = 0.0;
  BasicTensor<T> grad_logits;
  BasicTensor<T> grad_features;  // empty when xi == 0
};

// loss = ce + xi·contrastive, with the gradient streams scaled to match.
template <typename T>
CombinedLoss<T> combined(const LossValue<T>& ce, const LossValue<T>& contrastive, double xi);

}  // namespace rine
