#pragma once

// Independent reference computations for the test suites. Everything here is
// written directly from the textbook definitions in double precision and uses
// no library kernels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <utility>
#include <vector>

#include "rine/tensor.hpp"

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix to_matrix(const rine::Tensor& t) {
  Matrix m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
  return m;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t t = 0; t < b.size(); ++t) c[i][j] += a[i][t] * b[t][j];
  return c;
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  const double m = *std::max_element(x.begin(), x.end());
  std::vector<double> e(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += e[i] = std::exp(x[i] - m);
  for (auto& v : e) v /= s;
  return e;
}

inline std::vector<double> layer_norm(const std::vector<double>& x, double eps) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / std::sqrt(var + eps);
  return out;
}

inline double gelu(double x) { return 0.5 * x * std::erfc(-x / std::sqrt(2.0)); }

// Mean supervised contrastive loss by explicit enumeration of anchors and
// positives; anchors with no positive are skipped.
inline double supcon(const Matrix& features, const std::vector<int>& labels, double tau) {
  const std::size_t b = features.size();
  Matrix z = features;
  for (auto& row : z) {
    double n = 0.0;
    for (double v : row) n += v * v;
    n = std::sqrt(n);
    for (double& v : row) v /= n;
  }
  auto sim = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < z[i].size(); ++k) s += z[i][k] * z[j][k];
    return s / tau;
  };
  double total = 0.0;
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t positives = 0;
    double term = 0.0;
    for (std::size_t p = 0; p < b; ++p) {
      if (p == i || labels[p] != labels[i]) continue;
      double denom = 0.0;
      for (std::size_t a = 0; a < b; ++a) {
        if (a != i) denom += std::exp(sim(i, a));
      }
      term += -std::log(std::exp(sim(i, p)) / denom);
      ++positives;
    }
    if (positives == 0) continue;
    total += term / static_cast<double>(positives);
    ++anchors;
  }
  return anchors == 0 ? 0.0 : total / static_cast<double>(anchors);
}

inline double bce(const std::vector<double>& logits, const std::vector<int>& labels) {
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits[i]));
    s += labels[i] == 1 ? -std::log(p) : -std::log(1.0 - p);
  }
  return s / static_cast<double>(logits.size());
}

// Average precision from a threshold sweep: for every positive, precision
// of the set {j : j ranked at or before it}, where j is ranked before i when
// its score is higher or equal with a smaller index.
inline double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  // (rank, precision) per positive; summed in rank order so rounding matches.
  std::vector<std::pair<std::size_t, double>> terms;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    std::size_t above = 0, tp = 0;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      const bool before = scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
      if (!before) continue;
      ++above;
      tp += labels[j] == 1;
    }
    terms.emplace_back(above, static_cast<double>(tp) / static_cast<double>(above));
  }
  std::sort(terms.begin(), terms.end());
  double sum = 0.0;
  for (const auto& t : terms) sum += t.second;
  return sum / static_cast<double>(terms.size());
}

// Per-column scan: first row attaining the column maximum.
inline std::vector<double> importance_frequency(const rine::Tensor& a) {
  const std::size_t n = a.dim(0), d = a.dim(1);
  std::vector<double> counts(n, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    float best = a.at(0, k);
    for (std::size_t l = 1; l < n; ++l) best = std::max(best, a.at(l, k));
    for (std::size_t l = 0; l < n; ++l) {
      if (a.at(l, k) == best) {
        counts[l] += 1.0;
        break;
      }
    }
  }
  for (auto& c : counts) c /= static_cast<double>(d);
  return counts;
}

// Test-side randomness, deliberately separate from the library generator.
template <typename T = float>
rine::BasicTensor<T> random_tensor(const rine::Shape& shape, std::mt19937_64& gen, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  rine::BasicTensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(u(gen));
  return t;
}

}  // namespace oracle
