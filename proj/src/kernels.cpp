#include "rine/kernels.hpp"

#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace rine {

std::string shape_to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return shape.empty() ? 0 : n;
}

namespace {

// Below this many rows the OpenMP fork costs more than it saves.
constexpr std::ptrdiff_t kParallelRows = 32;

void require_matrix(const Shape& shape, const char* what) {
  if (shape.size() != 2) {
    throw ShapeError(std::string(what) + " expects a matrix, got " + shape_to_string(shape));
  }
}

void dimension_error(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": inner dimensions disagree for " + shape_to_string(a) +
                   " and " + shape_to_string(b));
}

// Softmax over `length` elements spaced `stride` apart.
template <typename T>
void softmax_strided(const T* in, T* out, std::size_t length, std::size_t stride) {
  T peak = in[0];
  for (std::size_t i = 1; i < length; ++i) peak = std::max(peak, in[i * stride]);
  double total = 0.0;
  for (std::size_t i = 0; i < length; ++i) {
    const T e = std::exp(in[i * stride] - peak);
    out[i * stride] = e;
    total += e;
  }
  const double inv = 1.0 / total;
  for (std::size_t i = 0; i < length; ++i) out[i * stride] = static_cast<T>(out[i * stride] * inv);
}

template <typename T>
void layer_norm_row(const T* x, T* y, const T* gamma, const T* beta, std::size_t d, double eps) {
  double mean = 0.0;
  for (std::size_t i = 0; i < d; ++i) mean += x[i];
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double c = x[i] - mean;
    var += c * c;
  }
  var /= static_cast<double>(d);
  const double inv_std = 1.0 / std::sqrt(var + eps);
  for (std::size_t i = 0; i < d; ++i) {
    y[i] = static_cast<T>((x[i] - mean) * inv_std * gamma[i] + beta[i]);
  }
}

struct SoftmaxLayout {
  std::size_t outer, length, inner;
};

SoftmaxLayout softmax_layout(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("softmax axis " + std::to_string(axis) + " out of range for " +
                     shape_to_string(shape));
  }
  SoftmaxLayout layout{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) layout.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) layout.inner *= shape[i];
  return layout;
}

template <typename T>
void check_layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                      double eps) {
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm: gamma/beta " + shape_to_string(gamma.shape()) + "/" +
                     shape_to_string(beta.shape()) + " do not match last axis of " +
                     shape_to_string(x.shape()));
  }
  if (!(eps > 0.0)) throw ParameterError("layer_norm: eps must be positive");
}

void check_attention(const Shape& q, const Shape& k, const Shape& v, std::size_t batch,
                     std::size_t tokens, std::size_t heads) {
  require_matrix(q, "attention");
  if (q != k || q != v) {
    throw ShapeError("attention: q/k/v shapes differ: " + shape_to_string(q) + ", " +
                     shape_to_string(k) + ", " + shape_to_string(v));
  }
  if (q[0] != batch * tokens) {
    throw ShapeError("attention: " + shape_to_string(q) + " is not (batch*tokens) rows");
  }
  if (heads == 0 || q[1] % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(q[1]) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
}

// One (batch element, head) pair of scaled dot-product attention.
template <typename T>
void attend_head(const T* q, const T* k, const T* v, T* out, T* probs, std::size_t tokens,
                 std::size_t width, std::size_t head_width, std::size_t col0) {
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_width)));
  std::vector<T> row(tokens);
  for (std::size_t i = 0; i < tokens; ++i) {
    const T* qi = q + i * width + col0;
    for (std::size_t j = 0; j < tokens; ++j) {
      const T* kj = k + j * width + col0;
      T s = 0;
      for (std::size_t c = 0; c < head_width; ++c) s += qi[c] * kj[c];
      row[j] = s * scale;
    }
    softmax_strided(row.data(), row.data(), tokens, 1);
    if (probs) std::copy(row.begin(), row.end(), probs + i * tokens);
    T* oi = out + i * width + col0;
    for (std::size_t c = 0; c < head_width; ++c) oi[c] = 0;
    for (std::size_t j = 0; j < tokens; ++j) {
      const T p = row[j];
      const T* vj = v + j * width + col0;
      for (std::size_t c = 0; c < head_width; ++c) oi[c] += p * vj[c];
    }
  }
}

template <typename T>
void make_probs(BasicTensor<T>* probs, std::size_t batch, std::size_t heads, std::size_t tokens) {
  if (probs) *probs = BasicTensor<T>({batch, heads, tokens, tokens});
}

}  // namespace

namespace kernels {

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_matrix(a.shape(), "matmul");
  require_matrix(b.shape(), "matmul");
  if (a.dim(1) != b.dim(0)) dimension_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  BasicTensor<T> c({m, n});
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
#pragma omp parallel for schedule(static) if (static_cast<std::ptrdiff_t>(m) >= kParallelRows)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    T* ci = pc + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const T ait = pa[i * k + t];
      const T* bt = pb + t * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += ait * bt[j];
    }
  }
  return c;
}

template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_matrix(a.shape(), "matmul_tn");
  require_matrix(b.shape(), "matmul_tn");
  if (a.dim(0) != b.dim(0)) dimension_error("matmul_tn", a.shape(), b.shape());
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  BasicTensor<T> c({m, n});
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
#pragma omp parallel for schedule(static) if (static_cast<std::ptrdiff_t>(m) >= kParallelRows)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    T* ci = pc + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const T ati = pa[t * m + i];
      const T* bt = pb + t * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += ati * bt[j];
    }
  }
  return c;
}

template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_matrix(a.shape(), "matmul_nt");
  require_matrix(b.shape(), "matmul_nt");
  if (a.dim(1) != b.dim(1)) dimension_error("matmul_nt", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  BasicTensor<T> c({m, n});
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
#pragma omp parallel for schedule(static) if (static_cast<std::ptrdiff_t>(m) >= kParallelRows)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    const T* ai = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = pb + j * k;
      T s = 0;
      for (std::size_t t = 0; t < k; ++t) s += ai[t] * bj[t];
      pc[i * n + j] = s;
    }
  }
  return c;
}

template <typename T>
void add_row_bias(BasicTensor<T>& x, const BasicTensor<T>& bias) {
  const std::size_t n = x.shape().back();
  if (bias.size() != n) {
    throw ShapeError("bias " + shape_to_string(bias.shape()) + " does not match rows of " +
                     shape_to_string(x.shape()));
  }
  const std::size_t rows = x.size() / n;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < n; ++j) x[i * n + j] += bias[j];
  }
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias) {
  auto y = matmul(x, w);
  add_row_bias(y, bias);
  return y;
}

template <typename T>
BasicTensor<T> sum_rows(const BasicTensor<T>& x) {
  require_matrix(x.shape(), "sum_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  BasicTensor<T> out({n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
  }
  return out;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  const auto layout = softmax_layout(x.shape(), axis);
  BasicTensor<T> y(x.shape());
  const auto slices = static_cast<std::ptrdiff_t>(layout.outer * layout.inner);
#pragma omp parallel for schedule(static) if (slices >= kParallelRows)
  for (std::ptrdiff_t s = 0; s < slices; ++s) {
    const std::size_t o = static_cast<std::size_t>(s) / layout.inner;
    const std::size_t in = static_cast<std::size_t>(s) % layout.inner;
    const std::size_t base = o * layout.length * layout.inner + in;
    softmax_strided(x.data() + base, y.data() + base, layout.length, layout.inner);
  }
  return y;
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps) {
  check_layer_norm(x, gamma, beta, eps);
  const std::size_t d = x.shape().back();
  const auto rows = static_cast<std::ptrdiff_t>(x.size() / d);
  BasicTensor<T> y(x.shape());
#pragma omp parallel for schedule(static) if (rows >= kParallelRows)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    layer_norm_row(x.data() + r * d, y.data() + r * d, gamma.data(), beta.data(), d, eps);
  }
  return y;
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    y[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)));
  }
  return y;
}

template <typename T>
BasicTensor<T> quick_gelu(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    y[i] = static_cast<T>(v / (1.0 + std::exp(-1.702 * v)));
  }
  return y;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         std::size_t batch, std::size_t tokens, std::size_t heads,
                         BasicTensor<T>* probs) {
  check_attention(q.shape(), k.shape(), v.shape(), batch, tokens, heads);
  const std::size_t width = q.dim(1);
  const std::size_t head_width = width / heads;
  BasicTensor<T> out(q.shape());
  make_probs(probs, batch, heads, tokens);
  const auto pairs = static_cast<std::ptrdiff_t>(batch * heads);
#pragma omp parallel for schedule(static) if (pairs > 1)
  for (std::ptrdiff_t s = 0; s < pairs; ++s) {
    const std::size_t bi = static_cast<std::size_t>(s) / heads;
    const std::size_t h = static_cast<std::size_t>(s) % heads;
    const std::size_t offset = bi * tokens * width;
    T* p = probs ? probs->data() + (bi * heads + h) * tokens * tokens : nullptr;
    attend_head(q.data() + offset, k.data() + offset, v.data() + offset, out.data() + offset, p,
                tokens, width, head_width, h * head_width);
  }
  return out;
}

template <typename T>
BasicTensor<T> dropout_mask(Rng& rng, const Shape& shape, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ParameterError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  BasicTensor<T> mask(shape, T(1));
  if (rate == 0.0) return mask;
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < rate ? T(0) : keep;
  return mask;
}

void set_num_threads(int threads) {
#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#else
  (void)threads;
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

#define RINE_INSTANTIATE_KERNELS(T)                                                            \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> matmul_tn(const BasicTensor<T>&, const BasicTensor<T>&);             \
  template BasicTensor<T> matmul_nt(const BasicTensor<T>&, const BasicTensor<T>&);             \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&,                 \
                                 const BasicTensor<T>&);                                       \
  template void add_row_bias(BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> sum_rows(const BasicTensor<T>&);                                     \
  template BasicTensor<T> softmax(const BasicTensor<T>&, std::size_t);                         \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                     const BasicTensor<T>&, double);                           \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                         \
  template BasicTensor<T> quick_gelu(const BasicTensor<T>&);                                   \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                         \
  template BasicTensor<T> attention(const BasicTensor<T>&, const BasicTensor<T>&,              \
                                    const BasicTensor<T>&, std::size_t, std::size_t,           \
                                    std::size_t, BasicTensor<T>*);                             \
  template BasicTensor<T> dropout_mask(Rng&, const Shape&, double);

RINE_INSTANTIATE_KERNELS(float)
RINE_INSTANTIATE_KERNELS(double)

}  // namespace kernels

namespace reference {

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_matrix(a.shape(), "matmul");
  require_matrix(b.shape(), "matmul");
  if (a.dim(1) != b.dim(0)) dimension_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  BasicTensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t t = 0; t < k; ++t) s += a.at(i, t) * b.at(t, j);
      c.at(i, j) = s;
    }
  }
  return c;
}

template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_matrix(a.shape(), "matmul_tn");
  require_matrix(b.shape(), "matmul_tn");
  if (a.dim(0) != b.dim(0)) dimension_error("matmul_tn", a.shape(), b.shape());
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  BasicTensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t t = 0; t < k; ++t) s += a.at(t, i) * b.at(t, j);
      c.at(i, j) = s;
    }
  }
  return c;
}

template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_matrix(a.shape(), "matmul_nt");
  require_matrix(b.shape(), "matmul_nt");
  if (a.dim(1) != b.dim(1)) dimension_error("matmul_nt", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  BasicTensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T s = 0;
      for (std::size_t t = 0; t < k; ++t) s += a.at(i, t) * b.at(j, t);
      c.at(i, j) = s;
    }
  }
  return c;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  const auto layout = softmax_layout(x.shape(), axis);
  BasicTensor<T> y(x.shape());
  for (std::size_t o = 0; o < layout.outer; ++o) {
    for (std::size_t in = 0; in < layout.inner; ++in) {
      const std::size_t base = o * layout.length * layout.inner + in;
      softmax_strided(x.data() + base, y.data() + base, layout.length, layout.inner);
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps) {
  check_layer_norm(x, gamma, beta, eps);
  const std::size_t d = x.shape().back();
  BasicTensor<T> y(x.shape());
  for (std::size_t r = 0; r < x.size() / d; ++r) {
    layer_norm_row(x.data() + r * d, y.data() + r * d, gamma.data(), beta.data(), d, eps);
  }
  return y;
}

template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         std::size_t batch, std::size_t tokens, std::size_t heads,
                         BasicTensor<T>* probs) {
  check_attention(q.shape(), k.shape(), v.shape(), batch, tokens, heads);
  const std::size_t width = q.dim(1);
  const std::size_t head_width = width / heads;
  BasicTensor<T> out(q.shape());
  make_probs(probs, batch, heads, tokens);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t offset = bi * tokens * width;
      T* p = probs ? probs->data() + (bi * heads + h) * tokens * tokens : nullptr;
      attend_head(q.data() + offset, k.data() + offset, v.data() + offset, out.data() + offset, p,
                  tokens, width, head_width, h * head_width);
    }
  }
  return out;
}

#define RINE_INSTANTIATE_REFERENCE(T)                                                          \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> matmul_tn(const BasicTensor<T>&, const BasicTensor<T>&);             \
  template BasicTensor<T> matmul_nt(const BasicTensor<T>&, const BasicTensor<T>&);             \
  template BasicTensor<T> softmax(const BasicTensor<T>&, std::size_t);                         \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                     const BasicTensor<T>&, double);                           \
  template BasicTensor<T> attention(const BasicTensor<T>&, const BasicTensor<T>&,              \
                                    const BasicTensor<T>&, std::size_t, std::size_t,           \
                                    std::size_t, BasicTensor<T>*);

RINE_INSTANTIATE_REFERENCE(float)
RINE_INSTANTIATE_REFERENCE(double)

}  // namespace reference
}  // namespace rine
