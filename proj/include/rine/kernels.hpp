#pragma once

#include <cstddef>

#include "rine/rng.hpp"
#include "rine/tensor.hpp"

// Numeric kernels. The functions in rine::kernels are OpenMP-parallel over
// independent rows; every output element is produced by exactly one thread
// with a fixed summation order, so results are bit-identical to the serial
// versions in rine::reference for any thread count.
namespace rine::kernels {

// c = a·b, a: m×k, b: k×n.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
// c = aᵀ·b, a: k×m, b: k×n.
template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b);
// c = a·bᵀ, a: m×k, b: n×k.
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b);

// x·w + bias (bias broadcast over rows).
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias);
template <typename T>
void add_row_bias(BasicTensor<T>& x, const BasicTensor<T>& bias);
// Column sums of an m×n matrix.
template <typename T>
BasicTensor<T> sum_rows(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);

// Normalizes over the last axis.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps = 1e-5);

// Exact x·Φ(x).
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x);
// x·sigmoid(1.702x), used by OpenAI CLIP checkpoints.
template <typename T>
BasicTensor<T> quick_gelu(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

// Multi-head scaled dot-product attention over rows laid out as
// (batch·tokens)×width; each head sees width/heads contiguous columns.
// If probs is non-null it receives the batch×heads×tokens×tokens weights.
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         std::size_t batch, std::size_t tokens, std::size_t heads,
                         BasicTensor<T>* probs = nullptr);

// Inverted dropout: 0 with probability rate, else 1/(1-rate).
template <typename T = float>
BasicTensor<T> dropout_mask(Rng& rng, const Shape& shape, double rate);

void set_num_threads(int threads);
int max_threads();

}  // namespace rine::kernels

// Straightforward single-threaded implementations kept as the test and
// benchmark baseline for the parallel kernels.
namespace rine::reference {

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps = 1e-5);
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         std::size_t batch, std::size_t tokens, std::size_t heads,
                         BasicTensor<T>* probs = nullptr);

}  // namespace rine::reference
