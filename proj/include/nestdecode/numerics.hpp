// Copyright 2026 The nestdecode Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Dense numeric kernel: row-major tensors, fixed-order matrix products,
// activations and seeded sampling. Everything above this layer (model,
// decoder, trainer) is built on these primitives.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nestdecode/errors.hpp"

namespace nestdecode {

enum class Precision { f32, f64 };

template <typename T>
constexpr Precision precision_of();
template <>
constexpr Precision precision_of<float>() { return Precision::f32; }
template <>
constexpr Precision precision_of<double>() { return Precision::f64; }

// Row-major dense tensor. Shape extents multiply to data().size().
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<T> values);

  static constexpr Precision precision() { return precision_of<T>(); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  void fill(T value);
  bool all_finite() const;

  bool operator==(const Tensor&) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

std::string shape_string(const std::vector<std::size_t>& shape);

// Counter-based generator: output i of a stream is the SplitMix64 finalizer
// applied to key + i * golden_gamma. Sub-streams derive a fresh key from
// (key, stream id), so per-sample streams are independent of batch order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  Rng split(std::uint64_t stream) const;

  std::uint64_t next_u64();
  // Uniform on the open interval (0, 1) with 53 random bits.
  double uniform();
  double normal();

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  Rng(std::uint64_t key, std::uint64_t counter, int) : key_(key), counter_(counter) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64_mix(std::uint64_t z);

// Raw kernels on strided row-major storage. Summation order is fixed:
// every output element accumulates its inner-product terms in ascending
// inner index, starting from whatever value C already holds.
namespace kernels {

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_acc(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc);
// C[m x n] += A[k x m]^T * B[k x n]
template <typename T>
void gemm_at_b_acc(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc);
// C[m x n] += A[m x k] * B[n x k]^T
template <typename T>
void gemm_a_bt_acc(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc);

template <typename T>
void softmax_inplace(std::span<T> row);

// Writes normalized (pre-affine) values to xhat and returns 1/sqrt(var + eps).
template <typename T>
T normalize_row(std::span<const T> x, std::span<T> xhat, T eps);

template <typename T>
T gelu(T x);
template <typename T>
T gelu_derivative(T x);

}  // namespace kernels

constexpr double kLayerNormEps = 1e-5;
// Uniform draws are clamped into [eps, 1 - eps] before the double log.
constexpr double kGumbelUniformEps = 1e-12;

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = kLayerNormEps);

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

double gumbel_from_uniform(double u);

template <typename T>
Tensor<T> gumbel_noise(Rng& rng, std::vector<std::size_t> shape);

// Inverse-CDF draw from softmax(logits / temperature) using one uniform.
template <typename T>
int categorical_sample(std::span<const T> logits, double temperature, Rng& rng);

template <typename T>
void require_finite(std::span<const T> values, const char* what);

}  // namespace nestdecode
