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

#include "nestdecode/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <limits>
#include <numeric>
#include <sstream>

namespace nestdecode {
namespace {

constexpr std::uint64_t kGoldenGamma = 0x9e3779b97f4a7c15ULL;

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(product(shape_), T(0)) {}

template <typename T>
Tensor<T>::Tensor(std::vector<std::size_t> shape, std::vector<T> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (product(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------- Rng

std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed) : key_(splitmix64_mix(seed + kGoldenGamma)) {}

Rng Rng::split(std::uint64_t stream) const {
  const std::uint64_t derived = splitmix64_mix(key_ ^ splitmix64_mix(stream * kGoldenGamma + 1));
  return Rng(derived, 0, 0);
}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return splitmix64_mix(key_ + counter_ * kGoldenGamma);
}

double Rng::uniform() {
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::normal() {
  const double u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// ---------------------------------------------------------------- kernels

namespace kernels {

template <typename T>
void gemm_acc(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
    const T* arow = a + static_cast<std::ptrdiff_t>(i) * lda;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void gemm_at_b_acc(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc) {
  for (int p = 0; p < k; ++p) {
    const T* arow = a + static_cast<std::ptrdiff_t>(p) * lda;
    const T* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
    for (int i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void gemm_a_bt_acc(int m, int n, int k, const T* a, int lda, const T* b, int ldb, T* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::ptrdiff_t>(i) * lda;
    T* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::ptrdiff_t>(j) * ldb;
      T acc = crow[j];
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = acc;
    }
  }
}

template <typename T>
void softmax_inplace(std::span<T> row) {
  T mx = row[0];
  for (T v : row) mx = std::max(mx, v);
  T sum = 0;
  for (T& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  const T inv = T(1) / sum;
  for (T& v : row) v *= inv;
}

template <typename T>
T normalize_row(std::span<const T> x, std::span<T> xhat, T eps) {
  const std::size_t d = x.size();
  T mean = 0;
  for (T v : x) mean += v;
  mean /= static_cast<T>(d);
  T var = 0;
  for (T v : x) var += (v - mean) * (v - mean);
  var /= static_cast<T>(d);
  const T rstd = T(1) / std::sqrt(var + eps);
  for (std::size_t i = 0; i < d; ++i) xhat[i] = (x[i] - mean) * rstd;
  return rstd;
}

template <typename T>
T gelu(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = static_cast<T>(0.044715);
  return T(0.5) * x * (T(1) + std::tanh(c * (x + a * x * x * x)));
}

template <typename T>
T gelu_derivative(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);
  constexpr T a = static_cast<T>(0.044715);
  const T t = std::tanh(c * (x + a * x * x * x));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * a * x * x);
}

}  // namespace kernels

// ---------------------------------------------------------------- tensor ops

template <typename T>
void require_finite(std::span<const T> values, const char* what) {
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
  }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const int m = static_cast<int>(a.dim(0));
  const int k = static_cast<int>(a.dim(1));
  const int n = static_cast<int>(b.dim(1));
  Tensor<T> c({a.dim(0), b.dim(1)});
  kernels::gemm_acc(m, n, k, a.raw(), k, b.raw(), n, c.raw(), n);
  require_finite<T>(c.data(), "matmul");
  return c;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax axis out of range");
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];
  Tensor<T> out = x;
  std::vector<T> row(len);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      for (std::size_t i = 0; i < len; ++i) row[i] = x[base + i * inner];
      kernels::softmax_inplace<T>(row);
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] = row[i];
    }
  }
  require_finite<T>(out.data(), "softmax");
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  if (x.rank() != 1 || gamma.size() != x.size() || beta.size() != x.size() || x.empty()) {
    throw DimensionError("layer_norm expects matching 1-d tensors");
  }
  if (!(eps > 0)) throw ParameterError("layer_norm eps must be positive");
  Tensor<T> out(x.shape());
  kernels::normalize_row<T>(x.data(), out.data(), static_cast<T>(eps));
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = out[i] * gamma[i] + beta[i];
  require_finite<T>(out.data(), "layer_norm");
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (T& v : out.data()) v = kernels::gelu(v);
  require_finite<T>(out.data(), "gelu");
  return out;
}

double gumbel_from_uniform(double u) {
  u = std::clamp(u, kGumbelUniformEps, 1.0 - kGumbelUniformEps);
  return -std::log(-std::log(u));
}

template <typename T>
Tensor<T> gumbel_noise(Rng& rng, std::vector<std::size_t> shape) {
  Tensor<T> out(std::move(shape));
  for (T& v : out.data()) v = static_cast<T>(gumbel_from_uniform(rng.uniform()));
  return out;
}

template <typename T>
int categorical_sample(std::span<const T> logits, double temperature, Rng& rng) {
  if (logits.empty()) throw ParameterError("categorical_sample needs at least one logit");
  if (!(temperature > 0)) throw ParameterError("sampling temperature must be positive");
  const std::size_t v = logits.size();
  std::vector<double> w(v);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < v; ++i) {
    w[i] = static_cast<double>(logits[i]) / temperature;
    mx = std::max(mx, w[i]);
  }
  double total = 0;
  for (double& x : w) {
    x = std::exp(x - mx);
    total += x;
  }
  const double target = rng.uniform() * total;
  double cum = 0;
  int last_nonzero = 0;
  for (std::size_t i = 0; i < v; ++i) {
    if (w[i] > 0) last_nonzero = static_cast<int>(i);
    cum += w[i];
    if (cum > target) return static_cast<int>(i);
  }
  return last_nonzero;
}

#define NESTDECODE_INSTANTIATE(T)                                                              \
  template class Tensor<T>;                                                                    \
  template void kernels::gemm_acc<T>(int, int, int, const T*, int, const T*, int, T*, int);    \
  template void kernels::gemm_at_b_acc<T>(int, int, int, const T*, int, const T*, int, T*, int); \
  template void kernels::gemm_a_bt_acc<T>(int, int, int, const T*, int, const T*, int, T*, int); \
  template void kernels::softmax_inplace<T>(std::span<T>);                                     \
  template T kernels::normalize_row<T>(std::span<const T>, std::span<T>, T);                   \
  template T kernels::gelu<T>(T);                                                              \
  template T kernels::gelu_derivative<T>(T);                                                   \
  template void require_finite<T>(std::span<const T>, const char*);                            \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                                \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double); \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                \
  template Tensor<T> gumbel_noise<T>(Rng&, std::vector<std::size_t>);                          \
  template int categorical_sample<T>(std::span<const T>, double, Rng&);

NESTDECODE_INSTANTIATE(float)
NESTDECODE_INSTANTIATE(double)

#undef NESTDECODE_INSTANTIATE

}  // namespace nestdecode
