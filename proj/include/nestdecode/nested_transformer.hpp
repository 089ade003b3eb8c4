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

// Bidirectional transformer whose downscaled sub-models are read out of one
// shared parameter set. A sub-model at factor p uses the leading d_h/p
// features of every attention head (Q, K, V and the matching rows of the
// output projection) and the leading mlp_dim/p hidden units of every MLP.
// The residual stream and all layer norms stay at full width.
//
// Sequence layout: position 0 holds the class token (or the null token when
// unconditioned); grid tokens occupy positions 1..N.

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nestdecode/numerics.hpp"

namespace nestdecode {

struct NestedConfig {
  int num_layers = 2;
  int hidden = 32;
  int mlp_dim = 64;
  int num_heads = 2;
  int head_dim = 16;
  int vocab_size = 16;
  int num_classes = 4;
  int max_positions = 16;
  std::vector<int> downscale_factors{1, 2, 4, 8};

  // Token table layout: codebook [0, V), mask V, classes V+1.., null last.
  int mask_token_id() const { return vocab_size; }
  int class_token_id(int class_id) const { return vocab_size + 1 + class_id; }
  int null_class_token_id() const { return vocab_size + 1 + num_classes; }
  int embedding_rows() const { return vocab_size + 2 + num_classes; }
  int attention_width() const { return num_heads * head_dim; }
  int max_factor() const;
  bool has_factor(int p) const;

  // Throws ConfigError on any divisibility or range violation.
  void validate() const;

  bool operator==(const NestedConfig&) const = default;
};

// Config with head_dim derived as hidden / num_heads.
NestedConfig make_nested_config(int num_layers, int hidden, int mlp_dim, int num_heads,
                                int vocab_size, int num_classes, int max_positions,
                                std::vector<int> downscale_factors = {1, 2, 4, 8});

// Closed-form parameter counts; the sliced count covers what a p-sub-model reads.
std::size_t parameter_count(const NestedConfig& config);
std::size_t sliced_parameter_count(const NestedConfig& config, int p);

template <typename T>
struct LayerParams {
  Tensor<T> wq, wk, wv;  // [d, n_h * d_h]
  Tensor<T> wo;          // [n_h * d_h, d]
  Tensor<T> w_up;        // [d, mlp]
  Tensor<T> w_down;      // [mlp, d]
  Tensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  bool operator==(const LayerParams&) const = default;
};

template <typename T>
struct NestedWeights {
  NestedConfig config;
  Tensor<T> token_embedding;     // [V + 2 + classes, d]
  Tensor<T> position_embedding;  // [N_max + 1, d]
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_norm_gain, final_norm_bias;
  Tensor<T> head;  // [d, V]

  // Same shapes as `config` would produce, all zero.
  static NestedWeights zeros(const NestedConfig& config);

  // Visits every tensor in the canonical (checkpoint) order.
  template <typename F>
  void for_each(F&& fn) {
    fn("token_embedding", token_embedding);
    fn("position_embedding", position_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto& L = layers[l];
      fn(p + "wq", L.wq);
      fn(p + "wk", L.wk);
      fn(p + "wv", L.wv);
      fn(p + "wo", L.wo);
      fn(p + "w_up", L.w_up);
      fn(p + "w_down", L.w_down);
      fn(p + "ln1_gain", L.ln1_gain);
      fn(p + "ln1_bias", L.ln1_bias);
      fn(p + "ln2_gain", L.ln2_gain);
      fn(p + "ln2_bias", L.ln2_bias);
    }
    fn("final_norm_gain", final_norm_gain);
    fn("final_norm_bias", final_norm_bias);
    fn("head", head);
  }
  template <typename F>
  void for_each(F&& fn) const {
    const_cast<NestedWeights*>(this)->for_each(
        [&](const std::string& name, Tensor<T>& t) { fn(name, static_cast<const Tensor<T>&>(t)); });
  }

  std::size_t parameter_count() const;
  bool operator==(const NestedWeights&) const = default;
};

// Truncated normal (std 0.02, cut at 2 std) for matrices and embeddings,
// ones/zeros for norm gains/biases.
template <typename T>
NestedWeights<T> init_weights(const NestedConfig& config, Rng& rng);

template <typename To, typename From>
NestedWeights<To> cast_weights(const NestedWeights<From>& weights);

// Read-only p-sub-model over shared weights. Holds a pointer: the weights
// must outlive the view, and updates to them are visible through it.
template <typename T>
class SlicedView {
 public:
  SlicedView(const NestedWeights<T>& weights, int p);

  const NestedWeights<T>& weights() const { return *weights_; }
  const NestedConfig& config() const { return weights_->config; }
  int factor() const { return p_; }
  int head_dim() const { return weights_->config.head_dim / p_; }
  int mlp_dim() const { return weights_->config.mlp_dim / p_; }
  int kv_width() const { return weights_->config.num_heads * head_dim(); }

  // Effective matrix shapes of the sliced projections.
  std::array<int, 2> qkv_shape() const { return {weights_->config.hidden, kv_width()}; }
  std::array<int, 2> out_proj_shape() const { return {kv_width(), weights_->config.hidden}; }
  std::array<int, 2> mlp_up_shape() const { return {weights_->config.hidden, mlp_dim()}; }
  std::array<int, 2> mlp_down_shape() const { return {mlp_dim(), weights_->config.hidden}; }

  // Logical (sliced) element access, for inspection.
  T q(int layer, int row, int col) const;
  T out_proj(int layer, int row, int col) const;
  T mlp_up(int layer, int row, int col) const;
  T mlp_down(int layer, int row, int col) const;

  // Maps a sliced Q/K/V column (or output-projection row) to the full matrix.
  int physical_head_column(int col) const;

 private:

  const NestedWeights<T>* weights_;
  int p_;
};

template <typename T>
SlicedView<T> slice_view(const NestedWeights<T>& weights, int p) {
  return SlicedView<T>(weights, p);
}

// Deep copy of the p-slice as a self-contained model (downscale_factors {1}).
template <typename T>
NestedWeights<T> extract_standalone(const NestedWeights<T>& weights, int p);

struct TokenInput {
  int position;  // 0 = class slot, 1..N = grid
  int token;
};

// Class-slot input: the class token, or the null token when absent.
TokenInput class_input(const NestedConfig& config, std::optional<int> class_id);

template <typename T>
struct LayerKv {
  Tensor<T> keys;    // [rows, n_h, d_h / p]
  Tensor<T> values;  // [rows, n_h, d_h / p]
};

// Per-layer keys/values for committed positions, all computed under one
// downscale factor. Entries are kept in insertion order.
template <typename T>
class KVCache {
 public:
  explicit KVCache(const NestedConfig& config);

  bool empty() const { return positions_.empty(); }
  std::size_t size() const { return positions_.size(); }
  // Factor the entries were computed under; 0 while empty.
  int factor() const { return factor_; }
  int row_width() const { return row_width_; }
  const std::vector<int>& positions() const { return positions_; }
  bool contains(int position) const;

  std::span<const T> keys(int layer) const { return keys_[layer]; }
  std::span<const T> values(int layer) const { return values_[layer]; }

  void clear();
  // Appends rows `rows` of a forward pass's new_kv (computed at factor p).
  void append(const std::vector<LayerKv<T>>& new_kv, std::span<const std::size_t> rows,
              std::span<const int> positions, int p);
  // Re-tags entries for factor p by zero-padding (p smaller) or truncating
  // (p larger) every head's feature block.
  void rescale(int p);

 private:
  int num_layers_;
  int num_heads_;
  int full_head_dim_;
  int factor_ = 0;
  int row_width_ = 0;
  std::vector<int> positions_;
  std::vector<std::vector<T>> keys_;
  std::vector<std::vector<T>> values_;
};

// Activations recorded by forward() for backward(). Only full-sequence
// (empty cache) passes are recordable.
template <typename T>
struct ForwardTape {
  struct Layer {
    std::vector<T> ln1_xhat, ln1_rstd, ln1_out;
    std::vector<T> q, k, v;  // [T, n_h * d_h/p]
    std::vector<T> probs;    // [n_h, T, T]
    std::vector<T> attn;     // [T, n_h * d_h/p]
    std::vector<T> ln2_xhat, ln2_rstd, ln2_out;
    std::vector<T> up, act;  // [T, mlp/p]
  };
  std::vector<TokenInput> inputs;
  std::vector<Layer> layers;
  std::vector<T> final_xhat, final_rstd, final_out;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;                  // [num grid inputs, V], rows in input order
  std::vector<int> logit_positions;  // grid position of each logits row
  std::vector<LayerKv<T>> new_kv;    // per layer, one row per input
};

// Queries come from `inputs` only; keys/values are the cached entries followed
// by the freshly computed ones. Throws CacheError on factor mismatch with a
// nonempty cache or when an input position is already cached.
template <typename T>
ForwardResult<T> forward(const SlicedView<T>& model, std::span<const TokenInput> inputs,
                         const KVCache<T>& cache, ForwardTape<T>* tape = nullptr);

// Accumulates parameter gradients of sum(dlogits * logits) into `grads`
// (full-model shapes; only the slice read by `model` is touched).
template <typename T>
void backward(const SlicedView<T>& model, const ForwardTape<T>& tape, const Tensor<T>& dlogits,
              NestedWeights<T>& grads);

}  // namespace nestdecode
