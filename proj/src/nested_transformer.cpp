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

#include "nestdecode/nested_transformer.hpp"

#include <algorithm>
#include <cmath>

namespace nestdecode {

// ---------------------------------------------------------------- config

int NestedConfig::max_factor() const {
  return downscale_factors.empty() ? 1 : *std::max_element(downscale_factors.begin(), downscale_factors.end());
}

bool NestedConfig::has_factor(int p) const {
  return std::find(downscale_factors.begin(), downscale_factors.end(), p) != downscale_factors.end();
}

void NestedConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid model config: " + msg); };
  if (num_layers < 1) fail("num_layers must be >= 1");
  if (hidden < 1 || mlp_dim < 1 || num_heads < 1 || head_dim < 1) fail("dimensions must be >= 1");
  if (vocab_size < 1) fail("vocab_size must be >= 1");
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (max_positions < 1) fail("max_positions must be >= 1");
  if (downscale_factors.empty()) fail("downscale_factors is empty");
  for (std::size_t i = 0; i < downscale_factors.size(); ++i) {
    if (downscale_factors[i] < 1) fail("downscale factors must be positive");
    if (i > 0 && downscale_factors[i] <= downscale_factors[i - 1]) {
      fail("downscale factors must be strictly increasing");
    }
  }
  if (downscale_factors.front() != 1) fail("downscale factors must include 1");
  const int pmax = max_factor();
  if (pmax > 1 && hidden % num_heads != 0) fail("hidden not divisible by num_heads");
  if (pmax > 1 && num_heads * head_dim != hidden) fail("head_dim must equal hidden / num_heads");
  if (head_dim % pmax != 0) fail("head_dim not divisible by the largest downscale factor");
  if (mlp_dim % pmax != 0) fail("mlp_dim not divisible by the largest downscale factor");
}

NestedConfig make_nested_config(int num_layers, int hidden, int mlp_dim, int num_heads, int vocab_size,
                                int num_classes, int max_positions, std::vector<int> downscale_factors) {
  if (num_heads < 1 || hidden % num_heads != 0) {
    throw ConfigError("invalid model config: hidden not divisible by num_heads");
  }
  NestedConfig c;
  c.num_layers = num_layers;
  c.hidden = hidden;
  c.mlp_dim = mlp_dim;
  c.num_heads = num_heads;
  c.head_dim = hidden / num_heads;
  c.vocab_size = vocab_size;
  c.num_classes = num_classes;
  c.max_positions = max_positions;
  c.downscale_factors = std::move(downscale_factors);
  c.validate();
  return c;
}

namespace {

std::size_t count_for(const NestedConfig& c, int p) {
  const std::size_t d = c.hidden;
  const std::size_t attn = static_cast<std::size_t>(c.attention_width()) / p;
  const std::size_t mlp = static_cast<std::size_t>(c.mlp_dim) / p;
  const std::size_t per_layer = 4 * d * attn + 2 * d * mlp + 4 * d;
  return static_cast<std::size_t>(c.embedding_rows()) * d + (c.max_positions + 1) * d +
         c.num_layers * per_layer + 2 * d + d * c.vocab_size;
}

}  // namespace

std::size_t parameter_count(const NestedConfig& config) { return count_for(config, 1); }

std::size_t sliced_parameter_count(const NestedConfig& config, int p) {
  if (!config.has_factor(p)) throw ParameterError("unknown downscale factor " + std::to_string(p));
  return count_for(config, p);
}

// ---------------------------------------------------------------- weights

template <typename T>
NestedWeights<T> NestedWeights<T>::zeros(const NestedConfig& c) {
  c.validate();
  using S = std::size_t;
  const S d = c.hidden, a = c.attention_width(), m = c.mlp_dim;
  NestedWeights w;
  w.config = c;
  w.token_embedding = Tensor<T>({S(c.embedding_rows()), d});
  w.position_embedding = Tensor<T>({S(c.max_positions + 1), d});
  w.layers.resize(c.num_layers);
  for (auto& L : w.layers) {
    L.wq = Tensor<T>({d, a});
    L.wk = Tensor<T>({d, a});
    L.wv = Tensor<T>({d, a});
    L.wo = Tensor<T>({a, d});
    L.w_up = Tensor<T>({d, m});
    L.w_down = Tensor<T>({m, d});
    L.ln1_gain = Tensor<T>({d});
    L.ln1_bias = Tensor<T>({d});
    L.ln2_gain = Tensor<T>({d});
    L.ln2_bias = Tensor<T>({d});
  }
  w.final_norm_gain = Tensor<T>({d});
  w.final_norm_bias = Tensor<T>({d});
  w.head = Tensor<T>({d, S(c.vocab_size)});
  return w;
}

template <typename T>
std::size_t NestedWeights<T>::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
  return n;
}

template <typename T>
NestedWeights<T> init_weights(const NestedConfig& config, Rng& rng) {
  auto w = NestedWeights<T>::zeros(config);
  constexpr double kStd = 0.02;
  w.for_each([&](const std::string& name, Tensor<T>& t) {
    if (name.ends_with("gain")) {
      t.fill(T(1));
    } else if (name.ends_with("bias")) {
      t.fill(T(0));
    } else {
      for (T& v : t.data()) {
        double z = rng.normal();
        while (std::abs(z) > 2.0) z = rng.normal();
        v = static_cast<T>(z * kStd);
      }
    }
  });
  return w;
}

template <typename To, typename From>
NestedWeights<To> cast_weights(const NestedWeights<From>& weights) {
  auto out = NestedWeights<To>::zeros(weights.config);
  std::vector<const Tensor<From>*> src;
  weights.for_each([&](const std::string&, const Tensor<From>& t) { src.push_back(&t); });
  std::size_t i = 0;
  out.for_each([&](const std::string&, Tensor<To>& t) {
    const auto& s = *src[i++];
    for (std::size_t j = 0; j < t.size(); ++j) t[j] = static_cast<To>(s[j]);
  });
  return out;
}

// ---------------------------------------------------------------- slicing

template <typename T>
SlicedView<T>::SlicedView(const NestedWeights<T>& weights, int p) : weights_(&weights), p_(p) {
  if (!weights.config.has_factor(p)) {
    throw ParameterError("downscale factor " + std::to_string(p) + " not in model's factor set");
  }
}

template <typename T>
int SlicedView<T>::physical_head_column(int col) const {
  const int dhp = head_dim();
  return (col / dhp) * weights_->config.head_dim + col % dhp;
}

template <typename T>
T SlicedView<T>::q(int layer, int row, int col) const {
  return weights_->layers[layer].wq.at(row, physical_head_column(col));
}

template <typename T>
T SlicedView<T>::out_proj(int layer, int row, int col) const {
  return weights_->layers[layer].wo.at(physical_head_column(row), col);
}

template <typename T>
T SlicedView<T>::mlp_up(int layer, int row, int col) const {
  return weights_->layers[layer].w_up.at(row, col);
}

template <typename T>
T SlicedView<T>::mlp_down(int layer, int row, int col) const {
  return weights_->layers[layer].w_down.at(row, col);
}

template <typename T>
NestedWeights<T> extract_standalone(const NestedWeights<T>& weights, int p) {
  const SlicedView<T> view(weights, p);
  NestedConfig c = weights.config;
  c.head_dim = view.head_dim();
  c.mlp_dim = view.mlp_dim();
  c.downscale_factors = {1};
  auto out = NestedWeights<T>::zeros(c);
  out.token_embedding = weights.token_embedding;
  out.position_embedding = weights.position_embedding;
  out.final_norm_gain = weights.final_norm_gain;
  out.final_norm_bias = weights.final_norm_bias;
  out.head = weights.head;
  const int d = c.hidden, kvw = view.kv_width(), mlp = view.mlp_dim();
  for (int l = 0; l < c.num_layers; ++l) {
    const auto& src = weights.layers[l];
    auto& dst = out.layers[l];
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < kvw; ++j) {
        const int pj = view.physical_head_column(j);
        dst.wq.at(i, j) = src.wq.at(i, pj);
        dst.wk.at(i, j) = src.wk.at(i, pj);
        dst.wv.at(i, j) = src.wv.at(i, pj);
        dst.wo.at(j, i) = src.wo.at(pj, i);
      }
      for (int j = 0; j < mlp; ++j) {
        dst.w_up.at(i, j) = src.w_up.at(i, j);
        dst.w_down.at(j, i) = src.w_down.at(j, i);
      }
    }
    dst.ln1_gain = src.ln1_gain;
    dst.ln1_bias = src.ln1_bias;
    dst.ln2_gain = src.ln2_gain;
    dst.ln2_bias = src.ln2_bias;
  }
  return out;
}

TokenInput class_input(const NestedConfig& config, std::optional<int> class_id) {
  if (class_id && (*class_id < 0 || *class_id >= config.num_classes)) {
    throw InputError("class id " + std::to_string(*class_id) + " out of range");
  }
  return {0, class_id ? config.class_token_id(*class_id) : config.null_class_token_id()};
}

// ---------------------------------------------------------------- cache

template <typename T>
KVCache<T>::KVCache(const NestedConfig& config)
    : num_layers_(config.num_layers),
      num_heads_(config.num_heads),
      full_head_dim_(config.head_dim),
      keys_(config.num_layers),
      values_(config.num_layers) {}

template <typename T>
bool KVCache<T>::contains(int position) const {
  return std::find(positions_.begin(), positions_.end(), position) != positions_.end();
}

template <typename T>
void KVCache<T>::clear() {
  positions_.clear();
  for (auto& k : keys_) k.clear();
  for (auto& v : values_) v.clear();
  factor_ = 0;
  row_width_ = 0;
}

template <typename T>
void KVCache<T>::append(const std::vector<LayerKv<T>>& new_kv, std::span<const std::size_t> rows,
                        std::span<const int> positions, int p) {
  if (rows.size() != positions.size()) throw CacheError("cache append: rows/positions size mismatch");
  if (static_cast<int>(new_kv.size()) != num_layers_) throw CacheError("cache append: layer count mismatch");
  if (rows.empty()) return;
  if (!empty() && p != factor_) {
    throw CacheError("cache holds factor " + std::to_string(factor_) + " entries, cannot append factor " +
                     std::to_string(p));
  }
  const int width = num_heads_ * (full_head_dim_ / p);
  if (static_cast<int>(new_kv[0].keys.size() / std::max<std::size_t>(new_kv[0].keys.dim(0), 1)) != width) {
    throw CacheError("cache append: key width does not match factor");
  }
  for (int pos : positions) {
    if (contains(pos)) throw CacheError("position " + std::to_string(pos) + " already cached");
  }
  factor_ = p;
  row_width_ = width;
  for (int l = 0; l < num_layers_; ++l) {
    const T* ks = new_kv[l].keys.raw();
    const T* vs = new_kv[l].values.raw();
    for (std::size_t r : rows) {
      keys_[l].insert(keys_[l].end(), ks + r * width, ks + (r + 1) * width);
      values_[l].insert(values_[l].end(), vs + r * width, vs + (r + 1) * width);
    }
  }
  positions_.insert(positions_.end(), positions.begin(), positions.end());
}

template <typename T>
void KVCache<T>::rescale(int p) {
  if (empty() || p == factor_) {
    if (empty()) factor_ = 0;
    return;
  }
  const int old_hd = full_head_dim_ / factor_;
  const int new_hd = full_head_dim_ / p;
  const int copy = std::min(old_hd, new_hd);
  const std::size_t n = positions_.size();
  auto convert = [&](std::vector<T>& buf) {
    std::vector<T> out(n * num_heads_ * new_hd, T(0));
    for (std::size_t r = 0; r < n; ++r) {
      for (int h = 0; h < num_heads_; ++h) {
        const T* src = buf.data() + (r * num_heads_ + h) * old_hd;
        std::copy(src, src + copy, out.data() + (r * num_heads_ + h) * new_hd);
      }
    }
    buf = std::move(out);
  };
  for (int l = 0; l < num_layers_; ++l) {
    convert(keys_[l]);
    convert(values_[l]);
  }
  factor_ = p;
  row_width_ = num_heads_ * new_hd;
}

// ---------------------------------------------------------------- forward

namespace {

template <typename T>
void apply_norm(const std::vector<T>& x, int rows, int d, const Tensor<T>& gain, const Tensor<T>& bias,
                std::vector<T>& xhat, std::vector<T>& rstd, std::vector<T>& out) {
  xhat.resize(static_cast<std::size_t>(rows) * d);
  rstd.resize(rows);
  out.resize(static_cast<std::size_t>(rows) * d);
  for (int i = 0; i < rows; ++i) {
    const std::size_t o = static_cast<std::size_t>(i) * d;
    rstd[i] = kernels::normalize_row<T>(std::span<const T>(x.data() + o, d), std::span<T>(xhat.data() + o, d),
                                        static_cast<T>(kLayerNormEps));
    for (int j = 0; j < d; ++j) out[o + j] = xhat[o + j] * gain[j] + bias[j];
  }
}

}  // namespace

template <typename T>
ForwardResult<T> forward(const SlicedView<T>& model, std::span<const TokenInput> inputs, const KVCache<T>& cache,
                         ForwardTape<T>* tape) {
  const NestedWeights<T>& W = model.weights();
  const NestedConfig& cfg = W.config;
  const int p = model.factor();
  const int d = cfg.hidden;
  const int H = cfg.num_heads;
  const int dh = cfg.head_dim;
  const int dhp = model.head_dim();
  const int kvw = model.kv_width();
  const int A = cfg.attention_width();
  const int mlp_full = cfg.mlp_dim;
  const int mlp = model.mlp_dim();
  const int V = cfg.vocab_size;
  const int n = static_cast<int>(inputs.size());
  const int c = static_cast<int>(cache.size());
  const int nk = c + n;

  if (n == 0) throw InputError("forward needs at least one input");
  if (!cache.empty() && cache.factor() != p) {
    throw CacheError("cache computed at factor " + std::to_string(cache.factor()) + ", forward at factor " +
                     std::to_string(p));
  }
  if (tape && !cache.empty()) throw CacheError("recording a tape requires an empty cache");
  std::vector<char> seen(cfg.max_positions + 1, 0);
  for (const auto& in : inputs) {
    if (in.position < 0 || in.position > cfg.max_positions) {
      throw InputError("position " + std::to_string(in.position) + " out of range");
    }
    if (in.token < 0 || in.token >= cfg.embedding_rows()) {
      throw InputError("token id " + std::to_string(in.token) + " out of range");
    }
    if (seen[in.position]) throw InputError("duplicate input position " + std::to_string(in.position));
    seen[in.position] = 1;
  }
  for (int pos : cache.positions()) {
    if (pos >= 0 && pos <= cfg.max_positions && seen[pos]) {
      throw CacheError("input position " + std::to_string(pos) + " is already cached");
    }
  }

  ForwardResult<T> result;
  result.new_kv.resize(cfg.num_layers);
  if (tape) {
    tape->inputs.assign(inputs.begin(), inputs.end());
    tape->layers.assign(cfg.num_layers, {});
  }

  using S = std::size_t;
  std::vector<T> x(S(n) * d);
  for (int i = 0; i < n; ++i) {
    const T* te = W.token_embedding.raw() + S(inputs[i].token) * d;
    const T* pe = W.position_embedding.raw() + S(inputs[i].position) * d;
    for (int j = 0; j < d; ++j) x[S(i) * d + j] = te[j] + pe[j];
  }

  std::vector<T> xhat, rstd, a, q, k, v, scores(nk), attn, proj, up, act, down;
  std::vector<T> probs;
  const T scale = T(1) / std::sqrt(static_cast<T>(dhp));

  for (int l = 0; l < cfg.num_layers; ++l) {
    const auto& L = W.layers[l];
    apply_norm(x, n, d, L.ln1_gain, L.ln1_bias, xhat, rstd, a);
    if (tape) {
      tape->layers[l].ln1_xhat = xhat;
      tape->layers[l].ln1_rstd = rstd;
      tape->layers[l].ln1_out = a;
    }

    q.assign(S(n) * kvw, T(0));
    k.assign(S(n) * kvw, T(0));
    v.assign(S(n) * kvw, T(0));
    for (int h = 0; h < H; ++h) {
      kernels::gemm_acc(n, dhp, d, a.data(), d, L.wq.raw() + h * dh, A, q.data() + h * dhp, kvw);
      kernels::gemm_acc(n, dhp, d, a.data(), d, L.wk.raw() + h * dh, A, k.data() + h * dhp, kvw);
      kernels::gemm_acc(n, dhp, d, a.data(), d, L.wv.raw() + h * dh, A, v.data() + h * dhp, kvw);
    }
    result.new_kv[l].keys = Tensor<T>({S(n), S(H), S(dhp)}, k);
    result.new_kv[l].values = Tensor<T>({S(n), S(H), S(dhp)}, v);

    const auto ck = cache.keys(l);
    const auto cv = cache.values(l);
    attn.assign(S(n) * kvw, T(0));
    if (tape) probs.assign(S(H) * n * nk, T(0));
    for (int h = 0; h < H; ++h) {
      for (int i = 0; i < n; ++i) {
        const T* qi = q.data() + S(i) * kvw + h * dhp;
        for (int j = 0; j < nk; ++j) {
          const T* kj = j < c ? ck.data() + S(j) * kvw + h * dhp : k.data() + S(j - c) * kvw + h * dhp;
          T s = 0;
          for (int r = 0; r < dhp; ++r) s += qi[r] * kj[r];
          scores[j] = s * scale;
        }
        kernels::softmax_inplace<T>(scores);
        T* oi = attn.data() + S(i) * kvw + h * dhp;
        for (int j = 0; j < nk; ++j) {
          const T* vj = j < c ? cv.data() + S(j) * kvw + h * dhp : v.data() + S(j - c) * kvw + h * dhp;
          const T pj = scores[j];
          for (int r = 0; r < dhp; ++r) oi[r] += pj * vj[r];
        }
        if (tape) std::copy(scores.begin(), scores.end(), probs.begin() + (S(h) * n + i) * nk);
      }
    }
    if (tape) {
      tape->layers[l].q = q;
      tape->layers[l].k = k;
      tape->layers[l].v = v;
      tape->layers[l].probs = probs;
      tape->layers[l].attn = attn;
    }

    proj.assign(S(n) * d, T(0));
    for (int h = 0; h < H; ++h) {
      kernels::gemm_acc(n, d, dhp, attn.data() + h * dhp, kvw, L.wo.raw() + S(h) * dh * d, d, proj.data(), d);
    }
    for (S i = 0; i < x.size(); ++i) x[i] += proj[i];

    apply_norm(x, n, d, L.ln2_gain, L.ln2_bias, xhat, rstd, a);
    up.assign(S(n) * mlp, T(0));
    kernels::gemm_acc(n, mlp, d, a.data(), d, L.w_up.raw(), mlp_full, up.data(), mlp);
    act.resize(up.size());
    for (S i = 0; i < up.size(); ++i) act[i] = kernels::gelu(up[i]);
    down.assign(S(n) * d, T(0));
    kernels::gemm_acc(n, d, mlp, act.data(), mlp, L.w_down.raw(), d, down.data(), d);
    for (S i = 0; i < x.size(); ++i) x[i] += down[i];
    if (tape) {
      tape->layers[l].ln2_xhat = xhat;
      tape->layers[l].ln2_rstd = rstd;
      tape->layers[l].ln2_out = a;
      tape->layers[l].up = up;
      tape->layers[l].act = act;
    }
  }

  apply_norm(x, n, d, W.final_norm_gain, W.final_norm_bias, xhat, rstd, a);
  if (tape) {
    tape->final_xhat = xhat;
    tape->final_rstd = rstd;
    tape->final_out = a;
  }

  for (int i = 0; i < n; ++i) {
    if (inputs[i].position > 0) result.logit_positions.push_back(inputs[i].position);
  }
  result.logits = Tensor<T>({result.logit_positions.size(), S(V)});
  int row = 0;
  for (int i = 0; i < n; ++i) {
    if (inputs[i].position == 0) continue;
    kernels::gemm_acc(1, V, d, a.data() + S(i) * d, d, W.head.raw(), V, result.logits.raw() + S(row) * V, V);
    ++row;
  }
  require_finite<T>(result.logits.data(), "forward logits");
  return result;
}

// ---------------------------------------------------------------- backward

namespace {

template <typename T>
void norm_backward(const T* dy, const T* xhat, T rstd, const Tensor<T>& gain, T* dgain, T* dbias, T* dx, int d) {
  std::vector<T> dxhat(d);
  T mean1 = 0, mean2 = 0;
  for (int j = 0; j < d; ++j) {
    dxhat[j] = dy[j] * gain[j];
    dgain[j] += dy[j] * xhat[j];
    dbias[j] += dy[j];
    mean1 += dxhat[j];
    mean2 += dxhat[j] * xhat[j];
  }
  mean1 /= static_cast<T>(d);
  mean2 /= static_cast<T>(d);
  for (int j = 0; j < d; ++j) dx[j] += rstd * (dxhat[j] - mean1 - xhat[j] * mean2);
}

}  // namespace

template <typename T>
void backward(const SlicedView<T>& model, const ForwardTape<T>& tape, const Tensor<T>& dlogits,
              NestedWeights<T>& grads) {
  const NestedWeights<T>& W = model.weights();
  const NestedConfig& cfg = W.config;
  if (!(grads.config == cfg)) throw ConfigError("gradient buffer config does not match weights");
  const int d = cfg.hidden;
  const int H = cfg.num_heads;
  const int dh = cfg.head_dim;
  const int dhp = model.head_dim();
  const int kvw = model.kv_width();
  const int A = cfg.attention_width();
  const int mlp_full = cfg.mlp_dim;
  const int mlp = model.mlp_dim();
  const int V = cfg.vocab_size;
  const int n = static_cast<int>(tape.inputs.size());
  using S = std::size_t;

  std::vector<int> grid_rows;
  for (int i = 0; i < n; ++i) {
    if (tape.inputs[i].position > 0) grid_rows.push_back(i);
  }
  if (dlogits.rank() != 2 || dlogits.dim(0) != grid_rows.size() || dlogits.dim(1) != S(V)) {
    throw DimensionError("dlogits shape " + shape_string(dlogits.shape()) + " does not match forward");
  }

  std::vector<T> df(S(n) * d, T(0)), dx(S(n) * d, T(0));
  for (S r = 0; r < grid_rows.size(); ++r) {
    const int i = grid_rows[r];
    const T* dl = dlogits.raw() + r * V;
    kernels::gemm_at_b_acc(d, V, 1, tape.final_out.data() + S(i) * d, d, dl, V, grads.head.raw(), V);
    kernels::gemm_a_bt_acc(1, d, V, dl, V, W.head.raw(), V, df.data() + S(i) * d, d);
  }
  for (int i = 0; i < n; ++i) {
    norm_backward(df.data() + S(i) * d, tape.final_xhat.data() + S(i) * d, tape.final_rstd[i], W.final_norm_gain,
                  grads.final_norm_gain.raw(), grads.final_norm_bias.raw(), dx.data() + S(i) * d, d);
  }

  const T scale = T(1) / std::sqrt(static_cast<T>(dhp));
  std::vector<T> dact, dm, dattn, dq, dk, dv, da, dprob(n);
  for (int l = cfg.num_layers - 1; l >= 0; --l) {
    const auto& L = W.layers[l];
    auto& G = grads.layers[l];
    const auto& tl = tape.layers[l];

    // MLP block: x_out = x_mid + W_down^T gelu(W_up^T LN2(x_mid))
    dact.assign(S(n) * mlp, T(0));
    kernels::gemm_at_b_acc(mlp, d, n, tl.act.data(), mlp, dx.data(), d, G.w_down.raw(), d);
    kernels::gemm_a_bt_acc(n, mlp, d, dx.data(), d, L.w_down.raw(), d, dact.data(), mlp);
    for (S i = 0; i < dact.size(); ++i) dact[i] *= kernels::gelu_derivative(tl.up[i]);
    kernels::gemm_at_b_acc(d, mlp, n, tl.ln2_out.data(), d, dact.data(), mlp, G.w_up.raw(), mlp_full);
    dm.assign(S(n) * d, T(0));
    kernels::gemm_a_bt_acc(n, d, mlp, dact.data(), mlp, L.w_up.raw(), mlp_full, dm.data(), d);
    for (int i = 0; i < n; ++i) {
      norm_backward(dm.data() + S(i) * d, tl.ln2_xhat.data() + S(i) * d, tl.ln2_rstd[i], L.ln2_gain,
                    G.ln2_gain.raw(), G.ln2_bias.raw(), dx.data() + S(i) * d, d);
    }

    // Attention block: x_mid = x_in + attn W_o
    dattn.assign(S(n) * kvw, T(0));
    for (int h = 0; h < H; ++h) {
      kernels::gemm_at_b_acc(dhp, d, n, tl.attn.data() + h * dhp, kvw, dx.data(), d, G.wo.raw() + S(h) * dh * d, d);
      kernels::gemm_a_bt_acc(n, dhp, d, dx.data(), d, L.wo.raw() + S(h) * dh * d, d, dattn.data() + h * dhp, kvw);
    }
    dq.assign(S(n) * kvw, T(0));
    dk.assign(S(n) * kvw, T(0));
    dv.assign(S(n) * kvw, T(0));
    for (int h = 0; h < H; ++h) {
      for (int i = 0; i < n; ++i) {
        const T* P = tl.probs.data() + (S(h) * n + i) * n;
        const T* doi = dattn.data() + S(i) * kvw + h * dhp;
        T dot_sum = 0;
        for (int j = 0; j < n; ++j) {
          const T* vj = tl.v.data() + S(j) * kvw + h * dhp;
          T* dvj = dv.data() + S(j) * kvw + h * dhp;
          T g = 0;
          for (int r = 0; r < dhp; ++r) {
            g += doi[r] * vj[r];
            dvj[r] += P[j] * doi[r];
          }
          dprob[j] = g;
          dot_sum += P[j] * g;
        }
        const T* qi = tl.q.data() + S(i) * kvw + h * dhp;
        T* dqi = dq.data() + S(i) * kvw + h * dhp;
        for (int j = 0; j < n; ++j) {
          const T ds = P[j] * (dprob[j] - dot_sum) * scale;
          const T* kj = tl.k.data() + S(j) * kvw + h * dhp;
          T* dkj = dk.data() + S(j) * kvw + h * dhp;
          for (int r = 0; r < dhp; ++r) {
            dqi[r] += ds * kj[r];
            dkj[r] += ds * qi[r];
          }
        }
      }
    }
    da.assign(S(n) * d, T(0));
    const T* a_in = tl.ln1_out.data();
    for (int h = 0; h < H; ++h) {
      kernels::gemm_at_b_acc(d, dhp, n, a_in, d, dq.data() + h * dhp, kvw, G.wq.raw() + h * dh, A);
      kernels::gemm_at_b_acc(d, dhp, n, a_in, d, dk.data() + h * dhp, kvw, G.wk.raw() + h * dh, A);
      kernels::gemm_at_b_acc(d, dhp, n, a_in, d, dv.data() + h * dhp, kvw, G.wv.raw() + h * dh, A);
      kernels::gemm_a_bt_acc(n, d, dhp, dq.data() + h * dhp, kvw, L.wq.raw() + h * dh, A, da.data(), d);
      kernels::gemm_a_bt_acc(n, d, dhp, dk.data() + h * dhp, kvw, L.wk.raw() + h * dh, A, da.data(), d);
      kernels::gemm_a_bt_acc(n, d, dhp, dv.data() + h * dhp, kvw, L.wv.raw() + h * dh, A, da.data(), d);
    }
    for (int i = 0; i < n; ++i) {
      norm_backward(da.data() + S(i) * d, tl.ln1_xhat.data() + S(i) * d, tl.ln1_rstd[i], L.ln1_gain,
                    G.ln1_gain.raw(), G.ln1_bias.raw(), dx.data() + S(i) * d, d);
    }
  }

  for (int i = 0; i < n; ++i) {
    T* te = grads.token_embedding.raw() + S(tape.inputs[i].token) * d;
    T* pe = grads.position_embedding.raw() + S(tape.inputs[i].position) * d;
    for (int j = 0; j < d; ++j) {
      te[j] += dx[S(i) * d + j];
      pe[j] += dx[S(i) * d + j];
    }
  }
}

#define NESTDECODE_INSTANTIATE(T)                                                                          \
  template struct NestedWeights<T>;                                                                        \
  template NestedWeights<T> init_weights<T>(const NestedConfig&, Rng&);                                    \
  template class SlicedView<T>;                                                                            \
  template NestedWeights<T> extract_standalone<T>(const NestedWeights<T>&, int);                           \
  template class KVCache<T>;                                                                               \
  template ForwardResult<T> forward<T>(const SlicedView<T>&, std::span<const TokenInput>, const KVCache<T>&, \
                                       ForwardTape<T>*);                                                   \
  template void backward<T>(const SlicedView<T>&, const ForwardTape<T>&, const Tensor<T>&, NestedWeights<T>&);

NESTDECODE_INSTANTIATE(float)
NESTDECODE_INSTANTIATE(double)
#undef NESTDECODE_INSTANTIATE

template NestedWeights<double> cast_weights<double, float>(const NestedWeights<float>&);
template NestedWeights<float> cast_weights<float, double>(const NestedWeights<double>&);
template NestedWeights<float> cast_weights<float, float>(const NestedWeights<float>&);
template NestedWeights<double> cast_weights<double, double>(const NestedWeights<double>&);

}  // namespace nestdecode
