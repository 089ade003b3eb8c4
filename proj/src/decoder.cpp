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

#include "nestdecode/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace nestdecode {

std::string to_string(Variant v) { return v == Variant::baseline ? "baseline" : "magnets"; }

std::string to_string(CachePolicy p) {
  switch (p) {
    case CachePolicy::none: return "none";
    case CachePolicy::cache: return "cache";
    case CachePolicy::cache_refresh: return "cache+refresh";
  }
  return "none";
}

std::string to_string(RecacheTiming t) { return t == RecacheTiming::immediate ? "immediate" : "lagged"; }

Variant parse_variant(std::string_view s) {
  if (s == "baseline") return Variant::baseline;
  if (s == "magnets") return Variant::magnets;
  throw ConfigError("unknown variant '" + std::string(s) + "'");
}

CachePolicy parse_cache_policy(std::string_view s) {
  if (s == "none") return CachePolicy::none;
  if (s == "cache") return CachePolicy::cache;
  if (s == "cache+refresh") return CachePolicy::cache_refresh;
  throw ConfigError("unknown cache policy '" + std::string(s) + "'");
}

RecacheTiming parse_recache_timing(std::string_view s) {
  if (s == "immediate") return RecacheTiming::immediate;
  if (s == "lagged") return RecacheTiming::lagged;
  throw ConfigError("unknown recache timing '" + std::string(s) + "'");
}

int TokenGrid::masked_count() const {
  return static_cast<int>(std::count(tokens.begin(), tokens.end(), mask_id));
}

template <typename T>
Tensor<T> apply_guidance(const Tensor<T>& logits_cond, const Tensor<T>& logits_uncond, double guidance_scale,
                         double lambda) {
  if (logits_cond.shape() != logits_uncond.shape()) {
    throw DimensionError("guidance logits shape mismatch: " + shape_string(logits_cond.shape()) + " vs " +
                         shape_string(logits_uncond.shape()));
  }
  const T w = static_cast<T>(lambda * guidance_scale);
  Tensor<T> out = logits_cond;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = logits_cond[i] + w * (logits_cond[i] - logits_uncond[i]);
  return out;
}

template <typename T>
SampleStep maskgit_sample_step(const Tensor<T>& logits, int k, int total_iterations, int n_commit,
                               const SamplerSchedule& sampler, Rng& rng) {
  if (logits.rank() != 2) throw DimensionError("sample step expects [positions, V] logits");
  const int rows = static_cast<int>(logits.dim(0));
  const int V = static_cast<int>(logits.dim(1));
  if (n_commit < 0 || n_commit > rows) {
    throw InputError("cannot commit " + std::to_string(n_commit) + " of " + std::to_string(rows) + " masked positions");
  }
  const double stemp = sampling_temperature(k, total_iterations, sampler.stemp_bias, sampler.stemp_scale);
  const double noise = sampler.mask_temp * mask_ratio(k + 1, total_iterations);

  SampleStep out;
  out.sampled.resize(rows);
  out.confidence.resize(rows);
  for (int r = 0; r < rows; ++r) {
    const std::span<const T> row(logits.raw() + static_cast<std::size_t>(r) * V, V);
    const int id = categorical_sample(row, stemp, rng);
    double mx = -INFINITY;
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    double z = 0;
    for (T v : row) z += std::exp(static_cast<double>(v) - mx);
    const double logp = static_cast<double>(row[id]) - mx - std::log(z);
    out.sampled[r] = id;
    out.confidence[r] = logp + noise * gumbel_from_uniform(rng.uniform());
  }
  std::vector<int> order(rows);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return out.confidence[a] > out.confidence[b]; });
  out.committed.assign(order.begin(), order.begin() + n_commit);
  std::sort(out.committed.begin(), out.committed.end());
  return out;
}

// ---------------------------------------------------------------- decoder

template <typename T>
Decoder<T>::Decoder(const NestedWeights<T>& weights, DecodeSchedule schedule, SamplerConfig config,
                    std::optional<int> class_id, Geometry geometry, std::uint64_t stream)
    : weights_(&weights),
      schedule_(std::move(schedule)),
      config_(std::move(config)),
      cache_(weights.config),
      uncond_cache_(weights.config),
      rng_(Rng(config_.seed).split(stream)) {
  const NestedConfig& cfg = weights.config;
  cfg.validate();
  validate_schedule(schedule_, cfg);
  const int K = schedule_.total_iterations;
  config_.sampler.validate(K);
  factors_ = schedule_.expand();
  if (config_.variant == Variant::baseline &&
      std::any_of(factors_.begin(), factors_.end(), [](int p) { return p != 1; })) {
    throw ConfigError("baseline variant requires the full model at every iteration");
  }
  const int N = geometry.size();
  if (geometry.frames < 1 || geometry.rows < 1 || geometry.cols < 1 || N > cfg.max_positions) {
    throw InputError("grid of " + std::to_string(N) + " cells does not fit model with " +
                     std::to_string(cfg.max_positions) + " positions");
  }

  refresh_points_.assign(K, 0);
  if (config_.cache_policy == CachePolicy::cache_refresh) {
    const auto points = config_.refresh_at.empty() ? switch_iterations(schedule_) : config_.refresh_at;
    for (int r : points) {
      if (r < 1 || r >= K) throw ConfigError("refresh iteration " + std::to_string(r) + " outside [1, K)");
      refresh_points_[r] = 1;
    }
  }

  class_token_ = class_input(cfg, class_id).token;
  null_token_ = cfg.null_class_token_id();

  grid_.geometry = geometry;
  grid_.mask_id = cfg.mask_token_id();
  grid_.tokens.assign(N, grid_.mask_id);
  trace_.total_iterations = K;
  trace_.geometry = geometry;
  trace_.commit_iteration.assign(N, -1);
  for (const auto& c : config_.conditioning) {
    if (c.cell < 0 || c.cell >= N) throw InputError("conditioning cell " + std::to_string(c.cell) + " out of range");
    if (c.token < 0 || c.token >= cfg.vocab_size) throw InputError("conditioning token out of codebook range");
    if (grid_.tokens[c.cell] != grid_.mask_id) throw InputError("conditioning cell given twice");
    grid_.tokens[c.cell] = c.token;
  }
  num_generated_ = grid_.masked_count();
  if (num_generated_ == 0) throw InputError("nothing to generate: every cell is conditioned");
  if (num_generated_ < K) {
    throw ConfigError("schedule has " + std::to_string(K) + " iterations but only " + std::to_string(num_generated_) +
                      " cells to generate");
  }
}

template <typename T>
void Decoder<T>::refresh_cache() {
  cache_.clear();
  uncond_cache_.clear();
  pending_refresh_ = true;
}

template <typename T>
typename Decoder<T>::StreamPass Decoder<T>::run_stream(const SlicedView<T>& view, const KVCache<T>& cache,
                                                       int class_token, const std::vector<int>& masked_cells) const {
  const int N = grid_.geometry.size();
  const int V = weights_->config.vocab_size;
  StreamPass pass;
  // The class slot is never cached; its K/V are recomputed on every pass.
  pass.inputs.push_back({0, class_token});
  for (int cell = 0; cell < N; ++cell) {
    if (!cache.contains(cell + 1)) pass.inputs.push_back({cell + 1, grid_.tokens[cell]});
  }
  pass.result = forward(view, std::span<const TokenInput>(pass.inputs), cache);
  pass.processed = static_cast<int>(pass.inputs.size());
  pass.cached = static_cast<int>(cache.size());

  std::vector<int> row_of(N + 1, -1);
  for (std::size_t r = 0; r < pass.result.logit_positions.size(); ++r) {
    row_of[pass.result.logit_positions[r]] = static_cast<int>(r);
  }
  pass.masked_logits = Tensor<T>({masked_cells.size(), static_cast<std::size_t>(V)});
  for (std::size_t m = 0; m < masked_cells.size(); ++m) {
    const int r = row_of[masked_cells[m] + 1];
    if (r < 0) throw CacheError("masked cell " + std::to_string(masked_cells[m]) + " served from cache");
    std::copy_n(pass.result.logits.raw() + static_cast<std::size_t>(r) * V, V, pass.masked_logits.raw() + m * V);
  }
  return pass;
}

template <typename T>
void Decoder<T>::update_cache(KVCache<T>& cache, const StreamPass& pass, const std::vector<char>& committed_before,
                              int factor) const {
  std::vector<std::size_t> rows;
  std::vector<int> positions;
  for (std::size_t i = 0; i < pass.inputs.size(); ++i) {
    const int pos = pass.inputs[i].position;
    if (pos == 0) continue;
    const int cell = pos - 1;
    const bool committed_now = grid_.tokens[cell] != grid_.mask_id;
    const bool cacheable = committed_before[cell] ||
                           (committed_now && config_.recache_timing == RecacheTiming::immediate);
    if (cacheable) {
      rows.push_back(i);
      positions.push_back(pos);
    }
  }
  cache.append(pass.result.new_kv, rows, positions, factor);
}

template <typename T>
const IterationRecord& Decoder<T>::step() {
  if (done()) throw InputError("decode already finished");
  const int K = schedule_.total_iterations;
  const int k = k_;
  const int p = factors_[k];
  const SlicedView<T> view(*weights_, p);
  const int N = grid_.geometry.size();

  IterationRecord rec;
  rec.iteration = k;
  rec.factor = p;
  rec.refresh = pending_refresh_;
  pending_refresh_ = false;
  if (config_.cache_policy == CachePolicy::none) {
    cache_.clear();
    uncond_cache_.clear();
  } else if (k > 0 && refresh_points_[k]) {
    cache_.clear();
    uncond_cache_.clear();
    rec.refresh = true;
  }
  // Without a refresh at a model switch the cached features are re-tagged by
  // zero-padding or truncating each head.
  cache_.rescale(p);
  uncond_cache_.rescale(p);

  std::vector<int> masked;
  std::vector<char> committed_before(N, 0);
  for (int cell = 0; cell < N; ++cell) {
    if (grid_.tokens[cell] == grid_.mask_id) {
      masked.push_back(cell);
    } else {
      committed_before[cell] = 1;
    }
  }

  rec.guided = config_.sampler.guided(k, K);
  StreamPass cond = run_stream(view, cache_, class_token_, masked);
  rec.processed = cond.processed;
  rec.cached = cond.cached;
  std::optional<StreamPass> uncond;
  if (rec.guided) {
    uncond = run_stream(view, uncond_cache_, null_token_, masked);
    rec.uncond_processed = uncond->processed;
    rec.uncond_cached = uncond->cached;
    const double lambda = config_.sampler.lambda_fn(mask_ratio(k, K));
    last_logits_ = apply_guidance(cond.masked_logits, uncond->masked_logits, config_.sampler.guidance_scale, lambda);
  } else {
    last_logits_ = std::move(cond.masked_logits);
  }
  last_masked_ = masked;

  const int n_commit = unmask_count(k, K, num_generated_);
  const SampleStep sampled = maskgit_sample_step(last_logits_, k, K, n_commit, config_.sampler, rng_);
  for (int r : sampled.committed) {
    const int cell = masked[r];
    grid_.tokens[cell] = sampled.sampled[r];
    trace_.commit_iteration[cell] = k;
    rec.committed.push_back(cell);
  }

  if (config_.cache_policy != CachePolicy::none) {
    update_cache(cache_, cond, committed_before, p);
    if (uncond) update_cache(uncond_cache_, *uncond, committed_before, p);
  }

  trace_.iterations.push_back(std::move(rec));
  ++k_;
  return trace_.iterations.back();
}

template <typename T>
std::pair<TokenGrid, DecodeTrace> Decoder<T>::run() {
  while (!done()) step();
  return {grid_, trace_};
}

// ---------------------------------------------------------------- density

DensityMaps unmask_density(std::span<const DecodeTrace> traces) {
  if (traces.empty()) throw InputError("unmask_density needs at least one trace");
  DensityMaps maps;
  maps.geometry = traces.front().geometry;
  maps.total_iterations = traces.front().total_iterations;
  maps.runs = static_cast<int>(traces.size());
  const int cells = maps.geometry.size();
  std::vector<std::vector<long long>> counts(maps.total_iterations, std::vector<long long>(cells, 0));
  for (const auto& t : traces) {
    if (!(t.geometry == maps.geometry) || t.total_iterations != maps.total_iterations) {
      throw InputError("traces mix geometries or iteration counts");
    }
    if (static_cast<int>(t.commit_iteration.size()) != cells) throw InputError("trace does not match its geometry");
    for (int c = 0; c < cells; ++c) {
      const int k = t.commit_iteration[c];
      if (k >= 0 && k < maps.total_iterations) ++counts[k][c];
    }
  }
  maps.density.assign(maps.total_iterations, std::vector<double>(cells, 0.0));
  for (int k = 0; k < maps.total_iterations; ++k) {
    for (int c = 0; c < cells; ++c) {
      maps.density[k][c] = static_cast<double>(counts[k][c]) / maps.runs;
    }
  }
  maps.counts = std::move(counts);
  return maps;
}

template Tensor<float> apply_guidance<float>(const Tensor<float>&, const Tensor<float>&, double, double);
template Tensor<double> apply_guidance<double>(const Tensor<double>&, const Tensor<double>&, double, double);
template SampleStep maskgit_sample_step<float>(const Tensor<float>&, int, int, int, const SamplerSchedule&, Rng&);
template SampleStep maskgit_sample_step<double>(const Tensor<double>&, int, int, int, const SamplerSchedule&, Rng&);
template class Decoder<float>;
template class Decoder<double>;

}  // namespace nestdecode
