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

// Parallel masked decoding. Every iteration predicts all masked positions,
// samples a token for each, and commits the most confident ones following a
// cosine unmasking schedule. With caching, committed positions contribute
// cached keys/values instead of being recomputed; the cache is discarded and
// rebuilt at refresh iterations.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nestdecode/nested_transformer.hpp"
#include "nestdecode/schedules.hpp"

namespace nestdecode {

enum class Variant { baseline, magnets };
enum class CachePolicy { none, cache, cache_refresh };
// immediate: commit a position's K/V from the pass in which it was still
//   mask-embedded (it is never processed again).
// lagged: process a freshly committed position once more with its sampled
//   token and cache that K/V.
enum class RecacheTiming { immediate, lagged };

std::string to_string(Variant v);
std::string to_string(CachePolicy p);
std::string to_string(RecacheTiming t);
Variant parse_variant(std::string_view s);
CachePolicy parse_cache_policy(std::string_view s);
RecacheTiming parse_recache_timing(std::string_view s);

struct Geometry {
  int frames = 1;
  int rows = 4;
  int cols = 4;
  int size() const { return frames * rows * cols; }
  bool operator==(const Geometry&) const = default;
};

struct Conditioning {
  int cell;   // 0-based grid cell
  int token;  // codebook id
};

struct SamplerConfig {
  SamplerSchedule sampler;
  std::uint64_t seed = 0;
  Variant variant = Variant::magnets;
  CachePolicy cache_policy = CachePolicy::cache_refresh;
  RecacheTiming recache_timing = RecacheTiming::lagged;
  // Refresh iterations for cache_refresh; empty means every model switch.
  std::vector<int> refresh_at;
  std::vector<Conditioning> conditioning;
};

struct TokenGrid {
  std::vector<int> tokens;  // length N, mask_id marks undecided cells
  Geometry geometry;
  int mask_id = 0;

  int masked_count() const;
};

struct IterationRecord {
  int iteration = 0;
  int factor = 1;
  int processed = 0;  // positions fed through the model (class slot included)
  int cached = 0;     // positions served from the cache
  int uncond_processed = 0;
  int uncond_cached = 0;
  bool refresh = false;
  bool guided = false;
  std::vector<int> committed;  // grid cells committed this iteration
};

struct DecodeTrace {
  int total_iterations = 0;
  Geometry geometry;
  std::vector<IterationRecord> iterations;
  std::vector<int> commit_iteration;  // per cell; -1 for conditioning cells
};

// logits + lambda * gs * (logits - uncond)
template <typename T>
Tensor<T> apply_guidance(const Tensor<T>& logits_cond, const Tensor<T>& logits_uncond, double guidance_scale,
                         double lambda);

struct SampleStep {
  std::vector<int> sampled;    // one id per input row
  std::vector<int> committed;  // row indices, ascending
  std::vector<double> confidence;
};

// Rows of `logits` are the masked positions in ascending position order.
// Per row: draw id from softmax(logits / stemp(k)), then confidence =
// log softmax(logits)[id] + MTemp * mask_ratio(k + 1, K) * gumbel. The
// n_commit most confident rows commit; ties go to the lower row.
template <typename T>
SampleStep maskgit_sample_step(const Tensor<T>& logits, int k, int total_iterations, int n_commit,
                               const SamplerSchedule& sampler, Rng& rng);

template <typename T>
class Decoder {
 public:
  Decoder(const NestedWeights<T>& weights, DecodeSchedule schedule, SamplerConfig config,
          std::optional<int> class_id, Geometry geometry, std::uint64_t stream = 0);

  bool done() const { return k_ >= schedule_.total_iterations; }
  int iteration() const { return k_; }
  const IterationRecord& step();
  // Discards both caches; the next step processes every position.
  void refresh_cache();

  const TokenGrid& grid() const { return grid_; }
  const DecodeTrace& trace() const { return trace_; }
  const KVCache<T>& cache() const { return cache_; }
  const KVCache<T>& uncond_cache() const { return uncond_cache_; }
  // Final (guided if applicable) logits of the last step's masked cells.
  const Tensor<T>& last_logits() const { return last_logits_; }
  const std::vector<int>& last_masked_cells() const { return last_masked_; }

  std::pair<TokenGrid, DecodeTrace> run();

 private:
  struct StreamPass {
    std::vector<TokenInput> inputs;
    ForwardResult<T> result;
    Tensor<T> masked_logits;
    int processed = 0;
    int cached = 0;
  };
  StreamPass run_stream(const SlicedView<T>& view, const KVCache<T>& cache, int class_token,
                        const std::vector<int>& masked_cells) const;
  void update_cache(KVCache<T>& cache, const StreamPass& pass, const std::vector<char>& committed_before,
                    int factor) const;

  const NestedWeights<T>* weights_;
  DecodeSchedule schedule_;
  SamplerConfig config_;
  std::vector<int> factors_;
  std::vector<char> refresh_points_;
  int class_token_;
  int null_token_;
  TokenGrid grid_;
  DecodeTrace trace_;
  KVCache<T> cache_;
  KVCache<T> uncond_cache_;
  Rng rng_;
  int num_generated_;
  int k_ = 0;
  bool pending_refresh_ = false;
  Tensor<T> last_logits_;
  std::vector<int> last_masked_;
};

template <typename T>
std::pair<TokenGrid, DecodeTrace> decode(const NestedWeights<T>& weights, const DecodeSchedule& schedule,
                                         const SamplerConfig& config, std::optional<int> class_id,
                                         Geometry geometry, std::uint64_t stream = 0) {
  return Decoder<T>(weights, schedule, config, class_id, geometry, stream).run();
}

struct DensityMaps {
  Geometry geometry;
  int total_iterations = 0;
  int runs = 0;
  // [iteration][cell]: fraction of runs committing the cell at that iteration.
  std::vector<std::vector<double>> density;
  std::vector<std::vector<long long>> counts;
};

DensityMaps unmask_density(std::span<const DecodeTrace> traces);

}  // namespace nestdecode
