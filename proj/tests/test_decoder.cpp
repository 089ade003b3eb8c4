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

#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "nestdecode/decoder.hpp"
#include "nestdecode/errors.hpp"
#include "nestdecode/flops.hpp"

namespace nestdecode {
namespace {

const NestedWeights<float>& tiny_weights() {
  static const NestedWeights<float> w = [] {
    Rng rng(21);
    return init_weights<float>(NestedConfig{}, rng);
  }();
  return w;
}

SamplerConfig sampler_config(CachePolicy policy, int guidance_last_x = 0, double gs = 0) {
  SamplerConfig c;
  c.cache_policy = policy;
  c.sampler.guidance_last_x = guidance_last_x;
  c.sampler.guidance_scale = gs;
  return c;
}

const Geometry kGrid{1, 4, 4};

TEST(ApplyGuidance, Formula) {
  Tensor32 c({1, 3}, {1, 2, 3});
  Tensor32 u({1, 3}, {0, 2, 5});
  const auto g = apply_guidance(c, u, 2.0, 0.5);
  EXPECT_EQ(g[0], 2.0f);
  EXPECT_EQ(g[1], 2.0f);
  EXPECT_EQ(g[2], 1.0f);
  EXPECT_TRUE(apply_guidance(c, u, 0.0, 0.7) == c);
  EXPECT_THROW(apply_guidance(c, Tensor32({2, 3}), 1.0, 1.0), DimensionError);
}

TEST(MaskgitSampleStep, TiesGoToTheLowerIndex) {
  Tensor32 logits({4, 2}, {5, 5, 5, 5, 5, 5, 5, 5});
  SamplerSchedule s;
  s.mask_temp = 0;
  s.stemp_bias = 1e-6;
  s.stemp_scale = 0;
  Rng rng(1);
  const auto step = maskgit_sample_step(logits, 0, 4, 2, s, rng);
  EXPECT_EQ(step.committed, (std::vector<int>{0, 1}));
}

TEST(MaskgitSampleStep, CommitsMostConfidentWithoutNoise) {
  Tensor32 logits({3, 2}, {0, 0, 10, 0, 3, 0});
  SamplerSchedule s;
  s.mask_temp = 0;
  s.stemp_bias = 1e-4;
  s.stemp_scale = 0;
  Rng rng(2);
  const auto step = maskgit_sample_step(logits, 0, 4, 2, s, rng);
  EXPECT_EQ(step.committed, (std::vector<int>{1, 2}));
  EXPECT_EQ(step.sampled[1], 0);
  EXPECT_THROW(maskgit_sample_step(logits, 0, 4, 4, s, rng), InputError);
  EXPECT_THROW(maskgit_sample_step(logits, 0, 4, -1, s, rng), InputError);
}

TEST(Decoder, DeterministicPerSeedAndStream) {
  const auto s = parse_schedule("8x3,4x3,2x3,1x3");
  const auto cfg = sampler_config(CachePolicy::cache_refresh, 4, 3.0);
  const auto a = decode<float>(tiny_weights(), s, cfg, 1, kGrid, 3);
  const auto b = decode<float>(tiny_weights(), s, cfg, 1, kGrid, 3);
  EXPECT_EQ(a.first.tokens, b.first.tokens);
  EXPECT_EQ(a.second.commit_iteration, b.second.commit_iteration);
  bool any_diff = false;
  for (std::uint64_t stream = 4; stream < 12; ++stream) {
    any_diff |= decode<float>(tiny_weights(), s, cfg, 1, kGrid, stream).first.tokens != a.first.tokens;
  }
  EXPECT_TRUE(any_diff);
}

struct Mode {
  const char* schedule;
  CachePolicy policy;
  RecacheTiming timing;
  int guidance_last_x;
};

class DecoderModes : public ::testing::TestWithParam<Mode> {};

TEST_P(DecoderModes, CommittedTokensNeverChangeAndCountsFollowTheSchedule) {
  const Mode m = GetParam();
  auto cfg = sampler_config(m.policy, m.guidance_last_x, 4.0);
  cfg.recache_timing = m.timing;
  const auto schedule = parse_schedule(m.schedule);
  const int K = schedule.total_iterations;
  for (std::uint64_t stream = 0; stream < 8; ++stream) {
    Decoder<float> dec(tiny_weights(), schedule, cfg, static_cast<int>(stream % 4), kGrid, stream);
    std::vector<int> prev = dec.grid().tokens;
    const int mask = dec.grid().mask_id;
    while (!dec.done()) {
      const int k = dec.iteration();
      const auto& rec = dec.step();
      const auto& now = dec.grid().tokens;
      for (int c = 0; c < 16; ++c) {
        if (prev[c] != mask) {
          EXPECT_EQ(now[c], prev[c]) << "cell " << c << " changed at " << k;
        }
      }
      EXPECT_EQ(static_cast<int>(rec.committed.size()), unmask_count(k, K, 16));
      EXPECT_EQ(rec.processed + rec.cached, 17);
      if (rec.guided) {
        EXPECT_EQ(rec.uncond_processed + rec.uncond_cached, 17);
      }
      prev = now;
    }
    EXPECT_EQ(dec.grid().masked_count(), 0);
    for (int c = 0; c < 16; ++c) {
      EXPECT_GE(dec.trace().commit_iteration[c], 0);
      EXPECT_LT(dec.trace().commit_iteration[c], K);
    }
  }
}

INSTANTIATE_TEST_SUITE_P(
    AllModes, DecoderModes,
    ::testing::Values(Mode{"1x12", CachePolicy::none, RecacheTiming::lagged, 0},
                      Mode{"1x12", CachePolicy::cache, RecacheTiming::lagged, 4},
                      Mode{"1x12", CachePolicy::cache, RecacheTiming::immediate, 0},
                      Mode{"8x3,4x3,2x3,1x3", CachePolicy::none, RecacheTiming::lagged, 4},
                      Mode{"8x3,4x3,2x3,1x3", CachePolicy::cache, RecacheTiming::lagged, 2},
                      Mode{"8x3,4x3,2x3,1x3", CachePolicy::cache, RecacheTiming::immediate, 12},
                      Mode{"8x3,4x3,2x3,1x3", CachePolicy::cache_refresh, RecacheTiming::lagged, 4},
                      Mode{"8x3,4x3,2x3,1x3", CachePolicy::cache_refresh, RecacheTiming::immediate, 4},
                      Mode{"8x4,4x4,2x4,1x4", CachePolicy::cache_refresh, RecacheTiming::lagged, 6},
                      Mode{"2x1,8x5,1x6", CachePolicy::cache, RecacheTiming::lagged, 3}));

TEST(Decoder, RefreshEveryIterationEqualsNoCache) {
  const auto schedule = parse_schedule("8x3,4x3,2x3,1x3");
  auto cached = sampler_config(CachePolicy::cache_refresh, 4, 2.0);
  cached.refresh_at.resize(11);
  std::iota(cached.refresh_at.begin(), cached.refresh_at.end(), 1);
  const auto plain = sampler_config(CachePolicy::none, 4, 2.0);
  for (std::uint64_t stream = 0; stream < 20; ++stream) {
    Decoder<float> a(tiny_weights(), schedule, cached, 2, kGrid, stream);
    Decoder<float> b(tiny_weights(), schedule, plain, 2, kGrid, stream);
    while (!a.done()) {
      a.step();
      b.step();
      ASSERT_TRUE(a.last_logits() == b.last_logits());
      ASSERT_EQ(a.grid().tokens, b.grid().tokens);
    }
  }
}

TEST(Decoder, ZeroGuidanceWindowEqualsUnguided) {
  const auto schedule = parse_schedule("8x3,4x3,2x3,1x3");
  for (std::uint64_t stream = 0; stream < 10; ++stream) {
    const auto a = decode<float>(tiny_weights(), schedule, sampler_config(CachePolicy::cache_refresh, 0, 65.0), 1,
                                 kGrid, stream);
    const auto b = decode<float>(tiny_weights(), schedule, sampler_config(CachePolicy::cache_refresh, 0, 0.0), 1,
                                 kGrid, stream);
    EXPECT_EQ(a.first.tokens, b.first.tokens);
    const auto c = decode<float>(tiny_weights(), schedule, sampler_config(CachePolicy::cache_refresh, 12, 0.0), 1,
                                 kGrid, stream);
    EXPECT_EQ(a.first.tokens, c.first.tokens);
  }
}

TEST(Decoder, GuidanceChangesOutputs) {
  const auto schedule = parse_schedule("1x12");
  int differing = 0;
  for (std::uint64_t stream = 0; stream < 10; ++stream) {
    const auto a = decode<float>(tiny_weights(), schedule, sampler_config(CachePolicy::none, 12, 50.0), 1, kGrid, stream);
    const auto b = decode<float>(tiny_weights(), schedule, sampler_config(CachePolicy::none, 0, 0.0), 1, kGrid, stream);
    differing += a.first.tokens != b.first.tokens;
  }
  EXPECT_GT(differing, 0);
}

TEST(Decoder, LaggedAndImmediateCacheTiming) {
  const auto schedule = parse_schedule("1x12");
  auto lagged = sampler_config(CachePolicy::cache);
  auto immediate = lagged;
  immediate.recache_timing = RecacheTiming::immediate;
  const auto tl = decode<float>(tiny_weights(), schedule, lagged, 0, kGrid, 0).second;
  const auto ti = decode<float>(tiny_weights(), schedule, immediate, 0, kGrid, 0).second;
  EXPECT_EQ(tl.iterations[1].cached, 0);
  EXPECT_EQ(tl.iterations[2].cached, unmask_count(0, 12, 16));
  EXPECT_EQ(ti.iterations[1].cached, unmask_count(0, 12, 16));
  for (int k = 1; k < 12; ++k) {
    int committed_before_prev = 0;
    for (int j = 0; j + 1 < k; ++j) committed_before_prev += unmask_count(j, 12, 16);
    EXPECT_EQ(tl.iterations[k].cached, committed_before_prev);
  }
}

TEST(Decoder, RefreshPointsDefaultToSwitchesAndClassSlotIsNeverCached) {
  const auto schedule = parse_schedule("8x3,4x3,2x3,1x3");
  const auto trace = decode<float>(tiny_weights(), schedule, sampler_config(CachePolicy::cache_refresh), 0, kGrid, 0).second;
  for (const auto& it : trace.iterations) {
    const bool expect_refresh = it.iteration == 3 || it.iteration == 6 || it.iteration == 9;
    EXPECT_EQ(it.refresh, expect_refresh) << it.iteration;
    if (expect_refresh || it.iteration == 0) {
      EXPECT_EQ(it.processed, 17);
    }
    EXPECT_GE(it.processed, 1);
  }
  auto explicit_points = sampler_config(CachePolicy::cache_refresh);
  explicit_points.refresh_at = {5};
  const auto t2 = decode<float>(tiny_weights(), schedule, explicit_points, 0, kGrid, 0).second;
  for (const auto& it : t2.iterations) EXPECT_EQ(it.refresh, it.iteration == 5);
}

TEST(Decoder, UnconditionalCacheStartsColdAtTheFirstGuidedIteration) {
  const auto schedule = parse_schedule("1x12");
  const auto trace = decode<float>(tiny_weights(), schedule, sampler_config(CachePolicy::cache, 4, 2.0), 0, kGrid, 0).second;
  for (int k = 0; k < 8; ++k) EXPECT_EQ(trace.iterations[k].uncond_processed, 0);
  EXPECT_EQ(trace.iterations[8].uncond_processed, 17);
  EXPECT_EQ(trace.iterations[8].uncond_cached, 0);
  EXPECT_GT(trace.iterations[9].uncond_cached, 0);
}

TEST(Decoder, ManualRefreshClearsBothCaches) {
  Decoder<float> dec(tiny_weights(), parse_schedule("1x12"), sampler_config(CachePolicy::cache, 12, 1.0), 0, kGrid, 0);
  for (int i = 0; i < 4; ++i) dec.step();
  EXPECT_FALSE(dec.cache().empty());
  EXPECT_FALSE(dec.uncond_cache().empty());
  dec.refresh_cache();
  EXPECT_TRUE(dec.cache().empty());
  EXPECT_TRUE(dec.uncond_cache().empty());
  const auto& rec = dec.step();
  EXPECT_TRUE(rec.refresh);
  EXPECT_EQ(rec.processed, 17);
}

TEST(Decoder, ConditioningCellsAreFixed) {
  auto cfg = sampler_config(CachePolicy::cache_refresh);
  cfg.conditioning = {{0, 3}, {1, 4}, {2, 5}, {3, 6}};
  const auto [grid, trace] = decode<float>(tiny_weights(), parse_schedule("8x3,4x3,2x3,1x3"), cfg, 0, kGrid, 0);
  for (int c = 0; c < 4; ++c) {
    EXPECT_EQ(grid.tokens[c], c + 3);
    EXPECT_EQ(trace.commit_iteration[c], -1);
  }
  int committed = 0;
  for (const auto& it : trace.iterations) committed += static_cast<int>(it.committed.size());
  EXPECT_EQ(committed, 12);
  EXPECT_EQ(trace.iterations[1].cached, 4);
}

TEST(Decoder, ConfigurationErrors) {
  const auto& w = tiny_weights();
  EXPECT_THROW(Decoder<float>(w, parse_schedule("8x12"), [] {
    auto c = sampler_config(CachePolicy::none);
    c.variant = Variant::baseline;
    return c;
  }(), 0, kGrid, 0), ConfigError);
  EXPECT_THROW(Decoder<float>(w, parse_schedule("1x17"), sampler_config(CachePolicy::none), 0, kGrid, 0), ConfigError);
  EXPECT_THROW(Decoder<float>(w, parse_schedule("1x12"), sampler_config(CachePolicy::none), 0, Geometry{1, 5, 5}, 0),
               Error);
  auto refresh = sampler_config(CachePolicy::cache_refresh);
  refresh.refresh_at = {12};
  EXPECT_THROW(Decoder<float>(w, parse_schedule("1x12"), refresh, 0, kGrid, 0), ConfigError);
  auto cond = sampler_config(CachePolicy::none);
  cond.conditioning = {{0, 1}, {1, 1}, {2, 1}, {3, 1}, {4, 1}};
  EXPECT_THROW(Decoder<float>(w, parse_schedule("1x12"), cond, 0, kGrid, 0), ConfigError);
  cond.conditioning = {{0, 1}, {0, 2}};
  EXPECT_THROW(Decoder<float>(w, parse_schedule("1x12"), cond, 0, kGrid, 0), InputError);
  cond.conditioning = {{0, 99}};
  EXPECT_THROW(Decoder<float>(w, parse_schedule("1x12"), cond, 0, kGrid, 0), InputError);
  Decoder<float> done(w, parse_schedule("1x1"), sampler_config(CachePolicy::none), 0, Geometry{1, 1, 1}, 0);
  done.step();
  EXPECT_THROW(done.step(), InputError);
}

TEST(Decoder, CountsAgreeWithFlopsAccountingOnA256Grid) {
  NestedConfig cfg;
  cfg.num_layers = 1;
  cfg.max_positions = 256;
  Rng rng(3);
  const auto w = init_weights<float>(cfg, rng);
  SamplerConfig sc = sampler_config(CachePolicy::cache_refresh, 4, 65.0);
  sc.refresh_at = {3, 6, 9};
  const auto trace = decode<float>(w, parse_schedule("8x3,4x3,2x3,1x3"), sc, 0, Geometry{1, 16, 16}, 0).second;
  const auto q = *find_builtin_flops_query("imagenet-magnets-12-g4");
  const auto rows = flops_breakdown(q.query, model_dims("L"));
  for (int k = 0; k < 12; ++k) {
    EXPECT_LE(std::abs(trace.iterations[k].processed - rows[k].processed), 1.0) << k;
    EXPECT_LE(std::abs(trace.iterations[k].cached - rows[k].cached), 1.0) << k;
    EXPECT_EQ(trace.iterations[k].guided, rows[k].guided);
  }
}

TEST(UnmaskDensity, SumsToOnePerCellAndRejectsMixedTraces) {
  const auto schedule = parse_schedule("8x3,4x3,2x3,1x3");
  std::vector<DecodeTrace> traces;
  for (std::uint64_t s = 0; s < 64; ++s) {
    traces.push_back(decode<float>(tiny_weights(), schedule, sampler_config(CachePolicy::cache_refresh), 1, kGrid, s).second);
  }
  const auto maps = unmask_density(traces);
  EXPECT_EQ(maps.runs, 64);
  for (int c = 0; c < 16; ++c) {
    double sum = 0;
    long long count = 0;
    for (int k = 0; k < 12; ++k) {
      sum += maps.density[k][c];
      count += maps.counts[k][c];
    }
    EXPECT_EQ(sum, 1.0);
    EXPECT_EQ(count, 64);
  }
  for (int k = 0; k < 12; ++k) {
    const double row = std::accumulate(maps.density[k].begin(), maps.density[k].end(), 0.0);
    EXPECT_NEAR(row, unmask_count(k, 12, 16), 1e-12);
  }
  traces.push_back(decode<float>(tiny_weights(), parse_schedule("1x8"), sampler_config(CachePolicy::none), 1, kGrid, 0).second);
  EXPECT_THROW(unmask_density(traces), InputError);
  EXPECT_THROW(unmask_density(std::span<const DecodeTrace>{}), InputError);
}

TEST(EnumNames, RoundTrip) {
  for (auto p : {CachePolicy::none, CachePolicy::cache, CachePolicy::cache_refresh}) {
    EXPECT_EQ(parse_cache_policy(to_string(p)), p);
  }
  for (auto v : {Variant::baseline, Variant::magnets}) EXPECT_EQ(parse_variant(to_string(v)), v);
  for (auto t : {RecacheTiming::lagged, RecacheTiming::immediate}) EXPECT_EQ(parse_recache_timing(to_string(t)), t);
  EXPECT_THROW(parse_cache_policy("sometimes"), ConfigError);
}

}  // namespace
}  // namespace nestdecode
