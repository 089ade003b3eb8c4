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
#include <numbers>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "nestdecode/errors.hpp"
#include "nestdecode/flops.hpp"
#include "nestdecode/numerics.hpp"

namespace nestdecode {
namespace {

// Independent transcription of the reference loop, kept deliberately literal.
double oracle_flops(double c, double pr, int m, const ModelDims& d) {
  const double h = d.hidden;
  const double qkv = 4 * pr * h * (d.hidden / m);
  const double attn = 2 * pr * (pr + c) * h;
  const double mlp = 2 * pr * (d.mlp_dim / m) * h;
  return (qkv + attn + mlp) * d.num_layers / 1e9;
}

double oracle_total(const FlopsQuery& q, const ModelDims& d) {
  const std::set<int> refresh(q.refresh_at.begin(), q.refresh_at.end());
  const std::set<int> guided(q.guided_iters.begin(), q.guided_iters.end());
  double num_cached = 0, total = 0;
  const double T = q.total_tokens - q.num_cond_tokens;
  for (int i = 0; i < q.num_iters; ++i) {
    const double npr = std::cos(std::numbers::pi / 2. * (double(i) / q.num_iters)) * T;
    double f;
    if (i == 0 || (refresh.count(i) && q.use_cache)) {
      f = oracle_flops(0, T + q.num_cond_tokens, q.model_id_schedule[i], d);
    } else {
      f = oracle_flops(num_cached + q.num_cond_tokens, T - num_cached, q.model_id_schedule[i], d);
    }
    if (guided.count(i)) f *= 2;
    total += f;
    if (q.use_cache) num_cached = T - npr;
  }
  return total;
}

std::vector<int> sched(std::initializer_list<int> factors, int each) {
  std::vector<int> out;
  for (int p : factors) out.insert(out.end(), each, p);
  return out;
}

FlopsQuery query(int K, bool cache, std::vector<int> refresh, int tokens, std::vector<int> s, int guided_last,
                 int cond = 0, std::string version = "L") {
  FlopsQuery q;
  q.version = version;
  q.num_iters = K;
  q.use_cache = cache;
  q.refresh_at = std::move(refresh);
  q.total_tokens = tokens;
  q.num_cond_tokens = cond;
  q.model_id_schedule = std::move(s);
  q.guided_iters = last_iterations(K, guided_last);
  return q;
}

TEST(GetFlops, FrozenValues) {
  const auto L = model_dims("L");
  EXPECT_NEAR(get_flops(0, 257, 1, L), 80.857841664, 1e-9);
  EXPECT_NEAR(get_flops(0, 257, 8, L), 12.9478656, 1e-9);
  EXPECT_NEAR(get_flops(100, 157, 2, model_dims("S")), 2.038699008, 1e-9);
  EXPECT_NEAR(get_flops(3.5, 20.25, 4, model_dims("XL")), 2.288430144, 1e-9);
  EXPECT_EQ(get_flops(0, 0, 1, L), 0.0);
}

TEST(GetFlops, AttentionTermDoesNotScaleWithFactor) {
  const auto L = model_dims("L");
  const double qkv_mlp_1 = get_flops(0, 1, 1, L) - get_flops(0, 0, 1, L);
  const double attn_only = [&] {
    ModelDims d = L;
    return 2.0 * 1 * 1 * d.hidden * d.num_layers / 1e9;
  }();
  const double p8 = get_flops(0, 1, 8, L);
  EXPECT_NEAR(p8 - attn_only, (qkv_mlp_1 - attn_only) / 8, 1e-15);
}

TEST(TotalFlops, FrozenReproductionValues) {
  const auto L = model_dims("L");
  const auto s12 = sched({8, 4, 2, 1}, 3);
  const auto s16 = sched({8, 4, 2, 1}, 4);
  EXPECT_NEAR(get_total_flops(query(8, false, {}, 257, sched({1}, 8), 0), L), 646.8627333120002, 1e-9);
  EXPECT_NEAR(get_total_flops(query(12, false, {}, 257, sched({1}, 12), 4), L), 1293.7254666240003, 1e-9);
  EXPECT_NEAR(get_total_flops(query(12, true, {3, 6, 9}, 257, s12, 4), L), 490.36582704012477, 1e-9);
  EXPECT_NEAR(get_total_flops(query(16, false, {}, 257, sched({1}, 16), 6), L), 1778.8725166080005, 1e-9);
  EXPECT_NEAR(get_total_flops(query(16, true, {4, 8, 12}, 257, s16, 6), L), 607.8247886028785, 1e-9);
  EXPECT_NEAR(get_total_flops(query(12, false, {}, 1025, sched({1}, 12), 0), L), 4334.1594624, 1e-9);
  EXPECT_NEAR(get_total_flops(query(12, true, {3, 6, 9}, 1025, s12, 0), L), 1701.0901037306364, 1e-9);
  EXPECT_NEAR(get_total_flops(query(12, false, {}, 1025, sched({1}, 12), 2), L), 5056.519372800001, 1e-9);
  EXPECT_NEAR(get_total_flops(query(12, true, {3, 6, 9}, 1025, s12, 0, 512), L), 1244.465022795919, 1e-9);
  EXPECT_NEAR(get_total_flops(query(12, true, {3, 6, 9}, 1025, s12, 2, 512), L), 1360.4269641668086, 1e-9);
  EXPECT_NEAR(get_total_flops(query(12, true, {3, 6, 9}, 257, s12, 0), L), 332.0377581438581, 1e-9);
  EXPECT_NEAR(get_total_flops(query(16, true, {4, 8, 12}, 257, s16, 6, 0, "S")), 48.61033565436134, 1e-9);
  EXPECT_NEAR(get_total_flops(query(10, true, {5}, 65, sched({4, 1}, 5), 3, 16, "B")), 25.652582920980578, 1e-9);
}

TEST(TotalFlops, MatchesLiteralTranscriptionOnRandomQueries) {
  Rng rng(2024);
  const std::vector<std::string> versions{"S", "B", "L", "XL"};
  const std::vector<int> factors{1, 2, 4, 8};
  for (int trial = 0; trial < 300; ++trial) {
    FlopsQuery q;
    q.version = versions[rng.next_u64() % 4];
    q.num_iters = 1 + static_cast<int>(rng.next_u64() % 20);
    q.use_cache = rng.next_u64() % 2;
    for (int i = 1; i < q.num_iters; ++i) {
      if (rng.uniform() < 0.2) q.refresh_at.push_back(i);
    }
    q.total_tokens = 2 + static_cast<int>(rng.next_u64() % 2000);
    q.num_cond_tokens = static_cast<int>(rng.next_u64() % q.total_tokens);
    for (int i = 0; i < q.num_iters; ++i) q.model_id_schedule.push_back(factors[rng.next_u64() % 4]);
    q.guided_iters = last_iterations(q.num_iters, static_cast<int>(rng.next_u64() % (q.num_iters + 1)));
    const auto d = model_dims(q.version);
    EXPECT_DOUBLE_EQ(get_total_flops(q, d), oracle_total(q, d)) << "trial " << trial;
  }
}

TEST(TotalFlops, CachingNeverIncreasesCost) {
  Rng rng(7);
  const std::vector<int> factors{1, 2, 4, 8};
  for (int trial = 0; trial < 200; ++trial) {
    const int K = 2 + static_cast<int>(rng.next_u64() % 16);
    std::vector<int> s;
    for (int i = 0; i < K; ++i) s.push_back(factors[rng.next_u64() % 4]);
    const int g = static_cast<int>(rng.next_u64() % (K + 1));
    const auto off = query(K, false, {}, 257, s, g);
    const auto on = query(K, true, {}, 257, s, g);
    EXPECT_LE(get_total_flops(on), get_total_flops(off) + 1e-9);
  }
}

TEST(TotalFlops, RefreshNeverLowersTheRefreshedIteration) {
  const auto s12 = sched({8, 4, 2, 1}, 3);
  const auto plain = flops_breakdown(query(12, true, {}, 257, s12, 4), model_dims("L"));
  for (int r = 1; r < 12; ++r) {
    const auto refreshed = flops_breakdown(query(12, true, {r}, 257, s12, 4), model_dims("L"));
    EXPECT_TRUE(refreshed[r].full_pass);
    EXPECT_GE(refreshed[r].gflops, plain[r].gflops);
  }
}

TEST(TotalFlops, ConditioningTokensAreAlwaysCachedAfterTheFirstPass) {
  const auto rows = flops_breakdown(query(12, true, {3, 6, 9}, 1025, sched({8, 4, 2, 1}, 3), 0, 512), model_dims("L"));
  EXPECT_EQ(rows[0].processed, 1025);
  EXPECT_EQ(rows[1].processed, 513);
  EXPECT_EQ(rows[1].cached, 512);
  EXPECT_EQ(rows[3].processed, 1025);
}

TEST(TotalFlops, GuidanceDoublesGuidedIterations) {
  const auto plain = flops_breakdown(query(12, false, {}, 257, sched({1}, 12), 0), model_dims("L"));
  const auto guided = flops_breakdown(query(12, false, {}, 257, sched({1}, 12), 4), model_dims("L"));
  for (int i = 0; i < 12; ++i) EXPECT_EQ(guided[i].gflops, plain[i].gflops * (i >= 8 ? 2 : 1));
}

TEST(FlopsQuery, ValidationErrors) {
  auto q = query(12, true, {3}, 257, sched({1}, 11), 0);
  EXPECT_THROW(get_total_flops(q), QueryError);
  q = query(12, true, {12}, 257, sched({1}, 12), 0);
  EXPECT_THROW(get_total_flops(q), QueryError);
  q = query(12, true, {0}, 257, sched({1}, 12), 0);
  EXPECT_THROW(get_total_flops(q), QueryError);
  q = query(12, false, {}, 257, sched({1}, 12), 0, 257);
  EXPECT_THROW(get_total_flops(q), QueryError);
  q = query(12, false, {}, 257, sched({1}, 12), 0, 0, "XXL");
  EXPECT_THROW(get_total_flops(q), QueryError);
}

TEST(ModelDims, BuiltinsDivideHeads) {
  for (const auto& d : builtin_model_dims()) EXPECT_NO_THROW(d.validate());
  EXPECT_EQ(model_dims("L"), (ModelDims{"L", 24, 1024, 4096, 16}));
  ModelDims bad{"bad", 2, 10, 20, 3};
  EXPECT_THROW(bad.validate(), QueryError);
}

TEST(GainReport, BaselineIsOneAndRatiosAreInverse) {
  const auto rows = gain_report(cache_ablation_queries(4));
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0].gain, 1.0);
  for (const auto& r : rows) EXPECT_NEAR(r.gain * r.gflops, rows[0].gflops, 1e-9);
  EXPECT_THROW(gain_report({}), QueryError);
  auto two = cache_ablation_queries(0);
  two[1].baseline = true;
  EXPECT_THROW(gain_report(two), QueryError);
}

TEST(GainReport, RenderingIsFixedDecimal) {
  const auto rows = gain_report(cache_ablation_queries(0));
  const std::string csv = render_gain_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "query,gflops,gain,baseline");
  EXPECT_NE(csv.find("baseline,970.294"), std::string::npos);
  EXPECT_NE(csv.find("scheduled+cache+refresh,332.037758,2.922"), std::string::npos);
  const std::string text = render_gain_table(rows, "ablation");
  EXPECT_NE(text.find("(baseline)"), std::string::npos);
}

TEST(BuiltinQueries, NamesAreUniqueAndEachGroupHasOneBaseline) {
  std::set<std::string> names;
  std::map<std::string, int> baselines;
  for (const auto& q : builtin_flops_queries()) {
    EXPECT_TRUE(names.insert(q.name).second) << q.name;
    baselines[q.group] += q.baseline;
  }
  for (const auto& [group, n] : baselines) EXPECT_EQ(n, 1) << group;
  EXPECT_TRUE(find_builtin_flops_query("imagenet-magnets-12-g4").has_value());
  EXPECT_FALSE(find_builtin_flops_query("nope").has_value());
}

TEST(LastIterations, ClampsAtZero) {
  EXPECT_EQ(last_iterations(12, 4), (std::vector<int>{8, 9, 10, 11}));
  EXPECT_TRUE(last_iterations(12, 0).empty());
  EXPECT_EQ(last_iterations(3, 5), (std::vector<int>{0, 1, 2}));
}

}  // namespace
}  // namespace nestdecode
