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

#include "nestdecode/flops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "nestdecode/errors.hpp"

namespace nestdecode {

void ModelDims::validate() const {
  if (num_layers < 1 || hidden < 1 || mlp_dim < 1 || num_heads < 1) {
    throw QueryError("model dims '" + name + "' must be positive");
  }
  if (hidden % num_heads != 0) throw QueryError("model dims '" + name + "': hidden not divisible by num_heads");
}

const std::vector<ModelDims>& builtin_model_dims() {
  static const std::vector<ModelDims> dims{
      {"S", 12, 384, 1536, 6},
      {"B", 12, 768, 3072, 12},
      {"L", 24, 1024, 4096, 16},
      {"XL", 28, 1152, 4608, 18},
  };
  return dims;
}

ModelDims model_dims(const std::string& name) {
  for (const auto& d : builtin_model_dims()) {
    if (d.name == name) return d;
  }
  throw QueryError("unknown model version '" + name + "'");
}

double get_flops(double num_cached, double num_processed, int p, const ModelDims& dims) {
  const double hidden = dims.hidden;
  const double qkv = 4 * num_processed * hidden * static_cast<double>(dims.hidden / p);
  const double attn = 2 * num_processed * (num_processed + num_cached) * hidden;
  const double mlp = 2 * num_processed * static_cast<double>(dims.mlp_dim / p) * hidden;
  return (qkv + attn + mlp) * dims.num_layers / 1e9;
}

void FlopsQuery::validate() const {
  if (num_iters < 1) throw QueryError("num_iters must be >= 1");
  if (static_cast<int>(model_id_schedule.size()) != num_iters) {
    throw QueryError("model_id_schedule has " + std::to_string(model_id_schedule.size()) + " entries, expected " +
                     std::to_string(num_iters));
  }
  for (int p : model_id_schedule) {
    if (p < 1) throw QueryError("downscale factors must be >= 1");
  }
  if (num_cond_tokens < 0 || num_cond_tokens >= total_tokens) {
    throw QueryError("num_cond_tokens must lie in [0, total_tokens)");
  }
  for (int r : refresh_at) {
    if (r < 1 || r >= num_iters) throw QueryError("refresh iteration " + std::to_string(r) + " outside [1, K)");
  }
  for (int g : guided_iters) {
    if (g < 0 || g >= num_iters) throw QueryError("guided iteration " + std::to_string(g) + " outside [0, K)");
  }
}

std::vector<int> last_iterations(int total_iterations, int x) {
  std::vector<int> out;
  for (int k = std::max(0, total_iterations - x); k < total_iterations; ++k) out.push_back(k);
  return out;
}

std::vector<FlopsIteration> flops_breakdown(const FlopsQuery& q, const ModelDims& dims) {
  q.validate();
  dims.validate();
  std::vector<FlopsIteration> out;
  double num_cached = 0;
  // Conditioning tokens never enter the processed pool; they stay cached.
  const double total_tokens = q.total_tokens - q.num_cond_tokens;
  const double num_cond = q.num_cond_tokens;
  for (int i = 0; i < q.num_iters; ++i) {
    const double ratio = static_cast<double>(i) / q.num_iters;
    const double num_processed = std::cos(std::numbers::pi / 2. * ratio) * total_tokens;
    const bool refresh = std::find(q.refresh_at.begin(), q.refresh_at.end(), i) != q.refresh_at.end();
    FlopsIteration it;
    it.iteration = i;
    it.factor = q.model_id_schedule[i];
    it.full_pass = i == 0 || (refresh && q.use_cache);
    if (it.full_pass) {
      it.processed = total_tokens + num_cond;
      it.cached = 0;
    } else {
      it.processed = total_tokens - num_cached;
      it.cached = num_cached + num_cond;
    }
    it.gflops = get_flops(it.cached, it.processed, it.factor, dims);
    it.guided = std::find(q.guided_iters.begin(), q.guided_iters.end(), i) != q.guided_iters.end();
    if (it.guided) it.gflops *= 2;
    out.push_back(it);
    if (q.use_cache) num_cached = total_tokens - num_processed;
  }
  return out;
}

double get_total_flops(const FlopsQuery& query, const ModelDims& dims) {
  double total = 0;
  for (const auto& it : flops_breakdown(query, dims)) total += it.gflops;
  return total;
}

double get_total_flops(const FlopsQuery& query) { return get_total_flops(query, model_dims(query.version)); }

std::vector<GainRow> gain_report(const std::vector<NamedQuery>& queries) {
  const auto n_base = std::count_if(queries.begin(), queries.end(), [](const NamedQuery& q) { return q.baseline; });
  if (queries.empty() || n_base != 1) throw QueryError("gain report needs queries with exactly one baseline");
  std::vector<GainRow> rows;
  double base = 0;
  for (const auto& q : queries) {
    rows.push_back({q.name, get_total_flops(q.query), 0, q.baseline});
    if (q.baseline) base = rows.back().gflops;
  }
  for (auto& r : rows) r.gain = base / r.gflops;
  return rows;
}

std::string render_gain_table(const std::vector<GainRow>& rows, const std::string& title) {
  std::string out;
  if (!title.empty()) out += title + "\n";
  out += fmt::format("{:<32} {:>12} {:>8}\n", "query", "gflops", "gain");
  for (const auto& r : rows) {
    out += fmt::format("{:<32} {:>12.3f} {:>7.3f}x{}\n", r.name, r.gflops, r.gain, r.baseline ? " (baseline)" : "");
  }
  return out;
}

std::string render_gain_csv(const std::vector<GainRow>& rows) {
  std::string out = "query,gflops,gain,baseline\n";
  for (const auto& r : rows) out += fmt::format("{},{:.6f},{:.6f},{}\n", r.name, r.gflops, r.gain, r.baseline ? 1 : 0);
  return out;
}

namespace {

std::vector<int> repeat_schedule(std::initializer_list<int> factors, int each) {
  std::vector<int> out;
  for (int p : factors) out.insert(out.end(), each, p);
  return out;
}

NamedQuery make_query(std::string name, std::string group, bool baseline, int K, bool cache, std::vector<int> refresh,
                      int tokens, int cond, std::vector<int> schedule, int guided_last) {
  NamedQuery nq;
  nq.name = std::move(name);
  nq.group = std::move(group);
  nq.baseline = baseline;
  nq.query.version = "L";
  nq.query.num_iters = K;
  nq.query.use_cache = cache;
  nq.query.refresh_at = std::move(refresh);
  nq.query.total_tokens = tokens;
  nq.query.num_cond_tokens = cond;
  nq.query.model_id_schedule = std::move(schedule);
  nq.query.guided_iters = last_iterations(K, guided_last);
  return nq;
}

}  // namespace

const std::vector<NamedQuery>& builtin_flops_queries() {
  static const std::vector<NamedQuery> queries = [] {
    const auto full12 = std::vector<int>(12, 1);
    const auto sched12 = repeat_schedule({8, 4, 2, 1}, 3);
    const auto sched16 = repeat_schedule({8, 4, 2, 1}, 4);
    std::vector<NamedQuery> q;
    q.push_back(make_query("imagenet-maskgit-8", "imagenet-8", true, 8, false, {}, 257, 0, std::vector<int>(8, 1), 0));
    q.push_back(make_query("imagenet-maskgitpp-12-g4", "imagenet-12", true, 12, false, {}, 257, 0, full12, 4));
    q.push_back(make_query("imagenet-magnets-12-g4", "imagenet-12", false, 12, true, {3, 6, 9}, 257, 0, sched12, 4));
    q.push_back(make_query("imagenet-maskgitpp-16-g6", "imagenet-16", true, 16, false, {}, 257, 0,
                           std::vector<int>(16, 1), 6));
    q.push_back(make_query("imagenet-magnets-16-g6", "imagenet-16", false, 16, true, {4, 8, 12}, 257, 0, sched16, 6));
    q.push_back(make_query("ucf101-magvit", "ucf101", true, 12, false, {}, 1025, 0, full12, 0));
    q.push_back(make_query("ucf101-magnets", "ucf101", false, 12, true, {3, 6, 9}, 1025, 0, sched12, 0));
    // The baseline re-processes the conditioning frames every iteration.
    q.push_back(make_query("k600-magvit", "k600", true, 12, false, {}, 1025, 0, full12, 0));
    q.push_back(make_query("k600-magvit-g2", "k600", false, 12, false, {}, 1025, 0, full12, 2));
    q.push_back(make_query("k600-magnets", "k600", false, 12, true, {3, 6, 9}, 1025, 512, sched12, 0));
    q.push_back(make_query("k600-magnets-g2", "k600", false, 12, true, {3, 6, 9}, 1025, 512, sched12, 2));
    return q;
  }();
  return queries;
}

std::optional<NamedQuery> find_builtin_flops_query(const std::string& name) {
  for (const auto& q : builtin_flops_queries()) {
    if (q.name == name) return q;
  }
  return std::nullopt;
}

std::vector<NamedQuery> cache_ablation_queries(int guidance_last_x) {
  const auto full = std::vector<int>(12, 1);
  const auto sched = repeat_schedule({8, 4, 2, 1}, 3);
  const std::vector<int> refresh{3, 6, 9};
  const int g = guidance_last_x;
  return {
      make_query("baseline", "ablation", true, 12, false, {}, 257, 0, full, g),
      make_query("baseline+cache", "ablation", false, 12, true, {}, 257, 0, full, g),
      make_query("baseline+cache+refresh", "ablation", false, 12, true, refresh, 257, 0, full, g),
      make_query("scheduled", "ablation", false, 12, false, {}, 257, 0, sched, g),
      make_query("scheduled+cache", "ablation", false, 12, true, {}, 257, 0, sched, g),
      make_query("scheduled+cache+refresh", "ablation", false, 12, true, refresh, 257, 0, sched, g),
  };
}

}  // namespace nestdecode
