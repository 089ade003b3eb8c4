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

// Inference compute accountant. get_flops / get_total_flops are literal
// translations of the reference Python accounting routine (including its
// quirks: the attention term ignores the downscale factor, and the number of
// processed tokens is a real-valued cosine count).

#include <optional>
#include <string>
#include <vector>

namespace nestdecode {

struct ModelDims {
  std::string name;
  int num_layers = 0;
  int hidden = 0;
  int mlp_dim = 0;
  int num_heads = 0;

  void validate() const;
  bool operator==(const ModelDims&) const = default;
};

// S, B, L, XL. Only L is pinned by a published compute figure; the others are
// standard encoder shapes chosen to match the published parameter counts.
const std::vector<ModelDims>& builtin_model_dims();
ModelDims model_dims(const std::string& name);

// GFLOPs of one forward over `num_processed` tokens attending to
// `num_processed + num_cached` keys at downscale factor p.
double get_flops(double num_cached, double num_processed, int p, const ModelDims& dims);

struct FlopsQuery {
  std::string version = "L";
  int num_iters = 12;
  bool use_cache = false;
  std::vector<int> refresh_at;
  int total_tokens = 257;  // grid tokens + class token
  int num_cond_tokens = 0;
  std::vector<int> model_id_schedule;  // per-iteration downscale factor
  std::vector<int> guided_iters;       // iterations whose cost doubles

  void validate() const;
  bool operator==(const FlopsQuery&) const = default;
};

// Iterations K-x .. K-1.
std::vector<int> last_iterations(int total_iterations, int x);

struct FlopsIteration {
  int iteration = 0;
  int factor = 1;
  bool full_pass = false;
  bool guided = false;
  double processed = 0;  // tokens fed through the model
  double cached = 0;     // keys served from cache (conditioning included)
  double gflops = 0;     // after guidance doubling
};

std::vector<FlopsIteration> flops_breakdown(const FlopsQuery& query, const ModelDims& dims);
double get_total_flops(const FlopsQuery& query, const ModelDims& dims);
double get_total_flops(const FlopsQuery& query);

struct NamedQuery {
  std::string name;
  std::string group;
  FlopsQuery query;
  bool baseline = false;
};

struct GainRow {
  std::string name;
  double gflops = 0;
  double gain = 0;  // baseline gflops / row gflops
  bool baseline = false;
};

// Exactly one query must be marked baseline.
std::vector<GainRow> gain_report(const std::vector<NamedQuery>& queries);
std::string render_gain_table(const std::vector<GainRow>& rows, const std::string& title = "");
std::string render_gain_csv(const std::vector<GainRow>& rows);

// Named reproduction queries (imagenet-maskgit-8, imagenet-maskgitpp-12-g4,
// imagenet-magnets-12-g4, ucf101-magnets, k600-magnets-g2, ...).
const std::vector<NamedQuery>& builtin_flops_queries();
std::optional<NamedQuery> find_builtin_flops_query(const std::string& name);

// Caching ablation at K=12 / 257 tokens with a 3-3-3-3 scale-up schedule and
// refresh at the model switches. `guidance_last_x` applies to every row.
std::vector<NamedQuery> cache_ablation_queries(int guidance_last_x);

}  // namespace nestdecode
