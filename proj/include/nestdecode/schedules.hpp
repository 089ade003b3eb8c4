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

// Decode-time scalar schedules: which sub-model runs at each iteration, how
// many tokens unmask, sampling temperature, guidance weighting, and the
// training-time loss interpolation weight.

#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "nestdecode/nested_transformer.hpp"

namespace nestdecode {

struct ScheduleEntry {
  int factor;
  int count;
  bool operator==(const ScheduleEntry&) const = default;
};

// Ordered (factor, iteration count) runs with total K.
struct DecodeSchedule {
  std::vector<ScheduleEntry> entries;
  int total_iterations = 0;

  // Per-iteration factors, length total_iterations when valid.
  std::vector<int> expand() const;
  // Literal form "8x3,4x3,2x3,1x3".
  std::string to_string() const;
  bool operator==(const DecodeSchedule&) const = default;
};

// Parses "8x3,4x3,2x3,1x3"; K is the sum of the counts.
DecodeSchedule parse_schedule(std::string_view literal);
DecodeSchedule uniform_schedule(int factor, int iterations);

// Throws ConfigError when counts do not sum to K, a count is negative, or a
// factor is not one of the model's downscale factors.
void validate_schedule(const DecodeSchedule& schedule, const NestedConfig& config);
void validate_schedule(const DecodeSchedule& schedule, const std::vector<int>& allowed_factors);

// True when p never increases along the expanded schedule (model size only grows).
bool is_scale_up(const DecodeSchedule& schedule);

// Iterations k > 0 at which the factor differs from iteration k - 1.
std::vector<int> switch_iterations(const DecodeSchedule& schedule);

// cos(pi/2 * k/K).
double mask_ratio(int k, int total_iterations);

// Tokens still masked after iteration k: floor(N * mask_ratio(k + 1, K)),
// forced to commit at least one token per iteration while any remain.
int masked_after(int k, int total_iterations, int num_tokens);
int unmask_count(int k, int total_iterations, int num_tokens);

// bias + scale * (1 - (k + 1) / K); ConfigError when not positive.
double sampling_temperature(int k, int total_iterations, double bias, double scale);

// Default guidance weight: 1 - mask_ratio.
double guidance_lambda(double mask_ratio);

// 1 - t/T, shared by all nested levels.
double alpha_decay(long long step, long long total_steps);

struct SamplerSchedule {
  double stemp_bias = 0.5;
  double stemp_scale = 0.8;
  double mask_temp = 5.0;
  double guidance_scale = 0.0;
  int guidance_last_x = 0;
  // Mask ratio -> guidance weight lambda.
  std::function<double(double)> lambda_fn = guidance_lambda;

  void validate(int total_iterations) const;
  bool guided(int k, int total_iterations) const {
    return guidance_last_x > 0 && k >= total_iterations - guidance_last_x;
  }
};

}  // namespace nestdecode
