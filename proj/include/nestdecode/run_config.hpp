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

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "nestdecode/decoder.hpp"
#include "nestdecode/flops.hpp"
#include "nestdecode/nested_transformer.hpp"
#include "nestdecode/trainer.hpp"

namespace nestdecode {

struct DataSettings {
  int frames = 1;
  int rows = 4;
  int cols = 4;
  std::uint64_t source_seed = 7;
  double logit_scale = 2.0;
  bool operator==(const DataSettings&) const = default;
};

struct SamplerSettings {
  std::string schedule = "8x3,4x3,2x3,1x3";
  Variant variant = Variant::magnets;
  double guidance_scale = 0;
  double mask_temp = 5;
  double stemp_bias = 0.5;
  double stemp_scale = 0.8;
  int guidance_last_x = 0;
  std::uint64_t seed = 0;
  CachePolicy cache_policy = CachePolicy::cache_refresh;
  RecacheTiming recache_timing = RecacheTiming::lagged;
  std::vector<int> refresh_at;
  int class_id = 0;
  int count = 8;
  // Leading grid cells fixed to a source sample before decoding.
  int cond_cells = 0;
  bool operator==(const SamplerSettings&) const = default;
};

struct FlopsSettings {
  std::string version = "L";
  std::string schedule = "8x3,4x3,2x3,1x3";
  bool use_cache = true;
  std::vector<int> refresh_at{3, 6, 9};
  int total_tokens = 257;
  int num_cond_tokens = 0;
  int guidance_last_x = 4;
  bool operator==(const FlopsSettings&) const = default;
};

struct RunConfig {
  std::string preset;
  NestedConfig model;
  DataSettings data;
  SamplerSettings sampler;
  TrainConfig trainer;
  FlopsSettings flops;
  std::string output_dir = "out";
  std::string checkpoint;

  void validate() const;
  Geometry geometry() const;
  SyntheticSource source() const;
  DecodeSchedule schedule() const;
  SamplerConfig sampler_config() const;
  FlopsQuery flops_query() const;

  bool operator==(const RunConfig&) const = default;
};

std::string emit_config(const RunConfig& config);
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::string& path);

// Applies one "section.key=value" override.
void set_config_value(RunConfig& config, const std::string& assignment);

const std::vector<std::string>& preset_names();
void apply_preset(RunConfig& config, const std::string& name);

}  // namespace nestdecode
