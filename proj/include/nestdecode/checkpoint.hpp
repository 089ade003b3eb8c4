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
#include <optional>
#include <string>
#include <vector>

#include "nestdecode/nested_transformer.hpp"
#include "nestdecode/trainer.hpp"

namespace nestdecode {

// Little-endian layout:
//   "NDCK" u32 version
//   config: i32 fields, i32 factor count, i32 factors
//   meta: i64 step, i64 total_steps, u8 has_optimizer, i64 optimizer step
//   u32 crc32 of every preceding byte
//   u32 tensor count, then per tensor:
//     u32 name length, name, u32 rank, u64 dims, f32 payload,
//     u32 crc32 of name, shape and payload
// Optimizer moments follow the weights as "adam.m.<name>" / "adam.v.<name>".
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  long long step = 0;
  long long total_steps = 0;
  std::optional<AdamState<float>> optimizer;
};

struct Checkpoint {
  NestedWeights<float> weights;
  CheckpointMeta meta;
};

std::vector<std::uint8_t> serialize_checkpoint(const NestedWeights<float>& weights, const CheckpointMeta& meta);
// Throws CheckpointError; with `expected`, a differing config is rejected
// before any tensor is read.
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes,
                                  const std::optional<NestedConfig>& expected = std::nullopt);

void save_checkpoint(const std::string& path, const NestedWeights<float>& weights, const CheckpointMeta& meta);
Checkpoint load_checkpoint(const std::string& path, const std::optional<NestedConfig>& expected = std::nullopt);

// Replaces `weights` (and `meta` when given) only if the whole file loads.
void load_checkpoint_into(const std::string& path, NestedWeights<float>& weights, CheckpointMeta* meta = nullptr);

}  // namespace nestdecode
