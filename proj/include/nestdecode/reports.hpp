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

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nestdecode/decoder.hpp"
#include "nestdecode/flops.hpp"
#include "nestdecode/run_config.hpp"

namespace nestdecode {

// One line per iteration:
// "k p processed cached uncond_processed uncond_cached refresh guided committed"
std::string render_trace(const DecodeTrace& trace);

// "sample,class,frame,row,col,token"
std::string render_grids_csv(std::span<const TokenGrid> grids, std::span<const int> class_ids);

// "iteration,frame,row,col,density", six decimals.
std::string render_density_csv(const DensityMaps& maps);

// Plain (P2) PGM montage: iterations left to right, frames top to bottom,
// one-pixel black gutters, each iteration scaled to its own maximum.
std::string render_density_pgm(const DensityMaps& maps);

struct Generation {
  std::vector<int> class_ids;
  std::vector<TokenGrid> grids;
  std::vector<DecodeTrace> traces;
};

// Decodes sampler.count grids; sample i uses decoder stream i. Leading
// sampler.cond_cells cells are copied from a source sample.
Generation generate_grids(const RunConfig& config, const NestedWeights<float>& weights);

// Mean per-token NLL of the grids under the synthetic source.
double source_nll(const SyntheticSource& source, const Generation& generation);

enum class SweepOrder { scale_up, scale_down };
std::string to_string(SweepOrder order);

// Every (k1..kn) >= 0 with sum K over `factors` (largest first for scale-up);
// zero counts are dropped from the schedule.
std::vector<DecodeSchedule> enumerate_schedules(int total_iterations, SweepOrder order,
                                                const std::vector<int>& factors = {1, 2, 4, 8});

struct SweepRow {
  SweepOrder order = SweepOrder::scale_up;
  DecodeSchedule schedule;
  double gflops = 0;
  double gain = 0;
  std::optional<double> nll;
};

// Refreshes at every model switch when flops.use_cache is set; the baseline is
// the full model at every iteration without caching.
FlopsQuery sweep_query(const DecodeSchedule& schedule, const FlopsSettings& flops);

std::vector<SweepRow> sweep(const RunConfig& config, int total_iterations, const NestedWeights<float>* weights);
std::string render_sweep_csv(const std::vector<SweepRow>& rows);
std::string render_sweep_table(const std::vector<SweepRow>& rows);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace nestdecode
