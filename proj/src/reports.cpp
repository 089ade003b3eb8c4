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

#include "nestdecode/reports.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>

#include <fmt/format.h>

#include "nestdecode/errors.hpp"

namespace nestdecode {

std::string render_trace(const DecodeTrace& trace) {
  std::string out = "# k p processed cached uncond_processed uncond_cached refresh guided committed\n";
  for (const auto& it : trace.iterations) {
    std::string cells;
    for (std::size_t i = 0; i < it.committed.size(); ++i) cells += (i ? "," : "") + std::to_string(it.committed[i]);
    out += fmt::format("{} {} {} {} {} {} {} {} {}\n", it.iteration, it.factor, it.processed, it.cached,
                       it.uncond_processed, it.uncond_cached, it.refresh ? 1 : 0, it.guided ? 1 : 0,
                       cells.empty() ? "-" : cells);
  }
  return out;
}

std::string render_grids_csv(std::span<const TokenGrid> grids, std::span<const int> class_ids) {
  if (grids.size() != class_ids.size()) throw DimensionError("one class id per grid expected");
  std::string out = "sample,class,frame,row,col,token\n";
  for (std::size_t s = 0; s < grids.size(); ++s) {
    const Geometry& g = grids[s].geometry;
    for (int c = 0; c < g.size(); ++c) {
      out += fmt::format("{},{},{},{},{},{}\n", s, class_ids[s], c / (g.rows * g.cols), (c / g.cols) % g.rows,
                         c % g.cols, grids[s].tokens[c]);
    }
  }
  return out;
}

std::string render_density_csv(const DensityMaps& maps) {
  const Geometry& g = maps.geometry;
  std::string out = "iteration,frame,row,col,density\n";
  for (int k = 0; k < maps.total_iterations; ++k) {
    for (int c = 0; c < g.size(); ++c) {
      out += fmt::format("{},{},{},{},{:.6f}\n", k, c / (g.rows * g.cols), (c / g.cols) % g.rows, c % g.cols,
                         maps.density[k][c]);
    }
  }
  return out;
}

std::string render_density_pgm(const DensityMaps& maps) {
  const Geometry& g = maps.geometry;
  const int K = maps.total_iterations;
  const int width = K * g.cols + (K - 1);
  const int height = g.frames * g.rows + (g.frames - 1);
  std::vector<int> pixels(std::size_t(width) * height, 0);
  for (int k = 0; k < K; ++k) {
    const double mx = *std::max_element(maps.density[k].begin(), maps.density[k].end());
    for (int c = 0; c < g.size(); ++c) {
      const int f = c / (g.rows * g.cols);
      const int y = f * (g.rows + 1) + (c / g.cols) % g.rows;
      const int x = k * (g.cols + 1) + c % g.cols;
      pixels[std::size_t(y) * width + x] = mx > 0 ? static_cast<int>(std::lround(255.0 * maps.density[k][c] / mx)) : 0;
    }
  }
  std::string out = fmt::format("P2\n{} {}\n255\n", width, height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) out += fmt::format("{}{}", x ? " " : "", pixels[std::size_t(y) * width + x]);
    out += "\n";
  }
  return out;
}

Generation generate_grids(const RunConfig& config, const NestedWeights<float>& weights) {
  config.validate();
  if (!(weights.config == config.model)) throw ConfigError("weights do not match the configured model");
  const SyntheticSource source = config.source();
  const DecodeSchedule schedule = config.schedule();
  const Rng cond_root = Rng(config.sampler.seed).split(0x636f6e64);
  Generation out;
  for (int i = 0; i < config.sampler.count; ++i) {
    SamplerConfig sc = config.sampler_config();
    if (config.sampler.cond_cells > 0) {
      Rng rng = cond_root.split(static_cast<std::uint64_t>(i));
      const auto grid = source.sample(config.sampler.class_id, rng);
      for (int c = 0; c < config.sampler.cond_cells; ++c) sc.conditioning.push_back({c, grid[c]});
    }
    auto [grid, trace] = decode<float>(weights, schedule, sc, config.sampler.class_id, config.geometry(),
                                       static_cast<std::uint64_t>(i));
    out.class_ids.push_back(config.sampler.class_id);
    out.grids.push_back(std::move(grid));
    out.traces.push_back(std::move(trace));
  }
  return out;
}

double source_nll(const SyntheticSource& source, const Generation& generation) {
  if (generation.grids.empty()) throw InputError("no grids to score");
  double total = 0;
  for (std::size_t i = 0; i < generation.grids.size(); ++i) {
    total -= source.log_likelihood(generation.class_ids[i], generation.grids[i].tokens);
  }
  return total / (static_cast<double>(generation.grids.size()) * source.num_tokens());
}

std::string to_string(SweepOrder order) { return order == SweepOrder::scale_up ? "scale_up" : "scale_down"; }

std::vector<DecodeSchedule> enumerate_schedules(int total_iterations, SweepOrder order, const std::vector<int>& factors) {
  if (total_iterations < 1) throw ConfigError("sweep needs K >= 1");
  if (factors.empty()) throw ConfigError("sweep needs at least one factor");
  std::vector<int> f = factors;
  std::sort(f.begin(), f.end());
  if (order == SweepOrder::scale_up) std::reverse(f.begin(), f.end());
  std::vector<DecodeSchedule> out;
  std::vector<int> counts(f.size(), 0);
  std::function<void(std::size_t, int)> rec = [&](std::size_t i, int left) {
    if (i + 1 == f.size()) {
      counts[i] = left;
      DecodeSchedule s;
      s.total_iterations = total_iterations;
      for (std::size_t j = 0; j < f.size(); ++j) {
        if (counts[j] > 0) s.entries.push_back({f[j], counts[j]});
      }
      out.push_back(std::move(s));
      return;
    }
    for (int c = left; c >= 0; --c) {
      counts[i] = c;
      rec(i + 1, left - c);
    }
  };
  rec(0, total_iterations);
  return out;
}

FlopsQuery sweep_query(const DecodeSchedule& schedule, const FlopsSettings& flops) {
  FlopsQuery q;
  q.version = flops.version;
  q.num_iters = schedule.total_iterations;
  q.model_id_schedule = schedule.expand();
  q.use_cache = flops.use_cache;
  if (flops.use_cache) q.refresh_at = switch_iterations(schedule);
  q.total_tokens = flops.total_tokens;
  q.num_cond_tokens = flops.num_cond_tokens;
  q.guided_iters = last_iterations(q.num_iters, std::min(flops.guidance_last_x, q.num_iters));
  return q;
}

std::vector<SweepRow> sweep(const RunConfig& config, int total_iterations, const NestedWeights<float>* weights) {
  FlopsSettings base_settings = config.flops;
  base_settings.use_cache = false;
  const double baseline = get_total_flops(sweep_query(uniform_schedule(1, total_iterations), base_settings));
  std::optional<SyntheticSource> source;
  if (weights != nullptr) source = config.source();
  std::vector<SweepRow> rows;
  for (SweepOrder order : {SweepOrder::scale_up, SweepOrder::scale_down}) {
    for (auto& s : enumerate_schedules(total_iterations, order, config.model.downscale_factors)) {
      SweepRow row;
      row.order = order;
      row.gflops = get_total_flops(sweep_query(s, config.flops));
      row.gain = baseline / row.gflops;
      if (weights != nullptr) {
        RunConfig run = config;
        run.sampler.schedule = s.to_string();
        run.sampler.refresh_at.clear();
        run.sampler.guidance_last_x = std::min(run.sampler.guidance_last_x, total_iterations);
        row.nll = source_nll(*source, generate_grids(run, *weights));
      }
      row.schedule = std::move(s);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string render_sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "order,schedule,gflops,gain,nll\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{:.6f},{:.6f},{}\n", to_string(r.order), r.schedule.to_string(), r.gflops, r.gain,
                       r.nll ? fmt::format("{:.6f}", *r.nll) : "");
  }
  return out;
}

std::string render_sweep_table(const std::vector<SweepRow>& rows) {
  std::string out = fmt::format("{:<11} {:<24} {:>12} {:>8} {:>10}\n", "order", "schedule", "gflops", "gain", "nll");
  for (const auto& r : rows) {
    out += fmt::format("{:<11} {:<24} {:>12.3f} {:>7.3f}x {:>10}\n", to_string(r.order), r.schedule.to_string(),
                       r.gflops, r.gain, r.nll ? fmt::format("{:.4f}", *r.nll) : "-");
  }
  return out;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << content;
  if (!out) throw Error("failed writing '" + path + "'");
}

}  // namespace nestdecode
