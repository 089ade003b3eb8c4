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

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <set>
#include <sstream>

#include <fmt/core.h>

#include "nestdecode/decoder.hpp"
#include "nestdecode/errors.hpp"
#include "nestdecode/flops.hpp"
#include "nestdecode/reports.hpp"
#include "nestdecode/run_config.hpp"
#include "nestdecode/trainer.hpp"

namespace nestdecode {
namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

bool within(double value, double target, double tolerance) {
  return std::abs(value - target) <= tolerance * std::abs(target);
}

double builtin_gflops(const std::string& name) {
  return get_total_flops(find_builtin_flops_query(name)->query);
}

Outcome check_values(const std::vector<std::pair<std::string, double>>& expected, double tolerance) {
  Outcome out;
  for (const auto& [name, target] : expected) {
    const double v = builtin_gflops(name);
    const bool ok = within(v, target, tolerance);
    out.pass &= ok;
    out.detail += fmt::format("{}{} {:.1f} vs {:.0f}{}", out.detail.empty() ? "" : "; ", name, v, target, ok ? "" : " (out)");
  }
  return out;
}

Outcome criterion1() {
  const auto start = Clock::now();
  Outcome out = check_values({{"imagenet-maskgit-8", 647},
                              {"imagenet-maskgitpp-12-g4", 1300},
                              {"imagenet-maskgitpp-16-g6", 1800},
                              {"imagenet-magnets-12-g4", 490},
                              {"imagenet-magnets-16-g6", 608}},
                             0.05);
  const double elapsed = seconds_since(start);
  out.pass &= elapsed < 1.0;
  out.detail += fmt::format("; {:.3f} s", elapsed);
  return out;
}

std::vector<double> ablation_gains(int guidance_last_x) {
  std::vector<double> gains;
  for (const auto& row : gain_report(cache_ablation_queries(guidance_last_x))) gains.push_back(row.gain);
  return gains;
}

Outcome criterion2() {
  const std::vector<double> expected{1.0, 1.3, 1.2, 2.1, 3.5, 3.0};
  const auto guided = ablation_gains(4);
  const auto unguided = ablation_gains(0);
  Outcome out;
  std::string g, u;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    out.pass &= within(guided[i], expected[i], 0.10);
    g += fmt::format("{}{:.3f}/{:.1f}", i ? " " : "", guided[i], expected[i]);
    u += fmt::format("{}{:.3f}", i ? " " : "", unguided[i]);
  }
  out.detail = fmt::format("g4 gains {}; without guidance {}", g, u);
  return out;
}

Outcome criterion3() {
  return check_values({{"ucf101-magvit", 4300},
                       {"ucf101-magnets", 1700},
                       {"k600-magvit-g2", 5100},
                       {"k600-magnets", 1200},
                       {"k600-magnets-g2", 1400}},
                      0.15);
}

Outcome criterion4() {
  const double g12 = builtin_gflops("imagenet-maskgitpp-12-g4") / builtin_gflops("imagenet-magnets-12-g4");
  const double g16 = builtin_gflops("imagenet-maskgitpp-16-g6") / builtin_gflops("imagenet-magnets-16-g6");
  Outcome out;
  out.pass = within(g12, 2.65, 0.05) && within(g16, 2.9, 0.05);
  out.detail = fmt::format("12-step gain {:.3f} vs 2.65, 16-step gain {:.3f} vs 2.9", g12, g16);
  return out;
}

struct TrainedModels {
  TrainResult distilled;
  TrainResult gt_only;
  double distilled_seconds = 0;
  double gt_only_seconds = 0;
};

const TrainedModels& trained_models() {
  static const TrainedModels models = [] {
    const RunConfig rc;
    const SyntheticSource source = rc.source();
    TrainConfig tc = rc.trainer;
    tc.eval_samples = 512;
    TrainedModels m;
    auto start = Clock::now();
    tc.loss_mode = LossMode::gt_to_distill;
    m.distilled = train(rc.model, tc, source);
    m.distilled_seconds = seconds_since(start);
    start = Clock::now();
    tc.loss_mode = LossMode::gt_only;
    m.gt_only = train(rc.model, tc, source);
    m.gt_only_seconds = seconds_since(start);
    return m;
  }();
  return models;
}

Outcome criterion5() {
  const auto& w = trained_models().distilled.weights;
  const auto start = Clock::now();
  RunConfig rc;
  rc.sampler.guidance_scale = 3;
  rc.sampler.guidance_last_x = 4;
  const Geometry geometry = rc.geometry();
  const DecodeSchedule schedule = rc.schedule();
  const int K = schedule.total_iterations;
  const int runs = 100;

  int a_ok = 0;
  SamplerConfig every = rc.sampler_config();
  every.cache_policy = CachePolicy::cache_refresh;
  every.refresh_at.clear();
  for (int k = 1; k < K; ++k) every.refresh_at.push_back(k);
  SamplerConfig plain = rc.sampler_config();
  plain.cache_policy = CachePolicy::none;
  for (int s = 0; s < runs; ++s) {
    Decoder<float> a(w, schedule, every, s % 4, geometry, static_cast<std::uint64_t>(s));
    Decoder<float> b(w, schedule, plain, s % 4, geometry, static_cast<std::uint64_t>(s));
    bool same = true;
    while (!a.done()) {
      a.step();
      b.step();
      same &= a.last_logits() == b.last_logits() && a.grid().tokens == b.grid().tokens;
    }
    a_ok += same;
  }

  int b_ok = 0;
  SamplerConfig zero_window = rc.sampler_config();
  zero_window.sampler.guidance_last_x = 0;
  zero_window.sampler.guidance_scale = 65;
  SamplerConfig unguided = rc.sampler_config();
  unguided.sampler.guidance_last_x = 0;
  unguided.sampler.guidance_scale = 0;
  for (int s = 0; s < runs; ++s) {
    Decoder<float> a(w, schedule, zero_window, s % 4, geometry, static_cast<std::uint64_t>(s));
    Decoder<float> b(w, schedule, unguided, s % 4, geometry, static_cast<std::uint64_t>(s));
    bool same = true;
    while (!a.done()) {
      a.step();
      b.step();
      same &= a.last_logits() == b.last_logits() && a.grid().tokens == b.grid().tokens;
    }
    b_ok += same;
  }

  int c_runs = 0, c_ok = 0;
  for (const char* literal : {"1x12", "8x3,4x3,2x3,1x3", "2x6,1x6"}) {
    for (auto policy : {CachePolicy::none, CachePolicy::cache, CachePolicy::cache_refresh}) {
      for (auto timing : {RecacheTiming::lagged, RecacheTiming::immediate}) {
        for (int guidance : {0, 4}) {
          SamplerConfig sc = rc.sampler_config();
          sc.cache_policy = policy;
          sc.recache_timing = timing;
          sc.sampler.guidance_last_x = guidance;
          for (int s = 0; s < 10; ++s) {
            Decoder<float> dec(w, parse_schedule(literal), sc, s % 4, geometry, static_cast<std::uint64_t>(s));
            std::vector<int> prev = dec.grid().tokens;
            bool stable = true;
            while (!dec.done()) {
              dec.step();
              for (std::size_t c = 0; c < prev.size(); ++c) {
                stable &= prev[c] == dec.grid().mask_id || prev[c] == dec.grid().tokens[c];
              }
              prev = dec.grid().tokens;
            }
            stable &= dec.grid().masked_count() == 0;
            ++c_runs;
            c_ok += stable;
          }
        }
      }
    }
  }
  const double elapsed = seconds_since(start);
  Outcome out;
  out.pass = a_ok == runs && b_ok == runs && c_ok == c_runs && elapsed < 60;
  out.detail = fmt::format("(a) {}/{} bit-exact, (b) {}/{} bit-exact, (c) {}/{} stable; {:.1f} s", a_ok, runs, b_ok,
                           runs, c_ok, c_runs, elapsed);
  return out;
}

bool same_tensors(const NestedWeights<float>& a, const NestedWeights<float>& b) {
  std::vector<const Tensor32*> ta, tb;
  a.for_each([&](const std::string&, const Tensor32& t) { ta.push_back(&t); });
  b.for_each([&](const std::string&, const Tensor32& t) { tb.push_back(&t); });
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (!(*ta[i] == *tb[i])) return false;
  }
  return true;
}

Outcome criterion6() {
  const auto& w = trained_models().distilled.weights;
  const NestedConfig& cfg = w.config;
  Rng rng(77);
  int exact = 0, total = 0;
  for (int trial = 0; trial < 8; ++trial) {
    std::vector<TokenInput> inputs{class_input(cfg, trial % 2 ? std::optional<int>(trial % 4) : std::nullopt)};
    for (int pos = 1; pos <= cfg.max_positions; ++pos) {
      const bool masked = rng.uniform() < 0.5;
      inputs.push_back({pos, masked ? cfg.mask_token_id() : static_cast<int>(rng.next_u64() % cfg.vocab_size)});
    }
    for (int p : cfg.downscale_factors) {
      const auto standalone = extract_standalone(w, p);
      const KVCache<float> empty_view(cfg), empty_standalone(standalone.config);
      const auto a = forward(slice_view(w, p), inputs, empty_view);
      const auto b = forward(slice_view(standalone, 1), inputs, empty_standalone);
      exact += a.logits == b.logits;
      ++total;
      if (p == 1) {
        exact += same_tensors(standalone, w);
        ++total;
      }
    }
  }
  const bool single_copy = w.parameter_count() == parameter_count(cfg);
  bool nested_counts = true;
  for (int p : cfg.downscale_factors) nested_counts &= sliced_parameter_count(cfg, p) <= parameter_count(cfg);
  Outcome out;
  out.pass = exact == total && single_copy && nested_counts;
  out.detail = fmt::format("{}/{} bit-exact comparisons; stored parameters {} = full model {}", exact, total,
                           w.parameter_count(), parameter_count(cfg));
  return out;
}

Outcome criterion7() {
  const auto start = Clock::now();
  const RunConfig rc;
  const SyntheticSource source = rc.source();
  const auto w = cast_weights<double>(trained_models().distilled.weights);
  Rng data(31);
  const Batch batch = make_batch(source, 4, 0.25, data);
  Outcome out;
  std::set<std::string> families;
  for (double alpha : {1.0, 0.0, 0.5}) {
    Rng rng(32);
    const auto report = grad_check(w, batch, alpha, 1e-4, 300, rng);
    for (const auto& f : report.family_max) families.insert(f.first);
    out.pass &= report.max_rel_error <= 1e-4 && report.checked >= 200;
    out.detail += fmt::format("alpha {:.1f}: {:.2e} over {}; ", alpha, report.max_rel_error, report.checked);
  }
  out.pass &= families.size() == 15;

  std::size_t teacher_only = 0, nonzero = 0;
  const auto& factors = w.config.downscale_factors;
  for (std::size_t i = 1; i < factors.size(); ++i) {
    auto grads = NestedWeights<double>::zeros(w.config);
    distill_loss(w, batch, factors[i], factors[i - 1], &grads);
    const auto view = slice_view(w, factors[i]);
    std::set<int> columns;
    for (int c = 0; c < view.kv_width(); ++c) columns.insert(view.physical_head_column(c));
    const int mlp = w.config.mlp_dim / factors[i];
    for (const auto& L : grads.layers) {
      for (std::size_t r = 0; r < L.wq.dim(0); ++r) {
        for (std::size_t c = 0; c < L.wq.dim(1); ++c) {
          if (columns.count(static_cast<int>(c))) continue;
          teacher_only += 4;
          nonzero += (L.wq.at(r, c) != 0) + (L.wk.at(r, c) != 0) + (L.wv.at(r, c) != 0) + (L.wo.at(c, r) != 0);
        }
        for (int c = mlp; c < w.config.mlp_dim; ++c) {
          teacher_only += 2;
          nonzero += (L.w_up.at(r, c) != 0) + (L.w_down.at(c, r) != 0);
        }
      }
    }
  }
  const double elapsed = seconds_since(start);
  out.pass &= nonzero == 0 && teacher_only > 0 && elapsed < 120;
  out.detail += fmt::format("{} families; teacher-only gradient entries nonzero {}/{}; {:.1f} s", families.size(), nonzero,
                            teacher_only, elapsed);
  return out;
}

Outcome criterion8() {
  const auto& m = trained_models();
  const auto& d = m.distilled.final_nll;
  const auto& g = m.gt_only.final_nll;
  const double oracle = m.distilled.oracle_nll;
  const bool a = d[0] <= 1.15 * oracle;
  bool b = true;
  for (std::size_t i = 1; i < d.size(); ++i) b &= d[i - 1] <= d[i];
  const bool c = d.back() <= g.back() * 1.02;
  const double elapsed = m.distilled_seconds + m.gt_only_seconds;
  Outcome out;
  out.pass = a && b && c && elapsed < 900;
  out.detail = fmt::format(
      "(a) {} full NLL {:.4f} vs oracle {:.4f} (+{:.1f}%); (b) {} levels {:.4f} {:.4f} {:.4f} {:.4f}; (c) {} p=8 {:.4f} vs "
      "gt-only {:.4f}; {} steps each, {:.0f} s",
      a ? "ok" : "fail", d[0], oracle, 100 * (d[0] / oracle - 1), b ? "ok" : "fail", d[0], d[1], d[2], d[3],
      c ? "ok" : "fail", d.back(), g.back(), RunConfig{}.trainer.total_steps, elapsed);
  return out;
}

Outcome criterion9() {
  RunConfig rc;
  apply_preset(rc, "imagenet-magnets-12-g4");
  rc.data.rows = 16;
  rc.data.cols = 16;
  rc.model.num_layers = 1;
  rc.model.max_positions = 256;
  rc.validate();
  Rng rng(5);
  const auto w = init_weights<float>(rc.model, rng);
  const auto trace =
      decode<float>(w, rc.schedule(), rc.sampler_config(), rc.sampler.class_id, rc.geometry(), 0).second;
  const auto rows = flops_breakdown(rc.flops_query(), model_dims(rc.flops.version));
  Outcome out;
  double worst = 0;
  if (rows.size() != trace.iterations.size()) {
    out.pass = false;
    out.detail = "iteration counts differ";
    return out;
  }
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto& it = trace.iterations[k];
    worst = std::max({worst, std::abs(it.processed - rows[k].processed), std::abs(it.cached - rows[k].cached)});
    out.pass &= it.guided == rows[k].guided;
  }
  out.pass &= worst <= 1.0;
  out.detail = fmt::format("max per-iteration difference {:.3f} tokens over {} iterations", worst, rows.size());
  return out;
}

Outcome criterion10() {
  RunConfig rc;
  rc.sampler.count = 1024;
  const auto generation = generate_grids(rc, trained_models().distilled.weights);
  const DensityMaps maps = unmask_density(generation.traces);
  const int cells = maps.geometry.size();
  const int K = maps.total_iterations;
  int exact = 0;
  for (int c = 0; c < cells; ++c) {
    double sum = 0;
    for (int k = 0; k < K; ++k) sum += maps.density[k][c];
    exact += sum == 1.0;
  }
  const std::string csv = render_density_csv(maps);
  const std::string pgm = render_density_pgm(maps);
  std::istringstream pin(pgm);
  std::string magic;
  int width = 0, height = 0, maxval = 0;
  pin >> magic >> width >> height >> maxval;
  bool pgm_ok = magic == "P2" && width == K * maps.geometry.cols + K - 1 &&
                height == maps.geometry.frames * maps.geometry.rows + maps.geometry.frames - 1 && maxval == 255;
  int pixels = 0, value = 0;
  while (pin >> value) {
    pgm_ok &= value >= 0 && value <= 255;
    ++pixels;
  }
  pgm_ok &= pixels == width * height;
  const bool csv_ok = csv.rfind("iteration,frame,row,col,density\n", 0) == 0 &&
                      std::count(csv.begin(), csv.end(), '\n') == K * cells + 1;

  DensityMaps golden;
  golden.geometry = Geometry{2, 1, 2};
  golden.total_iterations = 2;
  golden.runs = 4;
  golden.density = {{1.0, 0.5, 0.25, 0.0}, {0.0, 0.5, 0.75, 1.0}};
  const bool golden_ok =
      render_density_pgm(golden) == "P2\n5 3\n255\n255 128 0 0 128\n0 0 0 0 0\n64 0 0 191 255\n" &&
      render_density_csv(golden) ==
          "iteration,frame,row,col,density\n0,0,0,0,1.000000\n0,0,0,1,0.500000\n0,1,0,0,0.250000\n0,1,0,1,0.000000\n"
          "1,0,0,0,0.000000\n1,0,0,1,0.500000\n1,1,0,0,0.750000\n1,1,0,1,1.000000\n";
  Outcome out;
  out.pass = maps.runs >= 1000 && exact == cells && pgm_ok && csv_ok && golden_ok;
  out.detail = fmt::format("{} decodes; {}/{} cells sum to exactly 1; PGM {} CSV {} golden {}", maps.runs, exact, cells,
                           pgm_ok ? "ok" : "bad", csv_ok ? "ok" : "bad", golden_ok ? "ok" : "bad");
  return out;
}

}  // namespace
}  // namespace nestdecode

int main() {
  using namespace nestdecode;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"flops table reproduction", criterion1},  {"cache ablation gains", criterion2},
      {"video flops", criterion3},               {"headline compute gain", criterion4},
      {"cache equivalence", criterion5},         {"nested slicing", criterion6},
      {"gradient check", criterion7},            {"toy training", criterion8},
      {"decoder vs accountant", criterion9},     {"unmask density", criterion10},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    failures += !out.pass;
    fmt::print("criterion {:>2} {} {}: {}\n", i + 1, out.pass ? "PASS" : "FAIL", criteria[i].first, out.detail);
    std::fflush(stdout);
  }
  fmt::print("{} of {} criteria passed\n", criteria.size() - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
