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

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "nestdecode/checkpoint.hpp"
#include "nestdecode/decoder.hpp"
#include "nestdecode/errors.hpp"
#include "nestdecode/flops.hpp"
#include "nestdecode/reports.hpp"
#include "nestdecode/run_config.hpp"
#include "nestdecode/trainer.hpp"

namespace {

using namespace nestdecode;

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct CommonOptions {
  std::string config_path;
  std::string preset;
  std::vector<std::string> overrides;
  std::string output_dir;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("-c,--config", opts.config_path, "Run config file (INI sections)");
  cmd->add_option("-p,--preset", opts.preset, "Named preset applied after the config file");
  cmd->add_option("-s,--set", opts.overrides, "Override one value, section.key=value")->allow_extra_args(false);
  cmd->add_option("-o,--out", opts.output_dir, "Output directory");
}

RunConfig resolve(const CommonOptions& opts) {
  RunConfig config = opts.config_path.empty() ? RunConfig{} : load_config(opts.config_path);
  if (!opts.preset.empty()) apply_preset(config, opts.preset);
  for (const auto& o : opts.overrides) set_config_value(config, o);
  if (!opts.output_dir.empty()) config.output_dir = opts.output_dir;
  return config;
}

std::string prepare_output(const RunConfig& config, const std::string& command) {
  std::filesystem::create_directories(config.output_dir);
  write_text_file(config.output_dir + "/manifest.ini", "# command: " + command + "\n" + emit_config(config));
  return config.output_dir;
}

NestedWeights<float> load_weights(const RunConfig& config) {
  if (config.checkpoint.empty()) throw ConfigError("a checkpoint is required (--checkpoint or run.checkpoint)");
  return load_checkpoint(config.checkpoint, config.model).weights;
}

int cmd_train(const RunConfig& config) {
  config.validate();
  const std::string dir = prepare_output(config, "train");
  const SyntheticSource source = config.source();
  std::string log;
  auto result = train(config.model, config.trainer, source, [&](const TrainLogRecord& r) {
    const std::string line = format_log_record(r);
    std::puts(line.c_str());
    std::fflush(stdout);
    log += line + "\n";
  });
  write_text_file(dir + "/train_log.txt", log);
  CheckpointMeta meta{config.trainer.total_steps, config.trainer.total_steps, std::move(result.optimizer)};
  save_checkpoint(dir + "/checkpoint.ndck", result.weights, meta);
  std::printf("wrote %s/checkpoint.ndck\n", dir.c_str());
  return 0;
}

int cmd_generate(const RunConfig& config) {
  config.validate();
  const auto weights = load_weights(config);
  const std::string dir = prepare_output(config, "generate");
  const Generation gen = generate_grids(config, weights);
  write_text_file(dir + "/grids.csv", render_grids_csv(gen.grids, gen.class_ids));
  std::string traces;
  for (std::size_t i = 0; i < gen.traces.size(); ++i) {
    traces += fmt::format("# sample {}\n", i) + render_trace(gen.traces[i]);
  }
  write_text_file(dir + "/traces.txt", traces);
  const DensityMaps maps = unmask_density(gen.traces);
  write_text_file(dir + "/density.csv", render_density_csv(maps));
  write_text_file(dir + "/density.pgm", render_density_pgm(maps));
  std::printf("generated %d grids, mean source nll %.6f\n", config.sampler.count, source_nll(config.source(), gen));
  return 0;
}

int cmd_flops(const RunConfig& config) {
  const std::string dir = prepare_output(config, "flops");
  std::string text = "# model dims (layers, hidden, mlp, heads); S, B and XL are assumed shapes\n";
  for (const auto& d : builtin_model_dims()) {
    text += fmt::format("#   {} = ({}, {}, {}, {})\n", d.name, d.num_layers, d.hidden, d.mlp_dim, d.num_heads);
  }
  std::string csv = "group,query,gflops,gain,baseline\n";
  auto add_group = [&](const std::string& group, const std::vector<NamedQuery>& queries) {
    const auto rows = gain_report(queries);
    text += "\n" + render_gain_table(rows, "[" + group + "]");
    for (const auto& r : rows) {
      csv += fmt::format("{},{},{:.6f},{:.6f},{}\n", group, r.name, r.gflops, r.gain, r.baseline ? 1 : 0);
    }
  };
  std::vector<std::string> groups;
  for (const auto& q : builtin_flops_queries()) {
    if (std::find(groups.begin(), groups.end(), q.group) == groups.end()) groups.push_back(q.group);
  }
  for (const auto& g : groups) {
    std::vector<NamedQuery> queries;
    for (const auto& q : builtin_flops_queries()) {
      if (q.group == g) queries.push_back(q);
    }
    add_group(g, queries);
  }
  add_group("cache-ablation-g4", cache_ablation_queries(4));
  add_group("cache-ablation-unguided", cache_ablation_queries(0));

  NamedQuery user{"config", "config", config.flops_query(), false};
  try {
    user.query.validate();
    model_dims(user.query.version);
  } catch (const QueryError& e) {
    throw ConfigError(std::string("flops query: ") + e.what());
  }
  NamedQuery base = user;
  base.name = "config-baseline";
  base.baseline = true;
  base.query.use_cache = false;
  base.query.refresh_at.clear();
  base.query.num_cond_tokens = 0;
  base.query.model_id_schedule.assign(base.query.num_iters, 1);
  add_group("config", {base, user});

  write_text_file(dir + "/flops.txt", text);
  write_text_file(dir + "/flops.csv", csv);
  std::fputs(text.c_str(), stdout);
  return 0;
}

int cmd_sweep(const RunConfig& config, int iterations) {
  std::optional<NestedWeights<float>> weights;
  if (!config.checkpoint.empty()) {
    config.validate();
    weights = load_weights(config);
  }
  const std::string dir = prepare_output(config, "sweep");
  const auto rows = sweep(config, iterations, weights ? &*weights : nullptr);
  write_text_file(dir + "/sweep.csv", render_sweep_csv(rows));
  const std::string table = render_sweep_table(rows);
  write_text_file(dir + "/sweep.txt", table);
  std::fputs(table.c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nested-model parallel decoding toolkit"};
  app.require_subcommand(1);
  CommonOptions opts;
  std::string checkpoint;
  std::optional<int> class_id;
  std::optional<int> count;
  std::optional<std::uint64_t> seed;
  int iterations = 12;

  auto* train_cmd = app.add_subcommand("train", "Train the nested toy model on the synthetic source");
  add_common(train_cmd, opts);
  auto* gen_cmd = app.add_subcommand("generate", "Decode grids and write traces and density maps");
  add_common(gen_cmd, opts);
  gen_cmd->add_option("--checkpoint", checkpoint, "Checkpoint to decode with");
  gen_cmd->add_option("--class", class_id, "Class id to condition on");
  gen_cmd->add_option("--count", count, "Number of grids");
  gen_cmd->add_option("--seed", seed, "Sampler seed");
  auto* flops_cmd = app.add_subcommand("flops", "FLOPs reproduction suite plus the configured query");
  add_common(flops_cmd, opts);
  auto* sweep_cmd = app.add_subcommand("sweep", "Enumerate schedules and report their cost");
  add_common(sweep_cmd, opts);
  sweep_cmd->add_option("--checkpoint", checkpoint, "Checkpoint for the quality column");
  sweep_cmd->add_option("-k,--iterations", iterations, "Decoding iterations K")->check(CLI::Range(1, 64));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    RunConfig config = resolve(opts);
    if (!checkpoint.empty()) config.checkpoint = checkpoint;
    if (class_id) config.sampler.class_id = *class_id;
    if (count) config.sampler.count = *count;
    if (seed) config.sampler.seed = *seed;
    if (train_cmd->parsed()) return cmd_train(config);
    if (gen_cmd->parsed()) return cmd_generate(config);
    if (flops_cmd->parsed()) return cmd_flops(config);
    return cmd_sweep(config, iterations);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const QueryError& e) {
    std::fprintf(stderr, "query error: %s\n", e.what());
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return kExitConfig;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kExitNumeric;
  } catch (const TrainingError& e) {
    std::fprintf(stderr, "training error: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
