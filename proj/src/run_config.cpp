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

#include "nestdecode/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include <fmt/format.h>

#include "nestdecode/errors.hpp"
#include "nestdecode/schedules.hpp"

namespace nestdecode {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <typename N>
N parse_number(const std::string& text, const std::string& key) {
  N value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError("invalid value '" + text + "' for " + key);
  }
  return value;
}

bool parse_bool(const std::string& text, const std::string& key) {
  if (text == "true") return true;
  if (text == "false") return false;
  throw ConfigError("invalid boolean '" + text + "' for " + key + " (expected true or false)");
}

std::vector<int> parse_int_list(const std::string& text, const std::string& key) {
  std::vector<int> out;
  if (text.empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(trim(item), key));
  return out;
}

std::string join(const std::vector<int>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? "," : "") + std::to_string(values[i]);
  return out;
}

std::string fmt_double(double v) { return fmt::format("{}", v); }

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename M>
Field int_field(std::string section, std::string key, M member) {
  const std::string name = section + "." + key;
  return {section, key, [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); },
          [member, name](RunConfig& c, const std::string& v) {
            auto& ref = member(c);
            ref = parse_number<std::remove_reference_t<decltype(ref)>>(v, name);
          }};
}

template <typename M>
Field double_field(std::string section, std::string key, M member) {
  const std::string name = section + "." + key;
  return {section, key, [member](const RunConfig& c) { return fmt_double(member(const_cast<RunConfig&>(c))); },
          [member, name](RunConfig& c, const std::string& v) { member(c) = parse_number<double>(v, name); }};
}

template <typename M>
Field bool_field(std::string section, std::string key, M member) {
  const std::string name = section + "." + key;
  return {section, key, [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)) ? "true" : "false"; },
          [member, name](RunConfig& c, const std::string& v) { member(c) = parse_bool(v, name); }};
}

template <typename M>
Field list_field(std::string section, std::string key, M member) {
  const std::string name = section + "." + key;
  return {section, key, [member](const RunConfig& c) { return join(member(const_cast<RunConfig&>(c))); },
          [member, name](RunConfig& c, const std::string& v) { member(c) = parse_int_list(v, name); }};
}

template <typename M>
Field string_field(std::string section, std::string key, M member) {
  return {section, key, [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); },
          [member](RunConfig& c, const std::string& v) { member(c) = v; }};
}

#define F(expr) [](RunConfig& c) -> auto& { return expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      string_field("run", "preset", F(c.preset)),
      string_field("run", "output_dir", F(c.output_dir)),
      string_field("run", "checkpoint", F(c.checkpoint)),
      int_field("model", "num_layers", F(c.model.num_layers)),
      int_field("model", "hidden", F(c.model.hidden)),
      int_field("model", "mlp_dim", F(c.model.mlp_dim)),
      int_field("model", "num_heads", F(c.model.num_heads)),
      int_field("model", "head_dim", F(c.model.head_dim)),
      int_field("model", "vocab_size", F(c.model.vocab_size)),
      int_field("model", "num_classes", F(c.model.num_classes)),
      int_field("model", "max_positions", F(c.model.max_positions)),
      list_field("model", "downscale_factors", F(c.model.downscale_factors)),
      int_field("data", "frames", F(c.data.frames)),
      int_field("data", "rows", F(c.data.rows)),
      int_field("data", "cols", F(c.data.cols)),
      int_field("data", "source_seed", F(c.data.source_seed)),
      double_field("data", "logit_scale", F(c.data.logit_scale)),
      string_field("sampler", "schedule", F(c.sampler.schedule)),
      {"sampler", "variant", [](const RunConfig& c) { return to_string(c.sampler.variant); },
       [](RunConfig& c, const std::string& v) { c.sampler.variant = parse_variant(v); }},
      double_field("sampler", "guidance_scale", F(c.sampler.guidance_scale)),
      double_field("sampler", "mask_temp", F(c.sampler.mask_temp)),
      double_field("sampler", "stemp_bias", F(c.sampler.stemp_bias)),
      double_field("sampler", "stemp_scale", F(c.sampler.stemp_scale)),
      int_field("sampler", "guidance_last_x", F(c.sampler.guidance_last_x)),
      int_field("sampler", "seed", F(c.sampler.seed)),
      {"sampler", "cache_policy", [](const RunConfig& c) { return to_string(c.sampler.cache_policy); },
       [](RunConfig& c, const std::string& v) { c.sampler.cache_policy = parse_cache_policy(v); }},
      {"sampler", "recache_timing", [](const RunConfig& c) { return to_string(c.sampler.recache_timing); },
       [](RunConfig& c, const std::string& v) { c.sampler.recache_timing = parse_recache_timing(v); }},
      list_field("sampler", "refresh_at", F(c.sampler.refresh_at)),
      int_field("sampler", "class_id", F(c.sampler.class_id)),
      int_field("sampler", "count", F(c.sampler.count)),
      int_field("sampler", "cond_cells", F(c.sampler.cond_cells)),
      int_field("trainer", "total_steps", F(c.trainer.total_steps)),
      int_field("trainer", "batch_size", F(c.trainer.batch_size)),
      double_field("trainer", "learning_rate", F(c.trainer.learning_rate)),
      double_field("trainer", "beta1", F(c.trainer.beta1)),
      double_field("trainer", "beta2", F(c.trainer.beta2)),
      double_field("trainer", "adam_eps", F(c.trainer.adam_eps)),
      int_field("trainer", "warmup_steps", F(c.trainer.warmup_steps)),
      double_field("trainer", "label_drop_prob", F(c.trainer.label_drop_prob)),
      {"trainer", "loss_mode", [](const RunConfig& c) { return to_string(c.trainer.loss_mode); },
       [](RunConfig& c, const std::string& v) { c.trainer.loss_mode = parse_loss_mode(v); }},
      int_field("trainer", "seed", F(c.trainer.seed)),
      int_field("trainer", "eval_every", F(c.trainer.eval_every)),
      int_field("trainer", "eval_samples", F(c.trainer.eval_samples)),
      string_field("flops", "version", F(c.flops.version)),
      string_field("flops", "schedule", F(c.flops.schedule)),
      bool_field("flops", "use_cache", F(c.flops.use_cache)),
      list_field("flops", "refresh_at", F(c.flops.refresh_at)),
      int_field("flops", "total_tokens", F(c.flops.total_tokens)),
      int_field("flops", "num_cond_tokens", F(c.flops.num_cond_tokens)),
      int_field("flops", "guidance_last_x", F(c.flops.guidance_last_x)),
  };
  return table;
}

#undef F

const Field& find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields()) {
    if (f.section == section && f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + section + "." + key + "'");
}

void set_field(RunConfig& config, const std::string& section, const std::string& key, const std::string& value) {
  const Field& f = find_field(section, key);
  try {
    f.set(config, value);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

struct Preset {
  std::string name;
  std::string schedule;
  Variant variant;
  double guidance_scale;
  double mask_temp;
  int guidance_last_x;
  CachePolicy cache_policy;
  int cond_cells;
};

const std::vector<Preset>& presets() {
  static const std::vector<Preset> table{
      {"imagenet-maskgit-8", "1x8", Variant::baseline, 0, 6, 0, CachePolicy::none, 0},
      {"imagenet-maskgitpp-12-g4", "1x12", Variant::baseline, 65, 6, 4, CachePolicy::none, 0},
      {"imagenet-maskgitpp-16-g6", "1x16", Variant::baseline, 65, 6, 6, CachePolicy::none, 0},
      {"imagenet-magnets-12-g4", "8x3,4x3,2x3,1x3", Variant::magnets, 65, 5, 4, CachePolicy::cache_refresh, 0},
      {"imagenet-magnets-16-g6", "8x4,4x4,2x4,1x4", Variant::magnets, 65, 5, 6, CachePolicy::cache_refresh, 0},
      {"ucf101-magvit", "1x12", Variant::baseline, 0, 5, 0, CachePolicy::none, 0},
      {"ucf101-magnets", "8x3,4x3,2x3,1x3", Variant::magnets, 0, 5, 0, CachePolicy::cache_refresh, 0},
      {"k600-magvit", "1x12", Variant::baseline, 10, 12.5, 0, CachePolicy::none, 4},
      {"k600-magvit-g2", "1x12", Variant::baseline, 10, 12.5, 2, CachePolicy::none, 4},
      {"k600-magnets", "8x3,4x3,2x3,1x3", Variant::magnets, 5, 10, 0, CachePolicy::cache_refresh, 4},
      {"k600-magnets-g2", "8x3,4x3,2x3,1x3", Variant::magnets, 5, 10, 2, CachePolicy::cache_refresh, 4},
  };
  return table;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  trainer.validate();
  if (data.frames < 1 || data.rows < 1 || data.cols < 1) throw ConfigError("grid geometry must be positive");
  if (geometry().size() > model.max_positions) {
    throw ConfigError(fmt::format("grid of {} cells exceeds model.max_positions {}", geometry().size(),
                                  model.max_positions));
  }
  if (!(data.logit_scale > 0)) throw ConfigError("data.logit_scale must be positive");
  const DecodeSchedule s = schedule();
  validate_schedule(s, model);
  if (s.total_iterations > geometry().size()) {
    throw ConfigError("sampler.schedule has more iterations than grid cells");
  }
  sampler_config().sampler.validate(s.total_iterations);
  if (sampler.class_id < 0 || sampler.class_id >= model.num_classes) throw ConfigError("sampler.class_id out of range");
  if (sampler.count < 1) throw ConfigError("sampler.count must be >= 1");
  if (sampler.cond_cells < 0 || geometry().size() - sampler.cond_cells < s.total_iterations) {
    throw ConfigError("sampler.cond_cells must leave at least K cells to generate");
  }
  for (int r : sampler.refresh_at) {
    if (r < 1 || r >= s.total_iterations) throw ConfigError("sampler.refresh_at entries must lie in [1, K)");
  }
  if (output_dir.empty()) throw ConfigError("run.output_dir must not be empty");
  try {
    flops_query().validate();
    model_dims(flops.version);
  } catch (const QueryError& e) {
    throw ConfigError(std::string("flops: ") + e.what());
  }
}

Geometry RunConfig::geometry() const { return {data.frames, data.rows, data.cols}; }

SyntheticSource RunConfig::source() const {
  return SyntheticSource(model.num_classes, model.vocab_size, geometry().size(), data.source_seed, data.logit_scale);
}

DecodeSchedule RunConfig::schedule() const { return parse_schedule(sampler.schedule); }

SamplerConfig RunConfig::sampler_config() const {
  SamplerConfig c;
  c.sampler.stemp_bias = sampler.stemp_bias;
  c.sampler.stemp_scale = sampler.stemp_scale;
  c.sampler.mask_temp = sampler.mask_temp;
  c.sampler.guidance_scale = sampler.guidance_scale;
  c.sampler.guidance_last_x = sampler.guidance_last_x;
  c.seed = sampler.seed;
  c.variant = sampler.variant;
  c.cache_policy = sampler.cache_policy;
  c.recache_timing = sampler.recache_timing;
  c.refresh_at = sampler.refresh_at;
  return c;
}

FlopsQuery RunConfig::flops_query() const {
  FlopsQuery q;
  q.version = flops.version;
  const DecodeSchedule s = parse_schedule(flops.schedule);
  q.num_iters = s.total_iterations;
  q.model_id_schedule = s.expand();
  q.use_cache = flops.use_cache;
  q.refresh_at = flops.refresh_at;
  q.total_tokens = flops.total_tokens;
  q.num_cond_tokens = flops.num_cond_tokens;
  q.guided_iters = last_iterations(q.num_iters, flops.guidance_last_x);
  return q;
}

std::string emit_config(const RunConfig& config) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(config) + "\n";
  }
  return out;
}

RunConfig parse_config(std::string_view text) {
  RunConfig config;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(fmt::format("line {}: malformed section header", line_no));
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(fmt::format("line {}: expected key = value", line_no));
    if (section.empty()) throw ConfigError(fmt::format("line {}: key outside of a section", line_no));
    set_field(config, section, trim(std::string_view(line).substr(0, eq)), trim(std::string_view(line).substr(eq + 1)));
  }
  return config;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void set_config_value(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + assignment + "' must look like section.key=value");
  }
  set_field(config, trim(std::string_view(assignment).substr(0, dot)),
            trim(std::string_view(assignment).substr(dot + 1, eq - dot - 1)),
            trim(std::string_view(assignment).substr(eq + 1)));
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& p : presets()) out.push_back(p.name);
    return out;
  }();
  return names;
}

void apply_preset(RunConfig& config, const std::string& name) {
  for (const auto& p : presets()) {
    if (p.name != name) continue;
    const auto query = find_builtin_flops_query(name);
    config.preset = name;
    config.sampler.schedule = p.schedule;
    config.sampler.variant = p.variant;
    config.sampler.guidance_scale = p.guidance_scale;
    config.sampler.mask_temp = p.mask_temp;
    config.sampler.guidance_last_x = p.guidance_last_x;
    config.sampler.cache_policy = p.cache_policy;
    config.sampler.refresh_at.clear();
    config.sampler.cond_cells = p.cond_cells;
    const FlopsQuery& q = query->query;
    config.flops.version = q.version;
    config.flops.schedule = parse_schedule(p.schedule).to_string();
    config.flops.use_cache = q.use_cache;
    config.flops.refresh_at = q.refresh_at;
    config.flops.total_tokens = q.total_tokens;
    config.flops.num_cond_tokens = q.num_cond_tokens;
    config.flops.guidance_last_x = static_cast<int>(q.guided_iters.size());
    return;
  }
  std::string known;
  for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
}

}  // namespace nestdecode
