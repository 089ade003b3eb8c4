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

#include "nestdecode/schedules.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <numbers>

namespace nestdecode {
namespace {

int parse_int(std::string_view s, std::string_view literal) {
  int value = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, value);
  if (ec != std::errc() || ptr != end || s.empty()) {
    throw ConfigError("bad schedule literal '" + std::string(literal) + "'");
  }
  return value;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

std::vector<int> DecodeSchedule::expand() const {
  std::vector<int> out;
  for (const auto& e : entries) {
    for (int i = 0; i < e.count; ++i) out.push_back(e.factor);
  }
  return out;
}

std::string DecodeSchedule::to_string() const {
  std::string s;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(entries[i].factor) + "x" + std::to_string(entries[i].count);
  }
  return s;
}

DecodeSchedule parse_schedule(std::string_view literal) {
  DecodeSchedule s;
  std::string_view rest = trim(literal);
  if (rest.empty()) throw ConfigError("empty schedule literal");
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    const std::string_view item = trim(rest.substr(0, comma));
    rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    const auto x = item.find('x');
    if (x == std::string_view::npos) throw ConfigError("bad schedule literal '" + std::string(literal) + "'");
    ScheduleEntry e{parse_int(trim(item.substr(0, x)), literal), parse_int(trim(item.substr(x + 1)), literal)};
    if (e.count < 0) throw ConfigError("negative iteration count in schedule");
    s.entries.push_back(e);
    s.total_iterations += e.count;
  }
  return s;
}

DecodeSchedule uniform_schedule(int factor, int iterations) {
  return DecodeSchedule{{{factor, iterations}}, iterations};
}

void validate_schedule(const DecodeSchedule& schedule, const std::vector<int>& allowed) {
  if (schedule.total_iterations < 1) throw ConfigError("schedule needs K >= 1");
  int sum = 0;
  for (const auto& e : schedule.entries) {
    if (e.count < 0) throw ConfigError("negative iteration count in schedule");
    if (std::find(allowed.begin(), allowed.end(), e.factor) == allowed.end()) {
      throw ConfigError("schedule uses unknown downscale factor " + std::to_string(e.factor));
    }
    sum += e.count;
  }
  if (sum != schedule.total_iterations) {
    throw ConfigError("schedule counts sum to " + std::to_string(sum) + ", expected K = " +
                      std::to_string(schedule.total_iterations));
  }
}

void validate_schedule(const DecodeSchedule& schedule, const NestedConfig& config) {
  validate_schedule(schedule, config.downscale_factors);
}

bool is_scale_up(const DecodeSchedule& schedule) {
  const auto f = schedule.expand();
  return std::is_sorted(f.begin(), f.end(), std::greater<>());
}

std::vector<int> switch_iterations(const DecodeSchedule& schedule) {
  const auto f = schedule.expand();
  std::vector<int> out;
  for (std::size_t k = 1; k < f.size(); ++k) {
    if (f[k] != f[k - 1]) out.push_back(static_cast<int>(k));
  }
  return out;
}

double mask_ratio(int k, int total_iterations) {
  const double ratio = static_cast<double>(k) / total_iterations;
  return std::cos(std::numbers::pi / 2.0 * ratio);
}

int masked_after(int k, int total_iterations, int num_tokens) {
  int masked = num_tokens;
  for (int i = 0; i <= k; ++i) {
    int next = i == total_iterations - 1
                   ? 0
                   : static_cast<int>(std::floor(num_tokens * mask_ratio(i + 1, total_iterations)));
    next = masked > 0 ? std::min(next, masked - 1) : 0;
    masked = std::max(next, 0);
  }
  return masked;
}

int unmask_count(int k, int total_iterations, int num_tokens) {
  const int before = k == 0 ? num_tokens : masked_after(k - 1, total_iterations, num_tokens);
  return before - masked_after(k, total_iterations, num_tokens);
}

double sampling_temperature(int k, int total_iterations, double bias, double scale) {
  const double t = bias + scale * (1.0 - static_cast<double>(k + 1) / total_iterations);
  if (!(t > 0)) throw ConfigError("sampling temperature must stay positive (got " + std::to_string(t) + ")");
  return t;
}

double guidance_lambda(double mask_ratio) { return 1.0 - mask_ratio; }

double alpha_decay(long long step, long long total_steps) {
  if (total_steps <= 0) return 0.0;
  return 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
}

void SamplerSchedule::validate(int total_iterations) const {
  if (guidance_last_x < 0 || guidance_last_x > total_iterations) {
    throw ConfigError("guidance_last_x must lie in [0, K]");
  }
  if (mask_temp < 0) throw ConfigError("mask temperature must be nonnegative");
  for (int k = 0; k < total_iterations; ++k) sampling_temperature(k, total_iterations, stemp_bias, stemp_scale);
  if (!lambda_fn) throw ConfigError("guidance lambda hook is empty");
}

}  // namespace nestdecode
