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

#include "nestdecode/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "nestdecode/errors.hpp"
#include "nestdecode/schedules.hpp"

namespace nestdecode {

namespace {

int uniform_index(Rng& rng, int n) { return std::min(n - 1, static_cast<int>(rng.uniform() * n)); }

int sample_row(const double* probs, int n, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0;
  for (int i = 0; i < n; ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return n - 1;
}

template <typename T>
std::vector<Tensor<T>*> tensor_list(NestedWeights<T>& w) {
  std::vector<Tensor<T>*> out;
  w.for_each([&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
  return out;
}

}  // namespace

SyntheticSource::SyntheticSource(int num_classes, int vocab_size, int num_tokens, std::uint64_t seed,
                                 double logit_scale)
    : num_classes_(num_classes),
      vocab_size_(vocab_size),
      num_tokens_(num_tokens),
      seed_(seed),
      logit_scale_(logit_scale) {
  if (num_classes < 1 || vocab_size < 2 || num_tokens < 1) {
    throw ConfigError("synthetic source needs >= 1 class, >= 2 tokens and >= 1 position");
  }
  if (!(logit_scale > 0) || !std::isfinite(logit_scale)) throw ConfigError("logit_scale must be positive");
  const int V = vocab_size;
  const Rng root(seed);
  for (int c = 0; c < num_classes; ++c) {
    Rng rng = root.split(static_cast<std::uint64_t>(c));
    Tensor64 P({std::size_t(V), std::size_t(V)});
    for (int i = 0; i < V; ++i) {
      double mx = -1e300;
      for (int j = 0; j < V; ++j) {
        P.at(i, j) = logit_scale * rng.normal();
        mx = std::max(mx, P.at(i, j));
      }
      double sum = 0;
      for (int j = 0; j < V; ++j) {
        P.at(i, j) = std::exp(P.at(i, j) - mx);
        sum += P.at(i, j);
      }
      for (int j = 0; j < V; ++j) P.at(i, j) /= sum;
    }
    std::vector<std::vector<double>> pw(num_tokens + 1, std::vector<double>(std::size_t(V) * V, 0.0));
    for (int i = 0; i < V; ++i) pw[0][std::size_t(i) * V + i] = 1.0;
    for (int k = 1; k <= num_tokens; ++k) {
      kernels::gemm_acc(V, V, V, pw[k - 1].data(), V, P.raw(), V, pw[k].data(), V);
    }
    transitions_.push_back(std::move(P));
    powers_.push_back(std::move(pw));
  }
}

const Tensor64& SyntheticSource::transition(int class_id) const {
  if (class_id < 0 || class_id >= num_classes_) throw InputError("class id out of range");
  return transitions_[class_id];
}

const double* SyntheticSource::power(int class_id, int steps) const { return powers_[class_id][steps].data(); }

std::vector<int> SyntheticSource::sample(int class_id, Rng& rng) const {
  const Tensor64& P = transition(class_id);
  std::vector<int> out(num_tokens_);
  out[0] = uniform_index(rng, vocab_size_);
  for (int t = 1; t < num_tokens_; ++t) out[t] = sample_row(P.raw() + std::size_t(out[t - 1]) * vocab_size_, vocab_size_, rng);
  return out;
}

std::vector<double> SyntheticSource::posterior(int class_id, std::span<const int> tokens,
                                               std::span<const std::uint8_t> observed, int position) const {
  transition(class_id);
  const int N = num_tokens_;
  const int V = vocab_size_;
  if (static_cast<int>(tokens.size()) != N || static_cast<int>(observed.size()) != N) {
    throw DimensionError("posterior expects full-length token and observation vectors");
  }
  if (position < 0 || position >= N) throw InputError("posterior position out of range");
  int left = -1, right = -1;
  for (int i = position - 1; i >= 0; --i) {
    if (observed[i]) {
      left = i;
      break;
    }
  }
  for (int i = position + 1; i < N; ++i) {
    if (observed[i]) {
      right = i;
      break;
    }
  }
  std::vector<double> p(V, 0.0);
  if (left >= 0) {
    const double* Pk = power(class_id, position - left);
    for (int v = 0; v < V; ++v) p[v] = Pk[std::size_t(tokens[left]) * V + v];
  } else {
    const double* Pk = power(class_id, position);
    for (int u = 0; u < V; ++u) {
      for (int v = 0; v < V; ++v) p[v] += Pk[std::size_t(u) * V + v] / V;
    }
  }
  if (right >= 0) {
    const double* Pk = power(class_id, right - position);
    for (int v = 0; v < V; ++v) p[v] *= Pk[std::size_t(v) * V + tokens[right]];
  }
  double sum = 0;
  for (double x : p) sum += x;
  for (double& x : p) x /= sum;
  return p;
}

double SyntheticSource::log_likelihood(int class_id, std::span<const int> tokens) const {
  const Tensor64& P = transition(class_id);
  if (static_cast<int>(tokens.size()) != num_tokens_) throw DimensionError("log_likelihood expects a full grid");
  for (int t : tokens) {
    if (t < 0 || t >= vocab_size_) throw InputError("token id out of range");
  }
  double ll = -std::log(static_cast<double>(vocab_size_));
  for (int t = 1; t < num_tokens_; ++t) ll += std::log(P.at(tokens[t - 1], tokens[t]));
  return ll;
}

void Batch::validate(const NestedConfig& config) const {
  const std::size_t n = std::size_t(batch_size) * num_tokens;
  if (batch_size < 1 || num_tokens < 1 || tokens.size() != n || mask.size() != n ||
      class_ids.size() != std::size_t(batch_size) || dropped.size() != std::size_t(batch_size)) {
    throw DimensionError("inconsistent batch shapes");
  }
  if (num_tokens > config.max_positions) throw DimensionError("batch longer than max_positions");
  for (int t : tokens) {
    if (t < 0 || t >= config.vocab_size) throw InputError("batch token id out of range");
  }
  for (int c : class_ids) {
    if (c < 0 || c >= config.num_classes) throw InputError("batch class id out of range");
  }
  for (int b = 0; b < batch_size; ++b) {
    const auto first = mask.begin() + std::ptrdiff_t(b) * num_tokens;
    if (std::none_of(first, first + num_tokens, [](std::uint8_t m) { return m != 0; })) {
      throw InputError("every sample needs at least one masked position");
    }
  }
}

std::size_t Batch::masked_count() const {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
}

std::vector<TokenInput> Batch::inputs(const NestedConfig& config, int b) const {
  std::vector<TokenInput> out;
  out.reserve(num_tokens + 1);
  out.push_back(class_input(config, dropped[b] ? std::nullopt : std::optional<int>(class_ids[b])));
  for (int i = 0; i < num_tokens; ++i) {
    const std::size_t idx = std::size_t(b) * num_tokens + i;
    out.push_back({i + 1, mask[idx] ? config.mask_token_id() : tokens[idx]});
  }
  return out;
}

double training_mask_ratio(double u) { return std::cos(std::numbers::pi / 2 * u); }

std::vector<std::uint8_t> sample_training_mask(Rng& rng, int num_tokens) {
  if (num_tokens < 1) throw InputError("sample_training_mask needs N >= 1");
  const double ratio = training_mask_ratio(rng.uniform());
  const int count = std::clamp(static_cast<int>(std::ceil(ratio * num_tokens)), 1, num_tokens);
  std::vector<int> order(num_tokens);
  for (int i = 0; i < num_tokens; ++i) order[i] = i;
  std::vector<std::uint8_t> mask(num_tokens, 0);
  for (int i = 0; i < count; ++i) {
    const int j = i + uniform_index(rng, num_tokens - i);
    std::swap(order[i], order[j]);
    mask[order[i]] = 1;
  }
  return mask;
}

Batch make_batch(const SyntheticSource& source, int batch_size, double label_drop_prob, Rng& rng) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  Batch batch;
  batch.batch_size = batch_size;
  batch.num_tokens = source.num_tokens();
  for (int b = 0; b < batch_size; ++b) {
    const int c = uniform_index(rng, source.num_classes());
    const auto grid = source.sample(c, rng);
    const auto mask = sample_training_mask(rng, source.num_tokens());
    batch.class_ids.push_back(c);
    batch.tokens.insert(batch.tokens.end(), grid.begin(), grid.end());
    batch.mask.insert(batch.mask.end(), mask.begin(), mask.end());
    batch.dropped.push_back(rng.uniform() < label_drop_prob ? 1 : 0);
  }
  return batch;
}

std::string to_string(LossMode mode) {
  switch (mode) {
    case LossMode::gt_only: return "gt_only";
    case LossMode::distill_only: return "distill_only";
    case LossMode::gt_to_distill: return "gt_to_distill";
  }
  return "?";
}

LossMode parse_loss_mode(const std::string& text) {
  if (text == "gt_only") return LossMode::gt_only;
  if (text == "distill_only") return LossMode::distill_only;
  if (text == "gt_to_distill") return LossMode::gt_to_distill;
  throw ConfigError("unknown loss mode '" + text + "'");
}

void TrainConfig::validate() const {
  if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  if (!(label_drop_prob >= 0 && label_drop_prob <= 1)) throw ConfigError("label_drop_prob must lie in [0, 1]");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (eval_samples < 1) throw ConfigError("eval_samples must be >= 1");
}

double loss_alpha(LossMode mode, long long step, long long total_steps) {
  switch (mode) {
    case LossMode::gt_only: return 1.0;
    case LossMode::distill_only: return 0.0;
    case LossMode::gt_to_distill: return alpha_decay(step, total_steps);
  }
  return 1.0;
}

double learning_rate_at(const TrainConfig& config, long long step) {
  if (step < config.warmup_steps) return config.learning_rate * static_cast<double>(step + 1) / config.warmup_steps;
  const long long span = std::max<long long>(1, config.total_steps - config.warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - config.warmup_steps) / span);
  return config.learning_rate * 0.5 * (1 + std::cos(std::numbers::pi * progress));
}

template <typename T>
double masked_ce(const Tensor<T>& logits, std::span<const int> targets, std::span<const std::uint8_t> mask,
                 Tensor<T>* dlogits, double scale) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size() || mask.size() != targets.size()) {
    throw DimensionError("masked_ce shape mismatch: logits " + shape_string(logits.shape()));
  }
  const std::size_t rows = logits.dim(0);
  const std::size_t V = logits.dim(1);
  std::size_t count = 0;
  for (auto m : mask) count += m != 0;
  if (count == 0) throw InputError("masked_ce needs at least one masked position");
  if (dlogits != nullptr && dlogits->shape() != logits.shape()) *dlogits = Tensor<T>(logits.shape());
  double loss = 0;
  std::vector<double> p(V);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const int t = targets[r];
    if (t < 0 || std::size_t(t) >= V) throw InputError("masked_ce target out of range");
    const T* row = logits.raw() + r * V;
    double mx = row[0];
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, double(row[j]));
    double sum = 0;
    for (std::size_t j = 0; j < V; ++j) {
      p[j] = std::exp(double(row[j]) - mx);
      sum += p[j];
    }
    loss += std::log(sum) + mx - double(row[t]);
    if (dlogits != nullptr) {
      T* d = dlogits->raw() + r * V;
      const double g = scale / static_cast<double>(count);
      for (std::size_t j = 0; j < V; ++j) d[j] += static_cast<T>(g * (p[j] / sum - (int(j) == t ? 1.0 : 0.0)));
    }
  }
  return loss / static_cast<double>(count);
}

template <typename T>
double distill_ce(const Tensor<T>& student, const Tensor<T>& teacher, std::span<const std::uint8_t> mask,
                  Tensor<T>* dstudent, double scale) {
  if (student.rank() != 2 || student.shape() != teacher.shape() || mask.size() != student.dim(0)) {
    throw DimensionError("distill_ce shape mismatch: student " + shape_string(student.shape()) + " teacher " +
                         shape_string(teacher.shape()));
  }
  const std::size_t rows = student.dim(0);
  const std::size_t V = student.dim(1);
  std::size_t count = 0;
  for (auto m : mask) count += m != 0;
  if (count == 0) return 0.0;
  if (dstudent != nullptr && dstudent->shape() != student.shape()) *dstudent = Tensor<T>(student.shape());
  double loss = 0;
  std::vector<double> q(V), ls(V);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const T* tr = teacher.raw() + r * V;
    const T* sr = student.raw() + r * V;
    double tmx = tr[0], smx = sr[0];
    for (std::size_t j = 1; j < V; ++j) {
      tmx = std::max(tmx, double(tr[j]));
      smx = std::max(smx, double(sr[j]));
    }
    double tsum = 0, ssum = 0;
    for (std::size_t j = 0; j < V; ++j) {
      q[j] = std::exp(double(tr[j]) - tmx);
      tsum += q[j];
      ssum += std::exp(double(sr[j]) - smx);
    }
    const double lse = std::log(ssum) + smx;
    for (std::size_t j = 0; j < V; ++j) {
      q[j] /= tsum;
      ls[j] = double(sr[j]) - lse;
      loss -= q[j] * ls[j];
    }
    if (dstudent != nullptr) {
      T* d = dstudent->raw() + r * V;
      const double g = scale / static_cast<double>(count);
      for (std::size_t j = 0; j < V; ++j) d[j] += static_cast<T>(g * (std::exp(ls[j]) - q[j]));
    }
  }
  return loss / static_cast<double>(count);
}

namespace {

template <typename T>
struct LevelPass {
  Tensor<T> logits;  // [B * N, V]
  std::vector<ForwardTape<T>> tapes;
};

template <typename T>
LevelPass<T> run_level(const NestedWeights<T>& weights, const Batch& batch, int p, bool record) {
  const NestedConfig& cfg = weights.config;
  const SlicedView<T> view(weights, p);
  const KVCache<T> empty(cfg);
  const std::size_t V = cfg.vocab_size;
  const std::size_t N = batch.num_tokens;
  LevelPass<T> out;
  out.logits = Tensor<T>({std::size_t(batch.batch_size) * N, V});
  if (record) out.tapes.resize(batch.batch_size);
  for (int b = 0; b < batch.batch_size; ++b) {
    const auto inputs = batch.inputs(cfg, b);
    auto result = forward<T>(view, inputs, empty, record ? &out.tapes[b] : nullptr);
    std::copy(result.logits.data().begin(), result.logits.data().end(), out.logits.raw() + b * N * V);
  }
  return out;
}

template <typename T>
void backward_level(const NestedWeights<T>& weights, const Batch& batch, int p, const LevelPass<T>& pass,
                    const Tensor<T>& dlogits, NestedWeights<T>& grads) {
  const SlicedView<T> view(weights, p);
  const std::size_t V = weights.config.vocab_size;
  const std::size_t N = batch.num_tokens;
  Tensor<T> dl({N, V});
  for (int b = 0; b < batch.batch_size; ++b) {
    std::copy(dlogits.raw() + b * N * V, dlogits.raw() + (b + 1) * N * V, dl.raw());
    backward<T>(view, pass.tapes[b], dl, grads);
  }
}

}  // namespace

template <typename T>
Tensor<T> batch_logits(const NestedWeights<T>& weights, const Batch& batch, int p) {
  batch.validate(weights.config);
  return run_level(weights, batch, p, false).logits;
}

template <typename T>
LossBreakdown total_loss(const NestedWeights<T>& weights, const Batch& batch, double alpha, NestedWeights<T>* grads) {
  batch.validate(weights.config);
  const auto& factors = weights.config.downscale_factors;
  const std::size_t levels = factors.size();
  const bool record = grads != nullptr;
  std::vector<LevelPass<T>> passes;
  for (int p : factors) passes.push_back(run_level(weights, batch, p, record));

  LossBreakdown out;
  out.alpha = alpha;
  out.factors = factors;
  const double inv = 1.0 / static_cast<double>(levels);
  for (std::size_t i = 0; i < levels; ++i) {
    Tensor<T> dlogits;
    Tensor<T>* dptr = record ? &dlogits : nullptr;
    const double gt_weight = i == 0 ? 1.0 : alpha;
    const double gt = masked_ce(passes[i].logits, batch.tokens, batch.mask, dptr, gt_weight * inv);
    double dist = 0;
    if (i > 0) dist = distill_ce(passes[i].logits, passes[i - 1].logits, batch.mask, dptr, (1 - alpha) * inv);
    out.gt_ce.push_back(gt);
    out.distill_ce.push_back(dist);
    out.total += i == 0 ? gt * inv : (alpha * gt + (1 - alpha) * dist) * inv;
    if (record) backward_level(weights, batch, factors[i], passes[i], dlogits, *grads);
  }
  return out;
}

template <typename T>
double distill_loss(const NestedWeights<T>& weights, const Batch& batch, int student_p, int teacher_p,
                    NestedWeights<T>* grads) {
  batch.validate(weights.config);
  const bool record = grads != nullptr;
  const auto student = run_level(weights, batch, student_p, record);
  const auto teacher = run_level(weights, batch, teacher_p, false);
  Tensor<T> dlogits;
  const double loss = distill_ce(student.logits, teacher.logits, batch.mask, record ? &dlogits : nullptr, 1.0);
  if (record) backward_level(weights, batch, student_p, student, dlogits, *grads);
  return loss;
}

template <typename T>
AdamState<T> AdamState<T>::zeros(const NestedConfig& config) {
  return {NestedWeights<T>::zeros(config), NestedWeights<T>::zeros(config), 0};
}

template <typename T>
StepRecord train_step(NestedWeights<T>& weights, AdamState<T>& optimizer, const Batch& batch,
                      const TrainConfig& config) {
  const long long t = optimizer.step;
  const double alpha = loss_alpha(config.loss_mode, t, config.total_steps);
  auto grads = NestedWeights<T>::zeros(weights.config);
  StepRecord record;
  record.step = t;
  try {
    record.loss = total_loss(weights, batch, alpha, &grads);
  } catch (const NumericError& e) {
    throw TrainingError(fmt::format("non-finite values at step {} (alpha {:.6f}): {}", t, alpha, e.what()));
  }
  if (!std::isfinite(record.loss.total)) {
    throw TrainingError(fmt::format("non-finite loss at step {} (alpha {:.6f}, gt_ce[0] {})", t, alpha,
                                    record.loss.gt_ce.empty() ? 0.0 : record.loss.gt_ce[0]));
  }
  const double lr = learning_rate_at(config, t);
  record.learning_rate = lr;
  const double c1 = 1 - std::pow(config.beta1, double(t + 1));
  const double c2 = 1 - std::pow(config.beta2, double(t + 1));
  auto w = tensor_list(weights);
  auto g = tensor_list(grads);
  auto m = tensor_list(optimizer.m);
  auto v = tensor_list(optimizer.v);
  for (std::size_t k = 0; k < w.size(); ++k) {
    T* pw = w[k]->raw();
    const T* pg = g[k]->raw();
    T* pm = m[k]->raw();
    T* pv = v[k]->raw();
    for (std::size_t i = 0; i < w[k]->size(); ++i) {
      const double gi = pg[i];
      if (!std::isfinite(gi)) throw TrainingError(fmt::format("non-finite gradient at step {}", t));
      const double mi = config.beta1 * pm[i] + (1 - config.beta1) * gi;
      const double vi = config.beta2 * pv[i] + (1 - config.beta2) * gi * gi;
      pm[i] = static_cast<T>(mi);
      pv[i] = static_cast<T>(vi);
      pw[i] = static_cast<T>(pw[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + config.adam_eps));
    }
  }
  ++optimizer.step;
  return record;
}

namespace {

// Total loss with every distillation target held at `teachers`, the
// objective whose exact gradient total_loss reports under stop-gradient.
double frozen_teacher_loss(const NestedWeights<double>& weights, const Batch& batch, double alpha,
                           const std::vector<Tensor64>& teachers) {
  const auto& factors = weights.config.downscale_factors;
  const double inv = 1.0 / static_cast<double>(factors.size());
  double total = 0;
  for (std::size_t i = 0; i < factors.size(); ++i) {
    const auto logits = batch_logits(weights, batch, factors[i]);
    const double gt = masked_ce(logits, batch.tokens, batch.mask);
    if (i == 0) {
      total += gt * inv;
    } else {
      total += (alpha * gt + (1 - alpha) * distill_ce(logits, teachers[i - 1], batch.mask)) * inv;
    }
  }
  return total;
}

}  // namespace

GradCheckReport grad_check(const NestedWeights<double>& weights, const Batch& batch, double alpha, double epsilon,
                           int num_params, Rng& rng) {
  if (!(epsilon > 0)) throw ParameterError("epsilon must be positive");
  auto w = weights;
  auto grads = NestedWeights<double>::zeros(weights.config);
  total_loss(w, batch, alpha, &grads);
  std::vector<Tensor64> teachers;
  for (int p : weights.config.downscale_factors) teachers.push_back(batch_logits(w, batch, p));

  std::vector<std::string> names;
  w.for_each([&](const std::string& name, Tensor64&) { names.push_back(name); });
  auto tw = tensor_list(w);
  auto tg = tensor_list(grads);
  const int per_tensor = std::max(1, (num_params + int(tw.size()) - 1) / int(tw.size()));

  GradCheckReport report;
  for (std::size_t k = 0; k < tw.size(); ++k) {
    std::string family = names[k];
    if (family.rfind("layer", 0) == 0) family = family.substr(family.find('.') + 1);
    auto it = std::find_if(report.family_max.begin(), report.family_max.end(),
                           [&](const auto& e) { return e.first == family; });
    if (it == report.family_max.end()) {
      report.family_max.emplace_back(family, 0.0);
      it = report.family_max.end() - 1;
    }
    for (int s = 0; s < per_tensor; ++s) {
      const std::size_t i = static_cast<std::size_t>(uniform_index(rng, static_cast<int>(tw[k]->size())));
      const double saved = (*tw[k])[i];
      (*tw[k])[i] = saved + epsilon;
      const double up = frozen_teacher_loss(w, batch, alpha, teachers);
      (*tw[k])[i] = saved - epsilon;
      const double down = frozen_teacher_loss(w, batch, alpha, teachers);
      (*tw[k])[i] = saved;
      const double numeric = (up - down) / (2 * epsilon);
      const double analytic = (*tg[k])[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
      const double rel = std::abs(numeric - analytic) / denom;
      it->second = std::max(it->second, rel);
      report.max_rel_error = std::max(report.max_rel_error, rel);
      ++report.checked;
    }
  }
  return report;
}

EvalSet make_eval_set(const SyntheticSource& source, int samples, std::uint64_t seed) {
  Rng rng(seed);
  EvalSet eval;
  eval.batch = make_batch(source, samples, 0.0, rng);
  const int N = source.num_tokens();
  double nll = 0;
  std::size_t count = 0;
  for (int b = 0; b < samples; ++b) {
    std::span<const int> tokens(eval.batch.tokens.data() + std::size_t(b) * N, N);
    std::vector<std::uint8_t> observed(N);
    for (int i = 0; i < N; ++i) observed[i] = eval.batch.mask[std::size_t(b) * N + i] ? 0 : 1;
    for (int i = 0; i < N; ++i) {
      if (observed[i]) continue;
      const auto post = source.posterior(eval.batch.class_ids[b], tokens, observed, i);
      nll -= std::log(post[tokens[i]]);
      ++count;
    }
  }
  eval.oracle_nll = nll / static_cast<double>(count);
  return eval;
}

template <typename T>
double eval_nll(const NestedWeights<T>& weights, const EvalSet& eval, int p) {
  const auto logits = batch_logits(weights, eval.batch, p);
  return masked_ce<T>(logits, eval.batch.tokens, eval.batch.mask);
}

std::string format_log_record(const TrainLogRecord& r) {
  std::string out = fmt::format("step {} alpha {:.6f} lr {:.6f} loss {:.6f}", r.step, r.alpha, r.learning_rate,
                                r.loss.total);
  for (std::size_t i = 0; i < r.loss.factors.size(); ++i) out += fmt::format(" ce_p{} {:.6f}", r.loss.factors[i], r.loss.gt_ce[i]);
  for (std::size_t i = 1; i < r.loss.factors.size(); ++i) {
    out += fmt::format(" distill_p{} {:.6f}", r.loss.factors[i], r.loss.distill_ce[i]);
  }
  if (r.eval_nll) {
    for (std::size_t i = 0; i < r.eval_nll->size(); ++i) {
      out += fmt::format(" nll_p{} {:.6f}", r.loss.factors[i], (*r.eval_nll)[i]);
    }
    out += fmt::format(" oracle {:.6f}", r.oracle_nll);
  }
  return out;
}

TrainResult train(const NestedConfig& model, const TrainConfig& config, const SyntheticSource& source,
                  const std::function<void(const TrainLogRecord&)>& on_record) {
  model.validate();
  config.validate();
  if (source.vocab_size() != model.vocab_size || source.num_classes() != model.num_classes ||
      source.num_tokens() > model.max_positions) {
    throw ConfigError("synthetic source does not match the model config");
  }
  const Rng root(config.seed);
  Rng init_rng = root.split(1);
  Rng data_rng = root.split(2);
  const EvalSet eval = make_eval_set(source, config.eval_samples, root.split(3).next_u64());

  TrainResult result{init_weights<float>(model, init_rng), AdamState<float>::zeros(model), {}, {}, eval.oracle_nll};
  auto evaluate = [&] {
    std::vector<double> nll;
    for (int p : model.downscale_factors) nll.push_back(eval_nll(result.weights, eval, p));
    return nll;
  };
  for (long long t = 0; t < config.total_steps; ++t) {
    const Batch batch = make_batch(source, config.batch_size, config.label_drop_prob, data_rng);
    const StepRecord step = train_step(result.weights, result.optimizer, batch, config);
    const bool last = t + 1 == config.total_steps;
    if (t % config.eval_every == 0 || last) {
      TrainLogRecord rec{step.step, step.loss.alpha, step.learning_rate, step.loss, evaluate(), eval.oracle_nll};
      if (last) rec.step = config.total_steps;
      if (last) result.final_nll = *rec.eval_nll;
      if (on_record) on_record(rec);
      result.log.push_back(std::move(rec));
    }
  }
  return result;
}

#define NESTDECODE_INSTANTIATE(T)                                                                                  \
  template double masked_ce<T>(const Tensor<T>&, std::span<const int>, std::span<const std::uint8_t>, Tensor<T>*, \
                               double);                                                                            \
  template double distill_ce<T>(const Tensor<T>&, const Tensor<T>&, std::span<const std::uint8_t>, Tensor<T>*,    \
                                double);                                                                           \
  template Tensor<T> batch_logits<T>(const NestedWeights<T>&, const Batch&, int);                                  \
  template LossBreakdown total_loss<T>(const NestedWeights<T>&, const Batch&, double, NestedWeights<T>*);          \
  template double distill_loss<T>(const NestedWeights<T>&, const Batch&, int, int, NestedWeights<T>*);             \
  template struct AdamState<T>;                                                                                    \
  template StepRecord train_step<T>(NestedWeights<T>&, AdamState<T>&, const Batch&, const TrainConfig&);          \
  template double eval_nll<T>(const NestedWeights<T>&, const EvalSet&, int);

NESTDECODE_INSTANTIATE(float)
NESTDECODE_INSTANTIATE(double)
#undef NESTDECODE_INSTANTIATE

}  // namespace nestdecode
