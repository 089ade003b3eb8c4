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
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nestdecode/nested_transformer.hpp"
#include "nestdecode/numerics.hpp"

namespace nestdecode {

// Class-conditional first-order Markov chain over grid positions in raster
// order. The first token is drawn from a uniform distribution.
class SyntheticSource {
 public:
  SyntheticSource(int num_classes, int vocab_size, int num_tokens, std::uint64_t seed, double logit_scale = 2.0);

  int num_classes() const { return num_classes_; }
  int vocab_size() const { return vocab_size_; }
  int num_tokens() const { return num_tokens_; }
  std::uint64_t seed() const { return seed_; }
  double logit_scale() const { return logit_scale_; }

  // Row-stochastic [V, V] transition matrix of one class.
  const Tensor64& transition(int class_id) const;

  std::vector<int> sample(int class_id, Rng& rng) const;

  // Exact distribution of the token at `position` given the class and every
  // position with observed[i] != 0.
  std::vector<double> posterior(int class_id, std::span<const int> tokens, std::span<const std::uint8_t> observed,
                                int position) const;

  double log_likelihood(int class_id, std::span<const int> tokens) const;

 private:
  const double* power(int class_id, int steps) const;

  int num_classes_;
  int vocab_size_;
  int num_tokens_;
  std::uint64_t seed_;
  double logit_scale_;
  std::vector<Tensor64> transitions_;
  // powers_[c][k] = P_c^k, k in [0, N].
  std::vector<std::vector<std::vector<double>>> powers_;
};

struct Batch {
  int batch_size = 0;
  int num_tokens = 0;
  std::vector<int> tokens;           // [B, N]
  std::vector<int> class_ids;        // [B]
  std::vector<std::uint8_t> mask;    // [B, N], 1 = masked
  std::vector<std::uint8_t> dropped; // [B], 1 = class replaced by the null token

  void validate(const NestedConfig& config) const;
  std::size_t masked_count() const;
  // Model inputs of one sample: class slot then every grid position.
  std::vector<TokenInput> inputs(const NestedConfig& config, int b) const;
};

// Cosine-transformed uniform ratio; at least one position is masked.
std::vector<std::uint8_t> sample_training_mask(Rng& rng, int num_tokens);
double training_mask_ratio(double u);

Batch make_batch(const SyntheticSource& source, int batch_size, double label_drop_prob, Rng& rng);

enum class LossMode { gt_only, distill_only, gt_to_distill };
std::string to_string(LossMode mode);
LossMode parse_loss_mode(const std::string& text);

struct TrainConfig {
  long long total_steps = 5000;
  int batch_size = 32;
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int warmup_steps = 100;
  double label_drop_prob = 0.1;
  LossMode loss_mode = LossMode::gt_to_distill;
  std::uint64_t seed = 0;
  int eval_every = 500;
  int eval_samples = 256;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

double loss_alpha(LossMode mode, long long step, long long total_steps);
// Linear warmup then cosine decay to zero.
double learning_rate_at(const TrainConfig& config, long long step);

// Rows of `logits` ([rows, V]) with mask[r] != 0 contribute; the loss is their
// mean cross-entropy. `dlogits`, when given, receives scale * dLoss/dlogits.
template <typename T>
double masked_ce(const Tensor<T>& logits, std::span<const int> targets, std::span<const std::uint8_t> mask,
                 Tensor<T>* dlogits = nullptr, double scale = 1.0);

// Cross-entropy against softmax(teacher). The teacher receives no gradient.
template <typename T>
double distill_ce(const Tensor<T>& student, const Tensor<T>& teacher, std::span<const std::uint8_t> mask,
                  Tensor<T>* dstudent = nullptr, double scale = 1.0);

struct LossBreakdown {
  double total = 0;
  double alpha = 0;
  std::vector<int> factors;        // ascending, full model first
  std::vector<double> gt_ce;       // per level
  std::vector<double> distill_ce;  // per level, 0 for the full model
};

// Logits of the whole batch for one level, [B * N, V].
template <typename T>
Tensor<T> batch_logits(const NestedWeights<T>& weights, const Batch& batch, int p);

// Joint loss over every nested level; each level's teacher is the next
// larger level. Gradients are accumulated into `grads` when given.
template <typename T>
LossBreakdown total_loss(const NestedWeights<T>& weights, const Batch& batch, double alpha,
                         NestedWeights<T>* grads = nullptr);

// Distillation term of one student level against one teacher level alone.
template <typename T>
double distill_loss(const NestedWeights<T>& weights, const Batch& batch, int student_p, int teacher_p,
                    NestedWeights<T>* grads = nullptr);

template <typename T>
struct AdamState {
  NestedWeights<T> m, v;
  long long step = 0;

  static AdamState zeros(const NestedConfig& config);
};

struct StepRecord {
  long long step = 0;
  double learning_rate = 0;
  LossBreakdown loss;
};

template <typename T>
StepRecord train_step(NestedWeights<T>& weights, AdamState<T>& optimizer, const Batch& batch,
                      const TrainConfig& config);

struct GradCheckReport {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::vector<std::pair<std::string, double>> family_max;  // family, max rel error
};

// Central differences on `num_params` parameters spread over every tensor,
// with distillation targets held fixed at their unperturbed values.
GradCheckReport grad_check(const NestedWeights<double>& weights, const Batch& batch, double alpha, double epsilon,
                           int num_params, Rng& rng);

struct EvalSet {
  Batch batch;
  double oracle_nll = 0;  // mean exact posterior NLL of the masked tokens
};

EvalSet make_eval_set(const SyntheticSource& source, int samples, std::uint64_t seed);

template <typename T>
double eval_nll(const NestedWeights<T>& weights, const EvalSet& eval, int p);

struct TrainLogRecord {
  long long step = 0;
  double alpha = 0;
  double learning_rate = 0;
  LossBreakdown loss;
  std::optional<std::vector<double>> eval_nll;  // per level
  double oracle_nll = 0;
};

std::string format_log_record(const TrainLogRecord& record);

struct TrainResult {
  NestedWeights<float> weights;
  AdamState<float> optimizer;
  std::vector<TrainLogRecord> log;
  std::vector<double> final_nll;  // per level, ascending factor
  double oracle_nll = 0;
};

TrainResult train(const NestedConfig& model, const TrainConfig& config, const SyntheticSource& source,
                  const std::function<void(const TrainLogRecord&)>& on_record = {});

}  // namespace nestdecode
