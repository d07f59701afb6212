// Copyright 2026 The ctxasr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ctxasr/checkpoint.h"
#include "ctxasr/data.h"
#include "ctxasr/grad_check.h"
#include "ctxasr/model.h"

namespace ctxasr {

struct TrainConfig {
  // Weight of the attention loss; CTC gets 1 - alpha.
  double alpha = 0.3;
  double label_smoothing = 0.1;
  double peak_lr = 1e-3;
  int warmup_steps = 200;
  int batch_size = 8;
  int epochs = 10;
  TrainMode mode = TrainMode::kContext;
  std::uint64_t seed = 1;
  double clip_norm = 5.0;
  std::int64_t budget_frames = 2000;
  bool speaker_dependent = false;
  SourceSpan source_span = SourceSpan::kCurrentUtterance;
  std::int64_t enc_lookahead = 1;
  std::int64_t src_lookahead = 12;
  bool spec_augment = false;
  SpecAugmentOptions augment;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Decoder stream of a segment: every utterance contributes [sos, y...];
// current_rows are the rows of the current utterance, whose targets are
// [y..., eos].
struct DecoderStream {
  std::vector<int> tokens;
  std::vector<std::int64_t> positions;
  std::int64_t current_begin = 0;
  std::vector<int> current_targets;
};

DecoderStream decoder_stream(const Segment& segment, const ModelConfig& config);

template <typename T>
struct JointLoss {
  Tensor<T> total;  // undefined when skipped
  Tensor<T> attention;
  Tensor<T> ctc;
  bool skipped = false;  // CTC alignment infeasible
  std::int64_t tokens = 0;
  std::int64_t correct = 0;  // teacher-forced argmax hits over current targets
};

struct LossOptions {
  double alpha = 0.3;
  double label_smoothing = 0.1;
  TrainMode mode = TrainMode::kContext;
  SourceSpan source_span = SourceSpan::kCurrentUtterance;
  std::int64_t enc_lookahead = 1;
  std::int64_t src_lookahead = 12;

  static LossOptions from(const TrainConfig& c);
};

// alpha * label-smoothed attention cross-entropy over the current utterance
// + (1 - alpha) * CTC loss over the current utterance's frames. Streaming
// mode restricts source attention to frames <= trigger + src_lookahead with
// triggers from a Viterbi alignment of the (detached) CTC posteriors.
template <typename T>
JointLoss<T> joint_loss(const Model<T>& model, const Segment& segment, const LossOptions& options,
                        const ForwardContext& ctx);

struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

// Inverse square-root schedule peaking at peak_lr after warmup steps.
double noam_lr(std::int64_t step, double peak_lr, int warmup);

// Global L2 norm of all gradients (missing gradients count as zero).
double global_grad_norm(const std::vector<Tensor<float>>& params);

// One Adam update with bias correction; gradients are multiplied by
// grad_scale first. Throws NumericalError naming the first non-finite grad.
void adam_step(NamedTensors<float> params, AdamState& state, const AdamHyper& hyper, double grad_scale = 1.0);

struct Metrics {
  std::int64_t step = 0;
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_ctc_loss = 0.0;
  double val_token_acc = 0.0;
  std::int64_t skipped = 0;
};

void to_json(nlohmann::json& j, const Metrics& m);

struct Evaluation {
  double loss = 0.0;
  double ctc_loss = 0.0;
  double token_acc = 0.0;
  std::int64_t segments = 0;
  std::int64_t skipped = 0;
};

// Teacher-forced validation over every utterance of every conversation.
Evaluation evaluate(const Model<float>& model, const std::vector<Conversation>& conversations, const TrainConfig& config);

struct TrainResult {
  std::vector<Metrics> history;
  std::vector<std::filesystem::path> checkpoints;
};

// Epoch loop over shuffled (conversation, utterance) examples with gradient
// accumulation over batch_size segments per optimizer step. When out_dir is
// non-empty, writes epoch<N>.cxp checkpoints (epoch 0 is the initial model)
// and metrics.jsonl.
TrainResult train_loop(Model<float>& model, const TrainConfig& config, const std::vector<Conversation>& train,
                       const std::vector<Conversation>& validation, const std::filesystem::path& out_dir = {},
                       const std::function<void(const Metrics&)>& on_epoch = {});

// Finite-difference check of joint_loss over every parameter of a 64-bit
// copy of model on one segment. training selects batch statistics in the
// convolution module (dropout stays off). Relative errors use an absolute
// floor of 1e-6, the roundoff level of a central difference at eps 1e-4.
GradCheckReport model_grad_check(const Model<float>& model, const Segment& segment, const LossOptions& options,
                                 bool training, double eps = 1e-4, double tol = 1e-3);

struct FineTuneOptions {
  // Allow an absolute-encoding base to seed a relative-encoding model; the
  // relative tables are then freshly initialized.
  bool pe_migration = false;
};

// Builds target_config with base weights, then trains with config (which
// should use a context mode).
Model<float> load_for_fine_tune(const std::filesystem::path& base, const ModelConfig& target_config,
                                const FineTuneOptions& options, std::uint64_t seed);

}  // namespace ctxasr
