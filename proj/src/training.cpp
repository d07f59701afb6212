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

#include "ctxasr/training.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "ctxasr/ctc.h"

namespace ctxasr {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (alpha < 0 || alpha > 1) fail("alpha must be in [0, 1]");
  if (label_smoothing < 0 || label_smoothing >= 1) fail("label_smoothing must be in [0, 1)");
  if (warmup_steps < 1) fail("warmup_steps must be >= 1");
  if (peak_lr <= 0) fail("peak_lr must be > 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (epochs < 0) fail("epochs must be >= 0");
  if (clip_norm <= 0) fail("clip_norm must be > 0");
  if (budget_frames < 0) fail("budget_frames must be >= 0");
  if (enc_lookahead < 0 || src_lookahead < 0) fail("look-ahead must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"alpha", c.alpha},
       {"label_smoothing", c.label_smoothing},
       {"peak_lr", c.peak_lr},
       {"warmup_steps", c.warmup_steps},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"mode", to_string(c.mode)},
       {"seed", c.seed},
       {"clip_norm", c.clip_norm},
       {"budget_frames", c.budget_frames},
       {"speaker_dependent", c.speaker_dependent},
       {"source_span", to_string(c.source_span)},
       {"enc_lookahead", c.enc_lookahead},
       {"src_lookahead", c.src_lookahead},
       {"spec_augment", c.spec_augment},
       {"augment",
        {{"n_time_masks", c.augment.n_time_masks},
         {"max_time_width", c.augment.max_time_width},
         {"n_freq_masks", c.augment.n_freq_masks},
         {"max_freq_width", c.augment.max_freq_width}}},
       {"adam_beta1", c.adam_beta1},
       {"adam_beta2", c.adam_beta2},
       {"adam_eps", c.adam_eps}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  reject_unknown_keys(j,
                      {"alpha", "label_smoothing", "peak_lr", "warmup_steps", "batch_size", "epochs", "mode", "seed",
                       "clip_norm", "budget_frames", "speaker_dependent", "source_span", "enc_lookahead",
                       "src_lookahead", "spec_augment", "augment", "adam_beta1", "adam_beta2", "adam_eps"},
                      "train");
  c.alpha = j.value("alpha", c.alpha);
  c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
  c.peak_lr = j.value("peak_lr", c.peak_lr);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  if (j.contains("mode")) c.mode = parse_train_mode(j.at("mode").get<std::string>());
  c.seed = j.value("seed", c.seed);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.budget_frames = j.value("budget_frames", c.budget_frames);
  c.speaker_dependent = j.value("speaker_dependent", c.speaker_dependent);
  if (j.contains("source_span")) c.source_span = parse_source_span(j.at("source_span").get<std::string>());
  c.enc_lookahead = j.value("enc_lookahead", c.enc_lookahead);
  c.src_lookahead = j.value("src_lookahead", c.src_lookahead);
  c.spec_augment = j.value("spec_augment", c.spec_augment);
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    reject_unknown_keys(a, {"n_time_masks", "max_time_width", "n_freq_masks", "max_freq_width"}, "train.augment");
    c.augment.n_time_masks = a.value("n_time_masks", c.augment.n_time_masks);
    c.augment.max_time_width = a.value("max_time_width", c.augment.max_time_width);
    c.augment.n_freq_masks = a.value("n_freq_masks", c.augment.n_freq_masks);
    c.augment.max_freq_width = a.value("max_freq_width", c.augment.max_freq_width);
  }
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
}

DecoderStream decoder_stream(const Segment& segment, const ModelConfig& config) {
  DecoderStream s;
  auto append = [&](const std::vector<int>& tokens) {
    s.tokens.push_back(config.sos_id());
    for (int t : tokens) {
      if (t <= config.blank_id() || t >= config.eos_id())
        throw VocabularyError("transcript token " + std::to_string(t) + " outside [1, " +
                              std::to_string(config.eos_id() - 1) + "]");
      s.tokens.push_back(t);
    }
  };
  for (const auto& t : segment.context_transcripts) append(t);
  s.current_begin = static_cast<std::int64_t>(s.tokens.size());
  append(segment.current_transcript);
  s.positions.resize(s.tokens.size());
  std::iota(s.positions.begin(), s.positions.end(), 0);
  s.current_targets = segment.current_transcript;
  s.current_targets.push_back(config.eos_id());
  return s;
}

LossOptions LossOptions::from(const TrainConfig& c) {
  return {c.alpha, c.label_smoothing, c.mode, c.source_span, c.enc_lookahead, c.src_lookahead};
}

template <typename T>
JointLoss<T> joint_loss(const Model<T>& model, const Segment& segment, const LossOptions& options,
                        const ForwardContext& ctx) {
  const auto& cfg = model.config;
  const auto layout = segment.layout();
  StreamingRestriction restriction{options.enc_lookahead, options.src_lookahead, {}};
  auto masks = training_mask_bundle(layout, options.mode, options.source_span, restriction);

  std::vector<Tensor<T>> feats;
  for (const auto& f : segment.utterance_features) feats.push_back(f.template cast<T>());
  auto enc = encode_segment(model, feats, masks.enc, ctx);

  JointLoss<T> out;
  const auto cur = layout.current_index();
  const auto f0 = layout.frame_offset(cur);
  const auto nf = layout.utt_frame_lens[cur];
  const auto& target = segment.current_transcript;
  if (ctc_min_frames(target) > nf) {
    out.skipped = true;
    return out;
  }
  auto ctc_lp = slice_rows(ctc_log_probs(model, enc), f0, f0 + nf);

  if (options.mode == TrainMode::kStreaming) {
    const auto trig = ctc_trigger_times(CtcPosterior::from_tensor(ctc_lp), target, cfg.blank_id());
    restriction.current_triggers.assign(target.size() + 1, std::nullopt);
    for (std::size_t i = 0; i < target.size(); ++i) restriction.current_triggers[i] = f0 + trig[i];
    masks.src = training_mask_bundle(layout, options.mode, options.source_span, restriction).src;
  }

  auto stream = decoder_stream(segment, cfg);
  auto state = empty_decoder_state(model);
  auto source = project_source(model, enc);
  auto lp = decoder_step(model, state, stream.tokens, stream.positions, source, masks.src, ctx);
  const auto n = static_cast<std::int64_t>(stream.tokens.size());
  auto cur_lp = slice_rows(lp, stream.current_begin, n);

  out.attention = label_smoothed_nll(cur_lp, stream.current_targets, options.label_smoothing);
  out.ctc = ctc_loss(ctc_lp, target, cfg.blank_id());
  out.total = add(scale(out.attention, static_cast<T>(options.alpha)), scale(out.ctc, static_cast<T>(1.0 - options.alpha)));
  out.tokens = static_cast<std::int64_t>(stream.current_targets.size());
  const auto V = cur_lp.cols();
  for (std::int64_t r = 0; r < out.tokens; ++r) {
    std::int64_t best = 0;
    for (std::int64_t v = 1; v < V; ++v)
      if (cur_lp.at(r, v) > cur_lp.at(r, best)) best = v;
    if (best == stream.current_targets[static_cast<std::size_t>(r)]) ++out.correct;
  }
  return out;
}

template JointLoss<float> joint_loss<float>(const Model<float>&, const Segment&, const LossOptions&, const ForwardContext&);
template JointLoss<double> joint_loss<double>(const Model<double>&, const Segment&, const LossOptions&,
                                              const ForwardContext&);

double noam_lr(std::int64_t step, double peak_lr, int warmup) {
  const double s = static_cast<double>(std::max<std::int64_t>(step, 1));
  return peak_lr * std::min(s / warmup, std::sqrt(static_cast<double>(warmup) / s));
}

double global_grad_norm(const std::vector<Tensor<float>>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) sq += static_cast<double>(g) * g;
  }
  return std::sqrt(sq);
}

void adam_step(NamedTensors<float> params, AdamState& state, const AdamHyper& hyper, double grad_scale) {
  if (state.m.empty()) {
    for (auto& [name, p] : params) {
      state.m.emplace_back(static_cast<std::size_t>(p->numel()), 0.0);
      state.v.emplace_back(static_cast<std::size_t>(p->numel()), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("optimizer state does not match parameter list");
  for (auto& [name, p] : params) {
    if (!p->has_grad()) continue;
    for (float g : p->grad())
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in " + name + " at step " + std::to_string(state.step + 1));
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i].second;
    if (static_cast<std::int64_t>(state.m[i].size()) != p.numel()) throw ContractError("moment shape mismatch for " + params[i].first);
    const bool has = p.has_grad();
    auto grad = has ? p.grad() : std::span<const float>{};
    auto data = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < m.size(); ++j) {
      const double g = has ? grad[j] * grad_scale : 0.0;
      m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g;
      v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g * g;
      const double update = hyper.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + hyper.eps);
      data[j] = static_cast<float>(data[j] - update);
    }
  }
}

void to_json(nlohmann::json& j, const Metrics& m) {
  j = {{"step", m.step},         {"epoch", m.epoch},           {"train_loss", m.train_loss},
       {"val_loss", m.val_loss}, {"val_ctc_loss", m.val_ctc_loss}, {"val_token_acc", m.val_token_acc},
       {"skipped", m.skipped}};
}

namespace {

std::int64_t effective_budget(const TrainConfig& c) { return c.mode == TrainMode::kBaseline ? 0 : c.budget_frames; }

}  // namespace

Evaluation evaluate(const Model<float>& model, const std::vector<Conversation>& conversations, const TrainConfig& config) {
  NoGradGuard guard;
  Evaluation ev;
  const auto opts = LossOptions::from(config);
  double loss = 0, ctc = 0;
  std::int64_t tokens = 0, correct = 0;
  for (const auto& conv : conversations) {
    for (int u = 0; u < static_cast<int>(conv.records.size()); ++u) {
      auto seg = assemble_segment(conv, u, effective_budget(config), config.speaker_dependent);
      auto jl = joint_loss(model, seg, opts, {});
      if (jl.skipped) {
        ++ev.skipped;
        continue;
      }
      ++ev.segments;
      loss += jl.total.item();
      ctc += jl.ctc.item();
      tokens += jl.tokens;
      correct += jl.correct;
    }
  }
  if (ev.segments > 0) {
    ev.loss = loss / static_cast<double>(ev.segments);
    ev.ctc_loss = ctc / static_cast<double>(ev.segments);
    ev.token_acc = static_cast<double>(correct) / static_cast<double>(tokens);
  }
  return ev;
}

TrainResult train_loop(Model<float>& model, const TrainConfig& config, const std::vector<Conversation>& train,
                       const std::vector<Conversation>& validation, const fs::path& out_dir,
                       const std::function<void(const Metrics&)>& on_epoch) {
  config.validate();
  TrainResult result;
  std::mt19937_64 rng(config.seed);
  auto params = model.named_parameters();
  for (auto& [n, p] : params) p->set_requires_grad(true);
  std::vector<Tensor<float>> handles;
  for (auto& [n, p] : params) handles.push_back(*p);

  std::ofstream metrics_log;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    metrics_log.open(out_dir / "metrics.jsonl", std::ios::trunc);
    std::ofstream(out_dir / "train_config.json") << nlohmann::json(config).dump(2) << '\n';
  }
  auto checkpoint = [&](const Metrics& m) {
    if (out_dir.empty()) return;
    const auto path = out_dir / ("epoch" + std::to_string(m.epoch) + ".cxp");
    save_checkpoint(model, path, CheckpointMeta{m.step, m.epoch, m.val_loss, m.val_token_acc, to_string(config.mode)});
    result.checkpoints.push_back(path);
  };
  auto record = [&](Metrics m) {
    const auto ev = evaluate(model, validation, config);
    m.val_loss = ev.loss;
    m.val_ctc_loss = ev.ctc_loss;
    m.val_token_acc = ev.token_acc;
    if (metrics_log.is_open()) metrics_log << nlohmann::json(m).dump() << '\n' << std::flush;
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
    checkpoint(m);
  };

  record(Metrics{});

  std::vector<std::pair<std::size_t, int>> examples;
  for (std::size_t c = 0; c < train.size(); ++c)
    for (int u = 0; u < static_cast<int>(train[c].records.size()); ++u) examples.emplace_back(c, u);

  const auto opts = LossOptions::from(config);
  AdamState adam;
  ForwardContext ctx{true, model.config.dropout_rate, &rng};
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(examples.begin(), examples.end(), rng);
    Metrics m;
    m.epoch = epoch;
    double epoch_loss = 0;
    std::int64_t used = 0;
    for (std::size_t b0 = 0; b0 < examples.size(); b0 += static_cast<std::size_t>(config.batch_size)) {
      const auto b1 = std::min(examples.size(), b0 + static_cast<std::size_t>(config.batch_size));
      for (auto& h : handles) h.zero_grad();
      std::int64_t valid = 0;
      for (auto i = b0; i < b1; ++i) {
        const auto& [c, u] = examples[i];
        auto seg = assemble_segment(train[c], u, effective_budget(config), config.speaker_dependent);
        if (config.spec_augment) {
          for (std::size_t k = 0; k < seg.utterance_features.size(); ++k)
            seg.utterance_features[k] = spec_augment(seg.utterance_features[k], config.augment, rng()).features;
        }
        auto jl = joint_loss(model, seg, opts, ctx);
        if (jl.skipped) {
          ++m.skipped;
          continue;
        }
        ++valid;
        epoch_loss += jl.total.item();
        jl.total.backward();
      }
      if (valid == 0) continue;
      used += valid;
      double grad_scale = 1.0 / static_cast<double>(valid);
      const double norm = global_grad_norm(handles) * grad_scale;
      if (norm > config.clip_norm) grad_scale *= config.clip_norm / norm;
      AdamHyper hyper{noam_lr(adam.step + 1, config.peak_lr, config.warmup_steps), config.adam_beta1,
                      config.adam_beta2, config.adam_eps};
      adam_step(params, adam, hyper, grad_scale);
    }
    for (auto& h : handles) h.zero_grad();
    m.step = adam.step;
    m.train_loss = used > 0 ? epoch_loss / static_cast<double>(used) : 0.0;
    record(m);
  }
  return result;
}

GradCheckReport model_grad_check(const Model<float>& model, const Segment& segment, const LossOptions& options,
                                 bool training, double eps, double tol) {
  auto m64 = model.cast<double>();
  std::vector<NamedParam> params;
  for (auto& [n, p] : m64.named_parameters()) params.emplace_back(n, *p);
  const ForwardContext ctx{training, 0.0, nullptr};
  return grad_check(
      [&] {
        auto jl = joint_loss(m64, segment, options, ctx);
        if (jl.skipped) throw InfeasibleAlignmentError("grad check segment has an infeasible CTC alignment");
        return jl.total;
      },
      params, eps, tol, 1e-6);
}

Model<float> load_for_fine_tune(const fs::path& base, const ModelConfig& target_config, const FineTuneOptions& options,
                                std::uint64_t seed) {
  if (!fs::exists(base)) throw FileNotFoundError("base checkpoint not found: " + base.string());
  const auto base_config = load_model_config(config_sidecar(base).string());
  LoadOptions load;
  if (base_config.pos_encoding != target_config.pos_encoding) {
    if (!(options.pe_migration && base_config.pos_encoding == PosEncoding::kAbsolute))
      throw CheckpointIncompatibleError("base uses " + to_string(base_config.pos_encoding) +
                                        " positional encoding, target " + to_string(target_config.pos_encoding) +
                                        (base_config.pos_encoding == PosEncoding::kAbsolute
                                             ? "; set pe_migration to initialize relative tables"
                                             : ""));
    load.allow_missing = {".pos_table", ".pos_u", ".pos_v"};
  }
  Model<float> model(target_config, seed);
  load_tensors_into(model, read_tensor_file(base), load);
  return model;
}

}  // namespace ctxasr
