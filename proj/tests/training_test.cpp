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

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "ctxasr/ctc.h"
#include "ctxasr/training.h"

namespace ctxasr {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ctxasr_training_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

GeneratorSpec toy_data() {
  GeneratorSpec g;
  g.n_conversations = 4;
  g.utterances_per_conversation = 3;
  g.vocab_size = 8;
  g.min_tokens = 2;
  g.max_tokens = 3;
  g.feature_dim = 8;
  g.noise_std = 0.1;
  return g;
}

ModelConfig toy_model(Arch arch = Arch::kConformer, PosEncoding pe = PosEncoding::kRelative) {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ffn = 12;
  c.n_enc_blocks = 2;
  c.n_dec_blocks = 1;
  c.vocab_size = 8;
  c.arch = arch;
  c.pos_encoding = pe;
  c.conv_kernel = 3;
  c.feature_dim = 8;
  c.subsample_channels = 2;
  c.max_segment_frames = 32;
  c.max_lookahead = 4;
  c.max_context_tokens = 16;
  return c;
}

const std::vector<Conversation>& toy_conversations() {
  static const auto convs = generate_conversations(toy_data(), 21);
  return convs;
}

TEST(JointLossTest, AffineInAlpha) {
  Model<double> model(toy_model(), 3);
  auto seg = assemble_segment(toy_conversations()[0], 2, 1000, false);
  ASSERT_EQ(seg.utterance_features.size(), 3u);
  LossOptions opt;
  opt.alpha = 0.0;
  auto l0 = joint_loss(model, seg, opt, {});
  opt.alpha = 1.0;
  auto l1 = joint_loss(model, seg, opt, {});
  EXPECT_EQ(l0.total.item(), l0.ctc.item());
  EXPECT_EQ(l1.total.item(), l1.attention.item());
  for (double a : {0.3, 0.7}) {
    opt.alpha = a;
    auto la = joint_loss(model, seg, opt, {});
    EXPECT_EQ(la.total.item(), a * l1.attention.item() + (1 - a) * l0.ctc.item());
  }
}

TEST(JointLossTest, SubLossesMatchIndependentComputation) {
  Model<double> model(toy_model(Arch::kTransformer), 4);
  auto seg = assemble_segment(toy_conversations()[1], 1, 1000, false);
  LossOptions opt;
  auto jl = joint_loss(model, seg, opt, {});
  const auto layout = seg.layout();
  auto masks = training_mask_bundle(layout, TrainMode::kContext);
  std::vector<Tensor<double>> feats;
  for (const auto& f : seg.utterance_features) feats.push_back(f.cast<double>());
  auto enc = encode_segment(model, feats, masks.enc, {});
  const auto f0 = layout.frame_offset(1);
  auto post = CtcPosterior::from_tensor(slice_rows(ctc_log_probs(model, enc), f0, f0 + layout.utt_frame_lens[1]));
  EXPECT_NEAR(jl.ctc.item(), -ctc_log_likelihood(post, seg.current_transcript), 1e-9);

  // Attention loss only reads the current rows: rebuild it from a decoder
  // run whose context rows are then overwritten with garbage.
  auto stream = decoder_stream(seg, model.config);
  auto state = empty_decoder_state(model);
  auto lp = decoder_step(model, state, stream.tokens, stream.positions, project_source(model, enc), masks.src, {});
  std::vector<double> garbage(lp.data().begin(), lp.data().end());
  for (std::int64_t i = 0; i < stream.current_begin * lp.cols(); ++i) garbage[static_cast<std::size_t>(i)] = -1e3 * (i % 7);
  Tensor<double> poked(lp.shape(), garbage);
  auto att = label_smoothed_nll(slice_rows(poked, stream.current_begin, poked.rows()), stream.current_targets, 0.1);
  EXPECT_EQ(att.item(), jl.attention.item());
  EXPECT_EQ(stream.current_targets.back(), model.config.eos_id());
  EXPECT_EQ(stream.tokens[static_cast<std::size_t>(stream.current_begin)], model.config.sos_id());
}

TEST(JointLossTest, ContextStatesIgnoreCurrentFeatures) {
  Model<double> model(toy_model(), 5);
  auto seg = assemble_segment(toy_conversations()[2], 2, 1000, false);
  const auto layout = seg.layout();
  auto mask = training_mask_bundle(layout, TrainMode::kContext).enc;
  std::vector<Tensor<double>> feats;
  for (const auto& f : seg.utterance_features) feats.push_back(f.cast<double>());
  auto a = encode_segment(model, feats, mask, {});
  std::vector<double> noisy(feats.back().data().begin(), feats.back().data().end());
  for (auto& v : noisy) v = -v + 0.3;
  feats.back() = Tensor<double>(feats.back().shape(), noisy);
  auto b = encode_segment(model, feats, mask, {});
  const auto ctx_rows = layout.frame_offset(2);
  for (std::int64_t i = 0; i < ctx_rows * a.cols(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
  bool moved = false;
  for (std::int64_t i = ctx_rows * a.cols(); i < a.numel(); ++i) moved = moved || a.data()[i] != b.data()[i];
  EXPECT_TRUE(moved);
}

TEST(JointLossTest, StreamingRestrictsSourceByTriggers) {
  Model<double> model(toy_model(), 6);
  auto seg = assemble_segment(toy_conversations()[0], 1, 1000, false);
  LossOptions opt;
  opt.mode = TrainMode::kStreaming;
  opt.src_lookahead = 0;
  auto narrow = joint_loss(model, seg, opt, {});
  opt.src_lookahead = 1000;
  opt.enc_lookahead = 1000;
  auto wide = joint_loss(model, seg, opt, {});
  opt.mode = TrainMode::kContext;
  auto context = joint_loss(model, seg, opt, {});
  ASSERT_FALSE(narrow.skipped);
  EXPECT_NE(narrow.attention.item(), context.attention.item());
  // Unlimited look-ahead makes the streaming masks equal the context masks.
  EXPECT_EQ(wide.total.item(), context.total.item());
}

TEST(JointLossTest, InfeasibleAlignmentIsSkipped) {
  Model<float> model(toy_model(), 7);
  Segment seg;
  seg.utterance_features.push_back(Tensor<float>::zeros({7, 8}));
  seg.utterance_indices = {0};
  seg.current_transcript = {1, 2};
  EXPECT_TRUE(joint_loss(model, seg, LossOptions{}, {}).skipped);
  seg.current_transcript = {1, 7};
  seg.utterance_features[0] = Tensor<float>::zeros({32, 8});
  EXPECT_THROW(joint_loss(model, seg, LossOptions{}, {}), VocabularyError);
}

TEST(GradientTest, FullConformerJointModel) {
  Model<float> model(toy_model(), 8);
  for (auto& [n, b] : model.named_buffers())
    for (auto& v : b->mutable_data()) v = n.find("var") != std::string::npos ? 1.3f : 0.05f;
  auto seg = assemble_segment(toy_conversations()[3], 1, 1000, false);
  for (bool training : {false, true}) {
    auto report = model_grad_check(model, seg, LossOptions{}, training);
    EXPECT_TRUE(report.passed) << report.worst_name << " " << report.worst_rel_error;
    EXPECT_EQ(report.entries.size(), model.named_parameters().size());
  }
}

TEST(GradientTest, StreamingTransformerAbsolute) {
  Model<float> model(toy_model(Arch::kTransformer, PosEncoding::kAbsolute), 9);
  auto seg = assemble_segment(toy_conversations()[1], 2, 1000, false);
  LossOptions opt;
  opt.mode = TrainMode::kStreaming;
  opt.src_lookahead = 1;
  auto report = model_grad_check(model, seg, opt, false);
  EXPECT_TRUE(report.passed) << report.worst_name << " " << report.worst_rel_error;
}

TEST(AdamTest, ZeroGradientLeavesParametersUnchanged) {
  Tensor<float> p = Tensor<float>::full({3}, 0.5f, true);
  AdamState st;
  adam_step({{"p", &p}}, st, AdamHyper{});
  EXPECT_EQ(st.step, 1);
  for (float v : p.data()) EXPECT_EQ(v, 0.5f);
}

TEST(AdamTest, SingleStepClosedForm) {
  Tensor<float> p({2}, {1.0f, -2.0f}, true);
  sum(scale(p, 1.0f)).backward();  // gradient of exactly 1
  AdamState st;
  AdamHyper h;
  h.lr = 0.1;
  adam_step({{"p", &p}}, st, h);
  // m = 0.1, v = 0.02; bias correction gives m_hat = 1, v_hat = 1.
  const double m_hat = (1 - h.beta1) / (1 - h.beta1), v_hat = (1 - h.beta2) / (1 - h.beta2);
  const double step = h.lr * m_hat / (std::sqrt(v_hat) + h.eps);
  EXPECT_FLOAT_EQ(p.data()[0], static_cast<float>(1.0 - step));
  EXPECT_FLOAT_EQ(p.data()[1], static_cast<float>(-2.0 - step));
}

TEST(AdamTest, IdenticalParametersMoveIdentically) {
  Tensor<float> a = Tensor<float>::full({4}, 0.2f, true), b = Tensor<float>::full({4}, 0.2f, true);
  AdamState st;
  for (int i = 0; i < 5; ++i) {
    a.zero_grad();
    b.zero_grad();
    sum(mul(a, a)).backward();
    sum(mul(b, b)).backward();
    adam_step({{"a", &a}, {"b", &b}}, st, AdamHyper{});
  }
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(AdamTest, NonFiniteGradientAborts) {
  Tensor<float> p = Tensor<float>::full({1}, 0.0f, true);
  sum(scale(p, std::numeric_limits<float>::infinity())).backward();
  AdamState st;
  try {
    adam_step({{"enc.0.weight", &p}}, st, AdamHyper{});
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("enc.0.weight"), std::string::npos);
  }
  EXPECT_EQ(p.data()[0], 0.0f);
}

TEST(ScheduleTest, NoamPeaksAtWarmup) {
  EXPECT_DOUBLE_EQ(noam_lr(100, 1e-3, 100), 1e-3);
  EXPECT_DOUBLE_EQ(noam_lr(50, 1e-3, 100), 5e-4);
  EXPECT_DOUBLE_EQ(noam_lr(400, 1e-3, 100), 5e-4);
}

TEST(ClipTest, GlobalNormCountsEveryGradient) {
  Tensor<float> a({2}, {1, 1}, true), b({1}, {1}, true);
  sum(add(scale(a, 3.0f), Tensor<float>({2}, {0, 0}))).backward();
  sum(scale(b, 4.0f)).backward();
  EXPECT_NEAR(global_grad_norm({a, b}), std::sqrt(9.0 + 9.0 + 16.0), 1e-6);
}

TEST(CheckpointTest, RoundTripAndCorruption) {
  auto dir = scratch("ckpt");
  Model<float> model(toy_model(), 10);
  save_checkpoint(model, dir / "m.cxp", CheckpointMeta{5, 2, 1.5, 0.25, "context"});
  auto back = load_checkpoint(dir / "m.cxp");
  EXPECT_TRUE(back.config == model.config);
  auto a = model.named_parameters(), b = back.named_parameters();
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_TRUE(std::equal(a[i].second->data().begin(), a[i].second->data().end(), b[i].second->data().begin()));
  EXPECT_EQ(load_checkpoint_meta(dir / "m.cxp").step, 5);

  auto bytes = [&] {
    std::ifstream in(dir / "m.cxp", std::ios::binary);
    return std::vector<char>(std::istreambuf_iterator<char>(in), {});
  }();
  std::ofstream(dir / "cut.cxp", std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  EXPECT_THROW(read_tensor_file(dir / "cut.cxp"), FormatError);
  EXPECT_THROW(load_checkpoint(dir / "none.cxp"), FileNotFoundError);

  TensorList partial = read_tensor_file(dir / "m.cxp");
  partial.erase(partial.begin() + 3);
  partial.emplace_back("bogus", Tensor<float>::zeros({1}));
  try {
    load_tensors_into(back, partial);
    FAIL();
  } catch (const CheckpointIncompatibleError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("missing"), std::string::npos);
    EXPECT_NE(msg.find("unexpected bogus"), std::string::npos);
  }
}

void fill_and_save(const fs::path& p, float value, double acc) {
  Model<float> m(toy_model(), 1);
  for (auto& [n, t] : m.named_parameters())
    for (auto& v : t->mutable_data()) v = value;
  save_checkpoint(m, p, CheckpointMeta{0, 0, 0, acc, "context"});
}

TEST(AverageTest, MeansTopK) {
  auto dir = scratch("avg");
  fill_and_save(dir / "a.cxp", 1.0f, 0.5);
  fill_and_save(dir / "b.cxp", 3.0f, 0.9);
  fill_and_save(dir / "c.cxp", 100.0f, 0.1);
  auto chosen = average_checkpoints({dir / "a.cxp", dir / "b.cxp", dir / "c.cxp"}, 2, dir / "avg.cxp");
  EXPECT_EQ(chosen, (std::vector<fs::path>{dir / "b.cxp", dir / "a.cxp"}));
  auto avg = load_checkpoint(dir / "avg.cxp");
  for (auto& [n, t] : avg.named_parameters())
    for (float v : t->data()) ASSERT_EQ(v, 2.0f) << n;

  average_checkpoints({dir / "a.cxp", dir / "b.cxp"}, 2, dir / "ab.cxp");
  average_checkpoints({dir / "b.cxp", dir / "a.cxp"}, 2, dir / "ba.cxp");
  auto ab = read_tensor_file(dir / "ab.cxp"), ba = read_tensor_file(dir / "ba.cxp");
  for (std::size_t i = 0; i < ab.size(); ++i)
    EXPECT_TRUE(std::equal(ab[i].second.data().begin(), ab[i].second.data().end(), ba[i].second.data().begin()));

  average_checkpoints({dir / "c.cxp"}, 1, dir / "one.cxp");
  auto one = read_tensor_file(dir / "one.cxp"), c = read_tensor_file(dir / "c.cxp");
  for (std::size_t i = 0; i < c.size(); ++i)
    EXPECT_TRUE(std::equal(c[i].second.data().begin(), c[i].second.data().end(), one[i].second.data().begin()));

  Model<float> other(toy_model(Arch::kTransformer), 1);
  save_checkpoint(other, dir / "t.cxp", CheckpointMeta{0, 0, 0, 0.95, ""});
  EXPECT_THROW(average_checkpoints({dir / "a.cxp", dir / "t.cxp"}, 2, dir / "x.cxp"), CheckpointIncompatibleError);
  EXPECT_THROW(average_checkpoints({dir / "a.cxp"}, 2, dir / "x.cxp"), ConfigError);
}

TrainConfig quick_train(TrainMode mode, int epochs) {
  TrainConfig c;
  c.mode = mode;
  c.epochs = epochs;
  c.batch_size = 4;
  c.warmup_steps = 10;
  c.peak_lr = 3e-3;
  c.budget_frames = 1000;
  return c;
}

TEST(TrainLoopTest, ZeroEpochsEmitsInitialCheckpoint) {
  auto dir = scratch("zero");
  Model<float> model(toy_model(), 11);
  auto res = train_loop(model, quick_train(TrainMode::kContext, 0), toy_conversations(), toy_conversations(), dir);
  ASSERT_EQ(res.checkpoints.size(), 1u);
  EXPECT_EQ(res.history.size(), 1u);
  EXPECT_TRUE(fs::exists(dir / "metrics.jsonl"));
  auto back = read_tensor_file(res.checkpoints[0]);
  EXPECT_TRUE(std::equal(back[0].second.data().begin(), back[0].second.data().end(),
                         model.named_parameters()[0].second->data().begin()));
}

TEST(TrainLoopTest, FixedSeedGivesIdenticalMetrics) {
  auto run = [] {
    Model<float> model(toy_model(), 12);
    auto cfg = quick_train(TrainMode::kContext, 2);
    cfg.spec_augment = true;
    cfg.augment = {1, 4, 1, 2};
    std::vector<std::string> lines;
    train_loop(model, cfg, toy_conversations(), toy_conversations(), {},
               [&](const Metrics& m) { lines.push_back(nlohmann::json(m).dump()); });
    return lines;
  };
  auto a = run(), b = run();
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 3u);
}

TEST(TrainLoopTest, OverfitsTenSegments) {
  GeneratorSpec g = toy_data();
  g.n_conversations = 5;
  g.utterances_per_conversation = 2;
  auto convs = generate_conversations(g, 77);
  auto cfg = toy_model(Arch::kTransformer);
  cfg.d_model = 16;
  cfg.d_ffn = 32;
  Model<float> model(cfg, 13);
  auto tc = quick_train(TrainMode::kContext, 200);
  tc.batch_size = 2;
  tc.label_smoothing = 0.0;
  tc.alpha = 0.5;
  auto res = train_loop(model, tc, convs, convs);
  EXPECT_GE(res.history.back().val_token_acc, 0.99);
  EXPECT_LT(res.history.back().val_loss, res.history.front().val_loss);
}

TEST(FineTuneTest, MigrationAndIdentity) {
  auto dir = scratch("ft");
  Model<float> base(toy_model(Arch::kConformer, PosEncoding::kAbsolute), 14);
  save_checkpoint(base, dir / "abs.cxp");
  auto rel = toy_model(Arch::kConformer, PosEncoding::kRelative);
  EXPECT_THROW(load_for_fine_tune(dir / "abs.cxp", rel, {}, 1), CheckpointIncompatibleError);
  auto migrated = load_for_fine_tune(dir / "abs.cxp", rel, {true}, 1);
  EXPECT_EQ(migrated.named_parameters().size(), base.named_parameters().size() + 9);

  Model<float> rbase(rel, 15);
  save_checkpoint(rbase, dir / "rel.cxp");
  auto same = load_for_fine_tune(dir / "rel.cxp", rel, {}, 99);
  auto out = train_loop(same, quick_train(TrainMode::kContext, 0), {}, {}, dir / "run");
  auto a = read_tensor_file(dir / "rel.cxp"), b = read_tensor_file(out.checkpoints[0]);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_TRUE(std::equal(a[i].second.data().begin(), a[i].second.data().end(), b[i].second.data().begin())) << a[i].first;

  auto wider = rel;
  wider.d_ffn = 16;
  try {
    load_for_fine_tune(dir / "rel.cxp", wider, {}, 1);
    FAIL();
  } catch (const CheckpointIncompatibleError& e) {
    EXPECT_NE(std::string(e.what()).find("ffn"), std::string::npos);
  }
}

TEST(TrainConfigTest, JsonRoundTripRejectsUnknownKeys) {
  TrainConfig c;
  c.alpha = 0.4;
  c.mode = TrainMode::kStreaming;
  c.augment.max_freq_width = 3;
  auto back = nlohmann::json(c).get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
  EXPECT_THROW(nlohmann::json({{"alhpa", 0.1}}).get<TrainConfig>(), ConfigError);
  c.alpha = 2;
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace ctxasr
