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

#include "ctxasr/data.h"
#include "ctxasr/streaming.h"

namespace ctxasr {
namespace {

ModelConfig toy_model(Arch arch = Arch::kTransformer) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ffn = 24;
  c.n_enc_blocks = 2;
  c.n_dec_blocks = 1;
  c.vocab_size = 5;
  c.arch = arch;
  c.conv_kernel = 3;
  c.feature_dim = 8;
  c.subsample_channels = 2;
  c.max_segment_frames = 64;
  c.max_lookahead = 8;
  c.max_context_tokens = 32;
  return c;
}

std::vector<Conversation> toy_conversations(std::uint64_t seed, int tokens = 3) {
  GeneratorSpec g;
  g.n_conversations = 2;
  g.utterances_per_conversation = 3;
  g.vocab_size = 5;
  g.min_tokens = 2;
  g.max_tokens = tokens;
  g.feature_dim = 8;
  g.frames_per_token = 8;
  return generate_conversations(g, seed);
}

void expect_bit_identical(const Tensor<double>& a, const Tensor<double>& b) {
  ASSERT_EQ(a.shape(), b.shape());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) ASSERT_EQ(x[i], y[i]) << "element " << i;
}

TEST(DelayTest, ReferenceConfiguration) {
  auto d = theoretical_delay(12, 1, 12, 40.0);
  EXPECT_DOUBLE_EQ(d.encoder_ms, 480.0);
  EXPECT_DOUBLE_EQ(d.decoder_ms, 480.0);
  EXPECT_DOUBLE_EQ(d.total_ms(), 960.0);
  EXPECT_DOUBLE_EQ(theoretical_delay(6, 0, 0, 40.0).total_ms(), 0.0);
  EXPECT_THROW(theoretical_delay(2, -1, 0, 40.0), ContractError);
}

TEST(StreamDecodeTest, EncoderMatchesLookaheadMaskedSegment) {
  for (auto arch : {Arch::kTransformer, Arch::kConformer}) {
    const Model<double> model(toy_model(arch), 3);
    const auto conv = toy_conversations(4).front();
    StreamOptions o;
    o.enc_lookahead = 1;
    o.src_lookahead = 2;
    o.beam_size = 3;
    StreamSession<double> session(model, o, 1 << 20);
    SegmentLayout layout;
    std::vector<Tensor<double>> feats;
    for (std::size_t u = 0; u < conv.features.size(); ++u) {
      feats.push_back(conv.features[u].cast<double>());
      session.decode(feats.back(), static_cast<int>(u));
      layout.utt_frame_lens.push_back(subsampled_length(feats.back().rows()));
      auto full = encode_segment(model, feats, encoder_context_mask(layout, o.enc_lookahead), {});
      const auto f0 = layout.frame_offset(u);
      expect_bit_identical(session.cache().entries().back().output,
                           slice_rows(full, f0, f0 + layout.utt_frame_lens[u]));
    }
  }
}

TEST(StreamDecodeTest, UnrestrictedEqualsExhaustiveOffline) {
  for (std::uint64_t seed : {5u, 6u, 7u}) {
    const Model<double> model(toy_model(), seed);
    const auto conv = toy_conversations(seed, 2).front();
    const auto f = conv.features[0].cast<double>();
    StreamOptions o;
    o.enc_lookahead = 1 << 20;
    o.src_lookahead = 1 << 20;
    o.beam_size = 5000;
    o.lambda = 0.5;
    auto streamed = stream_decode(model, f, o);
    auto offline = offline_lookahead_decode(model, f, StreamOptions{o});
    StreamOptions wide = o;
    EXPECT_EQ(streamed.tokens, offline.tokens) << "seed " << seed;
    EXPECT_NEAR(streamed.score, offline.final_score(wide.search()), 1e-9);
  }
}

TEST(StreamDecodeTest, EmissionsAreMonotoneAndBounded) {
  const Model<double> model(toy_model(Arch::kConformer), 8);
  StreamOptions o;
  o.enc_lookahead = 1;
  o.src_lookahead = 2;
  o.beam_size = 4;
  for (const auto& conv : toy_conversations(9)) {
    StreamSession<double> session(model, o, 1 << 20);
    for (std::size_t u = 0; u < conv.features.size(); ++u) {
      auto r = session.decode(conv.features[u].cast<double>(), static_cast<int>(u));
      ASSERT_EQ(r.emissions.size(), r.tokens.size());
      EXPECT_EQ(r.lookahead_frames, 2 * 1 + 2);
      for (std::size_t k = 0; k < r.emissions.size(); ++k) {
        const auto& e = r.emissions[k];
        EXPECT_EQ(e.token, r.tokens[k]);
        EXPECT_GE(e.commit_delay_frames(), 0);
        EXPECT_LE(e.latency_frames(), r.lookahead_frames + e.commit_delay_frames());
        EXPECT_LT(e.emit_frame, r.frames);
        if (k > 0) {
          EXPECT_GE(e.emit_frame, r.emissions[k - 1].emit_frame);
          EXPECT_GT(e.trigger_frame, r.emissions[k - 1].trigger_frame);
        }
      }
    }
  }
}

TEST(StreamDecodeTest, ContextCarriesAcrossUtterances) {
  const Model<double> model(toy_model(), 10);
  const auto conv = toy_conversations(11).front();
  StreamOptions o;
  o.beam_size = 3;
  StreamSession<double> session(model, o, conv.records[0].num_frames + conv.records[1].num_frames);
  session.decode(conv.features[0].cast<double>(), 0);
  session.decode(conv.features[1].cast<double>(), 1);
  EXPECT_EQ(session.cache().entries().size(), 2u);
  session.decode(conv.features[2].cast<double>(), 2);
  EXPECT_EQ(session.cache().entries().front().utterance_index, 1);
}

TEST(StreamDecodeTest, RejectsBadConfigurations) {
  const Model<double> model(toy_model(), 10);
  const auto conv = toy_conversations(12).front();
  StreamOptions o;
  o.lambda = -0.1;
  EXPECT_THROW(stream_decode(model, conv.features[0].cast<double>(), o), ConfigError);
  o.lambda = 0.5;
  o.span = SourceSpan::kFullSegment;
  StreamSession<double> session(model, o, 1 << 20);
  session.decode(conv.features[0].cast<double>(), 0);
  EXPECT_THROW(session.decode(conv.features[1].cast<double>(), 1), ConfigError);
  auto abs = toy_model();
  abs.pos_encoding = PosEncoding::kAbsolute;
  const Model<double> a(abs, 1);
  EXPECT_THROW(stream_decode(a, conv.features[0].cast<double>(), StreamOptions{}), RecyclingUnsupportedError);
}

TEST(StreamOptionsTest, JsonRoundTripRejectsUnknownKeys) {
  StreamOptions o;
  o.src_lookahead = 7;
  o.span = SourceSpan::kFullSegment;
  nlohmann::json j = o;
  auto back = j.get<StreamOptions>();
  EXPECT_EQ(back.src_lookahead, 7);
  EXPECT_EQ(back.span, SourceSpan::kFullSegment);
  j["bogus"] = 1;
  EXPECT_THROW(j.get<StreamOptions>(), ConfigError);
}

}  // namespace
}  // namespace ctxasr
