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

#include <random>

#include "ctxasr/errors.h"
#include "ctxasr/mask.h"

namespace ctxasr {
namespace {

SegmentLayout frames(std::vector<std::int64_t> f, std::vector<std::int64_t> t = {}) {
  SegmentLayout l;
  l.utt_frame_lens = std::move(f);
  l.utt_token_lens = t.empty() ? std::vector<std::int64_t>(l.utt_frame_lens.size(), 1) : std::move(t);
  return l;
}

TEST(MaskTest, EncoderContextForbidsFutureUtterances) {
  auto m = encoder_context_mask(frames({2, 2}));
  EXPECT_EQ(m.allowed_keys(0), (std::vector<std::int64_t>{0, 1}));
  EXPECT_EQ(m.allowed_keys(2), (std::vector<std::int64_t>{0, 1, 2, 3}));
  EXPECT_FALSE(m.at(1, 2));
  EXPECT_FALSE(m.at(1, 3));
  EXPECT_EQ(encoder_context_mask(frames({5})), AttentionMask(5, 5, true));
  EXPECT_THROW(encoder_context_mask(SegmentLayout{}), ContractError);
}

TEST(MaskTest, EncoderLookaheadIntersectsUtteranceRule) {
  auto m = encoder_context_mask(frames({2, 2}), 1);
  EXPECT_EQ(m.allowed_keys(2), (std::vector<std::int64_t>{0, 1, 2, 3}));
  EXPECT_EQ(m.allowed_keys(0), (std::vector<std::int64_t>{0, 1}));
  EXPECT_EQ(m.allowed_keys(1), (std::vector<std::int64_t>{0, 1}));
}

TEST(MaskTest, EncoderMaskMatchesEnumeratedRule) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> len(1, 5), nutt(1, 4), look(0, 3);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<std::int64_t> f(static_cast<std::size_t>(nutt(rng)));
    for (auto& v : f) v = len(rng);
    const int a = look(rng);
    auto layout = frames(f);
    auto plain = encoder_context_mask(layout);
    auto streaming = encoder_context_mask(layout, a);
    auto wider = encoder_context_mask(layout, a + 1);
    std::vector<std::size_t> owner;
    for (std::size_t u = 0; u < f.size(); ++u) owner.insert(owner.end(), static_cast<std::size_t>(f[u]), u);
    for (std::int64_t q = 0; q < plain.rows(); ++q) {
      for (std::int64_t k = 0; k < plain.cols(); ++k) {
        const bool utt_ok = owner[static_cast<std::size_t>(k)] <= owner[static_cast<std::size_t>(q)];
        EXPECT_EQ(plain.at(q, k), utt_ok);
        EXPECT_EQ(streaming.at(q, k), utt_ok && k <= q + a);
        if (streaming.at(q, k)) EXPECT_TRUE(wider.at(q, k));
      }
    }
    EXPECT_NO_THROW(streaming.validate());
  }
}

TEST(MaskTest, DecoderSelfMaskIsCausal) {
  EXPECT_EQ(decoder_self_mask(frames({1}, {1})), AttentionMask(1, 1, true));
  auto m = decoder_self_mask(frames({1}, {3}));
  for (int q = 0; q < 3; ++q)
    for (int k = 0; k < 3; ++k) EXPECT_EQ(m.at(q, k), k <= q);
  auto two = decoder_self_mask(frames({1, 1}, {2, 1}));
  EXPECT_EQ(two.allowed_keys(2), (std::vector<std::int64_t>{0, 1, 2}));
}

TEST(MaskTest, SourceAttentionSpans) {
  auto layout = frames({3, 2}, {2, 2});
  auto full = source_attention_mask(layout, SourceSpan::kFullSegment);
  EXPECT_EQ(full, AttentionMask(4, 5, true));
  auto cur = source_attention_mask(layout, SourceSpan::kCurrentUtterance);
  EXPECT_EQ(cur.allowed_keys(2), (std::vector<std::int64_t>{3, 4}));
  EXPECT_EQ(cur.allowed_keys(3), (std::vector<std::int64_t>{3, 4}));
  EXPECT_EQ(cur.allowed_keys(0), (std::vector<std::int64_t>{0, 1, 2}));
  auto streaming = source_attention_mask(frames({6}, {1}), SourceSpan::kCurrentUtterance, 3, 2);
  EXPECT_EQ(streaming.allowed_keys(0), (std::vector<std::int64_t>{0, 1, 2, 3, 4, 5}));
  auto tight = source_attention_mask(frames({8}, {1}), SourceSpan::kCurrentUtterance, 1, 2);
  EXPECT_EQ(tight.allowed_keys(0), (std::vector<std::int64_t>{0, 1, 2, 3}));
  EXPECT_THROW(source_attention_mask(frames({6}, {1}), SourceSpan::kCurrentUtterance, 6, 2), ContractError);
}

TEST(MaskTest, TrainingBundles) {
  auto single = frames({4}, {3});
  auto base = training_mask_bundle(single, TrainMode::kBaseline);
  EXPECT_EQ(base.enc, AttentionMask(4, 4, true));
  auto ctx = training_mask_bundle(single, TrainMode::kContext);
  EXPECT_EQ(base.enc, ctx.enc);
  EXPECT_EQ(base.dec_self, ctx.dec_self);
  EXPECT_EQ(base.src, ctx.src);
  EXPECT_THROW(training_mask_bundle(frames({2, 2}, {1, 1}), TrainMode::kBaseline), ContractError);

  auto layout = frames({3, 4}, {2, 3});
  StreamingRestriction r;
  r.enc_lookahead = 1;
  r.src_lookahead = 1;
  r.current_triggers = {4, 5, std::nullopt};
  auto s = training_mask_bundle(layout, TrainMode::kStreaming, SourceSpan::kCurrentUtterance, r);
  auto c = training_mask_bundle(layout, TrainMode::kContext);
  auto l = lookahead_mask_bundle(layout, r);
  EXPECT_EQ(s.enc, c.enc & l.enc);
  EXPECT_EQ(s.dec_self, c.dec_self & l.dec_self);
  EXPECT_EQ(s.src, c.src & l.src);
  EXPECT_EQ(s.src.allowed_keys(2), (std::vector<std::int64_t>{3, 4, 5}));
  EXPECT_EQ(s.src.allowed_keys(4), (std::vector<std::int64_t>{3, 4, 5, 6}));
}

TEST(MaskTest, EmptyRowIsInvalid) {
  AttentionMask m(2, 2, true);
  m.set(1, 0, false);
  m.set(1, 1, false);
  EXPECT_THROW(m.validate(), InvalidMaskError);
}

}  // namespace
}  // namespace ctxasr
