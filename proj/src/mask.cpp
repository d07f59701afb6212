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

#include "ctxasr/mask.h"

#include <algorithm>
#include <numeric>

#include "ctxasr/errors.h"

namespace ctxasr {

AttentionMask::AttentionMask(std::int64_t rows, std::int64_t cols, bool value)
    : rows_(rows), cols_(cols), allowed_(static_cast<std::size_t>(rows * cols), value ? 1 : 0) {
  if (rows < 0 || cols < 0) throw DimensionError("attention mask with negative size");
}

void AttentionMask::validate() const {
  for (std::int64_t r = 0; r < rows_; ++r) {
    const auto* row = allowed_.data() + r * cols_;
    if (std::none_of(row, row + cols_, [](std::uint8_t v) { return v != 0; })) {
      throw InvalidMaskError("attention mask row " + std::to_string(r) + " allows no key");
    }
  }
}

AttentionMask AttentionMask::slice_rows(std::int64_t begin, std::int64_t end) const {
  if (begin < 0 || end < begin || end > rows_) throw DimensionError("mask row slice out of range");
  AttentionMask out(end - begin, cols_);
  std::copy(allowed_.begin() + begin * cols_, allowed_.begin() + end * cols_, out.allowed_.begin());
  return out;
}

AttentionMask AttentionMask::first_cols(std::int64_t n) const {
  if (n < 0 || n > cols_) throw DimensionError("mask column slice out of range");
  AttentionMask out(rows_, n);
  for (std::int64_t r = 0; r < rows_; ++r)
    std::copy(allowed_.begin() + r * cols_, allowed_.begin() + r * cols_ + n, out.allowed_.begin() + r * n);
  return out;
}

std::vector<std::int64_t> AttentionMask::allowed_keys(std::int64_t row) const {
  std::vector<std::int64_t> keys;
  for (std::int64_t c = 0; c < cols_; ++c)
    if (at(row, c)) keys.push_back(c);
  return keys;
}

AttentionMask operator&(const AttentionMask& a, const AttentionMask& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("mask intersection of differently shaped masks");
  }
  AttentionMask out(a.rows(), a.cols());
  for (std::int64_t r = 0; r < a.rows(); ++r)
    for (std::int64_t c = 0; c < a.cols(); ++c) out.set(r, c, a.at(r, c) && b.at(r, c));
  return out;
}

std::int64_t SegmentLayout::total_frames() const {
  return std::accumulate(utt_frame_lens.begin(), utt_frame_lens.end(), std::int64_t{0});
}

std::int64_t SegmentLayout::total_tokens() const {
  return std::accumulate(utt_token_lens.begin(), utt_token_lens.end(), std::int64_t{0});
}

std::int64_t SegmentLayout::frame_offset(std::size_t utt) const {
  return std::accumulate(utt_frame_lens.begin(), utt_frame_lens.begin() + static_cast<std::ptrdiff_t>(utt),
                         std::int64_t{0});
}

std::int64_t SegmentLayout::token_offset(std::size_t utt) const {
  return std::accumulate(utt_token_lens.begin(), utt_token_lens.begin() + static_cast<std::ptrdiff_t>(utt),
                         std::int64_t{0});
}

void SegmentLayout::validate(bool need_tokens) const {
  if (utt_frame_lens.empty()) throw ContractError("empty segment layout");
  for (auto n : utt_frame_lens)
    if (n < 1) throw ContractError("segment layout has an utterance with no encoder frames");
  if (need_tokens || !utt_token_lens.empty()) {
    if (utt_token_lens.size() != utt_frame_lens.size()) {
      throw ContractError("segment layout has " + std::to_string(utt_frame_lens.size()) +
                          " frame lengths but " + std::to_string(utt_token_lens.size()) + " token lengths");
    }
    for (auto n : utt_token_lens)
      if (n < 1) throw ContractError("segment layout has an utterance with no decoder positions");
  }
}

std::string to_string(SourceSpan span) {
  return span == SourceSpan::kFullSegment ? "full_segment" : "current_utterance";
}

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kBaseline: return "baseline";
    case TrainMode::kContext: return "context";
    case TrainMode::kStreaming: return "streaming";
  }
  return "?";
}

SourceSpan parse_source_span(const std::string& s) {
  if (s == "full_segment") return SourceSpan::kFullSegment;
  if (s == "current_utterance") return SourceSpan::kCurrentUtterance;
  throw ConfigError("unknown source span '" + s + "'");
}

TrainMode parse_train_mode(const std::string& s) {
  if (s == "baseline") return TrainMode::kBaseline;
  if (s == "context") return TrainMode::kContext;
  if (s == "streaming") return TrainMode::kStreaming;
  throw ConfigError("unknown training mode '" + s + "'");
}

namespace {

std::vector<std::size_t> utterance_of(const std::vector<std::int64_t>& lens) {
  std::vector<std::size_t> owner;
  for (std::size_t u = 0; u < lens.size(); ++u) owner.insert(owner.end(), static_cast<std::size_t>(lens[u]), u);
  return owner;
}

}  // namespace

AttentionMask encoder_context_mask(const SegmentLayout& layout, std::optional<std::int64_t> streaming_lookahead) {
  layout.validate(false);
  if (streaming_lookahead && *streaming_lookahead < 0) throw ContractError("negative encoder look-ahead");
  const auto n = layout.total_frames();
  const auto owner = utterance_of(layout.utt_frame_lens);
  AttentionMask mask(n, n);
  for (std::int64_t q = 0; q < n; ++q) {
    for (std::int64_t k = 0; k < n; ++k) {
      bool ok = owner[static_cast<std::size_t>(k)] <= owner[static_cast<std::size_t>(q)];
      if (streaming_lookahead) ok = ok && k <= q + *streaming_lookahead;
      mask.set(q, k, ok);
    }
  }
  return mask;
}

AttentionMask decoder_self_mask(const SegmentLayout& layout) {
  layout.validate(true);
  const auto n = layout.total_tokens();
  AttentionMask mask(n, n);
  for (std::int64_t q = 0; q < n; ++q)
    for (std::int64_t k = 0; k <= q; ++k) mask.set(q, k, true);
  return mask;
}

AttentionMask source_attention_mask(const SegmentLayout& layout, SourceSpan span,
                                    const std::vector<std::optional<std::int64_t>>& current_triggers,
                                    std::int64_t src_lookahead) {
  layout.validate(true);
  const auto frames = layout.total_frames();
  const auto tokens = layout.total_tokens();
  const auto cur = layout.current_index();
  const auto cur_tok0 = layout.token_offset(cur);
  if (!current_triggers.empty() &&
      static_cast<std::int64_t>(current_triggers.size()) != layout.utt_token_lens[cur]) {
    throw ContractError("expected one trigger per current-utterance decoder position");
  }
  AttentionMask mask(tokens, frames);
  for (std::size_t u = 0; u < layout.num_utterances(); ++u) {
    const auto t0 = layout.token_offset(u);
    std::int64_t f_begin = 0, f_end = frames;
    if (span == SourceSpan::kCurrentUtterance) {
      f_begin = layout.frame_offset(u);
      f_end = f_begin + layout.utt_frame_lens[u];
    }
    for (std::int64_t t = t0; t < t0 + layout.utt_token_lens[u]; ++t) {
      std::int64_t limit = f_end;
      if (u == cur && !current_triggers.empty()) {
        const auto& trig = current_triggers[static_cast<std::size_t>(t - cur_tok0)];
        if (trig) {
          if (*trig < 0 || *trig >= frames) {
            throw ContractError("trigger frame " + std::to_string(*trig) + " outside segment of " +
                                std::to_string(frames) + " frames");
          }
          // The span start is always kept so a row never ends up empty.
          limit = std::max(f_begin + 1, std::min(f_end, *trig + src_lookahead + 1));
        }
      }
      for (std::int64_t f = f_begin; f < limit; ++f) mask.set(t, f, true);
    }
  }
  return mask;
}

AttentionMask source_attention_mask(const SegmentLayout& layout, SourceSpan span,
                                    std::optional<std::int64_t> trigger_frame,
                                    std::optional<std::int64_t> src_lookahead) {
  layout.validate(true);
  if (!trigger_frame) return source_attention_mask(layout, span, {}, 0);
  std::vector<std::optional<std::int64_t>> triggers(
      static_cast<std::size_t>(layout.utt_token_lens[layout.current_index()]), trigger_frame);
  return source_attention_mask(layout, span, triggers, src_lookahead.value_or(0));
}

MaskBundle lookahead_mask_bundle(const SegmentLayout& layout, const StreamingRestriction& streaming) {
  layout.validate(true);
  const auto frames = layout.total_frames();
  MaskBundle b;
  b.enc = AttentionMask(frames, frames);
  for (std::int64_t q = 0; q < frames; ++q)
    for (std::int64_t k = 0; k < frames && k <= q + streaming.enc_lookahead; ++k) b.enc.set(q, k, true);
  b.dec_self = decoder_self_mask(layout);
  b.src = source_attention_mask(layout, SourceSpan::kFullSegment, streaming.current_triggers,
                                streaming.src_lookahead);
  return b;
}

MaskBundle training_mask_bundle(const SegmentLayout& layout, TrainMode mode, SourceSpan span,
                                const StreamingRestriction& streaming) {
  layout.validate(true);
  MaskBundle b;
  switch (mode) {
    case TrainMode::kBaseline: {
      if (layout.num_utterances() != 1) {
        throw ContractError("baseline masks need a single-utterance layout, got " +
                            std::to_string(layout.num_utterances()) + " utterances");
      }
      const auto frames = layout.total_frames();
      b.enc = AttentionMask(frames, frames, true);
      b.dec_self = decoder_self_mask(layout);
      b.src = AttentionMask(layout.total_tokens(), frames, true);
      return b;
    }
    case TrainMode::kContext:
      b.enc = encoder_context_mask(layout);
      b.dec_self = decoder_self_mask(layout);
      b.src = source_attention_mask(layout, span);
      return b;
    case TrainMode::kStreaming: {
      auto ctx = training_mask_bundle(layout, TrainMode::kContext, span);
      auto look = lookahead_mask_bundle(layout, streaming);
      b.enc = ctx.enc & look.enc;
      b.dec_self = ctx.dec_self & look.dec_self;
      b.src = ctx.src & look.src;
      return b;
    }
  }
  return b;
}

}  // namespace ctxasr
