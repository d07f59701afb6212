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

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ctxasr {

// Boolean attention pattern, row-major [rows x cols]; true = may attend.
class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(std::int64_t rows, std::int64_t cols, bool value = false);

  std::int64_t rows() const { return rows_; }
  std::int64_t cols() const { return cols_; }
  bool at(std::int64_t r, std::int64_t c) const { return allowed_[static_cast<std::size_t>(r * cols_ + c)] != 0; }
  void set(std::int64_t r, std::int64_t c, bool value) {
    allowed_[static_cast<std::size_t>(r * cols_ + c)] = value ? 1 : 0;
  }
  std::span<const std::uint8_t> data() const { return allowed_; }

  // Throws InvalidMaskError if any row allows no key.
  void validate() const;
  AttentionMask slice_rows(std::int64_t begin, std::int64_t end) const;
  // Keeps the first n columns.
  AttentionMask first_cols(std::int64_t n) const;
  std::vector<std::int64_t> allowed_keys(std::int64_t row) const;

  friend bool operator==(const AttentionMask&, const AttentionMask&) = default;

 private:
  std::int64_t rows_ = 0;
  std::int64_t cols_ = 0;
  std::vector<std::uint8_t> allowed_;
};

AttentionMask operator&(const AttentionMask& a, const AttentionMask& b);

// Per-utterance lengths of a segment; the last utterance is the current one.
// Frame lengths count encoder frames (after subsampling); token lengths count
// decoder-stream positions.
struct SegmentLayout {
  std::vector<std::int64_t> utt_frame_lens;
  std::vector<std::int64_t> utt_token_lens;

  std::size_t num_utterances() const { return utt_frame_lens.size(); }
  std::size_t current_index() const { return utt_frame_lens.size() - 1; }
  std::int64_t total_frames() const;
  std::int64_t total_tokens() const;
  std::int64_t frame_offset(std::size_t utt) const;
  std::int64_t token_offset(std::size_t utt) const;
  // Throws ContractError on an empty layout, non-positive lengths, or a
  // token table whose size disagrees with the frame table.
  void validate(bool need_tokens) const;
};

enum class SourceSpan { kFullSegment, kCurrentUtterance };
enum class TrainMode { kBaseline, kContext, kStreaming };

std::string to_string(SourceSpan span);
std::string to_string(TrainMode mode);
SourceSpan parse_source_span(const std::string& s);
TrainMode parse_train_mode(const std::string& s);

AttentionMask encoder_context_mask(const SegmentLayout& layout,
                                   std::optional<std::int64_t> streaming_lookahead = std::nullopt);
AttentionMask decoder_self_mask(const SegmentLayout& layout);

// Tokens of the current utterance attend keys <= trigger_frame + src_lookahead
// when trigger_frame is given (segment-global frame index).
AttentionMask source_attention_mask(const SegmentLayout& layout, SourceSpan span,
                                    std::optional<std::int64_t> trigger_frame = std::nullopt,
                                    std::optional<std::int64_t> src_lookahead = std::nullopt);
// Per-position variant: current_triggers[i] restricts current-utterance token
// position i; std::nullopt entries are unrestricted.
AttentionMask source_attention_mask(const SegmentLayout& layout, SourceSpan span,
                                    const std::vector<std::optional<std::int64_t>>& current_triggers,
                                    std::int64_t src_lookahead);

struct StreamingRestriction {
  std::int64_t enc_lookahead = 1;
  std::int64_t src_lookahead = 12;
  // One entry per current-utterance decoder position (segment-global frames).
  std::vector<std::optional<std::int64_t>> current_triggers;
};

struct MaskBundle {
  AttentionMask enc;
  AttentionMask dec_self;
  AttentionMask src;
};

MaskBundle training_mask_bundle(const SegmentLayout& layout, TrainMode mode,
                                SourceSpan span = SourceSpan::kCurrentUtterance,
                                const StreamingRestriction& streaming = {});

// The restriction alone: encoder keys <= query + a, causal decoder, source keys
// <= trigger + b for restricted current-utterance positions.
MaskBundle lookahead_mask_bundle(const SegmentLayout& layout, const StreamingRestriction& streaming);

}  // namespace ctxasr
