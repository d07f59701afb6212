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

// Frame-synchronous streaming recognition with CTC-triggered attention.

#include <cstdint>
#include <deque>
#include <vector>

#include "ctxasr/decoding.h"

namespace ctxasr {

struct StreamOptions {
  std::int64_t enc_lookahead = 1;   // frames per encoder layer
  std::int64_t src_lookahead = 12;  // source frames past a token's trigger
  int beam_size = 10;
  double lambda = 0.7;
  double gamma = 0.0;
  double frame_ms = 40.0;  // encoder frame period
  bool length_normalize = true;
  double eos_penalty = 0.0;
  SourceSpan span = SourceSpan::kCurrentUtterance;

  void validate() const;
  DecodeOptions search() const;
};

void to_json(nlohmann::json& j, const StreamOptions& o);
void from_json(const nlohmann::json& j, StreamOptions& o);

struct DelayBreakdown {
  double encoder_ms = 0;
  double decoder_ms = 0;
  double total_ms() const { return encoder_ms + decoder_ms; }
};

// Look-ahead delay: n_enc layers of a frames each, plus b frames of source.
DelayBreakdown theoretical_delay(int n_enc, std::int64_t enc_lookahead, std::int64_t src_lookahead, double frame_ms);

struct TokenEmission {
  int token = 0;
  std::int64_t trigger_frame = 0;  // CTC frame where the token first appeared
  std::int64_t ready_frame = 0;    // arrival at which that CTC frame could be scored
  std::int64_t emit_frame = 0;     // arrival at which the token was committed
  std::int64_t latency_frames() const { return emit_frame - trigger_frame; }
  std::int64_t commit_delay_frames() const { return emit_frame - ready_frame; }
};

struct StreamResult {
  std::vector<int> tokens;
  std::vector<TokenEmission> emissions;
  double score = 0;
  std::int64_t frames = 0;
  std::int64_t lookahead_frames = 0;  // n_enc * a + b
};

void to_json(nlohmann::json& j, const StreamResult& r);

// One stream of utterances. Earlier utterances stay available as context
// (cached encoder blocks and decoder rows) within the frame budget.
template <typename T>
class StreamSession {
 public:
  StreamSession(const Model<T>& model, StreamOptions options, std::int64_t budget_frames,
                const LmScorer* lm = nullptr);

  StreamResult decode(const Tensor<T>& features, int utterance_index = -1);

  const EncoderCache<T>& cache() const { return cache_; }

 private:
  const Model<T>& model_;
  StreamOptions options_;
  const LmScorer* lm_;
  EncoderCache<T> cache_;
  DecoderState<T> decoder_;
  std::deque<std::int64_t> token_lens_;
  std::int64_t next_token_position_ = 0;
  LmState lm_state_;
};

// Single utterance without context.
template <typename T>
StreamResult stream_decode(const Model<T>& model, const Tensor<T>& features, const StreamOptions& options,
                           const LmScorer* lm = nullptr);

// Whole-utterance search over encoder states computed with the same
// per-layer look-ahead mask. Each token's source is cut at its CTC trigger
// (the peak frame of its first emission) plus src_lookahead; eos sees all.
template <typename T>
Hypothesis<T> offline_lookahead_decode(const Model<T>& model, const Tensor<T>& features, const StreamOptions& options,
                                       const LmScorer* lm = nullptr);

}  // namespace ctxasr
