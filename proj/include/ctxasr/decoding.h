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

#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ctxasr/ctc.h"
#include "ctxasr/data.h"
#include "ctxasr/lm.h"
#include "ctxasr/model.h"

namespace ctxasr {

// Per-layer encoder activations of the most recent utterances of one stream.
// Blocks are appended when an utterance is encoded and evicted oldest first
// so that cached plus incoming feature frames stay within the budget.
template <typename T>
class EncoderCache {
 public:
  struct Entry {
    int utterance_index = -1;
    std::int64_t input_frames = 0;  // before subsampling
    std::int64_t frames = 0;        // encoder frames
    Tensor<T> output;               // top encoder states
  };

  // Throws RecyclingUnsupportedError for absolute positions or centered
  // convolution.
  EncoderCache(const Model<T>& model, std::int64_t budget_frames);

  std::int64_t budget_frames() const { return budget_; }
  const std::deque<Entry>& entries() const { return entries_; }
  std::int64_t cached_input_frames() const;
  std::int64_t cached_frames() const;
  const std::vector<EncoderLayerState<T>>& layers() const { return layers_; }

  // Evicts until input_frames more fit; returns how many utterances left.
  int make_room(std::int64_t input_frames);

  // For callers that drive the layers themselves (frame-by-frame streaming):
  // extend mutable_layers(), then register the finished utterance.
  std::vector<EncoderLayerState<T>>& mutable_layers() { return layers_; }
  std::int64_t next_position() const { return next_position_; }
  void append(int utterance_index, std::int64_t input_frames, Tensor<T> output);

 private:
  template <typename U>
  friend Tensor<U> encode_incremental(const Model<U>&, const Tensor<U>&, EncoderCache<U>&, int);

  std::int64_t budget_;
  std::deque<Entry> entries_;
  std::vector<EncoderLayerState<T>> layers_;
  std::int64_t next_position_ = 0;
};

// Encodes one new utterance against the cached context: queries are the new
// frames, keys and values are the cached frames plus the new ones.
template <typename T>
Tensor<T> encode_incremental(const Model<T>& model, const Tensor<T>& features, EncoderCache<T>& cache,
                             int utterance_index = -1);

struct DecodeOptions {
  int beam_size = 10;
  // Combined score: lambda * attention + (1 - lambda) * CTC + gamma * LM.
  double lambda = 0.7;
  double gamma = 0.0;
  // Most tokens before eos is forced; negative means one per encoder frame.
  int max_len = -1;
  // Per hypothesis, only the pre_beam best tokens by lambda*att + gamma*lm
  // are scored with CTC; 0 scores every token.
  int pre_beam = 0;
  bool length_normalize = true;
  double eos_penalty = 0.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const DecodeOptions& o);
void from_json(const nlohmann::json& j, DecodeOptions& o);

template <typename T>
struct Hypothesis {
  std::vector<int> tokens;  // without eos
  double att = 0.0, ctc = 0.0, lm = 0.0;
  double combined = 0.0;
  bool ended = false;
  bool forced_end = false;
  // Decoder state after feeding every token but the newest (for the root,
  // the context state); expanding feeds the newest token (sos for the root).
  std::shared_ptr<const DecoderState<T>> parent_state;
  CtcPrefixScorer::State ctc_state;
  LmState lm_state;

  double recombined(const DecodeOptions& o) const { return o.lambda * att + (1.0 - o.lambda) * ctc + o.gamma * lm; }
  double final_score(const DecodeOptions& o) const;
};

// Everything the search needs about one utterance.
template <typename T>
struct SearchContext {
  std::vector<SourceMemory<T>> source;  // per decoder layer
  AttentionMask source_row;             // [1 x source rows] allowed to current tokens
  DecoderState<T> decoder;              // context tokens already fed
  std::int64_t next_position = 0;       // decoder position of the current sos
  CtcPosterior ctc;                     // current-utterance frames
  LmState lm_state;
  // Triggered attention: a token whose CTC trigger is frame t sees source rows
  // < current_offset + t + src_lookahead + 1 (within source_row); eos keeps
  // source_row.
  std::optional<std::int64_t> src_lookahead;
  std::int64_t current_offset = 0;
};

// Single-utterance context: source and CTC over enc_states, no decoder
// context.
template <typename T>
SearchContext<T> utterance_search_context(const Model<T>& model, const Tensor<T>& enc_states);

// Output-synchronous joint CTC-attention beam search. Ties are broken in
// favour of the lexicographically smallest token sequence.
template <typename T>
Hypothesis<T> joint_beam_search(const Model<T>& model, const SearchContext<T>& context, const DecodeOptions& options,
                                const LmScorer* lm = nullptr);

struct AttentionMacs {
  std::int64_t self_recycled = 0;
  std::int64_t self_recompute = 0;
  std::int64_t source_recycled = 0;
  std::int64_t source_recompute = 0;
  // Encoder self-attention actually executed by the arm that ran.
  std::int64_t self_measured = 0;
};

struct ConversationDecodeOptions {
  DecodeOptions search;
  std::int64_t budget_frames = 2500;
  bool recycle = true;
  SourceSpan span = SourceSpan::kCurrentUtterance;
  bool speaker_dependent = false;
};

struct UtteranceDecode {
  std::string conversation_id;
  int utterance_index = 0;
  std::vector<int> tokens;
  double score = 0.0;
  bool forced_end = false;
  double wall_ms = 0.0;
  std::vector<int> window;  // utterance indices in the window, oldest first
  std::int64_t window_frames = 0, current_frames = 0;
  std::int64_t window_tokens = 0, current_tokens = 0;
  AttentionMacs macs;
};

void to_json(nlohmann::json& j, const UtteranceDecode& d);

// Levenshtein distance between token sequences (substitutions, insertions
// and deletions all cost 1).
std::int64_t edit_distance(const std::vector<int>& ref, const std::vector<int>& hyp);

// Sliding-window decoding with one-utterance shifts. Context transcripts are
// the decoded tokens of earlier utterances. Features must be loaded.
template <typename T>
std::vector<UtteranceDecode> decode_conversation(const Model<T>& model, const Conversation& conversation,
                                                 const ConversationDecodeOptions& options,
                                                 const LmScorer* lm = nullptr);

}  // namespace ctxasr
