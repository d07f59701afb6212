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
#include <span>
#include <vector>

#include "ctxasr/nn.h"

namespace ctxasr {

// Joint CTC-attention encoder-decoder.
template <typename T>
class Model {
 public:
  Model() = default;
  explicit Model(const ModelConfig& config, std::uint64_t seed = 1);

  ModelConfig config;
  Conv2dSubsampler<T> subsampler;
  LayerNorm<T> enc_input_norm;  // conformer only
  std::vector<EncoderBlock<T>> encoder;
  LayerNorm<T> enc_final_norm;  // transformer only
  Linear<T> ctc_head;
  TokenEmbedding<T> embed;
  std::vector<DecoderBlock<T>> decoder;
  LayerNorm<T> dec_final_norm;
  Linear<T> out_head;

  NamedTensors<T> named_parameters();
  NamedTensors<T> named_buffers();
  std::vector<Tensor<T>> parameters();

  template <typename U>
  Model<U> cast() const {
    Model<U> out(config, 0);
    auto& self = const_cast<Model&>(*this);
    auto src = self.named_parameters();
    auto dst = out.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      *dst[i].second = src[i].second->template cast<U>();
      dst[i].second->set_requires_grad(true);
    }
    auto src_b = self.named_buffers();
    auto dst_b = out.named_buffers();
    for (std::size_t i = 0; i < src_b.size(); ++i) *dst_b[i].second = src_b[i].second->template cast<U>();
    return out;
  }
};

// Encoder input rows H^0 for one utterance: subsampling, plus the absolute
// encoding in absolute mode; conformer models receive the normalized stream.
template <typename T>
Tensor<T> encoder_input(const Model<T>& model, const Tensor<T>& features, std::span<const std::int64_t> positions);

// Final encoder normalization: transformer stacks end with one layer norm;
// conformer blocks already emit normalized frames.
template <typename T>
Tensor<T> encoder_output(const Model<T>& model, const Tensor<T>& top);

// Full-segment encoding: each utterance subsampled separately, then all
// blocks over the concatenation under enc_mask. Frame positions start at
// first_position.
template <typename T>
Tensor<T> encode_segment(const Model<T>& model, const std::vector<Tensor<T>>& utterance_features,
                         const AttentionMask& enc_mask, const ForwardContext& ctx, std::int64_t first_position = 0);

template <typename T>
Tensor<T> ctc_log_probs(const Model<T>& model, const Tensor<T>& enc_states);

template <typename T>
std::vector<SourceMemory<T>> project_source(const Model<T>& model, const Tensor<T>& enc_states);

template <typename T>
struct DecoderState {
  std::vector<DecoderLayerState<T>> layers;
  std::int64_t length() const { return layers.empty() ? 0 : layers.front().num_outputs; }
};

template <typename T>
DecoderState<T> empty_decoder_state(const Model<T>& model);

// Appends tokens to the decoder stream (causal over everything stored) and
// returns log-probabilities [tokens x V] for the appended rows. src_mask has
// one row per appended token over the rows of source.
template <typename T>
Tensor<T> decoder_step(const Model<T>& model, DecoderState<T>& state, std::span<const int> tokens,
                       std::span<const std::int64_t> positions, const std::vector<SourceMemory<T>>& source,
                       const AttentionMask& src_mask, const ForwardContext& ctx);

}  // namespace ctxasr
