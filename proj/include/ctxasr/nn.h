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

// Transformer and Conformer building blocks.
//
// Encoder and decoder blocks are driven through a two-phase API on a
// per-layer state so one code path serves full-segment encoding, utterance
// incremental encoding with recycled activations, and frame-by-frame
// streaming:
//
//   extend_inputs(state, x, positions)   appends block-input frames and their
//                                        projected keys/values;
//   compute_outputs(state, begin, end)   runs the block for stored input rows
//                                        [begin, end) against every stored key.
//
// A full forward pass is extend_inputs(all) followed by compute_outputs(all)
// on an empty state.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctxasr/config.h"
#include "ctxasr/mask.h"
#include "ctxasr/tensor.h"

namespace ctxasr {

struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
};

// Multiply-accumulates spent in attention score and weighted-sum products,
// 2 * heads * queries * keys * head_dim per attend() call; thread-local.
std::int64_t attention_macs();
void reset_attention_macs();
std::int64_t count_attention_macs(std::int64_t query_len, std::int64_t key_len, std::int64_t n_heads,
                                  std::int64_t head_dim);

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>*>>;

template <typename T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  Tensor<T> glorot(Shape shape, std::int64_t fan_in, std::int64_t fan_out);
  Tensor<T> normal(Shape shape, double stddev);
  Tensor<T> constant(Shape shape, T value) { return Tensor<T>::full(std::move(shape), value, true); }

 private:
  std::mt19937_64 rng_;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out]; undefined when the layer has no bias

  Linear() = default;
  Linear(Initializer<T>& init, std::int64_t in, std::int64_t out, bool with_bias = true);
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(const std::string& prefix, NamedTensors<T>& out);
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(Initializer<T>& init, std::int64_t d);
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
  void collect(const std::string& prefix, NamedTensors<T>& out);
};

template <typename T>
struct FeedForward {
  Linear<T> w1, w2;
  bool swish_activation = false;
  T scale = T(1);

  FeedForward() = default;
  FeedForward(Initializer<T>& init, std::int64_t d_model, std::int64_t d_ffn, bool swish_activation, T scale);
  Tensor<T> operator()(const Tensor<T>& x, const ForwardContext& ctx) const;
  void collect(const std::string& prefix, NamedTensors<T>& out);
};

// Multi-head dot-product attention. With a relative table the score between
// query i and key j is
//   ((q_i + u)·k_j + (q_i + v)·P[clip(pos_j - pos_i)]) / sqrt(d_head)
// with P a learned [offsets x d_model] table split across heads.
template <typename T>
struct MultiHeadAttention {
  int n_heads = 1;
  Linear<T> wq, wk, wv, wo;
  Tensor<T> pos_table;  // [max_offset - min_offset + 1, d_model]
  Tensor<T> pos_u, pos_v;  // [n_heads x d_head]
  std::int64_t min_offset = 0;
  std::int64_t max_offset = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(Initializer<T>& init, std::int64_t d_model, int n_heads);
  void enable_relative(Initializer<T>& init, std::int64_t min_offset, std::int64_t max_offset);
  bool relative() const { return pos_table.defined(); }

  Tensor<T> attend(const Tensor<T>& xq, std::span<const std::int64_t> q_pos, const Tensor<T>& keys,
                   const Tensor<T>& values, std::span<const std::int64_t> k_pos,
                   const AttentionMask& mask) const;
  void collect(const std::string& prefix, NamedTensors<T>& out);
};

template <typename T>
struct ConvModule {
  LayerNorm<T> norm;
  Linear<T> pw1;       // d -> 2d, followed by GLU
  Tensor<T> depthwise;  // [d x K]
  Tensor<T> bn_gamma, bn_beta, bn_mean, bn_var;
  Linear<T> pw2;
  ConvMode mode = ConvMode::kCausal;

  ConvModule() = default;
  ConvModule(Initializer<T>& init, std::int64_t d_model, int kernel, ConvMode mode);
  int kernel() const { return static_cast<int>(depthwise.dim(1)); }
  void collect(const std::string& prefix, NamedTensors<T>& out);
  void collect_buffers(const std::string& prefix, NamedTensors<T>& out);
};

// Rows appended to a layer state; blocks are concatenated lazily.
template <typename T>
struct RowStore {
  std::vector<Tensor<T>> blocks;
  std::int64_t rows = 0;

  void append(const Tensor<T>& x);
  Tensor<T> all();
  Tensor<T> slice(std::int64_t begin, std::int64_t end);
  void drop_front(std::int64_t n);
  void clear() { blocks.clear(); rows = 0; }
};

// Per-layer recurrent state of an encoder block.
template <typename T>
struct EncoderLayerState {
  RowStore<T> base;    // residual stream the attention output is added to
  RowStore<T> normed;  // normalized attention inputs (queries)
  RowStore<T> keys, values;
  std::vector<std::int64_t> positions;
  RowStore<T> glu;     // conformer: GLU outputs of computed frames
  std::int64_t num_outputs = 0;

  std::int64_t num_inputs() const { return keys.rows; }
  // Forgets the oldest n frames (inputs and outputs alike).
  void evict_front(std::int64_t n);
};

template <typename T>
struct EncoderBlock {
  Arch arch = Arch::kTransformer;
  // transformer
  LayerNorm<T> norm_att, norm_ffn;
  FeedForward<T> ffn;
  // conformer
  FeedForward<T> ffn_in, ffn_out;
  LayerNorm<T> norm_mha, norm_ffn_out, norm_final;
  ConvModule<T> conv;
  MultiHeadAttention<T> mha;

  EncoderBlock() = default;
  EncoderBlock(Initializer<T>& init, const ModelConfig& config);

  void extend_inputs(EncoderLayerState<T>& state, const Tensor<T>& x,
                     std::span<const std::int64_t> positions, const ForwardContext& ctx) const;
  // mask: [(end - begin) x state.num_inputs()]. Rows must be computed in order
  // (begin == state.num_outputs). utt_ends gives exclusive utterance ends
  // relative to begin; only centered convolution uses it.
  Tensor<T> compute_outputs(EncoderLayerState<T>& state, std::int64_t begin, std::int64_t end,
                            const AttentionMask& mask, const ForwardContext& ctx,
                            std::span<const std::int64_t> utt_ends = {}) const;
  void collect(const std::string& prefix, NamedTensors<T>& out);
  void collect_buffers(const std::string& prefix, NamedTensors<T>& out);
};

template <typename T>
struct DecoderLayerState {
  RowStore<T> base, normed, keys, values;
  std::vector<std::int64_t> positions;
  std::int64_t num_outputs = 0;

  std::int64_t num_inputs() const { return keys.rows; }
  void evict_front(std::int64_t n);
};

// Source keys/values of one decoder layer, projected once per utterance.
template <typename T>
struct SourceMemory {
  Tensor<T> keys, values;
  std::int64_t rows() const { return keys.defined() ? keys.rows() : 0; }
};

template <typename T>
struct DecoderBlock {
  LayerNorm<T> norm_self, norm_src, norm_ffn;
  MultiHeadAttention<T> self_att, src_att;
  FeedForward<T> ffn;

  DecoderBlock() = default;
  DecoderBlock(Initializer<T>& init, const ModelConfig& config);

  SourceMemory<T> project_source(const Tensor<T>& enc_states) const;
  void extend_inputs(DecoderLayerState<T>& state, const Tensor<T>& g, std::span<const std::int64_t> positions,
                     const ForwardContext& ctx) const;
  Tensor<T> compute_outputs(DecoderLayerState<T>& state, std::int64_t begin, std::int64_t end,
                            const AttentionMask& self_mask, const SourceMemory<T>& source,
                            const AttentionMask& src_mask, const ForwardContext& ctx) const;
  void collect(const std::string& prefix, NamedTensors<T>& out);
};

template <typename T>
struct Conv2dSubsampler {
  Tensor<T> w1, b1, w2, b2;
  Linear<T> proj;

  Conv2dSubsampler() = default;
  Conv2dSubsampler(Initializer<T>& init, const ModelConfig& config);
  // x [T x D] -> [L x d_model]; throws InputTooShortError for T < 7.
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(const std::string& prefix, NamedTensors<T>& out);
};

// Encoder frames produced from n input frames.
std::int64_t subsampled_length(std::int64_t n);
constexpr std::int64_t kMinSubsampleInput = 7;

// Sinusoidal absolute positional encoding rows for the given positions.
template <typename T>
Tensor<T> sinusoid_encoding(std::span<const std::int64_t> positions, std::int64_t d_model);

template <typename T>
struct TokenEmbedding {
  Tensor<T> table;  // [V x d]
  bool absolute = false;

  TokenEmbedding() = default;
  TokenEmbedding(Initializer<T>& init, const ModelConfig& config);
  // sqrt(d)·Embed(tokens), plus PosEnc(positions) in absolute mode.
  Tensor<T> operator()(std::span<const int> tokens, std::span<const std::int64_t> positions) const;
  void collect(const std::string& prefix, NamedTensors<T>& out);
};

// Residual dropout helper; identity outside training.
template <typename T>
Tensor<T> apply_dropout(const Tensor<T>& x, const ForwardContext& ctx);

}  // namespace ctxasr
