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

#include "ctxasr/nn.h"

#include <cmath>

namespace ctxasr {

template <typename T>
Tensor<T> Initializer<T>::glorot(Shape shape, std::int64_t fan_in, std::int64_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(dist(rng_));
  return Tensor<T>(std::move(shape), std::move(data), true);
}

template <typename T>
Tensor<T> Initializer<T>::normal(Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = static_cast<T>(dist(rng_));
  return Tensor<T>(std::move(shape), std::move(data), true);
}

template <typename T>
Tensor<T> apply_dropout(const Tensor<T>& x, const ForwardContext& ctx) {
  if (!ctx.training || ctx.dropout <= 0.0 || ctx.rng == nullptr) return x;
  return dropout(x, ctx.dropout, *ctx.rng);
}

// ---------------------------------------------------------------------------

template <typename T>
Linear<T>::Linear(Initializer<T>& init, std::int64_t in, std::int64_t out, bool with_bias)
    : weight(init.glorot({in, out}, in, out)) {
  if (with_bias) bias = init.normal({out}, 0.02);
}

template <typename T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
  auto y = matmul(x, weight);
  return bias.defined() ? add_row(y, bias) : y;
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  out.emplace_back(prefix + ".weight", &weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", &bias);
}

template <typename T>
LayerNorm<T>::LayerNorm(Initializer<T>& init, std::int64_t d)
    : gamma(init.constant({d}, T(1))), beta(init.constant({d}, T(0))) {}

template <typename T>
void LayerNorm<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  out.emplace_back(prefix + ".gamma", &gamma);
  out.emplace_back(prefix + ".beta", &beta);
}

template <typename T>
FeedForward<T>::FeedForward(Initializer<T>& init, std::int64_t d_model, std::int64_t d_ffn, bool swish_activation,
                            T scale)
    : w1(init, d_model, d_ffn), w2(init, d_ffn, d_model), swish_activation(swish_activation), scale(scale) {}

template <typename T>
Tensor<T> FeedForward<T>::operator()(const Tensor<T>& x, const ForwardContext& ctx) const {
  auto h = w1(x);
  h = swish_activation ? swish(h) : relu(h);
  h = apply_dropout(h, ctx);
  auto y = w2(h);
  return scale == T(1) ? y : ctxasr::scale(y, scale);
}

template <typename T>
void FeedForward<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  w1.collect(prefix + ".w1", out);
  w2.collect(prefix + ".w2", out);
}

// ---------------------------------------------------------------------------

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(Initializer<T>& init, std::int64_t d_model, int n_heads)
    : n_heads(n_heads),
      wq(init, d_model, d_model),
      wk(init, d_model, d_model),
      wv(init, d_model, d_model),
      wo(init, d_model, d_model) {}

template <typename T>
void MultiHeadAttention<T>::enable_relative(Initializer<T>& init, std::int64_t min_off, std::int64_t max_off) {
  const auto d = wq.weight.cols();
  min_offset = min_off;
  max_offset = max_off;
  pos_table = init.normal({max_off - min_off + 1, d}, 1.0 / std::sqrt(static_cast<double>(d)));
  pos_u = init.constant({n_heads, d / n_heads}, T(0));
  pos_v = init.constant({n_heads, d / n_heads}, T(0));
}

namespace {
thread_local std::int64_t g_attention_macs = 0;
}  // namespace

std::int64_t attention_macs() { return g_attention_macs; }
void reset_attention_macs() { g_attention_macs = 0; }

std::int64_t count_attention_macs(std::int64_t query_len, std::int64_t key_len, std::int64_t n_heads,
                                  std::int64_t head_dim) {
  if (query_len < 1 || key_len < 1 || n_heads < 1 || head_dim < 1)
    throw ContractError("count_attention_macs: all arguments must be >= 1");
  return 2 * n_heads * query_len * key_len * head_dim;
}

template <typename T>
Tensor<T> MultiHeadAttention<T>::attend(const Tensor<T>& xq, std::span<const std::int64_t> q_pos,
                                        const Tensor<T>& keys, const Tensor<T>& values,
                                        std::span<const std::int64_t> k_pos, const AttentionMask& mask) const {
  const auto tq = xq.rows();
  const auto tk = keys.rows();
  if (mask.rows() != tq || mask.cols() != tk) {
    throw DimensionError("attention mask [" + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                         "] does not match " + std::to_string(tq) + " queries and " + std::to_string(tk) + " keys");
  }
  const auto d = wq.weight.cols();
  const auto dh = d / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  g_attention_macs += count_attention_macs(tq, tk, n_heads, dh);
  const auto q = wq(xq);
  std::vector<Tensor<T>> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    const auto c0 = h * dh, c1 = (h + 1) * dh;
    auto qh = slice_cols(q, c0, c1);
    auto kh = slice_cols(keys, c0, c1);
    auto vh = slice_cols(values, c0, c1);
    Tensor<T> scores;
    if (relative()) {
      if (static_cast<std::int64_t>(q_pos.size()) != tq || static_cast<std::int64_t>(k_pos.size()) != tk) {
        throw DimensionError("relative attention needs one position per query and key");
      }
      auto u = reshape(slice_rows(pos_u, h, h + 1), {dh});
      auto v = reshape(slice_rows(pos_v, h, h + 1), {dh});
      auto content = matmul_nt(add_row(qh, u), kh);
      auto by_offset = matmul_nt(add_row(qh, v), slice_cols(pos_table, c0, c1));
      auto position = gather_relative(by_offset, q_pos, k_pos, min_offset, max_offset);
      scores = scale(add(content, position), inv_sqrt);
    } else {
      scores = scale(matmul_nt(qh, kh), inv_sqrt);
    }
    heads.push_back(matmul(masked_softmax(scores, mask.data()), vh));
  }
  return wo(n_heads == 1 ? heads.front() : concat_cols(heads));
}

template <typename T>
void MultiHeadAttention<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  wq.collect(prefix + ".wq", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  wo.collect(prefix + ".wo", out);
  if (relative()) {
    out.emplace_back(prefix + ".pos_table", &pos_table);
    out.emplace_back(prefix + ".pos_u", &pos_u);
    out.emplace_back(prefix + ".pos_v", &pos_v);
  }
}

// ---------------------------------------------------------------------------

template <typename T>
ConvModule<T>::ConvModule(Initializer<T>& init, std::int64_t d_model, int kernel, ConvMode mode)
    : norm(init, d_model),
      pw1(init, d_model, 2 * d_model),
      depthwise(init.glorot({d_model, kernel}, kernel, kernel)),
      bn_gamma(init.constant({d_model}, T(1))),
      bn_beta(init.constant({d_model}, T(0))),
      bn_mean(Tensor<T>::zeros({d_model})),
      bn_var(Tensor<T>::full({d_model}, T(1))),
      pw2(init, d_model, d_model),
      mode(mode) {}

template <typename T>
void ConvModule<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  norm.collect(prefix + ".norm", out);
  pw1.collect(prefix + ".pw1", out);
  out.emplace_back(prefix + ".depthwise", &depthwise);
  out.emplace_back(prefix + ".bn.gamma", &bn_gamma);
  out.emplace_back(prefix + ".bn.beta", &bn_beta);
  pw2.collect(prefix + ".pw2", out);
}

template <typename T>
void ConvModule<T>::collect_buffers(const std::string& prefix, NamedTensors<T>& out) {
  out.emplace_back(prefix + ".bn.running_mean", &bn_mean);
  out.emplace_back(prefix + ".bn.running_var", &bn_var);
}

// ---------------------------------------------------------------------------

template <typename T>
void RowStore<T>::append(const Tensor<T>& x) {
  if (x.rows() == 0) return;
  blocks.push_back(x);
  rows += x.rows();
}

template <typename T>
Tensor<T> RowStore<T>::all() {
  if (blocks.empty()) throw ContractError("row store is empty");
  if (blocks.size() > 1) {
    auto joined = concat_rows(blocks);
    blocks.assign(1, joined);
  }
  return blocks.front();
}

template <typename T>
Tensor<T> RowStore<T>::slice(std::int64_t begin, std::int64_t end) {
  // Most calls touch only the newest block, which needs no concatenation.
  const auto& last = blocks.back();
  const auto last_begin = rows - last.rows();
  if (begin >= last_begin) {
    if (begin == last_begin && end == rows) return last;
    return slice_rows(last, begin - last_begin, end - last_begin);
  }
  auto full = all();
  if (begin == 0 && end == rows) return full;
  return slice_rows(full, begin, end);
}

template <typename T>
void RowStore<T>::drop_front(std::int64_t n) {
  if (n <= 0 || rows == 0) return;
  if (n > rows) throw ContractError("cannot evict more rows than stored");
  auto full = all();
  blocks.clear();
  if (n < rows) blocks.push_back(slice_rows(full, n, rows));
  rows -= n;
}

template <typename T>
void EncoderLayerState<T>::evict_front(std::int64_t n) {
  if (n > num_outputs) throw ContractError("evicting frames whose outputs were never computed");
  base.drop_front(n);
  normed.drop_front(n);
  keys.drop_front(n);
  values.drop_front(n);
  glu.drop_front(std::min(n, glu.rows));
  positions.erase(positions.begin(), positions.begin() + n);
  num_outputs -= n;
}

template <typename T>
void DecoderLayerState<T>::evict_front(std::int64_t n) {
  if (n > num_outputs) throw ContractError("evicting tokens whose outputs were never computed");
  base.drop_front(n);
  normed.drop_front(n);
  keys.drop_front(n);
  values.drop_front(n);
  positions.erase(positions.begin(), positions.begin() + n);
  num_outputs -= n;
}

// ---------------------------------------------------------------------------

template <typename T>
EncoderBlock<T>::EncoderBlock(Initializer<T>& init, const ModelConfig& config) : arch(config.arch) {
  const std::int64_t d = config.d_model;
  if (arch == Arch::kTransformer) {
    norm_att = LayerNorm<T>(init, d);
    norm_ffn = LayerNorm<T>(init, d);
    ffn = FeedForward<T>(init, d, config.d_ffn, false, T(1));
  } else {
    ffn_in = FeedForward<T>(init, d, config.d_ffn, true, T(0.5));
    norm_mha = LayerNorm<T>(init, d);
    conv = ConvModule<T>(init, d, config.conv_kernel, config.conv_mode);
    norm_ffn_out = LayerNorm<T>(init, d);
    ffn_out = FeedForward<T>(init, d, config.d_ffn, true, T(0.5));
    norm_final = LayerNorm<T>(init, d);
  }
  mha = MultiHeadAttention<T>(init, d, config.n_heads);
  if (config.pos_encoding == PosEncoding::kRelative) {
    mha.enable_relative(init, -(config.max_segment_frames - 1), config.max_lookahead);
  }
}

template <typename T>
void EncoderBlock<T>::extend_inputs(EncoderLayerState<T>& state, const Tensor<T>& x,
                                    std::span<const std::int64_t> positions, const ForwardContext& ctx) const {
  if (static_cast<std::int64_t>(positions.size()) != x.rows()) {
    throw DimensionError("extend_inputs: one position per frame required");
  }
  if (x.rows() == 0) return;
  Tensor<T> base, normed;
  if (arch == Arch::kTransformer) {
    base = x;
    normed = norm_att(x);
  } else {
    base = add(x, apply_dropout(ffn_in(x, ctx), ctx));
    normed = norm_mha(base);
  }
  state.base.append(base);
  state.normed.append(normed);
  state.keys.append(mha.wk(normed));
  state.values.append(mha.wv(normed));
  state.positions.insert(state.positions.end(), positions.begin(), positions.end());
}

template <typename T>
Tensor<T> EncoderBlock<T>::compute_outputs(EncoderLayerState<T>& state, std::int64_t begin, std::int64_t end,
                                           const AttentionMask& mask, const ForwardContext& ctx,
                                           std::span<const std::int64_t> utt_ends) const {
  if (begin != state.num_outputs || end > state.num_inputs() || end <= begin) {
    throw ContractError("encoder rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                        ") are not the next computable range");
  }
  const auto base = state.base.slice(begin, end);
  const auto queries = state.normed.slice(begin, end);
  const std::span<const std::int64_t> q_pos(state.positions.data() + begin, static_cast<std::size_t>(end - begin));
  const auto att = mha.attend(queries, q_pos, state.keys.all(), state.values.all(), state.positions, mask);
  Tensor<T> out;
  if (arch == Arch::kTransformer) {
    auto h = add(base, apply_dropout(att, ctx));
    out = add(h, apply_dropout(ffn(norm_ffn(h), ctx), ctx));
  } else {
    auto b = add(base, apply_dropout(att, ctx));
    auto gated = glu(conv.pw1(conv.norm(b)));
    Tensor<T> dw;
    if (conv.mode == ConvMode::kCausal) {
      const auto n_ctx = std::min<std::int64_t>(conv.kernel() - 1, state.glu.rows);
      if (n_ctx > 0) {
        auto left = state.glu.slice(state.glu.rows - n_ctx, state.glu.rows);
        auto joined = depthwise_conv1d(concat_rows(std::vector<Tensor<T>>{left, gated}), conv.depthwise,
                                       Padding::kSameCausal);
        dw = slice_rows(joined, n_ctx, n_ctx + gated.rows());
      } else {
        dw = depthwise_conv1d(gated, conv.depthwise, Padding::kSameCausal);
      }
    } else {
      if (state.glu.rows > 0) {
        throw RecyclingUnsupportedError("centered convolution cannot extend previously computed frames");
      }
      dw = depthwise_conv1d(gated, conv.depthwise, Padding::kSameCentered, utt_ends);
    }
    state.glu.append(gated);
    auto running_mean = conv.bn_mean;
    auto running_var = conv.bn_var;
    auto normed_dw = batch_norm(dw, conv.bn_gamma, conv.bn_beta, running_mean, running_var, ctx.training);
    auto conv_out = apply_dropout(conv.pw2(swish(normed_dw)), ctx);
    auto c = add(b, conv_out);
    auto d = add(c, apply_dropout(ffn_out(norm_ffn_out(c), ctx), ctx));
    out = norm_final(d);
  }
  state.num_outputs = end;
  return out;
}

template <typename T>
void EncoderBlock<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  if (arch == Arch::kTransformer) {
    norm_att.collect(prefix + ".norm_att", out);
    mha.collect(prefix + ".mha", out);
    norm_ffn.collect(prefix + ".norm_ffn", out);
    ffn.collect(prefix + ".ffn", out);
  } else {
    ffn_in.collect(prefix + ".ffn_in", out);
    norm_mha.collect(prefix + ".norm_mha", out);
    mha.collect(prefix + ".mha", out);
    conv.collect(prefix + ".conv", out);
    norm_ffn_out.collect(prefix + ".norm_ffn_out", out);
    ffn_out.collect(prefix + ".ffn_out", out);
    norm_final.collect(prefix + ".norm_final", out);
  }
}

template <typename T>
void EncoderBlock<T>::collect_buffers(const std::string& prefix, NamedTensors<T>& out) {
  if (arch == Arch::kConformer) conv.collect_buffers(prefix + ".conv", out);
}

// ---------------------------------------------------------------------------

template <typename T>
DecoderBlock<T>::DecoderBlock(Initializer<T>& init, const ModelConfig& config)
    : norm_self(init, config.d_model),
      norm_src(init, config.d_model),
      norm_ffn(init, config.d_model),
      self_att(init, config.d_model, config.n_heads),
      src_att(init, config.d_model, config.n_heads),
      ffn(init, config.d_model, config.d_ffn, false, T(1)) {
  if (config.pos_encoding == PosEncoding::kRelative) {
    self_att.enable_relative(init, -(config.max_context_tokens - 1), 0);
  }
}

template <typename T>
SourceMemory<T> DecoderBlock<T>::project_source(const Tensor<T>& enc_states) const {
  return {src_att.wk(enc_states), src_att.wv(enc_states)};
}

template <typename T>
void DecoderBlock<T>::extend_inputs(DecoderLayerState<T>& state, const Tensor<T>& g,
                                    std::span<const std::int64_t> positions, const ForwardContext&) const {
  if (static_cast<std::int64_t>(positions.size()) != g.rows()) {
    throw DimensionError("extend_inputs: one position per token required");
  }
  if (g.rows() == 0) return;
  auto normed = norm_self(g);
  state.base.append(g);
  state.normed.append(normed);
  state.keys.append(self_att.wk(normed));
  state.values.append(self_att.wv(normed));
  state.positions.insert(state.positions.end(), positions.begin(), positions.end());
}

template <typename T>
Tensor<T> DecoderBlock<T>::compute_outputs(DecoderLayerState<T>& state, std::int64_t begin, std::int64_t end,
                                           const AttentionMask& self_mask, const SourceMemory<T>& source,
                                           const AttentionMask& src_mask, const ForwardContext& ctx) const {
  if (begin != state.num_outputs || end > state.num_inputs() || end <= begin) {
    throw ContractError("decoder rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                        ") are not the next computable range");
  }
  const auto base = state.base.slice(begin, end);
  const auto queries = state.normed.slice(begin, end);
  const std::span<const std::int64_t> q_pos(state.positions.data() + begin, static_cast<std::size_t>(end - begin));
  auto att = self_att.attend(queries, q_pos, state.keys.all(), state.values.all(), state.positions, self_mask);
  auto h1 = add(base, apply_dropout(att, ctx));
  auto src = src_att.attend(norm_src(h1), {}, source.keys, source.values, {}, src_mask);
  auto h2 = add(h1, apply_dropout(src, ctx));
  auto out = add(h2, apply_dropout(ffn(norm_ffn(h2), ctx), ctx));
  state.num_outputs = end;
  return out;
}

template <typename T>
void DecoderBlock<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  norm_self.collect(prefix + ".norm_self", out);
  self_att.collect(prefix + ".self_att", out);
  norm_src.collect(prefix + ".norm_src", out);
  src_att.collect(prefix + ".src_att", out);
  norm_ffn.collect(prefix + ".norm_ffn", out);
  ffn.collect(prefix + ".ffn", out);
}

// ---------------------------------------------------------------------------

std::int64_t subsampled_length(std::int64_t n) {
  if (n < kMinSubsampleInput) return 0;
  return ((n - 1) / 2 - 1) / 2;
}

template <typename T>
Conv2dSubsampler<T>::Conv2dSubsampler(Initializer<T>& init, const ModelConfig& config) {
  const std::int64_t c = config.subsample_channels;
  w1 = init.glorot({c, 1, 3, 3}, 9, c * 9);
  b1 = init.normal({c}, 0.02);
  w2 = init.glorot({c, c, 3, 3}, c * 9, c * 9);
  b2 = init.normal({c}, 0.02);
  const auto d2 = subsampled_length(config.feature_dim);
  proj = Linear<T>(init, c * d2, config.d_model);
}

template <typename T>
Tensor<T> Conv2dSubsampler<T>::operator()(const Tensor<T>& x) const {
  if (x.ndim() != 2) throw DimensionError("subsampler input must be [frames x features]");
  if (x.rows() < kMinSubsampleInput) {
    throw InputTooShortError("utterance of " + std::to_string(x.rows()) +
                             " frames is shorter than the minimum of " + std::to_string(kMinSubsampleInput));
  }
  auto h = reshape(x, {1, x.rows(), x.cols()});
  h = relu(conv2d(h, w1, b1, 2, 2, Padding::kValid));
  h = relu(conv2d(h, w2, b2, 2, 2, Padding::kValid));
  const auto channels = h.dim(0), frames = h.dim(1), width = h.dim(2);
  auto flat = reshape(h, {channels, frames * width});
  std::vector<Tensor<T>> per_channel;
  per_channel.reserve(static_cast<std::size_t>(channels));
  for (std::int64_t c = 0; c < channels; ++c) per_channel.push_back(reshape(slice_rows(flat, c, c + 1), {frames, width}));
  return proj(channels == 1 ? per_channel.front() : concat_cols(per_channel));
}

template <typename T>
void Conv2dSubsampler<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  out.emplace_back(prefix + ".conv1.weight", &w1);
  out.emplace_back(prefix + ".conv1.bias", &b1);
  out.emplace_back(prefix + ".conv2.weight", &w2);
  out.emplace_back(prefix + ".conv2.bias", &b2);
  proj.collect(prefix + ".proj", out);
}

template <typename T>
Tensor<T> sinusoid_encoding(std::span<const std::int64_t> positions, std::int64_t d_model) {
  std::vector<T> data(positions.size() * static_cast<std::size_t>(d_model));
  for (std::size_t r = 0; r < positions.size(); ++r) {
    const double pos = static_cast<double>(positions[r]);
    for (std::int64_t i = 0; i < d_model; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d_model));
      data[r * static_cast<std::size_t>(d_model) + static_cast<std::size_t>(i)] = static_cast<T>(std::sin(pos * freq));
      if (i + 1 < d_model) {
        data[r * static_cast<std::size_t>(d_model) + static_cast<std::size_t>(i + 1)] = static_cast<T>(std::cos(pos * freq));
      }
    }
  }
  return Tensor<T>({static_cast<std::int64_t>(positions.size()), d_model}, std::move(data));
}

template <typename T>
TokenEmbedding<T>::TokenEmbedding(Initializer<T>& init, const ModelConfig& config)
    : table(init.normal({config.vocab_size, config.d_model}, 1.0 / std::sqrt(static_cast<double>(config.d_model)))),
      absolute(config.pos_encoding == PosEncoding::kAbsolute) {}

template <typename T>
Tensor<T> TokenEmbedding<T>::operator()(std::span<const int> tokens, std::span<const std::int64_t> positions) const {
  const auto d = table.cols();
  auto e = scale(embedding(table, tokens), std::sqrt(static_cast<T>(d)));
  if (!absolute) return e;
  if (positions.size() != tokens.size()) throw DimensionError("one position per token required");
  return add(e, sinusoid_encoding<T>(positions, d));
}

template <typename T>
void TokenEmbedding<T>::collect(const std::string& prefix, NamedTensors<T>& out) {
  out.emplace_back(prefix + ".table", &table);
}

#define CTXASR_INSTANTIATE_NN(T)                                                                 \
  template class Initializer<T>;                                                                 \
  template struct Linear<T>;                                                                     \
  template struct LayerNorm<T>;                                                                  \
  template struct FeedForward<T>;                                                                \
  template struct MultiHeadAttention<T>;                                                         \
  template struct ConvModule<T>;                                                                 \
  template struct RowStore<T>;                                                                   \
  template struct EncoderLayerState<T>;                                                          \
  template struct EncoderBlock<T>;                                                               \
  template struct DecoderLayerState<T>;                                                          \
  template struct DecoderBlock<T>;                                                               \
  template struct Conv2dSubsampler<T>;                                                           \
  template struct TokenEmbedding<T>;                                                             \
  template Tensor<T> sinusoid_encoding<T>(std::span<const std::int64_t>, std::int64_t);          \
  template Tensor<T> apply_dropout<T>(const Tensor<T>&, const ForwardContext&);

CTXASR_INSTANTIATE_NN(float)
CTXASR_INSTANTIATE_NN(double)

#undef CTXASR_INSTANTIATE_NN

}  // namespace ctxasr
