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

#include "ctxasr/model.h"

#include <numeric>

namespace ctxasr {

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : config(cfg) {
  config.validate();
  Initializer<T> init(seed);
  subsampler = Conv2dSubsampler<T>(init, config);
  if (config.arch == Arch::kConformer) enc_input_norm = LayerNorm<T>(init, config.d_model);
  for (int i = 0; i < config.n_enc_blocks; ++i) encoder.emplace_back(init, config);
  if (config.arch == Arch::kTransformer) enc_final_norm = LayerNorm<T>(init, config.d_model);
  ctc_head = Linear<T>(init, config.d_model, config.vocab_size);
  embed = TokenEmbedding<T>(init, config);
  for (int i = 0; i < config.n_dec_blocks; ++i) decoder.emplace_back(init, config);
  dec_final_norm = LayerNorm<T>(init, config.d_model);
  out_head = Linear<T>(init, config.d_model, config.vocab_size);
}

template <typename T>
NamedTensors<T> Model<T>::named_parameters() {
  NamedTensors<T> out;
  subsampler.collect("subsample", out);
  if (config.arch == Arch::kConformer) enc_input_norm.collect("enc.input_norm", out);
  for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].collect("enc." + std::to_string(i), out);
  if (config.arch == Arch::kTransformer) enc_final_norm.collect("enc.final_norm", out);
  ctc_head.collect("ctc", out);
  embed.collect("dec.embed", out);
  for (std::size_t i = 0; i < decoder.size(); ++i) decoder[i].collect("dec." + std::to_string(i), out);
  dec_final_norm.collect("dec.final_norm", out);
  out_head.collect("dec.out", out);
  return out;
}

template <typename T>
NamedTensors<T> Model<T>::named_buffers() {
  NamedTensors<T> out;
  for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].collect_buffers("enc." + std::to_string(i), out);
  return out;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::parameters() {
  std::vector<Tensor<T>> out;
  for (auto& [name, p] : named_parameters()) out.push_back(*p);
  return out;
}

template <typename T>
Tensor<T> encoder_input(const Model<T>& model, const Tensor<T>& features, std::span<const std::int64_t> positions) {
  auto h = model.subsampler(features);
  if (static_cast<std::int64_t>(positions.size()) != h.rows()) {
    throw DimensionError("encoder_input: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(h.rows()) + " frames");
  }
  if (model.config.pos_encoding == PosEncoding::kAbsolute) {
    h = add(h, sinusoid_encoding<T>(positions, model.config.d_model));
  }
  if (model.config.arch == Arch::kConformer) h = model.enc_input_norm(h);
  return h;
}

template <typename T>
Tensor<T> encoder_output(const Model<T>& model, const Tensor<T>& top) {
  return model.config.arch == Arch::kTransformer ? model.enc_final_norm(top) : top;
}

template <typename T>
Tensor<T> encode_segment(const Model<T>& model, const std::vector<Tensor<T>>& utterance_features,
                         const AttentionMask& enc_mask, const ForwardContext& ctx, std::int64_t first_position) {
  if (utterance_features.empty()) throw ContractError("encode_segment: empty segment");
  std::vector<Tensor<T>> inputs;
  std::vector<std::int64_t> positions;
  std::vector<std::int64_t> utt_ends;
  std::int64_t next = first_position;
  for (const auto& feats : utterance_features) {
    const auto n = subsampled_length(feats.rows());
    std::vector<std::int64_t> pos(static_cast<std::size_t>(n));
    std::iota(pos.begin(), pos.end(), next);
    inputs.push_back(encoder_input(model, feats, pos));
    positions.insert(positions.end(), pos.begin(), pos.end());
    next += n;
    utt_ends.push_back(next - first_position);
  }
  auto x = inputs.size() == 1 ? inputs.front() : concat_rows(inputs);
  const auto frames = x.rows();
  if (enc_mask.rows() != frames || enc_mask.cols() != frames) {
    throw DimensionError("encoder mask [" + std::to_string(enc_mask.rows()) + "x" + std::to_string(enc_mask.cols()) +
                         "] for a segment of " + std::to_string(frames) + " frames");
  }
  for (const auto& block : model.encoder) {
    EncoderLayerState<T> state;
    block.extend_inputs(state, x, positions, ctx);
    x = block.compute_outputs(state, 0, frames, enc_mask, ctx, utt_ends);
  }
  return encoder_output(model, x);
}

template <typename T>
Tensor<T> ctc_log_probs(const Model<T>& model, const Tensor<T>& enc_states) {
  return log_softmax(model.ctc_head(enc_states));
}

template <typename T>
std::vector<SourceMemory<T>> project_source(const Model<T>& model, const Tensor<T>& enc_states) {
  std::vector<SourceMemory<T>> out;
  out.reserve(model.decoder.size());
  for (const auto& block : model.decoder) out.push_back(block.project_source(enc_states));
  return out;
}

template <typename T>
DecoderState<T> empty_decoder_state(const Model<T>& model) {
  DecoderState<T> s;
  s.layers.resize(model.decoder.size());
  return s;
}

template <typename T>
Tensor<T> decoder_step(const Model<T>& model, DecoderState<T>& state, std::span<const int> tokens,
                       std::span<const std::int64_t> positions, const std::vector<SourceMemory<T>>& source,
                       const AttentionMask& src_mask, const ForwardContext& ctx) {
  if (source.size() != model.decoder.size()) throw ContractError("decoder_step: one source memory per layer");
  const auto m = static_cast<std::int64_t>(tokens.size());
  const auto n0 = state.length();
  auto g = model.embed(tokens, positions);
  AttentionMask self_mask(m, n0 + m);
  for (std::int64_t r = 0; r < m; ++r)
    for (std::int64_t c = 0; c <= n0 + r; ++c) self_mask.set(r, c, true);
  for (std::size_t i = 0; i < model.decoder.size(); ++i) {
    auto& layer = state.layers[i];
    model.decoder[i].extend_inputs(layer, g, positions, ctx);
    g = model.decoder[i].compute_outputs(layer, n0, n0 + m, self_mask, source[i], src_mask, ctx);
  }
  return log_softmax(model.out_head(model.dec_final_norm(g)));
}

#define CTXASR_INSTANTIATE_MODEL(T)                                                                         \
  template class Model<T>;                                                                                  \
  template Tensor<T> encoder_input<T>(const Model<T>&, const Tensor<T>&, std::span<const std::int64_t>);    \
  template Tensor<T> encoder_output<T>(const Model<T>&, const Tensor<T>&);                                  \
  template Tensor<T> encode_segment<T>(const Model<T>&, const std::vector<Tensor<T>>&, const AttentionMask&, \
                                       const ForwardContext&, std::int64_t);                                \
  template Tensor<T> ctc_log_probs<T>(const Model<T>&, const Tensor<T>&);                                   \
  template std::vector<SourceMemory<T>> project_source<T>(const Model<T>&, const Tensor<T>&);               \
  template DecoderState<T> empty_decoder_state<T>(const Model<T>&);                                         \
  template Tensor<T> decoder_step<T>(const Model<T>&, DecoderState<T>&, std::span<const int>,               \
                                     std::span<const std::int64_t>, const std::vector<SourceMemory<T>>&,    \
                                     const AttentionMask&, const ForwardContext&);

CTXASR_INSTANTIATE_MODEL(float)
CTXASR_INSTANTIATE_MODEL(double)

#undef CTXASR_INSTANTIATE_MODEL

}  // namespace ctxasr
