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

#include "ctxasr/streaming.h"

#include <algorithm>
#include <limits>
#include <map>

namespace ctxasr {

void StreamOptions::validate() const {
  if (enc_lookahead < 0 || src_lookahead < 0) throw ConfigError("look-ahead must be >= 0");
  if (beam_size < 1) throw ConfigError("beam must be >= 1");
  if (lambda < 0 || lambda > 1) throw ConfigError("lambda must be in [0, 1]");
  if (gamma < 0) throw ConfigError("gamma must be >= 0");
  if (!(frame_ms > 0)) throw ConfigError("frame_ms must be positive");
}

DecodeOptions StreamOptions::search() const {
  DecodeOptions d;
  d.beam_size = beam_size;
  d.lambda = lambda;
  d.gamma = gamma;
  d.length_normalize = length_normalize;
  d.eos_penalty = eos_penalty;
  return d;
}

void to_json(nlohmann::json& j, const StreamOptions& o) {
  j = {{"enc_lookahead", o.enc_lookahead}, {"src_lookahead", o.src_lookahead},
       {"beam_size", o.beam_size},         {"lambda", o.lambda},
       {"gamma", o.gamma},                 {"frame_ms", o.frame_ms},
       {"length_normalize", o.length_normalize}, {"eos_penalty", o.eos_penalty},
       {"source_span", to_string(o.span)}};
}

void from_json(const nlohmann::json& j, StreamOptions& o) {
  reject_unknown_keys(j,
                      {"enc_lookahead", "src_lookahead", "beam_size", "lambda", "gamma", "frame_ms",
                       "length_normalize", "eos_penalty", "source_span"},
                      "stream");
  o.enc_lookahead = j.value("enc_lookahead", o.enc_lookahead);
  o.src_lookahead = j.value("src_lookahead", o.src_lookahead);
  o.beam_size = j.value("beam_size", o.beam_size);
  o.lambda = j.value("lambda", o.lambda);
  o.gamma = j.value("gamma", o.gamma);
  o.frame_ms = j.value("frame_ms", o.frame_ms);
  o.length_normalize = j.value("length_normalize", o.length_normalize);
  o.eos_penalty = j.value("eos_penalty", o.eos_penalty);
  if (j.contains("source_span")) o.span = parse_source_span(j.at("source_span").get<std::string>());
}

DelayBreakdown theoretical_delay(int n_enc, std::int64_t enc_lookahead, std::int64_t src_lookahead, double frame_ms) {
  if (n_enc < 0 || enc_lookahead < 0 || src_lookahead < 0 || frame_ms < 0)
    throw ContractError("delay terms must be non-negative");
  return {static_cast<double>(n_enc) * static_cast<double>(enc_lookahead) * frame_ms,
          static_cast<double>(src_lookahead) * frame_ms};
}

void to_json(nlohmann::json& j, const StreamResult& r) {
  auto em = nlohmann::json::array();
  for (const auto& e : r.emissions)
    em.push_back({{"token", e.token},
                  {"trigger_frame", e.trigger_frame},
                  {"emit_frame", e.emit_frame},
                  {"latency_frames", e.latency_frames()},
                  {"commit_delay_frames", e.commit_delay_frames()}});
  j = {{"tokens", r.tokens}, {"score", r.score}, {"frames", r.frames}, {"lookahead_frames", r.lookahead_frames},
       {"emissions", em}};
}

namespace {

template <typename T>
struct PrefixNode {
  // Decoder rows for [context, sos, g_1 .. g_{k-1}] of a prefix g of length k.
  std::shared_ptr<const DecoderState<T>> state;
  LmState lm;
};

template <typename T>
void append_source(std::vector<SourceMemory<T>>& into, const std::vector<SourceMemory<T>>& more) {
  if (into.empty()) {
    into = more;
    return;
  }
  for (std::size_t l = 0; l < into.size(); ++l) {
    into[l].keys = concat_rows(std::vector<Tensor<T>>{into[l].keys, more[l].keys});
    into[l].values = concat_rows(std::vector<Tensor<T>>{into[l].values, more[l].values});
  }
}

}  // namespace

template <typename T>
StreamSession<T>::StreamSession(const Model<T>& model, StreamOptions options, std::int64_t budget_frames,
                                const LmScorer* lm)
    : model_(model), options_(options), lm_(lm), cache_(model, budget_frames),
      decoder_(empty_decoder_state(model)), lm_state_(lm ? lm->initial_state() : LmState{}) {
  options_.validate();
  if (lm && lm->vocab_size() != model.config.vocab_size) throw ConfigError("LM vocabulary differs from the model's");
}

template <typename T>
StreamResult StreamSession<T>::decode(const Tensor<T>& features, int utterance_index) {
  NoGradGuard guard;
  const auto& cfg = model_.config;
  const int V = cfg.vocab_size, eos = cfg.eos_id(), sos = cfg.sos_id();
  const auto a = options_.enc_lookahead, b = options_.src_lookahead;
  const double lambda = options_.lambda, gamma = lm_ ? options_.gamma : 0.0;
  const bool full_span = options_.span == SourceSpan::kFullSegment;
  if (full_span && !cache_.entries().empty())
    throw ConfigError("streaming with context supports the current-utterance source span only");

  const int evicted = cache_.make_room(features.rows());
  for (int e = 0; e < evicted; ++e) {
    for (auto& layer : decoder_.layers) layer.evict_front(token_lens_.front());
    token_lens_.pop_front();
  }
  const auto ctx_frames = cache_.cached_frames();
  const auto n = subsampled_length(features.rows());
  if (n < 1) throw DimensionError("utterance too short for streaming");
  std::vector<std::int64_t> positions(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = cache_.next_position() + i;
  const auto h0 = encoder_input(model_, features, positions);

  auto& layers = cache_.mutable_layers();
  const auto N = layers.size();
  std::vector<std::int64_t> arrived(N, 0), done(N, 0);
  std::vector<Tensor<T>> top_rows;
  std::vector<double> ctc_rows;
  std::vector<SourceMemory<T>> source;
  std::int64_t top = 0;
  const std::int64_t total_lookahead = static_cast<std::int64_t>(N) * a + b;

  auto run_layers = [&]() {
    for (std::size_t l = 0; l < N; ++l) {
      const auto ready = arrived[l] == n ? n : std::max<std::int64_t>(0, arrived[l] - a);
      if (ready <= done[l]) continue;
      AttentionMask mask(ready - done[l], ctx_frames + arrived[l]);
      for (std::int64_t r = 0; r < mask.rows(); ++r) {
        const auto t = done[l] + r;
        for (std::int64_t k = 0; k < ctx_frames; ++k) mask.set(r, k, true);
        for (std::int64_t k = 0; k < arrived[l] && k <= t + a; ++k) mask.set(r, ctx_frames + k, true);
      }
      auto out = model_.encoder[l].compute_outputs(layers[l], ctx_frames + done[l], ctx_frames + ready, mask, {});
      const std::span<const std::int64_t> pos(positions.data() + done[l], static_cast<std::size_t>(ready - done[l]));
      done[l] = ready;
      if (l + 1 < N) {
        model_.encoder[l + 1].extend_inputs(layers[l + 1], out, pos, {});
        arrived[l + 1] = ready;
      } else {
        auto enc = encoder_output(model_, out);
        const auto lp = ctc_log_probs(model_, enc);
        ctc_rows.insert(ctc_rows.end(), lp.data().begin(), lp.data().end());
        append_source(source, project_source(model_, enc));
        top_rows.push_back(std::move(enc));
        top = ready;
      }
    }
  };

  PrefixBeamOptions pb;
  pb.beam_size = options_.beam_size;
  pb.blank = cfg.blank_id();
  pb.ctc_weight = 1.0 - lambda;
  for (int c = 1; c < V - 1; ++c) pb.candidates.push_back(c);

  CtcPrefix root;
  root.payload = std::make_shared<const PrefixNode<T>>(
      PrefixNode<T>{std::make_shared<const DecoderState<T>>(decoder_), lm_state_});
  std::vector<CtcPrefix> beam{root};

  // One decoder row per parent prefix and frame serves every candidate token.
  struct Expansion {
    std::shared_ptr<const DecoderState<T>> state;
    std::vector<double> log_probs;
  };
  std::map<std::vector<int>, Expansion> expansions;
  std::int64_t frame_of_expansions = -1;

  auto expand = [&](const CtcPrefix& parent, int token, std::int64_t frame, std::shared_ptr<const void>& payload) {
    const auto& node = *std::static_pointer_cast<const PrefixNode<T>>(parent.payload);
    if (frame != frame_of_expansions) {
      expansions.clear();
      frame_of_expansions = frame;
    }
    auto it = expansions.find(parent.tokens);
    if (it == expansions.end()) {
      DecoderState<T> st = *node.state;
      const int feed = parent.tokens.empty() ? sos : parent.tokens.back();
      const std::int64_t pos = next_token_position_ + static_cast<std::int64_t>(parent.tokens.size());
      const auto rows = source.front().rows();
      AttentionMask m(1, rows);
      const auto limit = std::max<std::int64_t>(1, std::min(top, frame + b + 1));
      for (std::int64_t f = 0; f < limit; ++f) m.set(0, f, true);
      auto lp = decoder_step(model_, st, std::span<const int>(&feed, 1), std::span<const std::int64_t>(&pos, 1),
                             source, m, {});
      const auto d = lp.data();
      it = expansions
               .emplace(parent.tokens, Expansion{std::make_shared<const DecoderState<T>>(std::move(st)),
                                                 std::vector<double>(d.begin(), d.end())})
               .first;
    }
    double bonus = lambda == 0.0 ? 0.0 : lambda * it->second.log_probs[static_cast<std::size_t>(token)];
    LmState lm_next = node.lm;
    if (lm_) {
      if (gamma != 0.0) bonus += gamma * lm_->log_prob(node.lm, token);
      lm_next = lm_->advance(node.lm, token);
    }
    payload = std::make_shared<const PrefixNode<T>>(PrefixNode<T>{it->second.state, std::move(lm_next)});
    return bonus;
  };

  StreamResult result;
  result.frames = n;
  result.lookahead_frames = total_lookahead;
  std::size_t committed = 0;
  auto commit = [&](std::size_t upto, const CtcPrefix& ref, std::int64_t arrival) {
    for (; committed < upto; ++committed) {
      TokenEmission e;
      e.token = ref.tokens[committed];
      e.trigger_frame = ref.trigger_frames[committed];
      e.ready_frame = std::min(n - 1, e.trigger_frame + total_lookahead);
      e.emit_frame = arrival;
      result.emissions.push_back(e);
    }
  };

  std::int64_t ctc_done = 0;
  for (std::int64_t j = 0; j < n; ++j) {
    model_.encoder[0].extend_inputs(layers[0], slice_rows(h0, j, j + 1), std::span<const std::int64_t>(&positions[static_cast<std::size_t>(j)], 1), {});
    arrived[0] = j + 1;
    run_layers();
    while (ctc_done < top && (ctc_done + b < top || top == n)) {
      const std::span<const double> row(ctc_rows.data() + ctc_done * V, static_cast<std::size_t>(V));
      beam = ctc_prefix_beam_step(beam, row, ctc_done, pb, expand);
      ++ctc_done;
      std::size_t lcp = beam.front().tokens.size();
      for (const auto& p : beam) {
        std::size_t k = 0;
        while (k < lcp && k < p.tokens.size() && p.tokens[k] == beam.front().tokens[k]) ++k;
        lcp = k;
      }
      if (lcp > committed) commit(lcp, beam.front(), j);
    }
  }

  // End of stream: close every prefix with eos over the whole utterance.
  const auto rows = source.front().rows();
  AttentionMask all(1, rows, true);
  const CtcPrefix* best = nullptr;
  double best_final = -std::numeric_limits<double>::infinity();
  LmState best_lm;
  for (const auto& p : beam) {
    const auto& node = *std::static_pointer_cast<const PrefixNode<T>>(p.payload);
    DecoderState<T> st = *node.state;
    const int feed = p.tokens.empty() ? sos : p.tokens.back();
    const std::int64_t pos = next_token_position_ + static_cast<std::int64_t>(p.tokens.size());
    auto lp = decoder_step(model_, st, std::span<const int>(&feed, 1), std::span<const std::int64_t>(&pos, 1), source,
                           all, {});
    double score = (lambda == 1.0 ? 0.0 : (1.0 - lambda) * p.total()) + p.bonus;
    if (lambda != 0.0) score += lambda * lp.data()[static_cast<std::size_t>(eos)];
    if (lm_ && gamma != 0.0) score += gamma * lm_->log_prob(node.lm, eos);
    double fin = score - options_.eos_penalty;
    if (options_.length_normalize) fin /= static_cast<double>(p.tokens.size() + 1);
    if (!best || fin > best_final || (fin == best_final && p.tokens < best->tokens)) {
      best = &p;
      best_final = fin;
      best_lm = lm_ ? lm_->advance(node.lm, eos) : LmState{};
    }
  }
  commit(best->tokens.size(), *best, n - 1);
  result.tokens = best->tokens;
  result.score = best_final;

  // Context for later utterances: decoder rows are rebuilt with each token
  // seeing its whole utterance, as in training.
  cache_.append(utterance_index, features.rows(), concat_rows(top_rows));
  std::vector<int> stream{sos};
  stream.insert(stream.end(), result.tokens.begin(), result.tokens.end());
  std::vector<std::int64_t> pos(stream.size());
  for (std::size_t k = 0; k < pos.size(); ++k) pos[k] = next_token_position_ + static_cast<std::int64_t>(k);
  AttentionMask own(static_cast<std::int64_t>(stream.size()), rows);
  for (std::int64_t r = 0; r < own.rows(); ++r)
    for (std::int64_t f = 0; f < rows; ++f) own.set(r, f, true);
  decoder_step(model_, decoder_, stream, pos, source, own, {});
  token_lens_.push_back(static_cast<std::int64_t>(stream.size()));
  next_token_position_ += static_cast<std::int64_t>(stream.size());
  if (lm_) lm_state_ = best_lm;
  return result;
}

template <typename T>
StreamResult stream_decode(const Model<T>& model, const Tensor<T>& features, const StreamOptions& options,
                           const LmScorer* lm) {
  StreamSession<T> session(model, options, features.rows(), lm);
  return session.decode(features);
}

template <typename T>
Hypothesis<T> offline_lookahead_decode(const Model<T>& model, const Tensor<T>& features, const StreamOptions& options,
                                       const LmScorer* lm) {
  options.validate();
  NoGradGuard guard;
  SegmentLayout layout;
  layout.utt_frame_lens = {subsampled_length(features.rows())};
  auto enc = encode_segment(model, {features}, encoder_context_mask(layout, options.enc_lookahead), {});
  auto ctx = utterance_search_context(model, enc);
  ctx.src_lookahead = options.src_lookahead;
  return joint_beam_search(model, ctx, options.search(), lm);
}

template class StreamSession<float>;
template class StreamSession<double>;
template StreamResult stream_decode<float>(const Model<float>&, const Tensor<float>&, const StreamOptions&,
                                           const LmScorer*);
template StreamResult stream_decode<double>(const Model<double>&, const Tensor<double>&, const StreamOptions&,
                                            const LmScorer*);
template Hypothesis<float> offline_lookahead_decode<float>(const Model<float>&, const Tensor<float>&,
                                                           const StreamOptions&, const LmScorer*);
template Hypothesis<double> offline_lookahead_decode<double>(const Model<double>&, const Tensor<double>&,
                                                             const StreamOptions&, const LmScorer*);

}  // namespace ctxasr
