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

#include "ctxasr/decoding.h"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace ctxasr {

namespace {

// A zero weight switches a term off even when the term is -inf.
double weighted(double w, double x) { return w == 0.0 ? 0.0 : w * x; }

}  // namespace

template <typename T>
EncoderCache<T>::EncoderCache(const Model<T>& model, std::int64_t budget_frames) : budget_(budget_frames) {
  if (model.config.pos_encoding != PosEncoding::kRelative)
    throw RecyclingUnsupportedError("activation recycling needs relative positional encoding");
  if (model.config.arch == Arch::kConformer && model.config.conv_mode != ConvMode::kCausal)
    throw RecyclingUnsupportedError("activation recycling needs causal convolution in conformer blocks");
  if (budget_frames < 0) throw ConfigError("cache budget must be >= 0");
  layers_.resize(model.encoder.size());
}

template <typename T>
std::int64_t EncoderCache<T>::cached_input_frames() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.input_frames;
  return n;
}

template <typename T>
std::int64_t EncoderCache<T>::cached_frames() const {
  std::int64_t n = 0;
  for (const auto& e : entries_) n += e.frames;
  return n;
}

template <typename T>
int EncoderCache<T>::make_room(std::int64_t input_frames) {
  int evicted = 0;
  while (!entries_.empty() && cached_input_frames() + input_frames > budget_) {
    for (auto& layer : layers_) layer.evict_front(entries_.front().frames);
    entries_.pop_front();
    ++evicted;
  }
  return evicted;
}

template <typename T>
void EncoderCache<T>::append(int utterance_index, std::int64_t input_frames, Tensor<T> output) {
  const auto n = output.rows();
  for (const auto& layer : layers_)
    if (layer.num_outputs != cached_frames() + n) throw ContractError("cache layers out of step with appended utterance");
  entries_.push_back({utterance_index, input_frames, n, std::move(output)});
  next_position_ += n;
}

template <typename T>
Tensor<T> encode_incremental(const Model<T>& model, const Tensor<T>& features, EncoderCache<T>& cache,
                             int utterance_index) {
  cache.make_room(features.rows());
  const auto n = subsampled_length(features.rows());
  std::vector<std::int64_t> positions(static_cast<std::size_t>(std::max<std::int64_t>(n, 0)));
  for (std::int64_t i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = cache.next_position_ + i;
  auto x = encoder_input(model, features, positions);
  for (std::size_t i = 0; i < model.encoder.size(); ++i) {
    auto& state = cache.layers_[i];
    model.encoder[i].extend_inputs(state, x, positions, {});
    const auto begin = state.num_outputs, end = state.num_inputs();
    x = model.encoder[i].compute_outputs(state, begin, end, AttentionMask(end - begin, end, true), {});
  }
  auto out = encoder_output(model, x);
  cache.append(utterance_index, features.rows(), out);
  return out;
}

void DecodeOptions::validate() const {
  if (beam_size < 1) throw ConfigError("beam must be >= 1");
  if (lambda < 0 || lambda > 1) throw ConfigError("lambda must be in [0, 1]");
  if (gamma < 0) throw ConfigError("gamma must be >= 0");
  if (pre_beam < 0) throw ConfigError("pre_beam must be >= 0");
}

void to_json(nlohmann::json& j, const DecodeOptions& o) {
  j = {{"beam_size", o.beam_size}, {"lambda", o.lambda},
       {"gamma", o.gamma},         {"max_len", o.max_len},
       {"pre_beam", o.pre_beam},   {"length_normalize", o.length_normalize},
       {"eos_penalty", o.eos_penalty}};
}

void from_json(const nlohmann::json& j, DecodeOptions& o) {
  reject_unknown_keys(j, {"beam_size", "lambda", "gamma", "max_len", "pre_beam", "length_normalize", "eos_penalty"},
                      "search");
  o.beam_size = j.value("beam_size", o.beam_size);
  o.lambda = j.value("lambda", o.lambda);
  o.gamma = j.value("gamma", o.gamma);
  o.max_len = j.value("max_len", o.max_len);
  o.pre_beam = j.value("pre_beam", o.pre_beam);
  o.length_normalize = j.value("length_normalize", o.length_normalize);
  o.eos_penalty = j.value("eos_penalty", o.eos_penalty);
}

template <typename T>
double Hypothesis<T>::final_score(const DecodeOptions& o) const {
  const double s = combined - o.eos_penalty;
  return o.length_normalize ? s / static_cast<double>(tokens.size() + 1) : s;
}

template <typename T>
SearchContext<T> utterance_search_context(const Model<T>& model, const Tensor<T>& enc_states) {
  SearchContext<T> c;
  c.source = project_source(model, enc_states);
  c.source_row = AttentionMask(1, enc_states.rows(), true);
  c.decoder = empty_decoder_state(model);
  c.ctc = CtcPosterior::from_tensor(ctc_log_probs(model, enc_states));
  return c;
}

namespace {

template <typename T>
bool sequence_less(const Hypothesis<T>& a, const Hypothesis<T>& b, int eos) {
  // Ended sequences carry an implicit trailing eos, the largest id.
  const auto n = std::min(a.tokens.size(), b.tokens.size());
  for (std::size_t i = 0; i < n; ++i)
    if (a.tokens[i] != b.tokens[i]) return a.tokens[i] < b.tokens[i];
  auto next = [&](const Hypothesis<T>& h) { return h.tokens.size() > n ? h.tokens[n] : (h.ended ? eos : -1); };
  const int an = next(a), bn = next(b);
  if (an != bn) return an < bn;
  return false;
}

}  // namespace

template <typename T>
Hypothesis<T> joint_beam_search(const Model<T>& model, const SearchContext<T>& context, const DecodeOptions& options,
                                const LmScorer* lm) {
  options.validate();
  NoGradGuard guard;
  const auto& cfg = model.config;
  const int V = cfg.vocab_size, eos = cfg.eos_id(), sos = cfg.sos_id();
  if (lm && lm->vocab_size() != V) throw ConfigError("LM vocabulary differs from the model's");
  if (context.ctc.vocab != V) throw DimensionError("CTC posterior vocabulary differs from the model's");
  const CtcPrefixScorer scorer(context.ctc, cfg.blank_id(), eos);
  const int max_len = options.max_len >= 0 ? options.max_len : static_cast<int>(context.ctc.frames);
  const double gamma = lm ? options.gamma : 0.0;

  Hypothesis<T> root;
  root.parent_state = std::make_shared<const DecoderState<T>>(context.decoder);
  root.ctc_state = scorer.initial();
  root.lm_state = context.lm_state;
  std::vector<Hypothesis<T>> running{root}, ended;
  auto better = [&](const Hypothesis<T>& a, const Hypothesis<T>& b) {
    if (a.combined != b.combined) return a.combined > b.combined;
    return sequence_less(a, b, eos);
  };

  for (int step = 0; !running.empty(); ++step) {
    const bool forced = step >= max_len;
    std::vector<Hypothesis<T>> cands;
    for (const auto& h : running) {
      const int feed = h.tokens.empty() ? sos : h.tokens.back();
      const std::int64_t pos = context.next_position + static_cast<std::int64_t>(h.tokens.size());
      // Decoder rows keyed by the last source row they may see; -1 is source_row.
      std::map<std::int64_t, std::pair<std::shared_ptr<const DecoderState<T>>, std::vector<double>>> rows;
      auto row_for = [&](std::int64_t limit) -> const auto& {
        auto it = rows.find(limit);
        if (it != rows.end()) return it->second;
        DecoderState<T> st = *h.parent_state;
        AttentionMask m = context.source_row;
        if (limit >= 0)
          for (std::int64_t f = limit + 1; f < m.cols(); ++f) m.set(0, f, false);
        auto lp = decoder_step(model, st, std::span<const int>(&feed, 1), std::span<const std::int64_t>(&pos, 1),
                               context.source, m, {});
        const auto d = lp.data();
        return rows.emplace(limit, std::pair{std::make_shared<const DecoderState<T>>(std::move(st)),
                                             std::vector<double>(d.begin(), d.end())})
            .first->second;
      };

      std::vector<int> tokens;
      if (forced) {
        tokens.push_back(eos);
      } else {
        for (int c = 1; c < V; ++c) tokens.push_back(c);
      }
      std::vector<typename CtcPrefixScorer::State> ctc_next(static_cast<std::size_t>(V));
      std::vector<std::int64_t> limit(static_cast<std::size_t>(V), -1);
      for (int c : tokens) {
        ctc_next[static_cast<std::size_t>(c)] = scorer.extend(h.ctc_state, c);
        if (context.src_lookahead && c != eos)
          limit[static_cast<std::size_t>(c)] =
              std::min(context.source_row.cols() - 1,
                       context.current_offset + ctc_next[static_cast<std::size_t>(c)].trigger + *context.src_lookahead);
      }
      auto att = [&](int c) { return row_for(limit[static_cast<std::size_t>(c)]).second[static_cast<std::size_t>(c)]; };
      std::vector<double> lm_lp(static_cast<std::size_t>(V), 0.0);
      if (gamma != 0.0)
        for (int c : tokens) lm_lp[static_cast<std::size_t>(c)] = lm->log_prob(h.lm_state, c);
      if (options.pre_beam > 0 && static_cast<int>(tokens.size()) > options.pre_beam) {
        auto pre = [&](int c) { return weighted(options.lambda, att(c)) + weighted(gamma, lm_lp[static_cast<std::size_t>(c)]); };
        std::stable_sort(tokens.begin(), tokens.end(), [&](int a, int b) { return pre(a) > pre(b); });
        tokens.resize(static_cast<std::size_t>(options.pre_beam));
        std::sort(tokens.begin(), tokens.end());
      }
      for (int c : tokens) {
        Hypothesis<T> n;
        n.tokens = h.tokens;
        n.ended = c == eos;
        n.forced_end = forced;
        if (!n.ended) n.tokens.push_back(c);
        n.att = h.att + att(c);
        n.lm = h.lm;
        if (gamma != 0.0) {
          n.lm += lm_lp[static_cast<std::size_t>(c)];
          n.lm_state = lm->advance(h.lm_state, c);
        } else if (lm) {
          n.lm_state = lm->advance(h.lm_state, c);
        }
        n.ctc_state = std::move(ctc_next[static_cast<std::size_t>(c)]);
        n.ctc = n.ctc_state.psi;
        n.combined = weighted(options.lambda, n.att) + weighted(1.0 - options.lambda, n.ctc) + weighted(gamma, n.lm);
        n.parent_state = row_for(limit[static_cast<std::size_t>(c)]).first;
        cands.push_back(std::move(n));
      }
    }
    const auto keep = std::min(cands.size(), static_cast<std::size_t>(options.beam_size));
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), better);
    cands.resize(keep);
    running.clear();
    for (auto& c : cands) (c.ended ? ended : running).push_back(std::move(c));
  }

  const Hypothesis<T>* best = nullptr;
  for (const auto& h : ended) {
    if (!best) {
      best = &h;
      continue;
    }
    const double a = h.final_score(options), b = best->final_score(options);
    if (a > b || (a == b && sequence_less(h, *best, eos))) best = &h;
  }
  return *best;
}

void to_json(nlohmann::json& j, const UtteranceDecode& d) {
  j = {{"conversation_id", d.conversation_id},
       {"utterance_index", d.utterance_index},
       {"tokens", d.tokens},
       {"score", d.score},
       {"forced_end", d.forced_end},
       {"wall_ms", d.wall_ms},
       {"window", d.window},
       {"window_frames", d.window_frames},
       {"current_frames", d.current_frames},
       {"window_tokens", d.window_tokens},
       {"current_tokens", d.current_tokens},
       {"macs",
        {{"self_recycled", d.macs.self_recycled},
         {"self_recompute", d.macs.self_recompute},
         {"source_recycled", d.macs.source_recycled},
         {"source_recompute", d.macs.source_recompute},
         {"self_measured", d.macs.self_measured}}}};
}

std::int64_t edit_distance(const std::vector<int>& ref, const std::vector<int>& hyp) {
  std::vector<std::int64_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
  for (std::size_t j = 0; j <= hyp.size(); ++j) prev[j] = static_cast<std::int64_t>(j);
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = static_cast<std::int64_t>(i);
    for (std::size_t j = 1; j <= hyp.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[hyp.size()];
}

namespace {

template <typename T>
struct RecycleSession {
  RecycleSession(const Model<T>& model, std::int64_t budget)
      : cache(model, budget), decoder(empty_decoder_state(model)) {}
  EncoderCache<T> cache;
  DecoderState<T> decoder;
  std::deque<std::int64_t> token_lens;
  std::deque<std::vector<int>> transcripts;
  std::int64_t next_token_position = 0;
};

// Teacher-forces [sos, y...] for each transcript against source under a
// per-row frame span.
template <typename T>
DecoderState<T> context_stream(const Model<T>& model, const std::vector<std::vector<int>>& transcripts,
                               const std::vector<std::pair<std::int64_t, std::int64_t>>& spans,
                               const std::vector<SourceMemory<T>>& source, std::int64_t source_rows) {
  auto state = empty_decoder_state(model);
  std::vector<int> tokens;
  std::vector<std::pair<std::int64_t, std::int64_t>> row_spans;
  for (std::size_t j = 0; j < transcripts.size(); ++j) {
    tokens.push_back(model.config.sos_id());
    tokens.insert(tokens.end(), transcripts[j].begin(), transcripts[j].end());
    row_spans.insert(row_spans.end(), transcripts[j].size() + 1, spans[j]);
  }
  if (tokens.empty()) return state;
  std::vector<std::int64_t> pos(tokens.size());
  for (std::size_t k = 0; k < pos.size(); ++k) pos[k] = static_cast<std::int64_t>(k);
  AttentionMask mask(static_cast<std::int64_t>(tokens.size()), source_rows);
  for (std::size_t k = 0; k < row_spans.size(); ++k)
    for (auto f = row_spans[k].first; f < row_spans[k].second; ++f) mask.set(static_cast<std::int64_t>(k), f, true);
  decoder_step(model, state, tokens, pos, source, mask, {});
  return state;
}

template <typename T>
std::vector<SourceMemory<T>> source_over(const Model<T>& model, const std::deque<typename EncoderCache<T>::Entry>& entries) {
  std::vector<Tensor<T>> outs;
  for (const auto& e : entries) outs.push_back(e.output);
  return project_source(model, outs.size() == 1 ? outs.front() : concat_rows(outs));
}

}  // namespace

template <typename T>
std::vector<UtteranceDecode> decode_conversation(const Model<T>& model, const Conversation& conversation,
                                                 const ConversationDecodeOptions& options, const LmScorer* lm) {
  options.search.validate();
  if (conversation.features.size() != conversation.records.size())
    throw ContractError("features of conversation " + conversation.id + " not loaded");
  NoGradGuard guard;
  const auto& cfg = model.config;
  const std::int64_t n_enc = static_cast<std::int64_t>(model.encoder.size());
  const std::int64_t n_dec = static_cast<std::int64_t>(model.decoder.size());
  const std::int64_t H = cfg.n_heads, dh = cfg.head_dim();

  std::vector<UtteranceDecode> out;
  std::map<std::string, RecycleSession<T>> sessions;
  Conversation decoded_view = conversation;
  LmState lm_state = lm ? lm->initial_state() : LmState{};

  for (int u = 0; u < static_cast<int>(conversation.records.size()); ++u) {
    const auto& rec = conversation.records[static_cast<std::size_t>(u)];
    const auto started = std::chrono::steady_clock::now();
    const auto feats = conversation.features[static_cast<std::size_t>(u)].template cast<T>();
    UtteranceDecode res;
    res.conversation_id = conversation.id;
    res.utterance_index = u;
    std::vector<std::int64_t> window_token_lens;
    Hypothesis<T> hyp;

    if (options.recycle) {
      const std::string key = options.speaker_dependent ? rec.speaker_id : std::string();
      auto& s = sessions.try_emplace(key, model, options.budget_frames).first->second;
      const int evicted = s.cache.make_room(feats.rows());
      for (int e = 0; e < evicted; ++e) {
        for (auto& layer : s.decoder.layers) layer.evict_front(s.token_lens.front());
        s.token_lens.pop_front();
        s.transcripts.pop_front();
      }
      reset_attention_macs();
      auto enc = encode_incremental(model, feats, s.cache, u);
      res.macs.self_measured = attention_macs();
      for (const auto& e : s.cache.entries()) res.window.push_back(e.utterance_index);
      res.window_frames = s.cache.cached_frames();
      res.current_frames = enc.rows();
      window_token_lens.assign(s.token_lens.begin(), s.token_lens.end());

      SearchContext<T> sc;
      if (options.span == SourceSpan::kCurrentUtterance) {
        sc.source = project_source(model, enc);
        sc.decoder = s.decoder;
        sc.next_position = s.next_token_position;
      } else {
        // Context tokens attend to the whole window, which moved; their
        // decoder rows are recomputed while the encoder side stays cached.
        sc.source = source_over<T>(model, s.cache.entries());
        const std::vector<std::vector<int>> ts(s.transcripts.begin(), s.transcripts.end());
        const std::vector<std::pair<std::int64_t, std::int64_t>> spans(ts.size(), {0, res.window_frames});
        sc.decoder = context_stream(model, ts, spans, sc.source, res.window_frames);
        sc.next_position = sc.decoder.length();
      }
      sc.source_row = AttentionMask(1, sc.source.front().rows(), true);
      sc.ctc = CtcPosterior::from_tensor(ctc_log_probs(model, enc));
      sc.lm_state = lm_state;
      hyp = joint_beam_search(model, sc, options.search, lm);
      s.decoder = *hyp.parent_state;
      const auto len = static_cast<std::int64_t>(hyp.tokens.size()) + 1;
      s.token_lens.push_back(len);
      s.transcripts.push_back(hyp.tokens);
      s.next_token_position += len;
    } else {
      auto seg = assemble_segment(decoded_view, u, options.budget_frames, options.speaker_dependent);
      res.window = seg.utterance_indices;
      SegmentLayout layout;
      for (const auto& f : seg.utterance_features) layout.utt_frame_lens.push_back(subsampled_length(f.rows()));
      std::vector<Tensor<T>> utt_feats;
      for (const auto& f : seg.utterance_features) utt_feats.push_back(f.template cast<T>());
      reset_attention_macs();
      auto enc = encode_segment(model, utt_feats, encoder_context_mask(layout), {});
      res.macs.self_measured = attention_macs();
      const auto cur = layout.current_index();
      const auto f0 = layout.frame_offset(cur), nf = layout.utt_frame_lens[cur];
      res.window_frames = layout.total_frames();
      res.current_frames = nf;

      auto source = project_source(model, enc);
      std::vector<std::pair<std::int64_t, std::int64_t>> spans;
      for (std::size_t j = 0; j < seg.context_transcripts.size(); ++j) {
        if (options.span == SourceSpan::kCurrentUtterance)
          spans.emplace_back(layout.frame_offset(j), layout.frame_offset(j) + layout.utt_frame_lens[j]);
        else
          spans.emplace_back(0, res.window_frames);
        window_token_lens.push_back(static_cast<std::int64_t>(seg.context_transcripts[j].size()) + 1);
      }
      auto ctx_state = context_stream(model, seg.context_transcripts, spans, source, res.window_frames);
      SearchContext<T> sc;
      sc.source = std::move(source);
      sc.source_row = AttentionMask(1, res.window_frames, options.span != SourceSpan::kCurrentUtterance);
      if (options.span == SourceSpan::kCurrentUtterance)
        for (auto f = f0; f < f0 + nf; ++f) sc.source_row.set(0, f, true);
      sc.decoder = std::move(ctx_state);
      sc.next_position = sc.decoder.length();
      sc.ctc = CtcPosterior::from_tensor(ctc_log_probs(model, slice_rows(enc, f0, f0 + nf)));
      sc.lm_state = lm_state;
      hyp = joint_beam_search(model, sc, options.search, lm);
    }

    decoded_view.records[static_cast<std::size_t>(u)].transcript = hyp.tokens;
    if (lm) lm_state = hyp.lm_state;
    res.tokens = hyp.tokens;
    res.score = hyp.final_score(options.search);
    res.forced_end = hyp.forced_end;
    res.current_tokens = static_cast<std::int64_t>(hyp.tokens.size()) + 1;
    res.window_tokens = res.current_tokens;
    for (auto n : window_token_lens) res.window_tokens += n;
    const auto src_keys = options.span == SourceSpan::kCurrentUtterance ? res.current_frames : res.window_frames;
    res.macs.self_recycled = n_enc * count_attention_macs(res.current_frames, res.window_frames, H, dh);
    res.macs.self_recompute = n_enc * count_attention_macs(res.window_frames, res.window_frames, H, dh);
    res.macs.source_recycled = n_dec * count_attention_macs(res.current_tokens, src_keys, H, dh);
    res.macs.source_recompute = n_dec * count_attention_macs(res.window_tokens, res.window_frames, H, dh);
    res.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    out.push_back(std::move(res));
  }
  return out;
}

#define CTXASR_INSTANTIATE_DECODING(T)                                                                          \
  template class EncoderCache<T>;                                                                               \
  template Tensor<T> encode_incremental<T>(const Model<T>&, const Tensor<T>&, EncoderCache<T>&, int);           \
  template struct Hypothesis<T>;                                                                                \
  template SearchContext<T> utterance_search_context<T>(const Model<T>&, const Tensor<T>&);                     \
  template Hypothesis<T> joint_beam_search<T>(const Model<T>&, const SearchContext<T>&, const DecodeOptions&,   \
                                              const LmScorer*);                                                 \
  template std::vector<UtteranceDecode> decode_conversation<T>(const Model<T>&, const Conversation&,            \
                                                               const ConversationDecodeOptions&, const LmScorer*);

CTXASR_INSTANTIATE_DECODING(float)
CTXASR_INSTANTIATE_DECODING(double)

#undef CTXASR_INSTANTIATE_DECODING

}  // namespace ctxasr
