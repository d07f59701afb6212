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

#include "ctxasr/ctc.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace ctxasr {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Blank-augmented label sequence: blank, y1, blank, y2, ..., yL, blank.
std::vector<int> augment(std::span<const int> target, int blank) {
  std::vector<int> ext(2 * target.size() + 1, blank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  return ext;
}

bool can_skip(const std::vector<int>& ext, std::size_t s, int blank) {
  return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
}

void check_tokens(std::span<const int> target, std::int64_t vocab, int blank) {
  for (int y : target) {
    if (y < 0 || y >= vocab || y == blank) {
      throw VocabularyError("CTC target id " + std::to_string(y) + " invalid for vocabulary of " +
                            std::to_string(vocab) + " with blank " + std::to_string(blank));
    }
  }
}

// alpha[t][s] includes the emission at frame t.
std::vector<double> forward_lattice(const CtcPosterior& post, const std::vector<int>& ext, int blank) {
  const auto T = post.frames;
  const auto S = ext.size();
  std::vector<double> alpha(static_cast<std::size_t>(T) * S, kNegInf);
  if (T == 0) return alpha;
  alpha[0] = post.at(0, ext[0]);
  if (S > 1) alpha[1] = post.at(0, ext[1]);
  for (std::int64_t t = 1; t < T; ++t) {
    const double* prev = alpha.data() + (t - 1) * static_cast<std::int64_t>(S);
    double* cur = alpha.data() + t * static_cast<std::int64_t>(S);
    for (std::size_t s = 0; s < S; ++s) {
      double acc = prev[s];
      if (s >= 1) acc = log_add(acc, prev[s - 1]);
      if (can_skip(ext, s, blank)) acc = log_add(acc, prev[s - 2]);
      cur[s] = acc == kNegInf ? kNegInf : acc + post.at(t, ext[s]);
    }
  }
  return alpha;
}

std::vector<double> backward_lattice(const CtcPosterior& post, const std::vector<int>& ext, int blank) {
  const auto T = post.frames;
  const auto S = ext.size();
  std::vector<double> beta(static_cast<std::size_t>(T) * S, kNegInf);
  if (T == 0) return beta;
  double* last = beta.data() + (T - 1) * static_cast<std::int64_t>(S);
  last[S - 1] = post.at(T - 1, ext[S - 1]);
  if (S > 1) last[S - 2] = post.at(T - 1, ext[S - 2]);
  for (std::int64_t t = T - 2; t >= 0; --t) {
    const double* next = beta.data() + (t + 1) * static_cast<std::int64_t>(S);
    double* cur = beta.data() + t * static_cast<std::int64_t>(S);
    for (std::size_t s = 0; s < S; ++s) {
      double acc = next[s];
      if (s + 1 < S) acc = log_add(acc, next[s + 1]);
      if (s + 2 < S && can_skip(ext, s + 2, blank)) acc = log_add(acc, next[s + 2]);
      cur[s] = acc == kNegInf ? kNegInf : acc + post.at(t, ext[s]);
    }
  }
  return beta;
}

double total_from_alpha(const std::vector<double>& alpha, std::int64_t T, std::size_t S) {
  if (T == 0) return S == 1 ? 0.0 : kNegInf;
  const double* last = alpha.data() + (T - 1) * static_cast<std::int64_t>(S);
  return S > 1 ? log_add(last[S - 1], last[S - 2]) : last[S - 1];
}

}  // namespace

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

CtcPosterior::CtcPosterior(std::int64_t f, std::int64_t v, std::vector<double> lp)
    : frames(f), vocab(v), log_probs(std::move(lp)) {
  if (static_cast<std::int64_t>(log_probs.size()) != frames * vocab) {
    throw DimensionError("CTC posterior size does not match " + std::to_string(frames) + "x" + std::to_string(vocab));
  }
}

template <typename T>
CtcPosterior CtcPosterior::from_tensor(const Tensor<T>& lp) {
  if (lp.ndim() != 2) throw DimensionError("CTC posterior must be 2-D, got " + shape_string(lp.shape()));
  return CtcPosterior(lp.rows(), lp.cols(), std::vector<double>(lp.data().begin(), lp.data().end()));
}

CtcPosterior CtcPosterior::slice(std::int64_t begin, std::int64_t end) const {
  if (begin < 0 || end < begin || end > frames) throw DimensionError("CTC posterior slice out of range");
  return CtcPosterior(end - begin, vocab,
                      std::vector<double>(log_probs.begin() + begin * vocab, log_probs.begin() + end * vocab));
}

void CtcPosterior::validate(double tol) const {
  for (std::int64_t t = 0; t < frames; ++t) {
    double acc = kNegInf;
    for (double v : row(t)) acc = log_add(acc, v);
    if (std::abs(acc) > tol) {
      throw NumericalError("CTC posterior row " + std::to_string(t) + " has logsumexp " + std::to_string(acc));
    }
  }
}

std::int64_t ctc_min_frames(std::span<const int> target) {
  std::int64_t n = static_cast<std::int64_t>(target.size());
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

double ctc_log_likelihood(const CtcPosterior& post, std::span<const int> target, int blank) {
  check_tokens(target, post.vocab, blank);
  if (ctc_min_frames(target) > post.frames) return kNegInf;
  const auto ext = augment(target, blank);
  return total_from_alpha(forward_lattice(post, ext, blank), post.frames, ext.size());
}

template <typename T>
Tensor<T> ctc_loss(const Tensor<T>& log_probs, std::span<const int> target, int blank) {
  const auto post = CtcPosterior::from_tensor(log_probs);
  check_tokens(target, post.vocab, blank);
  if (ctc_min_frames(target) > post.frames) {
    throw InfeasibleAlignmentError("target of " + std::to_string(target.size()) + " tokens needs at least " +
                                   std::to_string(ctc_min_frames(target)) + " frames, got " +
                                   std::to_string(post.frames));
  }
  const auto ext = augment(target, blank);
  auto alpha = forward_lattice(post, ext, blank);
  const double log_p = total_from_alpha(alpha, post.frames, ext.size());
  if (!std::isfinite(log_p)) throw InfeasibleAlignmentError("CTC alignment has zero probability");
  const auto S = ext.size();
  const auto V = post.vocab;
  const auto frames = post.frames;
  return detail::make_op<T>({}, {static_cast<T>(-log_p)}, {&log_probs}, "ctc_loss",
                            [log_probs, post, ext, alpha = std::move(alpha), log_p, S, V, frames,
                             blank](typename Tensor<T>::Node& self) {
    const auto beta = backward_lattice(post, ext, blank);
    auto g = log_probs.node()->grad_buffer();
    const double upstream = static_cast<double>(self.grad[0]);
    for (std::int64_t t = 0; t < frames; ++t) {
      for (std::size_t s = 0; s < S; ++s) {
        const auto idx = static_cast<std::size_t>(t) * S + s;
        if (alpha[idx] == kNegInf || beta[idx] == kNegInf) continue;
        const double occ = std::exp(alpha[idx] + beta[idx] - post.at(t, ext[s]) - log_p);
        g[static_cast<std::size_t>(t * V + ext[s])] -= static_cast<T>(upstream * occ);
      }
    }
  });
}

std::vector<int> ctc_greedy_decode(const CtcPosterior& post, int blank) {
  std::vector<int> out;
  int prev = -1;
  for (std::int64_t t = 0; t < post.frames; ++t) {
    const auto r = post.row(t);
    const int best = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    if (best != blank && best != prev) out.push_back(best);
    prev = best;
  }
  return out;
}

CtcAlignment ctc_viterbi(const CtcPosterior& post, std::span<const int> target, int blank) {
  check_tokens(target, post.vocab, blank);
  if (ctc_min_frames(target) > post.frames) {
    throw InfeasibleAlignmentError("no alignment of " + std::to_string(target.size()) + " tokens into " +
                                   std::to_string(post.frames) + " frames");
  }
  const auto ext = augment(target, blank);
  const auto S = ext.size();
  const auto T = post.frames;
  std::vector<double> score(static_cast<std::size_t>(T) * S, kNegInf);
  std::vector<int> from(score.size(), -1);
  score[0] = post.at(0, ext[0]);
  if (S > 1) score[1] = post.at(0, ext[1]);
  for (std::int64_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      const auto prev = static_cast<std::size_t>(t - 1) * S;
      double best = score[prev + s];
      int arg = static_cast<int>(s);
      if (s >= 1 && score[prev + s - 1] > best) {
        best = score[prev + s - 1];
        arg = static_cast<int>(s - 1);
      }
      if (can_skip(ext, s, blank) && score[prev + s - 2] > best) {
        best = score[prev + s - 2];
        arg = static_cast<int>(s - 2);
      }
      if (best == kNegInf) continue;
      score[static_cast<std::size_t>(t) * S + s] = best + post.at(t, ext[s]);
      from[static_cast<std::size_t>(t) * S + s] = arg;
    }
  }
  const auto last = static_cast<std::size_t>(T - 1) * S;
  std::size_t s = S - 1;
  if (S > 1 && score[last + S - 2] > score[last + S - 1]) s = S - 2;
  CtcAlignment out;
  out.log_score = score[last + s];
  if (out.log_score == kNegInf) throw InfeasibleAlignmentError("CTC alignment has zero probability");
  std::vector<std::size_t> path(static_cast<std::size_t>(T));
  for (std::int64_t t = T - 1; t >= 0; --t) {
    path[static_cast<std::size_t>(t)] = s;
    if (t > 0) s = static_cast<std::size_t>(from[static_cast<std::size_t>(t) * S + s]);
  }
  out.trigger_frames.assign(target.size(), -1);
  for (std::int64_t t = 0; t < T; ++t) {
    const auto st = path[static_cast<std::size_t>(t)];
    if (st % 2 == 1 && out.trigger_frames[st / 2] < 0) out.trigger_frames[st / 2] = t;
  }
  return out;
}

std::vector<std::int64_t> ctc_trigger_times(const CtcPosterior& post, std::span<const int> target, int blank) {
  return ctc_viterbi(post, target, blank).trigger_frames;
}

std::vector<CtcPrefix> ctc_prefix_beam_step(const std::vector<CtcPrefix>& beam, std::span<const double> lp,
                                            std::int64_t frame, const PrefixBeamOptions& options,
                                            const ExpansionCallback& expand) {
  if (options.beam_size < 1) throw ContractError("beam_size must be >= 1");
  const int blank = options.blank;
  std::vector<int> candidates = options.candidates;
  if (candidates.empty()) {
    for (int k = 0; k < static_cast<int>(lp.size()); ++k)
      if (k != blank) candidates.push_back(k);
  }
  std::map<std::vector<int>, CtcPrefix> next;
  for (const auto& p : beam) {
    CtcPrefix carried = p;
    carried.log_p_blank = kNegInf;
    carried.log_p_nonblank = kNegInf;
    next.emplace(p.tokens, std::move(carried));
  }
  for (const auto& p : beam) {
    const double total = p.total();
    auto& same = next.at(p.tokens);
    same.log_p_blank = log_add(same.log_p_blank, total + lp[static_cast<std::size_t>(blank)]);
    const int last = p.tokens.empty() ? -1 : p.tokens.back();
    if (last >= 0) same.log_p_nonblank = log_add(same.log_p_nonblank, p.log_p_nonblank + lp[static_cast<std::size_t>(last)]);
    for (int c : candidates) {
      const double add = (c == last ? p.log_p_blank : total) + lp[static_cast<std::size_t>(c)];
      if (add == kNegInf) continue;
      auto tokens = p.tokens;
      tokens.push_back(c);
      auto it = next.find(tokens);
      if (it == next.end()) {
        CtcPrefix fresh;
        fresh.tokens = std::move(tokens);
        fresh.log_p_blank = kNegInf;
        fresh.log_p_nonblank = kNegInf;
        fresh.trigger_frames = p.trigger_frames;
        fresh.trigger_frames.push_back(frame);
        fresh.bonus = p.bonus;
        if (expand) fresh.bonus += expand(p, c, frame, fresh.payload);
        it = next.emplace(fresh.tokens, std::move(fresh)).first;
      }
      it->second.log_p_nonblank = log_add(it->second.log_p_nonblank, add);
    }
  }
  std::vector<CtcPrefix> out;
  out.reserve(next.size());
  for (auto& [tokens, p] : next)
    if (p.total() != kNegInf) out.push_back(std::move(p));
  // std::map iteration is lexicographic, so a stable sort keeps the smaller
  // token sequence first among equal scores.
  std::stable_sort(out.begin(), out.end(), [&](const CtcPrefix& a, const CtcPrefix& b) {
    return prefix_rank_score(a, options.ctc_weight) > prefix_rank_score(b, options.ctc_weight);
  });
  if (out.size() > static_cast<std::size_t>(options.beam_size)) out.resize(static_cast<std::size_t>(options.beam_size));
  return out;
}

CtcPrefixScorer::CtcPrefixScorer(const CtcPosterior& posterior, int blank, int eos)
    : posterior_(posterior), blank_(blank), eos_(eos) {}

CtcPrefixScorer::State CtcPrefixScorer::initial() const {
  State s;
  const auto T = posterior_.frames;
  s.r_nonblank.assign(static_cast<std::size_t>(T), kNegInf);
  s.r_blank.assign(static_cast<std::size_t>(T), kNegInf);
  double acc = 0.0;
  for (std::int64_t t = 0; t < T; ++t) {
    acc += posterior_.at(t, blank_);
    s.r_blank[static_cast<std::size_t>(t)] = acc;
  }
  s.psi = 0.0;
  return s;
}

CtcPrefixScorer::State CtcPrefixScorer::extend(const State& state, int token) const {
  const auto T = posterior_.frames;
  State out;
  out.last = token;
  out.length = state.length + 1;
  if (token == eos_) {
    out.psi = T == 0 ? (state.length == 0 ? 0.0 : kNegInf)
                     : log_add(state.r_nonblank[static_cast<std::size_t>(T - 1)], state.r_blank[static_cast<std::size_t>(T - 1)]);
    return out;
  }
  out.r_nonblank.assign(static_cast<std::size_t>(T), kNegInf);
  out.r_blank.assign(static_cast<std::size_t>(T), kNegInf);
  if (T == 0) {
    out.psi = kNegInf;
    return out;
  }
  auto phi = [&](std::int64_t t) {
    const auto i = static_cast<std::size_t>(t);
    return token == state.last ? state.r_blank[i] : log_add(state.r_nonblank[i], state.r_blank[i]);
  };
  if (state.length == 0) out.r_nonblank[0] = posterior_.at(0, token);
  double psi = out.r_nonblank[0];
  double peak = psi;
  out.trigger = 0;
  for (std::int64_t t = 1; t < T; ++t) {
    const auto i = static_cast<std::size_t>(t);
    const double ph = phi(t - 1);
    const double x_c = posterior_.at(t, token);
    out.r_nonblank[i] = log_add(out.r_nonblank[i - 1], ph);
    if (out.r_nonblank[i] != kNegInf) out.r_nonblank[i] += x_c;
    out.r_blank[i] = log_add(out.r_nonblank[i - 1], out.r_blank[i - 1]);
    if (out.r_blank[i] != kNegInf) out.r_blank[i] += posterior_.at(t, blank_);
    if (ph != kNegInf) {
      psi = log_add(psi, ph + x_c);
      if (ph + x_c > peak) {
        peak = ph + x_c;
        out.trigger = t;
      }
    }
  }
  out.psi = psi;
  return out;
}

template CtcPosterior CtcPosterior::from_tensor<float>(const Tensor<float>&);
template CtcPosterior CtcPosterior::from_tensor<double>(const Tensor<double>&);
template Tensor<float> ctc_loss<float>(const Tensor<float>&, std::span<const int>, int);
template Tensor<double> ctc_loss<double>(const Tensor<double>&, std::span<const int>, int);

}  // namespace ctxasr
