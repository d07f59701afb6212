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
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "ctxasr/tensor.h"

namespace ctxasr {

double log_add(double a, double b);

// Per-frame CTC log posteriors [frames x vocab]; column 0 is the blank.
struct CtcPosterior {
  std::int64_t frames = 0;
  std::int64_t vocab = 0;
  std::vector<double> log_probs;

  CtcPosterior() = default;
  CtcPosterior(std::int64_t frames, std::int64_t vocab, std::vector<double> log_probs);
  template <typename T>
  static CtcPosterior from_tensor(const Tensor<T>& log_probs);

  double at(std::int64_t t, std::int64_t k) const { return log_probs[static_cast<std::size_t>(t * vocab + k)]; }
  std::span<const double> row(std::int64_t t) const {
    return {log_probs.data() + t * vocab, static_cast<std::size_t>(vocab)};
  }
  CtcPosterior slice(std::int64_t begin, std::int64_t end) const;
  // Throws NumericalError if some row's logsumexp is not 0 within tol.
  void validate(double tol = 1e-5) const;
};

// Fewest frames able to carry target: one per token plus a blank between
// each pair of equal neighbours.
std::int64_t ctc_min_frames(std::span<const int> target);

// -log p_ctc(target | x) as a differentiable scalar over log_probs [T x V].
// Throws InfeasibleAlignmentError when no alignment exists.
template <typename T>
Tensor<T> ctc_loss(const Tensor<T>& log_probs, std::span<const int> target, int blank = 0);

// log p_ctc(target | x); -inf when infeasible.
double ctc_log_likelihood(const CtcPosterior& posterior, std::span<const int> target, int blank = 0);

std::vector<int> ctc_greedy_decode(const CtcPosterior& posterior, int blank = 0);

struct CtcAlignment {
  double log_score = 0.0;
  std::vector<std::int64_t> trigger_frames;  // first frame of each token on the best path
};

// Viterbi best path over the blank-augmented lattice.
CtcAlignment ctc_viterbi(const CtcPosterior& posterior, std::span<const int> target, int blank = 0);
std::vector<std::int64_t> ctc_trigger_times(const CtcPosterior& posterior, std::span<const int> target,
                                            int blank = 0);

// Prefix of a frame-synchronous CTC beam. bonus accumulates the scores the
// expansion callback attached to each token; payload is owned by the caller.
struct CtcPrefix {
  std::vector<int> tokens;
  double log_p_blank = 0.0;
  double log_p_nonblank = -INFINITY;
  std::vector<std::int64_t> trigger_frames;
  double bonus = 0.0;
  std::shared_ptr<const void> payload;

  double total() const { return log_add(log_p_blank, log_p_nonblank); }
};

struct PrefixBeamOptions {
  int beam_size = 10;
  int blank = 0;
  double ctc_weight = 1.0;  // ranking score = ctc_weight·total + bonus
  std::vector<int> candidates;  // tokens considered for extension; empty = all but blank
};

// Returns the score the new token adds to bonus; may set the new prefix payload.
using ExpansionCallback =
    std::function<double(const CtcPrefix& parent, int token, std::int64_t frame, std::shared_ptr<const void>& payload)>;

std::vector<CtcPrefix> ctc_prefix_beam_step(const std::vector<CtcPrefix>& beam, std::span<const double> frame_log_probs,
                                            std::int64_t frame, const PrefixBeamOptions& options,
                                            const ExpansionCallback& expand = {});

inline double prefix_rank_score(const CtcPrefix& p, double ctc_weight) { return ctc_weight * p.total() + p.bonus; }

// Label-synchronous prefix scoring for joint CTC-attention beam search.
// psi(g) is the log-probability that the CTC output starts with g; for eos
// it is the probability of the complete sequence g.
class CtcPrefixScorer {
 public:
  struct State {
    std::vector<double> r_nonblank, r_blank;
    double psi = 0.0;
    int last = -1;
    std::int64_t length = 0;
    // Frame where the last token most likely first fires.
    std::int64_t trigger = -1;
  };

  CtcPrefixScorer(const CtcPosterior& posterior, int blank, int eos);
  State initial() const;
  State extend(const State& state, int token) const;
  const CtcPosterior& posterior() const { return posterior_; }

 private:
  CtcPosterior posterior_;
  int blank_;
  int eos_;
};

}  // namespace ctxasr
