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

#include <map>
#include <memory>
#include <utility>
#include <vector>

namespace ctxasr {

// History of emitted tokens (real ids and eos), newest last.
struct LmState {
  std::vector<int> history;
};

// Next-token scorer over the real tokens 1..V-2 plus eos = V-1. States are
// plain values; a conversation carries the state from one utterance into the
// next.
class LmScorer {
 public:
  virtual ~LmScorer() = default;
  virtual int vocab_size() const = 0;
  virtual LmState initial_state() const { return {}; }
  virtual double log_prob(const LmState& state, int token) const = 0;
  virtual LmState advance(const LmState& state, int token) const;

  std::pair<double, LmState> score_next(const LmState& state, int token) const {
    return {log_prob(state, token), advance(state, token)};
  }
};

// Equal probability for every real token and eos.
class UniformLm : public LmScorer {
 public:
  explicit UniformLm(int vocab_size) : vocab_size_(vocab_size) {}
  int vocab_size() const override { return vocab_size_; }
  double log_prob(const LmState& state, int token) const override;

 private:
  int vocab_size_;
};

// Add-k smoothed n-gram over conversations: each utterance is followed by
// eos, and histories run across utterance boundaries. The start of a
// conversation is padded with eos.
class NgramLm : public LmScorer {
 public:
  NgramLm(int order, int vocab_size, double add_k = 0.1);

  // Each conversation is a list of utterance transcripts.
  void train(const std::vector<std::vector<std::vector<int>>>& conversations);

  int order() const { return order_; }
  int vocab_size() const override { return vocab_size_; }
  double log_prob(const LmState& state, int token) const override;
  LmState advance(const LmState& state, int token) const override;

  // Raw counts, for inspection: c(history, token) and c(history).
  std::int64_t count(const std::vector<int>& history, int token) const;
  std::int64_t context_count(const std::vector<int>& history) const;

 private:
  std::vector<int> context_of(const LmState& state) const;

  int order_;
  int vocab_size_;
  double add_k_;
  std::map<std::vector<int>, std::map<int, std::int64_t>> counts_;
  std::map<std::vector<int>, std::int64_t> totals_;
};

}  // namespace ctxasr
