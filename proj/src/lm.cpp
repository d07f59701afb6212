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

#include "ctxasr/lm.h"

#include <cmath>
#include <string>

#include "ctxasr/errors.h"

namespace ctxasr {

namespace {

void check_token(int token, int vocab_size) {
  if (token < 1 || token > vocab_size - 1)
    throw VocabularyError("LM token " + std::to_string(token) + " outside [1, " + std::to_string(vocab_size - 1) + "]");
}

}  // namespace

LmState LmScorer::advance(const LmState& state, int token) const {
  LmState next = state;
  next.history.push_back(token);
  return next;
}

double UniformLm::log_prob(const LmState&, int token) const {
  check_token(token, vocab_size_);
  return -std::log(static_cast<double>(vocab_size_ - 1));
}

NgramLm::NgramLm(int order, int vocab_size, double add_k) : order_(order), vocab_size_(vocab_size), add_k_(add_k) {
  if (order < 1) throw ConfigError("n-gram order must be >= 1");
  if (vocab_size < 3) throw ConfigError("n-gram vocabulary must have at least one real token");
  if (add_k <= 0) throw ConfigError("add-k must be > 0");
}

std::vector<int> NgramLm::context_of(const LmState& state) const {
  const auto n = static_cast<std::size_t>(order_ - 1);
  std::vector<int> ctx(n, vocab_size_ - 1);
  const auto& h = state.history;
  for (std::size_t i = 0; i < n && i < h.size(); ++i) ctx[n - 1 - i] = h[h.size() - 1 - i];
  return ctx;
}

void NgramLm::train(const std::vector<std::vector<std::vector<int>>>& conversations) {
  const int eos = vocab_size_ - 1;
  for (const auto& conv : conversations) {
    LmState state;
    for (const auto& utt : conv) {
      auto emit = [&](int tok) {
        check_token(tok, vocab_size_);
        const auto ctx = context_of(state);
        ++counts_[ctx][tok];
        ++totals_[ctx];
        state = advance(state, tok);
      };
      for (int t : utt) emit(t);
      emit(eos);
    }
  }
}

double NgramLm::log_prob(const LmState& state, int token) const {
  check_token(token, vocab_size_);
  const auto ctx = context_of(state);
  const double outcomes = static_cast<double>(vocab_size_ - 1);
  std::int64_t c = 0, total = 0;
  if (auto it = totals_.find(ctx); it != totals_.end()) {
    total = it->second;
    const auto& row = counts_.at(ctx);
    if (auto jt = row.find(token); jt != row.end()) c = jt->second;
  }
  return std::log((static_cast<double>(c) + add_k_) / (static_cast<double>(total) + add_k_ * outcomes));
}

LmState NgramLm::advance(const LmState& state, int token) const {
  LmState next = LmScorer::advance(state, token);
  const auto keep = static_cast<std::size_t>(std::max(order_ - 1, 0));
  if (next.history.size() > keep) next.history.erase(next.history.begin(), next.history.end() - static_cast<std::ptrdiff_t>(keep));
  return next;
}

std::int64_t NgramLm::count(const std::vector<int>& history, int token) const {
  auto it = counts_.find(history);
  if (it == counts_.end()) return 0;
  auto jt = it->second.find(token);
  return jt == it->second.end() ? 0 : jt->second;
}

std::int64_t NgramLm::context_count(const std::vector<int>& history) const {
  auto it = totals_.find(history);
  return it == totals_.end() ? 0 : it->second;
}

}  // namespace ctxasr
