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

// Recycling benchmark: the same conversations decoded with recycling off and
// on, timed over repetitions.

#include <string>
#include <vector>

#include "ctxasr/decoding.h"

namespace ctxasr {

struct BenchOptions {
  ConversationDecodeOptions decode;  // recycle is set per arm
  int repetitions = 3;
  int warmup = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const BenchOptions& o);
void from_json(const nlohmann::json& j, BenchOptions& o);

struct BenchRow {
  std::string conversation_id;
  int utterance_index = 0;
  std::vector<int> tokens;
  std::int64_t current_frames = 0;
  std::int64_t window_frames = 0;
  double audio_ms = 0;
  std::vector<double> wall_ms_off, wall_ms_on;  // one entry per repetition
  AttentionMacs macs;

  double self_mac_ratio() const;    // recycled / recompute
  double source_mac_ratio() const;
};

struct BenchArm {
  double wall_ms_median = 0, wall_ms_min = 0, wall_ms_max = 0;
  double pseudo_rtf = 0;  // median wall time / synthetic audio duration
};

struct BenchReport {
  std::vector<BenchRow> rows;
  int repetitions = 0;
  double audio_ms = 0;
  BenchArm off, on;
  double speedup = 0;  // off median / on median
  std::int64_t self_recycled = 0, self_recompute = 0, source_recycled = 0, source_recompute = 0;
  double self_mac_ratio = 0, source_mac_ratio = 0;

  // Fills every aggregate from rows.
  void aggregate();
  std::string summary_table() const;
};

void to_json(nlohmann::json& j, const BenchRow& r);
void to_json(nlohmann::json& j, const BenchReport& r);

// Throws BenchmarkInvalidError when the two arms disagree on any token.
template <typename T>
BenchReport bench_decode(const Model<T>& model, const std::vector<Conversation>& conversations,
                         const BenchOptions& options, const LmScorer* lm = nullptr);

double median(std::vector<double> v);

}  // namespace ctxasr
