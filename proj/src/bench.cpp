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

#include "ctxasr/bench.h"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <sstream>

namespace ctxasr {

void BenchOptions::validate() const {
  decode.search.validate();
  if (repetitions < 3) throw ConfigError("bench needs at least 3 repetitions");
  if (warmup < 0) throw ConfigError("warmup must be >= 0");
}

void to_json(nlohmann::json& j, const BenchOptions& o) {
  j = {{"search", o.decode.search},
       {"budget_frames", o.decode.budget_frames},
       {"source_span", to_string(o.decode.span)},
       {"speaker_dependent", o.decode.speaker_dependent},
       {"repetitions", o.repetitions},
       {"warmup", o.warmup}};
}

void from_json(const nlohmann::json& j, BenchOptions& o) {
  reject_unknown_keys(j, {"search", "budget_frames", "source_span", "speaker_dependent", "repetitions", "warmup"},
                      "bench");
  if (j.contains("search")) o.decode.search = j.at("search").get<DecodeOptions>();
  o.decode.budget_frames = j.value("budget_frames", o.decode.budget_frames);
  if (j.contains("source_span")) o.decode.span = parse_source_span(j.at("source_span").get<std::string>());
  o.decode.speaker_dependent = j.value("speaker_dependent", o.decode.speaker_dependent);
  o.repetitions = j.value("repetitions", o.repetitions);
  o.warmup = j.value("warmup", o.warmup);
}

double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median of an empty set");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double BenchRow::self_mac_ratio() const {
  return static_cast<double>(macs.self_recycled) / static_cast<double>(macs.self_recompute);
}

double BenchRow::source_mac_ratio() const {
  return static_cast<double>(macs.source_recycled) / static_cast<double>(macs.source_recompute);
}

void BenchReport::aggregate() {
  audio_ms = 0;
  self_recycled = self_recompute = source_recycled = source_recompute = 0;
  std::vector<double> off_tot(static_cast<std::size_t>(repetitions), 0.0), on_tot(off_tot);
  for (const auto& r : rows) {
    if (static_cast<int>(r.wall_ms_off.size()) != repetitions || static_cast<int>(r.wall_ms_on.size()) != repetitions)
      throw ContractError("bench row without one timing per repetition");
    audio_ms += r.audio_ms;
    self_recycled += r.macs.self_recycled;
    self_recompute += r.macs.self_recompute;
    source_recycled += r.macs.source_recycled;
    source_recompute += r.macs.source_recompute;
    for (int k = 0; k < repetitions; ++k) {
      off_tot[static_cast<std::size_t>(k)] += r.wall_ms_off[static_cast<std::size_t>(k)];
      on_tot[static_cast<std::size_t>(k)] += r.wall_ms_on[static_cast<std::size_t>(k)];
    }
  }
  auto arm = [&](const std::vector<double>& tot) {
    BenchArm a;
    a.wall_ms_median = median(tot);
    a.wall_ms_min = *std::min_element(tot.begin(), tot.end());
    a.wall_ms_max = *std::max_element(tot.begin(), tot.end());
    a.pseudo_rtf = audio_ms > 0 ? a.wall_ms_median / audio_ms : 0.0;
    return a;
  };
  off = arm(off_tot);
  on = arm(on_tot);
  speedup = on.wall_ms_median > 0 ? off.wall_ms_median / on.wall_ms_median : 0.0;
  self_mac_ratio = static_cast<double>(self_recycled) / static_cast<double>(std::max<std::int64_t>(self_recompute, 1));
  source_mac_ratio =
      static_cast<double>(source_recycled) / static_cast<double>(std::max<std::int64_t>(source_recompute, 1));
}

std::string BenchReport::summary_table() const {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %12s %12s %12s %12s\n", "arm", "median ms", "min ms", "max ms", "pseudo-RTF");
  os << line;
  for (const auto& [name, a] : {std::pair<const char*, const BenchArm&>{"recompute", off}, {"recycle", on}}) {
    std::snprintf(line, sizeof line, "%-10s %12.2f %12.2f %12.2f %12.4f\n", name, a.wall_ms_median, a.wall_ms_min,
                  a.wall_ms_max, a.pseudo_rtf);
    os << line;
  }
  std::snprintf(line, sizeof line, "speedup %.3fx over %d repetitions, %zu utterances, %.1f s of audio\n", speedup,
                repetitions, rows.size(), audio_ms / 1000.0);
  os << line;
  std::snprintf(line, sizeof line, "self-attention MACs recycled/recompute %.4f (%lld / %lld)\n", self_mac_ratio,
                static_cast<long long>(self_recycled), static_cast<long long>(self_recompute));
  os << line;
  std::snprintf(line, sizeof line, "source-attention MACs recycled/recompute %.4f (%lld / %lld)\n", source_mac_ratio,
                static_cast<long long>(source_recycled), static_cast<long long>(source_recompute));
  os << line;
  return os.str();
}

void to_json(nlohmann::json& j, const BenchRow& r) {
  j = {{"conversation_id", r.conversation_id},
       {"utterance_index", r.utterance_index},
       {"tokens", r.tokens},
       {"current_frames", r.current_frames},
       {"window_frames", r.window_frames},
       {"audio_ms", r.audio_ms},
       {"wall_ms_off", r.wall_ms_off},
       {"wall_ms_on", r.wall_ms_on},
       {"self_macs_recycled", r.macs.self_recycled},
       {"self_macs_recompute", r.macs.self_recompute},
       {"source_macs_recycled", r.macs.source_recycled},
       {"source_macs_recompute", r.macs.source_recompute},
       {"self_mac_ratio", r.self_mac_ratio()},
       {"source_mac_ratio", r.source_mac_ratio()}};
}

void to_json(nlohmann::json& j, const BenchReport& r) {
  auto arm = [](const BenchArm& a) {
    return nlohmann::json{{"wall_ms_median", a.wall_ms_median},
                          {"wall_ms_min", a.wall_ms_min},
                          {"wall_ms_max", a.wall_ms_max},
                          {"pseudo_rtf", a.pseudo_rtf}};
  };
  j = {{"repetitions", r.repetitions},
       {"utterances", r.rows.size()},
       {"audio_ms", r.audio_ms},
       {"recompute", arm(r.off)},
       {"recycle", arm(r.on)},
       {"speedup", r.speedup},
       {"self_mac_ratio", r.self_mac_ratio},
       {"source_mac_ratio", r.source_mac_ratio},
       {"self_macs_recycled", r.self_recycled},
       {"self_macs_recompute", r.self_recompute},
       {"source_macs_recycled", r.source_recycled},
       {"source_macs_recompute", r.source_recompute}};
}

template <typename T>
BenchReport bench_decode(const Model<T>& model, const std::vector<Conversation>& conversations,
                         const BenchOptions& options, const LmScorer* lm) {
  options.validate();
  auto off = options.decode, on = options.decode;
  off.recycle = false;
  on.recycle = true;
  for (int w = 0; w < options.warmup; ++w)
    for (const auto& c : conversations) {
      decode_conversation(model, c, off, lm);
      decode_conversation(model, c, on, lm);
    }

  BenchReport report;
  report.repetitions = options.repetitions;
  for (const auto& c : conversations)
    for (std::size_t u = 0; u < c.records.size(); ++u) {
      BenchRow row;
      row.conversation_id = c.id;
      row.utterance_index = static_cast<int>(u);
      row.audio_ms = static_cast<double>(c.records[u].num_frames) * c.records[u].frame_period_ms;
      report.rows.push_back(std::move(row));
    }

  for (int rep = 0; rep < options.repetitions; ++rep) {
    std::size_t base = 0;
    for (const auto& c : conversations) {
      // Arms alternate within a repetition so drift affects both alike.
      auto a = decode_conversation(model, c, off, lm);
      auto b = decode_conversation(model, c, on, lm);
      for (std::size_t u = 0; u < a.size(); ++u) {
        auto& row = report.rows[base + u];
        if (a[u].tokens != b[u].tokens) {
          throw BenchmarkInvalidError("recycling changed the output of " + c.id + " utterance " + std::to_string(u) +
                                      "; the arms are not equivalent");
        }
        if (rep == 0) {
          row.tokens = b[u].tokens;
          row.current_frames = b[u].current_frames;
          row.window_frames = b[u].window_frames;
          row.macs = b[u].macs;
        } else if (row.tokens != b[u].tokens) {
          throw BenchmarkInvalidError("decoding of " + c.id + " is not deterministic across repetitions");
        }
        row.wall_ms_off.push_back(a[u].wall_ms);
        row.wall_ms_on.push_back(b[u].wall_ms);
      }
      base += a.size();
    }
  }
  report.aggregate();
  return report;
}

template BenchReport bench_decode<float>(const Model<float>&, const std::vector<Conversation>&, const BenchOptions&,
                                         const LmScorer*);
template BenchReport bench_decode<double>(const Model<double>&, const std::vector<Conversation>&, const BenchOptions&,
                                          const LmScorer*);

}  // namespace ctxasr
