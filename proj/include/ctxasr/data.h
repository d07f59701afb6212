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
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ctxasr/config.h"
#include "ctxasr/mask.h"
#include "ctxasr/tensor.h"

namespace ctxasr {

struct UtteranceRecord {
  std::string conversation_id;
  int utterance_index = 0;
  std::string speaker_id;
  std::string feature_path;
  std::vector<int> transcript;
  std::int64_t num_frames = 0;
  double frame_period_ms = 10.0;
};

struct Conversation {
  std::string id;
  std::vector<UtteranceRecord> records;  // sorted by utterance_index
  std::vector<Tensor<float>> features;   // parallel to records; may be empty until loaded
};

// Feature file: "CXF1" | u32 frames | u32 dim | frames*dim f32, little endian.
void write_features(const std::filesystem::path& path, const Tensor<float>& features);
Tensor<float> read_features(const std::filesystem::path& path);

// Tab-separated: conversation_id, utterance_index, speaker_id, feature_path,
// num_frames, space-separated token ids. Relative feature paths resolve
// against the manifest's directory. Feature headers are checked, data is not
// loaded.
std::vector<Conversation> load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<Conversation>& conversations);
void load_features(Conversation& conversation);
std::vector<Conversation> load_dataset(const std::filesystem::path& manifest);

struct GeneratorSpec {
  int n_conversations = 40;
  int utterances_per_conversation = 4;
  int n_speakers = 2;
  // Full model vocabulary: id 0 blank, last id sos/eos.
  int vocab_size = 16;
  double ambiguous_fraction = 0.3;
  int min_tokens = 3;
  int max_tokens = 6;
  int frames_per_token = 8;
  int silence_frames = 4;
  int feature_dim = 16;
  double noise_std = 0.1;

  void validate() const;
};

// Token roles derived from a spec. Ambiguous tokens come in pairs whose
// templates swap between even and odd speakers; disambiguators[s] is spoken
// only by speaker s, only in the first utterance of a conversation.
struct TokenInventory {
  std::vector<int> regular;
  std::vector<std::pair<int, int>> ambiguous_pairs;
  std::vector<int> disambiguators;

  bool is_ambiguous(int token) const;
  // Template row used when `speaker` says `token`; silence is row 0.
  int template_of(int token, int speaker) const;
};

void to_json(nlohmann::json& j, const GeneratorSpec& g);
void from_json(const nlohmann::json& j, GeneratorSpec& g);

TokenInventory token_inventory(const GeneratorSpec& spec);

std::vector<Conversation> generate_conversations(const GeneratorSpec& spec, std::uint64_t seed,
                                                 const std::string& id_prefix = "conv");

// Writes features under dir/feats and dir/manifest.tsv.
void write_dataset(const std::filesystem::path& dir, std::vector<Conversation>& conversations);

struct Segment {
  std::vector<Tensor<float>> utterance_features;  // oldest first; last is current
  std::vector<int> utterance_indices;
  std::vector<std::vector<int>> context_transcripts;
  std::vector<int> current_transcript;
  bool speaker_filtered = false;
  bool over_budget = false;

  std::int64_t total_frames() const;
  Tensor<float> features() const;
  // Encoder-frame layout; token lengths count the sos-prefixed streams.
  SegmentLayout layout() const;
};

// Whole previous utterances are added newest first while the segment total
// stays within budget_frames; with speaker_dependent, other speakers'
// utterances are skipped. The current utterance is always kept.
Segment assemble_segment(const Conversation& conversation, int current, std::int64_t budget_frames,
                         bool speaker_dependent);

struct SpecAugmentOptions {
  int n_time_masks = 2;
  int max_time_width = 10;
  int n_freq_masks = 2;
  int max_freq_width = 4;
};

struct MaskSpan {
  std::int64_t begin = 0;
  std::int64_t width = 0;
};

struct SpecAugmentResult {
  Tensor<float> features;
  std::vector<MaskSpan> time_masks;
  std::vector<MaskSpan> freq_masks;
};

SpecAugmentResult spec_augment(const Tensor<float>& features, const SpecAugmentOptions& options,
                               std::uint64_t seed);

}  // namespace ctxasr
