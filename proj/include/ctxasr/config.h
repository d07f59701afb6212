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
#include <string>

#include "json.hpp"

namespace ctxasr {

enum class Arch { kTransformer, kConformer };
enum class PosEncoding { kAbsolute, kRelative };
enum class ConvMode { kCausal, kCentered };

// Token layout shared by every module: id 0 is the CTC blank, the last id
// doubles as start- and end-of-sequence for the decoder, and ids in between
// are ordinary tokens.
struct ModelConfig {
  int d_model = 32;
  int n_heads = 4;
  int d_ffn = 64;
  int n_enc_blocks = 2;
  int n_dec_blocks = 1;
  int vocab_size = 16;
  Arch arch = Arch::kTransformer;
  PosEncoding pos_encoding = PosEncoding::kRelative;
  int conv_kernel = 5;
  ConvMode conv_mode = ConvMode::kCausal;
  int subsample_factor = 4;
  double dropout_rate = 0.0;
  int feature_dim = 16;
  int subsample_channels = 8;
  // Relative offsets are clipped to [-(max_segment_frames-1), max_lookahead]
  // in the encoder and to [-(max_context_tokens-1), 0] in the decoder.
  int max_segment_frames = 256;
  int max_lookahead = 64;
  int max_context_tokens = 128;

  int blank_id() const { return 0; }
  int sos_id() const { return vocab_size - 1; }
  int eos_id() const { return vocab_size - 1; }
  int head_dim() const { return d_model / n_heads; }

  // Throws ConfigError on violated invariants.
  void validate() const;
};

std::string to_string(Arch arch);
std::string to_string(PosEncoding pe);
std::string to_string(ConvMode mode);

void to_json(nlohmann::json& j, const ModelConfig& c);
// Rejects unknown keys; missing keys keep their defaults.
void from_json(const nlohmann::json& j, ModelConfig& c);

bool operator==(const ModelConfig& a, const ModelConfig& b);

ModelConfig load_model_config(const std::string& path);
void save_model_config(const ModelConfig& config, const std::string& path);

// Shared helper: throws ConfigError naming the first key of j not in allowed.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const std::string& where);

}  // namespace ctxasr
