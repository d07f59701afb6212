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

#include "ctxasr/config.h"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "ctxasr/errors.h"

namespace ctxasr {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (d_model < 1 || n_heads < 1) fail("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) {
    fail("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (d_ffn < 1) fail("d_ffn must be positive");
  if (n_enc_blocks < 1 || n_dec_blocks < 1) fail("need at least one encoder and one decoder block");
  if (vocab_size < 3) fail("vocab_size must cover blank, sos/eos and one token");
  if (arch == Arch::kConformer && (conv_kernel < 1 || conv_kernel % 2 == 0)) {
    fail("conformer conv_kernel must be odd and >= 1, got " + std::to_string(conv_kernel));
  }
  if (subsample_factor != 4) fail("subsample_factor is fixed at 4");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) fail("dropout_rate must be in [0, 1)");
  if (feature_dim < 7) fail("feature_dim must be >= 7 for two 3x3 stride-2 convolutions");
  if (subsample_channels < 1) fail("subsample_channels must be positive");
  if (max_segment_frames < 1 || max_lookahead < 0 || max_context_tokens < 1) {
    fail("relative-position ranges must be positive");
  }
}

std::string to_string(Arch arch) { return arch == Arch::kTransformer ? "transformer" : "conformer"; }
std::string to_string(PosEncoding pe) { return pe == PosEncoding::kAbsolute ? "absolute" : "relative"; }
std::string to_string(ConvMode mode) { return mode == ConvMode::kCausal ? "causal" : "centered"; }

namespace {

template <typename E>
E parse_enum(const nlohmann::json& j, const char* key, std::initializer_list<std::pair<const char*, E>> options) {
  const auto value = j.at(key).get<std::string>();
  for (const auto& [name, e] : options) {
    if (value == name) return e;
  }
  throw ConfigError(std::string("model config: invalid value '") + value + "' for " + key);
}

}  // namespace

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* k) { return it.key() == k; });
    if (!known) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"d_ffn", c.d_ffn},
                     {"n_enc_blocks", c.n_enc_blocks},
                     {"n_dec_blocks", c.n_dec_blocks},
                     {"vocab_size", c.vocab_size},
                     {"arch", to_string(c.arch)},
                     {"pos_encoding", to_string(c.pos_encoding)},
                     {"conv_kernel", c.conv_kernel},
                     {"conv_mode", to_string(c.conv_mode)},
                     {"subsample_factor", c.subsample_factor},
                     {"dropout_rate", c.dropout_rate},
                     {"feature_dim", c.feature_dim},
                     {"subsample_channels", c.subsample_channels},
                     {"max_segment_frames", c.max_segment_frames},
                     {"max_lookahead", c.max_lookahead},
                     {"max_context_tokens", c.max_context_tokens}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  reject_unknown_keys(j,
                      {"d_model", "n_heads", "d_ffn", "n_enc_blocks", "n_dec_blocks", "vocab_size",
                       "arch", "pos_encoding", "conv_kernel", "conv_mode", "subsample_factor",
                       "dropout_rate", "feature_dim", "subsample_channels", "max_segment_frames",
                       "max_lookahead", "max_context_tokens"},
                      "model config");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("d_model", c.d_model);
    get("n_heads", c.n_heads);
    get("d_ffn", c.d_ffn);
    get("n_enc_blocks", c.n_enc_blocks);
    get("n_dec_blocks", c.n_dec_blocks);
    get("vocab_size", c.vocab_size);
    if (j.contains("arch")) {
      c.arch = parse_enum<Arch>(j, "arch", {{"transformer", Arch::kTransformer}, {"conformer", Arch::kConformer}});
    }
    if (j.contains("pos_encoding")) {
      c.pos_encoding = parse_enum<PosEncoding>(
          j, "pos_encoding", {{"absolute", PosEncoding::kAbsolute}, {"relative", PosEncoding::kRelative}});
    }
    get("conv_kernel", c.conv_kernel);
    if (j.contains("conv_mode")) {
      c.conv_mode = parse_enum<ConvMode>(j, "conv_mode", {{"causal", ConvMode::kCausal}, {"centered", ConvMode::kCentered}});
    }
    get("subsample_factor", c.subsample_factor);
    get("dropout_rate", c.dropout_rate);
    get("feature_dim", c.feature_dim);
    get("subsample_channels", c.subsample_channels);
    get("max_segment_frames", c.max_segment_frames);
    get("max_lookahead", c.max_lookahead);
    get("max_context_tokens", c.max_context_tokens);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
  nlohmann::json ja = a, jb = b;
  return ja == jb;
}

ModelConfig load_model_config(const std::string& path) {
  if (!std::filesystem::exists(path)) throw FileNotFoundError("model config not found: " + path);
  std::ifstream in(path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse " + path + ": " + e.what());
  }
  return j.get<ModelConfig>();
}

void save_model_config(const ModelConfig& config, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << nlohmann::json(config).dump(2) << '\n';
}

}  // namespace ctxasr
