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

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ctxasr/model.h"

namespace ctxasr {

using TensorList = std::vector<std::pair<std::string, Tensor<float>>>;

// "CXP1" | u32 count | per tensor: u16 name_len, name, u8 ndim, u32 dims...,
// f32 data. Everything little endian.
void write_tensor_file(const std::filesystem::path& path, const TensorList& tensors);
TensorList read_tensor_file(const std::filesystem::path& path);

// Validation results recorded next to a checkpoint so averaging can rank
// checkpoints without re-evaluating them.
struct CheckpointMeta {
  std::int64_t step = 0;
  int epoch = 0;
  double val_loss = 0.0;
  double val_token_acc = 0.0;
  std::string mode;
};

void to_json(nlohmann::json& j, const CheckpointMeta& m);
void from_json(const nlohmann::json& j, CheckpointMeta& m);

// Sidecars: <ckpt>.config.json holds the ModelConfig, <ckpt>.meta.json the
// metadata.
std::filesystem::path config_sidecar(const std::filesystem::path& ckpt);
std::filesystem::path meta_sidecar(const std::filesystem::path& ckpt);

void save_checkpoint(Model<float>& model, const std::filesystem::path& path, const CheckpointMeta& meta = {});
Model<float> load_checkpoint(const std::filesystem::path& path);
CheckpointMeta load_checkpoint_meta(const std::filesystem::path& path);

struct LoadOptions {
  // Tensors missing from the file keep their current values if their name
  // matches one of these substrings (fresh relative-position parameters when
  // migrating an absolute-encoding baseline).
  std::vector<std::string> allow_missing;
};

// Copies every parameter and buffer; names, shapes, and counts must agree.
// Throws CheckpointIncompatibleError listing all differences.
void load_tensors_into(Model<float>& model, const TensorList& tensors, const LoadOptions& options = {});

// Ranks by recorded val_token_acc (ties keep the given order), averages the
// best k elementwise. Returns the chosen paths in rank order.
std::vector<std::filesystem::path> average_checkpoints(const std::vector<std::filesystem::path>& paths, int k,
                                                       const std::filesystem::path& out);

}  // namespace ctxasr
