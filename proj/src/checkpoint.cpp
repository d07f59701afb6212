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

#include "ctxasr/checkpoint.h"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

namespace ctxasr {

namespace fs = std::filesystem;

namespace {

class Reader {
 public:
  Reader(std::vector<unsigned char> bytes, std::string name) : bytes_(std::move(bytes)), name_(std::move(name)) {}

  std::uint64_t get(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw FormatError(name_ + ": truncated checkpoint", bytes_.size());
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += n;
    return v;
  }
  std::string bytes(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw FormatError(name_ + ": truncated checkpoint", bytes_.size());
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::vector<unsigned char> bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

void put(std::ostream& out, std::uint64_t v, int n) {
  for (int i = 0; i < n; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

}  // namespace

void write_tensor_file(const fs::path& path, const TensorList& tensors) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileNotFoundError("cannot write " + path.string());
  out.write("CXP1", 4);
  put(out, tensors.size(), 4);
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xffff) throw ContractError("tensor name too long: " + name.substr(0, 40));
    put(out, name.size(), 2);
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(out, static_cast<std::uint64_t>(t.ndim()), 1);
    for (auto d : t.shape()) put(out, static_cast<std::uint64_t>(d), 4);
    for (float v : t.data()) put(out, std::bit_cast<std::uint32_t>(v), 4);
  }
  if (!out) throw Error("write failed: " + path.string());
}

TensorList read_tensor_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFoundError("cannot open checkpoint " + path.string());
  Reader r(std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {}), path.string());
  if (r.bytes(4) != "CXP1") throw FormatError(path.string() + ": bad checkpoint magic", 0);
  const auto count = r.get(4);
  TensorList out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name = r.bytes(r.get(2));
    const auto ndim = r.get(1);
    Shape shape;
    for (std::uint64_t d = 0; d < ndim; ++d) shape.push_back(static_cast<std::int64_t>(r.get(4)));
    std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : data) v = std::bit_cast<float>(static_cast<std::uint32_t>(r.get(4)));
    out.emplace_back(name, Tensor<float>(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw FormatError(path.string() + ": trailing bytes after last tensor", r.pos());
  return out;
}

void to_json(nlohmann::json& j, const CheckpointMeta& m) {
  j = {{"step", m.step}, {"epoch", m.epoch}, {"val_loss", m.val_loss}, {"val_token_acc", m.val_token_acc}, {"mode", m.mode}};
}

void from_json(const nlohmann::json& j, CheckpointMeta& m) {
  reject_unknown_keys(j, {"step", "epoch", "val_loss", "val_token_acc", "mode"}, "checkpoint meta");
  m.step = j.value("step", m.step);
  m.epoch = j.value("epoch", m.epoch);
  m.val_loss = j.value("val_loss", m.val_loss);
  m.val_token_acc = j.value("val_token_acc", m.val_token_acc);
  m.mode = j.value("mode", m.mode);
}

fs::path config_sidecar(const fs::path& ckpt) { return fs::path(ckpt.string() + ".config.json"); }
fs::path meta_sidecar(const fs::path& ckpt) { return fs::path(ckpt.string() + ".meta.json"); }

namespace {

TensorList model_tensors(Model<float>& model) {
  TensorList out;
  for (auto& [n, p] : model.named_parameters()) out.emplace_back(n, *p);
  for (auto& [n, p] : model.named_buffers()) out.emplace_back(n, *p);
  return out;
}

}  // namespace

void save_checkpoint(Model<float>& model, const fs::path& path, const CheckpointMeta& meta) {
  write_tensor_file(path, model_tensors(model));
  save_model_config(model.config, config_sidecar(path).string());
  std::ofstream(meta_sidecar(path)) << nlohmann::json(meta).dump(2) << '\n';
}

void load_tensors_into(Model<float>& model, const TensorList& tensors, const LoadOptions& options) {
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& [n, t] : tensors) by_name[n] = &t;
  std::vector<std::string> problems;
  auto targets = model.named_parameters();
  auto buffers = model.named_buffers();
  targets.insert(targets.end(), buffers.begin(), buffers.end());
  std::map<std::string, bool> seen;
  for (auto& [name, dst] : targets) {
    seen[name] = true;
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      const bool ok = std::any_of(options.allow_missing.begin(), options.allow_missing.end(),
                                  [&](const std::string& s) { return name.find(s) != std::string::npos; });
      if (!ok) problems.push_back("missing " + name);
      continue;
    }
    if (it->second->shape() != dst->shape())
      problems.push_back(name + " shape " + shape_string(it->second->shape()) + " vs " + shape_string(dst->shape()));
  }
  for (const auto& [n, t] : tensors)
    if (!seen.count(n)) problems.push_back("unexpected " + n);
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match model:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw CheckpointIncompatibleError(msg);
  }
  for (auto& [name, dst] : targets) {
    auto it = by_name.find(name);
    if (it == by_name.end()) continue;
    const bool grad = dst->requires_grad();
    *dst = it->second->detach();
    dst->set_requires_grad(grad);
  }
}

Model<float> load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw FileNotFoundError("checkpoint not found: " + path.string());
  if (!fs::exists(config_sidecar(path))) throw FileNotFoundError("model config not found: " + config_sidecar(path).string());
  Model<float> model(load_model_config(config_sidecar(path).string()));
  load_tensors_into(model, read_tensor_file(path));
  return model;
}

CheckpointMeta load_checkpoint_meta(const fs::path& path) {
  std::ifstream in(meta_sidecar(path));
  if (!in) throw FileNotFoundError("checkpoint metadata not found: " + meta_sidecar(path).string());
  try {
    return nlohmann::json::parse(in).get<CheckpointMeta>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(meta_sidecar(path).string() + ": " + e.what());
  }
}

std::vector<fs::path> average_checkpoints(const std::vector<fs::path>& paths, int k, const fs::path& out) {
  if (k < 1 || static_cast<std::size_t>(k) > paths.size())
    throw ConfigError("average: need 1 <= k <= " + std::to_string(paths.size()) + ", got " + std::to_string(k));
  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t i = 0; i < paths.size(); ++i) ranked.emplace_back(load_checkpoint_meta(paths[i]).val_token_acc, i);
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<fs::path> chosen;
  for (int i = 0; i < k; ++i) chosen.push_back(paths[ranked[static_cast<std::size_t>(i)].second]);

  auto model = load_checkpoint(chosen[0]);
  auto first = model_tensors(model);
  std::vector<std::vector<double>> acc;
  for (const auto& [n, t] : first) acc.emplace_back(t.data().begin(), t.data().end());
  for (std::size_t c = 1; c < chosen.size(); ++c) {
    if (!(load_model_config(config_sidecar(chosen[c]).string()) == model.config))
      throw CheckpointIncompatibleError(chosen[c].string() + " has a different architecture from " + chosen[0].string());
    auto other = read_tensor_file(chosen[c]);
    Model<float> probe = model;
    load_tensors_into(probe, other);
    auto ordered = model_tensors(probe);
    for (std::size_t i = 0; i < ordered.size(); ++i)
      for (std::size_t j = 0; j < acc[i].size(); ++j) acc[i][j] += ordered[i].second.data()[j];
  }
  TensorList averaged;
  for (std::size_t i = 0; i < first.size(); ++i) {
    std::vector<float> v(acc[i].size());
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = static_cast<float>(acc[i][j] / static_cast<double>(k));
    averaged.emplace_back(first[i].first, Tensor<float>(first[i].second.shape(), std::move(v)));
  }
  load_tensors_into(model, averaged);
  CheckpointMeta meta = load_checkpoint_meta(chosen[0]);
  meta.mode += meta.mode.empty() ? "average" : "+average";
  save_checkpoint(model, out, meta);
  return chosen;
}

}  // namespace ctxasr
