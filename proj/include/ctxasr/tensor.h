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

// Dense row-major tensors with tape-free reverse-mode autodiff.
//
// Every op returns a new Tensor. When grad mode is on and any input requires
// a gradient, the result keeps references to its inputs plus a closure that
// pushes the output gradient back to them; backward() on a scalar then
// traverses that DAG once in reverse topological order.
//
// Precision is a template parameter: float for training and decoding,
// double for gradient checks. Both are explicitly instantiated in
// tensor.cpp.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ctxasr/errors.h"

namespace ctxasr {

using Shape = std::vector<std::int64_t>;

std::string shape_string(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

// Grad mode is thread-local; NoGradGuard disables graph recording in scope.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Node = detail::TensorNode<T>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  // Negative axes count from the end.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }
  std::int64_t rows() const { return dim(0); }
  std::int64_t cols() const { return dim(1); }

  std::span<const T> data() const { return node_->data; }
  // In-place access for leaves (parameters, running statistics).
  std::span<T> mutable_data();
  T item() const;
  T at(std::int64_t row, std::int64_t col) const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool value);
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad();

  // Copies the data into a fresh leaf with no history.
  Tensor detach() const;
  void backward() const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(node_->shape, std::move(out));
  }

  bool all_finite() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

// Builds an op result; records inputs and the backward closure only when
// grad mode is on and at least one input requires a gradient.
template <typename T, typename Backward>
Tensor<T> make_op(Shape shape, std::vector<T> data, std::initializer_list<const Tensor<T>*> inputs,
                  const char* op, Backward&& backward) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (grad_enabled()) {
    bool any = false;
    for (const Tensor<T>* in : inputs) any = any || in->requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Tensor<T>* in : inputs) {
        if (in->requires_grad()) node->inputs.push_back(in->node());
      }
      node->backward = std::forward<Backward>(backward);
    }
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_op_multi(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                        const char* op, std::function<void(TensorNode<T>&)> backward) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) {
        if (in.requires_grad()) node->inputs.push_back(in.node());
      }
      node->backward = std::move(backward);
    }
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

enum class Padding { kValid, kSameCentered, kSameCausal };

// Linear algebra.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// a · bᵀ for a [m×k], b [n×k].
template <typename T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

// Elementwise.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
// [..., n] + [n] broadcast over leading dims.
template <typename T> Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> swish(const Tensor<T>& a);
// Gated linear unit over the last dim: first half * sigmoid(second half).
template <typename T> Tensor<T> glu(const Tensor<T>& a);

// Normalization.
template <typename T> Tensor<T> softmax(const Tensor<T>& a, int axis = -1);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& a);
// Row softmax over a 2-D score matrix; entries with allowed[i] == 0 get
// probability exactly 0. A row with no allowed entry is an InvalidMaskError.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, std::span<const std::uint8_t> allowed);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-12));

// Reductions and reshaping.
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> slice_rows(const Tensor<T>& a, std::int64_t begin, std::int64_t end);
template <typename T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> slice_cols(const Tensor<T>& a, std::int64_t begin, std::int64_t end);
template <typename T> Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);

// Lookup of rows of table [V×d]; ids outside [0, V) raise VocabularyError.
template <typename T> Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);

// out[i][j] = m[i][clamp(key_pos[j] - query_pos[i], min_offset, max_offset) - min_offset].
template <typename T>
Tensor<T> gather_relative(const Tensor<T>& m, std::span<const std::int64_t> query_pos,
                          std::span<const std::int64_t> key_pos, std::int64_t min_offset,
                          std::int64_t max_offset);

// Convolutions. conv2d input [C×H×W], weight [O×C×KH×KW], optional bias [O].
// Causal padding places all of the H-axis padding before the first row.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride_h,
                 int stride_w, Padding padding);
// Per-channel 1-D convolution along time: x [T×C], kernel [C×K]. When
// right_boundaries (sorted exclusive segment ends) is given, taps past the
// end of the segment containing the output frame read zero.
template <typename T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& kernel, Padding padding,
                           std::span<const std::int64_t> right_boundaries = {});
// Pointwise convolution is a per-frame linear map: x [T×Cin], weight [Cin×Cout].
template <typename T>
Tensor<T> pointwise_conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);
// Batch normalization over the rows of x [T×C]. Training mode uses batch
// statistics and updates the running buffers in place.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     T momentum = T(0.1), T eps = T(1e-5));
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::mt19937_64& rng);

// Mean over rows of the label-smoothed negative log likelihood:
// -(1-s)·lp[y] - (s/V)·Σ_v lp[v].
template <typename T>
Tensor<T> label_smoothed_nll(const Tensor<T>& log_probs, std::span<const int> targets,
                             double smoothing);

}  // namespace ctxasr
