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

#include "ctxasr/tensor.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace ctxasr {

namespace {

thread_local bool g_grad_enabled = true;

void require(bool cond, const std::string& what) {
  if (!cond) throw DimensionError(what);
}

void require_2d(const Shape& s, const char* op) {
  require(s.size() == 2, std::string(op) + ": expected a 2-D tensor, got " + shape_string(s));
}

template <typename T>
std::vector<T> zeros_like(std::size_t n) {
  return std::vector<T>(n, T(0));
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_string(shape));
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw DimensionError("shape " + shape_string(shape) + " does not match " +
                         std::to_string(data.size()) + " elements");
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const int n = ndim();
  if (axis < 0) axis += n;
  if (axis < 0 || axis >= n) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_string(shape()));
  }
  return node_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (node_->backward) throw ContractError("mutable_data() on a non-leaf tensor");
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (node_->data.size() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_string(shape()));
  }
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::int64_t row, std::int64_t col) const {
  require_2d(shape(), "at");
  return node_->data[static_cast<std::size_t>(row * cols() + col)];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
  if (node_->backward) throw ContractError("set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = value;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_) node_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(node_->data.begin(), node_->data.end(),
                     [](T v) { return std::isfinite(v); });
}

template <typename T>
void Tensor<T>::backward() const {
  if (!node_ || node_->data.size() != 1 || !node_->shape.empty()) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (node_ ? shape_string(node_->shape) : std::string("<undefined>")));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior gradients are per-call; leaf gradients accumulate across calls.
  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->data.size(), T(0));
    else if (n->requires_grad) n->grad_buffer();
  }
  node_->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_2d(a.shape(), "matmul");
  require_2d(b.shape(), "matmul");
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
  }
  std::vector<T> out(static_cast<std::size_t>(m * n), T(0));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::int64_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T aip = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::int64_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  return detail::make_op<T>({m, n}, std::move(out), {&a, &b}, "matmul",
                            [a, b, m, k, n](typename Tensor<T>::Node& self) {
    const T* g = self.grad.data();
    if (a.requires_grad()) {
      auto ga = a.node()->grad_buffer();
      const T* pb = b.data().data();
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t p = 0; p < k; ++p) {
          T acc = 0;
          for (std::int64_t j = 0; j < n; ++j) acc += g[i * n + j] * pb[p * n + j];
          ga[static_cast<std::size_t>(i * k + p)] += acc;
        }
      }
    }
    if (b.requires_grad()) {
      auto gb = b.node()->grad_buffer();
      const T* pa = a.data().data();
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t p = 0; p < k; ++p) {
          const T aip = pa[i * k + p];
          T* dst = gb.data() + p * n;
          for (std::int64_t j = 0; j < n; ++j) dst[j] += aip * g[i * n + j];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_2d(a.shape(), "matmul_nt");
  require_2d(b.shape(), "matmul_nt");
  const auto m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree for " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()) + "^T");
  }
  std::vector<T> out(static_cast<std::size_t>(m * n));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::int64_t p = 0; p < k; ++p) acc += pa[i * k + p] * pb[j * k + p];
      out[static_cast<std::size_t>(i * n + j)] = acc;
    }
  }
  return detail::make_op<T>({m, n}, std::move(out), {&a, &b}, "matmul_nt",
                            [a, b, m, k, n](typename Tensor<T>::Node& self) {
    const T* g = self.grad.data();
    if (a.requires_grad()) {
      auto ga = a.node()->grad_buffer();
      const T* pb = b.data().data();
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
          const T gij = g[i * n + j];
          for (std::int64_t p = 0; p < k; ++p) ga[static_cast<std::size_t>(i * k + p)] += gij * pb[j * k + p];
        }
      }
    }
    if (b.requires_grad()) {
      auto gb = b.node()->grad_buffer();
      const T* pa = a.data().data();
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
          const T gij = g[i * n + j];
          for (std::int64_t p = 0; p < k; ++p) gb[static_cast<std::size_t>(j * k + p)] += gij * pa[i * k + p];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_2d(a.shape(), "transpose");
  const auto m = a.rows(), n = a.cols();
  std::vector<T> out(static_cast<std::size_t>(m * n));
  const T* p = a.data().data();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out[static_cast<std::size_t>(j * m + i)] = p[i * n + j];
  return detail::make_op<T>({n, m}, std::move(out), {&a}, "transpose",
                            [a, m, n](typename Tensor<T>::Node& self) {
    auto ga = a.node()->grad_buffer();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j)
        ga[static_cast<std::size_t>(i * n + j)] += self.grad[static_cast<std::size_t>(j * m + i)];
  });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

// Unary op with derivative expressed through input x and output y.
template <typename T, typename F, typename D>
Tensor<T> unary(const Tensor<T>& a, const char* name, F f, D dfdx) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = f(v);
  Tensor<T> result;
  result = detail::make_op<T>(a.shape(), std::move(out), {&a}, name,
                              [a, dfdx](typename Tensor<T>::Node& self) {
    auto ga = a.node()->grad_buffer();
    const auto x = a.data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * dfdx(x[i], self.data[i]);
  });
  return result;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  return detail::make_op<T>(a.shape(), std::move(out), {&a, &b}, "add",
                            [a, b](typename Tensor<T>::Node& self) {
    for (const auto* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto g = t->node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  return detail::make_op<T>(a.shape(), std::move(out), {&a, &b}, "sub",
                            [a, b](typename Tensor<T>::Node& self) {
    if (a.requires_grad()) {
      auto g = a.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (b.requires_grad()) {
      auto g = b.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  return detail::make_op<T>(a.shape(), std::move(out), {&a, &b}, "mul",
                            [a, b](typename Tensor<T>::Node& self) {
    if (a.requires_grad()) {
      auto g = a.node()->grad_buffer();
      const auto pb = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb[i];
    }
    if (b.requires_grad()) {
      auto g = b.node()->grad_buffer();
      const auto pa = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return detail::make_op<T>(a.shape(), std::move(out), {&a}, "scale",
                            [a, factor](typename Tensor<T>::Node& self) {
    auto g = a.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row) {
  if (row.ndim() != 1 || a.ndim() < 1 || a.dim(-1) != row.dim(0)) {
    throw DimensionError("add_row: cannot broadcast " + shape_string(row.shape()) + " over " +
                         shape_string(a.shape()));
  }
  const auto n = row.dim(0);
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto pr = row.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pr[i % static_cast<std::size_t>(n)];
  return detail::make_op<T>(a.shape(), std::move(out), {&a, &row}, "add_row",
                            [a, row, n](typename Tensor<T>::Node& self) {
    if (a.requires_grad()) {
      auto g = a.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (row.requires_grad()) {
      auto g = row.node()->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % static_cast<std::size_t>(n)] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary(a, "relu", [](T x) { return x > T(0) ? x : T(0); },
               [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary(a, "sigmoid", [](T x) { return T(1) / (T(1) + std::exp(-x)); },
               [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> swish(const Tensor<T>& a) {
  return unary(a, "swish", [](T x) { return x / (T(1) + std::exp(-x)); },
               [](T x, T) {
                 const T s = T(1) / (T(1) + std::exp(-x));
                 return s * (T(1) + x * (T(1) - s));
               });
}

template <typename T>
Tensor<T> glu(const Tensor<T>& a) {
  const auto width = a.dim(-1);
  if (width % 2 != 0) throw DimensionError("glu: last dimension must be even, got " + shape_string(a.shape()));
  const auto half = width / 2;
  const auto rows = a.numel() / width;
  Shape shape = a.shape();
  shape.back() = half;
  std::vector<T> out(static_cast<std::size_t>(rows * half));
  const T* p = a.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < half; ++c) {
      const T gate = T(1) / (T(1) + std::exp(-p[r * width + half + c]));
      out[static_cast<std::size_t>(r * half + c)] = p[r * width + c] * gate;
    }
  }
  return detail::make_op<T>(std::move(shape), std::move(out), {&a}, "glu",
                            [a, rows, half, width](typename Tensor<T>::Node& self) {
    auto g = a.node()->grad_buffer();
    const T* p = a.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t c = 0; c < half; ++c) {
        const T x = p[r * width + c];
        const T gate = T(1) / (T(1) + std::exp(-p[r * width + half + c]));
        const T dy = self.grad[static_cast<std::size_t>(r * half + c)];
        g[static_cast<std::size_t>(r * width + c)] += dy * gate;
        g[static_cast<std::size_t>(r * width + half + c)] += dy * x * gate * (T(1) - gate);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  const int nd = a.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw DimensionError("softmax: bad axis for " + shape_string(a.shape()));
  const auto n = a.dim(axis);
  if (n < 1) throw DimensionError("softmax: empty axis in " + shape_string(a.shape()));
  std::int64_t inner = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= a.dim(i);
  const std::int64_t outer = a.numel() / (n * inner);
  std::vector<T> out(a.data().size());
  const T* p = a.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t j = 0; j < n; ++j) mx = std::max(mx, p[base + j * inner]);
      if (mx == -std::numeric_limits<T>::infinity()) {
        throw InvalidMaskError("softmax: every entry along the normalized axis is -inf");
      }
      T total = 0;
      for (std::int64_t j = 0; j < n; ++j) {
        const T e = std::exp(p[base + j * inner] - mx);
        out[static_cast<std::size_t>(base + j * inner)] = e;
        total += e;
      }
      for (std::int64_t j = 0; j < n; ++j) out[static_cast<std::size_t>(base + j * inner)] /= total;
    }
  }
  return detail::make_op<T>(a.shape(), std::move(out), {&a}, "softmax",
                            [a, n, inner, outer](typename Tensor<T>::Node& self) {
    auto g = a.node()->grad_buffer();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * n * inner + in;
        T dot = 0;
        for (std::int64_t j = 0; j < n; ++j) {
          const auto idx = static_cast<std::size_t>(base + j * inner);
          dot += self.grad[idx] * self.data[idx];
        }
        for (std::int64_t j = 0; j < n; ++j) {
          const auto idx = static_cast<std::size_t>(base + j * inner);
          g[idx] += self.data[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  const auto n = a.dim(-1);
  if (n < 1) throw DimensionError("log_softmax: empty last axis");
  const auto rows = a.numel() / n;
  std::vector<T> out(a.data().size());
  const T* p = a.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* x = p + r * n;
    T mx = *std::max_element(x, x + n);
    if (mx == -std::numeric_limits<T>::infinity()) {
      throw InvalidMaskError("log_softmax: every entry in a row is -inf");
    }
    T total = 0;
    for (std::int64_t j = 0; j < n; ++j) total += std::exp(x[j] - mx);
    const T lse = mx + std::log(total);
    for (std::int64_t j = 0; j < n; ++j) out[static_cast<std::size_t>(r * n + j)] = x[j] - lse;
  }
  return detail::make_op<T>(a.shape(), std::move(out), {&a}, "log_softmax",
                            [a, n, rows](typename Tensor<T>::Node& self) {
    auto g = a.node()->grad_buffer();
    for (std::int64_t r = 0; r < rows; ++r) {
      T total = 0;
      for (std::int64_t j = 0; j < n; ++j) total += self.grad[static_cast<std::size_t>(r * n + j)];
      for (std::int64_t j = 0; j < n; ++j) {
        const auto idx = static_cast<std::size_t>(r * n + j);
        g[idx] += self.grad[idx] - std::exp(self.data[idx]) * total;
      }
    }
  });
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, std::span<const std::uint8_t> allowed) {
  require_2d(scores.shape(), "masked_softmax");
  const auto m = scores.rows(), n = scores.cols();
  if (static_cast<std::int64_t>(allowed.size()) != m * n) {
    throw DimensionError("masked_softmax: mask has " + std::to_string(allowed.size()) +
                         " entries for scores " + shape_string(scores.shape()));
  }
  std::vector<T> out(static_cast<std::size_t>(m * n), T(0));
  const T* p = scores.data().data();
  for (std::int64_t i = 0; i < m; ++i) {
    const T* x = p + i * n;
    const std::uint8_t* ok = allowed.data() + i * n;
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::int64_t j = 0; j < n; ++j) {
      if (ok[j]) {
        mx = std::max(mx, x[j]);
        any = true;
      }
    }
    if (!any) {
      throw InvalidMaskError("attention mask row " + std::to_string(i) + " allows no key");
    }
    T total = 0;
    T* y = out.data() + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      if (ok[j]) {
        y[j] = std::exp(x[j] - mx);
        total += y[j];
      }
    }
    for (std::int64_t j = 0; j < n; ++j) y[j] /= total;
  }
  return detail::make_op<T>({m, n}, std::move(out), {&scores}, "masked_softmax",
                            [scores, m, n](typename Tensor<T>::Node& self) {
    auto g = scores.node()->grad_buffer();
    for (std::int64_t i = 0; i < m; ++i) {
      T dot = 0;
      for (std::int64_t j = 0; j < n; ++j) {
        const auto idx = static_cast<std::size_t>(i * n + j);
        dot += self.grad[idx] * self.data[idx];
      }
      for (std::int64_t j = 0; j < n; ++j) {
        const auto idx = static_cast<std::size_t>(i * n + j);
        g[idx] += self.data[idx] * (self.grad[idx] - dot);
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const auto d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: affine params " + shape_string(gamma.shape()) +
                         " do not match " + shape_string(x.shape()));
  }
  const auto rows = d == 0 ? 0 : x.numel() / d;
  std::vector<T> out(x.data().size());
  std::vector<T> xhat(x.data().size());
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  const T* p = x.data().data();
  const T* pg = gamma.data().data();
  const T* pbeta = beta.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* v = p + r * d;
    T mu = 0;
    for (std::int64_t j = 0; j < d; ++j) mu += v[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::int64_t j = 0; j < d; ++j) var += (v[j] - mu) * (v[j] - mu);
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = inv;
    for (std::int64_t j = 0; j < d; ++j) {
      const auto idx = static_cast<std::size_t>(r * d + j);
      xhat[idx] = (v[j] - mu) * inv;
      out[idx] = xhat[idx] * pg[j] + pbeta[j];
    }
  }
  return detail::make_op<T>(x.shape(), std::move(out), {&x, &gamma, &beta}, "layer_norm",
                            [x, gamma, beta, d, rows, xhat = std::move(xhat),
                             inv_std = std::move(inv_std)](typename Tensor<T>::Node& self) {
    const T* pg = gamma.data().data();
    if (gamma.requires_grad() || beta.requires_grad()) {
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t j = 0; j < d; ++j) {
          const auto idx = static_cast<std::size_t>(r * d + j);
          if (gamma.requires_grad()) gamma.node()->grad_buffer()[static_cast<std::size_t>(j)] += self.grad[idx] * xhat[idx];
          if (beta.requires_grad()) beta.node()->grad_buffer()[static_cast<std::size_t>(j)] += self.grad[idx];
        }
      }
    }
    if (x.requires_grad()) {
      auto gx = x.node()->grad_buffer();
      std::vector<T> dxhat(static_cast<std::size_t>(d));
      for (std::int64_t r = 0; r < rows; ++r) {
        T s1 = 0, s2 = 0;
        for (std::int64_t j = 0; j < d; ++j) {
          const auto idx = static_cast<std::size_t>(r * d + j);
          dxhat[static_cast<std::size_t>(j)] = self.grad[idx] * pg[j];
          s1 += dxhat[static_cast<std::size_t>(j)];
          s2 += dxhat[static_cast<std::size_t>(j)] * xhat[idx];
        }
        const T inv = inv_std[static_cast<std::size_t>(r)];
        for (std::int64_t j = 0; j < d; ++j) {
          const auto idx = static_cast<std::size_t>(r * d + j);
          gx[idx] += inv / static_cast<T>(d) *
                     (static_cast<T>(d) * dxhat[static_cast<std::size_t>(j)] - s1 - xhat[idx] * s2);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  return detail::make_op<T>({}, {total}, {&a}, "sum", [a](typename Tensor<T>::Node& self) {
    auto g = a.node()->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return detail::make_op<T>(std::move(shape), std::move(out), {&a}, "reshape",
                            [a](typename Tensor<T>::Node& self) {
    auto g = a.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::int64_t begin, std::int64_t end) {
  require_2d(a.shape(), "slice_rows");
  if (begin < 0 || end < begin || end > a.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_string(a.shape()));
  }
  const auto n = a.cols();
  std::vector<T> out(a.data().begin() + begin * n, a.data().begin() + end * n);
  return detail::make_op<T>({end - begin, n}, std::move(out), {&a}, "slice_rows",
                            [a, begin, n](typename Tensor<T>::Node& self) {
    auto g = a.node()->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[static_cast<std::size_t>(begin * n) + i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const auto n = parts.front().cols();
  std::int64_t rows = 0;
  for (const auto& p : parts) {
    require_2d(p.shape(), "concat_rows");
    if (p.cols() != n) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(parts.front().shape()) +
                           " vs " + shape_string(p.shape()));
    }
    rows += p.rows();
  }
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(rows * n));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_op_multi<T>({rows, n}, std::move(out), parts, "concat_rows",
                                  [parts](typename Tensor<T>::Node& self) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) {
        auto g = p.node()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
      }
      offset += static_cast<std::size_t>(p.numel());
    }
  });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::int64_t begin, std::int64_t end) {
  require_2d(a.shape(), "slice_cols");
  const auto m = a.rows(), n = a.cols();
  if (begin < 0 || end < begin || end > n) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_string(a.shape()));
  }
  const auto w = end - begin;
  std::vector<T> out(static_cast<std::size_t>(m * w));
  const T* p = a.data().data();
  for (std::int64_t i = 0; i < m; ++i)
    std::copy(p + i * n + begin, p + i * n + end, out.begin() + i * w);
  return detail::make_op<T>({m, w}, std::move(out), {&a}, "slice_cols",
                            [a, begin, m, n, w](typename Tensor<T>::Node& self) {
    auto g = a.node()->grad_buffer();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < w; ++j)
        g[static_cast<std::size_t>(i * n + begin + j)] += self.grad[static_cast<std::size_t>(i * w + j)];
  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const auto m = parts.front().rows();
  std::int64_t n = 0;
  for (const auto& p : parts) {
    require_2d(p.shape(), "concat_cols");
    if (p.rows() != m) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts.front().shape()) +
                           " vs " + shape_string(p.shape()));
    }
    n += p.cols();
  }
  std::vector<T> out(static_cast<std::size_t>(m * n));
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const auto w = p.cols();
    const T* src = p.data().data();
    for (std::int64_t i = 0; i < m; ++i) std::copy(src + i * w, src + (i + 1) * w, out.begin() + i * n + offset);
    offset += w;
  }
  return detail::make_op_multi<T>({m, n}, std::move(out), parts, "concat_cols",
                                  [parts, m, n](typename Tensor<T>::Node& self) {
    std::int64_t offset = 0;
    for (const auto& p : parts) {
      const auto w = p.cols();
      if (p.requires_grad()) {
        auto g = p.node()->grad_buffer();
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < w; ++j)
            g[static_cast<std::size_t>(i * w + j)] += self.grad[static_cast<std::size_t>(i * n + offset + j)];
      }
      offset += w;
    }
  });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  require_2d(table.shape(), "embedding");
  const auto vocab = table.rows(), d = table.cols();
  const auto count = static_cast<std::int64_t>(ids.size());
  std::vector<T> out(static_cast<std::size_t>(count * d));
  const T* p = table.data().data();
  for (std::int64_t i = 0; i < count; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= vocab) {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(vocab));
    }
    std::copy(p + id * d, p + (id + 1) * d, out.begin() + i * d);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return detail::make_op<T>({count, d}, std::move(out), {&table}, "embedding",
                            [table, saved = std::move(saved), d](typename Tensor<T>::Node& self) {
    auto g = table.node()->grad_buffer();
    for (std::size_t i = 0; i < saved.size(); ++i)
      for (std::int64_t j = 0; j < d; ++j)
        g[static_cast<std::size_t>(saved[i] * d + j)] += self.grad[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
  });
}

template <typename T>
Tensor<T> gather_relative(const Tensor<T>& m, std::span<const std::int64_t> query_pos,
                          std::span<const std::int64_t> key_pos, std::int64_t min_offset,
                          std::int64_t max_offset) {
  require_2d(m.shape(), "gather_relative");
  const auto tq = static_cast<std::int64_t>(query_pos.size());
  const auto tk = static_cast<std::int64_t>(key_pos.size());
  const auto r = max_offset - min_offset + 1;
  if (m.rows() != tq || m.cols() != r) {
    throw DimensionError("gather_relative: table " + shape_string(m.shape()) + " does not match " +
                         std::to_string(tq) + " queries and " + std::to_string(r) + " offsets");
  }
  std::vector<std::int64_t> index(static_cast<std::size_t>(tq * tk));
  std::vector<T> out(index.size());
  const T* p = m.data().data();
  for (std::int64_t i = 0; i < tq; ++i) {
    for (std::int64_t j = 0; j < tk; ++j) {
      const auto off = std::clamp(key_pos[static_cast<std::size_t>(j)] - query_pos[static_cast<std::size_t>(i)],
                                  min_offset, max_offset);
      const auto src = i * r + (off - min_offset);
      index[static_cast<std::size_t>(i * tk + j)] = src;
      out[static_cast<std::size_t>(i * tk + j)] = p[src];
    }
  }
  return detail::make_op<T>({tq, tk}, std::move(out), {&m}, "gather_relative",
                            [m, index = std::move(index)](typename Tensor<T>::Node& self) {
    auto g = m.node()->grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i) g[static_cast<std::size_t>(index[i])] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

namespace {

struct ConvGeometry {
  std::int64_t out = 0;
  std::int64_t pad_before = 0;
};

ConvGeometry conv_geometry(std::int64_t in, std::int64_t kernel, int stride, Padding padding,
                           bool causal_axis, const char* op) {
  ConvGeometry g;
  if (padding == Padding::kValid) {
    if (kernel > in) {
      throw DimensionError(std::string(op) + ": kernel " + std::to_string(kernel) +
                           " larger than padded input " + std::to_string(in));
    }
    g.out = (in - kernel) / stride + 1;
    return g;
  }
  g.out = (in + stride - 1) / stride;
  const auto total = std::max<std::int64_t>((g.out - 1) * stride + kernel - in, 0);
  if (in + total < kernel && in > 0) {
    throw DimensionError(std::string(op) + ": kernel " + std::to_string(kernel) +
                         " larger than padded input " + std::to_string(in + total));
  }
  g.pad_before = (padding == Padding::kSameCausal && causal_axis) ? total : total / 2;
  return g;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride_h,
                 int stride_w, Padding padding) {
  if (x.ndim() != 3 || weight.ndim() != 4 || weight.dim(1) != x.dim(0)) {
    throw DimensionError("conv2d: input " + shape_string(x.shape()) + " incompatible with weight " +
                         shape_string(weight.shape()));
  }
  if (stride_h < 1 || stride_w < 1) throw ContractError("conv2d: strides must be >= 1");
  const auto c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto c_out = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (bias.defined() && bias.numel() != c_out) {
    throw DimensionError("conv2d: bias " + shape_string(bias.shape()) + " for " + std::to_string(c_out) + " channels");
  }
  const auto gh = conv_geometry(h, kh, stride_h, padding, true, "conv2d");
  const auto gw = conv_geometry(w, kw, stride_w, padding, false, "conv2d");
  const auto oh = gh.out, ow = gw.out;
  std::vector<T> out(static_cast<std::size_t>(c_out * oh * ow), T(0));
  const T* px = x.data().data();
  const T* pw = weight.data().data();
  for (std::int64_t o = 0; o < c_out; ++o) {
    const T b0 = bias.defined() ? bias.data()[static_cast<std::size_t>(o)] : T(0);
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t xo = 0; xo < ow; ++xo) {
        T acc = b0;
        for (std::int64_t c = 0; c < c_in; ++c) {
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            const auto iy = y * stride_h + ky - gh.pad_before;
            if (iy < 0 || iy >= h) continue;
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const auto ix = xo * stride_w + kx - gw.pad_before;
              if (ix < 0 || ix >= w) continue;
              acc += pw[((o * c_in + c) * kh + ky) * kw + kx] * px[(c * h + iy) * w + ix];
            }
          }
        }
        out[static_cast<std::size_t>((o * oh + y) * ow + xo)] = acc;
      }
    }
  }
  const auto pad_h = gh.pad_before, pad_w = gw.pad_before;
  return detail::make_op<T>({c_out, oh, ow}, std::move(out), {&x, &weight, &bias}, "conv2d",
                            [=](typename Tensor<T>::Node& self) {
    const T* px = x.data().data();
    const T* pw = weight.data().data();
    std::span<T> gx, gwt, gb;
    if (x.requires_grad()) gx = x.node()->grad_buffer();
    if (weight.requires_grad()) gwt = weight.node()->grad_buffer();
    if (bias.defined() && bias.requires_grad()) gb = bias.node()->grad_buffer();
    for (std::int64_t o = 0; o < c_out; ++o) {
      for (std::int64_t y = 0; y < oh; ++y) {
        for (std::int64_t xo = 0; xo < ow; ++xo) {
          const T g = self.grad[static_cast<std::size_t>((o * oh + y) * ow + xo)];
          if (!gb.empty()) gb[static_cast<std::size_t>(o)] += g;
          for (std::int64_t c = 0; c < c_in; ++c) {
            for (std::int64_t ky = 0; ky < kh; ++ky) {
              const auto iy = y * stride_h + ky - pad_h;
              if (iy < 0 || iy >= h) continue;
              for (std::int64_t kx = 0; kx < kw; ++kx) {
                const auto ix = xo * stride_w + kx - pad_w;
                if (ix < 0 || ix >= w) continue;
                const auto wi = static_cast<std::size_t>(((o * c_in + c) * kh + ky) * kw + kx);
                const auto xi = static_cast<std::size_t>((c * h + iy) * w + ix);
                if (!gwt.empty()) gwt[wi] += g * px[xi];
                if (!gx.empty()) gx[xi] += g * pw[wi];
              }
            }
          }
        }
      }
    }
  });
}

template <typename T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& kernel, Padding padding,
                           std::span<const std::int64_t> right_boundaries) {
  require_2d(x.shape(), "depthwise_conv1d");
  require_2d(kernel.shape(), "depthwise_conv1d");
  const auto t = x.rows(), c = x.cols(), k = kernel.cols();
  if (kernel.rows() != c) {
    throw DimensionError("depthwise_conv1d: kernel " + shape_string(kernel.shape()) +
                         " does not match " + std::to_string(c) + " channels");
  }
  std::int64_t left = 0;
  std::int64_t out_len = t;
  if (padding == Padding::kValid) {
    if (k > t) {
      throw DimensionError("depthwise_conv1d: kernel " + std::to_string(k) +
                           " larger than padded input " + std::to_string(t));
    }
    out_len = t - k + 1;
  } else {
    left = padding == Padding::kSameCausal ? k - 1 : (k - 1) / 2;
  }
  // Exclusive upper bound on readable input frames for each output frame.
  std::vector<std::int64_t> limit(static_cast<std::size_t>(out_len), t);
  if (!right_boundaries.empty()) {
    std::size_t seg = 0;
    for (std::int64_t o = 0; o < out_len; ++o) {
      while (seg < right_boundaries.size() && right_boundaries[seg] <= o) ++seg;
      if (seg < right_boundaries.size()) limit[static_cast<std::size_t>(o)] = std::min(t, right_boundaries[seg]);
    }
  }
  std::vector<T> out(static_cast<std::size_t>(out_len * c), T(0));
  const T* px = x.data().data();
  const T* pk = kernel.data().data();
  for (std::int64_t o = 0; o < out_len; ++o) {
    const auto lim = limit[static_cast<std::size_t>(o)];
    T* dst = out.data() + o * c;
    for (std::int64_t j = 0; j < k; ++j) {
      const auto src = o + j - left;
      if (src < 0 || src >= lim) continue;
      for (std::int64_t ch = 0; ch < c; ++ch) dst[ch] += pk[ch * k + j] * px[src * c + ch];
    }
  }
  return detail::make_op<T>({out_len, c}, std::move(out), {&x, &kernel}, "depthwise_conv1d",
                            [x, kernel, out_len, c, k, left, limit = std::move(limit)](typename Tensor<T>::Node& self) {
    const T* px = x.data().data();
    const T* pk = kernel.data().data();
    std::span<T> gx, gk;
    if (x.requires_grad()) gx = x.node()->grad_buffer();
    if (kernel.requires_grad()) gk = kernel.node()->grad_buffer();
    for (std::int64_t o = 0; o < out_len; ++o) {
      const auto lim = limit[static_cast<std::size_t>(o)];
      for (std::int64_t j = 0; j < k; ++j) {
        const auto src = o + j - left;
        if (src < 0 || src >= lim) continue;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T g = self.grad[static_cast<std::size_t>(o * c + ch)];
          if (!gx.empty()) gx[static_cast<std::size_t>(src * c + ch)] += g * pk[ch * k + j];
          if (!gk.empty()) gk[static_cast<std::size_t>(ch * k + j)] += g * px[src * c + ch];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> pointwise_conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  auto y = matmul(x, weight);
  return bias.defined() ? add_row(y, bias) : y;
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training, T momentum,
                     T eps) {
  require_2d(x.shape(), "batch_norm");
  const auto t = x.rows(), c = x.cols();
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c || running_var.numel() != c) {
    throw DimensionError("batch_norm: parameters do not match " + std::to_string(c) + " channels");
  }
  std::vector<T> mu(static_cast<std::size_t>(c)), inv(static_cast<std::size_t>(c));
  const T* px = x.data().data();
  if (training && t > 0) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T m = 0;
      for (std::int64_t i = 0; i < t; ++i) m += px[i * c + ch];
      m /= static_cast<T>(t);
      T v = 0;
      for (std::int64_t i = 0; i < t; ++i) v += (px[i * c + ch] - m) * (px[i * c + ch] - m);
      v /= static_cast<T>(t);
      mu[static_cast<std::size_t>(ch)] = m;
      inv[static_cast<std::size_t>(ch)] = T(1) / std::sqrt(v + eps);
      const T unbiased = t > 1 ? v * static_cast<T>(t) / static_cast<T>(t - 1) : v;
      auto rm = running_mean.mutable_data();
      auto rv = running_var.mutable_data();
      rm[static_cast<std::size_t>(ch)] = (T(1) - momentum) * rm[static_cast<std::size_t>(ch)] + momentum * m;
      rv[static_cast<std::size_t>(ch)] = (T(1) - momentum) * rv[static_cast<std::size_t>(ch)] + momentum * unbiased;
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mu[static_cast<std::size_t>(ch)] = running_mean.data()[static_cast<std::size_t>(ch)];
      inv[static_cast<std::size_t>(ch)] = T(1) / std::sqrt(running_var.data()[static_cast<std::size_t>(ch)] + eps);
    }
  }
  std::vector<T> xhat(static_cast<std::size_t>(t * c)), out(xhat.size());
  const T* pg = gamma.data().data();
  const T* pb = beta.data().data();
  for (std::int64_t i = 0; i < t; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const auto idx = static_cast<std::size_t>(i * c + ch);
      xhat[idx] = (px[idx] - mu[static_cast<std::size_t>(ch)]) * inv[static_cast<std::size_t>(ch)];
      out[idx] = xhat[idx] * pg[ch] + pb[ch];
    }
  }
  const bool batch_stats = training && t > 0;
  return detail::make_op<T>(x.shape(), std::move(out), {&x, &gamma, &beta}, "batch_norm",
                            [x, gamma, beta, t, c, batch_stats, xhat = std::move(xhat),
                             inv = std::move(inv)](typename Tensor<T>::Node& self) {
    const T* pg = gamma.data().data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T s1 = 0, s2 = 0;
      for (std::int64_t i = 0; i < t; ++i) {
        const auto idx = static_cast<std::size_t>(i * c + ch);
        s1 += self.grad[idx];
        s2 += self.grad[idx] * xhat[idx];
      }
      if (gamma.requires_grad()) gamma.node()->grad_buffer()[static_cast<std::size_t>(ch)] += s2;
      if (beta.requires_grad()) beta.node()->grad_buffer()[static_cast<std::size_t>(ch)] += s1;
      if (!x.requires_grad()) continue;
      auto gx = x.node()->grad_buffer();
      const T scale_c = pg[ch] * inv[static_cast<std::size_t>(ch)];
      for (std::int64_t i = 0; i < t; ++i) {
        const auto idx = static_cast<std::size_t>(i * c + ch);
        if (batch_stats) {
          gx[idx] += scale_c / static_cast<T>(t) *
                     (static_cast<T>(t) * self.grad[idx] - s1 - xhat[idx] * s2);
        } else {
          gx[idx] += scale_c * self.grad[idx];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  const T factor = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> m(static_cast<std::size_t>(x.numel()));
  for (auto& v : m) v = keep(rng) ? factor : T(0);
  return mul(x, Tensor<T>(x.shape(), std::move(m)));
}

template <typename T>
Tensor<T> label_smoothed_nll(const Tensor<T>& log_probs, std::span<const int> targets,
                             double smoothing) {
  require_2d(log_probs.shape(), "label_smoothed_nll");
  const auto n = log_probs.rows(), v = log_probs.cols();
  if (static_cast<std::int64_t>(targets.size()) != n) {
    throw DimensionError("label_smoothed_nll: " + std::to_string(targets.size()) + " targets for " +
                         shape_string(log_probs.shape()));
  }
  const T conf = static_cast<T>(1.0 - smoothing);
  const T spread = static_cast<T>(smoothing) / static_cast<T>(v);
  T total = 0;
  const T* p = log_probs.data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    const int y = targets[static_cast<std::size_t>(i)];
    if (y < 0 || y >= v) throw VocabularyError("target id " + std::to_string(y) + " outside vocabulary");
    T row = 0;
    for (std::int64_t j = 0; j < v; ++j) row += p[i * v + j];
    total += -conf * p[i * v + y] - spread * row;
  }
  if (n > 0) total /= static_cast<T>(n);
  std::vector<int> saved(targets.begin(), targets.end());
  return detail::make_op<T>({}, {total}, {&log_probs}, "label_smoothed_nll",
                            [log_probs, saved = std::move(saved), n, v, conf, spread](typename Tensor<T>::Node& self) {
    if (n == 0) return;
    auto g = log_probs.node()->grad_buffer();
    const T s = self.grad[0] / static_cast<T>(n);
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < v; ++j) g[static_cast<std::size_t>(i * v + j)] -= s * spread;
      g[static_cast<std::size_t>(i * v + saved[static_cast<std::size_t>(i)])] -= s * conf;
    }
  });
}

// ---------------------------------------------------------------------------
// Instantiations
// ---------------------------------------------------------------------------

#define CTXASR_INSTANTIATE_TENSOR(T)                                                             \
  template class Tensor<T>;                                                                      \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> transpose(const Tensor<T>&);                                                \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> add_row(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> relu(const Tensor<T>&);                                                     \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                  \
  template Tensor<T> swish(const Tensor<T>&);                                                    \
  template Tensor<T> glu(const Tensor<T>&);                                                      \
  template Tensor<T> softmax(const Tensor<T>&, int);                                             \
  template Tensor<T> log_softmax(const Tensor<T>&);                                              \
  template Tensor<T> masked_softmax(const Tensor<T>&, std::span<const std::uint8_t>);            \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> mean(const Tensor<T>&);                                                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                           \
  template Tensor<T> slice_rows(const Tensor<T>&, std::int64_t, std::int64_t);                   \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                                 \
  template Tensor<T> slice_cols(const Tensor<T>&, std::int64_t, std::int64_t);                   \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                                 \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);                          \
  template Tensor<T> gather_relative(const Tensor<T>&, std::span<const std::int64_t>,            \
                                     std::span<const std::int64_t>, std::int64_t, std::int64_t); \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int,      \
                            Padding);                                                            \
  template Tensor<T> depthwise_conv1d(const Tensor<T>&, const Tensor<T>&, Padding,               \
                                      std::span<const std::int64_t>);                            \
  template Tensor<T> pointwise_conv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                Tensor<T>&, Tensor<T>&, bool, T, T);                             \
  template Tensor<T> dropout(const Tensor<T>&, double, std::mt19937_64&);                        \
  template Tensor<T> label_smoothed_nll(const Tensor<T>&, std::span<const int>, double);

CTXASR_INSTANTIATE_TENSOR(float)
CTXASR_INSTANTIATE_TENSOR(double)

#undef CTXASR_INSTANTIATE_TENSOR

}  // namespace ctxasr
