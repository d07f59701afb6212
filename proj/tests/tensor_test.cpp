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

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "ctxasr/grad_check.h"
#include "ctxasr/tensor.h"

namespace ctxasr {
namespace {

using TD = Tensor<double>;

TD random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return TD(std::move(shape), std::move(v), true);
}

// Weighted sum with fixed random weights so every output element matters.
TD probe(const TD& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto w = random_tensor(y.shape(), rng);
  w.set_requires_grad(false);
  return sum(mul(y, w));
}

void expect_grads(const std::function<TD()>& f, const std::vector<NamedParam>& params, double tol = 1e-4) {
  auto report = grad_check(f, params, 1e-5, tol);
  for (const auto& e : report.entries) EXPECT_TRUE(e.passed) << e.name << " rel err " << e.max_rel_error;
}

TEST(TensorTest, MatmulTrivialCases) {
  Tensor<float> eye({2, 2}, {1, 0, 0, 1});
  Tensor<float> m({2, 2}, {1, 2, 3, 4});
  auto y = matmul(eye, m);
  EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), (std::vector<float>{1, 2, 3, 4}));
  auto z = matmul(Tensor<float>({1, 2}, {1, 0}), Tensor<float>({2, 1}, {2, 5}));
  EXPECT_EQ(z.item(), 2.0f);
}

TEST(TensorTest, MatmulShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor<float>::zeros({2, 3}), Tensor<float>::zeros({2, 3}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(TensorTest, MatmulGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  expect_grads([&] { return probe(matmul(a, b), 1); }, {{"a", a}, {"b", b}});
}

TEST(TensorTest, SoftmaxValues) {
  auto y = softmax(Tensor<double>({2}, {0, 0}));
  EXPECT_DOUBLE_EQ(y.data()[0], 0.5);
  const double inf = std::numeric_limits<double>::infinity();
  auto m = softmax(Tensor<double>({2}, {3.0, -inf}));
  EXPECT_EQ(m.data()[0], 1.0);
  EXPECT_EQ(m.data()[1], 0.0);
  auto r = softmax(Tensor<float>({3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(r.data()[i], std::exp(i + 1.0) / z, 1e-6);
  EXPECT_THROW(softmax(Tensor<float>({2}, {-INFINITY, -INFINITY})), InvalidMaskError);
}

TEST(TensorTest, SoftmaxSumsToOneAlongAnyAxis) {
  std::mt19937_64 rng(3);
  for (int seed = 0; seed < 20; ++seed) {
    auto x = random_tensor({3, 5}, rng, -30, 30);
    for (int axis : {0, 1}) {
      auto y = softmax(x, axis);
      const int outer = axis == 0 ? 5 : 3, n = axis == 0 ? 3 : 5;
      for (int o = 0; o < outer; ++o) {
        double s = 0;
        for (int j = 0; j < n; ++j) s += axis == 0 ? y.at(j, o) : y.at(o, j);
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
    }
  }
}

TEST(TensorTest, LayerNormCases) {
  Tensor<double> g({2}, {1, 1}), b({2}, {0, 0});
  auto c = layer_norm(Tensor<double>({1, 2}, {3, 3}), g, b);
  EXPECT_EQ(c.data()[0], 0.0);
  auto s = layer_norm(Tensor<double>({1, 2}, {1, -1}), g, b);
  EXPECT_NEAR(s.data()[0], 1.0, 1e-9);
  EXPECT_NEAR(s.data()[1], -1.0, 1e-9);

  std::mt19937_64 rng(11);
  for (int seed = 0; seed < 20; ++seed) {
    auto x = random_tensor({4, 8}, rng, -5, 5);
    auto ones = Tensor<double>::full({8}, 1.0), zeros = Tensor<double>::zeros({8});
    auto y = layer_norm(x, ones, zeros);
    for (int r = 0; r < 4; ++r) {
      double mu = 0, var = 0;
      for (int j = 0; j < 8; ++j) mu += y.at(r, j) / 8;
      for (int j = 0; j < 8; ++j) var += (y.at(r, j) - mu) * (y.at(r, j) - mu) / 8;
      EXPECT_LE(std::abs(mu), 1e-6);
      EXPECT_NEAR(var, 1.0, 1e-4);
    }
  }
}

TEST(TensorTest, EveryDifferentiableOpMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    auto c = random_tensor({5, 4}, rng);
    auto row = random_tensor({4}, rng);
    auto gamma = random_tensor({4}, rng);
    auto beta = random_tensor({4}, rng);
    auto sq = random_tensor({3, 6}, rng);
    std::vector<std::uint8_t> allowed = {1, 0, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1, 1, 1, 1};
    std::vector<int> targets = {1, 0, 3};
    std::vector<std::int64_t> qpos = {3, 4, 5}, kpos = {0, 2, 4, 6, 8};
    struct Case {
      const char* name;
      std::function<TD()> f;
      std::vector<NamedParam> params;
    };
    std::vector<Case> cases = {
        {"matmul_nt", [&] { return probe(matmul_nt(a, c), seed); }, {{"a", a}, {"c", c}}},
        {"transpose", [&] { return probe(transpose(a), seed); }, {{"a", a}}},
        {"add_sub_mul", [&] { return probe(mul(add(a, b), sub(a, b)), seed); }, {{"a", a}, {"b", b}}},
        {"scale", [&] { return probe(scale(a, 2.5), seed); }, {{"a", a}}},
        {"add_row", [&] { return probe(add_row(a, row), seed); }, {{"a", a}, {"row", row}}},
        {"relu", [&] { return probe(relu(a), seed); }, {{"a", a}}},
        {"sigmoid", [&] { return probe(sigmoid(a), seed); }, {{"a", a}}},
        {"swish", [&] { return probe(swish(a), seed); }, {{"a", a}}},
        {"glu", [&] { return probe(glu(a), seed); }, {{"a", a}}},
        {"softmax0", [&] { return probe(softmax(a, 0), seed); }, {{"a", a}}},
        {"softmax1", [&] { return probe(softmax(a, 1), seed); }, {{"a", a}}},
        {"log_softmax", [&] { return probe(log_softmax(a), seed); }, {{"a", a}}},
        {"masked_softmax", [&] { return probe(masked_softmax(matmul_nt(a, c), allowed), seed); }, {{"a", a}, {"c", c}}},
        {"layer_norm", [&] { return probe(layer_norm(a, gamma, beta), seed); },
         {{"a", a}, {"gamma", gamma}, {"beta", beta}}},
        {"mean", [&] { return mean(mul(a, a)); }, {{"a", a}}},
        {"reshape", [&] { return probe(reshape(a, {2, 6}), seed); }, {{"a", a}}},
        {"slice_concat_rows", [&] { return probe(concat_rows<double>({slice_rows(c, 1, 3), a}), seed); },
         {{"a", a}, {"c", c}}},
        {"slice_concat_cols", [&] { return probe(concat_cols<double>({slice_cols(a, 1, 3), b}), seed); },
         {{"a", a}, {"b", b}}},
        {"embedding", [&] { return probe(embedding(c, std::vector<int>{4, 0, 4}), seed); }, {{"c", c}}},
        {"gather_relative", [&] { return probe(gather_relative(sq, qpos, kpos, -3, 2), seed); },
         {{"sq", sq}}},
        {"label_smoothed_nll", [&] { return label_smoothed_nll(log_softmax(a), targets, 0.1); }, {{"a", a}}},
    };
    for (auto& cs : cases) {
      auto report = grad_check(cs.f, cs.params, 1e-5, 1e-4);
      EXPECT_TRUE(report.passed) << cs.name << " seed " << seed << " worst " << report.worst_name << " "
                                 << report.worst_rel_error;
    }
  }
}

TEST(TensorTest, ConvolutionGradients) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed + 100);
    auto x = random_tensor({2, 7, 6}, rng);
    auto w = random_tensor({3, 2, 3, 3}, rng);
    auto bias = random_tensor({3}, rng);
    auto seq = random_tensor({6, 3}, rng);
    auto k = random_tensor({3, 3}, rng);
    auto gamma = random_tensor({3}, rng);
    auto beta = random_tensor({3}, rng);
    std::vector<std::int64_t> bounds = {2, 6};
    for (auto pad : {Padding::kValid, Padding::kSameCentered, Padding::kSameCausal}) {
      expect_grads([&] { return probe(conv2d(x, w, bias, 2, 2, pad), seed); }, {{"x", x}, {"w", w}, {"b", bias}});
      expect_grads([&] { return probe(depthwise_conv1d(seq, k, pad), seed); }, {{"x", seq}, {"k", k}});
    }
    expect_grads([&] { return probe(depthwise_conv1d(seq, k, Padding::kSameCentered, bounds), seed); },
                 {{"x", seq}, {"k", k}});
    for (bool training : {true, false}) {
      auto rm = Tensor<double>::zeros({3});
      auto rv = Tensor<double>::full({3}, 1.5);
      expect_grads([&] { return probe(batch_norm(seq, gamma, beta, rm, rv, training), seed); },
                   {{"x", seq}, {"gamma", gamma}, {"beta", beta}});
    }
  }
}

double naive_conv_at(const TD& x, const TD& w, int o, int oy, int ox, int stride, int pad_y, int pad_x) {
  double acc = 0;
  for (int c = 0; c < x.dim(0); ++c)
    for (int ky = 0; ky < w.dim(2); ++ky)
      for (int kx = 0; kx < w.dim(3); ++kx) {
        const int iy = oy * stride + ky - pad_y, ix = ox * stride + kx - pad_x;
        if (iy < 0 || ix < 0 || iy >= x.dim(1) || ix >= x.dim(2)) continue;
        acc += w.data()[((o * x.dim(0) + c) * 3 + ky) * 3 + kx] * x.data()[(c * x.dim(1) + iy) * x.dim(2) + ix];
      }
  return acc;
}

TEST(TensorTest, Conv2dSamePaddingMatchesNaiveReference) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({1, 7, 7}, rng);
  auto w = random_tensor({2, 1, 3, 3}, rng);
  auto y = conv2d(x, w, TD(), 2, 2, Padding::kSameCentered);
  ASSERT_EQ(y.shape(), (Shape{2, 4, 4}));
  for (int o = 0; o < 2; ++o)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        EXPECT_NEAR(y.data()[(o * 4 + i) * 4 + j], naive_conv_at(x, w, o, i, j, 2, 1, 1), 1e-12);
  EXPECT_THROW(conv2d(Tensor<float>::zeros({1, 2, 2}), Tensor<float>::zeros({1, 1, 3, 3}), Tensor<float>(), 1, 1,
                      Padding::kValid),
               DimensionError);
}

TEST(TensorTest, DepthwiseIdentityKernels) {
  std::mt19937_64 rng(9);
  auto x = random_tensor({5, 3}, rng);
  auto one = Tensor<double>::full({3, 1}, 1.0);
  auto y = depthwise_conv1d(x, one, Padding::kSameCentered);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), std::vector<double>(x.data().begin(), x.data().end()));
  auto delta = Tensor<double>({3, 2}, {0, 1, 0, 1, 0, 1});
  auto z = depthwise_conv1d(x, delta, Padding::kSameCausal);
  EXPECT_EQ(std::vector<double>(z.data().begin(), z.data().end()), std::vector<double>(x.data().begin(), x.data().end()));
}

TEST(TensorTest, CausalConvolutionIgnoresFutureFrames) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    auto x = random_tensor({8, 2}, rng);
    auto k = random_tensor({2, 4}, rng);
    auto y = depthwise_conv1d(x, k, Padding::kSameCausal);
    const int t = static_cast<int>(seed % 8);
    std::vector<double> changed(x.data().begin(), x.data().end());
    for (std::size_t i = static_cast<std::size_t>(t + 1) * 2; i < changed.size(); ++i) changed[i] += 3.0;
    auto y2 = depthwise_conv1d(TD({8, 2}, changed), k, Padding::kSameCausal);
    for (int r = 0; r <= t; ++r)
      for (int c = 0; c < 2; ++c) EXPECT_EQ(y.at(r, c), y2.at(r, c));
  }
}

TEST(TensorTest, BackwardContracts) {
  auto w = Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  sum(w).backward();
  for (double g : w.grad()) EXPECT_EQ(g, 1.0);
  sum(w).backward();
  for (double g : w.grad()) EXPECT_EQ(g, 2.0);
  w.zero_grad();
  scale(sum(mul(w, w)), 0.0).backward();
  for (double g : w.grad()) EXPECT_EQ(g, 0.0);
  EXPECT_THROW(mul(w, w).backward(), ContractError);
}

TEST(TensorTest, NoGradGuardSkipsRecording) {
  auto w = Tensor<float>({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = sum(w);
  EXPECT_FALSE(y.requires_grad());
}

TEST(TensorTest, GradCheckReportsLinearLayerAndSoftmaxCrossEntropy) {
  std::mt19937_64 rng(21);
  auto x = random_tensor({4, 3}, rng);
  x.set_requires_grad(false);
  auto w = random_tensor({3, 5}, rng);
  auto b = random_tensor({5}, rng);
  auto linear = grad_check([&] { return probe(add_row(matmul(x, w), b), 3); }, {{"w", w}, {"b", b}}, 1e-5, 1e-5);
  EXPECT_TRUE(linear.passed) << linear.worst_rel_error;
  std::vector<int> y = {0, 4, 2, 2};
  auto xent = grad_check([&] { return label_smoothed_nll(log_softmax(add_row(matmul(x, w), b)), y, 0.0); },
                         {{"w", w}, {"b", b}}, 1e-5, 1e-5);
  EXPECT_TRUE(xent.passed) << xent.worst_rel_error;
}

}  // namespace
}  // namespace ctxasr
