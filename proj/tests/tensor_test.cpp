// Copyright 2026 The HFUS Authors. All Rights Reserved.
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
#include <vector>

#include "gradcheck.hpp"
#include "hfus/ops.hpp"
#include "hfus/optim.hpp"
#include "hfus/tensor.hpp"

namespace hfus {
namespace {

using testing::grad_check;
using testing::random_tensor;
using testing::weighted_sum;

constexpr double kOpTolerance = 1e-5;
constexpr int kSeeds = 20;

TEST(TensorTest, ShapeMustMatchValueCount) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor({0, 3}, {}), ShapeError);
  const Tensor t({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.numel(), 6u);
}

TEST(Conv2dTest, OneByOneIdentityKernel) {
  Rng rng(1);
  const Tensor x = random_tensor({1, 5, 4}, rng, false);
  const Tensor out = conv2d(x, Tensor({1, 1, 1, 1}, {1.0}), Tensor::zeros({1}));
  ASSERT_EQ(out.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(out[i], x[i]);
}

TEST(Conv2dTest, AveragingKernelOnConstantField) {
  const Tensor x = Tensor::full({1, 6, 6}, 0.7);
  const Tensor out = conv2d(x, Tensor::full({1, 1, 3, 3}, 1.0 / 9.0), Tensor::zeros({1}), 1, 1);
  ASSERT_EQ(out.shape(), (Shape{1, 6, 6}));
  for (std::size_t i = 1; i < 5; ++i)
    for (std::size_t j = 1; j < 5; ++j) EXPECT_NEAR(out[i * 6 + j], 0.7, 1e-15);
  // Zero padding pulls the corners down to 4/9 of the constant.
  EXPECT_NEAR(out[0], 0.7 * 4.0 / 9.0, 1e-15);
}

TEST(Conv2dTest, OutputShapeWithStrideAndPadding) {
  const Tensor x = Tensor::zeros({2, 3, 9, 7});
  const Tensor out = conv2d(x, Tensor::zeros({4, 3, 3, 3}), Tensor::zeros({4}), 2, 1);
  EXPECT_EQ(out.shape(), (Shape{2, 4, 5, 4}));
}

TEST(Conv2dTest, MatchesDirectSummation) {
  Rng rng(5);
  const Tensor x = random_tensor({2, 5, 6}, rng, false);
  const Tensor w = random_tensor({3, 2, 3, 3}, rng, false);
  const Tensor b = random_tensor({3}, rng, false);
  const Tensor out = conv2d(x, w, b, 2, 1);
  ASSERT_EQ(out.shape(), (Shape{3, 3, 3}));
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double acc = b[o];
        for (std::size_t c = 0; c < 2; ++c)
          for (int ki = 0; ki < 3; ++ki)
            for (int kj = 0; kj < 3; ++kj) {
              const int y = static_cast<int>(i * 2) + ki - 1, xx = static_cast<int>(j * 2) + kj - 1;
              if (y < 0 || y >= 5 || xx < 0 || xx >= 6) continue;
              acc += w[((o * 2 + c) * 3 + ki) * 3 + kj] * x[(c * 5 + y) * 6 + xx];
            }
        EXPECT_NEAR(out[(o * 3 + i) * 3 + j], acc, 1e-14);
      }
}

TEST(Conv2dTest, ShapeErrorsNameTheDimension) {
  const Tensor x = Tensor::zeros({3, 8, 8});
  try {
    conv2d(x, Tensor::zeros({4, 2, 3, 3}), Tensor::zeros({4}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("dim 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(conv2d(x, Tensor::zeros({4, 3, 2, 2}), Tensor::zeros({4})), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor::zeros({4, 3, 3, 3}), Tensor::zeros({5})), ShapeError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), Tensor::zeros({1})), ShapeError);
}

TEST(Conv2dTest, GradientMatchesFiniteDifferenceOnSpecExample) {
  Rng rng(42);
  std::vector<Tensor> in{random_tensor({1, 4, 4}, rng), random_tensor({2, 1, 3, 3}, rng),
                         random_tensor({2}, rng)};
  const auto r = grad_check(
      in, [](const std::vector<Tensor>& t) { return conv2d(t[0], t[1], t[2], 1, 1); }, 7);
  EXPECT_LT(r.max_rel_error, kOpTolerance);
  EXPECT_EQ(r.checked, 16u + 18u + 2u);
}

TEST(ElementwiseTest, SpecExamples) {
  const Tensor r = relu(Tensor({3}, {-1.0, 0.0, 2.0}));
  EXPECT_EQ(std::vector<double>(r.values().begin(), r.values().end()), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  const Tensor c = concat({Tensor({3}, {1, 2, 3}), Tensor({2}, {4, 5})});
  EXPECT_EQ(std::vector<double>(c.values().begin(), c.values().end()), (std::vector<double>{1, 2, 3, 4, 5}));
  EXPECT_THROW(mul(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
  EXPECT_THROW(linear(Tensor::zeros({3}), Tensor::zeros({2, 4}), Tensor::zeros({2})), ShapeError);
}

TEST(ElementwiseTest, SigmoidIsStableForLargeInputs) {
  const Tensor s = sigmoid(Tensor({2}, {-800.0, 800.0}));
  EXPECT_EQ(s[0], 0.0);
  EXPECT_EQ(s[1], 1.0);
}

TEST(BceLossTest, SpecExamples) {
  EXPECT_NEAR(bce_loss(Tensor::scalar(0.5), 1).item(), std::log(2.0), 1e-15);
  EXPECT_NEAR(bce_loss(Tensor::scalar(1.0 - kLossEpsilon), 1).item(), 0.0, 1e-6);
  // Clamping keeps log(0) away.
  EXPECT_TRUE(std::isfinite(bce_loss(Tensor::scalar(0.0), 1).item()));

  Tensor p = Tensor::scalar(0.5, true);
  {
    Tape tape;
    tape.backward(bce_loss(p, 1));
  }
  EXPECT_NEAR(p.grad()[0], -2.0, 1e-12);
  const double h = 1e-6;
  const double fd = (bce_loss(Tensor::scalar(0.5 + h), 1).item() - bce_loss(Tensor::scalar(0.5 - h), 1).item()) / (2 * h);
  EXPECT_NEAR(p.grad()[0], fd, 1e-8);
}

TEST(BackwardTest, SumGivesOnes) {
  Rng rng(3);
  Tensor x = random_tensor({2, 3, 4}, rng);
  {
    Tape tape;
    backward(sum(x));
  }
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(BackwardTest, SumOfSquaresGivesTwoX) {
  Rng rng(4);
  Tensor x = random_tensor({5, 2}, rng);
  {
    Tape tape;
    backward(sum(mul(x, x)));
  }
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x[i]);
}

TEST(BackwardTest, GradientsAccumulateAcrossPasses) {
  Tensor x = Tensor::full({3}, 2.0, true);
  for (int pass = 0; pass < 2; ++pass) {
    Tape tape;
    backward(sum(x));
  }
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(BackwardTest, DetachedTensorIsAnError) {
  const Tensor x = Tensor::full({3}, 1.0, true);
  const Tensor untaped = sum(x);  // no active tape
  EXPECT_THROW(backward(untaped), TapeError);
  Tape tape;
  const Tensor loss = sum(x);
  EXPECT_THROW(backward(Tensor::scalar(1.0)), TapeError);
  EXPECT_EQ(tape.size(), 1u);
  backward(loss);
  EXPECT_EQ(tape.size(), 0u);  // consumed
  EXPECT_THROW(backward(loss), TapeError);
}

TEST(BackwardTest, NonScalarLossIsAnError) {
  Tape tape;
  const Tensor y = scale(Tensor::full({3}, 1.0, true), 2.0);
  EXPECT_THROW(tape.backward(y), TapeError);
}

TEST(BackwardTest, NoRecordingWithoutGradInputs) {
  Tape tape;
  const Tensor y = relu(Tensor::full({3}, 1.0));
  EXPECT_FALSE(y.requires_grad());
  EXPECT_EQ(tape.size(), 0u);
}

TEST(ForwardTest, NonFiniteOutputIsAnError) {
  EXPECT_THROW(scale(Tensor::full({2}, 1e308), 10.0), NonFiniteError);
  EXPECT_THROW(instance_normalize(Tensor::full({1, 1, 2, 2}, 3.0), 0.0), NonFiniteError);
}

TEST(SgdTest, SpecExamples) {
  Tensor p = Tensor::scalar(1.0, true);
  {
    Tape tape;
    backward(scale(p, 2.0));  // dL/dp = 2
  }
  std::vector<Tensor> params{p};
  sgd_step(params, 0.001);
  EXPECT_DOUBLE_EQ(p.item(), 0.998);
  EXPECT_EQ(p.grad()[0], 0.0);

  Tensor q = Tensor::scalar(1.5, true);
  {
    Tape tape;
    backward(scale(q, 0.0));
  }
  std::vector<Tensor> qs{q};
  sgd_step(qs, 0.001);
  EXPECT_EQ(q.item(), 1.5);
}

TEST(SgdTest, OneStepOnQuadratic) {
  // L = 0.5 (p - 3)^2, dL/dp = p - 3 = -3 at p = 0.
  Tensor p = Tensor::scalar(0.0, true);
  {
    Tape tape;
    const Tensor d = add(p, Tensor::scalar(-3.0));
    backward(scale(mul(d, d), 0.5));
  }
  EXPECT_DOUBLE_EQ(p.grad()[0], -3.0);
  std::vector<Tensor> params{p};
  sgd_step(params, 0.1);
  EXPECT_NEAR(p.item(), 0.3, 1e-15);
}

TEST(SgdTest, NonFiniteGradientAbortsStep) {
  Tensor a = Tensor::scalar(1.0, true);
  Tensor b = Tensor::scalar(1.0, true);
  {
    Tape tape;
    backward(add(scale(a, 1.0), scale(b, 1e308)));
  }
  {
    // Push b's gradient to +inf by accumulating a second pass.
    Tape tape;
    backward(scale(b, 1e308));
  }
  ASSERT_FALSE(std::isfinite(b.grad()[0]));
  std::vector<Tensor> params{a, b};
  EXPECT_THROW(sgd_step(params, 0.1), NonFiniteError);
  EXPECT_EQ(a.item(), 1.0);  // nothing applied
  EXPECT_THROW(sgd_step(params, 0.0), DomainError);
}

// Every differentiable op against central finite differences on 20 seeds.
class OpGradientTest : public ::testing::TestWithParam<int> {};

TEST_P(OpGradientTest, AllOpsMatchFiniteDifferences) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  Rng rng(seed);
  const auto check = [&](const char* name, std::vector<Tensor> in,
                         const std::function<Tensor(const std::vector<Tensor>&)>& f) {
    const auto r = grad_check(in, f, seed);
    EXPECT_LT(r.max_rel_error, kOpTolerance) << name << " seed " << seed;
    EXPECT_GT(r.checked, 0u) << name;
  };

  const std::size_t stride = 1 + seed % 2, pad = seed % 2;
  check("conv2d", {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)},
        [&](const auto& t) { return conv2d(t[0], t[1], t[2], stride, pad); });
  check("relu", {random_tensor({4, 3}, rng)}, [](const auto& t) { return relu(t[0]); });
  check("sigmoid", {random_tensor({4, 3}, rng, true, -3, 3)}, [](const auto& t) { return sigmoid(t[0]); });
  check("linear", {random_tensor({5}, rng), random_tensor({3, 5}, rng), random_tensor({3}, rng)},
        [](const auto& t) { return linear(t[0], t[1], t[2]); });
  check("concat", {random_tensor({3}, rng), random_tensor({2}, rng)},
        [](const auto& t) { return concat({t[0], t[1]}); });
  check("mul", {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}, [](const auto& t) { return mul(t[0], t[1]); });
  check("mul_broadcast", {random_tensor({3, 2, 4}, rng), random_tensor({2, 4}, rng)},
        [](const auto& t) { return mul(t[0], t[1]); });
  check("add_scale", {random_tensor({4}, rng), random_tensor({4}, rng)},
        [](const auto& t) { return scale(add(t[0], t[1]), -1.7); });
  check("sum", {random_tensor({3, 3}, rng)}, [](const auto& t) { return sum(t[0]); });
  check("select", {random_tensor({3, 2, 2}, rng)}, [](const auto& t) { return select(t[0], 1); });
  check("stack", {random_tensor({4}, rng), random_tensor({4}, rng)},
        [](const auto& t) { return stack(std::span<const Tensor>(t)); });
  check("global_avg_pool", {random_tensor({3, 4, 5}, rng)}, [](const auto& t) { return global_avg_pool(t[0]); });
  check("mean_rows", {random_tensor({4, 3}, rng)}, [](const auto& t) { return mean_rows(t[0]); });
  check("var_rows", {random_tensor({4, 3}, rng)}, [](const auto& t) { return var_rows(t[0]); });
  check("max_rows", {random_tensor({4, 3}, rng)}, [](const auto& t) { return max_rows(t[0]); });
  check("bce_loss", {random_tensor({1}, rng, true, 0.05, 0.95)},
        [&](const auto& t) { return bce_loss(t[0], static_cast<int>(seed % 2)); });
  check("instance_normalize", {random_tensor({2, 3, 3, 4}, rng)},
        [](const auto& t) { return instance_normalize(t[0], 1e-5); });
  check("batch_normalize", {random_tensor({3, 2, 3, 3}, rng)},
        [](const auto& t) { return batch_normalize(t[0], 1e-5); });
  const std::vector<double> mean{0.1, -0.2}, var{0.5, 2.0};
  check("normalize_with", {random_tensor({2, 2, 3, 3}, rng)},
        [&](const auto& t) { return normalize_with(t[0], mean, var, 1e-5); });
  check("channel_affine", {random_tensor({2, 3, 2, 2}, rng), random_tensor({3}, rng), random_tensor({3}, rng),
                           random_tensor({3}, rng), random_tensor({3}, rng)},
        [](const auto& t) {
          const std::vector<Tensor> g{t[1], t[3]}, b{t[2], t[4]};
          return channel_affine(t[0], g, b);
        });
  check("channel_affine_aliased", {random_tensor({3, 2, 2, 2}, rng), random_tensor({2}, rng), random_tensor({2}, rng)},
        [](const auto& t) {
          const std::vector<Tensor> g{t[1], t[1], t[1]}, b{t[2], t[2], t[2]};
          return channel_affine(t[0], g, b);
        });
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradientTest, ::testing::Range(0, kSeeds));

TEST(DeterminismTest, RepeatedRunsAreBitIdentical) {
  auto run = [] {
    Rng rng(99);
    Tensor x = random_tensor({2, 2, 6, 6}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    Tensor b = random_tensor({3}, rng);
    Tape tape;
    const Tensor y = relu(instance_normalize(conv2d(x, w, b, 2, 1), 1e-5));
    const Tensor loss = weighted_sum(y, 3);
    const double value = loss.item();
    tape.backward(loss);
    std::vector<double> out{value};
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(PurityTest, OpsDoNotMutateInputs) {
  Rng rng(8);
  const Tensor x = random_tensor({2, 2, 4, 4}, rng);
  const std::vector<double> before(x.values().begin(), x.values().end());
  Tape tape;
  const Tensor y = instance_normalize(relu(conv2d(x, random_tensor({2, 2, 3, 3}, rng), random_tensor({2}, rng), 1, 1)), 1e-5);
  tape.backward(weighted_sum(y, 1));
  EXPECT_EQ(std::vector<double>(x.values().begin(), x.values().end()), before);
}

}  // namespace
}  // namespace hfus
