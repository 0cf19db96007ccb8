// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "congater/ops.hpp"
#include "congater/tensor.hpp"
#include "test_support.hpp"

using namespace congater;
using congater::testing::random_tensor;

TEST(Tensor, FactoriesAndShape) {
  const Tensor m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_DOUBLE_EQ(m.at(1, 2), 6.0);
  EXPECT_EQ(Tensor::vector({1, 2}).rows(), 1u);
  EXPECT_EQ(Tensor::scalar(3.0).item(), 3.0);
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
}

TEST(Tensor, GradientIsLazyAndResettable) {
  Tensor x = Tensor::vector({1.0, 2.0}, true);
  EXPECT_FALSE(x.has_grad());
  backward(sum(mul(x, x)));
  ASSERT_TRUE(x.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
}

TEST(Tensor, GradientsAccumulateAcrossBackwardCalls) {
  Tensor x = Tensor::vector({3.0}, true);
  backward(sum(scale(x, 2.0)));
  backward(sum(scale(x, 2.0)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
}

TEST(Tensor, BackwardRejectsNonScalarLoss) {
  Tensor x = Tensor::vector({1.0, 2.0}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ShapeError);
}

TEST(Tensor, NoGradGuardSkipsGraph) {
  Tensor x = Tensor::vector({1.0}, true);
  {
    NoGradGuard guard;
    EXPECT_FALSE(grad_enabled());
    const Tensor y = scale(x, 2.0);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(grad_enabled());
}

TEST(Tensor, SharedSubgraphGetsBothContributions) {
  Tensor x = Tensor::vector({0.5}, true);
  const Tensor t = tanh(x);
  backward(sum(add(t, t)));
  EXPECT_NEAR(x.grad()[0], 2.0 * (1.0 - std::tanh(0.5) * std::tanh(0.5)), 1e-15);
}

TEST(Tensor, MutableValuesOnlyOnLeaves) {
  Tensor x = Tensor::vector({1.0}, true);
  Tensor y = scale(x, 2.0);
  EXPECT_NO_THROW(x.mutable_values());
  EXPECT_THROW(y.mutable_values(), std::logic_error);
}

TEST(Ops, TanhOracle) {
  // tanh(0.5) from a 30-digit evaluation.
  EXPECT_NEAR(tanh(Tensor::vector({0.5})).item(), 0.462117157260, 1e-12);
}

TEST(Ops, BroadcastOnlyAlongBatchDimension) {
  const Tensor a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  const Tensor row = Tensor::vector({10, 20, 30});
  const Tensor s = add(a, row);
  EXPECT_DOUBLE_EQ(s.at(1, 2), 36.0);
  try {
    add(a, Tensor::vector({1, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2]"), std::string::npos) << msg;
  }
}

TEST(Ops, MatmulRejectsInnerMismatch) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Ops, LinearOnVectorAndMatrix) {
  const Tensor w = Tensor::matrix(2, 3, {1, 0, 0, 0, 1, 1});
  const Tensor b = Tensor::vector({0.5, -0.5});
  const Tensor v = linear(Tensor::vector({1, 2, 3}), w, b);
  ASSERT_EQ(v.shape(), (Shape{2}));
  EXPECT_DOUBLE_EQ(v[0], 1.5);
  EXPECT_DOUBLE_EQ(v[1], 4.5);
  const Tensor m = linear(Tensor::matrix(1, 3, {1, 2, 3}), w, b);
  ASSERT_EQ(m.shape(), (Shape{1, 2}));
}

TEST(Ops, LogAndExpRejectInvalidInput) {
  EXPECT_THROW(log(Tensor::vector({0.0})), NumericError);
  EXPECT_THROW(log(Tensor::vector({-1.0})), NumericError);
  EXPECT_THROW(exp(Tensor::vector({1000.0})), NumericError);
  EXPECT_THROW(exp(Tensor::vector({std::nan("")})), NumericError);
}

TEST(Ops, SoftmaxIsStableForLargeLogits) {
  const Tensor p = softmax_rows(Tensor::vector({1000.0, 1000.0}));
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  const Tensor lp = log_softmax_rows(Tensor::vector({1000.0, 0.0}));
  EXPECT_NEAR(lp[1], -1000.0, 1e-9);
}

TEST(Ops, GradReverseNegatesGradient) {
  Tensor x = Tensor::vector({1.0, -2.0}, true);
  const Tensor y = grad_reverse(x);
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{1.0, -2.0}));
  backward(sum(scale(y, 3.0)));
  EXPECT_DOUBLE_EQ(x.grad()[0], -3.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -3.0);
}

TEST(Ops, DropoutZeroIsIdentityAndInvertedScaling) {
  std::mt19937_64 rng(1);
  const Tensor x = Tensor::full({1000}, 1.0);
  EXPECT_EQ(dropout(x, 0.0, rng).id(), x.id());
  const Tensor y = dropout(x, 0.5, rng);
  for (double v : y.values()) EXPECT_TRUE(v == 0.0 || v == 2.0);
  EXPECT_THROW(dropout(x, 1.0, rng), std::invalid_argument);
}

TEST(Ops, GatherAndPoolRejectBadIds) {
  const Tensor table = Tensor::zeros({4, 2});
  const std::vector<std::int32_t> bad{4};
  EXPECT_THROW(gather_rows(table, bad), std::out_of_range);
  const std::vector<std::vector<std::int32_t>> groups{{0, 1}, {-1}};
  EXPECT_THROW(mean_pool_groups(table, groups), std::out_of_range);
}

TEST(Ops, MeanPoolAveragesRows) {
  const Tensor table = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6});
  const std::vector<std::vector<std::int32_t>> groups{{0, 2}, {1}};
  const Tensor p = mean_pool_groups(table, groups);
  EXPECT_DOUBLE_EQ(p.at(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(p.at(0, 1), 4.0);
  EXPECT_DOUBLE_EQ(p.at(1, 1), 4.0);
}

// Property: softmax rows are distributions for arbitrary finite logits.
TEST(OpsProperty, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor x = random_tensor({3, 7}, rng, -50.0, 50.0);
    const Tensor p = softmax_rows(x);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(p.at(r, c), 0.0);
        s += p.at(r, c);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

// Each differentiable op passes a finite-difference check on random inputs.
TEST(OpsProperty, FiniteDifferencePerOp) {
  std::mt19937_64 rng(11);
  const Tensor w = random_tensor({4, 3}, rng);
  const Tensor b = random_tensor({4}, rng);
  const Tensor gamma = random_tensor({3}, rng, 0.5, 1.5);
  const Tensor beta = random_tensor({3}, rng);
  const Tensor other = random_tensor({2, 3}, rng);
  const std::vector<std::function<Tensor(const Tensor&)>> fns = {
      [&](const Tensor& x) { return sum(mul(add(x, other), sub(x, other))); },
      [&](const Tensor& x) { return sum(tanh(linear(x, w, b))); },
      [&](const Tensor& x) { return sum(mul(sigmoid(x), gelu(x))); },
      [&](const Tensor& x) { return sum(exp(scale(x, 0.5))); },
      [&](const Tensor& x) { return sum(log(add(mul(x, x), Tensor::full({2, 3}, 1.0)))); },
      [&](const Tensor& x) { return sum(mul(softmax_rows(x), other)); },
      [&](const Tensor& x) { return sum(mul(log_softmax_rows(x), other)); },
      [&](const Tensor& x) { return sum(mul(layer_norm_rows(x, gamma, beta), other)); },
      [&](const Tensor& x) { return mean(matmul(transpose(x), other)); },
      [&](const Tensor& x) { return sum(mul(reshape(x, {3, 2}), reshape(other, {3, 2}))); },
      [&](const Tensor& x) {
        const std::vector<Tensor> parts{x, other};
        return sum(mul(concat_rows(parts), concat_rows(parts)));
      },
      [&](const Tensor& x) {
        const std::vector<Tensor> parts{x, other};
        return sum(tanh(concat_cols(parts)));
      },
      [&](const Tensor& x) { return sum(mul(slice_rows(x, 1, 1), slice_cols(other, 0, 3))); },
      [&](const Tensor& x) {
        const std::vector<std::int32_t> ids{1, 0, 1};
        return sum(tanh(gather_rows(x, ids)));
      },
      [&](const Tensor& x) {
        const std::vector<int> idx{2, 0};
        return sum(mul(pick_rows(x, idx), pick_rows(x, idx)));
      },
  };
  for (std::size_t i = 0; i < fns.size(); ++i) {
    const Tensor x = random_tensor({2, 3}, rng);
    EXPECT_LT(finite_difference_check(fns[i], x), 1e-6) << "op case " << i;
  }
  // Gradient reversal disagrees with finite differences by exactly a sign:
  // |a - n| / |n| = 2 everywhere.
  const Tensor x = random_tensor({2, 3}, rng);
  EXPECT_NEAR(finite_difference_check([&](const Tensor& t) { return sum(mul(grad_reverse(t), other)); }, x), 2.0, 1e-6);
}
