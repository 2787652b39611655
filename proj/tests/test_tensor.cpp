#include <gtest/gtest.h>

#include <cmath>

#include "hsvae/optim.hpp"
#include "hsvae/tensor.hpp"
#include "testutil.hpp"

using namespace hsvae;
using test::max_grad_rel_err;
using test::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  Tensor eye = Tensor::from_data(2, 2, {1, 0, 0, 1});
  Tensor a = Tensor::from_data(2, 3, {1, 2, 3, 4, 5, 6});
  Tensor out = matmul(eye, a);
  for (size_t i = 0; i < out.data().size(); ++i) EXPECT_DOUBLE_EQ(out.data()[i], a.data()[i]);
}

TEST(Matmul, HandExpansion) {
  Tensor a = Tensor::from_data(2, 2, {1, 2, 3, 4});
  Tensor b = Tensor::from_data(2, 1, {0, 1});
  Tensor out = matmul(a, b);
  EXPECT_DOUBLE_EQ(out.at(0, 0), 2);
  EXPECT_DOUBLE_EQ(out.at(1, 0), 4);
}

TEST(Matmul, ShapeMismatchReportsBothShapes) {
  Tensor a = Tensor::zeros(2, 3);
  Tensor b = Tensor::zeros(4, 2);
  try {
    matmul(a, b);
    FAIL() << "expected ValueError";
  } catch (const ValueError& e) {
    EXPECT_NE(std::string(e.what()).find("2x3"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("4x2"), std::string::npos);
  }
}

TEST(Matmul, GradOfSumMatchesOnesTimesBt) {
  Rng rng(7);
  Tensor a = random_tensor(5, 7, rng);
  Tensor b = random_tensor(7, 3, rng, 1.0, false);
  Tensor loss = sum_all(matmul(a, b));
  backward(loss);
  // d sum(AB) / dA = ones(5,3) * B^T
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t k = 0; k < 7; ++k) {
      double expect = 0.0;
      for (int64_t j = 0; j < 3; ++j) expect += b.at(k, j);
      EXPECT_NEAR(a.grad()[static_cast<size_t>(i * 7 + k)], expect, 1e-12);
    }
}

TEST(Matmul, GradCheck) {
  Rng rng(11);
  Tensor a = random_tensor(4, 3, rng);
  Tensor b = random_tensor(3, 5, rng);
  std::vector<Tensor> leaves{a, b};
  auto loss = [&] { return sum_all(square(matmul(a, b))); };
  EXPECT_LT(max_grad_rel_err(leaves, loss), kGradTol);
}

TEST(Elementwise, SqrtValues) {
  Tensor t = sqrt_(Tensor::from_data(1, 2, {4, 9}));
  EXPECT_DOUBLE_EQ(t.at(0, 0), 2);
  EXPECT_DOUBLE_EQ(t.at(0, 1), 3);
}

TEST(Elementwise, SquareOfNegative) {
  EXPECT_DOUBLE_EQ(square(Tensor::scalar(-2)).value(), 4);
}

TEST(Elementwise, SqrtDerivativeAtFour) {
  Tensor x = Tensor::scalar(4.0, true);
  std::vector<Tensor> leaves{x};
  auto loss = [&] { return sqrt_(x); };
  Tensor l = loss();
  backward(l);
  EXPECT_NEAR(x.grad()[0], 0.25, 1e-12);
  EXPECT_LT(max_grad_rel_err(leaves, loss), kGradTol);
}

TEST(Elementwise, DivideByExactZeroRejected) {
  Tensor a = Tensor::from_data(1, 2, {1, 2});
  Tensor b = Tensor::from_data(1, 2, {1, 0});
  EXPECT_THROW(divide(a, b), ValueError);
}

TEST(Elementwise, DomainViolationsRejected) {
  EXPECT_THROW(sqrt_(Tensor::scalar(-1.0)), ValueError);
  EXPECT_THROW(log_(Tensor::scalar(0.0)), ValueError);
  EXPECT_THROW(log_(Tensor::scalar(-2.0)), ValueError);
}

TEST(Elementwise, BroadcastRowColScalar) {
  Tensor a = Tensor::from_data(2, 3, {1, 2, 3, 4, 5, 6});
  Tensor row = Tensor::from_data(1, 3, {10, 20, 30});
  Tensor col = Tensor::from_data(2, 1, {100, 200});
  Tensor r1 = add(a, row);
  EXPECT_DOUBLE_EQ(r1.at(1, 2), 36);
  Tensor r2 = add(a, col);
  EXPECT_DOUBLE_EQ(r2.at(1, 0), 204);
  Tensor r3 = mul(a, 2.0);
  EXPECT_DOUBLE_EQ(r3.at(0, 1), 4);
  EXPECT_THROW(add(Tensor::zeros(2, 3), Tensor::zeros(3, 2)), ValueError);
}

TEST(Elementwise, GradCheckWithBroadcast) {
  Rng rng(13);
  Tensor a = random_tensor(3, 4, rng);
  Tensor row = random_tensor(1, 4, rng);
  Tensor col = random_tensor(3, 1, rng);
  std::vector<Tensor> leaves{a, row, col};
  auto loss = [&] {
    Tensor t = mul(add(a, row), col);
    t = divide(t, add(square(col), 1.0));
    return sum_all(square(t));
  };
  EXPECT_LT(max_grad_rel_err(leaves, loss), kGradTol);
}

TEST(Elementwise, UnaryGradChecks) {
  Rng rng(17);
  Tensor x = random_tensor(2, 5, rng, 0.5);
  {
    auto w = x.mutable_data();
    for (auto& v : w) v = std::abs(v) + 0.5;  // keep sqrt/log in-domain
  }
  std::vector<Tensor> leaves{x};
  auto loss = [&] {
    Tensor t = add(add(sqrt_(x), log_(x)), add(exp_(mul(x, -1.0)), sigmoid(x)));
    return sum_all(mul(t, t));
  };
  EXPECT_LT(max_grad_rel_err(leaves, loss), kGradTol);
}

TEST(Elementwise, ReluGradCheckAwayFromKink) {
  Tensor x = Tensor::from_data(1, 4, {-1.5, -0.25, 0.4, 2.0}, true);
  std::vector<Tensor> leaves{x};
  auto loss = [&] { return sum_all(square(relu(x))); };
  EXPECT_LT(max_grad_rel_err(leaves, loss), kGradTol);
}

TEST(Reduce, MeanAxis0) {
  Tensor t = mean(Tensor::from_data(2, 2, {1, 3, 5, 7}), 0);
  EXPECT_DOUBLE_EQ(t.at(0, 0), 3);
  EXPECT_DOUBLE_EQ(t.at(0, 1), 5);
}

TEST(Reduce, StdOfConstantColumnIsZero) {
  Tensor t = stddev(Tensor::from_data(3, 1, {2, 2, 2}), 0);
  EXPECT_DOUBLE_EQ(t.value(), 0.0);
}

TEST(Reduce, PopulationConvention) {
  // sqrt(((1-2)^2 + (3-2)^2) / 2) = 1, not sqrt(2) as the N-1 form would give.
  Tensor t = stddev(Tensor::from_data(2, 1, {1, 3}), 0);
  EXPECT_DOUBLE_EQ(t.value(), 1.0);
  EXPECT_DOUBLE_EQ(variance(Tensor::from_data(2, 1, {1, 3}), 0).value(), 1.0);
}

TEST(Reduce, StdOverExtentOneRejected) {
  EXPECT_THROW(stddev(Tensor::from_data(1, 3, {1, 2, 3}), 0), ValueError);
  EXPECT_THROW(stddev(Tensor::from_data(3, 1, {1, 2, 3}), 1), ValueError);
}

TEST(Reduce, GradChecks) {
  Rng rng(19);
  Tensor x = random_tensor(4, 3, rng);
  std::vector<Tensor> leaves{x};
  auto loss = [&] {
    Tensor parts = add(square(sub(mean(x, 0), 0.3)), square(sub(stddev(x, 0), 1.2)));
    Tensor rows = add(sum(x, 1), variance(x, 1));
    return add(sum_all(parts), sum_all(square(rows)));
  };
  EXPECT_LT(max_grad_rel_err(leaves, loss), kGradTol);
}

TEST(Shape, SliceReshapeTransposeGradChecks) {
  Rng rng(23);
  Tensor x = random_tensor(3, 6, rng);
  std::vector<Tensor> leaves{x};
  auto loss = [&] {
    Tensor s = slice_cols(x, 1, 4);
    Tensor r = reshape(s, 9, 1);
    Tensor t = transpose(matmul(s, transpose(s)));
    return add(sum_all(square(r)), sum_all(t));
  };
  EXPECT_LT(max_grad_rel_err(leaves, loss), kGradTol);
}

TEST(Shape, SuffixCumsumValuesAndGrad) {
  Tensor x = Tensor::from_data(1, 3, {1, 2, 3}, true);
  Tensor s = suffix_cumsum(x);
  EXPECT_DOUBLE_EQ(s.at(0, 0), 6);
  EXPECT_DOUBLE_EQ(s.at(0, 1), 5);
  EXPECT_DOUBLE_EQ(s.at(0, 2), 3);

  Rng rng(29);
  Tensor y = random_tensor(3, 5, rng);
  std::vector<Tensor> leaves{y};
  auto loss = [&] { return sum_all(square(suffix_cumsum(y))); };
  EXPECT_LT(max_grad_rel_err(leaves, loss), kGradTol);
}

TEST(Conv2d, MatchesDirectStencil) {
  // 1x4x4 image, 2 filters of 3x3, stride 1 -> 2x2x2 output.
  Rng rng(31);
  Tensor x = random_tensor(2, 16, rng);
  Tensor w = random_tensor(2, 9, rng);
  Tensor b = random_tensor(1, 2, rng);
  Conv2dSpec spec{.in_channels = 1, .height = 4, .width = 4, .kernel = 3, .stride = 1};
  Tensor out = conv2d(x, w, b, spec);
  ASSERT_EQ(out.cols(), 2 * 2 * 2);
  for (int64_t s = 0; s < 2; ++s)
    for (int64_t oc = 0; oc < 2; ++oc)
      for (int64_t oy = 0; oy < 2; ++oy)
        for (int64_t ox = 0; ox < 2; ++ox) {
          double expect = b.at(0, oc);
          for (int64_t ky = 0; ky < 3; ++ky)
            for (int64_t kx = 0; kx < 3; ++kx)
              expect += w.at(oc, ky * 3 + kx) * x.at(s, (oy + ky) * 4 + (ox + kx));
          EXPECT_NEAR(out.at(s, oc * 4 + oy * 2 + ox), expect, 1e-12);
        }
}

TEST(Conv2d, GradCheck) {
  Rng rng(37);
  Tensor x = random_tensor(2, 2 * 5 * 5, rng);
  Tensor w = random_tensor(3, 2 * 2 * 2, rng);
  Tensor b = random_tensor(1, 3, rng);
  Conv2dSpec spec{.in_channels = 2, .height = 5, .width = 5, .kernel = 2, .stride = 2};
  std::vector<Tensor> leaves{x, w, b};
  auto loss = [&] { return sum_all(square(conv2d(x, w, b, spec))); };
  EXPECT_LT(max_grad_rel_err(leaves, loss), kGradTol);
}

TEST(Backward, SumOfSquares) {
  Tensor w = Tensor::from_data(1, 2, {1, 2}, true);
  backward(sum_all(square(w)));
  EXPECT_DOUBLE_EQ(w.grad()[0], 2);
  EXPECT_DOUBLE_EQ(w.grad()[1], 4);
}

TEST(Backward, ConstantLossLeavesAllGradsZero) {
  Tensor w = Tensor::from_data(1, 2, {1, 2}, true);
  Tensor constant = Tensor::scalar(5.0);
  backward(constant);  // no-op sweep
  EXPECT_FALSE(w.has_grad());

  // Structurally connected but constant: gradient is exactly zero.
  backward(sum_all(mul(w, 0.0)));
  EXPECT_DOUBLE_EQ(w.grad()[0], 0);
  EXPECT_DOUBLE_EQ(w.grad()[1], 0);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor w = Tensor::from_data(1, 2, {1, 2}, true);
  EXPECT_THROW(backward(square(w)), ValueError);
}

TEST(Backward, ReusedSubexpressionAccumulates) {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor y = square(x);       // 9
  Tensor l = add(y, mul(y, 2.0));  // 3 x^2
  backward(l);
  EXPECT_NEAR(x.grad()[0], 18.0, 1e-12);
}

TEST(Backward, FreshGradsPerSweep) {
  Tensor x = Tensor::scalar(2.0, true);
  backward(square(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  backward(square(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);  // not accumulated to 8
}

TEST(NoGrad, DisablesRecording) {
  Tensor x = Tensor::scalar(2.0, true);
  NoGradGuard ng;
  Tensor y = square(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Optimizer, ZeroGradsLeaveParamsUnchanged) {
  Tensor w = Tensor::from_data(1, 3, {1, -2, 3}, true);
  w.set_name("w");
  AdamOptimizer opt({w});
  backward(sum_all(mul(w, 0.0)));
  opt.step();
  EXPECT_DOUBLE_EQ(w.data()[0], 1);
  EXPECT_DOUBLE_EQ(w.data()[1], -2);
  EXPECT_DOUBLE_EQ(w.data()[2], 3);
}

TEST(Optimizer, ConstantGradientDescendsMonotonically) {
  Tensor w = Tensor::scalar(1.0, true);
  AdamOptimizer opt({w});
  double prev = w.data()[0];
  for (int i = 0; i < 10; ++i) {
    backward(w);  // d/dw = 1
    opt.step();
    EXPECT_LT(w.data()[0], prev);
    prev = w.data()[0];
  }
}

TEST(Optimizer, QuadraticBowlConverges) {
  Tensor w = Tensor::scalar(1.0, true);
  AdamOptimizer opt({w}, {.lr = 0.05});
  for (int i = 0; i < 200; ++i) {
    backward(square(w));
    opt.step();
  }
  EXPECT_LT(std::abs(w.data()[0]), 1e-2);
}

TEST(Optimizer, NonFiniteGradRefusedWithParamName) {
  Tensor w = Tensor::scalar(0.0, true);
  w.set_name("theta");
  AdamOptimizer opt({w});
  backward(w);
  const double before = w.data()[0];
  w.node().grad[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    opt.step();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("theta"), std::string::npos);
  }
  EXPECT_DOUBLE_EQ(w.data()[0], before);
}

TEST(Rng, SeedDeterminism) {
  Rng a(123), b(123);
  Tensor ta = Tensor::randn(4, 4, a);
  Tensor tb = Tensor::randn(4, 4, b);
  for (size_t i = 0; i < ta.data().size(); ++i) EXPECT_EQ(ta.data()[i], tb.data()[i]);
}

TEST(Rng, GammaBetaSanity) {
  Rng rng(99);
  double sum = 0.0;
  const int trials = 20000;
  for (int i = 0; i < trials; ++i) sum += rng.gamma(2.5);
  EXPECT_NEAR(sum / trials, 2.5, 0.05);
  sum = 0.0;
  for (int i = 0; i < trials; ++i) sum += rng.beta(2.0, 3.0);
  EXPECT_NEAR(sum / trials, 0.4, 0.02);
}

}  // namespace
