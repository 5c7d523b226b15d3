// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cfd/gradcheck.hpp"
#include "cfd/ops.hpp"

using cfd::Tensor;
using Td = cfd::Tensor<double>;

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Td({2, 3}, std::vector<double>(5, 0.0)), cfd::ShapeError);
  EXPECT_THROW(Td({2, 0}, {}), cfd::ShapeError);
}

TEST(Tensor, AddGradientIsOnes) {
  auto a = Td({3}, {1, 2, 3}, true), b = Td({3}, {4, 5, 6}, true);
  auto y = cfd::sum_all(cfd::add(a, b));
  cfd::backward(y);
  for (double g : a.grad()) EXPECT_EQ(g, 1.0);
  for (double g : b.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Tensor, BroadcastGradientReducesOverExpandedAxes) {
  auto a = Td({2, 3}, {1, 2, 3, 4, 5, 6}, true), b = Td({1, 3}, {1, 1, 1}, true);
  cfd::backward(cfd::sum_all(cfd::mul(a, b)));
  EXPECT_EQ(b.grad(), (std::vector<double>{5, 7, 9}));
  EXPECT_EQ(a.grad(), std::vector<double>(6, 1.0));
}

TEST(Tensor, SharedSubexpressionAccumulates) {
  auto x = Td({1}, {3.0}, true);
  auto y = cfd::mul(x, x);  // x^2
  cfd::backward(cfd::sum_all(cfd::add(y, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Tensor, SigmoidDerivativeAtZeroMatchesFiniteDifference) {
  auto x = Td({1}, {0.0}, true);
  cfd::backward(cfd::sum_all(cfd::sigmoid(x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
  const double h = 1e-6;
  const double fd = (1.0 / (1.0 + std::exp(-h)) - 1.0 / (1.0 + std::exp(h))) / (2 * h);
  EXPECT_NEAR(x.grad()[0], fd, 1e-9);
}

TEST(Tensor, SecondBackwardIsGraphError) {
  auto x = Td({2}, {1, 2}, true);
  auto y = cfd::sum_all(cfd::mul(x, x));
  cfd::backward(y);
  EXPECT_THROW(cfd::backward(y), cfd::GraphError);
}

TEST(Tensor, NonScalarLossIsShapeError) {
  auto x = Td({2}, {1, 2}, true);
  EXPECT_THROW(cfd::backward(cfd::mul(x, x)), cfd::ShapeError);
}

TEST(Tensor, NoGradGuardRecordsNothing) {
  auto x = Td({2}, {1, 2}, true);
  Td y;
  {
    cfd::NoGradGuard ng;
    y = cfd::sum_all(cfd::mul(x, x));
  }
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tensor, DetachCutsHistory) {
  auto x = Td({1}, {2.0}, true);
  auto d = cfd::mul(x, x).detach();
  cfd::backward(cfd::sum_all(cfd::add(cfd::mul(d, x), x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);  // d = 4 is a constant
}

TEST(Ops, SqrtOfNegativeIsValueError) {
  EXPECT_THROW(cfd::sqrt(Td({2}, {1.0, -1.0})), cfd::ValueError);
}

TEST(Ops, MatmulShapeMismatch) {
  EXPECT_THROW(cfd::matmul(Td::zeros({2, 3}), Td::zeros({2, 3})), cfd::ShapeError);
}

TEST(Ops, ConvMatchesDirectLoop) {
  std::mt19937_64 rng(3);
  auto x = Td::uniform({2, 3, 5, 4}, -1, 1, rng), k = Td::uniform({2, 3, 3, 3}, -1, 1, rng);
  for (std::size_t stride : {1, 2}) {
    auto y = cfd::conv2d(x, k, stride, 1);
    const std::size_t ho = (5 + 2 - 3) / stride + 1, wo = (4 + 2 - 3) / stride + 1;
    ASSERT_EQ(y.shape(), (cfd::Shape{2, 2, ho, wo}));
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t o = 0; o < 2; ++o)
        for (std::size_t i = 0; i < ho; ++i)
          for (std::size_t j = 0; j < wo; ++j) {
            double s = 0;
            for (std::size_t c = 0; c < 3; ++c)
              for (std::size_t a = 0; a < 3; ++a)
                for (std::size_t b = 0; b < 3; ++b) {
                  const long yy = static_cast<long>(i * stride + a) - 1, xx = static_cast<long>(j * stride + b) - 1;
                  if (yy < 0 || xx < 0 || yy >= 5 || xx >= 4) continue;
                  s += x[((n * 3 + c) * 5 + yy) * 4 + xx] * k[((o * 3 + c) * 3 + a) * 3 + b];
                }
            EXPECT_NEAR(y[((n * 2 + o) * ho + i) * wo + j], s, 1e-12);
          }
  }
}

TEST(Ops, ConvNonpositiveOutputIsShapeError) {
  EXPECT_THROW(cfd::conv2d(Td::zeros({1, 1, 2, 2}), Td::zeros({1, 1, 3, 3}), 1, 0), cfd::ShapeError);
}

TEST(Ops, GemOfOneAndTwoWithPThree) {
  auto x = Td({1, 1, 1, 2}, {1.0, 2.0});
  auto p = Td::scalar(3.0);
  // ((1 + 8) / 2)^(1/3)
  EXPECT_NEAR(cfd::gem(x, p).item(), 1.6509636244473134, 1e-12);
}

TEST(Ops, GemRejectsNegativeInput) {
  EXPECT_THROW(cfd::gem(Td({1, 1, 1, 2}, {1.0, -2.0}), Td::scalar(3.0)), cfd::ValueError);
}

TEST(Ops, MaxReduceTieGoesToLowestIndex) {
  auto x = Td({1, 4}, {1.0, 3.0, 3.0, 0.0}, true);
  cfd::backward(cfd::sum_all(cfd::max_reduce(x, {1})));
  EXPECT_EQ(x.grad(), (std::vector<double>{0, 1, 0, 0}));
}

TEST(Ops, ReduceStatsUsesBiasedVariance) {
  auto x = Td({1, 4}, {1, 2, 3, 4});
  auto st = cfd::reduce_stats(x, {1});
  EXPECT_DOUBLE_EQ(st.mean.item(), 2.5);
  EXPECT_DOUBLE_EQ(st.var.item(), 1.25);
}

TEST(Ops, CrossEntropyMatchesReference) {
  auto logits = Td({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0}, true);
  const std::vector<std::size_t> labels{1, 0};
  auto l = cfd::cross_entropy(logits, labels, 0.0);
  auto lse = [](double a, double b, double c) { return std::log(std::exp(a) + std::exp(b) + std::exp(c)); };
  const double ref = 0.5 * ((lse(1, 2, 0.5) - 2.0) + (lse(-1, 0, 3) + 1.0));
  EXPECT_NEAR(l.item(), ref, 1e-12);
}

TEST(Ops, CrossEntropyLabelOutOfRange) {
  EXPECT_THROW(cfd::cross_entropy(Td::zeros({1, 3}), {3}, 0.0), cfd::ValueError);
}

TEST(GradCheck, QuadraticIsExact) {
  auto x = Td({3}, {0.5, -1.0, 2.0}, true);
  cfd::GradCheckOptions opt;
  opt.step = 1e-3;
  auto rep = cfd::grad_check([&] { return cfd::sum_all(cfd::mul(x, x)); }, {{"x", x}}, 1e-10, opt);
  EXPECT_TRUE(rep.passed()) << rep.max_rel_err();
}

TEST(GradCheck, DetectsWrongGradient) {
  // relu at an exact kink: analytic uses the zero subgradient, the central
  // difference sees 0.5.
  auto x = Td({1}, {0.0}, true);
  auto rep = cfd::grad_check([&] { return cfd::sum_all(cfd::relu(x)); }, {{"x", x}}, 1e-4);
  EXPECT_FALSE(rep.passed());
}
