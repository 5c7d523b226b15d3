// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cfd/norm.hpp"

using Td = cfd::Tensor<double>;

namespace {

void fill(Td& t, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
}

// Per-channel mean and biased variance over (n, h, w), computed in long double.
std::pair<std::vector<long double>, std::vector<long double>> channel_stats(const Td& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<long double> m(c, 0), v(c, 0);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < hw; ++p) m[k] += x[(i * c + k) * hw + p];
    m[k] /= n * hw;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < hw; ++p) {
        const long double d = x[(i * c + k) * hw + p] - m[k];
        v[k] += d * d;
      }
    v[k] /= n * hw;
  }
  return {m, v};
}

}  // namespace

TEST(BatchNorm, TrainOutputIsStandardized) {
  std::mt19937_64 rng(1);
  auto x = Td::uniform({6, 3, 4, 4}, -3, 5, rng);
  auto s = cfd::BNState<double>::make(3, 1);
  auto [m, v] = channel_stats(cfd::batch_norm(x, s, 0));
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_LT(std::abs(static_cast<double>(m[k])), 1e-6);
    EXPECT_NEAR(static_cast<double>(v[k]), 1.0, 1e-4);
  }
}

TEST(BatchNorm, RunningMeanRecurrence) {
  auto s = cfd::BNState<double>::make(1, 1);
  const double mu = 2.0;
  auto x = Td({2, 1, 1, 2}, {1.0, 3.0, 1.0, 3.0});
  for (int t = 1; t <= 10; ++t) {
    cfd::batch_norm(x, s, 0);
    EXPECT_NEAR(s.running_mean[0][0], (1.0 - std::pow(0.9, t)) * mu, 1e-12) << "T=" << t;
    EXPECT_GE(s.running_var[0][0], 0.0);
  }
}

TEST(BatchNorm, SingleValueInTrainModeIsValueError) {
  auto s = cfd::BNState<double>::make(1, 1);
  EXPECT_THROW(cfd::batch_norm(Td::zeros({1, 1, 1, 1}), s, 0), cfd::ValueError);
}

TEST(BatchNorm, UnknownDomainIsDomainError) {
  auto s = cfd::BNState<double>::make(2, 2);
  EXPECT_THROW(cfd::batch_norm(Td::zeros({2, 2, 2, 2}), s, 2), cfd::DomainError);
}

TEST(InstanceNorm, MatchesFormula) {
  auto s = cfd::INState<double>::make(1);
  s.gamma.data()[0] = 2.0;
  s.beta.data()[0] = 1.0;
  auto y = cfd::instance_norm(Td({1, 1, 2, 2}, {1, 2, 3, 4}), s);
  for (int i = 0; i < 4; ++i) {
    const long double ref = 2.0L * ((i + 1) - 2.5L) / std::sqrt(1.25L + 1e-5L) + 1.0L;
    EXPECT_NEAR(y[i], static_cast<double>(ref), 1e-6);
  }
}

TEST(InstanceNorm, ShiftInvariant) {
  std::mt19937_64 rng(2);
  auto x = Td::uniform({3, 4, 3, 5}, -1, 1, rng);
  auto shifted = x.clone_leaf(false);
  std::uniform_real_distribution<double> u(-5, 5);
  for (std::size_t nc = 0; nc < 12; ++nc) {
    const double k = u(rng);
    for (std::size_t p = 0; p < 15; ++p) shifted.data()[nc * 15 + p] += k;
  }
  auto s = cfd::INState<double>::make(4);
  auto a = cfd::instance_norm(x, s), b = cfd::instance_norm(shifted, s);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(InstanceNorm, TooFewPositions) {
  auto s = cfd::INState<double>::make(1);
  EXPECT_THROW(cfd::instance_norm(Td::zeros({2, 1, 1, 1}), s), cfd::ValueError);
}

TEST(Centering, ZeroWeightIsIdentityAndAvgDoubles) {
  std::mt19937_64 rng(3);
  auto x = Td::uniform({2, 3, 2, 2}, -1, 1, rng);
  auto y = cfd::centering_calibration(x, Td::zeros({3}), cfd::PoolKind::kMax);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
  auto c = Td::full({1, 1, 2, 2}, 1.5);
  auto z = cfd::centering_calibration(c, Td::full({1}, 1.0), cfd::PoolKind::kAvg);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(z[i], 3.0);
}

TEST(Centering, MatchesTwoStepEvaluation) {
  std::mt19937_64 rng(4);
  auto x = Td::uniform({2, 3, 3, 2}, -1, 1, rng), w = Td::uniform({3}, -1, 1, rng);
  for (auto kind : {cfd::PoolKind::kAvg, cfd::PoolKind::kMax}) {
    auto y = cfd::centering_calibration(x, w, kind);
    for (std::size_t nc = 0; nc < 6; ++nc) {
      double pooled = kind == cfd::PoolKind::kMax ? -1e300 : 0.0;
      for (std::size_t p = 0; p < 6; ++p)
        pooled = kind == cfd::PoolKind::kMax ? std::max(pooled, x[nc * 6 + p]) : pooled + x[nc * 6 + p] / 6.0;
      for (std::size_t p = 0; p < 6; ++p) EXPECT_NEAR(y[nc * 6 + p], x[nc * 6 + p] + w[nc % 3] * pooled, 1e-7);
    }
  }
  EXPECT_THROW(cfd::centering_calibration(x, Td::zeros({2}), cfd::PoolKind::kAvg), cfd::ShapeError);
}

TEST(Csbn, PerDomainStandardizationWithDisjointMeans) {
  std::mt19937_64 rng(5);
  auto s = cfd::BNState<double>::make(3, 2);
  fill(s.w_m, rng, -0.5, 0.5);
  auto a = Td::uniform({4, 3, 3, 3}, -1, 1, rng), b = Td::uniform({4, 3, 3, 3}, 9, 11, rng);
  for (auto* x : {&a, &b}) {
    const std::size_t d = x == &a ? 0 : 1;
    auto tr = cfd::csbn_traced(*x, s, d);
    auto [m, v] = channel_stats(tr.standardized);
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_LT(std::abs(static_cast<double>(m[k])), 1e-6);
      EXPECT_NEAR(static_cast<double>(v[k]), 1.0, 1e-4);
    }
  }
}

TEST(Csbn, RunningStatsTrackCalibratedFeature) {
  std::mt19937_64 rng(6);
  auto s = cfd::BNState<double>::make(2, 1);
  fill(s.w_m, rng, 0.5, 1.0);
  auto x = Td::uniform({3, 2, 2, 2}, 0, 1, rng);
  auto tr = cfd::csbn_traced(x, s, 0);
  auto [m, v] = channel_stats(tr.calibrated);
  for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(s.running_mean[0][k], 0.1 * static_cast<double>(m[k]), 1e-12);
}

TEST(Csbn, DegenerateGateReducesToBatchNorm) {
  std::mt19937_64 rng(7);
  auto x = Td::uniform({4, 3, 3, 3}, -2, 2, rng);
  auto s = cfd::BNState<double>::make(3, 2);
  for (auto& v : s.w_beta.data()) v = 40.0;
  auto plain = cfd::BNState<double>::make(3, 2);
  auto y = cfd::csbn(x, s, 1), ref = cfd::batch_norm(x, plain, 1);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-5);
}

TEST(Csbn, GateStrictlyInsideUnitInterval) {
  std::mt19937_64 rng(8);
  auto s = cfd::BNState<double>::make(3, 1);
  fill(s.w_gamma, rng, -2, 2);
  fill(s.w_beta, rng, -2, 2);
  auto tr = cfd::csbn_traced(Td::uniform({2, 3, 3, 3}, -3, 3, rng), s, 0);
  for (double g : tr.gate.data()) {
    EXPECT_GT(g, 0.0);
    EXPECT_LT(g, 1.0);
  }
}

TEST(MeanPath, SingleDomainIsIdentity) {
  std::mt19937_64 rng(9);
  auto s = cfd::BNState<double>::make(3, 1);
  fill(s.gamma[0], rng, 0.5, 1.5);
  fill(s.running_var[0], rng, 0.5, 1.5);
  auto mp = cfd::csbn_inference_mean_path(s);
  EXPECT_EQ(mp.gamma.to_vector(), s.gamma[0].to_vector());
  EXPECT_EQ(mp.running_var.to_vector(), s.running_var[0].to_vector());
}

TEST(MeanPath, TwoDomainAverage) {
  auto s = cfd::BNState<double>::make(1, 2);
  s.gamma[0].data()[0] = 0.0;
  s.gamma[1].data()[0] = 2.0;
  EXPECT_DOUBLE_EQ(cfd::csbn_inference_mean_path(s).gamma[0], 1.0);
}

TEST(MeanPath, EvalOutputIgnoresDomainLabel) {
  std::mt19937_64 rng(10);
  auto s = cfd::BNState<double>::make(4, 3);
  for (std::size_t d = 0; d < 3; ++d) {
    fill(s.gamma[d], rng, 0.5, 1.5);
    fill(s.beta[d], rng, -0.5, 0.5);
    fill(s.running_mean[d], rng, -0.5, 0.5);
    fill(s.running_var[d], rng, 0.5, 1.5);
  }
  fill(s.w_m, rng, -0.5, 0.5);
  s.mode = cfd::Mode::kEval;
  auto x = Td::uniform({2, 4, 3, 3}, -1, 1, rng);
  const auto ref = cfd::csbn(x, s, 0).to_vector();
  for (std::size_t d : {1, 2, 3, 17}) EXPECT_EQ(cfd::csbn(x, s, d).to_vector(), ref) << "domain " << d;
}

TEST(MeanPath, StatsOnlyUsesCallerAffine) {
  std::mt19937_64 rng(11);
  auto s = cfd::BNState<double>::make(2, 2);
  fill(s.gamma[0], rng, 0.5, 1.0);
  fill(s.gamma[1], rng, 1.5, 2.0);
  s.mode = cfd::Mode::kEval;
  s.mean_path = cfd::MeanPath::kStatsOnly;
  auto x = Td::uniform({1, 2, 2, 2}, -1, 1, rng);
  EXPECT_NE(cfd::csbn(x, s, 0).to_vector(), cfd::csbn(x, s, 1).to_vector());
  EXPECT_THROW(cfd::csbn(x, s, 2), cfd::DomainError);
}

TEST(Cin, DegenerateCalibrationReducesToInstanceNorm) {
  std::mt19937_64 rng(12);
  auto x = Td::uniform({2, 3, 3, 4}, -2, 2, rng);
  auto s = cfd::INState<double>::make(3);
  fill(s.gamma, rng, 0.5, 1.5);
  fill(s.beta, rng, -0.5, 0.5);
  auto gated = s;  // tensors are shared handles, so the gate bias gets its own
  gated.w_o = Td::full({3}, 40.0, true);
  auto y = cfd::cin(x, gated), ref = cfd::instance_norm(x, s);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-5);
  auto half = cfd::cin(x, s);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(half[i], 0.5 * ref[i], 1e-12);
}

TEST(Cin, StatisticsComeFromUncalibratedInput) {
  std::mt19937_64 rng(13);
  auto x = Td::uniform({1, 1, 2, 2}, -1, 1, rng);
  auto s = cfd::INState<double>::make(1);
  s.w_u.data()[0] = 1.0;
  s.calib_pool = cfd::PoolKind::kAvg;
  for (auto& v : s.w_o.data()) v = 60.0;
  auto y = cfd::cin(x, s);
  double mean = 0, var = 0;
  for (double v : x.data()) mean += v / 4;
  for (double v : x.data()) var += (v - mean) * (v - mean) / 4;
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i] / std::sqrt(var + 1e-5), 1e-9);  // (x + mean(x) - mean(x)) / sigma(x)
}

TEST(NormSlot, PerDomainSlicesRestoreRowOrder) {
  std::mt19937_64 rng(14);
  auto slot = cfd::NormSlot<double>::make(cfd::NormKind::kCSBN, 2, 2, 1e-5, 0.1, cfd::PoolKind::kMax,
                                          cfd::MeanPath::kParamsAndStats);
  auto x = Td::uniform({4, 2, 2, 2}, -1, 1, rng);
  auto mixed = slot.forward(x, {1, 0, 1, 0}, cfd::Mode::kTrain);
  auto ref_slot = cfd::NormSlot<double>::make(cfd::NormKind::kCSBN, 2, 2, 1e-5, 0.1, cfd::PoolKind::kMax,
                                              cfd::MeanPath::kParamsAndStats);
  auto d0 = cfd::csbn(cfd::index_select0(x, {1, 3}), ref_slot.bn, 0);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_DOUBLE_EQ(mixed[8 + i], d0[i]);
    EXPECT_DOUBLE_EQ(mixed[24 + i], d0[8 + i]);
  }
}
