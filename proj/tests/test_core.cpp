// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "difflab/core.hpp"

using namespace difflab;

TEST(ForwardProcess, VariancePreserving) {
  for (double g : {-40.0, -6.0, -0.3, 0.0, 2.5, 6.0, 40.0}) {
    EXPECT_NEAR(alpha2_of(g) + sigma2_of(g), 1.0, 1e-15) << g;
    EXPECT_NEAR(std::exp(log_sigma2_of(g)), sigma2_of(g), 1e-14 * std::max(1.0, sigma2_of(g))) << g;
  }
  EXPECT_GT(sigma2_of(1.0), sigma2_of(0.0));
}

TEST(ForwardProcess, SoftplusInverse) {
  for (double y : {1e-6, 0.3, 1.0, 7.0, 45.0}) EXPECT_NEAR(softplus(softplus_inverse(y)), y, 1e-12 * std::max(1.0, y));
}

TEST(Data, JointTableSumsToOne) {
  for (auto kind : {DataKind::joint, DataKind::factorized}) {
    const Instance inst = desk_instance(0, kind);
    const auto table = inst.data.joint_table();
    EXPECT_NEAR(std::accumulate(table.begin(), table.end(), 0.0), 1.0, 1e-12);
    EXPECT_EQ(table.size(), 216u);
  }
}

TEST(Data, EncodeDecodeRoundTrip) {
  const DataDistribution d = copy_chain(6, 3, 0.6);
  for (std::size_t k = 0; k < d.num_states(); ++k) EXPECT_EQ(d.encode(d.decode(k)), k);
}

TEST(Data, FactorizedHasNoTotalCorrelation) {
  EXPECT_DOUBLE_EQ(total_correlation(desk_instance(0, DataKind::factorized).data), 0.0);
  EXPECT_GT(total_correlation(desk_instance(0, DataKind::joint).data), 0.1);
}

TEST(Data, SampleFrequenciesMatchTable) {
  const Instance inst = pair_instance(0.9);
  std::vector<double> counts(4, 0.0);
  const int n = 40000;
  for (int j = 0; j < n; ++j) {
    Stream rng(3, "sample-freq", static_cast<std::uint64_t>(j));
    counts[inst.data.encode(inst.data.sample(rng))] += 1.0;
  }
  const auto table = inst.data.joint_table();
  for (std::size_t k = 0; k < 4; ++k) {
    const double se = std::sqrt(table[k] * (1 - table[k]) / n);
    EXPECT_NEAR(counts[k] / n, table[k], 5 * se);
  }
}

TEST(Embeddings, RandomTableIsSeparated) {
  const auto t = EmbeddingTable::random(6, 4, 11);
  EXPECT_GT(EmbeddingTable::min_pairwise_distance(t.matrix()), 0.0);
  EXPECT_EQ(t.vocab(), 6);
  EXPECT_EQ(t.dim(), 4);
}

TEST(Shape, PiecewiseInverseRoundTrip) {
  const PiecewiseLinearShape s({0.3, -1.0, 2.0, 0.0, 0.7});
  EXPECT_DOUBLE_EQ(s.value(0.0), 0.0);
  EXPECT_DOUBLE_EQ(s.value(1.0), 1.0);
  double prev = -1.0;
  for (int i = 0; i <= 200; ++i) {
    const double t = i / 200.0;
    const double u = s.value(t);
    EXPECT_GE(u, prev);
    prev = u;
    EXPECT_NEAR(s.inverse(u), t, 1e-12);
  }
}

TEST(Shape, LogSlopeGradientMatchesFiniteDifference) {
  const std::vector<double> raw = {0.3, -1.0, 2.0, 0.0, 0.7};
  const PiecewiseLinearShape s(raw);
  const double h = 1e-6;
  for (std::size_t k = 0; k < raw.size(); ++k) {
    std::vector<double> g(raw.size());
    s.log_slope_gradient(k, g);
    const double u = (k + 0.5) / raw.size();
    for (std::size_t j = 0; j < raw.size(); ++j) {
      auto lp = raw, lm = raw;
      lp[j] += h;
      lm[j] -= h;
      const PiecewiseLinearShape sp(lp), sm(lm);
      const double fd = (std::log(sp.derivative(sp.inverse(u))) - std::log(sm.derivative(sm.inverse(u)))) / (2 * h);
      EXPECT_NEAR(g[j], fd, 1e-7) << k << "," << j;
    }
  }
}

TEST(Shape, FitTracksTarget) {
  auto target = [](double t) { return t * t * (3 - 2 * t); };
  const auto s = PiecewiseLinearShape::fit(64, target);
  for (int k = 1; k < 64; ++k) EXPECT_NEAR(target(s.knots()[static_cast<std::size_t>(k)]), k / 64.0, 1e-10);
}

TEST(Shape, TabulatedMatchesFunction) {
  auto f = [](double t) { return t * t * (3 - 2 * t); };
  const auto s = TabulatedShape::from_function(f, 512);
  for (double t : {0.05, 0.3, 0.5, 0.8, 0.97}) EXPECT_NEAR(s.value(t), f(t), 1e-6);
}

TEST(Schedule, DerivativeMatchesFiniteDifference) {
  const NoiseSchedule s(-6, 6, TabulatedShape::from_function([](double t) { return t * t * (3 - 2 * t); }));
  for (double t : {0.2, 0.5, 0.7}) {
    const double fd = (s.gamma(t + 1e-5) - s.gamma(t - 1e-5)) / 2e-5;
    EXPECT_NEAR(s.dgamma(t), fd, 1e-3 * std::abs(fd));
  }
  const ScheduleEval e = s.eval(0.4);
  EXPECT_NEAR(e.alpha2 + e.sigma2, 1.0, 1e-15);
  EXPECT_LT(e.dsnr, 0.0);
}

TEST(Schedule, EndpointsAndInverse) {
  const NoiseSchedule s(-5, 7);
  EXPECT_DOUBLE_EQ(s.gamma(0.0), -5.0);
  EXPECT_DOUBLE_EQ(s.gamma(1.0), 7.0);
  EXPECT_NEAR(s.t_of_gamma(1.0), 0.5, 1e-12);
  EXPECT_THROW(s.eval(1.5), std::out_of_range);
}

TEST(Instance, FactoriesValidate) {
  EXPECT_NO_THROW(desk_instance(4).validate());
  EXPECT_NO_THROW(tiny_instance().validate());
  EXPECT_NO_THROW(pair_instance().validate());
  EXPECT_EQ(desk_instance().L(), 3);
  EXPECT_EQ(tiny_instance().dim(), 1);
}
