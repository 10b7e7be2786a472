// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "difflab/scalingfit.hpp"

using namespace difflab;

TEST(IsoFlop, RecoversNoiselessVertex) {
  const double a = 0.05, x0 = std::log(3e7), l0 = 2.5;
  std::vector<IsoFlopPoint> pts;
  for (int i = 0; i < 5; ++i) {
    const double x = x0 - 2 + i;
    pts.push_back({std::exp(x), std::exp(std::log(l0) + a * (x - x0) * (x - x0))});
  }
  const IsoFlopFit f = isoflop_fit(pts);
  ASSERT_TRUE(f.has_minimum);
  EXPECT_NEAR(f.a, a, 1e-10);
  EXPECT_NEAR(std::log(f.n_star), x0, 1e-8);
  EXPECT_NEAR(f.loss_star, l0, 1e-9);
  EXPECT_FALSE(f.extrapolated);
}

TEST(IsoFlop, ConcaveHasNoMinimum) {
  std::vector<IsoFlopPoint> pts;
  for (int i = 0; i < 4; ++i) {
    const double x = 10.0 + i;
    pts.push_back({std::exp(x), std::exp(1.0 - 0.1 * (x - 11.5) * (x - 11.5))});
  }
  EXPECT_FALSE(isoflop_fit(pts).has_minimum);
}

TEST(IsoFlop, RejectsDegenerateInput) {
  EXPECT_THROW(isoflop_fit({{1e6, 3.0}, {1e7, 2.9}}), std::invalid_argument);
  EXPECT_THROW(isoflop_fit({{1e6, 3.0}, {1e6, 3.0}, {1e6, 3.0}}), std::invalid_argument);
  EXPECT_THROW(isoflop_fit({{1e6, 3.0}, {-1.0, 3.0}, {1e7, 3.0}}), std::invalid_argument);
}

TEST(PowerLawFit, ExactLaw) {
  std::vector<double> c, l;
  for (double k : {1e18, 1e19, 1e20, 1e21}) {
    c.push_back(k);
    l.push_back(std::exp(-0.05 * std::log(k) + 2.5));
  }
  const PowerLaw p = powerlaw_fit(c, l);
  EXPECT_NEAR(p.alpha, -0.05, 1e-12);
  EXPECT_NEAR(p.beta, 2.5, 1e-10);
  EXPECT_NEAR(p.predict(1e22), std::exp(-0.05 * std::log(1e22) + 2.5), 1e-10);
}

TEST(PowerLawFit, SharedExponentGap) {
  // The second law needs 14x the compute for the same loss.
  const double alpha = -0.05, b1 = 2.5, b2 = b1 - alpha * std::log(14.0);
  std::vector<double> c1, l1, c2, l2;
  for (double k : {1e18, 1e19, 1e20}) {
    c1.push_back(k);
    l1.push_back(std::exp(alpha * std::log(k) + b1));
    c2.push_back(3 * k);
    l2.push_back(std::exp(alpha * std::log(3 * k) + b2));
  }
  const auto [p1, p2] = powerlaw_fit_shared(c1, l1, c2, l2);
  EXPECT_DOUBLE_EQ(p1.alpha, p2.alpha);
  EXPECT_NEAR(compute_gap(p1, p2), 14.0, 1e-8);
  EXPECT_THROW(powerlaw_fit_shared({1.0}, {1.0}, {}, {}), std::invalid_argument);
}

TEST(Flops, EmbeddingRatio) {
  EXPECT_NEAR(embed_flops_ratio(32000, 1024, 16), 32000.0 * 1024 / (16 * 1024 + 32000 * 16), 1e-12);
  EXPECT_THROW(embed_flops_ratio(0, 1, 1), std::invalid_argument);
}
