// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "difflab/infotheory.hpp"

using namespace difflab;

TEST(Quadrature, MatchesMonteCarloOnTinyChannel) {
  const Instance inst = tiny_instance();
  const BayesDenoiser o(inst);
  McPlan p;
  p.n = 40000;
  for (double g : {-2.0, 0.0, 2.0}) {
    const ChannelQuadrature q = channel_quadrature_1d(inst, g);
    const Estimate info = mutual_info_at_gamma(o, g, p.with_tag("mi"));
    const Estimate mmse = mse_at_gamma(o, inst.data, g, p.with_tag("mmse"), ErrorEstimator::posterior_variance);
    EXPECT_NEAR(info.value, q.info, 4 * info.se + 1e-9) << g;
    EXPECT_NEAR(mmse.value, q.mmse, 4 * mmse.se + 1e-9) << g;
    EXPECT_NEAR(q.entropy + q.info, data_entropy(inst.data), 1e-9);
  }
}

TEST(Quadrature, RejectsWideInstances) {
  EXPECT_THROW(channel_quadrature_1d(desk_instance(), 0.0), std::invalid_argument);
  EXPECT_THROW(channel_quadrature_1d(tiny_instance(), 0.0, 100), std::invalid_argument);
}

TEST(Quadrature, ImmseByFiniteDifference) {
  // dI/dsnr = mmse / 2, checked on the deterministic reference alone.
  const Instance inst = tiny_instance();
  for (double snr : {0.5, 1.0, 3.0}) {
    const double d = 1e-3 * snr;
    const double di = (channel_quadrature_1d(inst, -std::log(snr + d)).info -
                       channel_quadrature_1d(inst, -std::log(snr - d)).info) / (2 * d);
    EXPECT_NEAR(di, 0.5 * channel_quadrature_1d(inst, -std::log(snr)).mmse, 1e-6) << snr;
  }
}

TEST(Info, ImmseResidualWithinNoise) {
  const Instance inst = desk_instance();
  const BayesDenoiser o(inst);
  McPlan p;
  p.n = 20000;
  const ImmseCheck c = immse_residual_at_snr(o, 1.0, 0.02, p);
  EXPECT_LT(c.residual, 4 * c.se + 0.03 * c.half_mmse.value);
  EXPECT_THROW(immse_residual_at_snr(o, 1.0, 2.0, p), std::invalid_argument);
}

TEST(Info, EntropyLimits) {
  const Instance inst = desk_instance();
  const BayesDenoiser o(inst);
  McPlan p;
  p.n = 4000;
  EXPECT_NEAR(mutual_info_at_gamma(o, 20.0, p).value, 0.0, 1e-4);
  EXPECT_NEAR(mutual_info_at_gamma(o, -20.0, p).value, data_entropy(inst.data), 1e-4);
}

TEST(Info, FactorizedPosteriorHasNoTotalCorrelation) {
  const Instance inst = desk_instance(0, DataKind::factorized);
  McPlan p;
  p.n = 2000;
  const Estimate tc = conditional_total_correlation(inst, inst.schedule, 0.5, p);
  EXPECT_NEAR(tc.value, 0.0, 1e-10);
  const Estimate joint_tc = conditional_total_correlation(desk_instance(), inst.schedule, 0.5, p);
  EXPECT_GT(joint_tc.value, 0.0);
}

TEST(Info, LinearR2) {
  const std::vector<double> x = {0, 1, 2, 3}, y = {1, 3, 5, 7}, z = {1, 3, 2, 7};
  EXPECT_NEAR(linear_r2(x, y), 1.0, 1e-12);
  EXPECT_LT(linear_r2(x, z), 0.9);
}
