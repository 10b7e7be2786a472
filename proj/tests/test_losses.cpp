// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "difflab/losses.hpp"

using namespace difflab;

TEST(Prior, ClosedFormKl) {
  // One scalar: KL(N(a e, s^2) || N(0,1)) = (s^2 - 1 - log s^2 + a^2 e^2) / 2.
  const double g = 3.0, e = 1.5;
  const double s2 = sigma2_of(g), a2 = alpha2_of(g);
  EXPECT_NEAR(prior_loss(1, 1, e * e, g), 0.5 * (s2 - 1 - std::log(s2) + a2 * e * e), 1e-15);
  EXPECT_GT(prior_loss(1, 1, e * e, 3.0), prior_loss(1, 1, e * e, 8.0));
}

TEST(Nelbo, OracleBoundsTheEntropy) {
  const Instance inst = desk_instance();
  const BayesDenoiser o(inst);
  McPlan p;
  p.n = 20000;
  const NelboEstimate ne = nelbo_estimate(o, inst.data, inst.schedule, p);
  const double h = data_entropy(inst.data);
  EXPECT_GT(ne.value, h - 3 * ne.se);
  EXPECT_LT(ne.value, h + 0.05);
  EXPECT_NEAR(ne.value, ne.parts.prior.value + ne.parts.recon.value + ne.parts.diffusion.value, 1e-9);
  EXPECT_EQ(ne.parts.recon.clamped, 0u);
}

TEST(Nelbo, FixedSequenceVersusAverage) {
  const Instance inst = tiny_instance();
  const BayesDenoiser o(inst);
  McPlan p;
  p.n = 20000;
  const NelboEstimate a = nelbo_estimate(Tokens{0}, o, inst.schedule, p.with_tag("a"));
  const NelboEstimate b = nelbo_estimate(Tokens{1}, o, inst.schedule, p.with_tag("b"));
  const NelboEstimate all = nelbo_estimate(o, inst.data, inst.schedule, p.with_tag("all"));
  const double mix = 0.35 * a.value + 0.65 * b.value;
  EXPECT_NEAR(all.value, mix, 4 * joint_se(all.se, a.se, b.se));
  EXPECT_GT(a.value, -std::log(0.35) - 4 * a.se);
}

TEST(Loss, ReconstructionVanishesAtHighSnr) {
  const Instance inst = desk_instance(0, DataKind::joint, -12.0, 6.0);
  const BayesDenoiser o(inst);
  McPlan p;
  p.n = 2000;
  EXPECT_LT(reconstruction_loss(o, inst.data, inst.schedule, p).value, 1e-6);
}

TEST(Loss, CeIsPositiveAndGrowsWithNoise) {
  const Instance inst = desk_instance();
  const BayesDenoiser o(inst);
  McPlan p;
  p.n = 5000;
  const double lo = per_timestep_ce(o, inst.data, inst.schedule, 0.2, p).value;
  const double hi = per_timestep_ce(o, inst.data, inst.schedule, 0.8, p).value;
  EXPECT_GT(lo, 0.0);
  EXPECT_GT(hi, lo);
}

TEST(Loss, RejectsTimeOutsideUnitInterval) {
  const Instance inst = tiny_instance();
  const BayesDenoiser o(inst);
  Stream rng(0, "t");
  EXPECT_THROW(diffusion_loss_sample(Tokens{0}, o, inst.schedule, 1.2, rng), std::out_of_range);
}

TEST(Loss, AuxWeightMustBeNonnegative) {
  const Instance inst = tiny_instance();
  const BayesDenoiser o(inst);
  Stream rng(0, "aux");
  EXPECT_THROW(aux_ce_loss(Tokens{0}, o, inst.schedule, inst.schedule, -1.0, rng), std::invalid_argument);
  const AuxLoss a = aux_ce_loss(Tokens{0}, o, inst.schedule, inst.schedule, 0.5, rng);
  EXPECT_NEAR(a.total(), a.nelbo + 0.5 * a.ce, 1e-15);
}
