// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "difflab/oracle.hpp"
#include "difflab/samplers.hpp"

using namespace difflab;

TEST(Sampler, GridRunsFromOneToTmin) {
  SamplerConfig cfg;
  cfg.steps = 8;
  cfg.t_min = 0.01;
  const auto g = sampler_grid(cfg);
  ASSERT_EQ(g.size(), 9u);
  EXPECT_DOUBLE_EQ(g.front(), 1.0);
  EXPECT_DOUBLE_EQ(g.back(), 0.01);
  cfg.steps = 0;
  EXPECT_THROW(sampler_grid(cfg), std::invalid_argument);
}

TEST(Sampler, NamesRoundTrip) {
  for (auto k : {SamplerKind::ancestral, SamplerKind::ddim, SamplerKind::dpmpp2m, SamplerKind::heun})
    EXPECT_EQ(sampler_kind(to_string(k)), k);
  EXPECT_THROW(sampler_kind("euler"), std::invalid_argument);
}

TEST(Sampler, EvaluationCounts) {
  const Instance inst = desk_instance();
  const BayesDenoiser o(inst);
  McPlan p;
  p.n = 4;
  SamplerConfig cfg;
  cfg.steps = 10;
  for (auto k : {SamplerKind::ancestral, SamplerKind::ddim, SamplerKind::dpmpp2m}) {
    cfg.kind = k;
    EXPECT_EQ(run_sampler(cfg, o, inst.schedule, p).nfe, 11);
  }
  cfg.kind = SamplerKind::heun;
  EXPECT_EQ(run_sampler(cfg, o, inst.schedule, p).nfe, 20);
}

TEST(Sampler, DeterministicSamplersIgnoreTheStream) {
  const Instance inst = desk_instance();
  const BayesDenoiser o(inst);
  SamplerConfig cfg;
  cfg.kind = SamplerKind::ddim;
  cfg.steps = 32;
  Stream a(0, "init"), b(0, "init"), r1(1, "x"), r2(2, "y");
  const Mat z = standard_normal(inst.L(), inst.dim(), a);
  const Chain c1 = run_chain(cfg, o, inst.schedule, z, r1);
  const Chain c2 = run_chain(cfg, o, inst.schedule, standard_normal(inst.L(), inst.dim(), b), r2);
  EXPECT_EQ(c1.z, c2.z);
}

TEST(Sampler, AncestralMatchesDataMarginals) {
  const Instance inst = desk_instance();
  const BayesDenoiser o(inst);
  McPlan p;
  p.n = 20000;
  SamplerConfig cfg;
  cfg.steps = 128;
  EXPECT_LT(marginal_tv(run_sampler(cfg, o, inst.schedule, p).sequences, inst.data), 0.02);
}

TEST(Sampler, DdimUpdateIsExactForConstantPrediction) {
  // With a fixed prediction the deterministic update keeps eps fixed.
  Mat e(1, 2), eps(1, 2);
  e << 0.5, -1.0;
  eps << 0.3, 0.8;
  const double g_hi = 1.0, g_lo = -1.0;
  const Mat z_hi = noise_at_gamma(e, eps, g_hi);
  EXPECT_LT((ddim_update(z_hi, g_hi, g_lo, e) - noise_at_gamma(e, eps, g_lo)).cwiseAbs().maxCoeff(), 1e-12);
}
