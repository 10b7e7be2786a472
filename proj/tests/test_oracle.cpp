// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "difflab/noising.hpp"
#include "difflab/oracle.hpp"

using namespace difflab;

namespace {

Mat noisy(const Instance& inst, double g, std::uint64_t j, Tokens* x_out = nullptr) {
  Stream rng(5, "oracle-test", j);
  const Tokens x = inst.data.sample(rng);
  if (x_out) *x_out = x;
  const Mat e = embed(x, inst.E());
  return noise_at_gamma(e, standard_normal(e.rows(), e.cols(), rng), g);
}

}  // namespace

TEST(Oracle, RowsAreDistributions) {
  const Instance inst = desk_instance();
  const BayesDenoiser o(inst);
  for (double g : {-5.0, 0.0, 5.0}) {
    const DenoiserOutput out = denoise(o, noisy(inst, g, 0), g);
    for (int l = 0; l < inst.L(); ++l) {
      EXPECT_NEAR(out.rows.row(l).sum(), 1.0, 1e-12);
      EXPECT_GE(out.rows.row(l).minCoeff(), 0.0);
    }
  }
}

TEST(Oracle, FactorizedMatchesExpandedJoint) {
  const Instance f = desk_instance(0, DataKind::factorized);
  const BayesDenoiser fo(f);
  const BayesDenoiser jo(f.E(), DataDistribution::joint(f.V(), f.L(), f.data.joint_table()));
  for (std::uint64_t j = 0; j < 10; ++j) {
    const Mat z = noisy(f, 0.5, j);
    EXPECT_LT((denoise(fo, z, 0.5).rows - denoise(jo, z, 0.5).rows).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Oracle, JointPosteriorMarginalsMatchRows) {
  const Instance inst = desk_instance();
  const BayesDenoiser o(inst);
  const Mat z = noisy(inst, -1.0, 2);
  const auto post = o.joint_posterior(z, -1.0);
  const DenoiserOutput out = denoise(o, z, -1.0);
  Mat marg = Mat::Zero(inst.L(), inst.V());
  for (std::size_t k = 0; k < post.size(); ++k) {
    const Tokens x = inst.data.decode(k);
    for (int l = 0; l < inst.L(); ++l) marg(l, x[static_cast<std::size_t>(l)]) += post[k];
  }
  EXPECT_LT((marg - out.rows).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Oracle, HighSnrRecoversTokens) {
  const Instance inst = desk_instance();
  const BayesDenoiser o(inst);
  Tokens x;
  const Mat z = noisy(inst, -14.0, 3, &x);
  EXPECT_EQ(argmax_rows(denoise(o, z, -14.0).rows), x);
}

TEST(Oracle, PosteriorSpreadHasSquaredErrorMean) {
  // E[spread] = E[squared error] at every noise level; the spread has lower variance.
  const Instance inst = desk_instance();
  const BayesDenoiser o(inst);
  McPlan p;
  p.n = 40000;
  for (double g : {-2.0, 1.0}) {
    const Estimate se = mse_at_gamma(o, inst.data, g, p.with_tag("se"), ErrorEstimator::squared_error);
    const Estimate pv = mse_at_gamma(o, inst.data, g, p.with_tag("pv"), ErrorEstimator::posterior_variance);
    EXPECT_NEAR(se.value, pv.value, 4 * joint_se(se.se, pv.se)) << g;
    EXPECT_LT(pv.se, se.se);
  }
}

TEST(Oracle, MmseDecreasesWithSnr) {
  const Instance inst = desk_instance();
  McPlan p;
  p.n = 20000;
  double prev = 1e300;
  for (double g : {4.0, 2.0, 0.0, -2.0}) {
    const double m = mmse_at_gamma(inst, g, p).value;
    EXPECT_LT(m, prev);
    prev = m;
  }
  const Estimate flat = mmse_at_gamma(inst, 30.0, p);
  EXPECT_NEAR(flat.value, prior_embedding_variance(inst), 4 * flat.se);
}

TEST(Oracle, EstimatorNeedsOracle) {
  const Instance inst = desk_instance();
  const UniformDenoiser u(inst.E(), inst.L());
  EXPECT_THROW(check_estimator(u, ErrorEstimator::posterior_variance), std::invalid_argument);
  EXPECT_NO_THROW(check_estimator(u, ErrorEstimator::squared_error));
}
