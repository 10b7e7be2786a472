// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "difflab/odelik.hpp"

using namespace difflab;

namespace {

// v = A vec(z), trace known.
Field linear_field(const Mat& A) {
  return [A](const Mat& z, Mat& v) {
    Eigen::Map<const Eigen::VectorXd> zz(z.data(), z.size());
    const Eigen::VectorXd out = A * zz;
    v.resize(z.rows(), z.cols());
    Eigen::Map<Eigen::VectorXd>(v.data(), v.size()) = out;
  };
}

}  // namespace

TEST(Divergence, ExactOnLinearField) {
  Stream rng(0, "lin");
  const Mat A = standard_normal(6, 6, rng);
  const Mat z = standard_normal(2, 3, rng);
  EXPECT_NEAR(divergence_exact(linear_field(A), z), A.trace(), 1e-8);
}

TEST(Divergence, HutchinsonIsUnbiased) {
  Stream rng(1, "lin");
  const Mat A = standard_normal(6, 6, rng);
  const Mat z = standard_normal(2, 3, rng);
  for (auto kind : {ProbeKind::rademacher, ProbeKind::gaussian}) {
    const Estimate e = divergence_hutchinson(linear_field(A), z, kind, 20000, 1e-3, rng);
    EXPECT_NEAR(e.value, A.trace(), 4 * e.se);
  }
  EXPECT_THROW(divergence_hutchinson(linear_field(A), z, ProbeKind::gaussian, 0, 1e-3, rng), std::invalid_argument);
}

TEST(Divergence, RademacherIsExactForDiagonal) {
  Mat A = Mat::Zero(4, 4);
  A.diagonal() << 1, -2, 3, 0.5;
  Stream rng(2, "diag");
  const Mat z = standard_normal(2, 2, rng);
  const Estimate e = divergence_hutchinson(linear_field(A), z, ProbeKind::rademacher, 3, 1e-3, rng);
  EXPECT_NEAR(e.value, 2.5, 1e-8);
}

TEST(Iwae, LogMeanExp) {
  const std::vector<double> v = {1000.0, 1000.0};
  EXPECT_NEAR(log_mean_exp(v), 1000.0, 1e-12);
  const std::vector<double> w = {0.0, std::log(3.0)};
  EXPECT_NEAR(log_mean_exp(w), std::log(2.0), 1e-12);
}

TEST(Iwae, SingleSampleEqualsLogWeight) {
  const Instance inst = tiny_instance();
  const BayesDenoiser o(inst);
  SolverConfig s;
  s.steps = 32;
  DivergenceConfig d;
  const IwaeResult r = iwae_estimate(Tokens{0}, o, inst.schedule, 1, s, d, 4, "iwae");
  ASSERT_EQ(r.log_weights.size(), 1u);
  EXPECT_DOUBLE_EQ(r.value, r.log_weights[0]);
  EXPECT_THROW(iwae_estimate(Tokens{0}, o, inst.schedule, 0, s, d, 4, "iwae"), std::invalid_argument);
}

TEST(Iwae, BoundTightensWithK) {
  const Instance inst = tiny_instance();
  const BayesDenoiser o(inst);
  SolverConfig s;
  s.steps = 256;
  DivergenceConfig d;
  d.exact = true;
  const double truth = quadrature_log_likelihood_1d(o, inst.schedule, 0, 2001, 512);
  RunningStats k1, k16;
  for (std::uint64_t r = 0; r < 40; ++r) {
    k1.add(iwae_estimate(Tokens{0}, o, inst.schedule, 1, s, d, 0, "k1", r).value);
    k16.add(iwae_estimate(Tokens{0}, o, inst.schedule, 16, s, d, 0, "k16", r).value);
  }
  EXPECT_LT(k1.mean(), truth + 4 * k1.se() + 0.01);
  EXPECT_GT(k16.mean(), k1.mean() - 2 * joint_se(k1.se(), k16.se()));
  EXPECT_LT(std::abs(k16.mean() - truth), 0.05);
}

TEST(Flow, InvertsBackward) {
  const Instance inst = tiny_instance();
  const BayesDenoiser o(inst);
  const double z1 = flow_1d(o, 0.7, -6, 6, 2048);
  EXPECT_NEAR(flow_1d(o, z1, 6, -6, 2048), 0.7, 1e-6);
}

TEST(SelfCond, ZeroCouplingMatchesOracle) {
  const Instance inst = desk_instance();
  const ToySelfCondDenoiser toy(inst, 0.0);
  const BayesDenoiser o(inst);
  Stream rng(3, "sc");
  const Mat z = standard_normal(inst.L(), inst.dim(), rng);
  EXPECT_NEAR(chain_rule_term(z, 0.5, toy), 0.0, 1e-8);
  const Mat v1 = velocity_gamma(z, 0.5, toy), v2 = velocity_gamma(z, 0.5, o);
  EXPECT_LT((v1 - v2).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(ToySelfCondDenoiser(inst, -1.0), std::invalid_argument);
}
