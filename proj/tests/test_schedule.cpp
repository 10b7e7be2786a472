// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "difflab/losses.hpp"
#include "difflab/schedule.hpp"

using namespace difflab;

TEST(Optimum, ConstantWeightGivesLinearShape) {
  const auto g = uniform_grid(-4, 4, 129);
  const ScheduleOptimum opt = optimum_from_weights(g, std::vector<double>(g.size(), 0.7));
  for (double t : {0.1, 0.35, 0.5, 0.9}) EXPECT_NEAR(opt.gamma_star(t), -4 + 8 * t, 1e-9);
  // The loss carries a factor 1/2, so the flat level is half the total weight.
  EXPECT_NEAR(opt.kappa, 0.5 * 0.7 * 8, 1e-9);
}

TEST(Optimum, LinearWeightInvertsQuadraticCumulative) {
  // w = s + 1 with s = g - g0 has cumulative s + s^2/2.
  const auto g = uniform_grid(0, 4, 257);
  std::vector<double> w;
  for (double x : g) w.push_back(x + 1);
  const ScheduleOptimum opt = optimum_from_weights(g, w);
  const double total = 4 + 8;
  for (double t : {0.05, 0.3, 0.6, 0.95}) {
    const double s = -1 + std::sqrt(1 + 2 * t * total);
    EXPECT_NEAR(opt.gamma_star(t), s, 1e-6) << t;
  }
}

TEST(Optimum, FlattensTheTinyLossCurve) {
  const Instance inst = tiny_instance();
  const BayesDenoiser o(inst);
  McPlan p;
  p.n = 20000;
  const ScheduleOptimum opt = compute_optimum(o, inst.data, -6, 6, 128, p.with_tag("opt"), ErrorEstimator::posterior_variance);
  const LossCurve flat = diffusion_loss_curve(o, inst.data, opt.schedule(), midpoint_grid(9), p.with_tag("curve"),
                                              ErrorEstimator::posterior_variance);
  const LossCurve lin = diffusion_loss_curve(o, inst.data, inst.schedule, midpoint_grid(9), p.with_tag("curve"),
                                             ErrorEstimator::posterior_variance);
  EXPECT_LT(flat.max_over_min(), 1.1);
  EXPECT_GT(lin.max_over_min(), 2.0);
  // The mean of a flat curve is the cumulative weight over the unit interval.
  EXPECT_NEAR(flat.mean_over_t().value, opt.kappa, 0.03 * opt.kappa);
}

TEST(Optimum, RejectsSmallGrid) {
  const Instance inst = tiny_instance();
  const BayesDenoiser o(inst);
  EXPECT_THROW(compute_optimum(o, inst.data, -6, 6, 16, McPlan{}), std::invalid_argument);
}

TEST(Curve, MeanLossIsScheduleInvariant) {
  // The continuous-time diffusion loss depends only on the endpoints.
  const Instance inst = desk_instance();
  const BayesDenoiser o(inst);
  McPlan p;
  p.n = 40000;
  const NoiseSchedule bent(-6, 6, TabulatedShape::from_function([](double t) { return t * t * (3 - 2 * t); }));
  const Estimate a = mean_diffusion_loss(o, inst.data, inst.schedule, p.with_tag("a"), ErrorEstimator::posterior_variance);
  const Estimate b = mean_diffusion_loss(o, inst.data, bent, p.with_tag("b"), ErrorEstimator::posterior_variance);
  EXPECT_NEAR(a.value, b.value, 4 * joint_se(a.se, b.se));
}

TEST(Curve, ShapeDistance) {
  const NoiseSchedule a(-6, 6), b(-6, 6, PiecewiseLinearShape::fit(8, [](double t) { return t * t; }));
  const auto ts = closed_grid(0, 1, 33);
  EXPECT_DOUBLE_EQ(shape_distance(a, a, ts), 0.0);
  EXPECT_NEAR(shape_distance(a, b, ts), 0.25, 0.02);
}

TEST(Learn, ReducesVarianceObjective) {
  const Instance inst = tiny_instance();
  const BayesDenoiser o(inst);
  ScheduleLearnConfig cfg;
  cfg.steps = 300;
  const NoiseSchedule init(-6, 6, PiecewiseLinearShape(std::vector<double>(8, softplus_inverse(1.0))));
  const ScheduleLearnResult r = learn_schedule(o, inst.data, init, cfg);
  ASSERT_EQ(r.objective.size(), 300u);
  double head = 0, tail = 0;
  for (int i = 0; i < 30; ++i) {
    head += r.objective[static_cast<std::size_t>(i)];
    tail += r.objective[r.objective.size() - 1 - static_cast<std::size_t>(i)];
  }
  EXPECT_LT(tail, 0.8 * head);
}
