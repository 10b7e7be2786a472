// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "difflab/mc.hpp"

using namespace difflab;

TEST(Stream, SameKeySameDraws) {
  Stream a(7, "tag", 3), b(7, "tag", 3), c(7, "tag", 4), d(7, "other", 3);
  const double x = a.uniform();
  EXPECT_EQ(x, b.uniform());
  EXPECT_NE(x, c.uniform());
  EXPECT_NE(x, d.uniform());
}

TEST(RunningStats, MergeMatchesSequential) {
  RunningStats all, left, right;
  Stream rng(1, "stats");
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.normal() * 3 + 1;
    all.add(v);
    (i < 377 ? left : right).add(v);
  }
  left.merge(right);
  EXPECT_EQ(left.count(), all.count());
  EXPECT_NEAR(left.mean(), all.mean(), 1e-12);
  EXPECT_NEAR(left.variance(), all.variance(), 1e-10);
}

TEST(McMean, IndependentOfWorkerCount) {
  McPlan p;
  p.n = 10000;
  p.shard_size = 512;
  p.tag = "workers";
  auto f = [](std::size_t, Stream& rng) { return rng.normal() * rng.uniform(); };
  const Estimate one = mc_mean(p, f);
  p.workers = 4;
  const Estimate four = mc_mean(p, f);
  EXPECT_EQ(one.value, four.value);
  EXPECT_EQ(one.se, four.se);
}

TEST(McMean, CoversKnownMean) {
  McPlan p;
  p.n = 20000;
  const Estimate e = mc_mean(p, [](std::size_t, Stream& rng) { return rng.uniform(); });
  EXPECT_NEAR(e.value, 0.5, 4 * e.se);
  EXPECT_NEAR(e.se, std::sqrt(1.0 / 12.0 / 20000), 1e-4);
}
