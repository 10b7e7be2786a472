// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>

#include "difflab/losses.hpp"
#include "difflab/oracle.hpp"
#include "difflab/trainer.hpp"

using namespace difflab;

namespace {

struct Fixture {
  Instance inst = desk_instance(0, DataKind::factorized);
  TrainConfig cfg;
  ToyDenoiser model{inst.E(), inst.L(), cfg.net, 1};
  NoiseSchedule sched{inst.schedule.gamma0(), inst.schedule.gamma1(),
                      PiecewiseLinearShape(std::vector<double>(static_cast<std::size_t>(cfg.segments), 0.3))};
  BatchDraw batch;
  Fixture() {
    Stream rng(0, "fixture");
    batch = draw_batch(inst.data, model, sched, 20, cfg, rng);
  }
};

double stencil(const std::function<double(double)>& f, double h) {
  return (8.0 * (f(h) - f(-h)) - (f(2 * h) - f(-2 * h))) / (12.0 * h);
}

}  // namespace

TEST(Trainer, NetworkGradientMatchesStencil) {
  Fixture fx;
  const TrainGradient g = batch_gradient(fx.model, fx.sched, fx.batch);
  for (std::size_t j = 0; j < fx.model.size(); j += 97) {
    const double fd = stencil([&](double d) {
      ToyDenoiser m = fx.model;
      m.params()[j] += d;
      return batch_gradient(m, fx.sched, fx.batch).total();
    }, 1e-3);
    EXPECT_NEAR(g.net[j], fd, 1e-5 * std::max(std::abs(fd), 1e-2)) << j;
  }
}

TEST(Trainer, EmbeddingGradientMatchesStencil) {
  // Self-conditioned rows are detached from the embeddings, so the stencil
  // only sees the loss through the table on a batch without them.
  Fixture fx;
  std::fill(fx.batch.sc_mask.begin(), fx.batch.sc_mask.end(), 0);
  const TrainGradient g = batch_gradient(fx.model, fx.sched, fx.batch);
  for (int v = 0; v < fx.inst.V(); v += 2)
    for (int k = 0; k < fx.inst.dim(); ++k) {
      const double fd = stencil([&](double d) {
        ToyDenoiser m = fx.model;
        m.table()(v, k) += d;
        return batch_gradient(m, fx.sched, fx.batch).total();
      }, 1e-4);
      EXPECT_NEAR(g.table(v, k), fd, 1e-5 * std::max(std::abs(fd), 1e-2)) << v << "," << k;
    }
}

TEST(Trainer, SelfConditionedRowsAreDetached) {
  Fixture fx;
  const TrainGradient g = batch_gradient(fx.model, fx.sched, fx.batch);
  BatchDraw other = fx.batch;
  int changed = 0;
  for (std::size_t i = 0; i < other.x.size(); ++i)
    if (other.sc_mask[i]) {
      for (int& v : other.x[i]) v = (v + 1) % fx.inst.V();
      ++changed;
    }
  ASSERT_EQ(changed, self_cond_rows(fx.cfg.batch, fx.cfg.p_sc));
  const TrainGradient h = batch_gradient(fx.model, fx.sched, other);
  // Only the prior value sees these rows; no gradient reaches e or the endpoints.
  EXPECT_LT((g.table - h.table).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(g.gamma0, h.gamma0, 1e-12);
}

TEST(Trainer, SplitFormulas) {
  EXPECT_EQ(adaptive_split(64, 1.0, 1.0), 32);
  EXPECT_EQ(adaptive_split(64, 3.0, 1.0), 48);
  EXPECT_EQ(adaptive_split(64, 1.0, 0.0), 63);
  EXPECT_EQ(adaptive_split(64, 0.0, 1.0), 1);
  EXPECT_THROW(adaptive_split(1, 1.0, 1.0), std::invalid_argument);
  EXPECT_EQ(self_cond_rows(64, 0.25), 16);
  EXPECT_EQ(self_cond_rows(10, 0.25), 3);
}

TEST(Trainer, ShortRunIsDeterministicAndLearns) {
  const Instance inst = desk_instance(0, DataKind::factorized);
  TrainConfig cfg;
  cfg.steps = 1200;
  cfg.warmup = 100;
  cfg.log_every = 1;
  const TrainResult a = train_loop(inst, cfg);
  const TrainResult b = train_loop(inst, cfg);
  EXPECT_EQ(a.model.params(), b.model.params());
  ASSERT_EQ(a.log.size(), 1200u);
  // Position marginals are all the network has to add to the output prior;
  // at moderate noise that shows up as lower log loss than at initialization.
  const ToyDenoiser init(inst.E(), inst.L(), cfg.net, cfg.seed);
  McPlan p;
  p.n = 20000;
  const LossEstimate before = per_timestep_ce(init, inst.data, inst.schedule, 0.6, p);
  const LossEstimate after = per_timestep_ce(a.ema_model, inst.data, inst.schedule, 0.6, p);
  const LossEstimate best = per_timestep_ce(BayesDenoiser(inst), inst.data, inst.schedule, 0.6, p);
  EXPECT_LT(after.value, before.value - 0.1);
  EXPECT_LT(after.value, 1.03 * best.value);
  for (const auto& r : a.log) {
    EXPECT_EQ(r.recon_rows, adaptive_split(cfg.batch, r.sigma_r, r.sigma_d));
    EXPECT_EQ(r.sc_rows, self_cond_rows(cfg.batch, cfg.p_sc));
  }
}
