// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <span>
#include <stdexcept>

#include "difflab/core.hpp"
#include "difflab/denoiser.hpp"
#include "difflab/mc.hpp"
#include "difflab/noising.hpp"
#include "difflab/oracle.hpp"

namespace difflab {

/// Estimate of a log loss; `clamped` marks draws whose true-token
/// probability fell below 1e-300.
struct LossEstimate {
  double value = 0.0;
  double se = 0.0;
  std::size_t n = 0;
  std::size_t clamped = 0;
  Estimate estimate() const { return {value, se, n}; }
};

struct NelboParts {
  Estimate prior;
  LossEstimate recon;
  Estimate diffusion;
};

struct NelboEstimate {
  double value = 0.0;  // nats per sequence
  double se = 0.0;
  double per_token = 0.0;
  std::size_t n = 0;
  NelboParts parts;
};

inline double perplexity(double nats, double tokens) { return std::exp(nats / tokens); }

/// KL(N(alpha1 e, sigma1^2 I) || N(0, I)) for an L x d_e latent with |e|_F^2 = e_sq.
inline double prior_loss(int length, int dim, double e_sq, double gamma1) {
  const double s2 = sigma2_of(gamma1);
  return 0.5 * (length * dim * (s2 - 1.0 - log_sigma2_of(gamma1)) + alpha2_of(gamma1) * e_sq);
}

inline double prior_loss(std::span<const int> x, const Mat& table, const NoiseSchedule& sched) {
  const Mat e = embed(x, table);
  return prior_loss(static_cast<int>(e.rows()), static_cast<int>(e.cols()), e.squaredNorm(), sched.gamma1());
}

/// One draw of sum_l -log row_l[x_l] at z_0 ~ q(z_0 | x).
inline double reconstruction_sample(std::span<const int> x, const Denoiser& model, const NoiseSchedule& sched,
                                    Stream& rng, bool* clamped = nullptr) {
  const double g0 = sched.gamma0();
  const Mat e = embed(x, model.embeddings());
  const Mat eps = standard_normal(e.rows(), e.cols(), rng);
  const Mat z = noise_at_gamma(e, eps, g0);
  DenoiserOutput out;
  denoise(model, z, g0, out);
  return sequence_log_loss(out.rows, x, clamped);
}

/// One draw of -SNR'(t)/2 * |e_hat(z_t) - e|^2, or of the posterior spread
/// in place of the squared error.
inline double diffusion_loss_sample(std::span<const int> x, const Denoiser& model, const NoiseSchedule& sched,
                                    double t, Stream& rng, ErrorEstimator est = ErrorEstimator::squared_error) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::out_of_range("diffusion loss time must lie in [0,1]");
  const ScheduleEval s = sched.eval(t);
  const Mat e = embed(x, model.embeddings());
  const Mat eps = standard_normal(e.rows(), e.cols(), rng);
  const Mat z = s.alpha * e + s.sigma * eps;
  DenoiserOutput out;
  denoise(model, z, s.gamma, out);
  const double err = est == ErrorEstimator::posterior_variance ? posterior_spread(out.rows, model.embeddings())
                                                               : embedding_error(out.rows, model.embeddings(), x);
  return -0.5 * s.dsnr * err;
}

/// One draw of the per-position log loss at time t.
inline double ce_sample(std::span<const int> x, const Denoiser& model, const NoiseSchedule& sched, double t,
                        Stream& rng, bool* clamped = nullptr) {
  const double g = sched.gamma(t);
  const Mat e = embed(x, model.embeddings());
  const Mat eps = standard_normal(e.rows(), e.cols(), rng);
  const Mat z = noise_at_gamma(e, eps, g);
  DenoiserOutput out;
  denoise(model, z, g, out);
  return sequence_log_loss(out.rows, x, clamped);
}

namespace detail {

struct LogLossAcc {
  RunningStats stats;
  std::size_t clamped = 0;
  void merge(const LogLossAcc& o) {
    stats.merge(o.stats);
    clamped += o.clamped;
  }
  LossEstimate finish() const {
    const Estimate e = stats.estimate();
    return {e.value, e.se, e.n, clamped};
  }
};

}  // namespace detail

/// Reconstruction loss averaged over x ~ q_data and z_0.
inline LossEstimate reconstruction_loss(const Denoiser& model, const DataDistribution& data, const NoiseSchedule& sched,
                                        const McPlan& plan) {
  auto acc = run_sharded(plan, [] { return detail::LogLossAcc{}; },
                         [&](detail::LogLossAcc& a, std::size_t, Stream& rng) {
                           const Tokens x = data.sample(rng);
                           bool clamped = false;
                           a.stats.add(reconstruction_sample(x, model, sched, rng, &clamped));
                           a.clamped += clamped ? 1 : 0;
                         });
  return acc.finish();
}

/// Reconstruction loss of one fixed sequence.
inline LossEstimate reconstruction_loss(std::span<const int> x, const Denoiser& model, const NoiseSchedule& sched,
                                        const McPlan& plan) {
  auto acc = run_sharded(plan, [] { return detail::LogLossAcc{}; },
                         [&](detail::LogLossAcc& a, std::size_t, Stream& rng) {
                           bool clamped = false;
                           a.stats.add(reconstruction_sample(x, model, sched, rng, &clamped));
                           a.clamped += clamped ? 1 : 0;
                         });
  return acc.finish();
}

/// l(t) = -SNR'(t)/2 * E|e_hat(z_t) - e|^2 over x ~ q_data.
inline Estimate per_timestep_diffusion_loss(const Denoiser& model, const DataDistribution& data,
                                            const NoiseSchedule& sched, double t, const McPlan& plan,
                                            ErrorEstimator est = ErrorEstimator::squared_error) {
  check_estimator(model, est);
  return mc_mean(plan, [&](std::size_t, Stream& rng) {
    const Tokens x = data.sample(rng);
    return diffusion_loss_sample(x, model, sched, t, rng, est);
  });
}

/// Expected per-position log loss at time t over x ~ q_data.
inline LossEstimate per_timestep_ce(const Denoiser& model, const DataDistribution& data, const NoiseSchedule& sched,
                                    double t, const McPlan& plan) {
  auto acc = run_sharded(plan, [] { return detail::LogLossAcc{}; },
                         [&](detail::LogLossAcc& a, std::size_t, Stream& rng) {
                           const Tokens x = data.sample(rng);
                           bool clamped = false;
                           a.stats.add(ce_sample(x, model, sched, t, rng, &clamped));
                           a.clamped += clamped ? 1 : 0;
                         });
  return acc.finish();
}

namespace detail {

struct NelboAcc {
  RunningStats total, prior, recon, diffusion;
  std::size_t clamped = 0;
  void merge(const NelboAcc& o) {
    total.merge(o.total);
    prior.merge(o.prior);
    recon.merge(o.recon);
    diffusion.merge(o.diffusion);
    clamped += o.clamped;
  }
};

/// Shared uniform offset of the stratified time grid t_j = (j + u) / n.
inline double stratum_offset(const McPlan& plan) { return Stream(plan.seed, plan.tag + "/offset").uniform(); }

inline double stratified_time(std::size_t j, std::size_t n, double u) {
  const double t = (static_cast<double>(j) + u) / static_cast<double>(n);
  return std::clamp(t, 1e-12, 1.0 - 1e-12);
}

template <class DrawX>
NelboEstimate nelbo_impl(const Denoiser& model, const NoiseSchedule& sched, const McPlan& plan, DrawX draw_x) {
  if (plan.n < 2) throw std::invalid_argument("Monte-Carlo sample count must be at least 2");
  const double u = stratum_offset(plan);
  auto acc = run_sharded(plan, [] { return NelboAcc{}; }, [&](NelboAcc& a, std::size_t j, Stream& rng) {
    const Tokens x = draw_x(rng);
    const double prior = prior_loss(x, model.embeddings(), sched);
    bool clamped = false;
    const double recon = reconstruction_sample(x, model, sched, rng, &clamped);
    const double diff = diffusion_loss_sample(x, model, sched, stratified_time(j, plan.n, u), rng);
    a.prior.add(prior);
    a.recon.add(recon);
    a.diffusion.add(diff);
    a.total.add(prior + recon + diff);
    a.clamped += clamped ? 1 : 0;
  });
  NelboEstimate r;
  r.value = acc.total.mean();
  r.se = acc.total.se();
  r.n = acc.total.count();
  r.per_token = r.value / model.length();
  r.parts.prior = acc.prior.estimate();
  const Estimate rec = acc.recon.estimate();
  r.parts.recon = {rec.value, rec.se, rec.n, acc.clamped};
  r.parts.diffusion = acc.diffusion.estimate();
  return r;
}

}  // namespace detail

/// E_t[l(t)] with stratified times t_j = (j + u) / n.
inline Estimate mean_diffusion_loss(const Denoiser& model, const DataDistribution& data, const NoiseSchedule& sched,
                                    const McPlan& plan, ErrorEstimator est = ErrorEstimator::squared_error) {
  check_estimator(model, est);
  const double u = detail::stratum_offset(plan);
  return mc_mean(plan, [&](std::size_t j, Stream& rng) {
    const Tokens x = data.sample(rng);
    return diffusion_loss_sample(x, model, sched, detail::stratified_time(j, plan.n, u), rng, est);
  });
}

/// NELBO per sequence averaged over x ~ q_data, with stratified diffusion times.
inline NelboEstimate nelbo_estimate(const Denoiser& model, const DataDistribution& data, const NoiseSchedule& sched,
                                    const McPlan& plan) {
  return detail::nelbo_impl(model, sched, plan, [&](Stream& rng) { return data.sample(rng); });
}

/// NELBO of one fixed sequence.
inline NelboEstimate nelbo_estimate(std::span<const int> x, const Denoiser& model, const NoiseSchedule& sched,
                                    const McPlan& plan) {
  const Tokens fixed(x.begin(), x.end());
  return detail::nelbo_impl(model, sched, plan, [&](Stream&) { return fixed; });
}

/// Single-draw NELBO plus weighted auxiliary log loss.
///
/// The log-loss term is evaluated under `ce_schedule`, a detached snapshot of
/// the schedule, so schedule parameters receive no gradient from it.
struct AuxLoss {
  double nelbo = 0.0;
  double ce = 0.0;
  double weight = 0.0;
  double total() const { return nelbo + weight * ce; }
};

inline AuxLoss aux_ce_loss(std::span<const int> x, const Denoiser& model, const NoiseSchedule& sched,
                           const NoiseSchedule& ce_schedule, double weight, Stream& rng) {
  if (!(weight >= 0.0)) throw std::invalid_argument("auxiliary loss weight must be nonnegative");
  AuxLoss r;
  r.weight = weight;
  const double t = std::clamp(rng.uniform(), 1e-12, 1.0 - 1e-12);
  r.nelbo = prior_loss(x, model.embeddings(), sched) + reconstruction_sample(x, model, sched, rng) +
            diffusion_loss_sample(x, model, sched, t, rng);
  const double t_ce = std::clamp(rng.uniform(), 1e-12, 1.0 - 1e-12);
  r.ce = ce_sample(x, model, ce_schedule, t_ce, rng);
  return r;
}

}  // namespace difflab
