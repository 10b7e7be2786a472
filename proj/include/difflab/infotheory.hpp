// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "difflab/core.hpp"
#include "difflab/losses.hpp"
#include "difflab/mc.hpp"
#include "difflab/noising.hpp"
#include "difflab/oracle.hpp"
#include "difflab/schedule.hpp"

namespace difflab {

/// Posterior entropies averaged over z ~ q(z).
///
/// Every field comes from the same draws, so differences such as the
/// conditional total correlation carry paired standard errors.
struct ConditionalEntropy {
  Estimate joint;                      // H(x | z)
  std::vector<Estimate> per_position;  // H(x^l | z)
  Estimate position_sum;               // sum_l H(x^l | z)
  Estimate total_correlation;          // C(x | z)
};

namespace detail {

struct EntropyAcc {
  RunningStats joint, sum, tc;
  std::vector<RunningStats> pos;
  explicit EntropyAcc(std::size_t L) : pos(L) {}
  void merge(const EntropyAcc& o) {
    joint.merge(o.joint);
    sum.merge(o.sum);
    tc.merge(o.tc);
    for (std::size_t l = 0; l < pos.size(); ++l) pos[l].merge(o.pos[l]);
  }
};

}  // namespace detail

inline ConditionalEntropy conditional_entropy_at_gamma(const BayesDenoiser& oracle, double g, const McPlan& plan) {
  if (plan.n < 2) throw std::invalid_argument("Monte-Carlo sample count must be at least 2");
  const std::size_t L = static_cast<std::size_t>(oracle.length());
  auto acc = run_sharded(plan, [L] { return detail::EntropyAcc(L); },
                         [&](detail::EntropyAcc& a, std::size_t, Stream& rng) {
                           const Tokens x = oracle.data().sample(rng);
                           const Mat e = embed(x, oracle.embeddings());
                           const Mat eps = standard_normal(e.rows(), e.cols(), rng);
                           const Mat z = noise_at_gamma(e, eps, g);
                           DenoiserOutput out;
                           const PosteriorEntropy h = oracle.posterior_entropy(z, g, out);
                           const double s = h.position_sum();
                           a.joint.add(h.joint);
                           a.sum.add(s);
                           a.tc.add(s - h.joint);
                           for (std::size_t l = 0; l < L; ++l) a.pos[l].add(h.per_position[l]);
                         });
  ConditionalEntropy r;
  r.joint = acc.joint.estimate();
  r.position_sum = acc.sum.estimate();
  r.total_correlation = acc.tc.estimate();
  for (const auto& p : acc.pos) r.per_position.push_back(p.estimate());
  return r;
}

inline ConditionalEntropy conditional_entropy(const Instance& inst, const NoiseSchedule& sched, double t,
                                              const McPlan& plan) {
  return conditional_entropy_at_gamma(BayesDenoiser(inst), sched.gamma(t), plan);
}

/// I(x; z) = H(x) - H(x | z) at log-SNR g.
inline Estimate mutual_info_at_gamma(const BayesDenoiser& oracle, double g, const McPlan& plan) {
  const Estimate h = conditional_entropy_at_gamma(oracle, g, plan).joint;
  return {data_entropy(oracle.data()) - h.value, h.se, h.n};
}

inline Estimate mutual_info(const Instance& inst, const NoiseSchedule& sched, double t, const McPlan& plan) {
  return mutual_info_at_gamma(BayesDenoiser(inst), sched.gamma(t), plan);
}

inline Estimate conditional_total_correlation(const Instance& inst, const NoiseSchedule& sched, double t,
                                              const McPlan& plan) {
  return conditional_entropy(inst, sched, t, plan).total_correlation;
}

/// Central difference of I in the SNR against half the MMSE.
struct ImmseCheck {
  double snr = 0.0;
  Estimate derivative;  // dI / d snr
  Estimate half_mmse;
  double residual = 0.0;  // |derivative - half_mmse|
  double se = 0.0;        // joint standard error of the residual
  double relative() const { return residual / half_mmse.value; }
};

/// Both entropy evaluations share their draws, so the difference quotient
/// has a paired error; the MMSE side uses independent draws and averages the
/// posterior spread rather than the squared error.
inline ImmseCheck immse_residual_at_snr(const BayesDenoiser& oracle, double snr, double dsnr, const McPlan& plan) {
  if (!(dsnr > 0.0 && dsnr < snr)) throw std::invalid_argument("snr step must lie in (0, snr)");
  if (plan.n < 2) throw std::invalid_argument("Monte-Carlo sample count must be at least 2");
  const double g_hi = -std::log(snr - dsnr), g_lo = -std::log(snr + dsnr);
  auto diff = mc_mean(plan.with_tag(plan.tag + "/entropy"), [&](std::size_t, Stream& rng) {
    const Tokens x = oracle.data().sample(rng);
    const Mat e = embed(x, oracle.embeddings());
    const Mat eps = standard_normal(e.rows(), e.cols(), rng);
    DenoiserOutput out;
    const double h_hi = oracle.posterior_entropy(noise_at_gamma(e, eps, g_hi), g_hi, out).joint;
    const double h_lo = oracle.posterior_entropy(noise_at_gamma(e, eps, g_lo), g_lo, out).joint;
    // I(snr + d) - I(snr - d) = H(x|z at snr - d) - H(x|z at snr + d)
    return (h_hi - h_lo) / (2.0 * dsnr);
  });
  const Estimate mse = mse_at_gamma(oracle, oracle.data(), -std::log(snr), plan.with_tag(plan.tag + "/mmse"),
                                  ErrorEstimator::posterior_variance);
  ImmseCheck c;
  c.snr = snr;
  c.derivative = diff;
  c.half_mmse = {0.5 * mse.value, 0.5 * mse.se, mse.n};
  c.residual = std::abs(diff.value - c.half_mmse.value);
  c.se = joint_se(diff.se, c.half_mmse.se);
  return c;
}

inline ImmseCheck immse_residual(const Instance& inst, const NoiseSchedule& sched, double t, double dsnr,
                                 const McPlan& plan) {
  return immse_residual_at_snr(BayesDenoiser(inst), std::exp(-sched.gamma(t)), dsnr, plan);
}

/// CE(t) against H(x) - I(e; z_0) + kappa t + C(x | z_t) under the optimal schedule.
struct CeDecomposition {
  double t = 0.0;
  Estimate ce;
  Estimate info0;
  Estimate trend;  // kappa t, with the error of the interpolated cumulative weight
  Estimate residual_tc;
  double rhs = 0.0;
  double gap = 0.0;
  double se = 0.0;
};

/// `info0` is I(e; z_0) at the schedule's start, estimated once by the caller.
inline CeDecomposition ce_decomposition_residual(const BayesDenoiser& oracle, const ScheduleOptimum& opt, double t,
                                                 const Estimate& info0, const McPlan& plan) {
  const NoiseSchedule sched = opt.schedule();
  CeDecomposition d;
  d.t = t;
  const LossEstimate ce = per_timestep_ce(oracle, oracle.data(), sched, t, plan.with_tag(plan.tag + "/ce"));
  d.ce = ce.estimate();
  d.info0 = info0;
  d.trend = {opt.kappa * t, 0.5 * opt.cumulative_se(opt.gamma_star(t))};
  d.residual_tc = conditional_entropy_at_gamma(oracle, sched.gamma(t), plan.with_tag(plan.tag + "/tc")).total_correlation;
  d.rhs = data_entropy(oracle.data()) - info0.value + d.trend.value + d.residual_tc.value;
  d.gap = d.ce.value - d.rhs;
  d.se = std::sqrt(d.ce.se * d.ce.se + info0.se * info0.se + d.trend.se * d.trend.se + d.residual_tc.se * d.residual_tc.se);
  return d;
}

/// Posterior entropy, MMSE and mutual information of a one-position,
/// one-dimensional instance at log-SNR g, by Simpson's rule over z.
struct ChannelQuadrature {
  double entropy = 0.0;  // H(x | z)
  double mmse = 0.0;
  double info = 0.0;     // H(x) - H(x | z)
};

inline ChannelQuadrature channel_quadrature_1d(const Instance& inst, double g, int nodes = 20001) {
  if (inst.L() != 1 || inst.dim() != 1) throw std::invalid_argument("quadrature reference needs L = 1, d_e = 1");
  if (nodes < 3 || nodes % 2 == 0) throw std::invalid_argument("quadrature needs an odd node count of at least 3");
  const int V = inst.V();
  const double a = std::sqrt(alpha2_of(g)), s = std::sqrt(sigma2_of(g));
  std::vector<double> prior(static_cast<std::size_t>(V)), mean(static_cast<std::size_t>(V));
  for (int v = 0; v < V; ++v) {
    prior[static_cast<std::size_t>(v)] = inst.data.prob(Tokens{v});
    mean[static_cast<std::size_t>(v)] = a * inst.E()(v, 0);
  }
  const auto [lo_it, hi_it] = std::minmax_element(mean.begin(), mean.end());
  const double lo = *lo_it - 12.0 * s, hi = *hi_it + 12.0 * s;
  const double dz = (hi - lo) / (nodes - 1);
  std::vector<double> logw(static_cast<std::size_t>(V)), post(static_cast<std::size_t>(V));
  ChannelQuadrature q;
  for (int i = 0; i < nodes; ++i) {
    const double z = lo + dz * i;
    double m = -std::numeric_limits<double>::infinity();
    for (int v = 0; v < V; ++v) {
      const std::size_t k = static_cast<std::size_t>(v);
      const double r = (z - mean[k]) / s;
      logw[k] = prior[k] > 0.0 ? std::log(prior[k]) - 0.5 * r * r : -std::numeric_limits<double>::infinity();
      m = std::max(m, logw[k]);
    }
    double total = 0.0;
    for (int v = 0; v < V; ++v) total += post[static_cast<std::size_t>(v)] = std::exp(logw[static_cast<std::size_t>(v)] - m);
    const double density = total * std::exp(m) / (s * std::sqrt(2.0 * M_PI));
    double h = 0.0, e1 = 0.0, e2 = 0.0;
    for (int v = 0; v < V; ++v) {
      const double p = post[static_cast<std::size_t>(v)] / total;
      const double e = inst.E()(v, 0);
      if (p > 0.0) h -= p * std::log(p);
      e1 += p * e;
      e2 += p * e * e;
    }
    const double wgt = (i == 0 || i == nodes - 1) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    q.entropy += wgt * density * h;
    q.mmse += wgt * density * std::max(e2 - e1 * e1, 0.0);
  }
  q.entropy *= dz / 3.0;
  q.mmse *= dz / 3.0;
  q.info = data_entropy(inst.data) - q.entropy;
  return q;
}

/// Coefficient of determination of a least-squares line through (x, y).
inline double linear_r2(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (syy == 0.0) return 1.0;
  return sxy * sxy / (sxx * syy);
}

}  // namespace difflab
