// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "difflab/core.hpp"
#include "difflab/denoiser.hpp"
#include "difflab/losses.hpp"
#include "difflab/mc.hpp"
#include "difflab/noising.hpp"
#include "difflab/oracle.hpp"
#include "difflab/optim.hpp"

namespace difflab {

/// w(g) = exp(-g) * MSE at SNR exp(-g).
inline Estimate weight_w(const Denoiser& model, const DataDistribution& data, double g, const McPlan& plan,
                         ErrorEstimator est = ErrorEstimator::squared_error) {
  const Estimate mse = mse_at_gamma(model, data, g, plan, est);
  const double scale = std::exp(-g);
  return {scale * mse.value, scale * mse.se, mse.n};
}

/// Cumulative weight G on a log-SNR grid and the schedule that inverts it.
///
/// G(g0) = 0, G(g1) = 2 kappa, and the optimal schedule is the solution of
/// G(gamma(t)) = 2 kappa t.
struct ScheduleOptimum {
  double gamma0 = 0.0;
  double gamma1 = 0.0;
  std::vector<double> gammas;
  std::vector<double> w;
  std::vector<double> w_se;
  std::vector<double> G;
  std::vector<double> G_se;
  double kappa = 0.0;
  double kappa_se = 0.0;
  TabulatedShape shape;

  NoiseSchedule schedule() const { return NoiseSchedule(gamma0, gamma1, shape); }

  double gamma_star(double t) const { return gamma0 + (gamma1 - gamma0) * shape.value(t); }

  /// Interpolated cumulative weight at g.
  double cumulative(double g) const {
    const double u = std::clamp((g - gamma0) / (gamma1 - gamma0), 0.0, 1.0);
    return 2.0 * kappa * shape.curve().value(u);
  }

  /// Inverse of the cumulative weight.
  double cumulative_inverse(double value) const {
    const double u = shape.curve().inverse(value / (2.0 * kappa));
    return gamma0 + (gamma1 - gamma0) * u;
  }

  /// Standard error of G at g, linearly interpolated between nodes.
  double cumulative_se(double g) const {
    if (g <= gammas.front()) return G_se.front();
    if (g >= gammas.back()) return G_se.back();
    const auto it = std::upper_bound(gammas.begin(), gammas.end(), g);
    const std::size_t k = static_cast<std::size_t>(it - gammas.begin()) - 1;
    const double f = (g - gammas[k]) / (gammas[k + 1] - gammas[k]);
    return (1.0 - f) * G_se[k] + f * G_se[k + 1];
  }
};

/// Builds the optimum from node weights by trapezoid integration.
///
/// Knot slopes of the cubic t(u) are the node weights themselves, so the
/// interpolant reproduces w exactly at every node.
inline ScheduleOptimum optimum_from_weights(std::vector<double> gammas, std::vector<double> w,
                                            std::vector<double> w_se = {}, std::vector<double> G_se = {}) {
  const std::size_t n = gammas.size();
  if (n < 2 || w.size() != n) throw std::invalid_argument("weight table needs matching grid and values");
  for (std::size_t k = 0; k < n; ++k)
    if (!(w[k] > 0.0) || !std::isfinite(w[k]))
      throw NumericalError("cumulative weight is not strictly increasing (w <= 0 at gamma = " +
                           std::to_string(gammas[k]) + ")");
  ScheduleOptimum opt;
  opt.gamma0 = gammas.front();
  opt.gamma1 = gammas.back();
  opt.G.assign(n, 0.0);
  for (std::size_t k = 1; k < n; ++k) opt.G[k] = opt.G[k - 1] + 0.5 * (w[k - 1] + w[k]) * (gammas[k] - gammas[k - 1]);
  opt.kappa = 0.5 * opt.G.back();
  const double width = opt.gamma1 - opt.gamma0;
  std::vector<double> u(n), t(n), slope(n);
  for (std::size_t k = 0; k < n; ++k) {
    u[k] = (gammas[k] - opt.gamma0) / width;
    t[k] = opt.G[k] / opt.G.back();
    slope[k] = w[k] * width / opt.G.back();
  }
  u.back() = 1.0;
  t.back() = 1.0;
  opt.shape = TabulatedShape(MonotoneHermite(std::move(u), std::move(t), std::move(slope)));
  opt.w_se = w_se.empty() ? std::vector<double>(n, 0.0) : std::move(w_se);
  opt.G_se = G_se.empty() ? std::vector<double>(n, 0.0) : std::move(G_se);
  opt.kappa_se = 0.5 * opt.G_se.back();
  opt.gammas = std::move(gammas);
  opt.w = std::move(w);
  return opt;
}

inline std::vector<double> uniform_grid(double lo, double hi, int n) {
  std::vector<double> g(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) g[static_cast<std::size_t>(k)] = lo + (hi - lo) * k / (n - 1);
  g.back() = hi;
  return g;
}

namespace detail {

struct WeightCurveAcc {
  std::vector<RunningStats> w, G;
  explicit WeightCurveAcc(std::size_t n) : w(n), G(n) {}
  void merge(const WeightCurveAcc& o) {
    for (std::size_t k = 0; k < w.size(); ++k) {
      w[k].merge(o.w[k]);
      G[k].merge(o.G[k]);
    }
  }
};

}  // namespace detail

/// Estimates w on a log-SNR grid and inverts its integral.
///
/// Every node sees the same draws (x, eps), so the estimated curve is a
/// smooth function of g; per-draw running integrals give the error of G.
inline ScheduleOptimum compute_optimum(const Denoiser& model, const DataDistribution& data, double gamma0,
                                       double gamma1, int grid_n, const McPlan& plan,
                                       ErrorEstimator est = ErrorEstimator::squared_error) {
  check_estimator(model, est);
  if (grid_n < 64) throw std::invalid_argument("optimum grid needs at least 64 nodes");
  if (!(gamma0 < gamma1)) throw std::invalid_argument("optimum needs gamma0 < gamma1");
  const auto gammas = uniform_grid(gamma0, gamma1, grid_n);
  const std::size_t n = gammas.size();
  std::vector<double> scale(n);
  for (std::size_t k = 0; k < n; ++k) scale[k] = std::exp(-gammas[k]);
  auto acc = run_sharded(plan, [n] { return detail::WeightCurveAcc(n); },
                         [&](detail::WeightCurveAcc& a, std::size_t, Stream& rng) {
                           const Tokens x = data.sample(rng);
                           const Mat e = embed(x, model.embeddings());
                           const Mat eps = standard_normal(e.rows(), e.cols(), rng);
                           DenoiserOutput out;
                           Mat z;
                           double prev = 0.0, cum = 0.0;
                           for (std::size_t k = 0; k < n; ++k) {
                             const double wk = scale[k] * squared_error_at(model, x, e, eps, gammas[k], out, z, est);
                             if (k > 0) cum += 0.5 * (prev + wk) * (gammas[k] - gammas[k - 1]);
                             prev = wk;
                             a.w[k].add(wk);
                             a.G[k].add(cum);
                           }
                         });
  std::vector<double> w(n), w_se(n), G_se(n);
  for (std::size_t k = 0; k < n; ++k) {
    w[k] = acc.w[k].mean();
    w_se[k] = acc.w[k].se();
    G_se[k] = acc.G[k].se();
  }
  return optimum_from_weights(gammas, std::move(w), std::move(w_se), std::move(G_se));
}

// ---------------------------------------------------------------------------
// Variance-minimizing schedule learning.

struct ScheduleLearnConfig {
  int steps = 3000;
  double lr = 0.02;
  int strata = 32;           // stratified times per step
  int draws_per_stratum = 8; // inner draws sharing one time
  double fd_step = 1e-3;     // central difference in gamma
  double average_tail = 0.5; // fraction of final iterates averaged
  bool learn_endpoints = false;
  double endpoint_lr = 1e-2;
  std::uint64_t seed = 0;
  std::string tag = "schedule-learn";
};

struct ScheduleLearnResult {
  NoiseSchedule schedule;
  std::vector<double> objective;  // per-step estimate of the mean squared per-timestep loss
  int steps = 0;
};

/// Weighted error f = exp(-g) |e_hat - e|^2 of one draw and its central
/// difference in g.
struct HookedSample {
  double f = 0.0;
  double df = 0.0;
};

inline HookedSample hooked_diffusion_sample(const Denoiser& model, std::span<const int> x, const Mat& e, const Mat& eps,
                                            double g, double fd_step, DenoiserOutput& out, Mat& z) {
  const double fp = std::exp(-(g + fd_step)) * squared_error_at(model, x, e, eps, g + fd_step, out, z);
  const double fm = std::exp(-(g - fd_step)) * squared_error_at(model, x, e, eps, g - fd_step, out, z);
  HookedSample s;
  s.f = std::exp(-g) * squared_error_at(model, x, e, eps, g, out, z);
  s.df = (fp - fm) / (2.0 * fd_step);
  return s;
}

/// One stochastic gradient of the integral of l(t)^2 over t with respect to
/// the raw shape parameters, plus the gradient of the mean diffusion loss
/// with respect to the endpoints.
///
/// Draws are stratified in the shape value u rather than in t. With
/// W = gamma1 - gamma0 and s the local slope du/dt, the objective is the
/// integral over u of (W f / 2)^2 s, so every segment is visited equally
/// however narrow it is in t. Products of distinct draws at one u estimate
/// the squared mean without bias, and s depends on the parameters only
/// through the segment containing u.
struct ShapeGradient {
  std::vector<double> shape;
  double gamma0 = 0.0, gamma1 = 0.0;
  double objective = 0.0;  // unbiased estimate of the integral of l(t)^2
};

inline ShapeGradient shape_gradient(const Denoiser& model, const DataDistribution& data, const NoiseSchedule& sched,
                                    int strata, int draws_per_stratum, double fd_step, Stream& rng) {
  const auto* shape = std::get_if<PiecewiseLinearShape>(&sched.shape());
  if (!shape) throw std::invalid_argument("schedule learning needs a piecewise-linear shape");
  if (draws_per_stratum < 2) throw std::invalid_argument("schedule learning needs at least two draws per point");
  const std::size_t K = static_cast<std::size_t>(shape->segments());
  const double width = sched.span_width();
  ShapeGradient g;
  g.shape.assign(K, 0.0);
  std::vector<double> dlog(K);
  std::vector<HookedSample> draws(static_cast<std::size_t>(draws_per_stratum));
  DenoiserOutput out;
  Mat z;
  const double offset = rng.uniform();
  const double m = draws_per_stratum;
  const double norm = 1.0 / (strata * m);
  for (int i = 0; i < strata; ++i) {
    const double u = detail::stratified_time(static_cast<std::size_t>(i), static_cast<std::size_t>(strata), offset);
    const double gam = sched.gamma0() + width * u;
    double sum = 0.0;
    for (auto& d : draws) {
      const Tokens x = data.sample(rng);
      const Mat e = embed(x, model.embeddings());
      const Mat eps = standard_normal(e.rows(), e.cols(), rng);
      d = hooked_diffusion_sample(model, x, e, eps, gam, fd_step, out, z);
      if (!std::isfinite(d.f) || !std::isfinite(d.df))
        throw NumericalError("schedule gradient is not finite at u = " + std::to_string(u));
      sum += d.f;
    }
    const std::size_t k = shape->segment_of_value(u);
    shape->log_slope_gradient(k, dlog);
    const double slope = 1.0 / (K * shape->increments()[k]);
    for (const auto& d : draws) {
      const double others = (sum - d.f) / (m - 1.0);
      const double prod = 0.25 * width * width * d.f * others * slope;
      g.objective += norm * prod;
      for (std::size_t j = 0; j < K; ++j) g.shape[j] += norm * prod * dlog[j];
      // mean loss = (W / 2) E_u[f(gamma0 + W u)]
      g.gamma0 += norm * 0.5 * (-d.f + width * (1.0 - u) * d.df);
      g.gamma1 += norm * 0.5 * (d.f + width * u * d.df);
    }
  }
  return g;
}

/// Learns the piecewise-linear interior shape so the per-timestep loss
/// l(t) becomes flat. Its minimizer under fixed endpoints is the flat-loss
/// schedule because the mean of l(t) does not depend on the shape.
inline ScheduleLearnResult learn_schedule(const Denoiser& model, const DataDistribution& data,
                                          const NoiseSchedule& init, const ScheduleLearnConfig& cfg) {
  const auto* start = std::get_if<PiecewiseLinearShape>(&init.shape());
  if (!start) throw std::invalid_argument("schedule learning needs a piecewise-linear shape");
  std::vector<double> raw = start->raw();
  const std::size_t K = raw.size();
  double g0 = init.gamma0(), g1 = init.gamma1();
  AdamW shape_opt(K, {.lr = cfg.lr, .beta1 = 0.9, .beta2 = 0.99});
  AdamW end_opt(2, {.lr = cfg.endpoint_lr, .beta1 = 0.9, .beta2 = 0.99});
  std::vector<double> avg(K, 0.0);
  int averaged = 0;
  const int tail_start = static_cast<int>(std::floor(cfg.steps * (1.0 - cfg.average_tail)));

  ScheduleLearnResult result;
  DenoiserOutput out;
  for (int step = 0; step < cfg.steps; ++step) {
    const NoiseSchedule sched(g0, g1, PiecewiseLinearShape(raw));
    Stream rng(cfg.seed, cfg.tag, static_cast<std::uint64_t>(step));
    const ShapeGradient grad = shape_gradient(model, data, sched, cfg.strata, cfg.draws_per_stratum, cfg.fd_step, rng);
    if (cfg.learn_endpoints) {
      // Full NELBO: prior and reconstruction terms close the endpoint objective.
      double end_grad[2] = {grad.gamma0, grad.gamma1};
      Stream erng(cfg.seed, cfg.tag + "/endpoints", static_cast<std::uint64_t>(step));
      const double h = cfg.fd_step;
      for (int i = 0; i < cfg.strata; ++i) {
        const Tokens x = data.sample(erng);
        const Mat e = embed(x, model.embeddings());
        const Mat eps = standard_normal(e.rows(), e.cols(), erng);
        auto recon_at = [&](double g) {
          const Mat zz = noise_at_gamma(e, eps, g);
          denoise(model, zz, g, out);
          return sequence_log_loss(out.rows, x);
        };
        end_grad[0] += (recon_at(g0 + h) - recon_at(g0 - h)) / (2.0 * h) / cfg.strata;
        const double e2 = e.squaredNorm();
        const int L = static_cast<int>(e.rows()), d = static_cast<int>(e.cols());
        end_grad[1] += (prior_loss(L, d, e2, g1 + h) - prior_loss(L, d, e2, g1 - h)) / (2.0 * h) / cfg.strata;
      }
      std::vector<double> ends = {g0, g1};
      end_opt.step(ends, std::span<const double>(end_grad, 2));
      if (ends[1] > ends[0] + 1e-3) {
        g0 = ends[0];
        g1 = ends[1];
      }
    }
    result.objective.push_back(grad.objective);
    shape_opt.step(raw, grad.shape);
    if (step >= tail_start) {
      for (std::size_t j = 0; j < K; ++j) avg[j] += raw[j];
      ++averaged;
    }
  }
  if (averaged > 0)
    for (double& a : avg) a /= averaged;
  else
    avg = raw;
  result.schedule = NoiseSchedule(g0, g1, PiecewiseLinearShape(avg));
  result.steps = cfg.steps;
  return result;
}

/// Per-timestep losses on a grid and their spread across t.
struct LossCurve {
  std::vector<double> t;
  std::vector<Estimate> values;

  double max_over_min() const {
    double lo = values.front().value, hi = lo;
    for (const auto& v : values) {
      lo = std::min(lo, v.value);
      hi = std::max(hi, v.value);
    }
    return hi / lo;
  }

  /// Variance across t of the curve, with a delta-method standard error.
  Estimate variance_across_t() const {
    const double n = static_cast<double>(values.size());
    double mean = 0.0;
    for (const auto& v : values) mean += v.value / n;
    double var = 0.0, se2 = 0.0;
    for (const auto& v : values) {
      const double d = v.value - mean;
      var += d * d / n;
      se2 += std::pow(2.0 * d * v.se / n, 2);
    }
    return {var, std::sqrt(se2), values.front().n};
  }

  Estimate mean_over_t() const {
    const double n = static_cast<double>(values.size());
    double mean = 0.0, se2 = 0.0;
    for (const auto& v : values) {
      mean += v.value / n;
      se2 += v.se * v.se / (n * n);
    }
    return {mean, std::sqrt(se2), values.front().n};
  }
};

inline std::vector<double> midpoint_grid(int n) {
  std::vector<double> t(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) t[static_cast<std::size_t>(i)] = (i + 0.5) / n;
  return t;
}

/// Grid on [lo, hi] with n points.
inline std::vector<double> closed_grid(double lo, double hi, int n) { return uniform_grid(lo, hi, n); }

inline LossCurve diffusion_loss_curve(const Denoiser& model, const DataDistribution& data, const NoiseSchedule& sched,
                                      const std::vector<double>& ts, const McPlan& plan,
                                      ErrorEstimator est = ErrorEstimator::squared_error) {
  LossCurve c;
  c.t = ts;
  for (double t : ts) c.values.push_back(per_timestep_diffusion_loss(model, data, sched, t, plan, est));
  return c;
}

/// Sup-norm distance between two interior shapes on a grid.
inline double shape_distance(const NoiseSchedule& a, const NoiseSchedule& b, const std::vector<double>& ts) {
  double d = 0.0;
  for (double t : ts) d = std::max(d, std::abs(a.shape_value(t) - b.shape_value(t)));
  return d;
}

}  // namespace difflab
