// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <span>
#include <stdexcept>

#include "difflab/core.hpp"

namespace difflab {

inline void fill_normal(Mat& m, Stream& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
}

inline Mat standard_normal(Eigen::Index rows, Eigen::Index cols, Stream& rng) {
  Mat m(rows, cols);
  fill_normal(m, rng);
  return m;
}

/// z = alpha * e + sigma * eps at log-SNR coordinate g.
inline Mat noise_at_gamma(const Mat& e, const Mat& eps, double g) {
  return std::sqrt(alpha2_of(g)) * e + std::sqrt(sigma2_of(g)) * eps;
}

/// Draw from q(z_t | x).
inline Mat sample_forward(std::span<const int> x, const Mat& table, const NoiseSchedule& sched, double t, Stream& rng) {
  const ScheduleEval s = sched.eval(t);
  const Mat e = embed(x, table);
  Mat z = standard_normal(e.rows(), e.cols(), rng);
  z = s.alpha * e + s.sigma * z;
  return z;
}

/// 1 - exp(g_lo - g_hi): fraction of the log-SNR gap covered by a step.
inline double snr_gap_gamma(double g_lo, double g_hi) { return -std::expm1(g_lo - g_hi); }

inline double snr_gap(const NoiseSchedule& sched, double t_lo, double t_hi) {
  if (t_lo > t_hi) throw std::invalid_argument("snr gap needs t_lo <= t_hi");
  return snr_gap_gamma(sched.gamma(t_lo), sched.gamma(t_hi));
}

struct GaussianPosterior {
  Mat mean;
  double var = 0.0;
};

/// q(z_lo | z_hi, e) between log-SNR coordinates g_lo < g_hi.
inline GaussianPosterior posterior_params_gamma(const Mat& z_hi, const Mat& e, double g_hi, double g_lo) {
  if (!(g_lo <= g_hi)) throw std::invalid_argument("posterior needs g_lo <= g_hi");
  const double c = snr_gap_gamma(g_lo, g_hi);
  const double a_lo = std::sqrt(alpha2_of(g_lo)), a_hi = std::sqrt(alpha2_of(g_hi));
  GaussianPosterior p;
  p.mean = (a_lo / a_hi) * (1.0 - c) * z_hi + a_lo * c * e;
  p.var = c * sigma2_of(g_lo);
  return p;
}

inline GaussianPosterior posterior_params(const Mat& z_hi, std::span<const int> x, const Mat& table,
                                          const NoiseSchedule& sched, double t_hi, double t_lo) {
  if (!(t_lo < t_hi)) throw std::invalid_argument("posterior needs t_lo < t_hi");
  return posterior_params_gamma(z_hi, embed(x, table), sched.gamma(t_hi), sched.gamma(t_lo));
}

}  // namespace difflab
