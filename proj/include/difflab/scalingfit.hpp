// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace difflab {

struct IsoFlopPoint {
  double params = 0.0;  // N
  double loss = 0.0;
};

/// log L = a (log N)^2 + b log N + c at one compute budget.
struct IsoFlopFit {
  double a = 0.0, b = 0.0, c = 0.0;
  bool has_minimum = false;
  bool extrapolated = false;  // vertex outside [min N, max N] x 10^(+-0.5)
  double n_star = 0.0;
  double loss_star = 0.0;
  std::vector<double> residuals;  // log-loss residuals at the data points
};

/// Least squares by QR on centered, scaled log N, mapped back to raw coefficients.
inline IsoFlopFit isoflop_fit(const std::vector<IsoFlopPoint>& pts) {
  if (pts.size() < 3) throw std::invalid_argument("isoflop fit needs at least three points");
  const Eigen::Index n = static_cast<Eigen::Index>(pts.size());
  Eigen::VectorXd x(n), y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(pts[static_cast<std::size_t>(i)].params > 0.0 && pts[static_cast<std::size_t>(i)].loss > 0.0))
      throw std::invalid_argument("isoflop points need positive N and loss");
    x[i] = std::log(pts[static_cast<std::size_t>(i)].params);
    y[i] = std::log(pts[static_cast<std::size_t>(i)].loss);
  }
  const double mu = x.mean();
  const double scale = std::max((x.array() - mu).abs().maxCoeff(), 1e-300);
  Eigen::MatrixXd A(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double u = (x[i] - mu) / scale;
    A(i, 0) = u * u;
    A(i, 1) = u;
    A(i, 2) = 1.0;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  if (qr.rank() < 3) throw std::invalid_argument("isoflop design is degenerate (need three distinct N)");
  const Eigen::Vector3d p = qr.solve(y);
  // y = p0 ((x - mu)/s)^2 + p1 (x - mu)/s + p2
  IsoFlopFit f;
  f.a = p[0] / (scale * scale);
  f.b = p[1] / scale - 2.0 * p[0] * mu / (scale * scale);
  f.c = p[0] * mu * mu / (scale * scale) - p[1] * mu / scale + p[2];
  const Eigen::VectorXd r = y - A * p;
  f.residuals.assign(r.data(), r.data() + r.size());
  if (f.a > 0.0) {
    f.has_minimum = true;
    const double u_star = -p[1] / (2.0 * p[0]);
    const double x_star = mu + scale * u_star;
    f.n_star = std::exp(x_star);
    f.loss_star = std::exp(p[2] - p[1] * p[1] / (4.0 * p[0]));
    const double lo = x.minCoeff() - 0.5 * std::log(10.0), hi = x.maxCoeff() + 0.5 * std::log(10.0);
    f.extrapolated = x_star < lo || x_star > hi;
  }
  return f;
}

/// log L* = alpha log C + beta.
struct PowerLaw {
  double alpha = 0.0;
  double beta = 0.0;
  double predict(double compute) const { return std::exp(alpha * std::log(compute) + beta); }
};

inline PowerLaw powerlaw_fit(const std::vector<double>& compute, const std::vector<double>& loss) {
  if (compute.size() < 2 || compute.size() != loss.size()) throw std::invalid_argument("power-law fit needs at least two matched points");
  const Eigen::Index n = static_cast<Eigen::Index>(compute.size());
  Eigen::MatrixXd A(n, 2);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    A(i, 0) = std::log(compute[static_cast<std::size_t>(i)]);
    A(i, 1) = 1.0;
    y[i] = std::log(loss[static_cast<std::size_t>(i)]);
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  if (qr.rank() < 2) throw std::invalid_argument("power-law design is degenerate");
  const Eigen::Vector2d p = qr.solve(y);
  return {p[0], p[1]};
}

/// Two laws with one shared exponent and separate offsets, fit jointly.
inline std::pair<PowerLaw, PowerLaw> powerlaw_fit_shared(const std::vector<double>& compute1,
                                                         const std::vector<double>& loss1,
                                                         const std::vector<double>& compute2,
                                                         const std::vector<double>& loss2) {
  if (compute1.empty() || compute2.empty() || compute1.size() != loss1.size() || compute2.size() != loss2.size() ||
      compute1.size() + compute2.size() < 3)
    throw std::invalid_argument("shared power-law fit needs matched points, at least three in total");
  const std::size_t n1 = compute1.size();
  const Eigen::Index n = static_cast<Eigen::Index>(n1 + compute2.size());
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, 3);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::size_t k = static_cast<std::size_t>(i);
    const bool first = k < n1;
    A(i, 0) = std::log(first ? compute1[k] : compute2[k - n1]);
    A(i, first ? 1 : 2) = 1.0;
    y[i] = std::log(first ? loss1[k] : loss2[k - n1]);
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  if (qr.rank() < 3) throw std::invalid_argument("shared power-law design is degenerate");
  const Eigen::Vector3d p = qr.solve(y);
  return {PowerLaw{p[0], p[1]}, PowerLaw{p[0], p[2]}};
}

/// Compute multiple the second law needs to reach the first law's loss:
/// exp((beta2 - beta1) / -alpha), assuming equal exponents.
inline double compute_gap(const PowerLaw& first, const PowerLaw& second) {
  const double alpha = 0.5 * (first.alpha + second.alpha);
  if (alpha == 0.0) throw std::invalid_argument("compute gap is undefined for flat laws");
  return std::exp((second.beta - first.beta) / -alpha);
}

/// Logit-head FLOPs over embedding-path FLOPs: V h / (d_e h + V d_e).
inline double embed_flops_ratio(double vocab, double hidden, double dim, double length = 1.0) {
  if (!(vocab > 0 && hidden > 0 && dim > 0 && length > 0)) throw std::invalid_argument("flops ratio needs positive sizes");
  return (length * vocab * hidden) / (length * dim * hidden + length * vocab * dim);
}

}  // namespace difflab
