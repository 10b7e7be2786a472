// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace difflab {

/// Strictly increasing piecewise-cubic Hermite interpolant with an inverse.
///
/// Knots, values and knot slopes are supplied by the caller. Slopes must be
/// positive and satisfy the Fritsch-Carlson bound on every interval, which is
/// checked at construction so the interpolant is guaranteed monotone.
class MonotoneHermite {
 public:
  MonotoneHermite() = default;

  MonotoneHermite(std::vector<double> x, std::vector<double> y, std::vector<double> slopes)
      : x_(std::move(x)), y_(std::move(y)), m_(std::move(slopes)) {
    if (x_.size() < 2 || y_.size() != x_.size() || m_.size() != x_.size())
      throw std::invalid_argument("monotone interpolant needs at least two matching knots");
    for (std::size_t k = 0; k + 1 < x_.size(); ++k) {
      if (!(x_[k + 1] > x_[k])) throw std::invalid_argument("interpolant knots must increase strictly");
      if (!(y_[k + 1] > y_[k])) throw std::invalid_argument("interpolant values must increase strictly");
      const double delta = (y_[k + 1] - y_[k]) / (x_[k + 1] - x_[k]);
      const double a = m_[k] / delta, b = m_[k + 1] / delta;
      if (a < 0.0 || b < 0.0 || a * a + b * b > 9.0 + 1e-9)
        throw std::invalid_argument("knot slopes violate the monotonicity bound");
    }
  }

  /// Fritsch-Carlson slopes from the data alone.
  static MonotoneHermite fritsch_carlson(std::vector<double> x, std::vector<double> y) {
    const std::size_t n = x.size();
    if (n < 2 || y.size() != n) throw std::invalid_argument("need at least two matching knots");
    std::vector<double> delta(n - 1), m(n);
    for (std::size_t k = 0; k + 1 < n; ++k) delta[k] = (y[k + 1] - y[k]) / (x[k + 1] - x[k]);
    m[0] = delta[0];
    m[n - 1] = delta[n - 2];
    for (std::size_t k = 1; k + 1 < n; ++k)
      m[k] = delta[k - 1] * delta[k] > 0.0 ? 0.5 * (delta[k - 1] + delta[k]) : 0.0;
    for (std::size_t k = 0; k + 1 < n; ++k) {
      const double a = m[k] / delta[k], b = m[k + 1] / delta[k];
      const double r = a * a + b * b;
      if (r > 9.0) {
        const double tau = 3.0 / std::sqrt(r);
        m[k] = tau * a * delta[k];
        m[k + 1] = tau * b * delta[k];
      }
    }
    return MonotoneHermite(std::move(x), std::move(y), std::move(m));
  }

  double x_min() const { return x_.front(); }
  double x_max() const { return x_.back(); }
  const std::vector<double>& knots() const { return x_; }
  const std::vector<double>& values() const { return y_; }
  const std::vector<double>& slopes() const { return m_; }

  double value(double xq) const {
    const std::size_t k = interval_of(x_, xq);
    const double h = x_[k + 1] - x_[k];
    const double s = (xq - x_[k]) / h;
    return cubic(k, s, h);
  }

  double derivative(double xq) const {
    const std::size_t k = interval_of(x_, xq);
    const double h = x_[k + 1] - x_[k];
    const double s = (xq - x_[k]) / h;
    return cubic_slope(k, s, h);
  }

  /// x such that value(x) = yq, by safeguarded Newton on the bracketing interval.
  double inverse(double yq) const {
    if (yq <= y_.front()) return x_.front();
    if (yq >= y_.back()) return x_.back();
    const std::size_t k = interval_of(y_, yq);
    const double h = x_[k + 1] - x_[k];
    double lo = 0.0, hi = 1.0;
    double s = (yq - y_[k]) / (y_[k + 1] - y_[k]);
    for (int it = 0; it < 100; ++it) {
      const double f = cubic(k, s, h) - yq;
      if (f == 0.0) break;
      if (f > 0.0) hi = s; else lo = s;
      const double df = cubic_slope(k, s, h) * h;
      double next = df > 0.0 ? s - f / df : 0.5 * (lo + hi);
      if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
      if (std::abs(next - s) < 1e-16) {
        s = next;
        break;
      }
      s = next;
    }
    return x_[k] + s * h;
  }

 private:
  static std::size_t interval_of(const std::vector<double>& grid, double q) {
    if (q <= grid.front()) return 0;
    if (q >= grid.back()) return grid.size() - 2;
    const auto it = std::upper_bound(grid.begin(), grid.end(), q);
    return static_cast<std::size_t>(it - grid.begin()) - 1;
  }

  double cubic(std::size_t k, double s, double h) const {
    const double s2 = s * s, s3 = s2 * s;
    return (2 * s3 - 3 * s2 + 1) * y_[k] + (s3 - 2 * s2 + s) * h * m_[k] +
           (-2 * s3 + 3 * s2) * y_[k + 1] + (s3 - s2) * h * m_[k + 1];
  }

  double cubic_slope(std::size_t k, double s, double h) const {
    const double s2 = s * s;
    return ((6 * s2 - 6 * s) * y_[k] + (-6 * s2 + 6 * s) * y_[k + 1]) / h +
           (3 * s2 - 4 * s + 1) * m_[k] + (3 * s2 - 2 * s) * m_[k + 1];
  }

  std::vector<double> x_, y_, m_;
};

}  // namespace difflab
