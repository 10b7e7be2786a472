// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "difflab/monotone.hpp"
#include "difflab/rng.hpp"

namespace difflab {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using Tokens = std::vector<int>;

inline constexpr std::size_t kEnumerationCap = 65536;

/// Raised when an estimate or integration turns non-finite or inconsistent.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Scalar helpers on the log-SNR coordinate.

/// sigmoid(-g), computed without overflow.
inline double alpha2_of(double g) {
  return g >= 0.0 ? std::exp(-g) / (1.0 + std::exp(-g)) : 1.0 / (1.0 + std::exp(g));
}
/// sigmoid(g).
inline double sigma2_of(double g) { return alpha2_of(-g); }
inline double log_sigma2_of(double g) { return g >= 0.0 ? -std::log1p(std::exp(-g)) : g - std::log1p(std::exp(g)); }

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double softplus_inverse(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }
inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// ---------------------------------------------------------------------------

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> labels) : labels_(std::move(labels)) { validate(); }

  static Vocabulary numbered(int size) {
    std::vector<std::string> labels;
    for (int v = 0; v < size; ++v) labels.push_back("t" + std::to_string(v));
    return Vocabulary(std::move(labels));
  }

  int size() const { return static_cast<int>(labels_.size()); }
  const std::vector<std::string>& labels() const { return labels_; }

  void validate() const {
    if (labels_.size() < 2) throw std::invalid_argument("vocabulary needs at least two tokens");
    std::set<std::string> seen(labels_.begin(), labels_.end());
    if (seen.size() != labels_.size()) throw std::invalid_argument("vocabulary labels must be distinct");
  }

 private:
  std::vector<std::string> labels_;
};

class EmbeddingTable {
 public:
  EmbeddingTable() = default;

  /// Wraps an existing matrix; rows must already be unit length and distinct.
  explicit EmbeddingTable(Mat table) : table_(std::move(table)) { validate(); }

  /// Standard-normal rows projected to the unit sphere, reseeding on collapse.
  static EmbeddingTable random(int vocab, int dim, std::uint64_t seed, int max_attempts = 64) {
    if (vocab < 2 || dim < 1) throw std::invalid_argument("embedding table needs V >= 2 and d_e >= 1");
    for (int attempt = 0; attempt < max_attempts; ++attempt) {
      Stream rng(seed, "embedding", static_cast<std::uint64_t>(attempt));
      Mat table(vocab, dim);
      for (int v = 0; v < vocab; ++v) {
        double norm2 = 0.0;
        do {
          for (int k = 0; k < dim; ++k) table(v, k) = rng.normal();
          norm2 = table.row(v).squaredNorm();
        } while (norm2 < 1e-300);
        table.row(v) /= std::sqrt(norm2);
      }
      if (min_pairwise_distance(table) > kCollapseThreshold) return EmbeddingTable(std::move(table));
    }
    throw std::runtime_error("embedding collapse after retries; d_e is too small for this vocabulary");
  }

  /// Rows rescaled to unit length; used after gradient updates.
  static Mat project_rows(Mat table) {
    for (Eigen::Index v = 0; v < table.rows(); ++v) table.row(v).normalize();
    return table;
  }

  static double min_pairwise_distance(const Mat& table) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index a = 0; a < table.rows(); ++a)
      for (Eigen::Index b = a + 1; b < table.rows(); ++b)
        best = std::min(best, (table.row(a) - table.row(b)).norm());
    return best;
  }

  int vocab() const { return static_cast<int>(table_.rows()); }
  int dim() const { return static_cast<int>(table_.cols()); }
  const Mat& matrix() const { return table_; }

  void validate() const {
    if (table_.rows() < 2 || table_.cols() < 1) throw std::invalid_argument("embedding table is too small");
    for (Eigen::Index v = 0; v < table_.rows(); ++v)
      if (std::abs(table_.row(v).norm() - 1.0) > 1e-9)
        throw std::invalid_argument("embedding row " + std::to_string(v) + " is not unit length");
    if (!(min_pairwise_distance(table_) > kCollapseThreshold))
      throw std::invalid_argument("embedding rows collapse");
  }

  static constexpr double kCollapseThreshold = 1e-6;

 private:
  Mat table_;
};

/// Embedding of a token sequence as an L x d_e matrix.
inline Mat embed(std::span<const int> tokens, const Mat& table) {
  Mat e(static_cast<Eigen::Index>(tokens.size()), table.cols());
  for (std::size_t l = 0; l < tokens.size(); ++l) e.row(static_cast<Eigen::Index>(l)) = table.row(tokens[l]);
  return e;
}

// ---------------------------------------------------------------------------

enum class DataKind { joint, factorized };

/// Exact categorical distribution over length-L sequences.
///
/// Joint tables index sequences in base V with the first position most
/// significant.
class DataDistribution {
 public:
  DataDistribution() = default;

  static DataDistribution joint(int vocab, int length, std::vector<double> table) {
    DataDistribution d;
    d.kind_ = DataKind::joint;
    d.vocab_ = vocab;
    d.length_ = length;
    if (count_states(vocab, length) > kEnumerationCap)
      throw std::invalid_argument("joint table exceeds the enumeration cap");
    if (table.size() != count_states(vocab, length)) throw std::invalid_argument("joint table has the wrong size");
    d.joint_ = std::move(table);
    d.validate();
    d.build_cdf();
    return d;
  }

  static DataDistribution factorized(int vocab, std::vector<std::vector<double>> marginals) {
    DataDistribution d;
    d.kind_ = DataKind::factorized;
    d.vocab_ = vocab;
    d.length_ = static_cast<int>(marginals.size());
    d.marginals_ = std::move(marginals);
    d.validate();
    d.build_cdf();
    return d;
  }

  DataKind kind() const { return kind_; }
  int vocab() const { return vocab_; }
  int length() const { return length_; }

  static std::size_t count_states(int vocab, int length) {
    double n = std::pow(static_cast<double>(vocab), length);
    if (n > 1e18) return std::numeric_limits<std::size_t>::max();
    return static_cast<std::size_t>(std::llround(n));
  }
  std::size_t num_states() const { return count_states(vocab_, length_); }
  bool enumerable() const { return num_states() <= kEnumerationCap; }

  Tokens decode(std::size_t index) const {
    Tokens x(static_cast<std::size_t>(length_));
    for (int l = length_ - 1; l >= 0; --l) {
      x[static_cast<std::size_t>(l)] = static_cast<int>(index % static_cast<std::size_t>(vocab_));
      index /= static_cast<std::size_t>(vocab_);
    }
    return x;
  }

  std::size_t encode(std::span<const int> x) const {
    std::size_t index = 0;
    for (int v : x) index = index * static_cast<std::size_t>(vocab_) + static_cast<std::size_t>(v);
    return index;
  }

  double prob(std::span<const int> x) const {
    if (kind_ == DataKind::joint) return joint_[encode(x)];
    double p = 1.0;
    for (int l = 0; l < length_; ++l) p *= marginals_[static_cast<std::size_t>(l)][static_cast<std::size_t>(x[static_cast<std::size_t>(l)])];
    return p;
  }

  /// Full joint table; factorized distributions are expanded (cap applies).
  std::vector<double> joint_table() const {
    if (kind_ == DataKind::joint) return joint_;
    if (!enumerable()) throw std::invalid_argument("joint expansion exceeds the enumeration cap");
    std::vector<double> table(num_states());
    for (std::size_t k = 0; k < table.size(); ++k) table[k] = prob(decode(k));
    return table;
  }

  std::vector<double> marginal(int position) const {
    if (kind_ == DataKind::factorized) return marginals_[static_cast<std::size_t>(position)];
    std::vector<double> m(static_cast<std::size_t>(vocab_), 0.0);
    for (std::size_t k = 0; k < joint_.size(); ++k) m[static_cast<std::size_t>(decode(k)[static_cast<std::size_t>(position)])] += joint_[k];
    return m;
  }

  const std::vector<std::vector<double>>& factor_tables() const { return marginals_; }

  Tokens sample(Stream& rng) const {
    if (kind_ == DataKind::joint) return decode(rng.categorical_cdf(cdf_[0]));
    Tokens x(static_cast<std::size_t>(length_));
    for (int l = 0; l < length_; ++l) x[static_cast<std::size_t>(l)] = static_cast<int>(rng.categorical_cdf(cdf_[static_cast<std::size_t>(l)]));
    return x;
  }

  void validate() const {
    if (vocab_ < 2 || length_ < 1) throw std::invalid_argument("distribution needs V >= 2 and L >= 1");
    auto check = [](const std::vector<double>& p, std::size_t n) {
      if (p.size() != n) throw std::invalid_argument("probability table has the wrong size");
      double total = 0.0;
      for (double v : p) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("probabilities must be finite and nonnegative");
        total += v;
      }
      if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("probability table does not sum to one");
    };
    if (kind_ == DataKind::joint) check(joint_, num_states());
    else for (const auto& m : marginals_) check(m, static_cast<std::size_t>(vocab_));
  }

 private:
  void build_cdf() {
    auto cumulative = [](const std::vector<double>& p) {
      std::vector<double> c(p.size());
      std::partial_sum(p.begin(), p.end(), c.begin());
      return c;
    };
    cdf_.clear();
    if (kind_ == DataKind::joint) cdf_.push_back(cumulative(joint_));
    else for (const auto& m : marginals_) cdf_.push_back(cumulative(m));
  }

  DataKind kind_ = DataKind::factorized;
  int vocab_ = 0;
  int length_ = 0;
  std::vector<double> joint_;
  std::vector<std::vector<double>> marginals_;
  std::vector<std::vector<double>> cdf_;
};

inline double entropy_of(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

inline double data_entropy(const DataDistribution& d) {
  if (d.kind() == DataKind::factorized) {
    double h = 0.0;
    for (const auto& m : d.factor_tables()) h += entropy_of(m);
    return h;
  }
  const auto table = d.joint_table();
  return entropy_of(table);
}

/// Sum of per-position entropies minus the joint entropy.
inline double total_correlation(const DataDistribution& d) {
  if (d.kind() == DataKind::factorized) return 0.0;
  double sum = 0.0;
  for (int l = 0; l < d.length(); ++l) sum += entropy_of(d.marginal(l));
  return std::max(0.0, sum - data_entropy(d));
}

// ---------------------------------------------------------------------------
// Interior shapes of the noise schedule, all mapping [0,1] onto [0,1].

struct LinearShape {
  double value(double t) const { return t; }
  double derivative(double) const { return 1.0; }
  double inverse(double u) const { return u; }
  bool smooth() const { return true; }
};

/// Piecewise-linear shape whose K knots sit at equally spaced shape values
/// u = k/K; the parameters set the time each knot is reached.
///
/// Time increments are softplus(raw_k) normalized to sum one, so every slope
/// stays strictly positive for any raw parameter vector. Placing knots in u
/// lets a few segments absorb the near-vertical ends of optimal shapes.
class PiecewiseLinearShape {
 public:
  PiecewiseLinearShape() : PiecewiseLinearShape(std::vector<double>(1, 0.0)) {}
  explicit PiecewiseLinearShape(std::vector<double> raw) : raw_(std::move(raw)) {
    if (raw_.empty()) throw std::invalid_argument("piecewise shape needs at least one segment");
    rebuild();
  }

  /// Raw parameters whose knots lie on a strictly increasing map t -> u.
  static PiecewiseLinearShape fit(int segments, const std::function<double(double)>& target) {
    std::vector<double> t(static_cast<std::size_t>(segments) + 1, 0.0);
    t.back() = 1.0;
    for (int k = 1; k < segments; ++k) {
      const double u = static_cast<double>(k) / segments;
      double lo = 0.0, hi = 1.0;
      for (int it = 0; it < 200 && hi - lo > 1e-15; ++it) {
        const double mid = 0.5 * (lo + hi);
        (target(mid) < u ? lo : hi) = mid;
      }
      t[static_cast<std::size_t>(k)] = 0.5 * (lo + hi);
    }
    std::vector<double> raw(static_cast<std::size_t>(segments));
    for (std::size_t k = 0; k < raw.size(); ++k) {
      const double inc = std::max(t[k + 1] - t[k], 1e-30);
      raw[k] = std::max(softplus_inverse(inc * segments), -50.0);
    }
    return PiecewiseLinearShape(std::move(raw));
  }

  int segments() const { return static_cast<int>(raw_.size()); }
  const std::vector<double>& raw() const { return raw_; }
  /// Times at which u = k/K is reached.
  const std::vector<double>& knots() const { return cum_; }
  const std::vector<double>& increments() const { return inc_; }

  std::size_t segment_of(double t) const {
    const auto it = std::upper_bound(cum_.begin(), cum_.end(), t);
    const std::ptrdiff_t k = it - cum_.begin() - 1;
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(k, 0, segments() - 1));
  }

  double value(double t) const {
    const std::size_t k = segment_of(t);
    const double frac = std::clamp((t - cum_[k]) / inc_[k], 0.0, 1.0);
    return (static_cast<double>(k) + frac) / segments();
  }
  double derivative(double t) const { return 1.0 / (inc_[segment_of(t)] * segments()); }
  double inverse(double u) const {
    const std::size_t k = segment_of_value(u);
    return cum_[k] + (u * segments() - static_cast<double>(k)) * inc_[k];
  }
  bool smooth() const { return false; }

  std::size_t segment_of_value(double u) const {
    return static_cast<std::size_t>(std::clamp(static_cast<int>(std::floor(u * segments())), 0, segments() - 1));
  }

  /// d log slope / d raw_j on segment k. At fixed shape value this is the
  /// whole parameter dependence of the slope.
  void log_slope_gradient(std::size_t k, std::span<double> out) const {
    for (std::size_t j = 0; j < raw_.size(); ++j) {
      // d inc_k / d raw_j = (delta_kj - inc_k) * logistic(raw_j) / total
      const double dsp = logistic(raw_[j]) / total_;
      out[j] = -(((j == k) ? dsp : 0.0) - inc_[k] * dsp) / inc_[k];
    }
  }

 private:
  void rebuild() {
    inc_.resize(raw_.size());
    total_ = 0.0;
    for (std::size_t k = 0; k < raw_.size(); ++k) {
      inc_[k] = softplus(raw_[k]);
      total_ += inc_[k];
    }
    for (double& v : inc_) v /= total_;
    cum_.assign(raw_.size() + 1, 0.0);
    for (std::size_t k = 0; k < raw_.size(); ++k) cum_[k + 1] = cum_[k] + inc_[k];
    cum_.back() = 1.0;
  }

  std::vector<double> raw_;
  std::vector<double> inc_;
  std::vector<double> cum_;
  double total_ = 1.0;
};

/// Tabulated shape stored as the monotone cubic t(u) of u = shape value.
///
/// The table is inverted on demand; derivatives come from the interpolant.
class TabulatedShape {
 public:
  TabulatedShape() : curve_({0.0, 1.0}, {0.0, 1.0}, {1.0, 1.0}) {}
  explicit TabulatedShape(MonotoneHermite t_of_u) : curve_(std::move(t_of_u)) {
    if (std::abs(curve_.x_min()) > 1e-12 || std::abs(curve_.x_max() - 1.0) > 1e-12 ||
        std::abs(curve_.values().front()) > 1e-12 || std::abs(curve_.values().back() - 1.0) > 1e-12)
      throw std::invalid_argument("tabulated shape must map [0,1] onto [0,1]");
  }

  /// From (t, shape value) pairs with a Fritsch-Carlson interpolant.
  static TabulatedShape from_pairs(std::vector<double> t, std::vector<double> u) {
    return TabulatedShape(MonotoneHermite::fritsch_carlson(std::move(u), std::move(t)));
  }

  /// Tabulates an analytic increasing map on n equally spaced t values.
  static TabulatedShape from_function(const std::function<double(double)>& shape, int n = 1024) {
    std::vector<double> t(static_cast<std::size_t>(n)), u(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
      t[static_cast<std::size_t>(k)] = static_cast<double>(k) / (n - 1);
      u[static_cast<std::size_t>(k)] = shape(t[static_cast<std::size_t>(k)]);
    }
    u.front() = 0.0;
    u.back() = 1.0;
    return from_pairs(std::move(t), std::move(u));
  }

  double value(double t) const { return curve_.inverse(t); }
  double derivative(double t) const { return 1.0 / curve_.derivative(value(t)); }
  double inverse(double u) const { return curve_.value(u); }
  bool smooth() const { return true; }
  const MonotoneHermite& curve() const { return curve_; }

 private:
  MonotoneHermite curve_;
};

using Shape = std::variant<LinearShape, PiecewiseLinearShape, TabulatedShape>;

struct ScheduleEval {
  double t = 0.0;
  double gamma = 0.0;
  double dgamma = 0.0;
  double alpha = 0.0;
  double sigma = 0.0;
  double alpha2 = 0.0;
  double sigma2 = 0.0;
  double snr = 0.0;
  double dsnr = 0.0;
};

inline ScheduleEval eval_gamma(double gamma, double dgamma = 0.0) {
  ScheduleEval e;
  e.gamma = gamma;
  e.dgamma = dgamma;
  e.alpha2 = alpha2_of(gamma);
  e.sigma2 = sigma2_of(gamma);
  e.alpha = std::sqrt(e.alpha2);
  e.sigma = std::sqrt(e.sigma2);
  e.snr = std::exp(-gamma);
  e.dsnr = -dgamma * e.snr;
  return e;
}

/// gamma(t) = gamma0 + (gamma1 - gamma0) * shape(t) on t in [0,1].
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  NoiseSchedule(double gamma0, double gamma1, Shape shape = LinearShape{})
      : gamma0_(gamma0), gamma1_(gamma1), shape_(std::move(shape)) {
    if (!(gamma0 < gamma1)) throw std::invalid_argument("schedule endpoints need gamma0 < gamma1");
  }

  double gamma0() const { return gamma0_; }
  double gamma1() const { return gamma1_; }
  double span_width() const { return gamma1_ - gamma0_; }
  const Shape& shape() const { return shape_; }

  double shape_value(double t) const {
    check(t);
    return std::visit([t](const auto& s) { return s.value(t); }, shape_);
  }
  double shape_derivative(double t) const {
    check(t);
    return std::visit([t](const auto& s) { return s.derivative(t); }, shape_);
  }
  bool smooth() const {
    return std::visit([](const auto& s) { return s.smooth(); }, shape_);
  }

  double gamma(double t) const { return gamma0_ + span_width() * shape_value(t); }
  double dgamma(double t) const { return span_width() * shape_derivative(t); }

  /// Time at which the schedule reaches log-SNR coordinate g.
  double t_of_gamma(double g) const {
    const double u = std::clamp((g - gamma0_) / span_width(), 0.0, 1.0);
    return std::visit([u](const auto& s) { return s.inverse(u); }, shape_);
  }

  ScheduleEval eval(double t) const {
    ScheduleEval e = eval_gamma(gamma(t), dgamma(t));
    e.t = t;
    return e;
  }

  NoiseSchedule with_shape(Shape shape) const { return NoiseSchedule(gamma0_, gamma1_, std::move(shape)); }
  NoiseSchedule with_endpoints(double g0, double g1) const { return NoiseSchedule(g0, g1, shape_); }

 private:
  static void check(double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::out_of_range("schedule time must lie in [0,1]");
  }

  double gamma0_ = -6.0;
  double gamma1_ = 6.0;
  Shape shape_ = LinearShape{};
};

// ---------------------------------------------------------------------------

/// Everything an experiment needs: vocabulary, embeddings, data and schedule.
struct Instance {
  std::string name = "instance";
  Vocabulary vocab;
  EmbeddingTable embeddings;
  DataDistribution data;
  NoiseSchedule schedule;
  std::uint64_t seed = 0;

  int V() const { return vocab.size(); }
  int L() const { return data.length(); }
  int dim() const { return embeddings.dim(); }
  const Mat& E() const { return embeddings.matrix(); }

  void validate() const {
    vocab.validate();
    embeddings.validate();
    data.validate();
    if (embeddings.vocab() != vocab.size() || data.vocab() != vocab.size())
      throw std::invalid_argument("instance parts disagree on the vocabulary size");
  }
};

namespace detail {

/// Base token profile proportional to V, V-1, ..., 1.
inline std::vector<double> decreasing_profile(int vocab) {
  std::vector<double> p(static_cast<std::size_t>(vocab));
  double total = 0.0;
  for (int v = 0; v < vocab; ++v) total += p[static_cast<std::size_t>(v)] = vocab - v;
  for (double& x : p) x /= total;
  return p;
}

inline std::vector<double> normalized(std::vector<double> p) {
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  for (double& x : p) x /= total;
  return p;
}

}  // namespace detail

/// Markov copy chain: x^1 from a base profile, then each position repeats its
/// predecessor with probability `stickiness` or redraws from the base.
inline DataDistribution copy_chain(int vocab, int length, double stickiness) {
  const auto base = detail::decreasing_profile(vocab);
  const std::size_t n = DataDistribution::count_states(vocab, length);
  std::vector<double> table(n);
  DataDistribution shape = DataDistribution::factorized(vocab, std::vector<std::vector<double>>(static_cast<std::size_t>(length), base));
  for (std::size_t k = 0; k < n; ++k) {
    const Tokens x = shape.decode(k);
    double p = base[static_cast<std::size_t>(x[0])];
    for (std::size_t l = 1; l < x.size(); ++l)
      p *= (1.0 - stickiness) * base[static_cast<std::size_t>(x[l])] + (x[l] == x[l - 1] ? stickiness : 0.0);
    table[k] = p;
  }
  return DataDistribution::joint(vocab, length, detail::normalized(std::move(table)));
}

/// Desk-scale instance: V=6, L=3, d_e=4, correlated or factorized data.
inline Instance desk_instance(std::uint64_t seed = 0, DataKind kind = DataKind::joint,
                              double gamma0 = -6.0, double gamma1 = 6.0) {
  Instance inst;
  inst.seed = seed;
  inst.vocab = Vocabulary::numbered(6);
  inst.embeddings = EmbeddingTable::random(6, 4, seed);
  if (kind == DataKind::joint) {
    inst.name = "desk-joint";
    inst.data = copy_chain(6, 3, 0.6);
  } else {
    inst.name = "desk-factorized";
    inst.data = DataDistribution::factorized(
        6, {detail::normalized({6, 5, 4, 3, 2, 1}), detail::normalized({1, 1, 4, 4, 2, 2}),
            detail::normalized({1, 2, 3, 4, 5, 6})});
  }
  inst.schedule = NoiseSchedule(gamma0, gamma1);
  inst.validate();
  return inst;
}

/// One token position, two tokens embedded at +1 and -1.
inline Instance tiny_instance(double p_first = 0.35, double gamma0 = -6.0, double gamma1 = 6.0) {
  Instance inst;
  inst.name = "tiny";
  inst.vocab = Vocabulary::numbered(2);
  Mat table(2, 1);
  table << 1.0, -1.0;
  inst.embeddings = EmbeddingTable(table);
  inst.data = DataDistribution::factorized(2, {{p_first, 1.0 - p_first}});
  inst.schedule = NoiseSchedule(gamma0, gamma1);
  inst.validate();
  return inst;
}

/// Two positions over two tokens with x^2 = x^1 with probability `agreement`.
inline Instance pair_instance(double agreement = 0.9, std::uint64_t seed = 0) {
  Instance inst;
  inst.name = "pair";
  inst.seed = seed;
  inst.vocab = Vocabulary::numbered(2);
  Mat table(2, 2);
  table << 1.0, 0.0, 0.0, 1.0;
  inst.embeddings = EmbeddingTable(table);
  const double a = 0.5 * agreement, b = 0.5 * (1.0 - agreement);
  inst.data = DataDistribution::joint(2, 2, {a, b, b, a});
  inst.schedule = NoiseSchedule(-6.0, 6.0);
  inst.validate();
  return inst;
}

}  // namespace difflab
