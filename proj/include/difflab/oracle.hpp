// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "difflab/core.hpp"
#include "difflab/denoiser.hpp"
#include "difflab/mc.hpp"
#include "difflab/noising.hpp"

namespace difflab {

/// Posterior entropies of one latent: joint and per position.
struct PosteriorEntropy {
  double joint = 0.0;
  std::vector<double> per_position;
  double position_sum() const {
    double s = 0.0;
    for (double h : per_position) s += h;
    return s;
  }
};

/// Exact posterior over sequences by enumeration.
///
/// Rows are the per-position marginals q(x^l | z) of the joint posterior
/// p(x | z) proportional to q_data(x) exp(-|z - alpha xE|^2 / (2 sigma^2)).
/// Factorized data takes a per-position path.
class BayesDenoiser final : public Denoiser {
 public:
  explicit BayesDenoiser(const Instance& inst) : BayesDenoiser(inst.E(), inst.data) {}

  BayesDenoiser(Mat table, const DataDistribution& data)
      : table_(std::move(table)), data_(data), vocab_(data.vocab()), length_(data.length()) {
    if (table_.rows() != vocab_) throw std::invalid_argument("embedding table does not match the vocabulary");
    norms2_.resize(static_cast<std::size_t>(vocab_));
    for (int v = 0; v < vocab_; ++v) norms2_[static_cast<std::size_t>(v)] = table_.row(v).squaredNorm();
    if (data.kind() == DataKind::factorized) {
      log_marginals_.resize(static_cast<std::size_t>(length_) * static_cast<std::size_t>(vocab_));
      for (int l = 0; l < length_; ++l)
        for (int v = 0; v < vocab_; ++v) {
          const double p = data.factor_tables()[static_cast<std::size_t>(l)][static_cast<std::size_t>(v)];
          log_marginals_[index(l, v)] = p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
        }
    } else {
      if (!data.enumerable()) throw std::invalid_argument("joint posterior exceeds the enumeration cap");
      const auto table_q = data.joint_table();
      dense_prior_ = table_q;
      for (std::size_t k = 0; k < table_q.size(); ++k) {
        if (table_q[k] <= 0.0) continue;
        prior_.push_back(table_q[k]);
        log_prior_.push_back(std::log(table_q[k]));
        const Tokens x = data.decode(k);
        for (int v : x) states_.push_back(v);
      }
    }
  }

  int vocab() const override { return vocab_; }
  int length() const override { return length_; }
  const Mat& embeddings() const override { return table_; }
  const DataDistribution& data() const { return data_; }

  void evaluate(const Mat& z, double gamma, const Mat*, DenoiserOutput& out) const override {
    out.resize(length_, vocab_, table_.cols());
    auto& score = out.scratch;
    scores(z, gamma, score);
    if (data_.kind() == DataKind::factorized) {
      for (int l = 0; l < length_; ++l) {
        double m = -std::numeric_limits<double>::infinity();
        for (int v = 0; v < vocab_; ++v) m = std::max(m, score[index(l, v)] + log_marginals_[index(l, v)]);
        double total = 0.0;
        for (int v = 0; v < vocab_; ++v) total += out.rows(l, v) = std::exp(score[index(l, v)] + log_marginals_[index(l, v)] - m);
        out.rows.row(l) /= total;
      }
    } else {
      joint_rows(score, out.rows);
    }
    predicted_embedding(out.rows, table_, out.e_hat);
  }

  /// Joint posterior over all V^L sequences (zero where q_data vanishes).
  std::vector<double> joint_posterior(const Mat& z, double gamma) const {
    std::vector<double> score;
    scores(z, gamma, score);
    const std::size_t n = data_.num_states();
    if (n > kEnumerationCap) throw std::invalid_argument("joint posterior exceeds the enumeration cap");
    std::vector<double> logw(n, -std::numeric_limits<double>::infinity());
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) {
      const Tokens x = data_.decode(k);
      const double q = data_.prob(x);
      if (q <= 0.0) continue;
      double s = std::log(q);
      for (int l = 0; l < length_; ++l) s += score[index(l, x[static_cast<std::size_t>(l)])];
      logw[k] = s;
      m = std::max(m, s);
    }
    double total = 0.0;
    std::vector<double> p(n, 0.0);
    for (std::size_t k = 0; k < n; ++k)
      if (std::isfinite(logw[k])) total += p[k] = std::exp(logw[k] - m);
    for (double& v : p) v /= total;
    return p;
  }

  /// Joint and per-position posterior entropies, plus the rows.
  PosteriorEntropy posterior_entropy(const Mat& z, double gamma, DenoiserOutput& out) const {
    evaluate(z, gamma, nullptr, out);
    PosteriorEntropy h;
    h.per_position.resize(static_cast<std::size_t>(length_));
    for (int l = 0; l < length_; ++l) {
      double s = 0.0;
      for (int v = 0; v < vocab_; ++v) {
        const double p = out.rows(l, v);
        if (p > 0.0) s -= p * std::log(p);
      }
      h.per_position[static_cast<std::size_t>(l)] = s;
    }
    if (data_.kind() == DataKind::factorized) {
      h.joint = h.position_sum();
      return h;
    }
    const auto& score = out.scratch;
    const std::size_t n = prior_.size();
    std::vector<double> logw(n);
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) {
      const int* x = &states_[k * static_cast<std::size_t>(length_)];
      double s = log_prior_[k];
      for (int l = 0; l < length_; ++l) s += score[index(l, x[l])];
      logw[k] = s;
      m = std::max(m, s);
    }
    double total = 0.0, weighted = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double w = std::exp(logw[k] - m);
      total += w;
      weighted += w * (logw[k] - m);
    }
    h.joint = std::max(0.0, std::log(total) - weighted / total);
    return h;
  }

 private:
  std::size_t index(int l, int v) const { return static_cast<std::size_t>(l) * static_cast<std::size_t>(vocab_) + static_cast<std::size_t>(v); }

  /// score[l, v] = (alpha <z_l, e_v> - alpha^2 |e_v|^2 / 2) / sigma^2
  void scores(const Mat& z, double gamma, std::vector<double>& score) const {
    const double a2 = alpha2_of(gamma), s2 = sigma2_of(gamma), a = std::sqrt(a2);
    score.resize(static_cast<std::size_t>(length_) * static_cast<std::size_t>(vocab_));
    const Eigen::Index d = table_.cols();
    for (int l = 0; l < length_; ++l) {
      const double* zl = z.data() + l * d;
      for (int v = 0; v < vocab_; ++v) {
        const double* ev = table_.data() + v * d;
        double dot = 0.0;
        for (Eigen::Index k = 0; k < d; ++k) dot += zl[k] * ev[k];
        score[index(l, v)] = (a * dot - 0.5 * a2 * norms2_[static_cast<std::size_t>(v)]) / s2;
      }
    }
  }

  void joint_rows(const std::vector<double>& score, Mat& rows) const {
    const std::size_t lv = score.size();
    thread_local std::vector<double> factor;
    factor.resize(lv);
    for (int l = 0; l < length_; ++l) {
      double m = -std::numeric_limits<double>::infinity();
      for (int v = 0; v < vocab_; ++v) m = std::max(m, score[index(l, v)]);
      for (int v = 0; v < vocab_; ++v) factor[index(l, v)] = std::exp(score[index(l, v)] - m);
    }
    // Sequence weights by prefix products over positions, in table order.
    thread_local std::vector<double> weight, next;
    const std::size_t V = static_cast<std::size_t>(vocab_);
    weight.assign(factor.begin(), factor.begin() + vocab_);
    for (int l = 1; l < length_; ++l) {
      next.resize(weight.size() * V);
      const double* f = &factor[index(l, 0)];
      for (std::size_t p = 0; p < weight.size(); ++p) {
        const double wp = weight[p];
        double* dst = &next[p * V];
        for (std::size_t v = 0; v < V; ++v) dst[v] = wp * f[v];
      }
      weight.swap(next);
    }
    const std::size_t n = weight.size();
    double total = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      weight[k] *= dense_prior_[k];
      total += weight[k];
    }
    // Marginal of position l: index splits as (prefix, v, suffix).
    std::size_t suffix = n;
    std::size_t prefix = 1;
    for (int l = 0; l < length_; ++l) {
      suffix /= V;
      double* out = rows.data() + static_cast<std::size_t>(l) * V;
      for (std::size_t v = 0; v < V; ++v) out[v] = 0.0;
      if (suffix == 1) {
        for (std::size_t p = 0; p < prefix; ++p)
          for (std::size_t v = 0; v < V; ++v) out[v] += weight[p * V + v];
      } else {
        for (std::size_t p = 0; p < prefix; ++p)
          for (std::size_t v = 0; v < V; ++v) {
            const double* block = &weight[(p * V + v) * suffix];
            double acc = 0.0;
            for (std::size_t s = 0; s < suffix; ++s) acc += block[s];
            out[v] += acc;
          }
      }
      prefix *= V;
    }
    if (total > 1e-250 && std::isfinite(total)) {
      rows /= total;
      return;
    }
    // Product underflow: redo in log space.
    const std::size_t states = prior_.size();
    std::vector<double> logw(states);
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < states; ++k) {
      const int* x = &states_[k * static_cast<std::size_t>(length_)];
      double s = log_prior_[k];
      for (int l = 0; l < length_; ++l) s += score[index(l, x[l])];
      logw[k] = s;
      m = std::max(m, s);
    }
    rows.setZero();
    total = 0.0;
    for (std::size_t k = 0; k < states; ++k) {
      const int* x = &states_[k * static_cast<std::size_t>(length_)];
      const double w = std::exp(logw[k] - m);
      total += w;
      for (int l = 0; l < length_; ++l) rows(l, x[l]) += w;
    }
    rows /= total;
  }

  Mat table_;
  DataDistribution data_;
  int vocab_;
  int length_;
  std::vector<double> norms2_;
  std::vector<double> log_marginals_;
  std::vector<double> dense_prior_;
  std::vector<double> prior_;
  std::vector<double> log_prior_;
  std::vector<int> states_;
};

/// How a draw measures the denoising error.
///
/// `posterior_variance` replaces |e_hat - e|^2 by its conditional mean given
/// z, the spread of the posterior rows. The two agree in expectation only
/// for the Bayes denoiser, which is the only model it accepts.
enum class ErrorEstimator { squared_error, posterior_variance };

/// Per-draw error of a denoiser at log-SNR g.
inline double squared_error_at(const Denoiser& model, std::span<const int> x, const Mat& e, const Mat& eps, double g,
                               DenoiserOutput& out, Mat& z, ErrorEstimator est = ErrorEstimator::squared_error) {
  const double a = std::sqrt(alpha2_of(g)), s = std::sqrt(sigma2_of(g));
  z = a * e + s * eps;
  denoise(model, z, g, out);
  if (est == ErrorEstimator::posterior_variance) return posterior_spread(out.rows, model.embeddings());
  return embedding_error(out.rows, model.embeddings(), x);
}

inline void check_estimator(const Denoiser& model, ErrorEstimator est) {
  if (est == ErrorEstimator::posterior_variance && !dynamic_cast<const BayesDenoiser*>(&model))
    throw std::invalid_argument("the posterior-variance estimator needs the Bayes denoiser");
}

/// Monte-Carlo mean of |e - E[e | z]|^2 at log-SNR coordinate g.
///
/// Draw j uses Stream(seed, tag, j) for x then eps, so calls with the same
/// plan share draws across g.
inline Estimate mse_at_gamma(const Denoiser& model, const DataDistribution& data, double g, const McPlan& plan,
                             ErrorEstimator est = ErrorEstimator::squared_error) {
  check_estimator(model, est);
  return mc_mean(plan, [&](std::size_t, Stream& rng) {
    const Tokens x = data.sample(rng);
    const Mat e = embed(x, model.embeddings());
    const Mat eps = standard_normal(e.rows(), e.cols(), rng);
    DenoiserOutput out;
    Mat z;
    return squared_error_at(model, x, e, eps, g, out, z, est);
  });
}

inline Estimate mmse_at_gamma(const Instance& inst, double g, const McPlan& plan) {
  BayesDenoiser oracle(inst);
  return mse_at_gamma(oracle, inst.data, g, plan);
}

/// MMSE at SNR nu.
inline Estimate mmse_at_snr(const Instance& inst, double nu, const McPlan& plan) {
  if (!(nu > 0.0)) throw std::invalid_argument("snr must be positive");
  return mmse_at_gamma(inst, -std::log(nu), plan);
}

inline Estimate mmse(const Instance& inst, const NoiseSchedule& sched, double t, const McPlan& plan) {
  return mmse_at_gamma(inst, sched.gamma(t), plan);
}

/// E|e - E[e]|^2: the MMSE in the pure-noise limit.
inline double prior_embedding_variance(const Instance& inst) {
  double total = 0.0;
  for (int l = 0; l < inst.L(); ++l) {
    const auto p = inst.data.marginal(l);
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(inst.dim());
    double second = 0.0;
    for (int v = 0; v < inst.V(); ++v) {
      mean += p[static_cast<std::size_t>(v)] * inst.E().row(v);
      second += p[static_cast<std::size_t>(v)] * inst.E().row(v).squaredNorm();
    }
    total += second - mean.squaredNorm();
  }
  return total;
}

}  // namespace difflab
