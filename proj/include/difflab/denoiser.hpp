// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "difflab/core.hpp"

namespace difflab {

/// Per-position simplex rows and the embedding they predict.
struct DenoiserOutput {
  Mat rows;   // L x V
  Mat e_hat;  // L x d_e, rows * E
  std::vector<double> scratch;

  void resize(Eigen::Index length, Eigen::Index vocab, Eigen::Index dim) {
    if (rows.rows() != length || rows.cols() != vocab) rows.resize(length, vocab);
    if (e_hat.rows() != length || e_hat.cols() != dim) e_hat.resize(length, dim);
  }
};

/// Time-conditioned denoiser x_theta(z, gamma, x_sc).
///
/// Denoisers are conditioned on the log-SNR coordinate gamma directly, so the
/// same object serves every schedule.
class Denoiser {
 public:
  virtual ~Denoiser() = default;

  virtual int vocab() const = 0;
  virtual int length() const = 0;
  virtual const Mat& embeddings() const = 0;
  int dim() const { return static_cast<int>(embeddings().cols()); }

  virtual bool self_conditioned() const { return false; }

  /// `sc` is the self-conditioning embedding input; nullptr means zeros.
  virtual void evaluate(const Mat& z, double gamma, const Mat* sc, DenoiserOutput& out) const = 0;

  DenoiserOutput evaluate(const Mat& z, double gamma) const {
    DenoiserOutput out;
    evaluate(z, gamma, nullptr, out);
    return out;
  }
};

/// e_hat = rows * E with plain loops (tiny matrices).
inline void predicted_embedding(const Mat& rows, const Mat& table, Mat& e_hat) {
  const Eigen::Index L = rows.rows(), V = rows.cols(), d = table.cols();
  for (Eigen::Index l = 0; l < L; ++l) {
    double* out = e_hat.data() + l * d;
    for (Eigen::Index k = 0; k < d; ++k) out[k] = 0.0;
    for (Eigen::Index v = 0; v < V; ++v) {
      const double p = rows(l, v);
      const double* ev = table.data() + v * d;
      for (Eigen::Index k = 0; k < d; ++k) out[k] += p * ev[k];
    }
  }
}

/// Inference-time protocol: self-conditioned denoisers first run a bootstrap
/// pass with zero input and are then fed their own predicted embedding.
inline void denoise(const Denoiser& model, const Mat& z, double gamma, DenoiserOutput& out) {
  model.evaluate(z, gamma, nullptr, out);
  if (model.self_conditioned()) {
    const Mat sc = out.e_hat;
    model.evaluate(z, gamma, &sc, out);
  }
}

inline DenoiserOutput denoise(const Denoiser& model, const Mat& z, double gamma) {
  DenoiserOutput out;
  denoise(model, z, gamma, out);
  return out;
}

/// Row-wise softmax of logits, written into `rows`.
inline void softmax_rows(const Mat& logits, Mat& rows) {
  rows.resize(logits.rows(), logits.cols());
  for (Eigen::Index l = 0; l < logits.rows(); ++l) {
    const double m = logits.row(l).maxCoeff();
    double total = 0.0;
    for (Eigen::Index v = 0; v < logits.cols(); ++v) total += rows(l, v) = std::exp(logits(l, v) - m);
    rows.row(l) /= total;
  }
}

/// softmax(log rows / tau) per position.
inline Mat apply_temperature(const Mat& rows, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
  if (tau == 1.0) return rows;
  Mat logits(rows.rows(), rows.cols());
  for (Eigen::Index i = 0; i < rows.size(); ++i) {
    const double p = rows.data()[i];
    logits.data()[i] = p > 0.0 ? std::log(p) / tau : -std::numeric_limits<double>::infinity();
  }
  Mat out;
  softmax_rows(logits, out);
  return out;
}

/// Argmax per row; ties go to the lowest index.
inline Tokens argmax_rows(const Mat& rows) {
  Tokens x(static_cast<std::size_t>(rows.rows()));
  for (Eigen::Index l = 0; l < rows.rows(); ++l) {
    Eigen::Index best = 0;
    for (Eigen::Index v = 1; v < rows.cols(); ++v)
      if (rows(l, v) > rows(l, best)) best = v;
    x[static_cast<std::size_t>(l)] = static_cast<int>(best);
  }
  return x;
}

/// Sum over positions of -log row_l[x_l], with probabilities clamped at 1e-300.
inline double sequence_log_loss(const Mat& rows, std::span<const int> x, bool* clamped = nullptr) {
  double loss = 0.0;
  for (std::size_t l = 0; l < x.size(); ++l) {
    double p = rows(static_cast<Eigen::Index>(l), x[l]);
    if (!(p > 1e-300)) {
      p = 1e-300;
      if (clamped) *clamped = true;
    }
    loss -= std::log(p);
  }
  return loss;
}

/// |rows * E - xE|^2 accumulated as sum over v != x_l of p_lv (e_v - e_{x_l}),
/// which keeps full relative precision when the true token has probability
/// indistinguishable from one.
inline double embedding_error(const Mat& rows, const Mat& table, std::span<const int> x) {
  const Eigen::Index dim = table.cols();
  double total = 0.0;
  for (std::size_t l = 0; l < x.size(); ++l) {
    const Eigen::Index li = static_cast<Eigen::Index>(l);
    const int xl = x[l];
    for (Eigen::Index k = 0; k < dim; ++k) {
      double acc = 0.0;
      for (Eigen::Index v = 0; v < rows.cols(); ++v)
        if (v != xl) acc += rows(li, v) * (table(v, k) - table(xl, k));
      total += acc * acc;
    }
  }
  return total;
}

/// Sum over positions of the spread of the rows around their mean
/// embedding, sum_v p_v |e_v - e_hat|^2, measured from the most likely
/// token so that near one-hot rows keep full precision.
inline double posterior_spread(const Mat& rows, const Mat& table) {
  const Eigen::Index V = rows.cols();
  double total = 0.0;
  for (Eigen::Index l = 0; l < rows.rows(); ++l) {
    Eigen::Index anchor = 0;
    rows.row(l).maxCoeff(&anchor);
    Eigen::RowVectorXd shift = Eigen::RowVectorXd::Zero(table.cols());
    for (Eigen::Index v = 0; v < V; ++v)
      if (v != anchor) shift += rows(l, v) * (table.row(v) - table.row(anchor));
    for (Eigen::Index v = 0; v < V; ++v) total += rows(l, v) * (table.row(v) - table.row(anchor) - shift).squaredNorm();
  }
  return total;
}

/// Uniform rows regardless of input.
class UniformDenoiser final : public Denoiser {
 public:
  UniformDenoiser(Mat table, int length) : table_(std::move(table)), length_(length) {}
  int vocab() const override { return static_cast<int>(table_.rows()); }
  int length() const override { return length_; }
  const Mat& embeddings() const override { return table_; }
  void evaluate(const Mat&, double, const Mat*, DenoiserOutput& out) const override {
    out.resize(length_, vocab(), dim());
    out.rows.setConstant(1.0 / vocab());
    out.e_hat.noalias() = out.rows * table_;
  }

 private:
  Mat table_;
  int length_;
};

/// Fixed rows regardless of input (constant prediction).
class ConstantDenoiser final : public Denoiser {
 public:
  ConstantDenoiser(Mat table, Mat rows) : table_(std::move(table)), rows_(std::move(rows)) {}
  int vocab() const override { return static_cast<int>(table_.rows()); }
  int length() const override { return static_cast<int>(rows_.rows()); }
  const Mat& embeddings() const override { return table_; }
  void evaluate(const Mat&, double, const Mat*, DenoiserOutput& out) const override {
    out.resize(rows_.rows(), vocab(), dim());
    out.rows = rows_;
    out.e_hat.noalias() = rows_ * table_;
  }

 private:
  Mat table_;
  Mat rows_;
};

/// Prediction that moves linearly in lambda = -gamma/2 between two tokens:
/// rows mix token `from` and token `to` with weight s = (lambda + 3) / 6 on
/// `to`, clamped to [0,1]. Used as an analytic solver-order reference.
class LambdaLinearDenoiser final : public Denoiser {
 public:
  LambdaLinearDenoiser(Mat table, int length, int from, int to)
      : table_(std::move(table)), length_(length), from_(from), to_(to) {}
  int vocab() const override { return static_cast<int>(table_.rows()); }
  int length() const override { return length_; }
  const Mat& embeddings() const override { return table_; }

  static double weight(double gamma) { return std::clamp((-0.5 * gamma + 3.0) / 6.0, 0.0, 1.0); }

  void evaluate(const Mat&, double gamma, const Mat*, DenoiserOutput& out) const override {
    out.resize(length_, vocab(), dim());
    out.rows.setZero();
    const double s = weight(gamma);
    for (int l = 0; l < length_; ++l) {
      out.rows(l, from_) += 1.0 - s;
      out.rows(l, to_) += s;
    }
    out.e_hat.noalias() = out.rows * table_;
  }

  /// Exact PFODE transport of z from gamma_from to gamma_to (both within the
  /// unclamped range |gamma| <= 6).
  Mat exact_flow(const Mat& z, double gamma_from, double gamma_to) const {
    const double lam_a = -0.5 * gamma_from, lam_b = -0.5 * gamma_to;
    const Eigen::RowVectorXd a = table_.row(from_) + 0.5 * (table_.row(to_) - table_.row(from_));
    const Eigen::RowVectorXd b = (table_.row(to_) - table_.row(from_)) / 6.0;
    // z / sigma changes by the integral of exp(lambda) (a + b lambda) d lambda.
    auto primitive = [&](double lam) -> Eigen::RowVectorXd { return std::exp(lam) * (a + b * (lam - 1.0)); };
    const Eigen::RowVectorXd shift = primitive(lam_b) - primitive(lam_a);
    const double s_a = std::sqrt(sigma2_of(gamma_from)), s_b = std::sqrt(sigma2_of(gamma_to));
    Mat out(z.rows(), z.cols());
    for (Eigen::Index l = 0; l < z.rows(); ++l) out.row(l) = s_b * (z.row(l) / s_a + shift);
    return out;
  }

 private:
  Mat table_;
  int length_;
  int from_;
  int to_;
};

}  // namespace difflab
