// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "difflab/core.hpp"
#include "difflab/denoiser.hpp"
#include "difflab/losses.hpp"
#include "difflab/noising.hpp"
#include "difflab/optim.hpp"

namespace difflab {

/// Closed-form Gaussian log-density logits -|z - alpha e_v|^2 / (2 sigma^2).
inline Eigen::VectorXd output_prior_logits(const Eigen::Ref<const Eigen::RowVectorXd>& z, const Mat& table, double g) {
  const double a = std::sqrt(alpha2_of(g)), s2 = sigma2_of(g);
  Eigen::VectorXd out(table.rows());
  for (Eigen::Index v = 0; v < table.rows(); ++v) out[v] = -(z - a * table.row(v)).squaredNorm() / (2.0 * s2);
  return out;
}

/// Per-position two-layer tanh network producing V logits.
///
/// Inputs are the rescaled latent row, (g, sin g, cos g) and a one-hot
/// position; the self-conditioning embedding enters the hidden layer through
/// its own matrix, so a zero input leaves the network unchanged.
class ToyDenoiser final : public Denoiser {
 public:
  struct Config {
    int hidden = 64;
    bool output_prior = true;
    bool self_cond = true;
  };

  ToyDenoiser(Mat table, int length, Config cfg, std::uint64_t seed = 0)
      : table_(std::move(table)), length_(length), cfg_(cfg) {
    const int V = vocab(), d = dim(), H = cfg_.hidden;
    in_ = d + 3 + length_;
    o_w1_ = 0;
    o_b1_ = o_w1_ + static_cast<std::size_t>(H) * in_;
    o_wsc_ = o_b1_ + static_cast<std::size_t>(H);
    o_w2_ = o_wsc_ + static_cast<std::size_t>(H) * d;
    o_b2_ = o_w2_ + static_cast<std::size_t>(V) * H;
    params_.assign(o_b2_ + static_cast<std::size_t>(V), 0.0);
    if (params_.size() > 100000) throw std::invalid_argument("toy denoiser exceeds 1e5 parameters");
    Stream rng(seed, "toy-init");
    const double s1 = 1.0 / std::sqrt(static_cast<double>(in_)), s2 = 1.0 / std::sqrt(static_cast<double>(H));
    for (std::size_t i = o_w1_; i < o_b1_; ++i) params_[i] = s1 * rng.normal();
    for (std::size_t i = o_wsc_; i < o_w2_; ++i) params_[i] = cfg_.self_cond ? s1 * rng.normal() : 0.0;
    for (std::size_t i = o_w2_; i < o_b2_; ++i) params_[i] = 0.1 * s2 * rng.normal();
  }

  int vocab() const override { return static_cast<int>(table_.rows()); }
  int length() const override { return length_; }
  const Mat& embeddings() const override { return table_; }
  bool self_conditioned() const override { return cfg_.self_cond; }
  const Config& config() const { return cfg_; }

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  Mat& table() { return table_; }
  std::size_t size() const { return params_.size(); }

  /// Input rescale 1 / sqrt(alpha^2 / d_e + sigma^2): unit variance for
  /// isotropic unit-norm embeddings.
  double input_scale(double g) const {
    return 1.0 / std::sqrt(alpha2_of(g) / dim() + sigma2_of(g));
  }

  struct PositionCache {
    Eigen::VectorXd x_in, h, logits, rows;
    Eigen::VectorXd sc;
  };

  void forward_position(const Eigen::Ref<const Eigen::RowVectorXd>& z, double g, const double* sc, int l,
                        PositionCache& c) const {
    const int V = vocab(), d = dim(), H = cfg_.hidden;
    const double s = input_scale(g);
    c.x_in.setZero(in_);
    for (int k = 0; k < d; ++k) c.x_in[k] = s * z[k];
    c.x_in[d] = g;
    c.x_in[d + 1] = std::sin(g);
    c.x_in[d + 2] = std::cos(g);
    c.x_in[d + 3 + l] = 1.0;
    c.sc.setZero(d);
    if (sc && cfg_.self_cond)
      for (int k = 0; k < d; ++k) c.sc[k] = sc[k];
    c.h = w1() * c.x_in + b1() + wsc() * c.sc;
    for (int j = 0; j < H; ++j) c.h[j] = std::tanh(c.h[j]);
    c.logits = w2() * c.h + b2();
    if (cfg_.output_prior) c.logits += output_prior_logits(z, table_, g);
    const double m = c.logits.maxCoeff();
    c.rows = (c.logits.array() - m).exp();
    c.rows /= c.rows.sum();
    (void)V;
  }

  void evaluate(const Mat& z, double gamma, const Mat* sc, DenoiserOutput& out) const override {
    out.resize(length_, vocab(), dim());
    PositionCache c;
    for (int l = 0; l < length_; ++l) {
      forward_position(z.row(l), gamma, sc ? sc->data() + static_cast<std::ptrdiff_t>(l) * dim() : nullptr, l, c);
      out.rows.row(l) = c.rows.transpose();
    }
    predicted_embedding(out.rows, table_, out.e_hat);
  }

  /// Gradients of one position given d loss / d logits.
  ///
  /// Accumulates parameter gradients into `grad`; returns d/dz of the row in
  /// `dz`, d/dg at fixed z in `dg`, and d/dE from the output prior in `dtable`.
  void backward_position(const Eigen::Ref<const Eigen::RowVectorXd>& z, double g, const PositionCache& c,
                         const Eigen::VectorXd& dlogits, std::span<double> grad, Eigen::RowVectorXd& dz, double& dg,
                         Mat* dtable) const {
    const int d = dim(), H = cfg_.hidden, V = vocab();
    Eigen::Map<Mat> gw1(grad.data() + o_w1_, H, in_);
    Eigen::Map<Eigen::VectorXd> gb1(grad.data() + o_b1_, H);
    Eigen::Map<Mat> gwsc(grad.data() + o_wsc_, H, d);
    Eigen::Map<Mat> gw2(grad.data() + o_w2_, V, H);
    Eigen::Map<Eigen::VectorXd> gb2(grad.data() + o_b2_, V);
    gw2.noalias() += dlogits * c.h.transpose();
    gb2 += dlogits;
    Eigen::VectorXd dpre = w2().transpose() * dlogits;
    for (int j = 0; j < H; ++j) dpre[j] *= 1.0 - c.h[j] * c.h[j];
    gw1.noalias() += dpre * c.x_in.transpose();
    gb1 += dpre;
    if (cfg_.self_cond) gwsc.noalias() += dpre * c.sc.transpose();
    const Eigen::VectorXd dx = w1().transpose() * dpre;
    const double s = input_scale(g);
    const double a2 = alpha2_of(g), s2 = sigma2_of(g);
    const double q = a2 / d + s2;
    const double ds = -0.5 * std::pow(q, -1.5) * a2 * s2 * (1.0 - 1.0 / d);
    dz.setZero(d);
    dg = 0.0;
    for (int k = 0; k < d; ++k) {
      dz[k] += s * dx[k];
      dg += dx[k] * z[k] * ds;
    }
    dg += dx[d] + dx[d + 1] * std::cos(g) - dx[d + 2] * std::sin(g);
    if (cfg_.output_prior) {
      const double a = std::sqrt(a2);
      const double da = -0.5 * a * s2, ds2 = a2 * s2;
      for (int v = 0; v < V; ++v) {
        const Eigen::RowVectorXd r = z - a * table_.row(v);
        const double gv = dlogits[v];
        dz -= gv * r / s2;
        dg += gv * (r.dot(table_.row(v)) / s2 * da + r.squaredNorm() / (2.0 * s2 * s2) * ds2);
        if (dtable) dtable->row(v) += gv * a * r / s2;
      }
    }
  }

  Eigen::Map<const Mat> w1() const { return {params_.data() + o_w1_, cfg_.hidden, in_}; }
  Eigen::Map<const Eigen::VectorXd> b1() const { return {params_.data() + o_b1_, cfg_.hidden}; }
  Eigen::Map<const Mat> wsc() const { return {params_.data() + o_wsc_, cfg_.hidden, dim()}; }
  Eigen::Map<const Mat> w2() const { return {params_.data() + o_w2_, vocab(), cfg_.hidden}; }
  Eigen::Map<const Eigen::VectorXd> b2() const { return {params_.data() + o_b2_, vocab()}; }

 private:
  Mat table_;
  int length_;
  Config cfg_;
  int in_ = 0;
  std::size_t o_w1_ = 0, o_b1_ = 0, o_wsc_ = 0, o_w2_ = 0, o_b2_ = 0;
  std::vector<double> params_;
};

/// clip(round(B sr / (sr + sd)), 1, B - 1).
inline int adaptive_split(int batch, double sigma_r, double sigma_d) {
  if (batch < 2) throw std::invalid_argument("batch split needs B >= 2");
  const double total = sigma_r + sigma_d;
  const double share = total > 0.0 ? sigma_r / total : 0.5;
  const long r = std::lround(batch * share);
  return static_cast<int>(std::clamp<long>(r, 1, batch - 1));
}

inline int self_cond_rows(int batch, double rate) { return static_cast<int>(std::ceil(rate * batch - 1e-12)); }

enum class HookMode {
  paired,  // hook uses the partner row drawn at the same time
  sample   // hook uses the row itself
};

struct TrainConfig {
  int steps = 20000;
  int batch = 64;
  double p_sc = 0.25;
  double lr_net = 1e-3;
  double lr_schedule = 1e-2;
  double lr_embed = 1e-2;
  double lr_endpoints = 1e-2;
  int warmup = 500;
  double weight_decay = 0.0;
  double sigma_ema = 0.99;
  double param_ema = 0.9999;
  int segments = 32;
  bool learn_embeddings = true;
  bool learn_endpoints = true;
  double gamma_min = -10.0;
  double gamma_max = 10.0;
  HookMode hook = HookMode::paired;
  double aux_ce_weight = 0.0;
  int log_every = 100;
  std::uint64_t seed = 0;
  ToyDenoiser::Config net;
};

struct TrainState {
  AdamW net_opt, sched_opt, embed_opt, end_opt;
  double sigma_r = 1.0;
  double sigma_d = 1.0;
  std::vector<double> ema;
  long step = 0;
};

/// Everything random about one step, drawn before any loss is evaluated.
struct BatchDraw {
  std::vector<Tokens> x;
  std::vector<Mat> eps;
  std::vector<double> t;
  std::vector<int> partner;  // diffusion rows: row sharing its time, or itself
  std::vector<double> hook_u;  // shape value where the variance hook is evaluated
  std::vector<char> sc_mask;
  std::vector<Mat> sc;  // bootstrap embeddings (empty matrix when unused)
  int recon_rows = 0;
};

struct StepReport {
  long step = 0;
  double recon = 0.0;
  double diff = 0.0;
  double prior = 0.0;
  double ce = 0.0;
  double total = 0.0;
  int recon_rows = 0;
  int sc_rows = 0;
  double sigma_r = 0.0;  // trackers that set this step's split
  double sigma_d = 0.0;
};

/// Gradient of the step loss with respect to every trainable group.
struct TrainGradient {
  std::vector<double> net;
  Mat table;
  std::vector<double> shape;
  double gamma0 = 0.0;
  double gamma1 = 0.0;
  std::vector<double> recon_losses, diff_losses;
  double recon = 0.0, diff = 0.0, prior = 0.0, ce = 0.0;
  double total() const { return recon + diff + prior; }
};

inline BatchDraw draw_batch(const DataDistribution& data, const ToyDenoiser& model, const NoiseSchedule& sched,
                            int recon_rows, const TrainConfig& cfg, Stream& rng) {
  const int B = cfg.batch;
  BatchDraw b;
  b.recon_rows = recon_rows;
  for (int i = 0; i < B; ++i) b.x.push_back(data.sample(rng));
  for (int i = 0; i < B; ++i) b.eps.push_back(standard_normal(model.length(), model.dim(), rng));
  b.t.assign(static_cast<std::size_t>(B), 0.0);
  b.partner.resize(static_cast<std::size_t>(B));
  std::iota(b.partner.begin(), b.partner.end(), 0);
  const int n_diff = B - recon_rows;
  const double u = rng.uniform();
  const int n_times = cfg.hook == HookMode::paired ? (n_diff + 1) / 2 : n_diff;
  for (int k = 0; k < n_diff; ++k) {
    const int slot = cfg.hook == HookMode::paired ? k / 2 : k;
    const std::size_t row = static_cast<std::size_t>(recon_rows + k);
    b.t[row] = detail::stratified_time(static_cast<std::size_t>(slot), static_cast<std::size_t>(n_times), u);
    if (cfg.hook == HookMode::paired) {
      const int mate = k ^ 1;
      if (mate < n_diff) b.partner[row] = recon_rows + mate;
    }
  }
  b.hook_u.assign(static_cast<std::size_t>(B), 0.0);
  const double hu = rng.uniform();
  for (int k = 0; k < n_diff; ++k) {
    const int slot = cfg.hook == HookMode::paired ? k / 2 : k;
    b.hook_u[static_cast<std::size_t>(recon_rows + k)] =
        detail::stratified_time(static_cast<std::size_t>(slot), static_cast<std::size_t>(n_times), hu);
  }
  // Exactly ceil(p_sc B) self-conditioned rows, chosen by a partial shuffle.
  b.sc_mask.assign(static_cast<std::size_t>(B), 0);
  if (model.self_conditioned()) {
    std::vector<int> order(static_cast<std::size_t>(B));
    std::iota(order.begin(), order.end(), 0);
    const int n_sc = self_cond_rows(B, cfg.p_sc);
    for (int i = 0; i < n_sc; ++i) {
      const int j = i + static_cast<int>(rng.uniform() * (B - i));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
      b.sc_mask[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
    }
  }
  b.sc.resize(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) {
    if (!b.sc_mask[static_cast<std::size_t>(i)]) continue;
    const double g = sched.gamma(b.t[static_cast<std::size_t>(i)]);
    const Mat z = noise_at_gamma(embed(b.x[static_cast<std::size_t>(i)], model.embeddings()), b.eps[static_cast<std::size_t>(i)], g);
    DenoiserOutput out;
    model.evaluate(z, g, nullptr, out);
    b.sc[static_cast<std::size_t>(i)] = out.e_hat;
  }
  return b;
}

/// Loss of a drawn batch and its gradient.
///
/// Recon rows sit at t = 0 with the interior shape detached. Diffusion rows
/// pass their shape gradient through the variance hook. Self-conditioned rows
/// reach only the network. Losses are per token.
inline TrainGradient batch_gradient(const ToyDenoiser& model, const NoiseSchedule& sched, const BatchDraw& b) {
  const auto& shape = std::get<PiecewiseLinearShape>(sched.shape());
  const int B = static_cast<int>(b.x.size());
  const int L = model.length(), d = model.dim(), V = model.vocab();
  const int Br = b.recon_rows, Bd = B - Br;
  const Mat& E = model.embeddings();
  const double width = sched.span_width();
  const std::size_t K = static_cast<std::size_t>(shape.segments());

  TrainGradient gr;
  gr.net.assign(model.size(), 0.0);
  gr.table = Mat::Zero(V, d);
  gr.shape.assign(K, 0.0);
  gr.recon_losses.assign(static_cast<std::size_t>(Br), 0.0);
  gr.diff_losses.assign(static_cast<std::size_t>(Bd), 0.0);

  // Forward pass for every row; diffusion losses are needed by the hook first.
  struct RowWork {
    std::vector<ToyDenoiser::PositionCache> cache;
    Mat z, e;
    double g = 0.0, dg_shape = 0.0, loss = 0.0, slope = 0.0;
  };
  std::vector<RowWork> rows(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) {
    auto& w = rows[static_cast<std::size_t>(i)];
    const std::size_t ii = static_cast<std::size_t>(i);
    const bool recon = i < Br;
    const double t = b.t[ii];
    w.g = recon ? sched.gamma0() : sched.gamma(t);
    w.slope = recon ? 0.0 : sched.shape_derivative(t);
    w.e = embed(b.x[ii], E);
    w.z = noise_at_gamma(w.e, b.eps[ii], w.g);
    w.cache.resize(static_cast<std::size_t>(L));
    const double* sc = b.sc_mask[ii] ? b.sc[ii].data() : nullptr;
    for (int l = 0; l < L; ++l)
      model.forward_position(w.z.row(l), w.g, sc ? sc + static_cast<std::ptrdiff_t>(l) * d : nullptr, l,
                             w.cache[static_cast<std::size_t>(l)]);
    if (recon) {
      double s = 0.0;
      for (int l = 0; l < L; ++l) {
        const double p = w.cache[static_cast<std::size_t>(l)].rows[b.x[ii][static_cast<std::size_t>(l)]];
        s -= std::log(std::max(p, 1e-300));
      }
      w.loss = s / L;
      gr.recon_losses[ii] = w.loss;
    } else {
      const double c = 0.5 * width * w.slope * std::exp(-w.g);
      double s = 0.0;
      for (int l = 0; l < L; ++l) {
        const Eigen::RowVectorXd e_hat = w.cache[static_cast<std::size_t>(l)].rows.transpose() * E;
        s += (e_hat - w.e.row(l)).squaredNorm();
      }
      w.loss = c * s / L;
      gr.diff_losses[static_cast<std::size_t>(i - Br)] = w.loss;
    }
  }

  const double g1 = sched.gamma1();
  std::vector<double> dlog(K);
  Eigen::RowVectorXd dz;
  for (int i = 0; i < B; ++i) {
    auto& w = rows[static_cast<std::size_t>(i)];
    const std::size_t ii = static_cast<std::size_t>(i);
    const bool recon = i < Br;
    const bool sc_row = b.sc_mask[ii] != 0;
    const double row_weight = recon ? 1.0 / Br : 1.0 / Bd;
    const double a = std::sqrt(alpha2_of(w.g)), s = std::sqrt(sigma2_of(w.g));
    const double da = -0.5 * a * sigma2_of(w.g), dsig = 0.5 * s * alpha2_of(w.g);
    double dgamma = 0.0;  // total d loss_row / d g (scaled by row_weight)
    Mat* dtable = sc_row ? nullptr : &gr.table;
    for (int l = 0; l < L; ++l) {
      const auto& c = w.cache[static_cast<std::size_t>(l)];
      const int xl = b.x[ii][static_cast<std::size_t>(l)];
      Eigen::VectorXd dlogits(V);
      if (recon) {
        dlogits = c.rows;
        dlogits[xl] -= 1.0;
        dlogits *= row_weight / L;
      } else {
        const double coef = 0.5 * width * w.slope * std::exp(-w.g);
        const Eigen::RowVectorXd e_hat = c.rows.transpose() * E;
        const Eigen::RowVectorXd ge = (2.0 * coef * row_weight / L) * (e_hat - w.e.row(l));
        const Eigen::VectorXd u = E * ge.transpose();
        const double mean_u = c.rows.dot(u);
        dlogits = c.rows.array() * (u.array() - mean_u);
        if (dtable) {
          for (int v = 0; v < V; ++v) dtable->row(v) += c.rows[v] * ge;
          dtable->row(xl) -= ge;
        }
      }
      double dg_direct = 0.0;
      model.backward_position(w.z.row(l), w.g, c, dlogits, gr.net, dz, dg_direct, dtable);
      dgamma += dg_direct + dz.dot(da * w.e.row(l) + dsig * b.eps[ii].row(l));
      if (dtable) dtable->row(xl) += a * dz;
    }
    if (sc_row) continue;
    if (recon) {
      gr.gamma0 += dgamma;
      continue;
    }
    // Diffusion row: the loss also depends on g through exp(-g) and on the slope.
    const double loss_w = row_weight * w.loss;
    dgamma -= loss_w;
    const double d_slope = loss_w / w.slope;  // d loss / d shape'(t)
    const double u_val = sched.shape_value(b.t[ii]);
    gr.gamma0 += dgamma * (1.0 - u_val) - d_slope * w.slope / width;
    gr.gamma1 += dgamma * u_val + d_slope * w.slope / width;
  }

  // Variance hook, evaluated at stratified shape values so that narrow
  // segments are visited as often as wide ones (see shape_gradient).
  std::vector<double> hook_loss(static_cast<std::size_t>(B), 0.0);
  {
    DenoiserOutput out;
    for (int i = Br; i < B; ++i) {
      const std::size_t ii = static_cast<std::size_t>(i);
      const double g = sched.gamma0() + width * b.hook_u[ii];
      const Mat e = embed(b.x[ii], E);
      denoise(model, noise_at_gamma(e, b.eps[ii], g), g, out);
      hook_loss[ii] = 0.5 * width * std::exp(-g) * (out.e_hat - e).squaredNorm() / L;
    }
  }
  for (int i = Br; i < B; ++i) {
    const std::size_t ii = static_cast<std::size_t>(i);
    const std::size_t k = shape.segment_of_value(b.hook_u[ii]);
    const double slope = 1.0 / (static_cast<double>(K) * shape.increments()[k]);
    const double hook = hook_loss[ii] * hook_loss[static_cast<std::size_t>(b.partner[ii])] * slope / Bd;
    shape.log_slope_gradient(k, dlog);
    for (std::size_t j = 0; j < K; ++j) gr.shape[j] += hook * dlog[j];
  }

  // Prior over the whole batch, per token.
  const double a1 = alpha2_of(g1), s1 = sigma2_of(g1);
  double prior = 0.0;
  for (int i = 0; i < B; ++i) {
    const auto& w = rows[static_cast<std::size_t>(i)];
    prior += prior_loss(L, d, w.e.squaredNorm(), g1);
    if (!b.sc_mask[static_cast<std::size_t>(i)])
      for (int l = 0; l < L; ++l) gr.table.row(b.x[static_cast<std::size_t>(i)][static_cast<std::size_t>(l)]) += (a1 / (B * L)) * w.e.row(l);
  }
  gr.prior = prior / (B * L);
  // d/dg1 of (alpha1^2 |e|^2 + L d (sigma1^2 - 1 - log sigma1^2)) / (2 B L) with |e_l| = 1
  gr.gamma1 += 0.5 * (-a1 * s1 + d * (a1 * s1 - a1));
  for (double v : gr.recon_losses) gr.recon += v / Br;
  for (double v : gr.diff_losses) gr.diff += v / Bd;
  return gr;
}

inline TrainState make_train_state(const ToyDenoiser& model, const NoiseSchedule& sched, const TrainConfig& cfg) {
  TrainState s;
  const auto& shape = std::get<PiecewiseLinearShape>(sched.shape());
  s.net_opt = AdamW(model.size(), {.lr = cfg.lr_net, .beta1 = 0.9, .beta2 = 0.99, .eps = 1e-8,
                                   .weight_decay = cfg.weight_decay, .warmup = cfg.warmup});
  s.sched_opt = AdamW(static_cast<std::size_t>(shape.segments()),
                      {.lr = cfg.lr_schedule, .beta1 = 0.9, .beta2 = 0.99, .eps = 1e-8, .weight_decay = 0.0, .warmup = cfg.warmup});
  s.embed_opt = AdamW(static_cast<std::size_t>(model.embeddings().size()),
                      {.lr = cfg.lr_embed, .beta1 = 0.9, .beta2 = 0.99, .eps = 1e-8, .weight_decay = 0.0, .warmup = cfg.warmup});
  s.end_opt = AdamW(2, {.lr = cfg.lr_endpoints, .beta1 = 0.9, .beta2 = 0.99, .eps = 1e-8, .weight_decay = 0.0, .warmup = cfg.warmup});
  s.ema = model.params();
  return s;
}

/// One optimization step; returns the loss report.
inline StepReport training_step(const DataDistribution& data, ToyDenoiser& model, NoiseSchedule& sched,
                                TrainState& state, const TrainConfig& cfg) {
  Stream rng(cfg.seed, "train", static_cast<std::uint64_t>(state.step));
  const int Br = adaptive_split(cfg.batch, state.sigma_r, state.sigma_d);
  const BatchDraw b = draw_batch(data, model, sched, Br, cfg, rng);
  TrainGradient gr = batch_gradient(model, sched, b);

  StepReport rep;
  rep.step = state.step;
  rep.recon = gr.recon;
  rep.diff = gr.diff;
  rep.prior = gr.prior;
  rep.total = gr.total();
  rep.recon_rows = Br;
  rep.sigma_r = state.sigma_r;
  rep.sigma_d = state.sigma_d;
  rep.sc_rows = static_cast<int>(std::count(b.sc_mask.begin(), b.sc_mask.end(), 1));
  if (!std::isfinite(rep.total))
    throw NumericalError("training loss is not finite at step " + std::to_string(state.step) + " (recon " +
                         std::to_string(gr.recon) + ", diffusion " + std::to_string(gr.diff) + ", prior " +
                         std::to_string(gr.prior) + ")");

  if (cfg.aux_ce_weight > 0.0) {
    // Per-position log loss on the diffusion rows; reaches the network and E only.
    const NoiseSchedule frozen = sched;
    TrainGradient ce_grad;
    ce_grad.net.assign(model.size(), 0.0);
    ce_grad.table = Mat::Zero(model.vocab(), model.dim());
    const int Bd = cfg.batch - Br;
    double ce = 0.0;
    Eigen::RowVectorXd dz;
    ToyDenoiser::PositionCache c;
    for (int i = Br; i < cfg.batch; ++i) {
      const std::size_t ii = static_cast<std::size_t>(i);
      const double g = frozen.gamma(b.t[ii]);
      const Mat e = embed(b.x[ii], model.embeddings());
      const Mat z = noise_at_gamma(e, b.eps[ii], g);
      const double a = std::sqrt(alpha2_of(g));
      for (int l = 0; l < model.length(); ++l) {
        const int xl = b.x[ii][static_cast<std::size_t>(l)];
        const double* sc = b.sc_mask[ii] ? b.sc[ii].data() + static_cast<std::ptrdiff_t>(l) * model.dim() : nullptr;
        model.forward_position(z.row(l), g, sc, l, c);
        ce -= std::log(std::max(c.rows[xl], 1e-300)) / (Bd * model.length());
        Eigen::VectorXd dlogits = c.rows;
        dlogits[xl] -= 1.0;
        dlogits *= cfg.aux_ce_weight / (Bd * model.length());
        double dg = 0.0;
        model.backward_position(z.row(l), g, c, dlogits, ce_grad.net, dz, dg, &ce_grad.table);
        ce_grad.table.row(xl) += a * dz;
      }
    }
    for (std::size_t j = 0; j < gr.net.size(); ++j) gr.net[j] += ce_grad.net[j];
    gr.table += ce_grad.table;
    gr.ce = ce;
    rep.ce = ce;
    rep.total += cfg.aux_ce_weight * ce;
  }

  // Optimizer updates (moments advance even at zero learning rate).
  state.net_opt.step(model.params(), gr.net);
  auto raw = std::get<PiecewiseLinearShape>(sched.shape()).raw();
  state.sched_opt.step(raw, gr.shape);
  double g0 = sched.gamma0(), g1 = sched.gamma1();
  if (cfg.learn_endpoints) {
    std::vector<double> ends = {g0, g1};
    const std::vector<double> dends = {gr.gamma0, gr.gamma1};
    state.end_opt.step(ends, dends);
    g0 = std::clamp(ends[0], cfg.gamma_min, cfg.gamma_max);
    g1 = std::clamp(ends[1], cfg.gamma_min, cfg.gamma_max);
    if (!(g1 > g0 + 1e-3)) {
      g0 = sched.gamma0();
      g1 = sched.gamma1();
    }
  }
  sched = NoiseSchedule(g0, g1, PiecewiseLinearShape(std::move(raw)));
  if (cfg.learn_embeddings) {
    Mat& table = model.table();
    std::vector<double> flat(table.data(), table.data() + table.size());
    std::vector<double> gflat(gr.table.data(), gr.table.data() + gr.table.size());
    const std::vector<double> before = flat;
    state.embed_opt.step(flat, gflat);
    if (flat != before) {
      std::copy(flat.begin(), flat.end(), table.data());
      table = EmbeddingTable::project_rows(table);
    }
  }

  // Loss-scale trackers from the per-example losses.
  auto stdev = [](const std::vector<double>& v) {
    if (v.size() < 2) return -1.0;
    RunningStats s;
    for (double x : v) s.add(x);
    return std::sqrt(s.variance());
  };
  const double sr = stdev(gr.recon_losses), sd = stdev(gr.diff_losses);
  if (sr > 0.0) state.sigma_r = cfg.sigma_ema * state.sigma_r + (1.0 - cfg.sigma_ema) * sr;
  if (sd > 0.0) state.sigma_d = cfg.sigma_ema * state.sigma_d + (1.0 - cfg.sigma_ema) * sd;

  // Parameter average with the usual short-horizon warmup of the decay.
  const double decay = std::min(cfg.param_ema, (1.0 + static_cast<double>(state.step)) / (10.0 + static_cast<double>(state.step)));
  for (std::size_t j = 0; j < state.ema.size(); ++j) state.ema[j] = decay * state.ema[j] + (1.0 - decay) * model.params()[j];
  ++state.step;
  return rep;
}

struct TrainResult {
  ToyDenoiser model;        // final weights
  ToyDenoiser ema_model;    // averaged weights, same embeddings
  NoiseSchedule schedule;
  std::vector<StepReport> log;
};

inline TrainResult train_loop(const Instance& inst, const TrainConfig& cfg) {
  ToyDenoiser model(inst.E(), inst.L(), cfg.net, cfg.seed);
  NoiseSchedule sched(inst.schedule.gamma0(), inst.schedule.gamma1(),
                      PiecewiseLinearShape(std::vector<double>(static_cast<std::size_t>(cfg.segments), softplus_inverse(1.0))));
  TrainState state = make_train_state(model, sched, cfg);
  std::vector<StepReport> log;
  for (int s = 0; s < cfg.steps; ++s) {
    StepReport r = training_step(inst.data, model, sched, state, cfg);
    if (cfg.log_every > 0 && (s % cfg.log_every == 0 || s + 1 == cfg.steps)) log.push_back(r);
  }
  ToyDenoiser ema = model;
  ema.params() = state.ema;
  return {std::move(model), std::move(ema), std::move(sched), std::move(log)};
}

}  // namespace difflab
