// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "difflab/core.hpp"
#include "difflab/denoiser.hpp"
#include "difflab/mc.hpp"
#include "difflab/noising.hpp"
#include "difflab/oracle.hpp"

namespace difflab {

/// A vector field z -> v(z) on L x d_e latents.
using Field = std::function<void(const Mat& z, Mat& v)>;

/// Probability-flow velocity in log-SNR time: (alpha^2 z - alpha e_hat) / 2.
inline void velocity_gamma(const Mat& z, double g, const Denoiser& model, Mat& v, DenoiserOutput& out) {
  denoise(model, z, g, out);
  const double a2 = alpha2_of(g), a = std::sqrt(a2);
  v = 0.5 * (a2 * z - a * out.e_hat);
}

inline Mat velocity_gamma(const Mat& z, double g, const Denoiser& model) {
  DenoiserOutput out;
  Mat v;
  velocity_gamma(z, g, model, v, out);
  return v;
}

/// Probability-flow velocity in t: (alpha' - alpha sigma'/sigma) e_hat + (sigma'/sigma) z.
inline void velocity_t(const Mat& z, double t, const Denoiser& model, const NoiseSchedule& sched, Mat& v,
                       DenoiserOutput& out) {
  const ScheduleEval s = sched.eval(t);
  denoise(model, z, s.gamma, out);
  // d alpha^2/dgamma = -alpha^2 sigma^2, d sigma^2/dgamma = alpha^2 sigma^2
  const double dalpha = -0.5 * s.alpha * s.sigma2 * s.dgamma;
  const double dsigma = 0.5 * s.sigma * s.alpha2 * s.dgamma;
  v = (dalpha - s.alpha * dsigma / s.sigma) * out.e_hat + (dsigma / s.sigma) * z;
}

inline Mat velocity_t(const Mat& z, double t, const Denoiser& model, const NoiseSchedule& sched) {
  DenoiserOutput out;
  Mat v;
  velocity_t(z, t, model, sched, v, out);
  return v;
}

inline constexpr int kExactDivergenceCap = 64;

/// Sum of central-difference diagonal Jacobian entries.
inline double divergence_exact(const Field& field, const Mat& z, double h = 1e-3) {
  if (z.size() > kExactDivergenceCap) throw std::invalid_argument("exact divergence is capped at 64 coordinates");
  Mat zp = z, vp, vm;
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    zp.data()[i] = z.data()[i] + h;
    field(zp, vp);
    zp.data()[i] = z.data()[i] - h;
    field(zp, vm);
    zp.data()[i] = z.data()[i];
    total += (vp.data()[i] - vm.data()[i]) / (2.0 * h);
  }
  return total;
}

enum class ProbeKind { rademacher, gaussian };

inline void fill_probe(Mat& xi, ProbeKind kind, Stream& rng) {
  for (Eigen::Index i = 0; i < xi.size(); ++i) xi.data()[i] = kind == ProbeKind::rademacher ? rng.rademacher() : rng.normal();
}

/// One probe: xi^T (v(z + h xi) - v(z - h xi)) / (2h).
inline double hutchinson_probe(const Field& field, const Mat& z, const Mat& xi, double h) {
  Mat vp, vm;
  field(z + h * xi, vp);
  field(z - h * xi, vm);
  return (xi.array() * (vp - vm).array()).sum() / (2.0 * h);
}

inline Estimate divergence_hutchinson(const Field& field, const Mat& z, ProbeKind kind, int n_probes, double h,
                                      Stream& rng) {
  if (n_probes < 1) throw std::invalid_argument("Hutchinson estimator needs at least one probe");
  RunningStats stats;
  Mat xi(z.rows(), z.cols());
  for (int k = 0; k < n_probes; ++k) {
    fill_probe(xi, kind, rng);
    stats.add(hutchinson_probe(field, z, xi, h));
  }
  return {stats.mean(), stats.se(), stats.count()};
}

// ---------------------------------------------------------------------------
// Self-conditioning.

/// How the divergence of a self-conditioned field treats its bootstrap input.
enum class SelfCondMode {
  closed_loop,  // bootstrap recomputed at every perturbed state
  open_loop     // bootstrap frozen at the unperturbed state
};

/// Bayes logits plus a linear coupling to the self-conditioning embedding:
/// logits_l = log q(x^l | z) + a (W vec(sc))_l.
class ToySelfCondDenoiser final : public Denoiser {
 public:
  ToySelfCondDenoiser(const Instance& inst, double coupling, std::uint64_t seed = 0)
      : bayes_(inst), coupling_(coupling) {
    if (!(coupling >= 0.0)) throw std::invalid_argument("coupling strength must be nonnegative");
    const Eigen::Index out = static_cast<Eigen::Index>(inst.L()) * inst.V();
    const Eigen::Index in = static_cast<Eigen::Index>(inst.L()) * inst.dim();
    weights_.resize(out, in);
    Stream rng(seed, "selfcond-coupling");
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (Eigen::Index i = 0; i < weights_.size(); ++i) weights_.data()[i] = scale * rng.normal();
  }

  int vocab() const override { return bayes_.vocab(); }
  int length() const override { return bayes_.length(); }
  const Mat& embeddings() const override { return bayes_.embeddings(); }
  bool self_conditioned() const override { return true; }
  double coupling() const { return coupling_; }
  const Mat& coupling_matrix() const { return weights_; }

  void evaluate(const Mat& z, double gamma, const Mat* sc, DenoiserOutput& out) const override {
    bayes_.evaluate(z, gamma, nullptr, out);
    if (!sc || coupling_ == 0.0) return;
    const Eigen::Map<const Eigen::VectorXd> flat(sc->data(), sc->size());
    const Eigen::VectorXd shift = coupling_ * (weights_ * flat);
    Mat logits(out.rows.rows(), out.rows.cols());
    for (Eigen::Index i = 0; i < logits.size(); ++i)
      logits.data()[i] = std::log(std::max(out.rows.data()[i], 1e-300)) + shift[i];
    softmax_rows(logits, out.rows);
    predicted_embedding(out.rows, embeddings(), out.e_hat);
  }

 private:
  BayesDenoiser bayes_;
  double coupling_;
  Mat weights_;
};

/// Bootstrap self-conditioning input x_theta(z, g, 0) E.
inline Mat bootstrap_embedding(const Denoiser& model, const Mat& z, double g) {
  DenoiserOutput out;
  model.evaluate(z, g, nullptr, out);
  return out.e_hat;
}

/// Log-SNR velocity with a fixed self-conditioning input.
inline void velocity_gamma_fixed_sc(const Mat& z, double g, const Denoiser& model, const Mat& sc, Mat& v,
                                    DenoiserOutput& out) {
  model.evaluate(z, g, &sc, out);
  const double a2 = alpha2_of(g), a = std::sqrt(a2);
  v = 0.5 * (a2 * z - a * out.e_hat);
}

/// The field whose divergence is taken at state z0 under the given mode.
inline Field gamma_field(const Denoiser& model, double g, const Mat& z0, SelfCondMode mode) {
  if (!model.self_conditioned() || mode == SelfCondMode::closed_loop) {
    return [&model, g](const Mat& z, Mat& v) {
      DenoiserOutput out;
      velocity_gamma(z, g, model, v, out);
    };
  }
  Mat sc = bootstrap_embedding(model, z0, g);
  return [&model, g, sc = std::move(sc)](const Mat& z, Mat& v) {
    DenoiserOutput out;
    velocity_gamma_fixed_sc(z, g, model, sc, v, out);
  };
}

struct DivergenceConfig {
  bool exact = false;
  ProbeKind probe = ProbeKind::rademacher;
  int n_probes = 1;
  double h = 1e-3;
  SelfCondMode selfcond = SelfCondMode::closed_loop;
};

inline Estimate divergence(const Field& field, const Mat& z, const DivergenceConfig& cfg, Stream& rng) {
  if (cfg.exact) return {divergence_exact(field, z, cfg.h), 0.0, 1};
  return divergence_hutchinson(field, z, cfg.probe, cfg.n_probes, cfg.h, rng);
}

/// Divergence of the log-SNR field at z; closed-loop or open-loop per cfg.
inline Estimate selfcond_divergence(const Mat& z, double g, const Denoiser& model, SelfCondMode mode,
                                    const DivergenceConfig& cfg, Stream& rng) {
  return divergence(gamma_field(model, g, z, mode), z, cfg, rng);
}

/// tr(d v / d sc * d sc / d z) from full finite-difference Jacobians.
inline double chain_rule_term(const Mat& z, double g, const Denoiser& model, double h = 1e-4) {
  const Eigen::Index n = z.size();
  if (n > kExactDivergenceCap) throw std::invalid_argument("chain-rule oracle is capped at 64 coordinates");
  const Mat sc0 = bootstrap_embedding(model, z, g);
  const Eigen::Index m = sc0.size();
  Mat j_sc(n, m), j_z(m, n);  // dv/dsc, dsc/dz
  DenoiserOutput out;
  Mat vp, vm;
  Mat sc = sc0;
  for (Eigen::Index k = 0; k < m; ++k) {
    sc.data()[k] = sc0.data()[k] + h;
    velocity_gamma_fixed_sc(z, g, model, sc, vp, out);
    sc.data()[k] = sc0.data()[k] - h;
    velocity_gamma_fixed_sc(z, g, model, sc, vm, out);
    sc.data()[k] = sc0.data()[k];
    for (Eigen::Index i = 0; i < n; ++i) j_sc(i, k) = (vp.data()[i] - vm.data()[i]) / (2.0 * h);
  }
  Mat zp = z;
  for (Eigen::Index i = 0; i < n; ++i) {
    zp.data()[i] = z.data()[i] + h;
    const Mat sp = bootstrap_embedding(model, zp, g);
    zp.data()[i] = z.data()[i] - h;
    const Mat sm = bootstrap_embedding(model, zp, g);
    zp.data()[i] = z.data()[i];
    for (Eigen::Index k = 0; k < m; ++k) j_z(k, i) = (sp.data()[k] - sm.data()[k]) / (2.0 * h);
  }
  return (j_sc * j_z).trace();
}

// ---------------------------------------------------------------------------
// Log-weights.

enum class OdeSpace { gamma, time };

struct SolverConfig {
  int steps = 128;
  OdeSpace space = OdeSpace::gamma;
};

/// log w = recon + proposal + prior + divergence.
struct LogWeightRecord {
  double log_w = 0.0;
  Mat z_end;
  double divergence = 0.0;  // integral of the divergence along the path
  double recon = 0.0;       // sum_l log <x_theta(z_0), x^l>
  double proposal = 0.0;    // -log q(z_0 | x) without the 2 pi constant
  double prior = 0.0;       // log N(z_1; 0, I) without the 2 pi constant
};

/// Transports z_0 to the terminal time with Heun's method and accumulates
/// the divergence by the trapezoid rule on the same nodes.
///
/// The divergence at each node is taken at the node state; Hutchinson
/// probes are drawn fresh per node from `rng`.
inline LogWeightRecord integrate_logweight(std::span<const int> x, const Mat& z0, const Denoiser& model,
                                           const NoiseSchedule& sched, const SolverConfig& solver,
                                           const DivergenceConfig& div, Stream& rng) {
  if (solver.steps < 1) throw std::invalid_argument("solver needs at least one step");
  const int n = solver.steps;
  const bool in_gamma = solver.space == OdeSpace::gamma;
  const double g0 = sched.gamma0(), g1 = sched.gamma1();
  auto node = [&](int k) {
    const double s = static_cast<double>(k) / n;
    return in_gamma ? g0 + (g1 - g0) * s : s;
  };
  DenoiserOutput out;
  auto velocity = [&](const Mat& z, double c, Mat& v) {
    if (in_gamma) velocity_gamma(z, c, model, v, out);
    else velocity_t(z, c, model, sched, v, out);
  };
  auto div_at = [&](const Mat& z, double c) {
    Field f;
    if (in_gamma) {
      f = gamma_field(model, c, z, div.selfcond);
    } else {
      if (model.self_conditioned() && div.selfcond == SelfCondMode::open_loop)
        throw std::invalid_argument("open-loop divergence is only defined in log-SNR time");
      f = [&model, &sched, c](const Mat& zz, Mat& v) {
        DenoiserOutput o;
        velocity_t(zz, c, model, sched, v, o);
      };
    }
    return divergence(f, z, div, rng).value;
  };

  LogWeightRecord rec;
  {
    DenoiserOutput o0;
    denoise(model, z0, g0, o0);
    rec.recon = -sequence_log_loss(o0.rows, x);
  }
  const Mat e = embed(x, model.embeddings());
  const double s2 = sigma2_of(g0);
  const double a0 = std::sqrt(alpha2_of(g0));
  rec.proposal = 0.5 * static_cast<double>(z0.size()) * log_sigma2_of(g0) + (z0 - a0 * e).squaredNorm() / (2.0 * s2);

  Mat z = z0, f0, fp;
  velocity(z, node(0), f0);
  double div_prev = div_at(z, node(0));
  double integral = 0.0;
  for (int k = 0; k < n; ++k) {
    const double c0 = node(k), c1 = node(k + 1), dc = c1 - c0;
    const Mat zp = z + dc * f0;
    velocity(zp, c1, fp);
    z += (0.5 * dc) * (f0 + fp);
    for (Eigen::Index i = 0; i < z.size(); ++i)
      if (!std::isfinite(z.data()[i])) throw NumericalError("probability-flow state became non-finite at step " + std::to_string(k));
    velocity(z, c1, f0);
    const double div_next = div_at(z, c1);
    integral += 0.5 * dc * (div_prev + div_next);
    div_prev = div_next;
  }
  rec.divergence = integral;
  rec.prior = -0.5 * z.squaredNorm();
  rec.z_end = std::move(z);
  rec.log_w = rec.recon + rec.proposal + rec.prior + rec.divergence;
  return rec;
}

/// Draws z_0 ~ q(z_0 | x) from `rng` and integrates.
inline LogWeightRecord sample_logweight(std::span<const int> x, const Denoiser& model, const NoiseSchedule& sched,
                                        const SolverConfig& solver, const DivergenceConfig& div, Stream& rng) {
  const Mat e = embed(x, model.embeddings());
  const Mat eps = standard_normal(e.rows(), e.cols(), rng);
  return integrate_logweight(x, noise_at_gamma(e, eps, sched.gamma0()), model, sched, solver, div, rng);
}

inline double log_mean_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s / static_cast<double>(v.size()));
}

struct IwaeResult {
  double value = 0.0;
  std::vector<double> log_weights;
};

/// log (1/K) sum_k w_k with sample k drawn from Stream(seed, tag, index, k).
inline IwaeResult iwae_estimate(std::span<const int> x, const Denoiser& model, const NoiseSchedule& sched, int K,
                                const SolverConfig& solver, const DivergenceConfig& div, std::uint64_t seed,
                                const std::string& tag, std::uint64_t index = 0) {
  if (K < 1) throw std::invalid_argument("importance sample count must be at least one");
  IwaeResult r;
  r.log_weights.reserve(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    Stream rng(seed, tag, index, static_cast<std::uint64_t>(k));
    r.log_weights.push_back(sample_logweight(x, model, sched, solver, div, rng).log_w);
  }
  r.value = log_mean_exp(r.log_weights);
  return r;
}

// ---------------------------------------------------------------------------
// One-dimensional reference for the tiny instance (L = 1, d_e = 1).

/// Flow map z_0 -> z_1 of the log-SNR field by classical RK4.
inline double flow_1d(const Denoiser& model, double z0, double g0, double g1, int steps) {
  Mat z(1, 1);
  z(0, 0) = z0;
  const double h = (g1 - g0) / steps;
  DenoiserOutput out;
  Mat k1, k2, k3, k4;
  for (int i = 0; i < steps; ++i) {
    const double g = g0 + h * i;
    velocity_gamma(z, g, model, k1, out);
    velocity_gamma(z + 0.5 * h * k1, g + 0.5 * h, model, k2, out);
    velocity_gamma(z + 0.5 * h * k2, g + 0.5 * h, model, k3, out);
    velocity_gamma(z + h * k3, g + h, model, k4, out);
    z += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return z(0, 0);
}

/// log of the integral over z_0 of p(z_0) p(x | z_0), where p(z_0) is the
/// pushforward density of N(0, 1) at g1 through the inverse flow.
/// The Jacobian of the flow map comes from differencing the map itself.
inline double quadrature_log_likelihood_1d(const Denoiser& model, const NoiseSchedule& sched, int token,
                                           int nodes = 4001, int flow_steps = 2048) {
  if (model.length() != 1 || model.dim() != 1) throw std::invalid_argument("quadrature reference needs L = 1, d_e = 1");
  const double g0 = sched.gamma0(), g1 = sched.gamma1();
  const double a0 = std::sqrt(alpha2_of(g0)), s0 = std::sqrt(sigma2_of(g0));
  const double center = a0 * model.embeddings()(token, 0);
  const double lo = center - 12.0 * s0, hi = center + 12.0 * s0;
  const double dz = (hi - lo) / (nodes - 1);
  std::vector<double> z1(static_cast<std::size_t>(nodes));
  for (int i = 0; i < nodes; ++i) z1[static_cast<std::size_t>(i)] = flow_1d(model, lo + dz * i, g0, g1, flow_steps);
  std::vector<double> logf(static_cast<std::size_t>(nodes));
  DenoiserOutput out;
  Mat z(1, 1);
  for (int i = 0; i < nodes; ++i) {
    const std::size_t k = static_cast<std::size_t>(i);
    double jac;
    if (i == 0) jac = (z1[1] - z1[0]) / dz;
    else if (i == nodes - 1) jac = (z1[k] - z1[k - 1]) / dz;
    else jac = (z1[k + 1] - z1[k - 1]) / (2.0 * dz);
    z(0, 0) = lo + dz * i;
    denoise(model, z, g0, out);
    const double log_px = std::log(std::max(out.rows(0, token), 1e-300));
    logf[k] = -0.5 * std::log(2.0 * M_PI) - 0.5 * z1[k] * z1[k] + std::log(jac) + log_px;
  }
  // Simpson's rule in log space.
  const double m = *std::max_element(logf.begin(), logf.end());
  double s = 0.0;
  for (int i = 0; i < nodes; ++i) {
    const double wgt = (i == 0 || i == nodes - 1) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    s += wgt * std::exp(logf[static_cast<std::size_t>(i)] - m);
  }
  return m + std::log(s * dz / 3.0);
}

}  // namespace difflab
