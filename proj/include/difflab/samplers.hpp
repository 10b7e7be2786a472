// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "difflab/core.hpp"
#include "difflab/denoiser.hpp"
#include "difflab/mc.hpp"
#include "difflab/noising.hpp"

namespace difflab {

enum class SamplerKind { ancestral, ddim, dpmpp2m, heun };

inline std::string_view to_string(SamplerKind k) {
  switch (k) {
    case SamplerKind::ancestral: return "ancestral";
    case SamplerKind::ddim: return "ddim";
    case SamplerKind::dpmpp2m: return "dpmpp2m";
    case SamplerKind::heun: return "heun";
  }
  return "?";
}

inline SamplerKind sampler_kind(std::string_view name) {
  if (name == "ancestral") return SamplerKind::ancestral;
  if (name == "ddim") return SamplerKind::ddim;
  if (name == "dpmpp2m" || name == "dpm++2m") return SamplerKind::dpmpp2m;
  if (name == "heun") return SamplerKind::heun;
  throw std::invalid_argument("unknown sampler '" + std::string(name) + "'");
}

struct SamplerConfig {
  SamplerKind kind = SamplerKind::ancestral;
  int steps = 64;
  double temperature = 1.0;
  double t_min = 1e-3;
  std::vector<double> grid;  // explicit decreasing times; empty means uniform

  void validate() const {
    if (steps < 1) throw std::invalid_argument("sampler needs at least one step");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    if (!(t_min >= 0.0 && t_min < 1.0)) throw std::invalid_argument("t_min must lie in [0,1)");
    if (!grid.empty()) {
      if (grid.size() != static_cast<std::size_t>(steps) + 1)
        throw std::invalid_argument("explicit grid needs steps + 1 times");
      for (std::size_t i = 1; i < grid.size(); ++i)
        if (!(grid[i] < grid[i - 1])) throw std::invalid_argument("explicit grid must decrease strictly");
    }
  }
};

/// Times t_0 = 1 > ... > t_T = t_min, uniform unless given explicitly.
inline std::vector<double> sampler_grid(const SamplerConfig& cfg) {
  cfg.validate();
  if (!cfg.grid.empty()) return cfg.grid;
  std::vector<double> t(static_cast<std::size_t>(cfg.steps) + 1);
  for (int i = 0; i <= cfg.steps; ++i) t[static_cast<std::size_t>(i)] = 1.0 - (1.0 - cfg.t_min) * i / cfg.steps;
  t.back() = cfg.t_min;
  return t;
}

/// Predicted embedding at (z, g), with rows sharpened or flattened by tau.
inline Mat predict_embedding(const Denoiser& model, const Mat& z, double g, double tau, DenoiserOutput& out) {
  denoise(model, z, g, out);
  if (tau == 1.0) return out.e_hat;
  const Mat rows = apply_temperature(out.rows, tau);
  Mat e_hat(rows.rows(), model.dim());
  predicted_embedding(rows, model.embeddings(), e_hat);
  return e_hat;
}

// Steppers take log-SNR coordinates g_hi > g_lo (moving toward data).

inline Mat ancestral_update(const Mat& z, double g_hi, double g_lo, const Mat& e_hat, Stream& rng) {
  const double c = snr_gap_gamma(g_lo, g_hi);
  const double a_lo = std::sqrt(alpha2_of(g_lo)), a_hi = std::sqrt(alpha2_of(g_hi));
  Mat out = ((1.0 - c) * a_lo / a_hi) * z + (c * a_lo) * e_hat;
  const double s = std::sqrt(c * sigma2_of(g_lo));
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] += s * rng.normal();
  return out;
}

inline Mat ddim_update(const Mat& z, double g_hi, double g_lo, const Mat& e_hat) {
  const double a_lo = std::sqrt(alpha2_of(g_lo)), a_hi = std::sqrt(alpha2_of(g_hi));
  const double s_lo = std::sqrt(sigma2_of(g_lo)), s_hi = std::sqrt(sigma2_of(g_hi));
  const Mat eps_hat = (z - a_hi * e_hat) / s_hi;
  return a_lo * e_hat + s_lo * eps_hat;
}

inline Mat ancestral_step(const Mat& z, double t_hi, double t_lo, const Denoiser& model, const NoiseSchedule& sched,
                          Stream& rng, double tau = 1.0) {
  if (!(t_lo < t_hi)) throw std::invalid_argument("sampler step needs t_lo < t_hi");
  DenoiserOutput out;
  const double g_hi = sched.gamma(t_hi);
  return ancestral_update(z, g_hi, sched.gamma(t_lo), predict_embedding(model, z, g_hi, tau, out), rng);
}

inline Mat ddim_step(const Mat& z, double t_hi, double t_lo, const Denoiser& model, const NoiseSchedule& sched,
                     double tau = 1.0) {
  if (t_lo == t_hi) return z;
  if (!(t_lo < t_hi)) throw std::invalid_argument("sampler step needs t_lo <= t_hi");
  DenoiserOutput out;
  const double g_hi = sched.gamma(t_hi);
  return ddim_update(z, g_hi, sched.gamma(t_lo), predict_embedding(model, z, g_hi, tau, out));
}

/// Multistep state: previous prediction and its log-SNR step.
struct MultistepState {
  Mat prev_e_hat;
  double prev_h = 0.0;
  bool has_prev = false;
};

/// Second-order multistep update in lambda = -g/2 with data prediction.
inline Mat dpmpp2m_step(const Mat& z, double t_hi, double t_lo, const Denoiser& model, const NoiseSchedule& sched,
                        MultistepState& state, double tau = 1.0) {
  const double g_hi = sched.gamma(t_hi), g_lo = sched.gamma(t_lo);
  const double h = 0.5 * (g_hi - g_lo);
  if (!(h > 0.0)) throw std::invalid_argument("multistep solver needs a positive log-SNR step");
  DenoiserOutput out;
  const Mat e_hat = predict_embedding(model, z, g_hi, tau, out);
  Mat next;
  if (!state.has_prev) {
    next = ddim_update(z, g_hi, g_lo, e_hat);
  } else {
    const double r = state.prev_h / h;
    const Mat d = (1.0 + 0.5 / r) * e_hat - (0.5 / r) * state.prev_e_hat;
    const double a_lo = std::sqrt(alpha2_of(g_lo));
    const double s_ratio = std::sqrt(sigma2_of(g_lo) / sigma2_of(g_hi));
    next = s_ratio * z - (a_lo * std::expm1(-h)) * d;
  }
  state.prev_e_hat = e_hat;
  state.prev_h = h;
  state.has_prev = true;
  return next;
}

/// Heun step of dzb/ds = (zb - e_hat) / s with zb = z / alpha and s = exp(g/2).
/// `evals` receives the number of denoiser calls (1 when the corrector is skipped).
inline Mat heun_ve_step(const Mat& z, double t_hi, double t_lo, const Denoiser& model, const NoiseSchedule& sched,
                        bool is_last, double tau = 1.0, int* evals = nullptr) {
  if (!(t_lo < t_hi)) throw std::invalid_argument("sampler step needs t_lo < t_hi");
  const double g_hi = sched.gamma(t_hi), g_lo = sched.gamma(t_lo);
  const double a_hi = std::sqrt(alpha2_of(g_hi)), a_lo = std::sqrt(alpha2_of(g_lo));
  const double s_hi = std::exp(0.5 * g_hi), s_lo = std::exp(0.5 * g_lo);
  DenoiserOutput out;
  const Mat zb = z / a_hi;
  const Mat d1 = (zb - predict_embedding(model, z, g_hi, tau, out)) / s_hi;
  Mat zb_next = zb + (s_lo - s_hi) * d1;
  if (evals) *evals = 1;
  if (!is_last) {
    const Mat d2 = (zb_next - predict_embedding(model, a_lo * zb_next, g_lo, tau, out)) / s_lo;
    zb_next = zb + (0.5 * (s_lo - s_hi)) * (d1 + d2);
    if (evals) *evals = 2;
  }
  return a_lo * zb_next;
}

/// One chain: final state, argmax readout and function evaluations.
struct Chain {
  Mat z;
  Tokens tokens;
  int nfe = 0;
};

/// Runs one chain from z (at t = grid[0]) down the grid and reads out the argmax.
inline Chain run_chain(const SamplerConfig& cfg, const Denoiser& model, const NoiseSchedule& sched, Mat z,
                       Stream& rng) {
  const auto grid = sampler_grid(cfg);
  const std::size_t steps = grid.size() - 1;
  Chain c;
  MultistepState ms;
  for (std::size_t i = 0; i < steps; ++i) {
    const double hi = grid[i], lo = grid[i + 1];
    switch (cfg.kind) {
      case SamplerKind::ancestral:
        z = ancestral_step(z, hi, lo, model, sched, rng, cfg.temperature);
        c.nfe += 1;
        break;
      case SamplerKind::ddim:
        z = ddim_step(z, hi, lo, model, sched, cfg.temperature);
        c.nfe += 1;
        break;
      case SamplerKind::dpmpp2m:
        z = dpmpp2m_step(z, hi, lo, model, sched, ms, cfg.temperature);
        c.nfe += 1;
        break;
      case SamplerKind::heun: {
        int evals = 0;
        z = heun_ve_step(z, hi, lo, model, sched, i + 1 == steps, cfg.temperature, &evals);
        c.nfe += evals;
        break;
      }
    }
    for (Eigen::Index k = 0; k < z.size(); ++k)
      if (!std::isfinite(z.data()[k])) throw NumericalError("sampler state became non-finite at step " + std::to_string(i));
  }
  // Readout ignores temperature: argmax is invariant under it.
  DenoiserOutput out;
  denoise(model, z, sched.gamma(grid.back()), out);
  c.nfe += 1;
  c.tokens = argmax_rows(out.rows);
  c.z = std::move(z);
  return c;
}

struct SampleSet {
  std::vector<Tokens> sequences;
  int nfe = 0;  // per chain
};

/// Draws chains from z_1 ~ N(0, I); chain j uses Stream(plan.seed, plan.tag, j).
inline SampleSet run_sampler(const SamplerConfig& cfg, const Denoiser& model, const NoiseSchedule& sched,
                             const McPlan& plan) {
  cfg.validate();
  struct Acc {
    std::vector<Tokens> seqs;
    int nfe = 0;
    void merge(const Acc& o) {
      seqs.insert(seqs.end(), o.seqs.begin(), o.seqs.end());
      nfe = std::max(nfe, o.nfe);
    }
  };
  auto acc = run_sharded(plan, [] { return Acc{}; }, [&](Acc& a, std::size_t, Stream& rng) {
    Mat z = standard_normal(model.length(), model.dim(), rng);
    Chain c = run_chain(cfg, model, sched, std::move(z), rng);
    a.seqs.push_back(std::move(c.tokens));
    a.nfe = c.nfe;
  });
  return {std::move(acc.seqs), acc.nfe};
}

/// Largest per-position total-variation distance between sample marginals
/// and the data marginals.
inline double marginal_tv(const std::vector<Tokens>& samples, const DataDistribution& data) {
  double worst = 0.0;
  for (int l = 0; l < data.length(); ++l) {
    std::vector<double> freq(static_cast<std::size_t>(data.vocab()), 0.0);
    for (const auto& x : samples) freq[static_cast<std::size_t>(x[static_cast<std::size_t>(l)])] += 1.0;
    const auto p = data.marginal(l);
    double tv = 0.0;
    for (std::size_t v = 0; v < freq.size(); ++v) tv += std::abs(freq[v] / static_cast<double>(samples.size()) - p[v]);
    worst = std::max(worst, 0.5 * tv);
  }
  return worst;
}

}  // namespace difflab
