// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "difflab/core.hpp"
#include "difflab/infotheory.hpp"
#include "difflab/io.hpp"
#include "difflab/losses.hpp"
#include "difflab/odelik.hpp"
#include "difflab/oracle.hpp"
#include "difflab/samplers.hpp"
#include "difflab/scalingfit.hpp"
#include "difflab/schedule.hpp"
#include "difflab/trainer.hpp"
#include "difflab/verify.hpp"

namespace difflab::cli {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kUsage = 1, kNumerical = 2, kAcceptance = 3 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Every configurable value with its default.
inline json default_config() {
  return json::parse(R"({
  "seed": 0,
  "workers": 1,
  "instance": {
    "kind": "desk",
    "data": "joint",
    "embedding_seed": 0,
    "gamma0": -6.0,
    "gamma1": 6.0,
    "tiny_p_first": 0.35,
    "pair_agreement": 0.9,
    "file": ""
  },
  "mc": { "shard_size": 4096 },
  "optimum": { "grid": 256, "n": 160000, "estimator": "posterior_variance" },
  "learn": { "segments": 32, "steps": 3000, "lr": 0.02, "strata": 32, "draws_per_stratum": 8, "learn_endpoints": false },
  "curves": { "points": 33, "grid": "midpoint", "n": 200000, "ce_n": 20000, "estimator": "posterior_variance" },
  "info": { "points": 17, "n": 20000, "decomposition_points": 9 },
  "sample": { "samplers": ["ancestral", "ddim", "dpmpp2m", "heun"], "steps": 256, "n": 10000, "temperature": 1.0, "t_min": 0.001 },
  "likelihood": {
    "solver_steps": 128, "space": "gamma", "probes": 1, "probe": "rademacher", "fd_step": 0.001,
    "K": [1, 2, 4, 8, 16, 32], "repeats": 50, "sensitivity_n": 2000, "coupling": 1.0, "chain_states": 16, "chain_probes": 4000
  },
  "train": {
    "steps": 20000, "batch": 64, "p_sc": 0.25, "lr_net": 0.001, "lr_schedule": 0.01, "lr_embed": 0.01, "lr_endpoints": 0.01,
    "warmup": 500, "weight_decay": 0.0, "sigma_ema": 0.99, "param_ema": 0.9999, "gamma_min": -10.0, "gamma_max": 10.0, "segments": 32, "hidden": 64, "self_cond": true, "output_prior": true,
    "learn_embeddings": true, "learn_endpoints": true, "hook": "paired", "aux_ce_weight": 0.0, "log_every": 100
  },
  "scaling": { "input": "" }
})");
}

namespace detail {

inline std::string type_name(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

inline bool same_kind(const json& value, const json& reference) {
  if (reference.is_number_integer()) return value.is_number_integer();
  if (reference.is_number()) return value.is_number();
  return type_name(value) == type_name(reference);
}

}  // namespace detail

/// Rejects keys the defaults lack and values of the wrong type.
inline void validate_config(const json& cfg, const json& reference, const std::string& path = "") {
  for (auto it = cfg.begin(); it != cfg.end(); ++it) {
    const std::string field = path.empty() ? it.key() : path + "." + it.key();
    if (!reference.contains(it.key())) throw UsageError("config field '" + field + "' is not recognized");
    const json& ref = reference.at(it.key());
    if (!detail::same_kind(*it, ref))
      throw UsageError("config field '" + field + "' must be " + detail::type_name(ref) + ", got " + detail::type_name(*it));
    if (ref.is_object()) validate_config(*it, ref, field);
  }
}

/// Applies "a.b.c=value"; the value is read as JSON when it parses, else as text.
inline void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &cfg;
  std::stringstream ks(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ks, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]) || !node->at(parts[i]).is_object())
      throw UsageError("config field '" + key + "' is not recognized");
    node = &node->at(parts[i]);
  }
  if (!node->contains(parts.back())) throw UsageError("config field '" + key + "' is not recognized");
  (*node)[parts.back()] = std::move(value);
}

inline json load_config(const std::string& path, const std::vector<std::string>& overrides) {
  json cfg = default_config();
  if (!path.empty()) {
    const json user = json::parse(read_text(path), nullptr, false);
    if (user.is_discarded() || !user.is_object()) throw UsageError("config file " + path + " is not a JSON object");
    validate_config(user, cfg);
    cfg.merge_patch(user);
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  validate_config(cfg, default_config());
  return cfg;
}

/// FNV-1a over the compact dump.
inline std::string config_hash(const json& cfg) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : cfg.dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

inline Instance build_instance(const json& cfg) {
  const json& c = cfg.at("instance");
  if (const auto file = c.at("file").get<std::string>(); !file.empty()) return instance_from_json(json::parse(read_text(file)));
  const std::string kind = c.at("kind").get<std::string>();
  const double g0 = c.at("gamma0").get<double>(), g1 = c.at("gamma1").get<double>();
  Instance inst;
  if (kind == "desk") {
    const std::string data = c.at("data").get<std::string>();
    if (data != "joint" && data != "factorized") throw UsageError("config field 'instance.data' must be joint or factorized");
    inst = desk_instance(c.at("embedding_seed").get<std::uint64_t>(), data == "joint" ? DataKind::joint : DataKind::factorized,
                         g0, g1);
  } else if (kind == "tiny") {
    inst = tiny_instance(c.at("tiny_p_first").get<double>(), g0, g1);
  } else if (kind == "pair") {
    inst = pair_instance(c.at("pair_agreement").get<double>(), c.at("embedding_seed").get<std::uint64_t>());
    inst.schedule = NoiseSchedule(g0, g1);
  } else {
    throw UsageError("config field 'instance.kind' must be desk, tiny or pair");
  }
  return inst;
}

/// Reads a schedule file; a path without extension gets ".json".
inline NoiseSchedule load_schedule(std::string path) {
  if (!std::filesystem::exists(path) && std::filesystem::exists(path + ".json")) path += ".json";
  if (!std::filesystem::exists(path)) throw UsageError("schedule file " + path + " does not exist");
  return schedule_from_json(json::parse(read_text(path)));
}

struct Context {
  std::string command;
  json config;
  std::uint64_t seed = 0;
  unsigned workers = 1;
  std::filesystem::path out_dir = "out";
  std::string schedule_path;
  std::string input_path;
  std::vector<int> only;
  std::ostream* out = &std::cout;

  McPlan plan(const std::string& tag, std::size_t n) const {
    McPlan p;
    p.seed = seed;
    p.tag = tag;
    p.n = n;
    p.workers = workers;
    p.shard_size = config.at("mc").at("shard_size").get<std::size_t>();
    return p;
  }
  const json& section(const char* name) const { return config.at(name); }
  void write(const std::string& name, const std::string& text) const { write_text(out_dir / name, text); }
};

inline ErrorEstimator estimator_of(const std::string& name) {
  if (name == "posterior_variance") return ErrorEstimator::posterior_variance;
  if (name == "squared_error") return ErrorEstimator::squared_error;
  throw UsageError("estimator must be posterior_variance or squared_error, got '" + name + "'");
}

inline std::vector<double> time_grid(const std::string& kind, int points) {
  if (points < 2) throw UsageError("grids need at least two points");
  if (kind == "midpoint") return midpoint_grid(points);
  if (kind == "closed") return closed_grid(0.0, 1.0, points);
  throw UsageError("config field 'curves.grid' must be midpoint or closed");
}

inline ScheduleOptimum optimum_for(const Context& ctx, const Instance& inst, const BayesDenoiser& oracle) {
  const json& o = ctx.section("optimum");
  return compute_optimum(oracle, inst.data, inst.schedule.gamma0(), inst.schedule.gamma1(), o.at("grid").get<int>(),
                         ctx.plan("optimum", o.at("n").get<std::size_t>()), estimator_of(o.at("estimator").get<std::string>()));
}

inline NoiseSchedule schedule_for(const Context& ctx, const Instance& inst) {
  return ctx.schedule_path.empty() ? inst.schedule : load_schedule(ctx.schedule_path);
}

// ---------------------------------------------------------------------------
// Subcommands. Each returns a summary document for stdout and the manifest.

inline json cmd_make_instance(const Context& ctx) {
  const Instance inst = build_instance(ctx.config);
  ctx.write("instance.json", to_json(inst).dump(2) + "\n");
  return {{"name", inst.name}, {"V", inst.V()}, {"L", inst.L()}, {"d_e", inst.dim()}, {"entropy", data_entropy(inst.data)}};
}

inline json cmd_schedule_optimal(const Context& ctx) {
  const Instance inst = build_instance(ctx.config);
  const BayesDenoiser oracle(inst);
  const ScheduleOptimum opt = optimum_for(ctx, inst, oracle);
  const NoiseSchedule sched = opt.schedule();
  ctx.write("gamma_star.json", to_json(sched).dump(2) + "\n");
  CsvTable nodes({"gamma", "w", "w_se", "cumulative", "cumulative_se"});
  for (std::size_t k = 0; k < opt.gammas.size(); ++k) nodes.add({opt.gammas[k], opt.w[k], opt.w_se[k], opt.G[k], opt.G_se[k]});
  ctx.write("optimum_nodes.csv", nodes.str());
  CsvTable curve({"t", "gamma"});
  Series s{"optimal", {}, {}};
  for (double t : closed_grid(0.0, 1.0, 101)) {
    curve.add({t, sched.gamma(t)});
    s.x.push_back(t);
    s.y.push_back(sched.gamma(t));
  }
  ctx.write("gamma_star.csv", curve.str());
  ctx.write("gamma_star.svg", svg_line_chart("optimal schedule", "t", "log-SNR coordinate", {s}));
  return {{"kappa", opt.kappa}, {"kappa_se", opt.kappa_se}};
}

inline json cmd_schedule_learn(const Context& ctx) {
  const Instance inst = build_instance(ctx.config);
  const BayesDenoiser oracle(inst);
  const json& l = ctx.section("learn");
  ScheduleLearnConfig cfg;
  cfg.steps = l.at("steps").get<int>();
  cfg.lr = l.at("lr").get<double>();
  cfg.strata = l.at("strata").get<int>();
  cfg.draws_per_stratum = l.at("draws_per_stratum").get<int>();
  cfg.learn_endpoints = l.at("learn_endpoints").get<bool>();
  cfg.seed = ctx.seed;
  const int K = l.at("segments").get<int>();
  if (K < 1) throw UsageError("config field 'learn.segments' must be positive");
  const NoiseSchedule init(inst.schedule.gamma0(), inst.schedule.gamma1(),
                           PiecewiseLinearShape(std::vector<double>(static_cast<std::size_t>(K), softplus_inverse(1.0))));
  const ScheduleLearnResult res = learn_schedule(oracle, inst.data, init, cfg);
  ctx.write("learned_schedule.json", to_json(res.schedule).dump(2) + "\n");
  CsvTable obj({"step", "objective"});
  Series s{"objective", {}, {}};
  for (std::size_t i = 0; i < res.objective.size(); ++i) {
    obj.add({static_cast<double>(i), res.objective[i]});
    s.x.push_back(static_cast<double>(i));
    s.y.push_back(res.objective[i]);
  }
  ctx.write("learn_objective.csv", obj.str());
  ctx.write("learn_objective.svg", svg_line_chart("schedule learning", "step", "mean squared loss", {s}));
  return {{"steps", res.steps}, {"final_objective", res.objective.empty() ? 0.0 : res.objective.back()}};
}

inline json cmd_loss_curves(const Context& ctx) {
  const Instance inst = build_instance(ctx.config);
  const BayesDenoiser oracle(inst);
  const NoiseSchedule sched = schedule_for(ctx, inst);
  const json& c = ctx.section("curves");
  const auto ts = time_grid(c.at("grid").get<std::string>(), c.at("points").get<int>());
  const LossCurve curve = diffusion_loss_curve(oracle, inst.data, sched, ts, ctx.plan("curves/loss", c.at("n").get<std::size_t>()),
                                               estimator_of(c.at("estimator").get<std::string>()));
  CsvTable table({"t", "loss", "loss_se", "ce", "ce_se"});
  Series sl{"diffusion loss", {}, {}}, sc{"cross-entropy", {}, {}};
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const LossEstimate ce = per_timestep_ce(oracle, inst.data, sched, ts[i], ctx.plan("curves/ce", c.at("ce_n").get<std::size_t>()));
    table.add({ts[i], curve.values[i].value, curve.values[i].se, ce.value, ce.se});
    sl.x.push_back(ts[i]);
    sl.y.push_back(curve.values[i].value);
    sc.x.push_back(ts[i]);
    sc.y.push_back(ce.value);
  }
  ctx.write("loss_curves.csv", table.str());
  ctx.write("loss_curves.svg", svg_line_chart("per-timestep losses", "t", "nats", {sl, sc}));
  const Estimate mean = curve.mean_over_t();
  return {{"max_over_min", curve.max_over_min()}, {"mean", mean.value}, {"mean_se", mean.se}};
}

inline json cmd_info_curves(const Context& ctx) {
  const Instance inst = build_instance(ctx.config);
  const BayesDenoiser oracle(inst);
  const ScheduleOptimum opt = optimum_for(ctx, inst, oracle);
  const NoiseSchedule sched = opt.schedule();
  const json& c = ctx.section("info");
  const McPlan p = ctx.plan("info", c.at("n").get<std::size_t>());
  CsvTable info({"t", "info", "info_se", "linear_trend", "total_correlation", "total_correlation_se"});
  const Estimate i0 = mutual_info_at_gamma(oracle, sched.gamma(0.0), p);
  Series si{"information", {}, {}}, st{"linear trend", {}, {}}, sc{"total correlation", {}, {}};
  for (double t : closed_grid(0.0, 1.0, c.at("points").get<int>())) {
    const ConditionalEntropy h = conditional_entropy_at_gamma(oracle, sched.gamma(t), p);
    const double it = data_entropy(inst.data) - h.joint.value;
    const double trend = i0.value - opt.kappa * t;
    info.add({t, it, h.joint.se, trend, h.total_correlation.value, h.total_correlation.se});
    si.x.push_back(t);
    si.y.push_back(it);
    st.x.push_back(t);
    st.y.push_back(trend);
    sc.x.push_back(t);
    sc.y.push_back(h.total_correlation.value);
  }
  ctx.write("info_curves.csv", info.str());
  ctx.write("info_curves.svg", svg_line_chart("information under the optimal schedule", "t", "nats", {si, st, sc}));
  CsvTable dec({"t", "ce", "ce_se", "rhs", "gap", "gap_se"});
  double worst = 0.0;
  for (double t : closed_grid(0.0, 1.0, c.at("decomposition_points").get<int>())) {
    const CeDecomposition d = ce_decomposition_residual(oracle, opt, t, i0, ctx.plan("info/decomposition", p.n));
    dec.add({t, d.ce.value, d.ce.se, d.rhs, d.gap, d.se});
    if (d.se > 0.0) worst = std::max(worst, std::abs(d.gap) / d.se);
  }
  ctx.write("decomposition.csv", dec.str());
  return {{"kappa", opt.kappa}, {"info0", i0.value}, {"decomposition_worst_z", worst}};
}

inline json cmd_sample(const Context& ctx) {
  const Instance inst = build_instance(ctx.config);
  const BayesDenoiser oracle(inst);
  const NoiseSchedule sched = schedule_for(ctx, inst);
  const json& c = ctx.section("sample");
  json summary = json::object();
  for (const auto& name : c.at("samplers").get<std::vector<std::string>>()) {
    SamplerConfig cfg;
    try {
      cfg.kind = sampler_kind(name);
    } catch (const std::invalid_argument&) {
      throw UsageError("config field 'sample.samplers' has unknown sampler '" + name + "'");
    }
    cfg.steps = c.at("steps").get<int>();
    cfg.temperature = c.at("temperature").get<double>();
    cfg.t_min = c.at("t_min").get<double>();
    const SampleSet set = run_sampler(cfg, oracle, sched, ctx.plan("sample/" + name, c.at("n").get<std::size_t>()));
    std::vector<std::string> header;
    for (int l = 0; l < inst.L(); ++l) header.push_back("x" + std::to_string(l));
    CsvTable table(header);
    for (const auto& x : set.sequences) table.add(std::vector<double>(x.begin(), x.end()));
    ctx.write("samples_" + name + ".csv", table.str());
    summary[name] = {{"marginal_tv", marginal_tv(set.sequences, inst.data)}, {"nfe", set.nfe}};
  }
  return summary;
}

inline json cmd_likelihood(const Context& ctx) {
  const Instance inst = build_instance(ctx.config);
  const BayesDenoiser oracle(inst);
  const NoiseSchedule sched = schedule_for(ctx, inst);
  const json& c = ctx.section("likelihood");
  SolverConfig solver;
  solver.steps = c.at("solver_steps").get<int>();
  const std::string space = c.at("space").get<std::string>();
  if (space != "gamma" && space != "time") throw UsageError("config field 'likelihood.space' must be gamma or time");
  solver.space = space == "gamma" ? OdeSpace::gamma : OdeSpace::time;
  DivergenceConfig div;
  div.n_probes = c.at("probes").get<int>();
  div.h = c.at("fd_step").get<double>();
  const std::string probe = c.at("probe").get<std::string>();
  if (probe != "rademacher" && probe != "gaussian") throw UsageError("config field 'likelihood.probe' must be rademacher or gaussian");
  div.probe = probe == "gaussian" ? ProbeKind::gaussian : ProbeKind::rademacher;

  Stream pick(ctx.seed, "likelihood/sequence");
  const Tokens x = inst.data.sample(pick);
  CsvTable iwae({"K", "mean", "se"});
  const int repeats = c.at("repeats").get<int>();
  for (int K : c.at("K").get<std::vector<int>>()) {
    RunningStats s;
    for (int rep = 0; rep < repeats; ++rep)
      s.add(iwae_estimate(x, oracle, sched, K, solver, div, ctx.seed, "likelihood/iwae/" + std::to_string(K),
                          static_cast<std::uint64_t>(rep))
                .value);
    iwae.add({static_cast<double>(K), s.mean(), s.se()});
  }
  ctx.write("iwae.csv", iwae.str());

  auto k1_mean = [&](const SolverConfig& s, const DivergenceConfig& d) {
    return mc_mean(ctx.plan("likelihood/sensitivity", c.at("sensitivity_n").get<std::size_t>()), [&](std::size_t, Stream& rng) {
      return sample_logweight(inst.data.sample(rng), oracle, sched, s, d, rng).log_w;
    });
  };
  CsvTable sens({"variant", "mean", "se"});
  SolverConfig doubled = solver;
  doubled.steps *= 2;
  DivergenceConfig more = div, gauss = div;
  more.n_probes *= 4;
  gauss.probe = ProbeKind::gaussian;
  int variant = 0;
  for (const auto& [s, d] : std::vector<std::pair<SolverConfig, DivergenceConfig>>{{solver, div}, {doubled, div}, {solver, more}, {solver, gauss}}) {
    const Estimate m = k1_mean(s, d);
    sens.add({static_cast<double>(variant++), m.value, m.se});
  }
  ctx.write("sensitivity.csv", sens.str());

  const ToySelfCondDenoiser toy(inst, c.at("coupling").get<double>(), ctx.seed);
  CsvTable chain({"state", "gamma", "closed_minus_open", "se", "chain_term"});
  for (int i = 0; i < c.at("chain_states").get<int>(); ++i) {
    Stream rng(ctx.seed, "likelihood/chain", static_cast<std::uint64_t>(i));
    const Mat z = standard_normal(inst.L(), inst.dim(), rng);
    const double g = sched.gamma0() + (sched.gamma1() - sched.gamma0()) * rng.uniform();
    const Field closed = gamma_field(toy, g, z, SelfCondMode::closed_loop);
    const Field open = gamma_field(toy, g, z, SelfCondMode::open_loop);
    RunningStats d;
    Mat xi(z.rows(), z.cols());
    for (int k = 0; k < c.at("chain_probes").get<int>(); ++k) {
      fill_probe(xi, div.probe, rng);
      d.add(hutchinson_probe(closed, z, xi, div.h) - hutchinson_probe(open, z, xi, div.h));
    }
    chain.add({static_cast<double>(i), g, d.mean(), d.se(), chain_rule_term(z, g, toy)});
  }
  ctx.write("chain_rule.csv", chain.str());
  return {{"sequence", x}};
}

inline json cmd_train(const Context& ctx) {
  const Instance inst = build_instance(ctx.config);
  const json& c = ctx.section("train");
  TrainConfig cfg;
  cfg.steps = c.at("steps").get<int>();
  cfg.batch = c.at("batch").get<int>();
  cfg.p_sc = c.at("p_sc").get<double>();
  cfg.lr_net = c.at("lr_net").get<double>();
  cfg.lr_schedule = c.at("lr_schedule").get<double>();
  cfg.lr_embed = c.at("lr_embed").get<double>();
  cfg.lr_endpoints = c.at("lr_endpoints").get<double>();
  cfg.warmup = c.at("warmup").get<int>();
  cfg.weight_decay = c.at("weight_decay").get<double>();
  cfg.sigma_ema = c.at("sigma_ema").get<double>();
  cfg.param_ema = c.at("param_ema").get<double>();
  cfg.gamma_min = c.at("gamma_min").get<double>();
  cfg.gamma_max = c.at("gamma_max").get<double>();
  cfg.segments = c.at("segments").get<int>();
  cfg.net.hidden = c.at("hidden").get<int>();
  cfg.net.self_cond = c.at("self_cond").get<bool>();
  cfg.net.output_prior = c.at("output_prior").get<bool>();
  cfg.learn_embeddings = c.at("learn_embeddings").get<bool>();
  cfg.learn_endpoints = c.at("learn_endpoints").get<bool>();
  const std::string hook = c.at("hook").get<std::string>();
  if (hook != "paired" && hook != "sample") throw UsageError("config field 'train.hook' must be paired or sample");
  cfg.hook = hook == "paired" ? HookMode::paired : HookMode::sample;
  cfg.aux_ce_weight = c.at("aux_ce_weight").get<double>();
  cfg.log_every = c.at("log_every").get<int>();
  cfg.seed = ctx.seed;
  const TrainResult res = train_loop(inst, cfg);
  CsvTable log({"step", "total", "recon", "diffusion", "prior", "aux_ce", "recon_rows", "sc_rows", "sigma_r", "sigma_d"});
  Series s{"total", {}, {}};
  for (const auto& r : res.log) {
    log.add({static_cast<double>(r.step), r.total, r.recon, r.diff, r.prior, r.ce, static_cast<double>(r.recon_rows),
             static_cast<double>(r.sc_rows), r.sigma_r, r.sigma_d});
    s.x.push_back(static_cast<double>(r.step));
    s.y.push_back(r.total);
  }
  ctx.write("train_log.csv", log.str());
  ctx.write("train_loss.svg", svg_line_chart("training loss", "step", "nats per sequence", {s}));
  ctx.write("learned_schedule.json", to_json(res.schedule).dump(2) + "\n");
  ctx.write("learned_embeddings.json", to_json(res.model.embeddings()).dump(2) + "\n");
  const NelboEstimate ne = nelbo_estimate(res.ema_model, inst.data, res.schedule, ctx.plan("train/nelbo", 4000));
  return {{"steps", cfg.steps}, {"nelbo", ne.value}, {"nelbo_se", ne.se}, {"entropy", data_entropy(inst.data)}};
}

/// Rows of C,N,loss with an optional fourth group column.
inline json cmd_scaling_fit(const Context& ctx) {
  std::string path = ctx.input_path.empty() ? ctx.section("scaling").at("input").get<std::string>() : ctx.input_path;
  if (path.empty()) throw UsageError("scaling-fit needs --input or scaling.input");
  std::istringstream in(read_text(path));
  std::string line;
  std::map<std::string, std::map<double, std::vector<IsoFlopPoint>>> groups;
  bool header = true;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (header) {
      header = false;
      if (!cells.empty() && !std::isdigit(static_cast<unsigned char>(cells[0][0]))) continue;
    }
    if (cells.size() < 3) throw UsageError(path + ":" + std::to_string(line_no) + ": expected C,N,loss[,group]");
    try {
      groups[cells.size() > 3 ? cells[3] : "all"][std::stod(cells[0])].push_back({std::stod(cells[1]), std::stod(cells[2])});
    } catch (const std::logic_error&) {
      throw UsageError(path + ":" + std::to_string(line_no) + ": non-numeric cell");
    }
  }
  json out = json::object();
  std::vector<std::pair<std::vector<double>, std::vector<double>>> frontiers;
  for (const auto& [group, budgets] : groups) {
    json fits = json::array();
    std::vector<double> cs, ls;
    for (const auto& [c, pts] : budgets) {
      const IsoFlopFit f = isoflop_fit(pts);
      json rec = {{"C", c}, {"a", f.a}, {"b", f.b}, {"c", f.c}, {"has_minimum", f.has_minimum}};
      if (f.has_minimum) {
        rec["N_star"] = f.n_star;
        rec["L_star"] = f.loss_star;
        rec["extrapolated"] = f.extrapolated;
        cs.push_back(c);
        ls.push_back(f.loss_star);
      }
      fits.push_back(rec);
    }
    json g = {{"isoflop", fits}};
    if (cs.size() >= 2) {
      const PowerLaw law = powerlaw_fit(cs, ls);
      g["power_law"] = {{"alpha", law.alpha}, {"beta", law.beta}};
    }
    out[group] = g;
    frontiers.emplace_back(cs, ls);
  }
  if (frontiers.size() == 2 && frontiers[0].first.size() + frontiers[1].first.size() >= 3) {
    const auto [a, b] = powerlaw_fit_shared(frontiers[0].first, frontiers[0].second, frontiers[1].first, frontiers[1].second);
    out["shared_exponent"] = {{"alpha", a.alpha}, {"beta_first", a.beta}, {"beta_second", b.beta}, {"compute_gap", compute_gap(a, b)}};
  }
  ctx.write("scaling_fits.json", out.dump(2) + "\n");
  return out;
}

inline json cmd_verify(const Context& ctx, bool& all_pass) {
  VerifyConfig vc;
  vc.seed = ctx.seed;
  vc.workers = ctx.workers;
  vc.only = ctx.only;
  Verifier v(vc);
  const auto results = v.run_all([&](const CheckResult& r) { *ctx.out << result_line(r) << std::endl; });
  const json doc = results_json(vc, results);
  ctx.write("results.json", doc.dump(2) + "\n");
  all_pass = doc.at("all_pass").get<bool>();
  return {{"all_pass", all_pass}};
}

inline json manifest(const Context& ctx, double wall) {
  std::ostringstream eigen;
  eigen << EIGEN_WORLD_VERSION << '.' << EIGEN_MAJOR_VERSION << '.' << EIGEN_MINOR_VERSION;
  return {{"command", ctx.command},
          {"config_hash", config_hash(ctx.config)},
          {"seed", ctx.seed},
          {"versions", {{"difflab", kVersion}, {"eigen", eigen.str()}, {"compiler", __VERSION__}}},
          {"wall_time_s", wall},
          {"shard_plan", {{"workers", ctx.workers}, {"shard_size", ctx.config.at("mc").at("shard_size")}}},
          {"config", ctx.config}};
}

/// Parses arguments, runs one subcommand and returns the exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Diffusion language model laboratory on enumerable instances"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> workers;
  std::string out_dir = "out";
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--seed", seed, "Monte-Carlo seed (overrides config)");
  app.add_option("--out-dir", out_dir, "Output directory");
  app.add_option("--workers", workers, "Worker threads for Monte-Carlo shards");
  app.add_option("--set", overrides, "Config override key=value")->take_all();

  bool print_defaults = false;
  std::string schedule_path, input_path;
  std::vector<int> only;
  auto* make = app.add_subcommand("make-instance", "Write the configured instance");
  make->add_flag("--print-defaults", print_defaults, "Print the default config and exit");
  app.add_subcommand("schedule-optimal", "Optimal schedule by the closed-form construction");
  app.add_subcommand("schedule-learn", "Variance-minimizing schedule learning");
  auto* curves = app.add_subcommand("loss-curves", "Per-timestep diffusion and cross-entropy losses");
  curves->add_option("--schedule", schedule_path, "Schedule JSON (defaults to the instance schedule)");
  app.add_subcommand("info-curves", "Information, total correlation and decomposition");
  auto* sample = app.add_subcommand("sample", "Draw samples with every configured sampler");
  sample->add_option("--schedule", schedule_path, "Schedule JSON");
  auto* lik = app.add_subcommand("likelihood", "Importance-weighted likelihood, sensitivity and chain-rule studies");
  lik->add_option("--schedule", schedule_path, "Schedule JSON");
  app.add_subcommand("train", "Train the toy denoiser");
  auto* scaling = app.add_subcommand("scaling-fit", "IsoFLOP and power-law fits from a CSV");
  scaling->add_option("--input", input_path, "CSV with C,N,loss[,group]");
  auto* verify = app.add_subcommand("verify", "Run the acceptance suite");
  verify->add_option("--only", only, "Subset of check ids");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  Context ctx;
  ctx.command = app.get_subcommands().front()->get_name();
  ctx.out = &out;
  try {
    if (print_defaults) {
      out << default_config().dump(2) << "\n";
      return kOk;
    }
    ctx.config = load_config(config_path, overrides);
    if (seed) ctx.config["seed"] = *seed;
    if (workers) ctx.config["workers"] = *workers;
    ctx.seed = ctx.config.at("seed").get<std::uint64_t>();
    ctx.workers = std::max(1u, ctx.config.at("workers").get<unsigned>());
    ctx.out_dir = out_dir;
    ctx.schedule_path = schedule_path;
    ctx.input_path = input_path;
    ctx.only = only;
    for (int id : only)
      if (id < 1 || id > kCheckCount) throw UsageError("--only ids must lie in 1.." + std::to_string(kCheckCount));

    const auto start = std::chrono::steady_clock::now();
    json summary;
    bool all_pass = true;
    const std::string& c = ctx.command;
    if (c == "make-instance") summary = cmd_make_instance(ctx);
    else if (c == "schedule-optimal") summary = cmd_schedule_optimal(ctx);
    else if (c == "schedule-learn") summary = cmd_schedule_learn(ctx);
    else if (c == "loss-curves") summary = cmd_loss_curves(ctx);
    else if (c == "info-curves") summary = cmd_info_curves(ctx);
    else if (c == "sample") summary = cmd_sample(ctx);
    else if (c == "likelihood") summary = cmd_likelihood(ctx);
    else if (c == "train") summary = cmd_train(ctx);
    else if (c == "scaling-fit") summary = cmd_scaling_fit(ctx);
    else summary = cmd_verify(ctx, all_pass);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    ctx.write("manifest.json", manifest(ctx, wall).dump(2) + "\n");
    if (c != "verify") out << summary.dump(2) << "\n";
    return all_pass ? kOk : kAcceptance;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kNumerical;
  }
}

}  // namespace difflab::cli
