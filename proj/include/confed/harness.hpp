#pragma once

// Experiment orchestration: flat key=value configs, single runs with metric
// traces and invariant monitors, sweeps, and trace reports.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "confed/engine.hpp"
#include "confed/errors.hpp"
#include "confed/problem.hpp"
#include "confed/theory.hpp"
#include "confed/topology.hpp"
#include "confed/trace.hpp"

namespace confed {

using KeyValues = std::map<std::string, std::string>;

struct ExperimentConfig {
  GraphKind topology = GraphKind::random;
  std::size_t n_servers = 20;
  std::optional<double> edge_prob = 0.3;
  std::optional<double> tau;  // nullopt: lambda_max(L)
  DatasetConfig dataset;
  Algorithm algorithm = Algorithm::cfl_saga;
  std::optional<double> alpha;  // nullopt: certified threshold
  double rho = 10.0;
  std::size_t sample_count = 9;
  long max_rounds = 200000;
  double stop_gap = 1e-8;
  std::uint64_t seed = 1;
  bool d_metric = false;
  bool monitor = true;
  long psi_stride = 1;
  long trace_stride = 1;
  long refresh_rounds = 1000;
  double near_fraction = 1e-3;

  void validate() const {
    dataset.validate();
    if (dataset.n_servers != n_servers) throw ConfigError("config: dataset/topology server counts differ");
    if (n_servers == 0) throw ConfigError("config: topology.n must be positive");
    if (topology == GraphKind::random && n_servers > 1 &&
        (!edge_prob || !(*edge_prob > 0.0 && *edge_prob <= 1.0)))
      throw ConfigError("config: topology.edge_prob must be in (0, 1]");
    if (alpha && !(*alpha > 0.0)) throw ConfigError("config: alpha must be positive");
    if (algorithm == Algorithm::cfl_saga && !(rho >= 0.0))
      throw ConfigError("config: rho must be nonnegative");
    if (algorithm == Algorithm::gt_saga &&
        (sample_count < 1 || sample_count > dataset.users_per_server))
      throw ConfigError("config: sample_count must be in [1, users_per_server]");
    if (max_rounds < 1) throw ConfigError("config: max_rounds must be positive");
    if (!(stop_gap > 0.0)) throw ConfigError("config: stop_gap must be positive");
    if (psi_stride < 1 || trace_stride < 1 || refresh_rounds < 1)
      throw ConfigError("config: strides must be positive");
    if (!(near_fraction > 0.0 && near_fraction <= 1.0))
      throw ConfigError("config: metrics.near_fraction must be in (0, 1]");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size() || !std::isfinite(out))
    throw ConfigError("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

inline long to_long(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d != std::floor(d) || std::abs(d) > 9e15)
    throw ConfigError("config: " + key + " expects an integer, got '" + v + "'");
  return static_cast<long>(d);
}

inline std::size_t to_count(const std::string& key, const std::string& v) {
  const long n = to_long(key, v);
  if (n < 0) throw ConfigError("config: " + key + " must be nonnegative");
  return static_cast<std::size_t>(n);
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ConfigError("config: " + key + " expects true/false, got '" + v + "'");
}

inline std::string fmt(double v) { return fmt_double(v); }

}  // namespace detail

/// Parses "key = value" lines; '#' starts a comment line.
inline KeyValues parse_key_values(std::istream& is) {
  KeyValues kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(t.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (kv.count(key)) throw ConfigError("config: duplicate key '" + key + "'");
    kv[key] = detail::trim(t.substr(eq + 1));
  }
  return kv;
}

/// Applies "key=value" overrides; an empty value removes the key.
inline void apply_overrides(KeyValues& kv, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    const std::string key = detail::trim(s.substr(0, eq));
    const std::string val = detail::trim(s.substr(eq + 1));
    if (val.empty()) kv.erase(key);
    else kv[key] = val;
  }
}

inline ExperimentConfig config_from_key_values(const KeyValues& kv) {
  ExperimentConfig c;
  const auto get = [&](const std::string& k) -> const std::string* {
    const auto it = kv.find(k);
    return it == kv.end() ? nullptr : &it->second;
  };
  static const char* known[] = {
      "topology.kind",           "topology.n",          "topology.edge_prob",
      "topology.tau",            "dataset.users_per_server", "dataset.minibatches_per_user",
      "dataset.batch_size",      "dataset.dim",         "dataset.kappa",
      "dataset.feature_scale",   "dataset.label_prob",  "algorithm",
      "alpha",                   "rho",                 "sample_count",
      "sampling_rate",           "max_rounds",          "stop_gap",
      "seed",                    "metrics.d_metric",    "metrics.monitor",
      "metrics.psi_stride",      "metrics.trace_stride", "metrics.refresh_rounds",
      "metrics.near_fraction"};
  for (const auto& [k, v] : kv) {
    (void)v;
    if (std::find_if(std::begin(known), std::end(known), [&](const char* s) { return k == s; }) ==
        std::end(known))
      throw ConfigError("config: unknown key '" + k + "'");
  }

  if (auto v = get("topology.kind")) c.topology = parse_graph_kind(*v);
  if (auto v = get("topology.n")) c.n_servers = detail::to_count("topology.n", *v);
  if (c.topology != GraphKind::random) c.edge_prob.reset();
  if (auto v = get("topology.edge_prob")) {
    if (c.topology != GraphKind::random)
      throw ConfigError("config: topology.edge_prob only applies to random graphs");
    c.edge_prob = detail::to_double("topology.edge_prob", *v);
  }
  if (auto v = get("topology.tau"); v && *v != "auto") c.tau = detail::to_double("topology.tau", *v);

  auto& d = c.dataset;
  d.n_servers = c.n_servers;
  if (auto v = get("dataset.users_per_server")) d.users_per_server = detail::to_count("dataset.users_per_server", *v);
  if (auto v = get("dataset.minibatches_per_user")) d.minibatches_per_user = detail::to_count("dataset.minibatches_per_user", *v);
  if (auto v = get("dataset.batch_size")) d.batch_size = detail::to_count("dataset.batch_size", *v);
  if (auto v = get("dataset.dim")) d.dim = detail::to_count("dataset.dim", *v);
  if (auto v = get("dataset.kappa")) d.kappa = detail::to_double("dataset.kappa", *v);
  if (auto v = get("dataset.feature_scale")) d.feature_scale = detail::to_double("dataset.feature_scale", *v);
  if (auto v = get("dataset.label_prob")) d.label_prob = detail::to_double("dataset.label_prob", *v);

  if (auto v = get("algorithm")) c.algorithm = parse_algorithm(*v);
  if (auto v = get("alpha"); v && *v != "auto") c.alpha = detail::to_double("alpha", *v);

  const bool has_rho = get("rho") != nullptr;
  const bool has_sc = get("sample_count") != nullptr;
  const bool has_sr = get("sampling_rate") != nullptr;
  switch (c.algorithm) {
    case Algorithm::cfl_saga:
      if (!has_rho) throw ConfigError("config: cfl-saga requires rho");
      if (has_sc || has_sr) throw ConfigError("config: sample_count/sampling_rate belong to gt-saga");
      c.rho = detail::to_double("rho", *get("rho"));
      break;
    case Algorithm::gt_saga:
      if (has_rho) throw ConfigError("config: rho belongs to cfl-saga");
      if (has_sc == has_sr)
        throw ConfigError("config: gt-saga requires exactly one of sample_count, sampling_rate");
      if (has_sc) {
        c.sample_count = detail::to_count("sample_count", *get("sample_count"));
      } else {
        const double sr = detail::to_double("sampling_rate", *get("sampling_rate"));
        if (!(sr > 0.0 && sr <= 1.0)) throw ConfigError("config: sampling_rate must be in (0, 1]");
        c.sample_count = static_cast<std::size_t>(
            std::llround(sr * static_cast<double>(d.users_per_server)));
      }
      break;
    case Algorithm::gt:
      if (has_rho || has_sc || has_sr)
        throw ConfigError("config: gt takes no rho/sample_count/sampling_rate");
      break;
  }

  if (auto v = get("max_rounds")) c.max_rounds = detail::to_long("max_rounds", *v);
  if (auto v = get("stop_gap")) c.stop_gap = detail::to_double("stop_gap", *v);
  if (auto v = get("seed")) c.seed = static_cast<std::uint64_t>(detail::to_count("seed", *v));
  if (auto v = get("metrics.d_metric")) c.d_metric = detail::to_bool("metrics.d_metric", *v);
  if (auto v = get("metrics.monitor")) c.monitor = detail::to_bool("metrics.monitor", *v);
  if (auto v = get("metrics.psi_stride")) c.psi_stride = detail::to_long("metrics.psi_stride", *v);
  if (auto v = get("metrics.trace_stride")) c.trace_stride = detail::to_long("metrics.trace_stride", *v);
  if (auto v = get("metrics.refresh_rounds")) c.refresh_rounds = detail::to_long("metrics.refresh_rounds", *v);
  if (auto v = get("metrics.near_fraction")) c.near_fraction = detail::to_double("metrics.near_fraction", *v);
  c.validate();
  return c;
}

/// Fully resolved config, one key per line, sorted.
inline KeyValues to_key_values(const ExperimentConfig& c) {
  KeyValues kv;
  kv["topology.kind"] = std::string(to_string(c.topology));
  kv["topology.n"] = std::to_string(c.n_servers);
  if (c.topology == GraphKind::random && c.edge_prob) kv["topology.edge_prob"] = detail::fmt(*c.edge_prob);
  kv["topology.tau"] = c.tau ? detail::fmt(*c.tau) : "auto";
  kv["dataset.users_per_server"] = std::to_string(c.dataset.users_per_server);
  kv["dataset.minibatches_per_user"] = std::to_string(c.dataset.minibatches_per_user);
  kv["dataset.batch_size"] = std::to_string(c.dataset.batch_size);
  kv["dataset.dim"] = std::to_string(c.dataset.dim);
  kv["dataset.kappa"] = detail::fmt(c.dataset.kappa);
  kv["dataset.feature_scale"] = detail::fmt(c.dataset.feature_scale);
  kv["dataset.label_prob"] = detail::fmt(c.dataset.label_prob);
  kv["algorithm"] = std::string(to_string(c.algorithm));
  kv["alpha"] = c.alpha ? detail::fmt(*c.alpha) : "auto";
  if (c.algorithm == Algorithm::cfl_saga) kv["rho"] = detail::fmt(c.rho);
  if (c.algorithm == Algorithm::gt_saga) kv["sample_count"] = std::to_string(c.sample_count);
  kv["max_rounds"] = std::to_string(c.max_rounds);
  kv["stop_gap"] = detail::fmt(c.stop_gap);
  kv["seed"] = std::to_string(c.seed);
  kv["metrics.d_metric"] = c.d_metric ? "true" : "false";
  kv["metrics.monitor"] = c.monitor ? "true" : "false";
  kv["metrics.psi_stride"] = std::to_string(c.psi_stride);
  kv["metrics.trace_stride"] = std::to_string(c.trace_stride);
  kv["metrics.refresh_rounds"] = std::to_string(c.refresh_rounds);
  kv["metrics.near_fraction"] = detail::fmt(c.near_fraction);
  return kv;
}

inline void write_key_values(std::ostream& os, const KeyValues& kv) {
  for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
}

inline ExperimentConfig load_config(const std::filesystem::path& path,
                                    const std::vector<std::string>& sets = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  KeyValues kv = parse_key_values(in);
  apply_overrides(kv, sets);
  return config_from_key_values(kv);
}

/// Everything a run needs that does not depend on the algorithm state.
struct Problem {
  Dataset ds;
  MixingMatrix w;
  std::optional<ServerGraph> graph;
  Curvature curv;
  ModelVector x_star;
  double x_star_grad_norm = 0.0;
};

inline Problem build_problem(const ExperimentConfig& c) {
  c.validate();
  Problem p;
  if (c.n_servers == 1) {
    p.w = MixingMatrix::single_server();
  } else {
    p.graph = build_graph(c.topology, c.n_servers,
                          c.topology == GraphKind::random ? c.edge_prob : std::nullopt, c.seed);
    p.w = mixing_matrix(*p.graph, c.tau);
  }
  p.ds = synthesize_dataset(c.dataset, c.seed);
  p.curv = curvature(p.ds);
  const SolveResult sol = solve_centralized(p.ds, 1e-10, std::nullopt, p.curv);
  p.x_star = sol.x;
  p.x_star_grad_norm = sol.grad_norm;
  return p;
}

/// Theory inputs for a config: P = users per server, S = minibatches per user.
inline double theory_rho(const ExperimentConfig& c) {
  return c.algorithm == Algorithm::cfl_saga ? c.rho : 0.0;
}

inline AlphaCertificate certify_alpha(const ExperimentConfig& c, const Problem& p) {
  return find_alpha_threshold(p.curv.mu, p.curv.lip, p.w.sigma, theory_rho(c),
                              static_cast<double>(c.n_servers),
                              static_cast<double>(c.dataset.users_per_server),
                              static_cast<double>(c.dataset.minibatches_per_user));
}

struct InvariantSummary {
  double max_dac = 0.0;             // ||ybar - gbar|| / (1 + ||gbar||)
  double max_mean_dynamics = 0.0;   // ||xbar' - (xbar - a ybar)|| / (1 + ||xbar'||)
  double max_aggregate = 0.0;       // g_i vs sum of server-known user gradients (CFL-SAGA)
  double max_table_sum = 0.0;       // running sums vs recomputed sums
  double min_consensus_rel = 0.0;     // min margin / (1 + rhs)
  std::uint64_t consensus_violations = 0;
  long checked_rounds = 0;
};

struct RunResult {
  ExperimentConfig config;
  double alpha = 0.0;
  std::optional<AlphaCertificate> certificate;
  TheoryConstants constants;
  SpectralReport spectral;
  Curvature curv;
  double sigma = 0.0;
  double tau = 0.0;
  double x_star_norm = 0.0;
  MetricsTrace trace;
  std::vector<CtusRecord> ctus;
  CommLedger comm;
  InvariantSummary invariants;
  bool converged = false;
  long rounds = 0;
  double final_opg = 0.0;
  std::optional<long> rounds_to_target;
  std::optional<std::uint64_t> uploads_to_target;
  std::optional<RateFit> rate_fit;
  std::optional<PruneReport> prune;
  std::optional<DivergenceError> divergence;
};

inline constexpr double kConsensusTolerance = 1e-9;

/// Runs one experiment. Divergence is caught and recorded in the result.
inline RunResult run(const ExperimentConfig& c, const Problem& p) {
  RunResult r;
  r.config = c;
  r.curv = p.curv;
  r.sigma = p.w.sigma;
  r.tau = p.w.tau;
  r.x_star_norm = p.x_star.norm();
  if (c.alpha) {
    r.alpha = *c.alpha;
  } else {
    r.certificate = certify_alpha(c, p);
    r.alpha = r.certificate->alpha;
  }
  if (p.curv.mu <= p.curv.lip && p.w.sigma < 1.0) {
    r.constants = compute_constants(p.curv.mu, p.curv.lip, p.w.sigma, r.alpha, theory_rho(c),
                                    static_cast<double>(c.n_servers),
                                    static_cast<double>(c.dataset.users_per_server),
                                    static_cast<double>(c.dataset.minibatches_per_user));
    r.spectral = spectral_radius(transition_matrix(r.constants));
  }

  EngineOptions eo;
  eo.seed = c.seed;
  eo.track_phi = c.d_metric;
  eo.refresh_rounds = c.refresh_rounds;
  ClusterState st = init_state(p.ds, p.w, eo);
  const TriggerPolicy policy{c.rho};
  const auto lip_sq = c.d_metric && c.algorithm == Algorithm::cfl_saga
                          ? minibatch_lipschitz_squares(p.ds)
                          : std::vector<double>{};

  PsiVector psi = psi_metrics(st, p.x_star);
  std::optional<double> table_prev = psi.table_gap;  // D^{k-1} for the next row
  const auto psi_row = [&](TraceRow& row, const PsiVector& now, std::optional<double> d_prev) {
    if (!c.d_metric || row.round % c.psi_stride != 0) return;
    row.x_gap = now.x_gap;
    row.mean_gap = now.mean_gap;
    row.table_gap = d_prev;
    row.y_gap = now.y_gap;
  };

  TraceRow row0;
  row0.opg = optimality_gap(st, p.x_star);
  psi_row(row0, psi, std::nullopt);
  r.trace.rows.push_back(row0);
  if (row0.opg <= c.stop_gap) {
    r.rounds_to_target = 0;
    r.uploads_to_target = 0;
  }

  ModelVector xbar_prev = st.x_mean();
  ModelVector ybar_prev = st.y_mean();
  double x_prev = psi.x_gap, y_prev = psi.y_gap;
  r.invariants.min_consensus_rel = std::numeric_limits<double>::infinity();

  try {
    for (long k = 1; k <= c.max_rounds; ++k) {
      std::uint64_t triggers = 0;
      switch (c.algorithm) {
        case Algorithm::gt:
          triggers = gt_round(st, p.ds, p.w, r.alpha).uploads;
          break;
        case Algorithm::gt_saga:
          triggers = gt_saga_round(st, p.ds, p.w, r.alpha, c.sample_count).uploads;
          break;
        case Algorithm::cfl_saga:
          triggers = cfl_saga_round(st, p.ds, p.w, r.alpha, policy).uploads;
          break;
      }
      const double opg = optimality_gap(st, p.x_star);
      psi = psi_metrics(st, p.x_star);
      const bool last = opg <= c.stop_gap || k == c.max_rounds;

      TraceRow row;
      row.round = k;
      row.opg = opg;
      row.vrsg_uploads = st.comm.vrsg_uploads;
      row.server_broadcasts = st.comm.server_broadcasts;
      row.triggers = triggers;
      psi_row(row, psi, table_prev);

      if (c.monitor) {
        auto& inv = r.invariants;
        const double margin = consensus_margin(x_prev, y_prev, psi.x_gap, p.w.sigma, r.alpha);
        const double rhs = margin + psi.x_gap;
        const double rel = margin / (1.0 + rhs);
        inv.min_consensus_rel = std::min(inv.min_consensus_rel, rel);
        if (rel < -kConsensusTolerance) ++inv.consensus_violations;
        row.consensus_margin = margin;
        inv.max_dac = std::max(inv.max_dac, dac_residual(st));
        const ModelVector xbar = st.x_mean();
        const ModelVector expect = xbar_prev - r.alpha * ybar_prev;
        inv.max_mean_dynamics =
            std::max(inv.max_mean_dynamics, (xbar - expect).norm() / (1.0 + xbar.norm()));
        if (c.algorithm == Algorithm::cfl_saga)
          inv.max_aggregate = std::max(inv.max_aggregate, server_aggregate_residual(st));
        if (c.algorithm != Algorithm::gt)
          inv.max_table_sum = std::max(inv.max_table_sum, table_sum_residual(st));
        ++inv.checked_rounds;
        xbar_prev = xbar;
        ybar_prev = st.y_mean();
      }
      x_prev = psi.x_gap;
      y_prev = psi.y_gap;
      table_prev = psi.table_gap;

      if (c.algorithm == Algorithm::cfl_saga) {
        CtusRecord rec;
        rec.round = k;
        rec.opg = opg;
        rec.users = st.last.users;
        rec.uploads = st.last.uploads;
        rec.pruned_at_ratio = pruned_at_ratio(st.last, c.dataset.users_per_server);
        rec.sum_delta_sq = st.last.sum_delta_sq;
        rec.sum_threshold_sq = st.last.sum_threshold_sq;
        if (c.d_metric && k % c.psi_stride == 0) rec.lk = table_lipschitz(st, p.x_star, lip_sq);
        r.ctus.push_back(rec);
      }
      if (last || k % c.trace_stride == 0) r.trace.rows.push_back(row);
      r.rounds = k;
      r.final_opg = opg;
      if (opg <= c.stop_gap) {
        r.converged = true;
        r.rounds_to_target = k;
        r.uploads_to_target = st.comm.vrsg_uploads;
        break;
      }
    }
  } catch (const DivergenceError& e) {
    r.divergence = e;
    r.rounds = e.round();
  }
  if (r.trace.rows.size() == 1) r.final_opg = row0.opg;
  r.comm = st.comm;
  if (r.invariants.checked_rounds == 0) r.invariants.min_consensus_rel = 0.0;

  try {
    const long first = std::min<long>(100, r.trace.rows.back().round / 2);
    r.rate_fit = linear_rate_fit(r.trace, first, c.stop_gap);
  } catch (const ConfigError&) {
  }
  if (c.algorithm == Algorithm::cfl_saga && !r.ctus.empty()) {
    try {
      r.prune = ctus_prune_check(r.ctus, row0.opg, c.n_servers, c.dataset.users_per_server,
                                 c.dataset.minibatches_per_user, c.near_fraction);
    } catch (const ConfigError&) {
    }
  }
  return r;
}

inline RunResult run(const ExperimentConfig& c) { return run(c, build_problem(c)); }

namespace detail {

inline nlohmann::json num(double v) {
  if (std::isfinite(v)) return v;
  return v > 0 ? "inf" : (v < 0 ? "-inf" : "nan");
}

}  // namespace detail

inline nlohmann::json theory_json(const TheoryConstants& k, const SpectralReport& s,
                                  const std::optional<AlphaCertificate>& cert) {
  using detail::num;
  nlohmann::json j;
  j["inputs"] = {{"mu", num(k.mu)},       {"lip", num(k.lip)}, {"sigma", num(k.sigma)},
                 {"alpha", num(k.alpha)}, {"rho", num(k.rho)}, {"n", num(k.n)},
                 {"p_max", num(k.p_max)}, {"s_max", num(k.s_max)}};
  j["constants"] = {{"c1", num(k.c1)}, {"c2", num(k.c2)}, {"c3", num(k.c3)},
                    {"b1", num(k.b1)}, {"b2", num(k.b2)}, {"b3", num(k.b3)},
                    {"b_bar", num(k.b_bar)}, {"a1", num(k.a1)}, {"a2", num(k.a2)},
                    {"a3", num(k.a3)}, {"a4", num(k.a4)}, {"gamma", num(k.gamma)}};
  j["spectral_radius"] = {{"estimate", num(s.rho)},
                          {"lower", num(s.rho_lower)},
                          {"upper", num(s.rho_upper)},
                          {"largest_singular_value", num(s.singular)}};
  if (cert) {
    j["certified_alpha"] = num(cert->alpha);
    j["certified_target"] = num(cert->target);
    j["certified_rho_upper"] = num(cert->spectral.rho_upper);
  }
  return j;
}

inline nlohmann::json fit_json(const RateFit& f) {
  using detail::num;
  return {{"slope", num(f.slope)},
          {"contraction", num(f.contraction())},
          {"r_squared", num(f.r_squared)},
          {"points", f.points}};
}

inline nlohmann::json prune_json(const PruneReport& p) {
  using detail::num;
  nlohmann::json j = {{"rounds", p.rounds},
                      {"degenerate_rounds", p.degenerate_rounds},
                      {"mean_ratio", num(p.mean_ratio)},
                      {"ratio_finite", p.ratio_finite},
                      {"non_trigger_fraction", num(p.non_trigger_fraction)},
                      {"pruned_at_ratio_fraction", num(p.pruned_at_ratio_fraction)},
                      {"ratio_rho_prunes_at_least_observed", p.ratio_rho_prunes_at_least_observed}};
  j["l_bar"] = p.l_bar ? num(*p.l_bar) : nlohmann::json(nullptr);
  j["c3_floor"] = p.c3_floor ? num(*p.c3_floor) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json run_report_json(const RunResult& r) {
  using detail::num;
  nlohmann::json j;
  j["algorithm"] = std::string(to_string(r.config.algorithm));
  j["alpha"] = num(r.alpha);
  j["mu"] = num(r.curv.mu);
  j["lip"] = num(r.curv.lip);
  j["sigma"] = num(r.sigma);
  j["tau"] = num(r.tau);
  j["x_star_norm"] = num(r.x_star_norm);
  j["rounds"] = r.rounds;
  j["converged"] = r.converged;
  j["final_opg"] = num(r.final_opg);
  j["rounds_to_target"] = r.rounds_to_target ? nlohmann::json(*r.rounds_to_target) : nlohmann::json(nullptr);
  j["uploads_to_target"] = r.uploads_to_target ? nlohmann::json(*r.uploads_to_target) : nlohmann::json(nullptr);
  j["comm"] = {{"vrsg_uploads", r.comm.vrsg_uploads},
               {"server_broadcasts", r.comm.server_broadcasts},
               {"threshold_broadcasts", r.comm.threshold_broadcasts}};
  const auto& inv = r.invariants;
  j["invariants"] = {{"checked_rounds", inv.checked_rounds},
                     {"max_dac", num(inv.max_dac)},
                     {"max_mean_dynamics", num(inv.max_mean_dynamics)},
                     {"max_aggregate", num(inv.max_aggregate)},
                     {"max_table_sum", num(inv.max_table_sum)},
                     {"min_consensus_relative_margin", num(inv.min_consensus_rel)},
                     {"consensus_violations", inv.consensus_violations}};
  j["rate_fit"] = r.rate_fit ? fit_json(*r.rate_fit) : nlohmann::json(nullptr);
  j["prune_check"] = r.prune ? prune_json(*r.prune) : nlohmann::json(nullptr);
  if (r.divergence) j["divergence"] = {{"round", r.divergence->round()}, {"what", r.divergence->what()}};
  j["theory"] = theory_json(r.constants, r.spectral, r.certificate);
  return j;
}

/// Writes <dir>/<name>.{trace.csv,config,report.json,theory.json} and, for
/// CFL-SAGA, <name>.ctus.csv.
inline void write_run_outputs(const std::filesystem::path& dir, const std::string& name,
                              const RunResult& r) {
  std::filesystem::create_directories(dir);
  const auto open = [&](const std::string& suffix) {
    std::ofstream os(dir / (name + suffix), std::ios::binary);
    if (!os) throw ConfigError("cannot write '" + (dir / (name + suffix)).string() + "'");
    return os;
  };
  {
    auto os = open(".trace.csv");
    write_trace(os, r.trace);
  }
  {
    auto os = open(".config");
    write_key_values(os, to_key_values(r.config));
  }
  if (!r.ctus.empty()) {
    auto os = open(".ctus.csv");
    write_ctus_log(os, r.ctus);
  }
  {
    auto os = open(".theory.json");
    os << theory_json(r.constants, r.spectral, r.certificate).dump(2) << '\n';
  }
  {
    auto os = open(".report.json");
    os << run_report_json(r).dump(2) << '\n';
  }
}

enum class SweepAxis { rho, sampling_rate, topology };

inline SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "rho") return SweepAxis::rho;
  if (s == "sr" || s == "sampling_rate") return SweepAxis::sampling_rate;
  if (s == "topology") return SweepAxis::topology;
  throw ConfigError("unknown sweep axis '" + s + "' (rho, sr, topology)");
}

struct SweepCell {
  std::string value;
  std::size_t seeds = 0;
  std::size_t converged = 0;
  double mean_rounds = 0.0;           // over converged seeds
  double mean_uploads = 0.0;          // over converged seeds
  double mean_trigger_fraction = 0.0; // uploads / (users * rounds), all seeds
  std::string status = "ok";
  std::vector<RunResult> runs;
};

/// Runs every (value, seed) pair. Cells that error or miss the target are
/// marked rather than aborting the sweep.
inline std::vector<SweepCell> sweep(const ExperimentConfig& base, SweepAxis axis,
                                    const std::vector<std::string>& values,
                                    const std::vector<std::uint64_t>& seeds) {
  if (values.empty()) throw ConfigError("sweep: axis has no values");
  if (seeds.empty()) throw ConfigError("sweep: seed list is empty");
  std::vector<SweepCell> out;
  for (const auto& v : values) {
    SweepCell cell;
    cell.value = v;
    cell.seeds = seeds.size();
    double rounds = 0.0, uploads = 0.0, frac = 0.0;
    std::vector<std::string> errors;
    for (auto seed : seeds) {
      try {
        KeyValues kv = to_key_values(base);
        kv["seed"] = std::to_string(seed);
        switch (axis) {
          case SweepAxis::rho:
            kv["rho"] = v;
            break;
          case SweepAxis::sampling_rate:
            kv.erase("sample_count");
            kv["sampling_rate"] = v;
            break;
          case SweepAxis::topology:
            kv["topology.kind"] = v;
            if (v == "random" && !kv.count("topology.edge_prob"))
              kv["topology.edge_prob"] = detail::fmt(base.edge_prob.value_or(0.3));
            if (v != "random") kv.erase("topology.edge_prob");
            break;
        }
        RunResult r = run(config_from_key_values(kv));
        const double users = static_cast<double>(r.config.dataset.users());
        if (r.rounds > 0)
          frac += static_cast<double>(r.comm.vrsg_uploads) / (users * static_cast<double>(r.rounds));
        if (r.divergence) errors.push_back("diverged");
        else if (!r.converged) errors.push_back("not-converged");
        if (r.converged) {
          ++cell.converged;
          rounds += static_cast<double>(*r.rounds_to_target);
          uploads += static_cast<double>(*r.uploads_to_target);
        }
        cell.runs.push_back(std::move(r));
      } catch (const std::exception& e) {
        errors.push_back(std::string("error: ") + e.what());
      }
    }
    if (cell.converged) {
      cell.mean_rounds = rounds / static_cast<double>(cell.converged);
      cell.mean_uploads = uploads / static_cast<double>(cell.converged);
    }
    cell.mean_trigger_fraction = frac / static_cast<double>(seeds.size());
    if (!errors.empty()) {
      cell.status = "failed(";
      for (std::size_t i = 0; i < errors.size(); ++i) cell.status += (i ? ";" : "") + errors[i];
      cell.status += ")";
    }
    out.push_back(std::move(cell));
  }
  return out;
}

inline void write_sweep_summary(std::ostream& os, const std::string& axis,
                                const std::vector<SweepCell>& cells) {
  os << "axis,value,seeds,converged,mean_rounds,mean_uploads,mean_trigger_fraction,status\n";
  for (const auto& c : cells)
    os << axis << ',' << c.value << ',' << c.seeds << ',' << c.converged << ','
       << (c.converged ? detail::fmt(c.mean_rounds) : "") << ','
       << (c.converged ? detail::fmt(c.mean_uploads) : "") << ','
       << detail::fmt(c.mean_trigger_fraction) << ',' << c.status << '\n';
}

/// Analysis of one trace (plus optional CTUS log and theory block). Contains
/// nothing derived from file names, so equal traces give equal reports.
inline nlohmann::json trace_report(const MetricsTrace& t,
                                   const std::optional<std::vector<CtusRecord>>& ctus,
                                   const std::optional<nlohmann::json>& theory,
                                   std::size_t n_servers = 0, std::size_t p_max = 0,
                                   std::size_t s_max = 0) {
  using detail::num;
  if (t.rows.empty()) throw FormatError("trace has no rows");
  nlohmann::json j;
  j["rows"] = t.rows.size();
  j["first_round"] = t.rows.front().round;
  j["last_round"] = t.rows.back().round;
  j["initial_opg"] = num(t.rows.front().opg);
  j["final_opg"] = num(t.rows.back().opg);
  try {
    const long first = std::min<long>(100, t.rows.back().round / 2);
    j["rate_fit"] = fit_json(linear_rate_fit(t, first));
  } catch (const ConfigError& e) {
    j["rate_fit"] = {{"error", e.what()}};
  }
  nlohmann::json table = nlohmann::json::array();
  for (double target : {1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8}) {
    nlohmann::json row = {{"opg", target}, {"round", nullptr}, {"vrsg_uploads", nullptr}};
    for (const auto& r : t.rows)
      if (r.opg <= target) {
        row["round"] = r.round;
        row["vrsg_uploads"] = r.vrsg_uploads;
        break;
      }
    table.push_back(row);
  }
  j["uploads_to_accuracy"] = table;
  if (ctus && !ctus->empty() && n_servers > 0) {
    try {
      j["prune_check"] = prune_json(ctus_prune_check(*ctus, t.rows.front().opg, n_servers, p_max, s_max));
    } catch (const ConfigError& e) {
      j["prune_check"] = {{"error", e.what()}};
    }
  }
  if (theory) j["theory"] = *theory;
  return j;
}

/// Loads <stem>.trace.csv and any companions (<stem>.ctus.csv,
/// <stem>.theory.json, <stem>.config) and reports on them.
inline nlohmann::json report_file(const std::filesystem::path& trace_path) {
  std::ifstream in(trace_path, std::ios::binary);
  if (!in) throw FormatError("cannot open trace '" + trace_path.string() + "'");
  const MetricsTrace t = read_trace(in);
  std::string stem = trace_path.filename().string();
  const std::string suffix = ".trace.csv";
  std::optional<std::vector<CtusRecord>> ctus;
  std::optional<nlohmann::json> theory;
  std::size_t n = 0, p = 0, s = 0;
  if (stem.size() > suffix.size() && stem.ends_with(suffix)) {
    stem.resize(stem.size() - suffix.size());
    const auto dir = trace_path.parent_path();
    if (std::ifstream cs(dir / (stem + ".ctus.csv"), std::ios::binary); cs) ctus = read_ctus_log(cs);
    if (std::ifstream th(dir / (stem + ".theory.json")); th) {
      try {
        theory = nlohmann::json::parse(th);
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("theory companion: ") + e.what());
      }
    }
    if (std::ifstream cf(dir / (stem + ".config")); cf) {
      const ExperimentConfig c = config_from_key_values(parse_key_values(cf));
      n = c.n_servers;
      p = c.dataset.users_per_server;
      s = c.dataset.minibatches_per_user;
    }
  }
  return trace_report(t, ctus, theory, n, p, s);
}

}  // namespace confed
