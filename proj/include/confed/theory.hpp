#pragma once

// Convergence machinery for CFL-SAGA: the psi = (X, Xbar, D, Y) metrics, the
// constants and 4x4 transition matrix of the psi recursion, a numeric
// stepsize certificate, log-linear rate fits and the CTUS pruning report.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "confed/engine.hpp"
#include "confed/errors.hpp"
#include "confed/linalg.hpp"
#include "confed/problem.hpp"
#include "confed/topology.hpp"
#include "confed/trace.hpp"

namespace confed {

struct PsiVector {
  double x_gap = 0.0;                // X = ||x - W_inf x||^2
  double mean_gap = 0.0;             // Xbar = ||xbar - x*||^2
  std::optional<double> table_gap;   // D = sum_{i,j,t} ||x* - phi_ijt||^2
  double y_gap = 0.0;                // Y = ||y - W_inf y||^2
};

/// X, Xbar and Y of the current iterates; `table_gap` is D over the tables as
/// they stand now (so D^k after round k; psi^k pairs it with the next round's
/// X, Xbar, Y). Absent when the tables do not keep their phi points.
inline PsiVector psi_metrics(const ClusterState& st, VecIn x_star) {
  if (x_star.size() != st.x.rows())
    throw ConfigError("psi_metrics: x_star has dimension " + std::to_string(x_star.size()) +
                      ", model has " + std::to_string(st.x.rows()));
  PsiVector p;
  const ModelVector xbar = st.x_mean();
  const ModelVector ybar = st.y_mean();
  p.x_gap = (st.x.colwise() - xbar).squaredNorm();
  p.y_gap = (st.y.colwise() - ybar).squaredNorm();
  p.mean_gap = (xbar - x_star).squaredNorm();
  bool have_phi = true;
  double d = 0.0;
  for (const auto& srv : st.servers)
    for (const auto& u : srv.users) {
      if (u.phi_points.size() == 0) {
        have_phi = false;
        break;
      }
      d += (u.phi_points.colwise() - x_star).squaredNorm();
    }
  if (have_phi && !st.servers.empty()) p.table_gap = d;
  return p;
}

/// opg = ||x - 1 (x) x*|| / sqrt(N).
inline double optimality_gap(const ClusterState& st, VecIn x_star) {
  return (st.x.colwise() - x_star).norm() / std::sqrt(static_cast<double>(st.x.cols()));
}

/// L_k = sum_ij 4 S^2 sum_t (L_ijt^2 / S) ||phi_ijt - x*||^2 / D^k.
/// `lip_sq` holds L_ijt^2, laid out like the dataset's minibatches.
inline std::optional<double> table_lipschitz(const ClusterState& st, VecIn x_star,
                                             const std::vector<double>& lip_sq) {
  double num = 0.0;
  double den = 0.0;
  std::size_t idx = 0;
  for (const auto& srv : st.servers)
    for (const auto& u : srv.users) {
      if (u.phi_points.size() == 0) return std::nullopt;
      const auto s = static_cast<double>(u.phi_points.cols());
      for (Eigen::Index t = 0; t < u.phi_points.cols(); ++t) {
        const double gap = (u.phi_points.col(t) - x_star).squaredNorm();
        num += 4.0 * s * s * (lip_sq.at(idx++) / s) * gap;
        den += gap;
      }
    }
  if (den == 0.0) return std::nullopt;
  return num / den;
}

inline std::vector<double> minibatch_lipschitz_squares(const Dataset& ds) {
  std::vector<double> out;
  out.reserve(ds.cfg.users() * ds.cfg.minibatches_per_user);
  for (std::size_t i = 0; i < ds.cfg.n_servers; ++i)
    for (std::size_t j = 0; j < ds.cfg.users_per_server; ++j)
      for (std::size_t t = 0; t < ds.cfg.minibatches_per_user; ++t) {
        const double l = minibatch_lipschitz(ds, i, j, t);
        out.push_back(l * l);
      }
  return out;
}

/// Right side minus left side of X^{k+1} <= (1+s^2)/2 X^k + 2 a^2/(1-s^2) Y^k.
inline double consensus_margin(double x_prev, double y_prev, double x_next, double sigma,
                             double alpha) {
  const double s2 = sigma * sigma;
  return 0.5 * (1.0 + s2) * x_prev + 2.0 * alpha * alpha / (1.0 - s2) * y_prev - x_next;
}

struct TheoryConstants {
  double c1 = 0, c2 = 0, c3 = 0;
  double b1 = 0, b2 = 0, b3 = 0, b_bar = 0;
  double a1 = 0, a2 = 0, a3 = 0, a4 = 0;
  double gamma = 0;
  // inputs
  double mu = 0, lip = 0, sigma = 0, alpha = 0, rho = 0;
  double n = 0, p_max = 0, s_max = 0;
};

inline TheoryConstants compute_constants(double mu, double lip, double sigma, double alpha,
                                         double rho, double n, double p_max, double s_max) {
  if (!(mu > 0.0) || !(lip >= mu) || !std::isfinite(lip))
    throw ConfigError("compute_constants: need 0 < mu <= lip");
  if (!(sigma >= 0.0 && sigma < 1.0)) throw ConfigError("compute_constants: sigma must be in [0, 1)");
  if (!(alpha > 0.0)) throw ConfigError("compute_constants: alpha must be positive");
  if (!(rho >= 0.0)) throw ConfigError("compute_constants: rho must be nonnegative");
  if (!(n >= 1.0 && p_max >= 1.0 && s_max >= 1.0))
    throw ConfigError("compute_constants: n, p_max and s_max must be at least 1");

  TheoryConstants k;
  k.mu = mu, k.lip = lip, k.sigma = sigma, k.alpha = alpha, k.rho = rho;
  k.n = n, k.p_max = p_max, k.s_max = s_max;

  const double L2 = lip * lip, s2 = sigma * sigma, a = alpha, a2 = alpha * alpha;
  const double P = p_max, S = s_max, N = n;
  const double one_s2 = 1.0 + s2, gap = 1.0 - s2;

  k.c1 = 8.0 * L2 * (1.0 + P * S * S) + 12.0 * rho * one_s2 * P * P;
  k.c2 = 8.0 * L2 * (1.0 + P * S * S) * N;
  k.c3 = 4.0 * L2 * S;

  k.b1 = 1.0 - mu * a + 2.0 * k.c2 * a2 / N;
  k.b2 = (2.0 * a * L2 + 4.0 * a * rho * one_s2 * P * P + 2.0 * mu * a2 * L2 +
          2.0 * mu * a2 * k.c1) /
         (mu * N);
  k.b3 = 2.0 * a2 * k.c3 / N;
  k.b_bar = (4.0 * a2 * L2 + 4.0 * a2 * rho * one_s2 * P * P + 2.0 * a2 * k.c1) / N;

  k.a1 = (25.0 * L2 * one_s2 + 4.0 * one_s2 * k.c1 +
          3.0 * one_s2 * (2.0 * k.c1 * s2 + k.c2 * k.b_bar + 2.0 * k.c3 * P * N)) /
         gap;
  k.a2 = (N * L2 * one_s2 + 4.0 * one_s2 * k.c2 +
          3.0 * one_s2 * (k.c2 * (2.0 + 2.0 * k.c2 / L2) + 2.0 * k.c3 * P * N)) /
         gap;
  k.a3 = one_s2 / 2.0 + 24.0 * a2 * L2 * one_s2 / gap + 6.0 * a2 * k.c1 * one_s2 / gap;
  k.a4 = 4.0 * one_s2 * k.c3 / gap + 3.0 * one_s2 * (k.b3 * k.c2 + k.c3 * (1.0 - 1.0 / S)) / gap;

  k.gamma = 1.0 - mu * a / 4.0 + 2.0 * k.c2 * a2 / N;
  return k;
}

/// Rows are the X, Xbar, D and Y recursions.
inline Eigen::Matrix4d transition_matrix(const TheoryConstants& k) {
  const double s2 = k.sigma * k.sigma;
  Eigen::Matrix4d t;
  t << 0.5 * (1.0 + s2), 0.0, 0.0, 2.0 * k.alpha * k.alpha / (1.0 - s2),
      k.b2, k.b1, k.b3, 0.0,
      2.0 * k.p_max, 2.0 * k.p_max * k.n, 1.0 - 1.0 / k.s_max, 0.0,
      k.a1, k.a2, k.a4, k.a3;
  return t;
}

struct SpectralReport {
  double rho = 0.0;          // Perron root estimate
  double rho_lower = 0.0;    // Collatz-Wielandt bracket
  double rho_upper = 0.0;
  double singular = 0.0;     // ||T||_2, diagnostic only
};

/// Perron root of T with a rigorous upper bound: max_i (Tv)_i / v_i for the
/// best positive v seen during power iteration.
inline SpectralReport spectral_radius(const Eigen::Matrix4d& t, long max_iter = 200000) {
  if ((t.array() < 0.0).any()) throw ConfigError("spectral_radius: T has a negative entry");
  Eigen::Vector4d v = Eigen::Vector4d::Ones();
  SpectralReport r;
  r.rho_lower = 0.0;
  r.rho_upper = std::numeric_limits<double>::infinity();
  for (long it = 0; it < max_iter; ++it) {
    const Eigen::Vector4d w = t * v;
    if (!(w.array() > 0.0).all()) throw ConfigError("spectral_radius: T is reducible");
    const Eigen::Array4d ratio = w.array() / v.array();
    r.rho_lower = std::max(r.rho_lower, ratio.minCoeff());
    r.rho_upper = std::min(r.rho_upper, ratio.maxCoeff());
    if (r.rho_upper - r.rho_lower <= 1e-15 * r.rho_upper) break;
    v = w / w.maxCoeff();
  }
  // Each entry of T v is a sum of four nonnegative products, so its computed
  // value is within 4 ulp, and the division adds one more.
  constexpr double kSlack = 8.0 * std::numeric_limits<double>::epsilon();
  r.rho_lower *= 1.0 - kSlack;
  r.rho_upper *= 1.0 + kSlack;
  r.rho = 0.5 * (r.rho_lower + r.rho_upper);
  r.singular = largest_singular_value(Eigen::MatrixXd(t), PowerIterationOptions{1e-12, 0.0, 100000});
  return r;
}

struct AlphaCertificate {
  double alpha = 0.0;
  TheoryConstants constants;
  SpectralReport spectral;
  double target = 0.0;  // 1 - mu alpha / 8
};

namespace detail {

inline bool certifies(double alpha, double mu, double lip, double sigma, double rho, double n,
                      double p, double s, AlphaCertificate* out = nullptr) {
  const TheoryConstants k = compute_constants(mu, lip, sigma, alpha, rho, n, p, s);
  const SpectralReport sr = spectral_radius(transition_matrix(k));
  const double target = 1.0 - mu * alpha / 8.0;
  if (out) {
    out->alpha = alpha;
    out->constants = k;
    out->spectral = sr;
    out->target = target;
  }
  return sr.rho_upper <= target;
}

}  // namespace detail

/// Largest alpha in [1e-12, 1/lip] (60 log-bisection steps) whose transition
/// matrix satisfies rho(T) <= 1 - mu alpha / 8, judged by the certified upper
/// bound on rho(T).
inline AlphaCertificate find_alpha_threshold(double mu, double lip, double sigma, double rho,
                                             double n, double p_max, double s_max) {
  constexpr double kLow = 1e-12;
  const double high = 1.0 / lip;
  AlphaCertificate cert;
  if (detail::certifies(high, mu, lip, sigma, rho, n, p_max, s_max, &cert)) return cert;
  if (!detail::certifies(kLow, mu, lip, sigma, rho, n, p_max, s_max, &cert))
    throw ConvergenceError("find_alpha_threshold: no certified stepsize in [1e-12, 1/L]");
  double lo = std::log(kLow), hi = std::log(high);
  for (int step = 0; step < 60; ++step) {
    const double mid = 0.5 * (lo + hi);
    if (detail::certifies(std::exp(mid), mu, lip, sigma, rho, n, p_max, s_max)) lo = mid;
    else hi = mid;
  }
  detail::certifies(std::exp(lo), mu, lip, sigma, rho, n, p_max, s_max, &cert);
  return cert;
}

struct RateFit {
  double slope = 0.0;      // per-round change of log(opg)
  double intercept = 0.0;
  double r_squared = 0.0;
  std::size_t points = 0;
  double contraction() const { return std::exp(slope); }
};

/// Least squares of log(opg) against round.
inline RateFit fit_log_linear(const std::vector<double>& rounds, const std::vector<double>& opg) {
  if (rounds.size() != opg.size()) throw ConfigError("fit_log_linear: length mismatch");
  if (rounds.size() < 10) throw ConfigError("linear_rate_fit: window has fewer than 10 points");
  const auto n = static_cast<double>(rounds.size());
  double mx = 0.0, my = 0.0;
  std::vector<double> ly(opg.size());
  for (std::size_t i = 0; i < opg.size(); ++i) {
    if (!(opg[i] > 0.0)) throw ConfigError("linear_rate_fit: optimality gap must be positive");
    ly[i] = std::log(opg[i]);
    mx += rounds[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < ly.size(); ++i) {
    const double dx = rounds[i] - mx, dy = ly[i] - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (sxx == 0.0) throw ConfigError("linear_rate_fit: window spans a single round");
  RateFit f;
  f.points = ly.size();
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r_squared = syy == 0.0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return f;
}

/// Rows with first_round <= round, stopping at the first row whose opg is at
/// or below stop_opg (inclusive).
inline RateFit linear_rate_fit(const MetricsTrace& trace, long first_round,
                               double stop_opg = 0.0) {
  std::vector<double> k, g;
  for (const auto& r : trace.rows) {
    if (r.round < first_round) continue;
    k.push_back(static_cast<double>(r.round));
    g.push_back(r.opg);
    if (r.opg <= stop_opg) break;
  }
  return fit_log_linear(k, g);
}

struct PruneReport {
  std::size_t rounds = 0;
  std::size_t degenerate_rounds = 0;      // 0/0 ratio
  double mean_ratio = 0.0;                // over non-degenerate rounds
  bool ratio_finite = false;
  double non_trigger_fraction = 0.0;      // observed, averaged over rounds
  double pruned_at_ratio_fraction = 0.0;  // users a rho equal to r_k would have skipped
  bool ratio_rho_prunes_at_least_observed = false;
  std::optional<double> l_bar;            // max over the window of max(L_{k+1}, L_k)
  std::optional<double> c3_floor;         // C3 with C1 = C2 = 0
};

/// Realized ratio r_k = (sum ||Delta||^2 / sum P) / ((1/N) sum_i threshold_i).
/// The window is every record with opg <= near_fraction * initial_opg.
inline PruneReport ctus_prune_check(const std::vector<CtusRecord>& log, double initial_opg,
                                    std::size_t n_servers, std::size_t p_max, std::size_t s_max,
                                    double near_fraction = 1e-3) {
  PruneReport rep;
  const double limit = near_fraction * initial_opg;
  double ratio_sum = 0.0, nontrig = 0.0, pruned = 0.0;
  std::size_t finite_rounds = 0;
  bool infinite = false;
  std::optional<double> prev_lk;
  std::size_t total_users = 0;
  for (const auto& r : log) {
    if (!(r.opg <= limit)) {
      prev_lk.reset();
      continue;
    }
    ++rep.rounds;
    total_users = static_cast<std::size_t>(r.users);
    const double users = static_cast<double>(r.users);
    nontrig += (users - static_cast<double>(r.uploads)) / users;
    pruned += static_cast<double>(r.pruned_at_ratio) / users;
    const double num = r.sum_delta_sq / users;
    const double den = r.sum_threshold_sq / static_cast<double>(n_servers);
    if (num == 0.0 && den == 0.0) {
      ++rep.degenerate_rounds;
    } else if (den == 0.0) {
      infinite = true;
    } else {
      ratio_sum += num / den;
      ++finite_rounds;
    }
    if (r.lk) {
      const double lb = prev_lk ? std::max(*prev_lk, *r.lk) : *r.lk;
      rep.l_bar = rep.l_bar ? std::max(*rep.l_bar, lb) : lb;
    }
    prev_lk = r.lk;
  }
  if (rep.rounds == 0)
    throw ConfigError("ctus_prune_check: no round reached the near-convergence regime");
  rep.non_trigger_fraction = nontrig / static_cast<double>(rep.rounds);
  rep.pruned_at_ratio_fraction = pruned / static_cast<double>(rep.rounds);
  rep.ratio_finite = !infinite && std::isfinite(ratio_sum);
  rep.mean_ratio = finite_rounds ? ratio_sum / static_cast<double>(finite_rounds) : 0.0;
  if (!rep.ratio_finite) rep.mean_ratio = std::numeric_limits<double>::infinity();
  rep.ratio_rho_prunes_at_least_observed =
      rep.pruned_at_ratio_fraction >= rep.non_trigger_fraction;
  if (rep.l_bar)
    rep.c3_floor = 16.0 * static_cast<double>(s_max) * *rep.l_bar *
                   static_cast<double>(p_max) * static_cast<double>(n_servers) /
                   static_cast<double>(total_users);
  return rep;
}

/// Users in one CFL-SAGA round with ||Delta_ij||^2 <= r * threshold_i, where
/// r is that round's realized ratio. Counted against the observed innovations.
inline std::uint64_t pruned_at_ratio(const RoundStats& s, std::size_t users_per_server) {
  const auto n = s.threshold_sq.size();
  if (n == 0 || s.delta_sq.empty()) return 0;
  const double num = s.sum_delta_sq / static_cast<double>(s.delta_sq.size());
  const double den = s.sum_threshold_sq / static_cast<double>(n);
  std::uint64_t count = 0;
  for (std::size_t u = 0; u < s.delta_sq.size(); ++u) {
    const double thr = s.threshold_sq[u / users_per_server];
    if (den == 0.0) {
      if (s.delta_sq[u] == 0.0) ++count;
    } else if (s.delta_sq[u] <= (num / den) * thr) {
      ++count;
    }
  }
  return count;
}

/// Left and right sides of the three expectation bounds in the psi recursion
/// (Xbar, D and Y rows). Evaluated on seed-averaged psi values.
struct RecursionTerms {
  double mean_lhs = 0.0, mean_rhs = 0.0;    // E Xbar^{k+1} vs b1 Xbar + b2 X + b3 D^{k-1}
  double table_lhs = 0.0, table_rhs = 0.0;  // E D^k vs (1-1/S) D^{k-1} + 2P X + 2PN Xbar
  double y_lhs = 0.0, y_rhs = 0.0;          // E Y^{k+1} vs a1 X + a2 Xbar + a3 Y + a4 D^{k-1}
};

/// `now` is psi^k = (X^k, Xbar^k, D^{k-1}, Y^k); `table_now` is D^k; `next` is psi^{k+1}.
inline RecursionTerms recursion_terms(const TheoryConstants& k, const PsiVector& now, double table_now,
                              const PsiVector& next) {
  const double d_prev = now.table_gap.value_or(0.0);
  RecursionTerms t;
  t.mean_lhs = next.mean_gap;
  t.mean_rhs = k.b1 * now.mean_gap + k.b2 * now.x_gap + k.b3 * d_prev;
  t.table_lhs = table_now;
  t.table_rhs = (1.0 - 1.0 / k.s_max) * d_prev + 2.0 * k.p_max * now.x_gap +
                2.0 * k.p_max * k.n * now.mean_gap;
  t.y_lhs = next.y_gap;
  t.y_rhs = k.a1 * now.x_gap + k.a2 * now.mean_gap + k.a3 * now.y_gap + k.a4 * d_prev;
  return t;
}

}  // namespace confed
