#pragma once

// Round-synchronous optimizers over a server network:
//   gt_round        gradient tracking with exact server gradients
//   gt_saga_round   GT-SAGA with random user selection at every server
//   cfl_saga_round  per-user SAGA estimates with event-triggered uploads (CTUS)
//
// Server vectors are stored as the columns of d x N matrices so that one
// mixing pass is a single product X W^T. Every round reads only the previous
// round's matrices and writes fresh ones; randomness comes from counter-based
// streams keyed by (seed, server, user, round).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "confed/errors.hpp"
#include "confed/linalg.hpp"
#include "confed/problem.hpp"
#include "confed/rng.hpp"
#include "confed/topology.hpp"

namespace confed {

enum class Algorithm { gt, gt_saga, cfl_saga };

inline std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::gt: return "gt";
    case Algorithm::gt_saga: return "gt-saga";
    case Algorithm::cfl_saga: return "cfl-saga";
  }
  return "?";
}

inline Algorithm parse_algorithm(std::string_view s) {
  if (s == "gt") return Algorithm::gt;
  if (s == "gt-saga") return Algorithm::gt_saga;
  if (s == "cfl-saga") return Algorithm::cfl_saga;
  throw ConfigError("unknown algorithm '" + std::string(s) + "'");
}

/// Per-user SAGA state. Column t of `stored_grads` holds grad f_{ij,t}(phi_{ij,t}).
struct UserSagaTable {
  Eigen::MatrixXd stored_grads;  // d x S
  ModelVector grad_sum;          // sum of the columns above
  ModelVector last_vrsg;         // the g_ij the server currently knows
  Eigen::MatrixXd phi_points;    // d x S, or empty when the D-metric is off
};

struct ServerState {
  std::vector<UserSagaTable> users;
  ModelVector table_sum;  // g_{i,sum}: sum of all users' grad_sum (GT-SAGA bookkeeping)
};

struct CommLedger {
  std::uint64_t vrsg_uploads = 0;          // user -> server gradient vectors
  std::uint64_t server_broadcasts = 0;     // server -> server vectors
  std::uint64_t threshold_broadcasts = 0;  // server -> user scalars
};

struct TriggerPolicy {
  double rho = 0.0;
};

struct EngineOptions {
  std::uint64_t seed = 1;
  bool track_phi = false;
  long refresh_rounds = 1000;  // exact recomputation period for running sums
};

/// What happened inside the most recent round.
struct RoundStats {
  std::size_t uploads = 0;
  std::size_t users = 0;
  double sum_delta_sq = 0.0;      // sum_ij ||Delta_ij||^2 (CFL-SAGA)
  double sum_threshold_sq = 0.0;  // sum_i ||sum_i' w x_i' - x_i||^2 (CFL-SAGA)
  std::vector<double> threshold_sq;
  std::vector<double> delta_sq;  // per user, server-major (CFL-SAGA)
};

struct ClusterState {
  Eigen::MatrixXd x;  // d x N, column i is server i
  Eigen::MatrixXd y;
  Eigen::MatrixXd g;
  std::vector<ServerState> servers;
  long round = 0;
  CommLedger comm;
  EngineOptions opts;
  RoundStats last;

  std::size_t n_servers() const { return servers.size(); }
  ModelVector x_mean() const { return x.rowwise().mean(); }
  ModelVector y_mean() const { return y.rowwise().mean(); }
  ModelVector g_mean() const { return g.rowwise().mean(); }
};

/// x = y = 0, phi = 0 (so stored gradients are grad f_{ij,t}(0)), g_ij = g_i = 0.
inline ClusterState init_state(const Dataset& ds, const MixingMatrix& w, EngineOptions opts = {}) {
  const auto& c = ds.cfg;
  if (static_cast<std::size_t>(w.size()) != c.n_servers)
    throw ConfigError("init_state: mixing matrix is " + std::to_string(w.size()) +
                      "x" + std::to_string(w.size()) + " but dataset has " +
                      std::to_string(c.n_servers) + " servers");
  if (opts.refresh_rounds <= 0) throw ConfigError("init_state: refresh_rounds must be positive");
  const auto d = static_cast<Eigen::Index>(c.dim);
  const auto n = static_cast<Eigen::Index>(c.n_servers);
  const auto s = static_cast<Eigen::Index>(c.minibatches_per_user);

  ClusterState st;
  st.opts = opts;
  st.x = Eigen::MatrixXd::Zero(d, n);
  st.y = Eigen::MatrixXd::Zero(d, n);
  st.g = Eigen::MatrixXd::Zero(d, n);
  st.servers.resize(c.n_servers);
  const ModelVector zero = ModelVector::Zero(d);
  for (std::size_t i = 0; i < c.n_servers; ++i) {
    auto& srv = st.servers[i];
    srv.table_sum = ModelVector::Zero(d);
    srv.users.resize(c.users_per_server);
    for (std::size_t j = 0; j < c.users_per_server; ++j) {
      auto& u = srv.users[j];
      u.stored_grads.resize(d, s);
      for (Eigen::Index t = 0; t < s; ++t)
        minibatch_gradient(zero, ds, i, j, static_cast<std::size_t>(t), u.stored_grads.col(t));
      u.grad_sum = u.stored_grads.rowwise().sum();
      u.last_vrsg = ModelVector::Zero(d);
      if (opts.track_phi) u.phi_points = Eigen::MatrixXd::Zero(d, s);
      srv.table_sum += u.grad_sum;
    }
  }
  st.last.threshold_sq.assign(c.n_servers, 0.0);
  return st;
}

/// The minibatch index user (i, j) draws in `round`.
inline std::size_t draw_minibatch(std::uint64_t seed, std::size_t i, std::size_t j, long round,
                                  std::size_t minibatches) {
  Stream s(seed, Domain::minibatch, static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j),
           static_cast<std::uint32_t>(round));
  return s.below(static_cast<std::uint32_t>(minibatches));
}

/// A uniform subset of `count` users out of `users`, without replacement, sorted.
inline std::vector<std::size_t> select_users(Stream& s, std::size_t users, std::size_t count) {
  std::vector<std::size_t> idx(users);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t a = 0; a < count; ++a) {
    const std::size_t b = a + s.below(static_cast<std::uint32_t>(users - a));
    std::swap(idx[a], idx[b]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<std::size_t> select_users(std::uint64_t seed, std::size_t i, long round,
                                             std::size_t users, std::size_t count) {
  Stream s(seed, Domain::selection, static_cast<std::uint32_t>(i), 0,
           static_cast<std::uint32_t>(round));
  return select_users(s, users, count);
}

/// SAGA estimate S * (fresh - stored[t]) + grad_sum, without touching the table.
inline ModelVector vr_estimate(const UserSagaTable& user, VecIn fresh, std::size_t t) {
  const auto s = static_cast<double>(user.stored_grads.cols());
  return s * (fresh - user.stored_grads.col(static_cast<Eigen::Index>(t))) + user.grad_sum;
}

/// Moves minibatch t of the table to the point x (phi_t <- x).
inline void saga_commit(UserSagaTable& user, VecIn fresh, VecIn x, std::size_t t) {
  const auto col = static_cast<Eigen::Index>(t);
  user.grad_sum += fresh - user.stored_grads.col(col);
  user.stored_grads.col(col) = fresh;
  if (user.phi_points.size() != 0) user.phi_points.col(col) = x;
}

/// One SAGA step of user (i, j) at the server model x_i using minibatch t:
/// returns g_ij^{k+1} and advances the table. `last_vrsg` is left alone; the
/// caller decides whether the server learns the new value.
inline ModelVector vr_gradient(UserSagaTable& user, VecIn x_i, const Dataset& ds, std::size_t i,
                               std::size_t j, std::size_t t) {
  ModelVector fresh(x_i.size());
  minibatch_gradient(x_i, ds, i, j, t, fresh);
  ModelVector g = vr_estimate(user, fresh, t);
  saga_commit(user, fresh, x_i, t);
  return g;
}

/// Upload iff ||delta||^2 > rho * threshold_sq.
inline bool ctus_decide(VecIn delta, double threshold_sq, const TriggerPolicy& policy) {
  return delta.squaredNorm() > policy.rho * threshold_sq;
}

namespace detail {

inline void guard_finite(const ClusterState& st, long round) {
  constexpr double kLimit = 1e12;
  auto bad = [&](const Eigen::MatrixXd& m) {
    return !m.allFinite() || (m.size() != 0 && m.cwiseAbs().maxCoeff() > kLimit);
  };
  if (bad(st.x) || bad(st.y) || bad(st.g))
    throw DivergenceError("iterates diverged (non-finite or |coordinate| > 1e12) at round " +
                              std::to_string(round),
                          round);
}

inline void maybe_refresh(ClusterState& st) {
  if (st.round % st.opts.refresh_rounds != 0) return;
  for (auto& srv : st.servers) {
    srv.table_sum.setZero();
    for (auto& u : srv.users) {
      u.grad_sum = u.stored_grads.rowwise().sum();
      srv.table_sum += u.grad_sum;
    }
  }
}

inline void count_server_traffic(ClusterState& st, const MixingMatrix& w) {
  // x and y travel over every directed link once per round.
  std::uint64_t links = 0;
  for (Eigen::Index a = 0; a < w.size(); ++a)
    for (Eigen::Index b = 0; b < w.size(); ++b)
      if (a != b && w.w(a, b) != 0.0) ++links;
  st.comm.server_broadcasts += 2 * links;
}

inline void check_alpha(double alpha) {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be nonnegative");
}

}  // namespace detail

/// One CFL-SAGA round (event-triggered uploads, stale-gradient reuse).
inline const RoundStats& cfl_saga_round(ClusterState& st, const Dataset& ds,
                                        const MixingMatrix& w, double alpha,
                                        const TriggerPolicy& policy) {
  detail::check_alpha(alpha);
  if (!(policy.rho >= 0.0)) throw ConfigError("rho must be nonnegative");
  const long next = st.round + 1;
  const Eigen::MatrixXd wt = w.w.transpose();

  // x_i <- sum_i' w_ii' x_i' - alpha y_i.
  Eigen::MatrixXd x_new = st.x * wt - alpha * st.y;
  // Per-server threshold from a second mixing pass on the new x.
  const Eigen::MatrixXd resid = x_new * wt - x_new;

  RoundStats stats;
  stats.threshold_sq.resize(st.n_servers());
  stats.delta_sq.reserve(ds.cfg.users());
  Eigen::MatrixXd g_new = st.g;
  const std::size_t minibatches = ds.cfg.minibatches_per_user;
  for (std::size_t i = 0; i < st.n_servers(); ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    const double thr = resid.col(col).squaredNorm();
    stats.threshold_sq[i] = thr;
    stats.sum_threshold_sq += thr;
    auto& srv = st.servers[i];
    for (std::size_t j = 0; j < srv.users.size(); ++j) {
      auto& user = srv.users[j];
      const std::size_t t = draw_minibatch(st.opts.seed, i, j, next, minibatches);
      // The table advances whether or not the user uploads.
      srv.table_sum -= user.grad_sum;
      const ModelVector g_ij = vr_gradient(user, x_new.col(col), ds, i, j, t);
      srv.table_sum += user.grad_sum;
      // Innovation against the last value the server holds.
      const ModelVector delta = g_ij - user.last_vrsg;
      const double dsq = delta.squaredNorm();
      stats.delta_sq.push_back(dsq);
      stats.sum_delta_sq += dsq;
      ++stats.users;
      if (ctus_decide(delta, thr, policy)) {
        // g_i^{k+1} = g_i^k + sum of uploaded innovations.
        g_new.col(col) += delta;
        user.last_vrsg = g_ij;
        ++stats.uploads;
      }
    }
  }
  // Dynamic average consensus on y.
  Eigen::MatrixXd y_new = st.y * wt + g_new - st.g;

  st.x.swap(x_new);
  st.y.swap(y_new);
  st.g.swap(g_new);
  st.round = next;
  detail::maybe_refresh(st);

  st.comm.vrsg_uploads += stats.uploads;
  st.comm.threshold_broadcasts += stats.users;
  detail::count_server_traffic(st, w);
  st.last = std::move(stats);
  detail::guard_finite(st, st.round);
  return st.last;
}

/// One GT-SAGA round: every server samples `sample_count` users uniformly
/// without replacement; each sampled user sends grad f_{ij,t}(x_i) - grad f_{ij,t}(phi).
inline const RoundStats& gt_saga_round(ClusterState& st, const Dataset& ds, const MixingMatrix& w,
                                       double alpha, std::size_t sample_count) {
  detail::check_alpha(alpha);
  const std::size_t users = ds.cfg.users_per_server;
  if (sample_count < 1 || sample_count > users)
    throw ConfigError("gt_saga_round: sample_count must be in [1, " + std::to_string(users) + "]");
  const long next = st.round + 1;
  const Eigen::MatrixXd wt = w.w.transpose();
  Eigen::MatrixXd x_new = st.x * wt - alpha * st.y;

  const std::size_t minibatches = ds.cfg.minibatches_per_user;
  const double scale = static_cast<double>(users * minibatches) / static_cast<double>(sample_count);
  Eigen::MatrixXd g_new(st.g.rows(), st.g.cols());
  RoundStats stats;
  stats.threshold_sq.assign(st.n_servers(), 0.0);
  ModelVector fresh(st.x.rows());
  ModelVector innovation_sum(st.x.rows());
  for (std::size_t i = 0; i < st.n_servers(); ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    auto& srv = st.servers[i];
    innovation_sum.setZero();
    for (std::size_t j : select_users(st.opts.seed, i, next, users, sample_count)) {
      auto& user = srv.users[j];
      const std::size_t t = draw_minibatch(st.opts.seed, i, j, next, minibatches);
      minibatch_gradient(x_new.col(col), ds, i, j, t, fresh);
      innovation_sum += fresh - user.stored_grads.col(static_cast<Eigen::Index>(t));
      saga_commit(user, fresh, x_new.col(col), t);
      ++stats.uploads;
    }
    stats.users += users;
    g_new.col(col) = scale * innovation_sum + srv.table_sum;
    srv.table_sum += innovation_sum;
  }
  Eigen::MatrixXd y_new = st.y * wt + g_new - st.g;

  st.x.swap(x_new);
  st.y.swap(y_new);
  st.g.swap(g_new);
  st.round = next;
  detail::maybe_refresh(st);

  st.comm.vrsg_uploads += stats.uploads;
  detail::count_server_traffic(st, w);
  st.last = std::move(stats);
  detail::guard_finite(st, st.round);
  return st.last;
}

/// Exact gradient tracking; each server uses grad f_i(x_i).
inline const RoundStats& gt_round(ClusterState& st, const Dataset& ds, const MixingMatrix& w,
                                  double alpha) {
  detail::check_alpha(alpha);
  const Eigen::MatrixXd wt = w.w.transpose();
  Eigen::MatrixXd x_new = st.x * wt - alpha * st.y;
  Eigen::MatrixXd g_new(st.g.rows(), st.g.cols());
  for (std::size_t i = 0; i < st.n_servers(); ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    server_gradient(x_new.col(col), ds, i, g_new.col(col));
  }
  Eigen::MatrixXd y_new = st.y * wt + g_new - st.g;

  st.x.swap(x_new);
  st.y.swap(y_new);
  st.g.swap(g_new);
  ++st.round;

  RoundStats stats;
  stats.users = ds.cfg.users();
  stats.uploads = stats.users;
  stats.threshold_sq.assign(st.n_servers(), 0.0);
  st.comm.vrsg_uploads += stats.uploads;
  detail::count_server_traffic(st, w);
  st.last = std::move(stats);
  detail::guard_finite(st, st.round);
  return st.last;
}

// Consistency residuals for the running sums. All are relative: ||a - b|| / (1 + ||a||).

/// max_i || g_i - sum_j last_vrsg_ij ||.
inline double server_aggregate_residual(const ClusterState& st) {
  double worst = 0.0;
  ModelVector acc(st.g.rows());
  for (std::size_t i = 0; i < st.n_servers(); ++i) {
    acc.setZero();
    for (const auto& u : st.servers[i].users) acc += u.last_vrsg;
    const auto gi = st.g.col(static_cast<Eigen::Index>(i));
    worst = std::max(worst, (gi - acc).norm() / (1.0 + gi.norm()));
  }
  return worst;
}

/// max over users of || grad_sum - sum_t stored_grads[t] ||, and over servers
/// of || table_sum - sum_j grad_sum_j ||.
inline double table_sum_residual(const ClusterState& st) {
  double worst = 0.0;
  ModelVector acc(st.g.rows());
  for (const auto& srv : st.servers) {
    acc.setZero();
    for (const auto& u : srv.users) {
      const ModelVector exact = u.stored_grads.rowwise().sum();
      worst = std::max(worst, (u.grad_sum - exact).norm() / (1.0 + u.grad_sum.norm()));
      acc += u.grad_sum;
    }
    worst = std::max(worst, (srv.table_sum - acc).norm() / (1.0 + srv.table_sum.norm()));
  }
  return worst;
}

/// || y_mean - g_mean || / (1 + ||g_mean||).
inline double dac_residual(const ClusterState& st) {
  const ModelVector gm = st.g_mean();
  return (st.y_mean() - gm).norm() / (1.0 + gm.norm());
}

}  // namespace confed
