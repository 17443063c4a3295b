#pragma once

// Server graphs and the mixing matrix W = I - L / tau built from them.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <ostream>
#include <queue>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "confed/errors.hpp"
#include "confed/linalg.hpp"
#include "confed/rng.hpp"

namespace confed {

enum class GraphKind { random, ring, complete };

inline std::string_view to_string(GraphKind k) {
  switch (k) {
    case GraphKind::random: return "random";
    case GraphKind::ring: return "ring";
    case GraphKind::complete: return "complete";
  }
  return "?";
}

inline GraphKind parse_graph_kind(std::string_view s) {
  if (s == "random") return GraphKind::random;
  if (s == "ring") return GraphKind::ring;
  if (s == "complete") return GraphKind::complete;
  throw ConfigError("unknown graph kind '" + std::string(s) + "'");
}

/// Undirected simple graph on servers 0..n-1. Edges are stored once, as (i, j)
/// with i < j, in lexicographic order.
struct ServerGraph {
  std::size_t n = 0;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  GraphKind kind = GraphKind::ring;

  std::vector<std::size_t> degrees() const {
    std::vector<std::size_t> deg(n, 0);
    for (auto [a, b] : edges) {
      ++deg[a];
      ++deg[b];
    }
    return deg;
  }

  std::vector<std::vector<std::size_t>> adjacency() const {
    std::vector<std::vector<std::size_t>> adj(n);
    for (auto [a, b] : edges) {
      adj[a].push_back(b);
      adj[b].push_back(a);
    }
    return adj;
  }

  bool connected() const {
    if (n == 0) return false;
    const auto adj = adjacency();
    std::vector<char> seen(n, 0);
    std::queue<std::size_t> q;
    q.push(0);
    seen[0] = 1;
    std::size_t count = 1;
    while (!q.empty()) {
      const auto u = q.front();
      q.pop();
      for (auto v : adj[u]) {
        if (!seen[v]) {
          seen[v] = 1;
          ++count;
          q.push(v);
        }
      }
    }
    return count == n;
  }

  /// Number of directed links (each undirected edge counted both ways).
  std::size_t directed_edges() const { return 2 * edges.size(); }
};

inline constexpr int kMaxRandomGraphAttempts = 1000;

/// Builds a connected server graph. Random graphs are Erdos-Renyi(n, p),
/// resampled with a fresh sub-seed until connected.
inline ServerGraph build_graph(GraphKind kind, std::size_t n, std::optional<double> edge_prob,
                               std::uint64_t seed) {
  if (n < 2) throw ConfigError("build_graph: need at least 2 servers");
  if (kind == GraphKind::random) {
    if (!edge_prob || !(*edge_prob > 0.0 && *edge_prob <= 1.0))
      throw ConfigError("build_graph: random graph requires edge_prob in (0, 1]");
  } else if (edge_prob) {
    throw ConfigError("build_graph: edge_prob only applies to random graphs");
  }

  ServerGraph g;
  g.n = n;
  g.kind = kind;
  switch (kind) {
    case GraphKind::ring:
      for (std::size_t i = 0; i + 1 < n; ++i) g.edges.emplace_back(i, i + 1);
      if (n > 2) g.edges.emplace_back(0, n - 1);
      std::sort(g.edges.begin(), g.edges.end());
      return g;
    case GraphKind::complete:
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) g.edges.emplace_back(i, j);
      return g;
    case GraphKind::random:
      for (int attempt = 0; attempt < kMaxRandomGraphAttempts; ++attempt) {
        Stream s(seed, Domain::graph, static_cast<std::uint32_t>(attempt),
                 static_cast<std::uint32_t>(n));
        g.edges.clear();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = i + 1; j < n; ++j)
            if (s.uniform() < *edge_prob) g.edges.emplace_back(i, j);
        if (g.connected()) return g;
      }
      throw ConvergenceError("build_graph: no connected random graph after " +
                             std::to_string(kMaxRandomGraphAttempts) +
                             " attempts; edge_prob is too low");
  }
  return g;
}

/// L = D - A.
inline Eigen::MatrixXd laplacian(const ServerGraph& g) {
  const auto n = static_cast<Eigen::Index>(g.n);
  Eigen::MatrixXd lap = Eigen::MatrixXd::Zero(n, n);
  for (auto [a, b] : g.edges) {
    const auto i = static_cast<Eigen::Index>(a);
    const auto j = static_cast<Eigen::Index>(b);
    lap(i, j) -= 1.0;
    lap(j, i) -= 1.0;
    lap(i, i) += 1.0;
    lap(j, j) += 1.0;
  }
  return lap;
}

inline constexpr PowerIterationOptions kSpectralOptions{1e-10, 0.0, 100000};

/// Symmetric doubly-stochastic weights with cached second singular value.
struct MixingMatrix {
  Eigen::MatrixXd w;
  double sigma = 0.0;
  double tau = 1.0;

  Eigen::Index size() const { return w.rows(); }

  /// W_inf = (1/N) 1 1^T.
  Eigen::MatrixXd projector() const {
    const auto n = size();
    return Eigen::MatrixXd::Constant(n, n, 1.0 / static_cast<double>(n));
  }

  /// W = [1]; the degenerate single-server network.
  static MixingMatrix single_server() {
    MixingMatrix m;
    m.w = Eigen::MatrixXd::Ones(1, 1);
    m.sigma = 0.0;
    m.tau = 1.0;
    return m;
  }
};

/// sigma = ||W - (1/N) 1 1^T||_2, by power iteration on (W - J)^T (W - J).
inline double spectral_gap(const Eigen::MatrixXd& w) {
  const Eigen::Index n = w.rows();
  if (n == 1) return 0.0;
  Eigen::MatrixXd m = w;
  m.array() -= 1.0 / static_cast<double>(n);
  Eigen::VectorXd tmp(n);
  PowerIterationOptions opt = kSpectralOptions;
  opt.abs_tol = 1e-28;  // sigma^2 resolution floor for projector-like W
  const double lam = psd_max_eigenvalue(
      n,
      [&](const Eigen::VectorXd& in, Eigen::VectorXd& out) {
        tmp.noalias() = m * in;
        out.noalias() = m.transpose() * tmp;
      },
      opt);
  return std::sqrt(std::max(lam, 0.0));
}

inline double spectral_gap(const MixingMatrix& mm) { return spectral_gap(mm.w); }

/// W = I - L / tau. With no explicit tau, tau = lambda_max(L), which keeps W
/// positive semidefinite.
inline MixingMatrix mixing_matrix(const ServerGraph& g, std::optional<double> tau = std::nullopt) {
  if (!g.connected()) throw ConfigError("mixing_matrix: graph is disconnected");
  const Eigen::MatrixXd lap = laplacian(g);
  const double lam_max =
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(lap, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
  const double t = tau.value_or(lam_max);
  if (!(t > 0.5 * lam_max))
    throw ConfigError("mixing_matrix: tau must exceed lambda_max(L)/2 = " +
                      std::to_string(0.5 * lam_max));
  const auto deg = g.degrees();
  const auto max_deg = static_cast<double>(*std::max_element(deg.begin(), deg.end()));
  if (t < max_deg)
    throw ConfigError("mixing_matrix: tau below the maximum degree gives negative weights");

  MixingMatrix mm;
  mm.tau = t;
  const auto n = static_cast<Eigen::Index>(g.n);
  mm.w = Eigen::MatrixXd::Zero(n, n);
  for (auto [a, b] : g.edges) {
    mm.w(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = 1.0 / t;
    mm.w(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) = 1.0 / t;
  }
  for (Eigen::Index i = 0; i < n; ++i) mm.w(i, i) = 1.0 - static_cast<double>(deg[i]) / t;
  mm.sigma = spectral_gap(mm.w);
  if (!(mm.sigma < 1.0)) throw ConfigError("mixing_matrix: sigma >= 1 (graph not primitive)");
  return mm;
}

/// Row-major CSV of W with 17 significant digits.
inline void write_mixing_csv(std::ostream& os, const MixingMatrix& mm) {
  char buf[64];
  for (Eigen::Index i = 0; i < mm.size(); ++i) {
    for (Eigen::Index j = 0; j < mm.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", mm.w(i, j));
      if (j) os << ',';
      os << buf;
    }
    os << '\n';
  }
}

}  // namespace confed
