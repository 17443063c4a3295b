#pragma once

// Small dense eigenvalue routines used by the topology, problem and theory
// modules. Sizes are modest (N servers, d features, 4x4 transition matrices),
// so everything is plain power iteration on Eigen dense types.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "confed/errors.hpp"
#include "confed/rng.hpp"

namespace confed {

using ModelVector = Eigen::VectorXd;
using VecIn = const Eigen::Ref<const Eigen::VectorXd>&;

struct PowerIterationOptions {
  double rel_tol = 1e-10;
  double abs_tol = 0.0;
  long max_iter = 100000;
};

namespace detail {

inline Eigen::VectorXd deterministic_start(Eigen::Index n, bool remove_mean) {
  Stream s(0x5EEDF00DULL, Domain::start_point, static_cast<std::uint32_t>(n));
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = s.uniform() + 0.5;
  if (remove_mean && n > 1) v.array() -= v.mean();
  return v;
}

}  // namespace detail

/// Largest eigenvalue of a symmetric positive semidefinite matrix, given as an
/// operator `apply(in, out)`. Returns 0 when the operator annihilates the start.
template <class Apply>
double psd_max_eigenvalue(Eigen::Index n, Apply&& apply, PowerIterationOptions opt = {},
                          bool start_orthogonal_to_ones = false) {
  Eigen::VectorXd v = detail::deterministic_start(n, start_orthogonal_to_ones);
  double norm = v.norm();
  if (norm == 0.0) return 0.0;
  v /= norm;
  Eigen::VectorXd w(n);
  double lambda = 0.0;
  for (long it = 0; it < opt.max_iter; ++it) {
    apply(v, w);
    const double next = v.dot(w);  // Rayleigh quotient, v unit length
    const double wn = w.norm();
    if (wn == 0.0) return 0.0;
    if (it > 0 && std::abs(next - lambda) <= opt.rel_tol * std::abs(next) + opt.abs_tol)
      return next;
    lambda = next;
    v = w / wn;
  }
  throw ConvergenceError("power iteration did not converge after " +
                         std::to_string(opt.max_iter) + " iterations");
}

inline double psd_max_eigenvalue(const Eigen::MatrixXd& m, PowerIterationOptions opt = {}) {
  return psd_max_eigenvalue(
      m.rows(), [&](const Eigen::VectorXd& in, Eigen::VectorXd& out) { out.noalias() = m * in; },
      opt);
}

/// Perron root of a nonnegative irreducible matrix together with its
/// Collatz-Wielandt bracket: for any positive v,
///   min_i (Tv)_i / v_i <= rho(T) <= max_i (Tv)_i / v_i.
struct PerronRoot {
  double rho = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  Eigen::VectorXd vector;
  long iterations = 0;
};

inline PerronRoot perron_root(const Eigen::MatrixXd& t, PowerIterationOptions opt = {}) {
  const Eigen::Index n = t.rows();
  if ((t.array() < 0.0).any()) throw ConfigError("perron_root: matrix has a negative entry");
  Eigen::VectorXd v = Eigen::VectorXd::Ones(n);
  Eigen::VectorXd w(n);
  PerronRoot out;
  for (long it = 0; it < opt.max_iter; ++it) {
    w.noalias() = t * v;
    if (!(w.array() > 0.0).all()) throw ConfigError("perron_root: matrix is reducible");
    const Eigen::ArrayXd ratio = w.array() / v.array();
    out.lower = ratio.minCoeff();
    out.upper = ratio.maxCoeff();
    out.iterations = it + 1;
    if (out.upper - out.lower <= opt.rel_tol * out.upper) {
      out.rho = 0.5 * (out.lower + out.upper);
      out.vector = v;
      return out;
    }
    v = w / w.maxCoeff();
  }
  throw ConvergenceError("perron_root did not converge after " + std::to_string(opt.max_iter) +
                         " iterations");
}

/// Largest singular value via power iteration on T^T T.
inline double largest_singular_value(const Eigen::MatrixXd& t, PowerIterationOptions opt = {}) {
  Eigen::VectorXd tmp(t.rows());
  const double lam = psd_max_eigenvalue(
      t.cols(),
      [&](const Eigen::VectorXd& in, Eigen::VectorXd& out) {
        tmp.noalias() = t * in;
        out.noalias() = t.transpose() * tmp;
      },
      opt);
  return std::sqrt(std::max(lam, 0.0));
}

}  // namespace confed
