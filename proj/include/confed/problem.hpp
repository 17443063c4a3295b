#pragma once

// L2-regularized logistic regression spread over servers, users and
// minibatches. The ridge weight kappa sits inside the per-sample sum, so
//   f_{ij,t}(x) = sum_{s in batch} [ kappa/2 ||x||^2 + softplus(w_s^T x) - y_s w_s^T x ]
// and the global objective is f = (1/N) sum_i f_i.

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "confed/errors.hpp"
#include "confed/linalg.hpp"
#include "confed/rng.hpp"

namespace confed {

struct DatasetConfig {
  std::size_t n_servers = 20;
  std::size_t users_per_server = 20;
  std::size_t minibatches_per_user = 10;
  std::size_t batch_size = 5;
  std::size_t dim = 200;
  double kappa = 0.05;
  // Generator: features ~ feature_scale * N(0, 1), labels ~ Bernoulli(label_prob).
  double feature_scale = 1.0;
  double label_prob = 0.5;

  std::size_t users() const { return n_servers * users_per_server; }
  std::size_t samples_per_server() const {
    return users_per_server * minibatches_per_user * batch_size;
  }
  std::size_t total_samples() const { return n_servers * samples_per_server(); }

  void validate() const {
    if (n_servers == 0 || users_per_server == 0 || minibatches_per_user == 0 ||
        batch_size == 0 || dim == 0)
      throw ConfigError("dataset: all counts must be positive");
    if (!(kappa >= 0.0) || !std::isfinite(kappa)) throw ConfigError("dataset: kappa must be >= 0");
    if (!(label_prob >= 0.0 && label_prob <= 1.0))
      throw ConfigError("dataset: label_prob must be in [0, 1]");
    if (!std::isfinite(feature_scale)) throw ConfigError("dataset: feature_scale must be finite");
  }
};

/// Samples are stored one per column, ordered (server, user, minibatch, slot),
/// so every minibatch, user and server is a contiguous column block.
struct Dataset {
  DatasetConfig cfg;
  Eigen::MatrixXd features;          // dim x total_samples
  Eigen::VectorXd labels;            // 0.0 or 1.0
  std::vector<std::uint8_t> raw_labels;

  std::size_t sample_index(std::size_t i, std::size_t j, std::size_t t) const {
    return ((i * cfg.users_per_server + j) * cfg.minibatches_per_user + t) * cfg.batch_size;
  }

  auto batch(std::size_t i, std::size_t j, std::size_t t) const {
    return features.middleCols(static_cast<Eigen::Index>(sample_index(i, j, t)),
                               static_cast<Eigen::Index>(cfg.batch_size));
  }
  auto batch_labels(std::size_t i, std::size_t j, std::size_t t) const {
    return labels.segment(static_cast<Eigen::Index>(sample_index(i, j, t)),
                          static_cast<Eigen::Index>(cfg.batch_size));
  }
  auto server_block(std::size_t i) const {
    return features.middleCols(static_cast<Eigen::Index>(sample_index(i, 0, 0)),
                               static_cast<Eigen::Index>(cfg.samples_per_server()));
  }
  auto server_labels(std::size_t i) const {
    return labels.segment(static_cast<Eigen::Index>(sample_index(i, 0, 0)),
                          static_cast<Eigen::Index>(cfg.samples_per_server()));
  }
};

inline Dataset synthesize_dataset(const DatasetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Dataset ds;
  ds.cfg = cfg;
  const std::size_t total = cfg.total_samples();
  const auto d = static_cast<Eigen::Index>(cfg.dim);
  ds.features.resize(d, static_cast<Eigen::Index>(total));
  ds.labels.resize(static_cast<Eigen::Index>(total));
  ds.raw_labels.resize(total);
  for (std::size_t s = 0; s < total; ++s) {
    Stream fs(seed, Domain::features, static_cast<std::uint32_t>(s),
              static_cast<std::uint32_t>(s >> 32));
    auto col = ds.features.col(static_cast<Eigen::Index>(s));
    for (Eigen::Index c = 0; c < d; ++c) col[c] = cfg.feature_scale * fs.normal();
    Stream ls(seed, Domain::labels, static_cast<std::uint32_t>(s),
              static_cast<std::uint32_t>(s >> 32));
    const std::uint8_t y = ls.uniform() < cfg.label_prob ? 1 : 0;
    ds.raw_labels[s] = y;
    ds.labels[static_cast<Eigen::Index>(s)] = y;
  }
  return ds;
}

// log(1 + e^z) without overflow.
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline double logistic(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace detail {

template <class Block, class Labels>
double block_loss(VecIn x, const Block& feats, const Labels& y, double kappa) {
  const Eigen::VectorXd z = feats.transpose() * x;
  double acc = 0.0;
  for (Eigen::Index s = 0; s < z.size(); ++s) acc += softplus(z[s]) - y[s] * z[s];
  return acc + 0.5 * kappa * static_cast<double>(z.size()) * x.squaredNorm();
}

template <class Block, class Labels>
void block_gradient(VecIn x, const Block& feats, const Labels& y, double kappa,
                    Eigen::Ref<Eigen::VectorXd> out) {
  Eigen::VectorXd r = feats.transpose() * x;
  for (Eigen::Index s = 0; s < r.size(); ++s) r[s] = logistic(r[s]) - y[s];
  out.noalias() = feats * r;
  out += (kappa * static_cast<double>(r.size())) * x;
}

}  // namespace detail

inline double minibatch_loss(VecIn x, const Dataset& ds, std::size_t i,
                             std::size_t j, std::size_t t) {
  return detail::block_loss(x, ds.batch(i, j, t), ds.batch_labels(i, j, t), ds.cfg.kappa);
}

inline void minibatch_gradient(VecIn x, const Dataset& ds, std::size_t i,
                               std::size_t j, std::size_t t, Eigen::Ref<Eigen::VectorXd> out) {
  detail::block_gradient(x, ds.batch(i, j, t), ds.batch_labels(i, j, t), ds.cfg.kappa, out);
}

inline ModelVector minibatch_gradient(VecIn x, const Dataset& ds, std::size_t i,
                                      std::size_t j, std::size_t t) {
  ModelVector g(x.size());
  minibatch_gradient(x, ds, i, j, t, g);
  return g;
}

/// f_i = sum over the server's users and minibatches.
inline double server_loss(VecIn x, const Dataset& ds, std::size_t i) {
  return detail::block_loss(x, ds.server_block(i), ds.server_labels(i), ds.cfg.kappa);
}

inline void server_gradient(VecIn x, const Dataset& ds, std::size_t i,
                            Eigen::Ref<Eigen::VectorXd> out) {
  detail::block_gradient(x, ds.server_block(i), ds.server_labels(i), ds.cfg.kappa, out);
}

/// f = (1/N) sum_i f_i.
inline double objective(VecIn x, const Dataset& ds) {
  return detail::block_loss(x, ds.features, ds.labels, ds.cfg.kappa) /
         static_cast<double>(ds.cfg.n_servers);
}

inline ModelVector objective_gradient(VecIn x, const Dataset& ds) {
  ModelVector g(x.size());
  detail::block_gradient(x, ds.features, ds.labels, ds.cfg.kappa, g);
  g /= static_cast<double>(ds.cfg.n_servers);
  return g;
}

struct Curvature {
  double mu = 0.0;
  double lip = 0.0;
};

/// mu from the ridge term alone; lip from the 1/4 bound on the logistic
/// second derivative: lip = mu + lambda_max(sum w w^T) / (4N).
inline Curvature curvature(const Dataset& ds) {
  const double n = static_cast<double>(ds.cfg.n_servers);
  Curvature c;
  c.mu = ds.cfg.kappa * static_cast<double>(ds.cfg.total_samples()) / n;
  const Eigen::MatrixXd gram = ds.features * ds.features.transpose();
  const double lam = psd_max_eigenvalue(gram, PowerIterationOptions{1e-12, 0.0, 100000});
  c.lip = c.mu + lam / (4.0 * n);
  return c;
}

/// L_{ij,t} = kappa * B + (1/4) sum_{s in batch} ||w_s||^2.
inline double minibatch_lipschitz(const Dataset& ds, std::size_t i, std::size_t j,
                                  std::size_t t) {
  return ds.cfg.kappa * static_cast<double>(ds.cfg.batch_size) +
         0.25 * ds.batch(i, j, t).colwise().squaredNorm().sum();
}

struct SolveResult {
  ModelVector x;
  double grad_norm = 0.0;
  long iterations = 0;
};

/// Gradient descent with Armijo backtracking (c = 1e-4, halving). The step is
/// never shrunk below 1/lip, where the descent lemma already guarantees the
/// Armijo decrease and objective differences are dominated by rounding.
inline SolveResult solve_centralized(const Dataset& ds, double tol,
                                     const std::optional<ModelVector>& start = std::nullopt,
                                     std::optional<Curvature> curv = std::nullopt,
                                     long max_iter = 1000000) {
  if (!(tol > 0.0)) throw ConfigError("solve_centralized: tol must be positive");
  const Curvature c = curv ? *curv : curvature(ds);
  const double step_floor = 1.0 / c.lip;
  constexpr double kArmijo = 1e-4;

  SolveResult res;
  res.x = start ? *start : ModelVector::Zero(static_cast<Eigen::Index>(ds.cfg.dim));
  ModelVector g = objective_gradient(res.x, ds);
  double fx = objective(res.x, ds);
  double step = 1.0;
  ModelVector trial(res.x.size());
  for (long it = 0; it < max_iter; ++it) {
    const double gn2 = g.squaredNorm();
    res.grad_norm = std::sqrt(gn2);
    res.iterations = it;
    if (res.grad_norm <= tol) return res;
    double ft = 0.0;
    for (;;) {
      trial = res.x - step * g;
      ft = objective(trial, ds);
      if (ft <= fx - kArmijo * step * gn2 || step <= step_floor) break;
      step = std::max(0.5 * step, step_floor);
    }
    res.x.swap(trial);
    fx = ft;
    g = objective_gradient(res.x, ds);
    step *= 2.0;
  }
  throw ConvergenceError("solve_centralized: iteration cap reached with gradient norm " +
                         std::to_string(res.grad_norm));
}

// Binary dump: "CFLDSET1", six little-endian u64 counts/flags, f64 kappa,
// f64 feature_scale, f64 label_prob, then sample-major f64 features and u8 labels.
namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T)))
    throw FormatError("dataset dump: truncated input");
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

inline constexpr char kDatasetMagic[8] = {'C', 'F', 'L', 'D', 'S', 'E', 'T', '1'};

}  // namespace detail

inline void write_dataset(std::ostream& os, const Dataset& ds) {
  os.write(detail::kDatasetMagic, 8);
  const auto& c = ds.cfg;
  for (std::uint64_t v : {std::uint64_t{c.n_servers}, std::uint64_t{c.users_per_server},
                          std::uint64_t{c.minibatches_per_user}, std::uint64_t{c.batch_size},
                          std::uint64_t{c.dim}, std::uint64_t{c.total_samples()}})
    detail::put_le(os, v);
  detail::put_le(os, c.kappa);
  detail::put_le(os, c.feature_scale);
  detail::put_le(os, c.label_prob);
  for (Eigen::Index s = 0; s < ds.features.cols(); ++s)
    for (Eigen::Index r = 0; r < ds.features.rows(); ++r) detail::put_le(os, ds.features(r, s));
  for (auto y : ds.raw_labels) detail::put_le(os, y);
}

inline Dataset read_dataset(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, detail::kDatasetMagic, 8) != 0)
    throw FormatError("dataset dump: bad magic");
  Dataset ds;
  auto& c = ds.cfg;
  c.n_servers = detail::get_le<std::uint64_t>(is);
  c.users_per_server = detail::get_le<std::uint64_t>(is);
  c.minibatches_per_user = detail::get_le<std::uint64_t>(is);
  c.batch_size = detail::get_le<std::uint64_t>(is);
  c.dim = detail::get_le<std::uint64_t>(is);
  const auto total = detail::get_le<std::uint64_t>(is);
  c.kappa = detail::get_le<double>(is);
  c.feature_scale = detail::get_le<double>(is);
  c.label_prob = detail::get_le<double>(is);
  c.validate();
  if (total != c.total_samples()) throw FormatError("dataset dump: sample count mismatch");
  ds.features.resize(static_cast<Eigen::Index>(c.dim), static_cast<Eigen::Index>(total));
  for (Eigen::Index s = 0; s < ds.features.cols(); ++s)
    for (Eigen::Index r = 0; r < ds.features.rows(); ++r)
      ds.features(r, s) = detail::get_le<double>(is);
  ds.raw_labels.resize(total);
  ds.labels.resize(static_cast<Eigen::Index>(total));
  for (std::size_t s = 0; s < total; ++s) {
    ds.raw_labels[s] = detail::get_le<std::uint8_t>(is);
    if (ds.raw_labels[s] > 1) throw FormatError("dataset dump: label out of range");
    ds.labels[static_cast<Eigen::Index>(s)] = ds.raw_labels[s];
  }
  return ds;
}

}  // namespace confed
