#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <limits>

#include "confed/theory.hpp"
#include "oracles.hpp"

using namespace confed;

namespace {

TraceRow opg_row(long round, double opg) {
  TraceRow r{};
  r.round = round;
  r.opg = opg;
  return r;
}

double field(const TheoryConstants& k, const std::string& name) {
  if (name == "c1") return k.c1;
  if (name == "c2") return k.c2;
  if (name == "c3") return k.c3;
  if (name == "b1") return k.b1;
  if (name == "b2") return k.b2;
  if (name == "b3") return k.b3;
  if (name == "b_bar") return k.b_bar;
  if (name == "a1") return k.a1;
  if (name == "a2") return k.a2;
  if (name == "a3") return k.a3;
  if (name == "a4") return k.a4;
  if (name == "gamma") return k.gamma;
  throw std::logic_error(name);
}

DatasetConfig small_config() {
  DatasetConfig c;
  c.n_servers = 4;
  c.users_per_server = 4;
  c.minibatches_per_user = 4;
  c.batch_size = 5;
  c.dim = 10;
  return c;
}

}  // namespace

TEST(Constants, FormulaSheet) {
  for (const auto& fs : oracle::formula_sheet()) {
    const auto k = compute_constants(fs.mu, fs.lip, fs.sigma, fs.alpha, fs.rho, fs.n, fs.p, fs.s);
    for (const auto& [name, value] : fs.expected)
      EXPECT_NEAR(field(k, name), value, 1e-13 * std::abs(value)) << name << " at mu=" << fs.mu;
  }
}

TEST(Constants, UnitInputsSmallStep) {
  const auto k = compute_constants(1, 1, 0, 1e-9, 0, 1, 1, 1);
  EXPECT_EQ(k.c1, 16.0);
  EXPECT_EQ(k.c2, 16.0);
  EXPECT_EQ(k.c3, 4.0);
  EXPECT_EQ(k.mu, 1.0);
  EXPECT_EQ(k.s_max, 1.0);
}

TEST(Constants, GammaAtVertex) {
  const auto probe = compute_constants(50, 352.8, 0.8, 1e-6, 10, 20, 20, 10);
  const double alpha = probe.mu * probe.n / (16.0 * probe.c2);
  const auto k = compute_constants(50, 352.8, 0.8, alpha, 10, 20, 20, 10);
  const double expect = 1.0 - probe.mu * probe.mu * probe.n / (128.0 * probe.c2);
  EXPECT_NEAR(k.gamma, expect, 1e-15);
  EXPECT_LT(k.gamma, 1.0);
}

TEST(Constants, NonnegativeAndFinite) {
  const auto k = compute_constants(0.5, 3, 0.3, 0.01, 2.5, 4, 4, 4);
  for (double v : {k.c1, k.c2, k.c3, k.b1, k.b2, k.b3, k.b_bar, k.a1, k.a2, k.a3, k.a4, k.gamma}) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0);
  }
}

TEST(Constants, Errors) {
  EXPECT_THROW(compute_constants(1, 1, 1.0, 1e-3, 0, 1, 1, 1), ConfigError);
  EXPECT_THROW(compute_constants(1, 1, -0.1, 1e-3, 0, 1, 1, 1), ConfigError);
  EXPECT_THROW(compute_constants(0, 1, 0.5, 1e-3, 0, 1, 1, 1), ConfigError);
  EXPECT_THROW(compute_constants(2, 1, 0.5, 1e-3, 0, 1, 1, 1), ConfigError);
  EXPECT_THROW(compute_constants(1, 1, 0.5, 0.0, 0, 1, 1, 1), ConfigError);
  EXPECT_THROW(compute_constants(1, 1, 0.5, 1e-3, -1, 1, 1, 1), ConfigError);
  EXPECT_THROW(compute_constants(1, 1, 0.5, 1e-3, 0, 0, 1, 1), ConfigError);
}

TEST(Transition, PatternAndEntries) {
  const auto k = compute_constants(0.5, 3, 0.3, 0.01, 2.5, 4, 4, 4);
  const auto t = transition_matrix(k);
  EXPECT_EQ(t(0, 1), 0.0);
  EXPECT_EQ(t(0, 2), 0.0);
  EXPECT_EQ(t(1, 3), 0.0);
  EXPECT_EQ(t(2, 3), 0.0);
  EXPECT_EQ(t(2, 2), 1.0 - 1.0 / 4.0);
  EXPECT_DOUBLE_EQ(t(0, 0), (1.0 + 0.09) / 2.0);
  EXPECT_DOUBLE_EQ(t(0, 3), 2.0 * 1e-4 / (1.0 - 0.09));
  EXPECT_EQ(t(1, 0), k.b2);
  EXPECT_EQ(t(1, 1), k.b1);
  EXPECT_EQ(t(1, 2), k.b3);
  EXPECT_EQ(t(2, 0), 2.0 * 4.0);
  EXPECT_EQ(t(2, 1), 2.0 * 4.0 * 4.0);
  EXPECT_EQ(t(3, 0), k.a1);
  EXPECT_EQ(t(3, 1), k.a2);
  EXPECT_EQ(t(3, 2), k.a4);
  EXPECT_EQ(t(3, 3), k.a3);
}

TEST(Spectral, MatchesEigenSolver) {
  for (double alpha : {1e-3, 1e-6, 1e-9}) {
    const auto t = transition_matrix(compute_constants(0.5, 3, 0.3, alpha, 2.5, 4, 4, 4));
    const double oracle_rho = oracle::perron_root(t);
    const auto r = spectral_radius(t);
    EXPECT_NEAR(r.rho, oracle_rho, 1e-9 * oracle_rho);
    EXPECT_GE(r.rho_upper, oracle_rho);
    EXPECT_LE(r.rho_lower, oracle_rho);
    EXPECT_GE(r.singular, oracle_rho * (1.0 - 1e-12));
  }
}

TEST(Spectral, RejectsNegativeEntries) {
  Eigen::Matrix4d t = Eigen::Matrix4d::Ones();
  t(1, 2) = -1.0;
  EXPECT_THROW(spectral_radius(t), ConfigError);
}

TEST(AlphaThreshold, CertifiedAlphaContracts) {
  const auto c = find_alpha_threshold(0.5, 3, 0.3, 2.5, 4, 4, 4);
  EXPECT_GT(c.alpha, 0.0);
  EXPECT_LT(c.spectral.rho_upper, 1.0);
  EXPECT_LE(c.spectral.rho_upper, 1.0 - 0.5 * c.alpha / 8.0);
  EXPECT_LT(oracle::perron_root(transition_matrix(c.constants)), 1.0);
  // Twice the certified step is no longer certified.
  const auto k = compute_constants(0.5, 3, 0.3, 2.0 * c.alpha, 2.5, 4, 4, 4);
  EXPECT_GT(spectral_radius(transition_matrix(k)).rho_upper, 1.0 - 0.5 * 2.0 * c.alpha / 8.0);
}

TEST(AlphaThreshold, ShrinksAsSigmaApproachesOne) {
  const double loose = find_alpha_threshold(0.5, 3, 0.1, 2.5, 4, 4, 4).alpha;
  const double tight = find_alpha_threshold(0.5, 3, 0.99, 2.5, 4, 4, 4).alpha;
  EXPECT_LT(tight, 1e-3 * loose);
}

TEST(AlphaThreshold, EmptyBracket) {
  EXPECT_THROW(find_alpha_threshold(1e-9, 1e9, 0.999999, 50, 1000, 1000, 1000), ConvergenceError);
}

TEST(Psi, OptimumIsZero) {
  const auto ds = synthesize_dataset(small_config(), 1);
  const auto w = mixing_matrix(build_graph(GraphKind::ring, 4, std::nullopt, 1));
  EngineOptions o;
  o.track_phi = true;
  auto st = init_state(ds, w, o);
  const Eigen::VectorXd xs = Eigen::VectorXd::LinSpaced(10, -1, 1);
  st.x.colwise() = xs;
  for (auto& srv : st.servers)
    for (auto& u : srv.users) u.phi_points.colwise() = xs;
  const auto p = psi_metrics(st, xs);
  EXPECT_EQ(p.x_gap, 0.0);
  EXPECT_EQ(p.mean_gap, 0.0);
  EXPECT_EQ(*p.table_gap, 0.0);
  EXPECT_EQ(p.y_gap, 0.0);
}

TEST(Psi, InitialState) {
  const auto ds = synthesize_dataset(small_config(), 1);
  const auto w = mixing_matrix(build_graph(GraphKind::ring, 4, std::nullopt, 1));
  const auto st = init_state(ds, w);
  const Eigen::VectorXd xs = Eigen::VectorXd::LinSpaced(10, 0.1, 1);
  const auto p = psi_metrics(st, xs);
  EXPECT_EQ(p.x_gap, 0.0);
  EXPECT_DOUBLE_EQ(p.mean_gap, xs.squaredNorm());
  EXPECT_EQ(p.y_gap, 0.0);
  EXPECT_FALSE(p.table_gap.has_value());
  EXPECT_DOUBLE_EQ(optimality_gap(st, xs), xs.norm());
  EXPECT_THROW(psi_metrics(st, Eigen::VectorXd::Zero(3)), ConfigError);
}

TEST(Psi, TableGapBruteForce) {
  const auto ds = synthesize_dataset(small_config(), 2);
  const auto w = mixing_matrix(build_graph(GraphKind::ring, 4, std::nullopt, 1));
  EngineOptions o;
  o.track_phi = true;
  auto st = init_state(ds, w, o);
  for (int k = 0; k < 37; ++k) cfl_saga_round(st, ds, w, 1e-2, {1.0});
  const Eigen::VectorXd xs = Eigen::VectorXd::Constant(10, 0.05);
  double d = 0.0;
  for (const auto& srv : st.servers)
    for (const auto& u : srv.users)
      for (Eigen::Index t = 0; t < 4; ++t)
        for (Eigen::Index r = 0; r < 10; ++r) d += std::pow(xs[r] - u.phi_points(r, t), 2);
  const auto p = psi_metrics(st, xs);
  EXPECT_NEAR(*p.table_gap, d, 1e-12 * d);
  double xg = 0.0;
  const Eigen::VectorXd xbar = st.x.rowwise().mean();
  for (Eigen::Index i = 0; i < 4; ++i) xg += (st.x.col(i) - xbar).squaredNorm();
  EXPECT_NEAR(p.x_gap, xg, 1e-12 * xg);
}

TEST(ConsensusBound, HoldsAlongRun) {
  const auto ds = synthesize_dataset(small_config(), 3);
  const auto w = mixing_matrix(build_graph(GraphKind::ring, 4, std::nullopt, 1));
  auto st = init_state(ds, w);
  const Eigen::VectorXd xs = Eigen::VectorXd::Zero(10);
  auto prev = psi_metrics(st, xs);
  for (int k = 0; k < 200; ++k) {
    cfl_saga_round(st, ds, w, 2e-2, {5.0});
    const auto now = psi_metrics(st, xs);
    const double m = consensus_margin(prev.x_gap, prev.y_gap, now.x_gap, w.sigma, 2e-2);
    EXPECT_GE(m, -1e-9 * (1.0 + m + now.x_gap));
    prev = now;
  }
}

TEST(RateFit, GeometricSeries) {
  MetricsTrace t;
  for (long k = 0; k < 50; ++k) t.rows.push_back(opg_row(k, std::pow(0.9, k)));
  const auto f = linear_rate_fit(t, 0);
  EXPECT_NEAR(f.slope, std::log(0.9), 1e-12);
  EXPECT_NEAR(f.r_squared, 1.0, 1e-12);
  EXPECT_NEAR(f.contraction(), 0.9, 1e-12);
  EXPECT_EQ(f.points, 50u);
  const auto cut = linear_rate_fit(t, 5, std::pow(0.9, 30));
  EXPECT_EQ(cut.points, 26u);
}

TEST(RateFit, Errors) {
  MetricsTrace t;
  for (long k = 0; k < 9; ++k) t.rows.push_back(opg_row(k, 1.0 / (k + 1)));
  EXPECT_THROW(linear_rate_fit(t, 0), ConfigError);
  t.rows.push_back(opg_row(9, 0.0));
  EXPECT_THROW(linear_rate_fit(t, 0), ConfigError);
}

TEST(PruneCheck, FixedPointIsDegenerate) {
  std::vector<CtusRecord> log;
  for (long k = 1; k <= 5; ++k) log.push_back({k, 0.0, 10, 0, 10, 0.0, 0.0, std::nullopt});
  const auto r = ctus_prune_check(log, 1.0, 2, 5, 4);
  EXPECT_EQ(r.degenerate_rounds, 5u);
  EXPECT_TRUE(r.ratio_finite);
  EXPECT_DOUBLE_EQ(r.pruned_at_ratio_fraction, 1.0);
  EXPECT_DOUBLE_EQ(r.non_trigger_fraction, 1.0);
}

TEST(PruneCheck, RatioAndWindow) {
  std::vector<CtusRecord> log;
  log.push_back({1, 1.0, 10, 10, 0, 100.0, 1.0, std::nullopt});  // outside the window
  log.push_back({2, 1e-4, 10, 4, 6, 20.0, 4.0, 3.0});
  log.push_back({3, 1e-4, 10, 2, 8, 10.0, 4.0, 5.0});
  const auto r = ctus_prune_check(log, 1.0, 2, 5, 4);
  EXPECT_EQ(r.rounds, 2u);
  // r_k = (sum delta / 10) / (sum thr / 2)
  EXPECT_DOUBLE_EQ(r.mean_ratio, 0.5 * (2.0 / 2.0 + 1.0 / 2.0));
  EXPECT_DOUBLE_EQ(r.non_trigger_fraction, 0.5 * (0.6 + 0.8));
  EXPECT_DOUBLE_EQ(*r.l_bar, 5.0);
  EXPECT_DOUBLE_EQ(*r.c3_floor, 16.0 * 4.0 * 5.0 * 5.0 * 2.0 / 10.0);
  EXPECT_THROW(ctus_prune_check(log, 1.0, 2, 5, 4, 1e-6), ConfigError);
}

TEST(PruneCheck, InfiniteRatio) {
  std::vector<CtusRecord> log{{1, 0.0, 4, 4, 0, 1.0, 0.0, std::nullopt}};
  const auto r = ctus_prune_check(log, 1.0, 1, 4, 4);
  EXPECT_FALSE(r.ratio_finite);
}

TEST(PruneCheck, RhoZeroPrunesNothing) {
  const auto ds = synthesize_dataset(small_config(), 4);
  const auto w = mixing_matrix(build_graph(GraphKind::ring, 4, std::nullopt, 1));
  auto st = init_state(ds, w);
  std::vector<CtusRecord> log;
  for (long k = 1; k <= 50; ++k) {
    const auto& s = cfl_saga_round(st, ds, w, 1e-2, {0.0});
    log.push_back({k, 0.0, s.users, s.uploads, pruned_at_ratio(s, 4), s.sum_delta_sq,
                   s.sum_threshold_sq, std::nullopt});
  }
  const auto r = ctus_prune_check(log, 1.0, 4, 4, 4);
  EXPECT_EQ(r.non_trigger_fraction, 0.0);
}

TEST(PrunedAtRatio, Counts) {
  RoundStats s;
  s.threshold_sq = {1.0, 3.0};
  s.delta_sq = {0.5, 4.0, 1.0, 9.0};
  s.sum_delta_sq = 14.5;
  s.sum_threshold_sq = 4.0;
  // ratio = (14.5 / 4) / (4 / 2) = 1.8125
  EXPECT_EQ(pruned_at_ratio(s, 2), 2u);
}

TEST(TableLipschitz, MatchesDefinition) {
  const auto ds = synthesize_dataset(small_config(), 5);
  const auto w = mixing_matrix(build_graph(GraphKind::ring, 4, std::nullopt, 1));
  EngineOptions o;
  o.track_phi = true;
  auto st = init_state(ds, w, o);
  for (int k = 0; k < 10; ++k) cfl_saga_round(st, ds, w, 1e-2, {1.0});
  const auto sq = minibatch_lipschitz_squares(ds);
  ASSERT_EQ(sq.size(), 64u);
  const Eigen::VectorXd xs = Eigen::VectorXd::Constant(10, 0.2);
  double num = 0.0, den = 0.0;
  std::size_t idx = 0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (Eigen::Index t = 0; t < 4; ++t) {
        const double gap = (st.servers[i].users[j].phi_points.col(t) - xs).squaredNorm();
        num += 4.0 * 16.0 * sq[idx++] / 4.0 * gap;
        den += gap;
      }
  EXPECT_NEAR(*table_lipschitz(st, xs, sq), num / den, 1e-12 * num / den);
}

TEST(RecursionTerms, Rows) {
  const auto k = compute_constants(0.5, 3, 0.3, 0.01, 2.5, 4, 4, 4);
  PsiVector now{1.0, 2.0, 3.0, 4.0}, next{0.5, 1.5, 2.5, 3.5};
  const auto t = recursion_terms(k, now, 2.0, next);
  EXPECT_DOUBLE_EQ(t.mean_lhs, 1.5);
  EXPECT_DOUBLE_EQ(t.mean_rhs, k.b1 * 2.0 + k.b2 * 1.0 + k.b3 * 3.0);
  EXPECT_DOUBLE_EQ(t.table_lhs, 2.0);
  EXPECT_DOUBLE_EQ(t.table_rhs, 0.75 * 3.0 + 8.0 * 1.0 + 32.0 * 2.0);
  EXPECT_DOUBLE_EQ(t.y_lhs, 3.5);
  EXPECT_DOUBLE_EQ(t.y_rhs, k.a1 + k.a2 * 2.0 + k.a3 * 4.0 + k.a4 * 3.0);
}
