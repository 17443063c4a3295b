#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>

#include "confed/engine.hpp"
#include "oracles.hpp"

using namespace confed;

namespace {

DatasetConfig small_config(std::size_t n = 4) {
  DatasetConfig c;
  c.n_servers = n;
  c.users_per_server = 5;
  c.minibatches_per_user = 4;
  c.batch_size = 3;
  c.dim = 8;
  return c;
}

MixingMatrix ring_w(std::size_t n) {
  return mixing_matrix(build_graph(GraphKind::ring, n, std::nullopt, 1));
}

}  // namespace

TEST(Algorithm, Names) {
  for (auto a : {Algorithm::gt, Algorithm::gt_saga, Algorithm::cfl_saga})
    EXPECT_EQ(parse_algorithm(to_string(a)), a);
  EXPECT_THROW(parse_algorithm("sgd"), ConfigError);
}

TEST(InitState, ZerosAndTables) {
  const auto ds = synthesize_dataset(small_config(), 1);
  const auto st = init_state(ds, ring_w(4));
  EXPECT_TRUE(st.x.isZero(0.0));
  EXPECT_TRUE(st.y.isZero(0.0));
  EXPECT_TRUE(st.g.isZero(0.0));
  EXPECT_EQ(st.round, 0);
  EXPECT_TRUE(st.y_mean().isZero(0.0));
  EXPECT_TRUE(st.g_mean().isZero(0.0));
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(8);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      const auto& u = st.servers[i].users[j];
      for (std::size_t t = 0; t < 4; ++t)
        EXPECT_EQ(Eigen::VectorXd(u.stored_grads.col(static_cast<Eigen::Index>(t))),
                  minibatch_gradient(zero, ds, i, j, t));
      EXPECT_TRUE(u.last_vrsg.isZero(0.0));
      EXPECT_EQ(u.phi_points.size(), 0);
    }
}

TEST(InitState, DefaultConfigTables) {
  const auto ds = synthesize_dataset(DatasetConfig{}, 1);
  const auto st = init_state(ds, mixing_matrix(build_graph(GraphKind::random, 20, 0.3, 1)));
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(200);
  for (std::size_t i : {0u, 7u, 19u})
    for (std::size_t t = 0; t < 10; ++t)
      EXPECT_EQ(Eigen::VectorXd(st.servers[i].users[3].stored_grads.col(static_cast<Eigen::Index>(t))),
                minibatch_gradient(zero, ds, i, 3, t));
}

TEST(InitState, DimensionMismatch) {
  const auto ds = synthesize_dataset(small_config(), 1);
  EXPECT_THROW(init_state(ds, ring_w(5)), ConfigError);
}

TEST(VrGradient, ZeroInnovationReturnsSum) {
  const auto ds = synthesize_dataset(small_config(), 1);
  auto st = init_state(ds, ring_w(4));
  auto& u = st.servers[1].users[2];
  const Eigen::VectorXd before = u.grad_sum;
  const Eigen::VectorXd g = vr_gradient(u, Eigen::VectorXd::Zero(8), ds, 1, 2, 3);
  EXPECT_LE((g - before).norm(), 1e-15 * (1.0 + before.norm()));
}

TEST(VrGradient, SingleMinibatchIsExact) {
  auto c = small_config();
  c.minibatches_per_user = 1;
  const auto ds = synthesize_dataset(c, 2);
  auto st = init_state(ds, ring_w(4));
  Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(8, -0.3, 0.4);
  for (int rep = 0; rep < 3; ++rep) {
    const Eigen::VectorXd g = vr_gradient(st.servers[0].users[0], x, ds, 0, 0, 0);
    const Eigen::VectorXd exact = minibatch_gradient(x, ds, 0, 0, 0);
    EXPECT_LE((g - exact).norm(), 1e-12 * exact.norm());
    x *= 1.5;
  }
}

TEST(VrGradient, CommitsTableButNotLastVrsg) {
  const auto ds = synthesize_dataset(small_config(), 3);
  EngineOptions o;
  o.track_phi = true;
  auto st = init_state(ds, ring_w(4), o);
  auto& u = st.servers[0].users[1];
  const Eigen::VectorXd x = Eigen::VectorXd::Constant(8, 0.1);
  vr_gradient(u, x, ds, 0, 1, 2);
  EXPECT_EQ(Eigen::VectorXd(u.stored_grads.col(2)), minibatch_gradient(x, ds, 0, 1, 2));
  EXPECT_EQ(Eigen::VectorXd(u.phi_points.col(2)), x);
  EXPECT_LE((u.grad_sum - u.stored_grads.rowwise().sum()).norm(), 1e-12);
  EXPECT_TRUE(u.last_vrsg.isZero(0.0));
}

TEST(Ctus, Decisions) {
  Eigen::VectorXd d = Eigen::VectorXd::Zero(3);
  EXPECT_FALSE(ctus_decide(d, 1.0, {0.0}));
  EXPECT_FALSE(ctus_decide(d, 0.0, {50.0}));
  d[0] = 1e-150;
  EXPECT_TRUE(ctus_decide(d, 5.0, {0.0}));
  d[0] = 7.0;  // ||d||^2 = 49
  EXPECT_FALSE(ctus_decide(d, 1.0, {50.0}));
  EXPECT_FALSE(ctus_decide(d, 0.5, {98.0}));  // equality does not trigger
  EXPECT_TRUE(ctus_decide(d, 0.97, {50.0}));
}

TEST(SelectUsers, SubsetWithoutReplacement) {
  for (long k = 1; k <= 200; ++k) {
    const auto sel = select_users(5, 2, k, 20, 9);
    ASSERT_EQ(sel.size(), 9u);
    for (std::size_t a = 0; a < sel.size(); ++a) {
      EXPECT_LT(sel[a], 20u);
      if (a) {
        EXPECT_LT(sel[a - 1], sel[a]);
      }
    }
  }
  EXPECT_EQ(select_users(5, 2, 3, 20, 20).size(), 20u);
}

TEST(CflSaga, FullUploadsAtRhoZero) {
  const auto ds = synthesize_dataset(DatasetConfig{}, 1);
  const auto w = mixing_matrix(build_graph(GraphKind::random, 20, 0.3, 1));
  auto st = init_state(ds, w);
  for (int k = 1; k <= 3; ++k) {
    const auto before = st.comm.vrsg_uploads;
    const auto& s = cfl_saga_round(st, ds, w, 1e-4, {0.0});
    EXPECT_EQ(s.uploads, 400u);
    EXPECT_EQ(st.comm.vrsg_uploads - before, 400u);
    // Mean path: with every user uploading, g_i is the sum of the fresh estimates.
    EXPECT_LE(server_aggregate_residual(st), 1e-12);
  }
  EXPECT_EQ(st.comm.threshold_broadcasts, 1200u);
}

TEST(CflSaga, ServerTrafficCountsDirectedLinks) {
  const auto ds = synthesize_dataset(small_config(), 1);
  const auto w = ring_w(4);
  auto st = init_state(ds, w);
  cfl_saga_round(st, ds, w, 1e-3, {1.0});
  EXPECT_EQ(st.comm.server_broadcasts, 2u * 8u);  // 4 edges, both directions, x and y
}

TEST(CflSaga, ZeroStepKeepsConsensusModel) {
  const auto ds = synthesize_dataset(small_config(), 1);
  const auto w = ring_w(4);
  auto st = init_state(ds, w);
  for (int k = 0; k < 5; ++k) {
    const auto& s = cfl_saga_round(st, ds, w, 0.0, {10.0});
    for (double t : s.threshold_sq) EXPECT_EQ(t, 0.0);
    EXPECT_TRUE(st.x.isZero(0.0));
  }
}

TEST(CflSaga, RejectsBadParameters) {
  const auto ds = synthesize_dataset(small_config(), 1);
  const auto w = ring_w(4);
  auto st = init_state(ds, w);
  EXPECT_THROW(cfl_saga_round(st, ds, w, -1e-3, {1.0}), ConfigError);
  EXPECT_THROW(cfl_saga_round(st, ds, w, 1e-3, {-1.0}), ConfigError);
  EXPECT_THROW(gt_saga_round(st, ds, w, 1e-3, 0), ConfigError);
  EXPECT_THROW(gt_saga_round(st, ds, w, 1e-3, 6), ConfigError);
}

TEST(CflSaga, SingleServerMatchesReference) {
  const auto ds = synthesize_dataset(small_config(1), 4);
  const auto w = MixingMatrix::single_server();
  EngineOptions o;
  o.seed = 9;
  auto st = init_state(ds, w, o);
  oracle::SingleServerSaga ref(ds, 9, 2e-3, 10.0);
  for (int k = 0; k < 300; ++k) {
    cfl_saga_round(st, ds, w, 2e-3, {10.0});
    ref.step();
    ASSERT_EQ(Eigen::VectorXd(st.x.col(0)), ref.x) << "round " << k + 1;
    ASSERT_EQ(Eigen::VectorXd(st.y.col(0)), ref.y) << "round " << k + 1;
    ASSERT_EQ(Eigen::VectorXd(st.g.col(0)), ref.g) << "round " << k + 1;
  }
  EXPECT_EQ(st.comm.vrsg_uploads, ref.uploads);
}

TEST(CflSaga, InvariantsEveryRound) {
  const auto ds = synthesize_dataset(small_config(), 5);
  const auto w = ring_w(4);
  EngineOptions o;
  o.refresh_rounds = 50;
  auto st = init_state(ds, w, o);
  Eigen::VectorXd xbar = st.x_mean(), ybar = st.y_mean();
  for (int k = 0; k < 200; ++k) {
    cfl_saga_round(st, ds, w, 5e-3, {2.0});
    EXPECT_LE(dac_residual(st), 1e-9);
    EXPECT_LE(server_aggregate_residual(st), 1e-9);
    EXPECT_LE(table_sum_residual(st), 1e-9);
    const Eigen::VectorXd next = st.x_mean();
    EXPECT_LE((next - (xbar - 5e-3 * ybar)).norm(), 1e-9 * (1.0 + next.norm()));
    xbar = next;
    ybar = st.y_mean();
  }
}

TEST(CflSaga, NonUploaderKeepsServerKnownGradient) {
  const auto ds = synthesize_dataset(small_config(), 6);
  const auto w = ring_w(4);
  auto st = init_state(ds, w);
  bool saw_skip = false;
  for (int k = 0; k < 100 && !saw_skip; ++k) {
    auto before = st.servers;
    const auto& s = cfl_saga_round(st, ds, w, 5e-3, {1e6});
    if (s.uploads < s.users) {
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
          const auto& now = st.servers[i].users[j];
          const auto& old = before[i].users[j];
          if (now.last_vrsg == old.last_vrsg) {
            saw_skip = true;
            EXPECT_NE(now.stored_grads, old.stored_grads);  // table still advanced
          }
        }
    }
  }
  EXPECT_TRUE(saw_skip);
}

TEST(CflSaga, DeterministicAndOrderFree) {
  const auto ds = synthesize_dataset(small_config(), 7);
  const auto w = ring_w(4);
  EngineOptions o;
  o.seed = 3;
  auto a = init_state(ds, w, o), b = init_state(ds, w, o);
  for (int k = 0; k < 50; ++k) {
    cfl_saga_round(a, ds, w, 5e-3, {1.0});
    cfl_saga_round(b, ds, w, 5e-3, {1.0});
  }
  EXPECT_EQ(a.x, b.x);
  EXPECT_EQ(a.y, b.y);
  EXPECT_EQ(a.comm.vrsg_uploads, b.comm.vrsg_uploads);
  EXPECT_EQ(draw_minibatch(3, 2, 1, 17, 4), draw_minibatch(3, 2, 1, 17, 4));
}

TEST(CflSaga, DivergenceGuard) {
  const auto ds = synthesize_dataset(small_config(), 1);
  const auto w = ring_w(4);
  auto st = init_state(ds, w);
  try {
    for (int k = 0; k < 2000; ++k) cfl_saga_round(st, ds, w, 10.0, {0.0});
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_GT(e.round(), 0);
  }
}

TEST(GtSaga, SamplingRateFifteenPercent) {
  auto c = small_config();
  c.users_per_server = 20;
  const auto ds = synthesize_dataset(c, 1);
  const auto w = ring_w(4);
  auto st = init_state(ds, w);
  const std::size_t count = static_cast<std::size_t>(std::llround(0.15 * 20));
  EXPECT_EQ(count, 3u);
  gt_saga_round(st, ds, w, 1e-3, count);
  EXPECT_EQ(st.comm.vrsg_uploads, 4u * 3u);
}

TEST(GtSaga, FullSelectionSingleMinibatchIsExact) {
  auto c = small_config();
  c.minibatches_per_user = 1;
  const auto ds = synthesize_dataset(c, 2);
  const auto w = ring_w(4);
  auto st = init_state(ds, w);
  for (int k = 0; k < 5; ++k) {
    gt_saga_round(st, ds, w, 1e-2, 5);
    for (std::size_t i = 0; i < 4; ++i) {
      Eigen::VectorXd exact(8);
      server_gradient(st.x.col(static_cast<Eigen::Index>(i)), ds, i, exact);
      EXPECT_LE((st.g.col(static_cast<Eigen::Index>(i)) - exact).norm(), 1e-12 * (1.0 + exact.norm()));
    }
  }
}

TEST(GtSaga, MatchesSelectionFormula) {
  const auto ds = synthesize_dataset(small_config(), 8);
  const auto w = ring_w(4);
  EngineOptions o;
  o.seed = 4;
  auto st = init_state(ds, w, o);
  for (int k = 0; k < 3; ++k) gt_saga_round(st, ds, w, 1e-2, 2);
  const auto before = st;
  gt_saga_round(st, ds, w, 1e-2, 2);
  const Eigen::MatrixXd x_new = before.x * w.w.transpose() - 1e-2 * before.y;
  for (std::size_t i = 0; i < 4; ++i) {
    Eigen::VectorXd innov = Eigen::VectorXd::Zero(8);
    for (auto j : select_users(4, i, 4, 5, 2)) {
      const auto t = draw_minibatch(4, i, j, 4, 4);
      innov += minibatch_gradient(x_new.col(static_cast<Eigen::Index>(i)), ds, i, j, t) -
               before.servers[i].users[j].stored_grads.col(static_cast<Eigen::Index>(t));
    }
    const Eigen::VectorXd expect = (5.0 * 4.0 / 2.0) * innov + before.servers[i].table_sum;
    EXPECT_LE((st.g.col(static_cast<Eigen::Index>(i)) - expect).norm(), 1e-12 * (1.0 + expect.norm()));
  }
  EXPECT_LE(dac_residual(st), 1e-12);
  EXPECT_LE(table_sum_residual(st), 1e-12);
}

TEST(Gt, SingleServerIsDelayedGradientDescent) {
  auto c = small_config(1);
  c.dim = 1;
  const auto ds = synthesize_dataset(c, 3);
  const auto w = MixingMatrix::single_server();
  auto st = init_state(ds, w);
  const double alpha = 1e-2;
  // x^1 = 0 (y^0 = 0); afterwards x^{k+1} = x^k - alpha f'(x^k).
  double gd = 0.0;
  gt_round(st, ds, w, alpha);
  EXPECT_EQ(st.x(0, 0), 0.0);
  for (int k = 0; k < 100; ++k) {
    double grad = 0.0;
    for (Eigen::Index s = 0; s < ds.features.cols(); ++s) {
      const double f = ds.features(0, s);
      grad += c.kappa * gd + (oracle::sigmoid(f * gd) - ds.labels[s]) * f;
    }
    gd -= alpha * grad;
    gt_round(st, ds, w, alpha);
    EXPECT_NEAR(st.x(0, 0), gd, 1e-12 * (1.0 + std::abs(gd)));
  }
}

TEST(Gt, CompleteGraphMixesInOneStep) {
  // W = J: each server starts from the average model and the average tracker.
  const auto ds = synthesize_dataset(small_config(), 4);
  const auto w = mixing_matrix(build_graph(GraphKind::complete, 4, std::nullopt, 1), 4.0);
  auto st = init_state(ds, w);
  for (int k = 0; k < 50; ++k) {
    const Eigen::MatrixXd x = st.x, y = st.y, g = st.g;
    gt_round(st, ds, w, 1e-2);
    for (Eigen::Index i = 0; i < 4; ++i) {
      const Eigen::VectorXd xi = x.rowwise().mean() - 1e-2 * y.col(i);
      const Eigen::VectorXd yi = y.rowwise().mean() + st.g.col(i) - g.col(i);
      EXPECT_LE((st.x.col(i) - xi).norm(), 1e-13 * (1.0 + xi.norm()));
      EXPECT_LE((st.y.col(i) - yi).norm(), 1e-13 * (1.0 + yi.norm()));
    }
  }
  EXPECT_EQ(st.comm.vrsg_uploads, 50u * 20u);
}

TEST(Saga, MonteCarloUnbiased) {
  // E over t of S (grad_t(x) - stored_t) + sum = grad_ij(x), checked by sampling.
  const auto ds = synthesize_dataset(small_config(), 9);
  auto st = init_state(ds, ring_w(4));
  for (int k = 0; k < 20; ++k) cfl_saga_round(st, ds, ring_w(4), 5e-3, {1.0});
  const auto& u = st.servers[2].users[3];
  const Eigen::VectorXd x = st.x.col(2);
  Eigen::VectorXd exact = Eigen::VectorXd::Zero(8);
  for (std::size_t t = 0; t < 4; ++t) exact += minibatch_gradient(x, ds, 2, 3, t);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(8), sq = Eigen::VectorXd::Zero(8);
  constexpr int n = 20000;
  for (int r = 0; r < n; ++r) {
    Stream s(77, Domain::probe, static_cast<std::uint32_t>(r));
    const auto t = s.below(4);
    const Eigen::VectorXd g = vr_estimate(u, minibatch_gradient(x, ds, 2, 3, t), t);
    mean += g;
    sq += g.cwiseProduct(g);
  }
  mean /= n;
  const Eigen::VectorXd var = sq / n - mean.cwiseProduct(mean);
  EXPECT_LE((mean - exact).norm(), 3.0 * std::sqrt(var.sum() / n));
}
