#include <gtest/gtest.h>

#include <iomanip>
#include <random>

#include "fcal/select.hpp"
#include "oracles.hpp"

using namespace fcal;
using namespace fcal::test;

TEST(Smoother, MatrixTimesYEqualsSubstitution) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 60; ++trial) {
    const auto rs = random_system(rng);
    for (double lambda : {1e-6, 1e-4, 1e-2, 1.0}) {
      const Eigen::VectorXd ay = smoother_matrix(rs.sys, lambda) * rs.sys.Y;
      const Eigen::VectorXd sub = substitution_fit(rs.sys, lambda);
      EXPECT_LT((ay - sub).cwiseAbs().maxCoeff(), 1e-8) << "trial " << trial << " lambda " << lambda;
      const PenalizedSolution sol = solve_penalized(rs.sys, lambda);
      EXPECT_LT((ay - sol.fitted).cwiseAbs().maxCoeff(), 1e-8) << "trial " << trial << " lambda " << lambda;
    }
  }
}

TEST(Smoother, LargeLambdaLimitIsProjection) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 60; ++trial) {
    const auto rs = random_system(rng);
    const Eigen::MatrixXd& vw = rs.sys.Vw;
    const Eigen::VectorXd proj = vw * vw.completeOrthogonalDecomposition().solve(rs.sys.Y);
    const Eigen::VectorXd ay = smoother_matrix(rs.sys, 1e10) * rs.sys.Y;
    EXPECT_LT((ay - proj).cwiseAbs().maxCoeff(), 1e-6) << "trial " << trial;
  }
}

TEST(Smoother, TraceNonIncreasingInLambda) {
  std::mt19937_64 rng(10);
  const auto grid = default_lambda_grid(60, 1e4, 1e-10);
  for (int trial = 0; trial < 60; ++trial) {
    const auto rs = random_system(rng);
    double prev = -std::numeric_limits<double>::infinity();
    // grid is descending in lambda so tr(A) must not decrease along it
    for (double lambda : grid) {
      const double tr = smoother_matrix(rs.sys, lambda).trace();
      EXPECT_GE(tr, prev - 1e-9) << std::setprecision(17) << "trial " << trial << " lambda " << lambda << " tr " << tr
                                  << " prev " << prev;
      prev = tr;
    }
  }
}

TEST(Smoother, StatsMatchExplicitMatrix) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const auto rs = random_system(rng);
    const double lambda = 1e-2;
    const Eigen::MatrixXd a = smoother_matrix(rs.sys, lambda);
    const Eigen::Index m = a.rows();
    const Eigen::MatrixXd ia = Eigen::MatrixXd::Identity(m, m) - a;
    const double rss = rs.sys.Y.dot(ia * ia * rs.sys.Y);
    const double md = static_cast<double>(m);
    const SmootherStats lit = smoother_stats(rs.sys, lambda, GcvTrace::literal);
    EXPECT_NEAR(lit.rss, rss, 1e-10 * (1.0 + rss));
    EXPECT_NEAR(lit.edf, a.trace(), 1e-9);
    const double t_lit = ia.trace();
    EXPECT_NEAR(lit.gcv, (rss / md) / std::pow(t_lit / md, 2), 1e-9 * lit.gcv);
    EXPECT_NEAR(lit.sigma2, rss / t_lit, 1e-9 * lit.sigma2);
    const SmootherStats pc = smoother_stats(rs.sys, lambda, GcvTrace::per_copy);
    const double t_pc = static_cast<double>(rs.q) * (static_cast<double>(rs.n) - a.trace());
    EXPECT_NEAR(pc.trace_res, t_pc, 1e-9);
    EXPECT_NEAR(pc.gcv, (rss / md) / std::pow(t_pc / md, 2), 1e-9 * pc.gcv);
    if (rs.q == 1) {
      EXPECT_NEAR(pc.gcv, lit.gcv, 1e-12 * lit.gcv);
    }
  }
}

TEST(Smoother, IdempotentOnNullSpace) {
  std::mt19937_64 rng(12);
  const auto rs = random_system(rng);
  const Eigen::MatrixXd a = smoother_matrix(rs.sys, 0.1);
  const Eigen::MatrixXd vw = rs.sys.Vw;
  EXPECT_LT((a * vw - vw).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Smoother, RejectsNonPositiveLambda) {
  std::mt19937_64 rng(13);
  const auto rs = random_system(rng);
  EXPECT_THROW(smoother_matrix(rs.sys, 0.0), ParameterError);
  EXPECT_THROW(gcv(rs.sys, -1.0), ParameterError);
}

TEST(Smoother, ZeroGradientRowsReported) {
  Eigen::MatrixXd x(4, 1);
  x << 0.1, 0.4, 0.6, 0.9;
  const Kernel k = Kernel::sobolev_cubic();
  Eigen::MatrixXd w(4, 1);
  w << 1.0, 0.0, 2.0, 1.0;
  const auto s = make_linearized_system(w, Eigen::VectorXd::Ones(4), null_design(k.null_basis(), x), gram(k, x), 4);
  ASSERT_EQ(s.zero_gradient_rows.size(), 1u);
  EXPECT_EQ(s.zero_gradient_rows[0], 1);
}

TEST(Gcv, DefaultGrid) {
  const auto g = default_lambda_grid();
  ASSERT_EQ(g.size(), 40u);
  EXPECT_DOUBLE_EQ(g.front(), 1e2);
  EXPECT_NEAR(g.back(), 1e-8, 1e-20);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_LT(g[i], g[i - 1]);
}

TEST(Gcv, IdentityModelPicksInteriorLambda) {
  const ComputerModel m = identity_model();
  const auto grid = default_lambda_grid();
  int interior = 0;
  for (int rep = 0; rep < 100; ++rep) {
    Rng rng = make_rng(2024, static_cast<std::uint64_t>(rep));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> z(0.0, 0.2);
    const Eigen::Index n = 30;
    PhysicalDataset d{Eigen::MatrixXd(n, 1), Eigen::MatrixXd(n, 1), Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1)};
    for (Eigen::Index i = 0; i < n; ++i) {
      d.x(i, 0) = u(rng);
      d.y(i, 0) = std::sin(2.0 * std::numbers::pi * d.x(i, 0)) + z(rng);
    }
    const LambdaSelection sel = select_lambda(d, m, default_kernel(d), grid);
    if (sel.lambda < grid.front() && sel.lambda > grid.back()) ++interior;
    EXPECT_EQ(sel.curve.size(), grid.size());
  }
  EXPECT_GE(interior, 90);
}

TEST(Gcv, CurveMinimumIsSelected) {
  auto [m, s] = builtin(2);
  const PhysicalDataset d = sample_physical(s, 40, 77);
  const LambdaSelection sel = select_lambda(d, m, default_kernel(d));
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : sel.curve) {
    if (p.ok && !p.boundary) best = std::min(best, p.gcv);
  }
  EXPECT_DOUBLE_EQ(sel.stats.gcv, best);
  EXPECT_DOUBLE_EQ(sel.estimate.lambda, sel.lambda);
}

TEST(Gcv, EmptyGridRejected) {
  auto [m, s] = builtin(2);
  const PhysicalDataset d = sample_physical(s, 10, 1);
  EXPECT_THROW(select_lambda(d, m, default_kernel(d), {}), UsageError);
  EXPECT_THROW(select_lambda(d, m, default_kernel(d), {1.0, -1.0}), UsageError);
}
