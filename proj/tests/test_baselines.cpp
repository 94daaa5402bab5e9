#include <gtest/gtest.h>

#include <random>

#include "fcal/baselines.hpp"
#include "fcal/uq.hpp"

using namespace fcal;

TEST(Const, NoiseFreeSetting4RecoversOneThree) {
  auto [m, s] = builtin(4);
  const PhysicalDataset d = sample_physical(s, 30, 4, 0.0);
  const ConstFit cf = fit_const(d, m);
  EXPECT_TRUE(cf.converged);
  EXPECT_LT(cf.objective, 1e-6);
  EXPECT_NEAR(cf.theta(0), 1.0, 1e-3);
  EXPECT_NEAR(cf.theta(1), 3.0, 1e-3);
  EXPECT_FALSE(cf.starts.empty());
}

TEST(Const, NoWorseThanAnyLatticeStart) {
  auto [m, s] = builtin(1);
  const PhysicalDataset d = sample_physical(s, 40, 2);
  const ConstFit cf = fit_const(d, m);
  for (const auto& t : detail::const_lattice(m.box())) EXPECT_LE(cf.objective, detail::mean_square(d, m, t) + 1e-12);
  EXPECT_TRUE(m.box().contains(cf.theta));
}

TEST(Parametric, ExpFamilyRecoversSetting1) {
  auto [m, s] = builtin(1);
  const PhysicalDataset d = sample_physical(s, 40, 5, 0.0);
  const ParametricFit pf = fit_parametric(d, m, ParametricFamily::exp);
  EXPECT_TRUE(pf.converged);
  EXPECT_NEAR(pf.gamma(0, 0), 0.5, 1e-4);
  EXPECT_NEAR(pf.gamma(0, 1), 0.2, 1e-4);
  for (double x : {4.0, 6.0, 8.0}) EXPECT_NEAR(pf.theta(x)(0), (*s.theta_star)(x)(0), 1e-4);
}

TEST(Parametric, QuadFamilyRecoversSetting2) {
  auto [m, s] = builtin(2);
  const PhysicalDataset d = sample_physical(s, 40, 6, 0.0);
  const ParametricFit pf = fit_parametric(d, m, ParametricFamily::quad);
  EXPECT_TRUE(pf.converged);
  EXPECT_LT(pf.objective, 1e-10);
  // 0.5 (x - 2)^2 + 0.5 = 2.5 - 2 x + 0.5 x^2
  EXPECT_NEAR(pf.gamma(0, 0), 2.5, 1e-4);
  EXPECT_NEAR(pf.gamma(0, 1), -2.0, 1e-4);
  EXPECT_NEAR(pf.gamma(0, 2), 0.5, 1e-4);
}

TEST(Parametric, UnitConversionAgreesWithScaledForm) {
  auto [m, s] = builtin(2);
  const ParametricFit pf = fit_parametric(sample_physical(s, 30, 7), m, ParametricFamily::quad);
  for (double x : {1.6, 2.0, 2.9}) {
    const double direct = pf.gamma(0, 0) + pf.gamma(0, 1) * x + pf.gamma(0, 2) * x * x;
    EXPECT_NEAR(direct, pf.theta(x)(0), 1e-10);
  }
  const ParametricFit pe = fit_parametric(sample_physical(s, 30, 7), m, ParametricFamily::exp);
  for (double x : {1.6, 2.0, 2.9}) EXPECT_NEAR(pe.gamma(0, 0) * std::exp(pe.gamma(0, 1) * x), pe.theta(x)(0), 1e-10);
}

TEST(Wald, LinearRegressionCovariance) {
  // y = a + b t with known design: cov = s^2 (X'X)^-1
  Eigen::MatrixXd jac(5, 2);
  jac << 1, 0, 1, 1, 1, 2, 1, 3, 1, 4;
  Eigen::VectorXd res(5);
  res << 0.1, -0.2, 0.05, 0.3, -0.25;
  const auto w = detail::wald(res, jac);
  const double s2 = res.squaredNorm() / 3.0;
  const Eigen::MatrixXd want = s2 * (jac.transpose() * jac).inverse();
  EXPECT_EQ(w.rank, 2);
  EXPECT_NEAR(w.s2, s2, 1e-15);
  EXPECT_LT((w.cov - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Wald, ConstBandsUseDeltaMethod) {
  auto [m, s] = builtin(1);
  const PhysicalDataset d = sample_physical(s, 40, 9);
  const ConstFit cf = fit_const(d, m);
  const Eigen::MatrixXd grid = midpoint_grid(s.lower, s.upper, 25);
  const auto bands = const_bands(cf, d, m, grid, 0.9);
  ASSERT_EQ(bands.size(), 2u);
  EXPECT_EQ(bands[0].target, "theta1");
  EXPECT_EQ(bands[1].target, "prediction");
  const double ht = bands[0].upper(0) - bands[0].center(0);
  for (Eigen::Index g = 0; g < grid.rows(); ++g) {
    EXPECT_DOUBLE_EQ(bands[0].center(g), cf.theta(0));
    EXPECT_NEAR(bands[0].upper(g) - bands[0].center(g), ht, 1e-14);
    const Eigen::VectorXd x = grid.row(g).transpose();
    const double dy = model_grad(m, x, cf.theta)(0, 0);
    EXPECT_NEAR(bands[1].upper(g) - bands[1].center(g), std::abs(dy) * ht, 1e-10 * (1.0 + ht));
  }
}

TEST(Wald, ParametricBandsShrinkWithData) {
  auto [m, s] = builtin(2);
  const Eigen::MatrixXd grid = midpoint_grid(s.lower, s.upper, 20);
  auto width = [&](Eigen::Index n) {
    const PhysicalDataset d = sample_physical(s, n, 11);
    const auto b = parametric_bands(fit_parametric(d, m, ParametricFamily::quad), d, m, grid, 0.9);
    return (b[0].upper - b[0].lower).mean();
  };
  EXPECT_LT(width(400), width(25));
}

TEST(Wald, NonIdentifiedConstThetaBandsRejected) {
  // a model that depends on t1 + t2 only
  ComputerModel m("sum", 1, 2, 1, ParameterBox::unbounded(2),
                  [](const Eigen::VectorXd& x, const Eigen::VectorXd& t) {
                    return Eigen::VectorXd::Constant(1, (t(0) + t(1)) * x(0));
                  });
  PhysicalDataset d{Eigen::MatrixXd(6, 1), Eigen::MatrixXd(6, 1), Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1)};
  for (int i = 0; i < 6; ++i) {
    d.x(i, 0) = (i + 0.5) / 6.0;
    d.y(i, 0) = 2.0 * d.x(i, 0) + 0.01 * (i % 2 ? 1 : -1);
  }
  ConstFit cf;
  cf.theta = Eigen::Vector2d(1.0, 1.0);
  EXPECT_THROW(const_bands(cf, d, m, midpoint_grid(0.0, 1.0, 5), 0.9), NumericError);
  EXPECT_NO_THROW(const_bands(cf, d, m, midpoint_grid(0.0, 1.0, 5), 0.9, false, true));
}
