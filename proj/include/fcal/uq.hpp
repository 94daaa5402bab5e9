#pragma once

// Pointwise Bayesian confidence bands for theta_j(x) and for the prediction.
//
// Sigma22 = D + rho U U' with D = sum_j W_j Phi W_j + n lambda I and
// U = [V_1w ... V_qw]. The conditional variance
//   s11 - s21' Sigma22^{-1} s21,  s21 = a + rho U c,  s11 = p + rho c'c
// is evaluated through the Woodbury identity as
//   p - a' D^{-1} a + h' G^{-1} h,  h = c - U' D^{-1} a,  G = U' D^{-1} U + I / rho,
// which stays accurate for large rho.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "fcal/band.hpp"
#include "fcal/calibrate.hpp"
#include "fcal/errors.hpp"
#include "fcal/select.hpp"

namespace fcal {

/// 1e8 times the mean diagonal of the design gram matrix.
inline double default_rho(const LinearizedSystem& sys) { return 1e8 * sys.Phi.diagonal().mean(); }

struct Variance {
  double value = 0.0;
  /// Pre-clamp value (may be slightly negative).
  double raw = 0.0;
  /// The model gradient vanished (prediction only); value is 0.
  bool degenerate = false;
};

/// Factorizations shared by every evaluation point.
class PosteriorFactor {
 public:
  PosteriorFactor(const LinearizedSystem& sys, double lambda, double sigma2, double rho)
      : sys_(sys), lambda_(lambda), sigma2_(sigma2), rho_(rho) {
    if (!(lambda > 0.0)) throw ParameterError("lambda must be positive");
    if (!(rho > 0.0)) throw ParameterError("rho must be positive");
    if (!(sigma2 >= 0.0)) throw ParameterError("sigma^2 must be nonnegative");
    const Eigen::Index N = sys.observations(), q = sys.q, k = sys.k;
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(N, N);
    u_.resize(N, q * k);
    for (Eigen::Index j = 0; j < q; ++j) {
      d += sys.Phijw(j);
      u_.middleCols(j * k, k) = sys.Vjw(j);
    }
    d.diagonal().array() += sys.nlambda(lambda);
    d_.compute(d);
    if (d_.info() != Eigen::Success) throw NumericError("Sigma22 factorization failed (D not positive definite)");
    dinv_u_ = d_.solve(u_);
    Eigen::MatrixXd g = u_.transpose() * dinv_u_;
    g = 0.5 * (g + g.transpose());
    g.diagonal().array() += 1.0 / rho;
    g_.compute(g);
    if (g_.info() != Eigen::Success) throw NumericError("Sigma22 is numerically singular (null-space block)");
    scale_ = sigma2 / sys.nlambda(lambda);
  }

  [[nodiscard]] const LinearizedSystem& system() const { return sys_; }
  [[nodiscard]] double rho() const { return rho_; }
  [[nodiscard]] double sigma2() const { return sigma2_; }
  [[nodiscard]] double lambda() const { return lambda_; }

  /// (sigma^2 / n lambda)(p + rho c'c - (a + rho U c)' Sigma22^{-1} (a + rho U c)), clamped at 0.
  [[nodiscard]] Variance conditional(double prior, const Eigen::VectorXd& a, const Eigen::VectorXd& c) const {
    const Eigen::VectorXd dinv_a = d_.solve(a);
    const Eigen::VectorXd h = c - u_.transpose() * dinv_a;
    const double core = prior - a.dot(dinv_a) + h.dot(g_.solve(h));
    Variance v;
    v.raw = scale_ * core;
    const double tol = 1e-8 * (std::abs(prior) + rho_ * c.squaredNorm());
    if (core < 0.0) {
      if (core < -tol) {
        throw NumericError("conditional variance " + std::to_string(core) + " is negative beyond tolerance");
      }
      v.value = 0.0;
    } else {
      v.value = v.raw;
    }
    return v;
  }

 private:
  const LinearizedSystem& sys_;
  double lambda_, sigma2_, rho_, scale_ = 0.0;
  Eigen::MatrixXd u_, dinv_u_;
  Eigen::LLT<Eigen::MatrixXd> d_;
  Eigen::LDLT<Eigen::MatrixXd> g_;
};

namespace detail {

/// phi expanded to the observation rows (one entry per (point, response) pair).
inline Eigen::VectorXd observation_phi(const CalibrationEstimate& est, const LinearizedSystem& sys,
                                       const Eigen::VectorXd& x) {
  const Eigen::VectorXd phi = kernel_row(est.kernel, x, est.anchors);
  Eigen::VectorXd out(sys.observations());
  for (Eigen::Index i = 0; i < sys.n; ++i) out.segment(i * sys.r, sys.r).setConstant(phi(i));
  return out;
}

}  // namespace detail

inline Variance theta_variance(const PosteriorFactor& f, const CalibrationEstimate& est,
                               const Eigen::VectorXd& x, Eigen::Index j) {
  const auto& sys = f.system();
  const Eigen::VectorXd v = est.basis.eval(x);
  const Eigen::VectorXd a = sys.w.col(j).cwiseProduct(detail::observation_phi(est, sys, x));
  Eigen::VectorXd c = Eigen::VectorXd::Zero(sys.q * sys.k);
  c.segment(j * sys.k, sys.k) = v;
  return f.conditional(est.kernel(x, x), a, c);
}

inline Variance theta_variance(const LinearizedSystem& sys, const CalibrationEstimate& est, const Eigen::VectorXd& x,
                               double sigma2, double rho, Eigen::Index j) {
  return theta_variance(PosteriorFactor(sys, est.lambda, sigma2, rho), est, x, j);
}

/// Delta-method variance of y^s(x, theta(x)) for response 0 with gradient taken at theta_hat(x).
inline Variance prediction_variance(const PosteriorFactor& f, const CalibrationEstimate& est,
                                    const ComputerModel& model, const Eigen::VectorXd& x, Eigen::Index response = 0) {
  const auto& sys = f.system();
  const Eigen::VectorXd th = model.box().clamp(theta_at(est, x));
  const Eigen::VectorXd wx = model.grad_unchecked(x, th).row(response).transpose();
  if (wx.cwiseAbs().maxCoeff() == 0.0) {
    Variance v;
    v.degenerate = true;
    return v;
  }
  const Eigen::VectorXd phi = detail::observation_phi(est, sys, x);
  const Eigen::VectorXd v = est.basis.eval(x);
  Eigen::VectorXd a = Eigen::VectorXd::Zero(sys.observations());
  Eigen::VectorXd c(sys.q * sys.k);
  for (Eigen::Index j = 0; j < sys.q; ++j) {
    a += wx(j) * sys.w.col(j).cwiseProduct(phi);
    c.segment(j * sys.k, sys.k) = wx(j) * v;
  }
  return f.conditional(wx.squaredNorm() * est.kernel(x, x), a, c);
}

inline Variance prediction_variance(const LinearizedSystem& sys, const CalibrationEstimate& est,
                                    const ComputerModel& model, const Eigen::VectorXd& x, double sigma2, double rho) {
  return prediction_variance(PosteriorFactor(sys, est.lambda, sigma2, rho), est, model, x);
}

/// One band per theta component; flagged non-interpretable when `identifiable` is false.
inline std::vector<ConfidenceBand> theta_ci(const PosteriorFactor& f, const CalibrationEstimate& est,
                                            const Eigen::MatrixXd& grid, double level, bool identifiable = true) {
  std::vector<ConfidenceBand> out;
  for (Eigen::Index j = 0; j < est.param_dim(); ++j) {
    Eigen::VectorXd center(grid.rows()), sd(grid.rows());
    for (Eigen::Index g = 0; g < grid.rows(); ++g) {
      const Eigen::VectorXd x = grid.row(g).transpose();
      center(g) = theta_at(est, x)(j);
      sd(g) = std::sqrt(theta_variance(f, est, x, j).value);
    }
    auto b = ConfidenceBand::from_sd(grid, center, sd, level, "theta" + std::to_string(j + 1));
    b.sigma2 = f.sigma2();
    b.rho = f.rho();
    b.interpretable = identifiable;
    out.push_back(std::move(b));
  }
  return out;
}

inline ConfidenceBand prediction_ci(const PosteriorFactor& f, const CalibrationEstimate& est,
                                    const ComputerModel& model, const Eigen::MatrixXd& grid, double level) {
  Eigen::VectorXd center(grid.rows()), sd(grid.rows());
  int degenerate = 0;
  for (Eigen::Index g = 0; g < grid.rows(); ++g) {
    const Eigen::VectorXd x = grid.row(g).transpose();
    center(g) = predict_at(est, model, x).value(0);
    const Variance v = prediction_variance(f, est, model, x);
    degenerate += v.degenerate ? 1 : 0;
    sd(g) = std::sqrt(v.value);
  }
  auto b = ConfidenceBand::from_sd(grid, center, sd, level, "prediction");
  b.sigma2 = f.sigma2();
  b.rho = f.rho();
  b.degenerate_points = degenerate;
  return b;
}

/// Evenly spaced midpoints of m cells on [lower, upper] (the Riemann-sum grid).
inline Eigen::MatrixXd midpoint_grid(double lower, double upper, Eigen::Index m = 200) {
  Eigen::MatrixXd g(m, 1);
  const double h = (upper - lower) / static_cast<double>(m);
  for (Eigen::Index i = 0; i < m; ++i) g(i, 0) = lower + (static_cast<double>(i) + 0.5) * h;
  return g;
}

}  // namespace fcal
