#pragma once

// Penalized least-squares functional calibration over the representer expansion
//   theta_j(x) = sum_s alpha_js v_s(x) + sum_i beta_ji Phi(x, x_i).

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fcal/baselines.hpp"
#include "fcal/data.hpp"
#include "fcal/errors.hpp"
#include "fcal/kernel.hpp"
#include "fcal/model.hpp"
#include "fcal/optimize.hpp"
#include "fcal/rng.hpp"

namespace fcal {

struct Coefficients {
  Eigen::MatrixXd alpha;  // q x k
  Eigen::MatrixXd beta;   // q x n

  static Coefficients zero(Eigen::Index q, Eigen::Index k, Eigen::Index n) {
    return {Eigen::MatrixXd::Zero(q, k), Eigen::MatrixXd::Zero(q, n)};
  }

  /// [alpha_1, ..., alpha_q, beta_1, ..., beta_q]
  [[nodiscard]] Eigen::VectorXd flat() const {
    const Eigen::Index q = alpha.rows(), k = alpha.cols(), n = beta.cols();
    Eigen::VectorXd out(q * (k + n));
    for (Eigen::Index j = 0; j < q; ++j) {
      out.segment(j * k, k) = alpha.row(j).transpose();
      out.segment(q * k + j * n, n) = beta.row(j).transpose();
    }
    return out;
  }

  static Coefficients from_flat(const Eigen::VectorXd& v, Eigen::Index q, Eigen::Index k, Eigen::Index n) {
    Coefficients c = zero(q, k, n);
    for (Eigen::Index j = 0; j < q; ++j) {
      c.alpha.row(j) = v.segment(j * k, k).transpose();
      c.beta.row(j) = v.segment(q * k + j * n, n).transpose();
    }
    return c;
  }
};

struct ConvergenceReport {
  double objective = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  bool converged = false;
  bool feasible = true;
  /// Accepted-iterate objective values never increased.
  bool monotone = true;
  int starts = 1;
  std::vector<double> history;
  std::string message;
};

struct CalibrationEstimate {
  Kernel kernel;
  NullBasis basis;
  Eigen::MatrixXd anchors;  // n x d design points
  Coefficients coef;
  double lambda = 0.0;
  ConvergenceReport report;

  [[nodiscard]] Eigen::Index param_dim() const { return coef.alpha.rows(); }
};

/// theta_hat(x) from the expansion.
inline Eigen::VectorXd theta_at(const CalibrationEstimate& est, const Eigen::Ref<const Eigen::VectorXd>& x) {
  const Eigen::VectorXd v = est.basis.eval(x);
  const Eigen::VectorXd phi = kernel_row(est.kernel, x, est.anchors);
  return est.coef.alpha * v + est.coef.beta * phi;
}

inline Eigen::VectorXd theta_at(const CalibrationEstimate& est, double x) {
  return theta_at(est, Eigen::VectorXd::Constant(1, x));
}

struct Prediction {
  Eigen::VectorXd value;
  Eigen::VectorXd theta;
  /// theta_hat(x) fell outside Theta and was clamped.
  bool clamped = false;
};

inline Prediction predict_at(const CalibrationEstimate& est, const ComputerModel& model,
                             const Eigen::Ref<const Eigen::VectorXd>& x) {
  Prediction p;
  p.theta = theta_at(est, x);
  if (!model.box().contains(p.theta)) {
    p.theta = model.box().clamp(p.theta);
    p.clamped = true;
  }
  p.value = model.eval(x, p.theta);
  return p;
}

struct ObjectiveValue {
  double value = std::numeric_limits<double>::infinity();
  double fit = std::numeric_limits<double>::infinity();
  double penalty = 0.0;
  bool feasible = false;
};

/// sum_i |y_i - y^s(x_i, theta(x_i))|^2 + n lambda sum_j beta_j' Phi beta_j with
/// theta expanded over the design points of `data`.
inline ObjectiveValue objective(const Coefficients& c, const PhysicalDataset& data, const ComputerModel& model,
                                const Kernel& kernel, double lambda) {
  if (lambda < 0.0) throw ParameterError("lambda must be nonnegative");
  const Eigen::MatrixXd phi = gram(kernel, data.x);
  const Eigen::MatrixXd v = null_design(kernel.null_basis(), data.x);
  const Eigen::Index n = data.size();
  ObjectiveValue out;
  out.penalty = 0.0;
  for (Eigen::Index j = 0; j < c.beta.rows(); ++j) out.penalty += c.beta.row(j).dot(phi * c.beta.row(j).transpose());
  const Eigen::MatrixXd theta = v * c.alpha.transpose() + phi * c.beta.transpose();  // n x q
  double fit = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd th = theta.row(i).transpose();
    if (!model.box().contains(th)) return out;
    fit += (data.y.row(i).transpose() - model.eval(data.x.row(i).transpose(), th)).squaredNorm();
  }
  out.fit = fit;
  out.value = fit + static_cast<double>(n) * lambda * out.penalty;
  out.feasible = std::isfinite(out.value);
  return out;
}

/// Gradient of `objective` with respect to Coefficients::flat().
inline Eigen::VectorXd objective_grad(const Coefficients& c, const PhysicalDataset& data, const ComputerModel& model,
                                      const Kernel& kernel, double lambda) {
  const Eigen::MatrixXd phi = gram(kernel, data.x);
  const Eigen::MatrixXd v = null_design(kernel.null_basis(), data.x);
  const Eigen::Index n = data.size(), q = c.alpha.rows(), k = c.alpha.cols();
  const Eigen::MatrixXd theta = v * c.alpha.transpose() + phi * c.beta.transpose();
  Eigen::MatrixXd gu(n, q);  // d fit / d theta_j(x_i)
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd th = theta.row(i).transpose();
    if (!model.box().contains(th)) throw DomainError("theta(x_i) outside the parameter box");
    const Eigen::VectorXd xi = data.x.row(i).transpose();
    const Eigen::VectorXd res = data.y.row(i).transpose() - model.eval(xi, th);
    gu.row(i) = -2.0 * res.transpose() * model.grad_unchecked(xi, th);
  }
  Eigen::VectorXd g(q * (k + n));
  for (Eigen::Index j = 0; j < q; ++j) {
    g.segment(j * k, k) = v.transpose() * gu.col(j);
    g.segment(q * k + j * n, n) =
        phi * gu.col(j) + 2.0 * static_cast<double>(n) * lambda * (phi * c.beta.row(j).transpose());
  }
  return g;
}

struct FitOptions {
  LbfgsOptions lbfgs;
  /// Number of starts; 0 selects 5 for q >= 2 and 1 otherwise.
  int multistart = 0;
  /// Half-width of the uniform start perturbation as a fraction of Theta's width.
  double perturbation = 0.1;
  std::uint64_t seed = 0;
  /// Warm start; skips the constant fit and the multistart.
  std::optional<Coefficients> init;
  /// Constant fit to initialize from (computed when absent).
  std::optional<Eigen::VectorXd> init_const;
};

namespace detail {

/// The penalized objective in the reduced coordinates (alpha_j, gamma_j) with beta_j = F2 gamma_j,
/// F2 an orthonormal basis of the orthogonal complement of col(V).
class CalibrationProblem {
 public:
  CalibrationProblem(const PhysicalDataset& data, const ComputerModel& model, const Kernel& kernel, double lambda)
      : data_(data), model_(model), lambda_(lambda) {
    n_ = data.size();
    q_ = model.param_dim();
    r_ = data.response_dim();
    phi_ = gram(kernel, data.x);
    v_ = null_design(kernel.null_basis(), data.x);
    k_ = v_.cols();
    if (n_ <= k_) throw DataError("need more design points than null-space functions");
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(v_);
    const Eigen::MatrixXd qfull = qr.householderQ() * Eigen::MatrixXd::Identity(n_, n_);
    f1_ = qfull.leftCols(k_);
    f2_ = qfull.rightCols(n_ - k_);
    r_mat_ = qr.matrixQR().topLeftCorner(k_, k_).triangularView<Eigen::Upper>();
    if ((r_mat_.diagonal().array().abs() < 1e-12 * std::max(1.0, r_mat_.diagonal().cwiseAbs().maxCoeff())).any()) {
      throw DataError("null-space design matrix V is rank deficient (too few distinct points)");
    }
    k2_ = phi_ * f2_;
    s_ = f2_.transpose() * k2_;
    s_ = 0.5 * (s_ + s_.transpose());
    s_ldlt_.compute(s_);
    p_ = f2_ * s_ldlt_.solve(f2_.transpose());
    p_ = 0.5 * (p_ + p_.transpose());
  }

  [[nodiscard]] Eigen::Index size() const { return q_ * n_; }

  [[nodiscard]] Eigen::MatrixXd fitted(const Eigen::VectorXd& c) const {
    Eigen::MatrixXd u(n_, q_);
    for (Eigen::Index j = 0; j < q_; ++j) u.col(j) = v_ * c.segment(j * k_, k_) + k2_ * gamma(c, j);
    return u;
  }

  bool feasible(const Eigen::VectorXd& c) {
    if (!c.allFinite()) return false;
    const Eigen::MatrixXd u = fitted(c);
    for (Eigen::Index i = 0; i < n_; ++i) {
      if (!model_.box().contains(u.row(i).transpose())) return false;
    }
    return true;
  }

  double evaluate(const Eigen::VectorXd& c, Eigen::VectorXd& g) {
    const Eigen::MatrixXd u = fitted(c);
    Eigen::MatrixXd gu(n_, q_);
    double f = 0.0;
    jac_.resize(static_cast<std::size_t>(n_));
    for (Eigen::Index i = 0; i < n_; ++i) {
      const Eigen::VectorXd th = u.row(i).transpose();
      if (!model_.box().contains(th)) return std::numeric_limits<double>::infinity();
      const Eigen::VectorXd xi = data_.x.row(i).transpose();
      const Eigen::VectorXd res = data_.y.row(i).transpose() - model_.eval(xi, th);
      auto& jac = jac_[static_cast<std::size_t>(i)];
      jac = model_.grad_unchecked(xi, th);
      f += res.squaredNorm();
      gu.row(i) = -2.0 * res.transpose() * jac;
    }
    const double nl = static_cast<double>(n_) * lambda_;
    g.resize(c.size());
    for (Eigen::Index j = 0; j < q_; ++j) {
      const Eigen::VectorXd gj = gamma(c, j);
      const Eigen::VectorXd sg = s_ * gj;
      f += nl * gj.dot(sg);
      g.segment(j * k_, k_) = v_.transpose() * gu.col(j);
      g.segment(q_ * k_ + j * (n_ - k_), n_ - k_) = k2_.transpose() * gu.col(j) + 2.0 * nl * sg;
    }
    jac_at_ = c;
    return f;
  }

  /// Max-norm of the gradient with respect to the fitted values theta_j(x_i), B^{-T} g.
  double stationarity(const Eigen::VectorXd&, const Eigen::VectorXd& g) const {
    return to_value_gradient(g).lpNorm<Eigen::Infinity>();
  }

  /// Gauss-Newton inverse Hessian B^{-1} M_u^{-1} B^{-T}, where B maps the
  /// coefficients onto the fitted values u and M_u is the Gauss-Newton Hessian in u.
  InverseHessian inverse_hessian(const Eigen::VectorXd& c) {
    if (jac_.size() != static_cast<std::size_t>(n_) || jac_at_.size() != c.size() || jac_at_ != c) {
      Eigen::VectorXd g;
      evaluate(c, g);
    }
    const Eigen::Index m = q_ * n_;
    Eigen::MatrixXd mu = Eigen::MatrixXd::Zero(m, m);
    for (Eigen::Index i = 0; i < n_; ++i) {
      const Eigen::MatrixXd& jac = jac_[static_cast<std::size_t>(i)];
      const Eigen::MatrixXd jj = 2.0 * jac.transpose() * jac;
      for (Eigen::Index a = 0; a < q_; ++a) {
        for (Eigen::Index b = 0; b < q_; ++b) mu(a * n_ + i, b * n_ + i) = jj(a, b);
      }
    }
    const double data_scale = mu.diagonal().mean();
    const double nl2 = 2.0 * static_cast<double>(n_) * lambda_;
    for (Eigen::Index j = 0; j < q_; ++j) mu.block(j * n_, j * n_, n_, n_) += nl2 * p_;
    const double ridge = 1e-8 * std::max(data_scale, 1e-12 * mu.diagonal().mean()) + 1e-300;
    mu.diagonal().array() += ridge;
    auto ldlt = std::make_shared<Eigen::LDLT<Eigen::MatrixXd>>(mu);
    return [this, ldlt](const Eigen::VectorXd& g) { return apply_preconditioner(*ldlt, g); };
  }

  [[nodiscard]] Eigen::VectorXd from_coefficients(const Coefficients& coef) const {
    Eigen::VectorXd c(q_ * n_);
    for (Eigen::Index j = 0; j < q_; ++j) {
      c.segment(j * k_, k_) = coef.alpha.row(j).transpose();
      c.segment(q_ * k_ + j * (n_ - k_), n_ - k_) = f2_.transpose() * coef.beta.row(j).transpose();
    }
    return c;
  }

  [[nodiscard]] Coefficients to_coefficients(const Eigen::VectorXd& c) const {
    Coefficients coef = Coefficients::zero(q_, k_, n_);
    for (Eigen::Index j = 0; j < q_; ++j) {
      coef.alpha.row(j) = c.segment(j * k_, k_).transpose();
      coef.beta.row(j) = (f2_ * gamma(c, j)).transpose();
    }
    return coef;
  }

  [[nodiscard]] Eigen::VectorXd constant_start(const Eigen::VectorXd& theta) const {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(q_ * n_);
    for (Eigen::Index j = 0; j < q_; ++j) c(j * k_) = theta(j);
    return c;
  }

  [[nodiscard]] Eigen::Index k() const { return k_; }

 private:
  [[nodiscard]] Eigen::VectorXd gamma(const Eigen::VectorXd& c, Eigen::Index j) const {
    return c.segment(q_ * k_ + j * (n_ - k_), n_ - k_);
  }

  /// B^{-T} g per component: v = F1 a + F2 b with a = R^{-T} g_alpha, b = S^{-1}(g_gamma - K2' F1 a)
  [[nodiscard]] Eigen::VectorXd to_value_gradient(const Eigen::VectorXd& g) const {
    Eigen::VectorXd w(q_ * n_);
    for (Eigen::Index j = 0; j < q_; ++j) {
      const Eigen::VectorXd a =
          r_mat_.transpose().triangularView<Eigen::Lower>().solve(Eigen::VectorXd(g.segment(j * k_, k_)));
      const Eigen::VectorXd b = s_ldlt_.solve(gamma(g, j) - k2_.transpose() * (f1_ * a));
      w.segment(j * n_, n_) = f1_ * a + f2_ * b;
    }
    return w;
  }

  Eigen::VectorXd apply_preconditioner(const Eigen::LDLT<Eigen::MatrixXd>& mu, const Eigen::VectorXd& g) const {
    const Eigen::VectorXd z = mu.solve(to_value_gradient(g));
    // B^{-1} z per component: gamma = S^{-1} F2' z, alpha = R^{-1} F1'(z - K2 gamma)
    Eigen::VectorXd out(q_ * n_);
    for (Eigen::Index j = 0; j < q_; ++j) {
      const Eigen::VectorXd zj = z.segment(j * n_, n_);
      const Eigen::VectorXd gj = s_ldlt_.solve(f2_.transpose() * zj);
      out.segment(j * k_, k_) = r_mat_.triangularView<Eigen::Upper>().solve(f1_.transpose() * (zj - k2_ * gj));
      out.segment(q_ * k_ + j * (n_ - k_), n_ - k_) = gj;
    }
    return out;
  }

  const PhysicalDataset& data_;
  const ComputerModel& model_;
  double lambda_;
  Eigen::Index n_ = 0, q_ = 0, r_ = 0, k_ = 0;
  Eigen::MatrixXd phi_, v_, f1_, f2_, r_mat_, k2_, s_, p_;
  Eigen::LDLT<Eigen::MatrixXd> s_ldlt_;
  std::vector<Eigen::MatrixXd> jac_;
  Eigen::VectorXd jac_at_;
};

inline bool is_monotone(const std::vector<double>& h) {
  for (std::size_t i = 1; i < h.size(); ++i) {
    if (h[i] > h[i - 1]) return false;
  }
  return true;
}

}  // namespace detail

/// Local minimizer of the penalized objective for fixed lambda. Starts from the constant fit
/// (theta_hat == theta_const, beta = 0) unless a warm start is given; for q >= 2
/// additional starts perturb the constant uniformly and the lowest objective wins.
inline CalibrationEstimate fit(const PhysicalDataset& data, const ComputerModel& model, const Kernel& kernel,
                               double lambda, const FitOptions& opt = {}) {
  if (!(lambda >= 0.0)) throw ParameterError("lambda must be nonnegative");
  data.validate();
  if (data.response_dim() != model.response_dim()) throw DataError("response dimension does not match the model");
  if (data.input_dim() != model.input_dim()) throw DataError("input dimension does not match the model");
  detail::CalibrationProblem problem(data, model, kernel, lambda);
  const Eigen::Index q = model.param_dim();

  std::vector<Eigen::VectorXd> starts;
  if (opt.init) {
    starts.push_back(problem.from_coefficients(*opt.init));
  } else {
    const Eigen::VectorXd theta_c = opt.init_const ? *opt.init_const : fit_const(data, model, opt.lbfgs).theta;
    starts.push_back(problem.constant_start(theta_c));
    const int total = opt.multistart > 0 ? opt.multistart : (q >= 2 ? 5 : 1);
    Rng rng = make_rng(opt.seed, 0x3a17);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    const ParameterBox& box = model.box();
    for (int s = 1; s < total; ++s) {
      Eigen::VectorXd th = theta_c;
      for (Eigen::Index j = 0; j < q; ++j) {
        const double width = (std::isfinite(box.lower(j)) && std::isfinite(box.upper(j)))
                                  ? box.upper(j) - box.lower(j)
                                  : std::max(1.0, std::abs(theta_c(j)));
        th(j) += opt.perturbation * width * unif(rng);
      }
      starts.push_back(problem.constant_start(box.clamp(th)));
    }
  }

  LbfgsResult best;
  best.value = std::numeric_limits<double>::infinity();
  int used = 0;
  for (const auto& s : starts) {
    if (!problem.feasible(s)) {
      if (starts.size() == 1) throw DomainError("infeasible initialization: theta(x_i) outside the parameter box");
      continue;
    }
    ++used;
    LbfgsResult res = minimize_lbfgs(problem, s, opt.lbfgs);
    if (res.value < best.value) best = std::move(res);
  }
  if (used == 0) throw DomainError("infeasible initialization: every start left the parameter box");

  CalibrationEstimate est;
  est.kernel = kernel;
  est.basis = kernel.null_basis();
  est.anchors = data.x;
  est.coef = problem.to_coefficients(best.x);
  est.lambda = lambda;
  est.report.objective = best.value;
  est.report.iterations = best.iterations;
  est.report.converged = best.converged;
  est.report.feasible = problem.feasible(best.x);
  est.report.history = best.history;
  est.report.monotone = detail::is_monotone(best.history);
  est.report.starts = used;
  est.report.message = best.message;
  return est;
}

/// Fitted theta_hat at the anchors, n x q.
inline Eigen::MatrixXd fitted_theta(const CalibrationEstimate& est) {
  Eigen::MatrixXd out(est.anchors.rows(), est.param_dim());
  for (Eigen::Index i = 0; i < est.anchors.rows(); ++i) out.row(i) = theta_at(est, est.anchors.row(i).transpose()).transpose();
  return out;
}

/// Cubic smoothing-spline kernel on the (scalar) domain of the data.
inline Kernel default_kernel(const PhysicalDataset& data) {
  if (data.input_dim() != 1) throw UsageError("the cubic kernel needs scalar x; pass a Matern or sqexp kernel");
  return Kernel::sobolev_cubic(data.lower(0), data.upper(0));
}

}  // namespace fcal
