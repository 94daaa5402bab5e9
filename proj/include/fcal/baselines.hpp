#pragma once

// Constant and parametric calibration comparators with Wald-type bands.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "fcal/band.hpp"
#include "fcal/data.hpp"
#include "fcal/errors.hpp"
#include "fcal/model.hpp"
#include "fcal/optimize.hpp"

namespace fcal {

/// Sum of squares of a residual vector with its Jacobian, minimized by the
/// Gauss-Newton-seeded quasi-Newton iteration.
class LeastSquaresProblem {
 public:
  /// Fills residuals r(p) and Jacobian dr/dp; returns false if p is infeasible.
  using ResidualFn = std::function<bool(const Eigen::VectorXd& p, Eigen::VectorXd& r, Eigen::MatrixXd* jac)>;

  explicit LeastSquaresProblem(ResidualFn fn) : fn_(std::move(fn)) {}

  bool feasible(const Eigen::VectorXd& p) {
    Eigen::VectorXd r;
    return fn_(p, r, nullptr) && r.allFinite();
  }

  double evaluate(const Eigen::VectorXd& p, Eigen::VectorXd& grad) {
    Eigen::VectorXd r;
    Eigen::MatrixXd j;
    if (!fn_(p, r, &j)) return std::numeric_limits<double>::infinity();
    grad = 2.0 * j.transpose() * r;
    return r.squaredNorm();
  }

  InverseHessian inverse_hessian(const Eigen::VectorXd& p) {
    Eigen::VectorXd r;
    Eigen::MatrixXd j;
    fn_(p, r, &j);
    Eigen::MatrixXd h = 2.0 * j.transpose() * j;
    const double ridge = 1e-10 * std::max(h.diagonal().mean(), 1e-300) + 1e-300;
    h.diagonal().array() += ridge;
    auto ldlt = std::make_shared<Eigen::LDLT<Eigen::MatrixXd>>(h);
    return [ldlt](const Eigen::VectorXd& v) { return Eigen::VectorXd(ldlt->solve(v)); };
  }

 private:
  ResidualFn fn_;
};

struct ConstFit {
  Eigen::VectorXd theta;
  /// (1/n) sum_i |y_i - y^s(x_i, theta)|^2
  double objective = std::numeric_limits<double>::quiet_NaN();
  bool converged = false;
  std::vector<Eigen::VectorXd> starts;
};

namespace detail {

/// Start values along one coordinate: quartiles of the box, or {-1, 0, 1} if unbounded.
inline std::vector<double> lattice_levels(double lo, double hi) {
  if (std::isfinite(lo) && std::isfinite(hi)) return {lo + 0.25 * (hi - lo), 0.5 * (lo + hi), lo + 0.75 * (hi - lo)};
  if (std::isfinite(lo)) return {lo + 0.5, lo + 1.0, lo + 2.0};
  if (std::isfinite(hi)) return {hi - 2.0, hi - 1.0, hi - 0.5};
  return {-1.0, 0.0, 1.0};
}

inline std::vector<Eigen::VectorXd> const_lattice(const ParameterBox& box) {
  std::vector<Eigen::VectorXd> pts{Eigen::VectorXd(0)};
  for (Eigen::Index j = 0; j < box.dim(); ++j) {
    std::vector<Eigen::VectorXd> next;
    for (const auto& p : pts) {
      for (double v : lattice_levels(box.lower(j), box.upper(j))) {
        Eigen::VectorXd e(p.size() + 1);
        e << p, v;
        next.push_back(e);
      }
    }
    pts = std::move(next);
  }
  return pts;
}

inline double mean_square(const PhysicalDataset& data, const ComputerModel& model, const Eigen::VectorXd& theta) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    s += (data.y.row(i).transpose() - model.eval(data.x.row(i).transpose(), theta)).squaredNorm();
  }
  return s / static_cast<double>(data.size());
}

}  // namespace detail

/// Least-squares constant calibration over Theta, multistarted on a 3^q lattice.
inline ConstFit fit_const(const PhysicalDataset& data, const ComputerModel& model, const LbfgsOptions& opt = {}) {
  if (data.size() < 1) throw DataError("constant calibration needs at least one observation");
  const Eigen::Index n = data.size();
  const Eigen::Index r = data.response_dim();
  const Eigen::Index q = model.param_dim();
  LeastSquaresProblem problem([&](const Eigen::VectorXd& theta, Eigen::VectorXd& res, Eigen::MatrixXd* jac) {
    if (!model.box().contains(theta)) return false;
    res.resize(n * r);
    if (jac) jac->resize(n * r, q);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::VectorXd xi = data.x.row(i).transpose();
      res.segment(i * r, r) = data.y.row(i).transpose() - model.eval(xi, theta);
      if (jac) jac->middleRows(i * r, r) = -model.grad_unchecked(xi, theta);
    }
    return true;
  });
  ConstFit best;
  best.starts = detail::const_lattice(model.box());
  double best_value = std::numeric_limits<double>::infinity();
  for (const auto& start : best.starts) {
    if (!problem.feasible(start)) continue;
    const auto res = minimize_lbfgs(problem, start, opt);
    if (res.value < best_value) {
      best_value = res.value;
      best.theta = res.x;
      best.converged = res.converged;
    }
  }
  if (!std::isfinite(best_value)) throw NumericError("constant calibration: every start was infeasible");
  best.objective = best_value / static_cast<double>(n);
  return best;
}

enum class ParametricFamily { exp, quad };

inline int family_size(ParametricFamily f) { return f == ParametricFamily::exp ? 2 : 3; }

inline std::string family_name(ParametricFamily f) { return f == ParametricFamily::exp ? "param-exp" : "param-quad"; }

/// Parametric calibration theta_j(x) = f(gamma_j, x), one coefficient vector per
/// component. Internally x is standardized to t = (x - center) / half; `gamma`
/// holds the coefficients in the original x units.
struct ParametricFit {
  ParametricFamily family = ParametricFamily::exp;
  Eigen::MatrixXd gamma;         // q x p, original units
  Eigen::MatrixXd gamma_scaled;  // q x p, standardized units
  double center = 0.0;
  double half = 1.0;
  double objective = std::numeric_limits<double>::quiet_NaN();  // residual sum of squares
  bool converged = false;

  [[nodiscard]] double t_of(double x) const { return (x - center) / half; }

  /// f and df/dgamma (standardized units) for component j at x.
  [[nodiscard]] double component(Eigen::Index j, double x, Eigen::VectorXd* dgamma = nullptr) const {
    return eval_scaled(family, gamma_scaled.row(j).transpose(), t_of(x), dgamma);
  }

  [[nodiscard]] Eigen::VectorXd theta(double x) const {
    Eigen::VectorXd th(gamma_scaled.rows());
    for (Eigen::Index j = 0; j < th.size(); ++j) th(j) = component(j, x);
    return th;
  }

  static double eval_scaled(ParametricFamily fam, const Eigen::VectorXd& g, double t, Eigen::VectorXd* dg) {
    if (fam == ParametricFamily::exp) {
      const double e = std::exp(g(1) * t);
      if (dg) {
        dg->resize(2);
        (*dg) << e, g(0) * t * e;
      }
      return g(0) * e;
    }
    if (dg) {
      dg->resize(3);
      (*dg) << 1.0, t, t * t;
    }
    return g(0) + g(1) * t + g(2) * t * t;
  }

  void finalize_units() {
    gamma.resizeLike(gamma_scaled);
    for (Eigen::Index j = 0; j < gamma.rows(); ++j) {
      const Eigen::VectorXd g = gamma_scaled.row(j).transpose();
      if (family == ParametricFamily::exp) {
        gamma(j, 0) = g(0) * std::exp(-g(1) * center / half);
        gamma(j, 1) = g(1) / half;
      } else {
        const double m = center, h = half;
        gamma(j, 0) = g(0) - g(1) * m / h + g(2) * m * m / (h * h);
        gamma(j, 1) = g(1) / h - 2.0 * g(2) * m / (h * h);
        gamma(j, 2) = g(2) / (h * h);
      }
    }
  }
};

namespace detail {

inline bool parametric_residuals(const PhysicalDataset& data, const ComputerModel& model, ParametricFit& fit,
                                 const Eigen::VectorXd& p, Eigen::VectorXd& res, Eigen::MatrixXd* jac) {
  const Eigen::Index n = data.size(), r = data.response_dim(), q = model.param_dim();
  const int pf = family_size(fit.family);
  fit.gamma_scaled = Eigen::Map<const Eigen::MatrixXd>(p.data(), pf, q).transpose();
  res.resize(n * r);
  if (jac) jac->setZero(n * r, q * pf);
  Eigen::VectorXd th(q), dg;
  std::vector<Eigen::VectorXd> dgs(static_cast<std::size_t>(q));
  for (Eigen::Index i = 0; i < n; ++i) {
    const double xi = data.x(i, 0);
    for (Eigen::Index j = 0; j < q; ++j) th(j) = fit.component(j, xi, &dgs[static_cast<std::size_t>(j)]);
    if (!th.allFinite() || !model.box().contains(th)) return false;
    const Eigen::VectorXd xv = data.x.row(i).transpose();
    res.segment(i * r, r) = data.y.row(i).transpose() - model.eval(xv, th);
    if (jac) {
      const Eigen::MatrixXd g = model.grad_unchecked(xv, th);
      for (Eigen::Index j = 0; j < q; ++j) {
        for (int l = 0; l < pf; ++l) jac->block(i * r, j * pf + l, r, 1) = -g.col(j) * dgs[static_cast<std::size_t>(j)](l);
      }
    }
  }
  return res.allFinite();
}

}  // namespace detail

/// Least-squares fit of a parametric calibration function, multistarted around
/// the constant fit. Each theta component gets its own coefficient vector.
inline ParametricFit fit_parametric(const PhysicalDataset& data, const ComputerModel& model, ParametricFamily family,
                                    const LbfgsOptions& opt = {}) {
  if (data.input_dim() != 1) throw UsageError("parametric calibration families are defined for scalar x");
  const Eigen::Index q = model.param_dim();
  const int pf = family_size(family);
  ParametricFit fit;
  fit.family = family;
  fit.center = 0.5 * (data.lower(0) + data.upper(0));
  fit.half = 0.5 * (data.upper(0) - data.lower(0));
  const ConstFit base = fit_const(data, model, opt);

  LeastSquaresProblem problem([&](const Eigen::VectorXd& p, Eigen::VectorXd& res, Eigen::MatrixXd* jac) {
    return detail::parametric_residuals(data, model, fit, p, res, jac);
  });

  // Slope lattice per component, starting from the constant solution.
  std::vector<Eigen::VectorXd> starts{Eigen::VectorXd::Zero(q * pf)};
  for (Eigen::Index j = 0; j < q; ++j) {
    std::vector<Eigen::VectorXd> next;
    for (const auto& s : starts) {
      for (double slope : {0.0, -0.25, 0.25}) {
        Eigen::VectorXd e = s;
        e(j * pf) = base.theta(j);
        if (family == ParametricFamily::exp) {
          e(j * pf + 1) = slope;
        } else {
          e(j * pf + 1) = slope * std::max(1.0, std::abs(base.theta(j)));
        }
        next.push_back(e);
      }
    }
    starts = std::move(next);
  }

  double best = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_p;
  bool best_conv = false;
  for (const auto& s : starts) {
    if (!problem.feasible(s)) continue;
    const auto res = minimize_lbfgs(problem, s, opt);
    if (res.value < best) {
      best = res.value;
      best_p = res.x;
      best_conv = res.converged;
    }
  }
  if (!std::isfinite(best)) throw NumericError(family_name(family) + ": every start was infeasible");
  fit.gamma_scaled = Eigen::Map<const Eigen::MatrixXd>(best_p.data(), pf, q).transpose();
  fit.objective = best;
  fit.converged = best_conv;
  fit.finalize_units();
  return fit;
}

namespace detail {

/// Wald covariance s^2 (J^T J)^+ of the parameter vector, with s^2 = RSS / (N - P).
struct WaldCovariance {
  Eigen::MatrixXd cov;
  Eigen::Index rank = 0;
  double s2 = 0.0;
};

inline WaldCovariance wald(const Eigen::VectorXd& res, const Eigen::MatrixXd& jac) {
  WaldCovariance w;
  const Eigen::Index dof = std::max<Eigen::Index>(1, res.size() - jac.cols());
  w.s2 = res.squaredNorm() / static_cast<double>(dof);
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(jac.transpose() * jac);
  cod.setThreshold(1e-12);
  w.rank = cod.rank();
  w.cov = w.s2 * cod.pseudoInverse();
  return w;
}

}  // namespace detail

/// Wald bands for a constant fit: theta bands (one per component) and the
/// delta-method prediction band on response 0.
inline std::vector<ConfidenceBand> const_bands(const ConstFit& fit, const PhysicalDataset& data,
                                               const ComputerModel& model, const Eigen::MatrixXd& grid, double level,
                                               bool want_theta = true, bool want_prediction = true) {
  const Eigen::Index n = data.size(), r = data.response_dim(), q = model.param_dim();
  Eigen::VectorXd res(n * r);
  Eigen::MatrixXd jac(n * r, q);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd xi = data.x.row(i).transpose();
    res.segment(i * r, r) = data.y.row(i).transpose() - model.eval(xi, fit.theta);
    jac.middleRows(i * r, r) = model.grad_unchecked(xi, fit.theta);
  }
  const auto w = detail::wald(res, jac);
  std::vector<ConfidenceBand> out;
  const Eigen::Index m = grid.rows();
  if (want_theta) {
    if (w.rank < q) throw NumericError("constant fit: singular J^T J, theta bands unavailable");
    for (Eigen::Index j = 0; j < q; ++j) {
      Eigen::VectorXd center = Eigen::VectorXd::Constant(m, fit.theta(j));
      Eigen::VectorXd sd = Eigen::VectorXd::Constant(m, std::sqrt(std::max(0.0, w.cov(j, j))));
      auto b = ConfidenceBand::from_sd(grid, center, sd, level, "theta" + std::to_string(j + 1));
      b.sigma2 = w.s2;
      out.push_back(std::move(b));
    }
  }
  if (want_prediction) {
    Eigen::VectorXd center(m), sd(m);
    for (Eigen::Index g = 0; g < m; ++g) {
      const Eigen::VectorXd xg = grid.row(g).transpose();
      center(g) = model.eval(xg, fit.theta)(0);
      const Eigen::VectorXd grad = model.grad_unchecked(xg, fit.theta).row(0).transpose();
      sd(g) = std::sqrt(std::max(0.0, grad.dot(w.cov * grad)));
    }
    auto b = ConfidenceBand::from_sd(grid, center, sd, level, "prediction");
    b.sigma2 = w.s2;
    out.push_back(std::move(b));
  }
  return out;
}

/// Wald bands for a parametric fit, propagated to theta_j(x) and to the prediction.
inline std::vector<ConfidenceBand> parametric_bands(ParametricFit fit, const PhysicalDataset& data,
                                                    const ComputerModel& model, const Eigen::MatrixXd& grid,
                                                    double level, bool want_theta = true,
                                                    bool want_prediction = true) {
  const Eigen::Index q = model.param_dim();
  const int pf = family_size(fit.family);
  Eigen::VectorXd p = Eigen::Map<const Eigen::VectorXd>(Eigen::MatrixXd(fit.gamma_scaled.transpose()).data(), q * pf);
  const Eigen::MatrixXd gamma_scaled = fit.gamma_scaled;
  Eigen::VectorXd res;
  Eigen::MatrixXd jac;
  if (!detail::parametric_residuals(data, model, fit, p, res, &jac)) {
    throw NumericError(family_name(fit.family) + ": fitted curve left the parameter box");
  }
  fit.gamma_scaled = gamma_scaled;
  jac = -jac;
  const auto w = detail::wald(res, jac);
  const Eigen::Index m = grid.rows();
  std::vector<ConfidenceBand> out;
  if (want_theta) {
    if (w.rank < q * pf) throw NumericError(family_name(fit.family) + ": singular J^T J, theta bands unavailable");
    for (Eigen::Index j = 0; j < q; ++j) {
      Eigen::VectorXd center(m), sd(m), dg;
      for (Eigen::Index g = 0; g < m; ++g) {
        center(g) = fit.component(j, grid(g, 0), &dg);
        const auto blk = w.cov.block(j * pf, j * pf, pf, pf);
        sd(g) = std::sqrt(std::max(0.0, dg.dot(blk * dg)));
      }
      auto b = ConfidenceBand::from_sd(grid, center, sd, level, "theta" + std::to_string(j + 1));
      b.sigma2 = w.s2;
      out.push_back(std::move(b));
    }
  }
  if (want_prediction) {
    Eigen::VectorXd center(m), sd(m), dg;
    for (Eigen::Index g = 0; g < m; ++g) {
      const Eigen::VectorXd xg = grid.row(g).transpose();
      const Eigen::VectorXd th = model.box().clamp(fit.theta(grid(g, 0)));
      center(g) = model.eval(xg, th)(0);
      const Eigen::RowVectorXd dy = model.grad_unchecked(xg, th).row(0);
      Eigen::VectorXd full(q * pf);
      for (Eigen::Index j = 0; j < q; ++j) {
        (void)fit.component(j, grid(g, 0), &dg);
        full.segment(j * pf, pf) = dy(j) * dg;
      }
      sd(g) = std::sqrt(std::max(0.0, full.dot(w.cov * full)));
    }
    auto b = ConfidenceBand::from_sd(grid, center, sd, level, "prediction");
    b.sigma2 = w.s2;
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace fcal
