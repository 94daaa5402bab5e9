#pragma once

// Linearization of a fitted calibration, the smoother A(lambda), GCV and sigma^2.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "fcal/calibrate.hpp"
#include "fcal/errors.hpp"

namespace fcal {

/// First-order expansion of y^s around theta_hat at the design points. With
/// r > 1 every (point, response) pair is one observation; N = n r.
struct LinearizedSystem {
  Eigen::Index n = 0;  // design points
  Eigen::Index q = 0;
  Eigen::Index r = 1;
  Eigen::Index k = 0;
  Eigen::MatrixXd theta_hat;  // n x q
  Eigen::MatrixXd w;          // N x q, w_oj = d y^s_k / d theta_j at (x_i, theta_hat(x_i))
  Eigen::VectorXd ybar;       // N
  Eigen::MatrixXd V;          // N x k
  Eigen::MatrixXd Phi;        // N x N
  Eigen::VectorXd Y;          // qN, ybar repeated q times
  Eigen::MatrixXd Vw;         // qN x qk
  Eigen::MatrixXd Phiw;       // qN x qN
  Eigen::MatrixXd F1;         // qN x rank
  Eigen::MatrixXd F2;         // qN x (qN - rank)
  Eigen::MatrixXd R;          // rank x rank, Vw P = F1 R (column-pivoted)
  Eigen::Index rank = 0;
  /// Observations whose gradient row w_o. vanishes.
  std::vector<Eigen::Index> zero_gradient_rows;

  [[nodiscard]] Eigen::Index observations() const { return n * r; }
  [[nodiscard]] double nlambda(double lambda) const { return static_cast<double>(n) * lambda; }

  /// V_jw = W_j V
  [[nodiscard]] Eigen::MatrixXd Vjw(Eigen::Index j) const { return w.col(j).asDiagonal() * V; }
  /// Phi_jw = W_j Phi W_j
  [[nodiscard]] Eigen::MatrixXd Phijw(Eigen::Index j) const {
    return w.col(j).asDiagonal() * Phi * w.col(j).asDiagonal();
  }
};

namespace detail {

inline void build_stacked(LinearizedSystem& s) {
  const Eigen::Index N = s.observations(), q = s.q, k = s.k;
  s.Y.resize(q * N);
  for (Eigen::Index l = 0; l < q; ++l) s.Y.segment(l * N, N) = s.ybar;
  Eigen::MatrixXd vrow(N, q * k), prow(N, q * N);
  for (Eigen::Index j = 0; j < q; ++j) {
    vrow.middleCols(j * k, k) = s.Vjw(j);
    prow.middleCols(j * N, N) = s.Phijw(j);
  }
  s.Vw.resize(q * N, q * k);
  s.Phiw.resize(q * N, q * N);
  for (Eigen::Index l = 0; l < q; ++l) {
    s.Vw.middleRows(l * N, N) = vrow;
    s.Phiw.middleRows(l * N, N) = prow;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(s.Vw);
  qr.setThreshold(1e-10);
  s.rank = qr.rank();
  const Eigen::MatrixXd qfull = qr.householderQ() * Eigen::MatrixXd::Identity(q * N, q * N);
  s.F1 = qfull.leftCols(s.rank);
  s.F2 = qfull.rightCols(q * N - s.rank);
  s.R = qr.matrixR().topLeftCorner(s.rank, s.rank).triangularView<Eigen::Upper>();
}

}  // namespace detail

/// Builds the linearized system from raw weights; exposed for direct tests of the algebra.
inline LinearizedSystem make_linearized_system(const Eigen::MatrixXd& w, const Eigen::VectorXd& ybar,
                                               const Eigen::MatrixXd& V, const Eigen::MatrixXd& Phi,
                                               Eigen::Index design_points) {
  LinearizedSystem s;
  s.n = design_points;
  s.r = w.rows() / design_points;
  s.q = w.cols();
  s.k = V.cols();
  s.w = w;
  s.ybar = ybar;
  s.V = V;
  s.Phi = Phi;
  for (Eigen::Index o = 0; o < w.rows(); ++o) {
    if (w.row(o).cwiseAbs().maxCoeff() == 0.0) s.zero_gradient_rows.push_back(o);
  }
  detail::build_stacked(s);
  return s;
}

inline LinearizedSystem linearize(const CalibrationEstimate& est, const PhysicalDataset& data,
                                  const ComputerModel& model) {
  const Eigen::Index n = data.size(), r = data.response_dim(), q = est.param_dim();
  if (est.anchors.rows() != n) throw UsageError("estimate was fitted on a different dataset");
  const Eigen::MatrixXd theta = fitted_theta(est);
  const Eigen::MatrixXd phi = gram(est.kernel, data.x);
  const Eigen::MatrixXd v = null_design(est.basis, data.x);
  const Eigen::Index N = n * r;
  Eigen::MatrixXd w(N, q), vobs(N, v.cols()), phiobs(N, N);
  Eigen::VectorXd ybar(N);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd xi = data.x.row(i).transpose();
    const Eigen::VectorXd th = model.box().clamp(theta.row(i).transpose());
    const Eigen::MatrixXd g = model.grad_unchecked(xi, th);
    const Eigen::VectorXd ys = model.eval(xi, th);
    for (Eigen::Index kk = 0; kk < r; ++kk) {
      const Eigen::Index o = i * r + kk;
      w.row(o) = g.row(kk);
      ybar(o) = data.y(i, kk) - ys(kk) + g.row(kk).dot(th);
      vobs.row(o) = v.row(i);
      for (Eigen::Index i2 = 0; i2 < n; ++i2) {
        for (Eigen::Index k2 = 0; k2 < r; ++k2) phiobs(o, i2 * r + k2) = phi(i, i2);
      }
    }
  }
  LinearizedSystem s = make_linearized_system(w, ybar, vobs, phiobs, n);
  s.theta_hat = theta;
  return s;
}

namespace detail {

/// LU of F2' Phi_w F2 + n lambda I (not symmetric for q > 1).
struct SmootherCore {
  Eigen::PartialPivLU<Eigen::MatrixXd> lu;
  double nl = 0.0;

  SmootherCore(const LinearizedSystem& s, double lambda) : nl(s.nlambda(lambda)) {
    if (!(lambda > 0.0)) throw ParameterError("lambda must be positive for the smoother");
    Eigen::MatrixXd c = s.F2.transpose() * s.Phiw * s.F2;
    c.diagonal().array() += nl;
    lu.compute(c);
    const double rc = lu.rcond();
    if (!(rc > 1e-15)) throw NumericError("F2' Phi_w F2 + n lambda I is numerically singular (rcond " + std::to_string(rc) + ")");
  }

  /// (I - A) v = n lambda F2 (F2' Phi_w F2 + n lambda I)^{-1} F2' v
  [[nodiscard]] Eigen::VectorXd residual_map(const LinearizedSystem& s, const Eigen::VectorXd& v) const {
    return nl * (s.F2 * lu.solve(s.F2.transpose() * v));
  }

  [[nodiscard]] double trace_residual(const LinearizedSystem& s) const {
    if (s.F2.cols() == 0) return 0.0;
    const Eigen::MatrixXd inv = lu.solve(Eigen::MatrixXd::Identity(s.F2.cols(), s.F2.cols()));
    return nl * inv.trace();
  }
};

}  // namespace detail

/// Explicit A(lambda) = I - n lambda F2 (F2' Phi_w F2 + n lambda I)^{-1} F2'.
inline Eigen::MatrixXd smoother_matrix(const LinearizedSystem& s, double lambda) {
  detail::SmootherCore core(s, lambda);
  const Eigen::Index m = s.Y.size();
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(m, m);
  if (s.F2.cols() > 0) a -= core.nl * (s.F2 * core.lu.solve(s.F2.transpose()));
  return a;
}

struct PenalizedSolution {
  Eigen::VectorXd alpha;   // qk
  Eigen::VectorXd beta_w;  // qN
  Eigen::VectorXd fitted;  // V_w alpha + Phi_w beta_w
};

/// beta_w = F2 (F2' Phi_w F2 + n lambda I)^{-1} F2' Y and alpha = R^{-1} F1'(Y - Phi_w beta_w);
/// alpha is the minimum-norm solution when V_w is rank deficient.
inline PenalizedSolution solve_penalized(const LinearizedSystem& s, double lambda) {
  detail::SmootherCore core(s, lambda);
  PenalizedSolution sol;
  sol.beta_w = s.F2.cols() > 0 ? Eigen::VectorXd(s.F2 * core.lu.solve(s.F2.transpose() * s.Y))
                               : Eigen::VectorXd::Zero(s.Y.size());
  const Eigen::VectorXd rhs = s.Y - s.Phiw * sol.beta_w;
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(s.Vw);
  cod.setThreshold(1e-10);
  sol.alpha = cod.solve(rhs);
  sol.fitted = s.Vw * sol.alpha + s.Phiw * sol.beta_w;
  return sol;
}

/// Residual degrees of freedom in the GCV denominator and in sigma^2.
///   literal:  tr(I - A) over the stacked qN system.
///   per_copy: q (N - tr A), the residual trace of one copy of the data counted
///             once per repeated block. Identical to `literal` when q = 1.
enum class GcvTrace { per_copy, literal };

inline std::string trace_name(GcvTrace t) { return t == GcvTrace::literal ? "literal" : "per-copy"; }

inline GcvTrace parse_trace(const std::string& s) {
  if (s == "per-copy") return GcvTrace::per_copy;
  if (s == "literal") return GcvTrace::literal;
  throw UsageError("unknown GCV trace '" + s + "' (expected per-copy or literal)");
}

struct SmootherStats {
  double lambda = 0.0;
  double rss = 0.0;        // Y'(I - A)^2 Y
  double trace_res = 0.0;  // residual degrees of freedom used below
  double edf = 0.0;        // tr(A)
  double gcv = 0.0;
  double sigma2 = 0.0;
};

/// GCV = (qN)^-1 Y'(I - A)^2 Y / ((qN)^-1 t)^2 and sigma^2 = Y'(I - A)^2 Y / t.
inline SmootherStats smoother_stats(const LinearizedSystem& s, double lambda, GcvTrace trace = GcvTrace::per_copy) {
  detail::SmootherCore core(s, lambda);
  SmootherStats st;
  st.lambda = lambda;
  const Eigen::VectorXd r1 = core.residual_map(s, s.Y);
  const Eigen::VectorXd r2 = core.residual_map(s, r1);
  st.rss = s.Y.dot(r2);
  const double m = static_cast<double>(s.Y.size());
  const double literal = core.trace_residual(s);
  st.edf = m - literal;
  st.trace_res = trace == GcvTrace::literal
                     ? literal
                     : static_cast<double>(s.q) * (static_cast<double>(s.observations()) - st.edf);
  if (!(st.trace_res > 1e-12)) throw NumericError("degenerate smoother: residual trace is not positive");
  st.gcv = (st.rss / m) / ((st.trace_res / m) * (st.trace_res / m));
  st.sigma2 = st.rss / st.trace_res;
  return st;
}

inline double gcv(const LinearizedSystem& s, double lambda, GcvTrace trace = GcvTrace::per_copy) {
  return smoother_stats(s, lambda, trace).gcv;
}

inline double sigma2_hat(const LinearizedSystem& s, double lambda, GcvTrace trace = GcvTrace::per_copy) {
  return smoother_stats(s, lambda, trace).sigma2;
}

/// 40 log-spaced values from 1e2 down to 1e-8.
inline std::vector<double> default_lambda_grid(int count = 40, double hi = 1e2, double lo = 1e-8) {
  std::vector<double> g(static_cast<std::size_t>(count));
  const double a = std::log10(hi), b = std::log10(lo);
  for (int i = 0; i < count; ++i) {
    g[static_cast<std::size_t>(i)] = count == 1 ? hi : std::pow(10.0, a + (b - a) * i / (count - 1));
  }
  return g;
}

struct GcvPoint {
  double lambda = 0.0;
  double gcv = std::numeric_limits<double>::quiet_NaN();
  double edf = std::numeric_limits<double>::quiet_NaN();
  double sigma2 = std::numeric_limits<double>::quiet_NaN();
  bool ok = false;
  bool converged = false;
  /// Some theta_hat(x_i) sits on the edge of Theta.
  bool boundary = false;
  std::string error;
};

struct LambdaSelection {
  double lambda = 0.0;
  CalibrationEstimate estimate;
  LinearizedSystem system;
  SmootherStats stats;
  std::vector<GcvPoint> curve;
};

namespace detail {

inline bool touches_box(const CalibrationEstimate& est, const ParameterBox& box, double rel = 1e-6) {
  const Eigen::MatrixXd th = fitted_theta(est);
  for (Eigen::Index j = 0; j < th.cols(); ++j) {
    const double lo = box.lower(j), hi = box.upper(j);
    const double tol = std::isfinite(hi - lo) ? rel * (hi - lo) : 0.0;
    for (Eigen::Index i = 0; i < th.rows(); ++i) {
      if ((std::isfinite(lo) && th(i, j) <= lo + tol) || (std::isfinite(hi) && th(i, j) >= hi - tol)) return true;
    }
  }
  return false;
}

}  // namespace detail

/// GCV minimizer over the grid. Fits run from the largest lambda down, each warm-started at the
/// previous solution, and GCV is scored at each fit's own linearization; ties go to the larger lambda.
/// Fits with theta_hat on the edge of Theta are not stationary points of the objective, so they are
/// used only if every fit touches the edge.
inline LambdaSelection select_lambda(const PhysicalDataset& data, const ComputerModel& model, const Kernel& kernel,
                                     std::vector<double> grid = default_lambda_grid(),
                                     const FitOptions& opt = {}, GcvTrace trace = GcvTrace::per_copy) {
  if (grid.empty()) throw UsageError("lambda grid is empty");
  for (double l : grid) {
    if (!(l > 0.0) || !std::isfinite(l)) throw UsageError("lambda grid values must be positive and finite");
  }
  std::sort(grid.begin(), grid.end(), std::greater<>());
  LambdaSelection out;
  std::optional<Coefficients> warm;
  FitOptions local = opt;
  if (!local.init && !local.init_const) local.init_const = fit_const(data, model, opt.lbfgs).theta;
  double best = std::numeric_limits<double>::infinity();
  bool best_boundary = true;
  bool any = false;
  std::string failures;
  for (double lambda : grid) {
    GcvPoint pt;
    pt.lambda = lambda;
    try {
      FitOptions o = local;
      if (warm) o.init = warm;
      CalibrationEstimate est = fit(data, model, kernel, lambda, o);
      warm = est.coef;
      LinearizedSystem sys = linearize(est, data, model);
      const SmootherStats st = smoother_stats(sys, lambda, trace);
      pt.gcv = st.gcv;
      pt.edf = st.edf;
      pt.sigma2 = st.sigma2;
      pt.ok = std::isfinite(st.gcv);
      pt.converged = est.report.converged;
      pt.boundary = detail::touches_box(est, model.box());
      const bool better = best_boundary && !pt.boundary ? true : (pt.boundary == best_boundary && st.gcv < best);
      if (pt.ok && (!any || better)) {
        best = st.gcv;
        best_boundary = pt.boundary;
        out.lambda = lambda;
        out.estimate = std::move(est);
        out.system = std::move(sys);
        out.stats = st;
        any = true;
      }
    } catch (const Error& e) {
      pt.error = e.what();
      failures += "lambda=" + std::to_string(lambda) + ": " + e.what() + "; ";
    }
    out.curve.push_back(pt);
  }
  if (!any) throw NumericError("every lambda in the grid failed: " + failures);
  return out;
}

}  // namespace fcal
