#pragma once

// Limited-memory quasi-Newton minimizer with backtracking line search and
// step-halving feasibility monitoring.

#include <Eigen/Dense>

#include <cmath>
#include <concepts>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "fcal/errors.hpp"

namespace fcal {

struct LbfgsOptions {
  int memory = 10;
  int max_iter = 500;
  /// Relative objective change stopping threshold.
  double tol = 1e-9;
  /// Gradient stopping threshold, scaled by (1 + |f|).
  double grad_tol = 1e-7;
  int max_feasibility_halvings = 30;
  int max_backtracks = 60;
  double armijo = 1e-4;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double value = std::numeric_limits<double>::quiet_NaN();
  Eigen::VectorXd gradient;
  int iterations = 0;
  bool converged = false;
  /// Objective at every accepted iterate, starting with the initial point.
  std::vector<double> history;
  std::string message;
};

/// Applies an approximate inverse Hessian to a vector.
using InverseHessian = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

template <class P>
concept SmoothProblem = requires(P& p, const Eigen::VectorXd& x, Eigen::VectorXd& g) {
  { p.evaluate(x, g) } -> std::convertible_to<double>;
  { p.feasible(x) } -> std::convertible_to<bool>;
};

template <class P>
concept StationarityProblem = SmoothProblem<P> && requires(P& p, const Eigen::VectorXd& x, const Eigen::VectorXd& g) {
  { p.stationarity(x, g) } -> std::convertible_to<double>;
};

template <class P>
concept PreconditionedProblem = SmoothProblem<P> && requires(P& p, const Eigen::VectorXd& x) {
  { p.inverse_hessian(x) } -> std::convertible_to<InverseHessian>;
};

namespace detail {

/// Max-norm of the gradient, or of the problem's own stationarity measure when it has one.
template <class Problem>
double stationarity(Problem& p, const Eigen::VectorXd& x, const Eigen::VectorXd& g) {
  if constexpr (StationarityProblem<Problem>) {
    return p.stationarity(x, g);
  } else {
    return g.lpNorm<Eigen::Infinity>();
  }
}

struct CurvaturePair {
  Eigen::VectorXd s;
  Eigen::VectorXd y;
  double rho;
};

inline Eigen::VectorXd two_loop(const std::deque<CurvaturePair>& mem, const Eigen::VectorXd& g,
                                const InverseHessian& h0) {
  Eigen::VectorXd q = g;
  std::vector<double> a(mem.size());
  for (std::size_t i = mem.size(); i-- > 0;) {
    a[i] = mem[i].rho * mem[i].s.dot(q);
    q -= a[i] * mem[i].y;
  }
  Eigen::VectorXd r = h0(q);
  for (std::size_t i = 0; i < mem.size(); ++i) {
    const double b = mem[i].rho * mem[i].y.dot(r);
    r += (a[i] - b) * mem[i].s;
  }
  return r;
}

}  // namespace detail

/// Minimizes p.evaluate over the region where p.feasible holds, starting from a
/// feasible x0. When the problem supplies inverse_hessian(x) it seeds the
/// two-loop recursion at every iterate; otherwise the usual scaled identity is used.
template <SmoothProblem Problem>
LbfgsResult minimize_lbfgs(Problem& problem, Eigen::VectorXd x0, const LbfgsOptions& opt = {}) {
  LbfgsResult res;
  if (!problem.feasible(x0)) throw DomainError("infeasible initialization");
  Eigen::VectorXd g(x0.size());
  double f = problem.evaluate(x0, g);
  if (!std::isfinite(f)) throw NumericError("objective not finite at the initial point");
  Eigen::VectorXd x = std::move(x0);
  res.history.push_back(f);

  std::deque<detail::CurvaturePair> mem;
  double gamma = 1.0;
  Eigen::VectorXd g_new(x.size());

  for (int it = 0; it < opt.max_iter; ++it) {
    if (detail::stationarity(problem, x, g) < opt.grad_tol * (1.0 + std::abs(f))) {
      res.converged = true;
      res.message = "gradient tolerance reached";
      break;
    }
    InverseHessian h0;
    if constexpr (PreconditionedProblem<Problem>) {
      h0 = problem.inverse_hessian(x);
    } else {
      h0 = [gamma](const Eigen::VectorXd& v) { return Eigen::VectorXd(gamma * v); };
    }

    bool accepted = false;
    double f_new = f;
    Eigen::VectorXd x_new;
    for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
      Eigen::VectorXd d = -detail::two_loop(mem, g, h0);
      if (!(g.dot(d) < 0.0) || !d.allFinite()) {
        mem.clear();
        d = -h0(g);
        if (!(g.dot(d) < 0.0) || !d.allFinite()) d = -g;
      }
      double t = 1.0;
      int halvings = 0;
      while (!problem.feasible(x + t * d) && halvings < opt.max_feasibility_halvings) {
        t *= 0.5;
        ++halvings;
      }
      if (problem.feasible(x + t * d)) {
        const double slope = g.dot(d);
        for (int bt = 0; bt < opt.max_backtracks; ++bt) {
          x_new = x + t * d;
          f_new = problem.evaluate(x_new, g_new);
          if (std::isfinite(f_new) && f_new <= f + opt.armijo * t * slope) {
            accepted = true;
            break;
          }
          t *= 0.5;
        }
      }
      if (!accepted) mem.clear();
    }
    if (!accepted) {
      // no decrease available along any descent direction at working precision
      res.converged = detail::stationarity(problem, x, g) < 1e-4 * (1.0 + std::abs(f));
      res.message = "line search could not decrease the objective";
      break;
    }

    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      mem.push_back({s, y, 1.0 / sy});
      if (static_cast<int>(mem.size()) > opt.memory) mem.pop_front();
      gamma = sy / y.squaredNorm();
    }
    const double change = std::abs(f - f_new);
    x = std::move(x_new);
    g = g_new;
    f = f_new;
    res.history.push_back(f);
    res.iterations = it + 1;
    if (change <= opt.tol * std::max(std::abs(f), std::numeric_limits<double>::min())) {
      res.converged = true;
      res.message = "relative objective change below tolerance";
      break;
    }
    if (it + 1 == opt.max_iter) res.message = "iteration limit reached";
  }
  res.x = std::move(x);
  res.value = f;
  res.gradient = std::move(g);
  return res;
}

}  // namespace fcal
