#pragma once

// Squared-exponential Gaussian-process interpolator of computer-model runs.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fcal/errors.hpp"
#include "fcal/model.hpp"

namespace fcal {

struct EmulatorOptions {
  /// Added to the diagonal of the correlation matrix (relative to the signal variance).
  double jitter = 1e-8;
  /// Lengthscale levels (normalized inputs) for the initial grid search.
  std::vector<double> grid{0.1, 0.2336, 0.5477, 1.2819, 3.0};
  double refine_lower = 0.02;
  double refine_upper = 10.0;
  int refine_sweeps = 2;
  /// When set: largest accepted max-norm training residual, in units of max(1, max |y|);
  /// lengthscales shrink by 0.8 until it holds. Off by default.
  std::optional<double> residual_guard;
  /// Skip the search and use these lengthscales (normalized inputs).
  Eigen::VectorXd fixed_lengthscales;
};

struct EmulatorValue {
  Eigen::VectorXd value;
  bool extrapolated = false;
};

class Emulator {
 public:
  Emulator() = default;

  /// Builds the interpolator for given hyperparameters (normalized lengthscales).
  Emulator(Eigen::MatrixXd inputs, Eigen::MatrixXd outputs, int input_dim, Eigen::VectorXd lower,
           Eigen::VectorXd upper, Eigen::VectorXd lengthscales, double jitter)
      : inputs_(std::move(inputs)),
        outputs_(std::move(outputs)),
        d_(input_dim),
        lower_(std::move(lower)),
        upper_(std::move(upper)),
        ls_(std::move(lengthscales)),
        jitter_(jitter) {
    refactor();
  }

  [[nodiscard]] int input_dim() const { return d_; }
  [[nodiscard]] int param_dim() const { return static_cast<int>(inputs_.cols()) - d_; }
  [[nodiscard]] int response_dim() const { return static_cast<int>(outputs_.cols()); }
  [[nodiscard]] Eigen::Index size() const { return inputs_.rows(); }
  [[nodiscard]] const Eigen::MatrixXd& inputs() const { return inputs_; }
  [[nodiscard]] const Eigen::MatrixXd& outputs() const { return outputs_; }
  [[nodiscard]] const Eigen::VectorXd& lengthscales() const { return ls_; }
  [[nodiscard]] const Eigen::VectorXd& lower() const { return lower_; }
  [[nodiscard]] const Eigen::VectorXd& upper() const { return upper_; }
  [[nodiscard]] const Eigen::RowVectorXd& signal_variance() const { return sig2_; }
  [[nodiscard]] double jitter() const { return jitter_; }
  /// Predictor coefficients: value = mean + weights' c(z).
  [[nodiscard]] const Eigen::MatrixXd& weights() const { return weights_; }
  [[nodiscard]] const Eigen::RowVectorXd& mean() const { return mean_; }

  /// Training box in theta.
  [[nodiscard]] ParameterBox theta_box() const {
    return {lower_.tail(param_dim()), upper_.tail(param_dim())};
  }

  [[nodiscard]] EmulatorValue predict(const Eigen::VectorXd& x, const Eigen::VectorXd& theta) const {
    const Eigen::VectorXd z = normalize(x, theta);
    EmulatorValue out;
    out.extrapolated = ((z.array() < -1e-9) || (z.array() > 1.0 + 1e-9)).any();
    out.value = mean_.transpose() + weights_.transpose() * correlations(z);
    return out;
  }

  /// d mean / d theta, r x q.
  [[nodiscard]] Eigen::MatrixXd grad(const Eigen::VectorXd& x, const Eigen::VectorXd& theta) const {
    const Eigen::VectorXd z = normalize(x, theta);
    const Eigen::VectorXd c = correlations(z);
    const int q = param_dim();
    Eigen::MatrixXd g(response_dim(), q);
    for (int j = 0; j < q; ++j) {
      const Eigen::Index dim = d_ + j;
      const double l2 = ls_(dim) * ls_(dim);
      const Eigen::VectorXd dc =
          -c.cwiseProduct((z(dim) - zin_.col(dim).array()).matrix()) / l2 / (upper_(dim) - lower_(dim));
      g.col(j) = weights_.transpose() * dc;
    }
    return g;
  }

  /// Max-norm of the training residual over all responses.
  [[nodiscard]] double training_residual() const {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < inputs_.rows(); ++i) {
      const Eigen::VectorXd in = inputs_.row(i).transpose();
      const Eigen::VectorXd p = predict(in.head(d_), in.tail(param_dim())).value;
      worst = std::max(worst, (p - outputs_.row(i).transpose()).cwiseAbs().maxCoeff());
    }
    return worst;
  }

  /// Profiled log marginal likelihood summed over responses.
  [[nodiscard]] double log_likelihood() const { return loglik_; }

 private:
  [[nodiscard]] Eigen::VectorXd normalize(const Eigen::VectorXd& x, const Eigen::VectorXd& theta) const {
    Eigen::VectorXd raw(inputs_.cols());
    raw << x, theta;
    return ((raw - lower_).array() / (upper_ - lower_).array()).matrix();
  }

  [[nodiscard]] Eigen::VectorXd correlations(const Eigen::VectorXd& z) const {
    Eigen::VectorXd c(zin_.rows());
    for (Eigen::Index i = 0; i < zin_.rows(); ++i) {
      c(i) = std::exp(-0.5 * ((z.transpose() - zin_.row(i)).array() / ls_.transpose().array()).square().sum());
    }
    return c;
  }

  void refactor() {
    const Eigen::Index m = inputs_.rows();
    zin_.resize(m, inputs_.cols());
    for (Eigen::Index i = 0; i < m; ++i) {
      zin_.row(i) = ((inputs_.row(i).transpose() - lower_).array() / (upper_ - lower_).array()).matrix().transpose();
    }
    Eigen::MatrixXd c(m, m);
    for (Eigen::Index i = 0; i < m; ++i) {
      for (Eigen::Index j = 0; j <= i; ++j) {
        c(i, j) = std::exp(-0.5 * ((zin_.row(i) - zin_.row(j)).array() / ls_.transpose().array()).square().sum());
        c(j, i) = c(i, j);
      }
    }
    Eigen::LLT<Eigen::MatrixXd> llt(c + jitter_ * Eigen::MatrixXd::Identity(m, m));
    if (llt.info() != Eigen::Success) throw NumericError("emulator correlation matrix is not positive definite");
    mean_ = outputs_.colwise().mean();
    const Eigen::MatrixXd centered = outputs_.rowwise() - mean_;
    weights_ = llt.solve(centered);
    // iterative refinement towards the unjittered interpolant
    double prev = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 20; ++it) {
      const Eigen::MatrixXd res = centered - c * weights_;
      const double size = res.cwiseAbs().maxCoeff();
      if (!(size < 0.5 * prev)) break;
      prev = size;
      weights_ += llt.solve(res);
    }
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
    sig2_.resize(outputs_.cols());
    loglik_ = 0.0;
    for (Eigen::Index k = 0; k < outputs_.cols(); ++k) {
      sig2_(k) = std::max(centered.col(k).dot(weights_.col(k)) / static_cast<double>(m), 1e-300);
      loglik_ += -0.5 * static_cast<double>(m) * std::log(sig2_(k)) - 0.5 * logdet;
    }
  }

  Eigen::MatrixXd inputs_;
  Eigen::MatrixXd outputs_;
  int d_ = 1;
  Eigen::VectorXd lower_, upper_;
  Eigen::VectorXd ls_;
  double jitter_ = 1e-8;
  Eigen::MatrixXd zin_;
  Eigen::RowVectorXd mean_;
  Eigen::MatrixXd weights_;
  Eigen::RowVectorXd sig2_;
  double loglik_ = 0.0;
};

namespace detail {

inline void check_training(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& outputs) {
  if (inputs.rows() < 2) throw DataError("emulator needs at least two runs");
  if (inputs.rows() != outputs.rows()) throw DataError("emulator inputs and outputs differ in length");
  if (!inputs.allFinite()) throw DataError("emulator inputs contain non-finite values");
  if (!outputs.allFinite()) throw DataError("emulator outputs contain non-finite values");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(inputs.rows()));
  for (Eigen::Index i = 0; i < inputs.rows(); ++i) order[static_cast<std::size_t>(i)] = i;
  auto less = [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index c = 0; c < inputs.cols(); ++c) {
      if (inputs(a, c) != inputs(b, c)) return inputs(a, c) < inputs(b, c);
    }
    return false;
  };
  std::sort(order.begin(), order.end(), less);
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (!less(order[i - 1], order[i])) {
      throw DataError("duplicate emulator input at rows " + std::to_string(order[i - 1]) + " and " +
                      std::to_string(order[i]));
    }
  }
}

inline double safe_loglik(const Eigen::MatrixXd& in, const Eigen::MatrixXd& out, int d, const Eigen::VectorXd& lo,
                          const Eigen::VectorXd& hi, const Eigen::VectorXd& ls, double jitter) {
  try {
    return Emulator(in, out, d, lo, hi, ls, jitter).log_likelihood();
  } catch (const NumericError&) {
    return -std::numeric_limits<double>::infinity();
  }
}

}  // namespace detail

/// Trains on inputs rows (x_1..x_d, t_1..t_q) and outputs rows (y_1..y_r). Inputs
/// are normalized to the training box, outputs centered; lengthscales maximize the
/// profiled likelihood (grid search then coordinate golden-section refinement).
inline Emulator train_emulator(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& outputs, int input_dim,
                               const EmulatorOptions& opt = {}) {
  detail::check_training(inputs, outputs);
  const Eigen::Index D = inputs.cols();
  if (input_dim < 0 || input_dim >= D) throw DataError("emulator inputs need at least one theta column");
  Eigen::VectorXd lo = inputs.colwise().minCoeff().transpose();
  Eigen::VectorXd hi = inputs.colwise().maxCoeff().transpose();
  for (Eigen::Index c = 0; c < D; ++c) {
    if (!(hi(c) > lo(c))) {
      lo(c) -= 0.5;
      hi(c) += 0.5;
    }
  }
  Eigen::VectorXd ls;
  if (opt.fixed_lengthscales.size() > 0) {
    if (opt.fixed_lengthscales.size() != D || !(opt.fixed_lengthscales.array() > 0.0).all()) {
      throw ParameterError("fixed lengthscales must be positive, one per input column");
    }
    return Emulator(inputs, outputs, input_dim, lo, hi, opt.fixed_lengthscales, opt.jitter);
  }
  // grid search over all lengthscale combinations
  const int levels = static_cast<int>(opt.grid.size());
  Eigen::Index combos = 1;
  for (Eigen::Index c = 0; c < D; ++c) combos *= levels;
  double best = -std::numeric_limits<double>::infinity();
  ls = Eigen::VectorXd::Constant(D, 1.0);
  Eigen::VectorXd trial(D);
  for (Eigen::Index idx = 0; idx < combos; ++idx) {
    Eigen::Index rem = idx;
    for (Eigen::Index c = 0; c < D; ++c) {
      trial(c) = opt.grid[static_cast<std::size_t>(rem % levels)];
      rem /= levels;
    }
    const double ll = detail::safe_loglik(inputs, outputs, input_dim, lo, hi, trial, opt.jitter);
    if (ll > best) {
      best = ll;
      ls = trial;
    }
  }
  // coordinate golden-section refinement in log-lengthscale
  const double golden = 0.5 * (std::sqrt(5.0) - 1.0);
  for (int sweep = 0; sweep < opt.refine_sweeps; ++sweep) {
    for (Eigen::Index c = 0; c < D; ++c) {
      double a = std::max(std::log(opt.refine_lower), std::log(ls(c)) - std::log(4.0));
      double b = std::min(std::log(opt.refine_upper), std::log(ls(c)) + std::log(4.0));
      auto eval = [&](double t) {
        Eigen::VectorXd l = ls;
        l(c) = std::exp(t);
        return detail::safe_loglik(inputs, outputs, input_dim, lo, hi, l, opt.jitter);
      };
      double x1 = b - golden * (b - a), x2 = a + golden * (b - a);
      double f1 = eval(x1), f2 = eval(x2);
      for (int it = 0; it < 30 && b - a > 1e-3; ++it) {
        if (f1 > f2) {
          b = x2;
          x2 = x1;
          f2 = f1;
          x1 = b - golden * (b - a);
          f1 = eval(x1);
        } else {
          a = x1;
          x1 = x2;
          f1 = f2;
          x2 = a + golden * (b - a);
          f2 = eval(x2);
        }
      }
      const double t = f1 > f2 ? x1 : x2;
      const double ft = std::max(f1, f2);
      if (ft > best) {
        best = ft;
        ls(c) = std::exp(t);
      }
    }
  }
  if (!opt.residual_guard) return Emulator(inputs, outputs, input_dim, lo, hi, ls, opt.jitter);
  Emulator em;
  const double guard = *opt.residual_guard * std::max(1.0, outputs.cwiseAbs().maxCoeff());
  for (int shrink = 0; shrink < 60; ++shrink) {
    try {
      em = Emulator(inputs, outputs, input_dim, lo, hi, ls, opt.jitter);
      if (em.training_residual() < guard) return em;
    } catch (const NumericError&) {
    }
    ls *= 0.8;
  }
  throw NumericError("emulator could not reach the interpolation tolerance");
}

/// The emulator as a computer model with Theta set to its training box.
inline ComputerModel as_model(std::shared_ptr<const Emulator> em, std::string name = "emulator") {
  const int d = em->input_dim(), q = em->param_dim(), r = em->response_dim();
  return ComputerModel(
      std::move(name), d, q, r, em->theta_box(),
      [em](const Eigen::VectorXd& x, const Eigen::VectorXd& t) { return em->predict(x, t).value; },
      [em](const Eigen::VectorXd& x, const Eigen::VectorXd& t) { return em->grad(x, t); });
}

/// The computer-experiment design: 14 equally spaced x levels times the theta
/// lattice given by the setting (15 points in total).
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> emulator_design(const ComputerModel& model,
                                                                   const BenchmarkSetting& s, int x_levels = 14,
                                                                   int refine = 1) {
  std::vector<std::vector<double>> tl;
  for (std::size_t j = 0; j < s.emulator_theta_levels.size(); ++j) {
    const int lv = s.emulator_theta_levels[j] * refine;
    std::vector<double> v(static_cast<std::size_t>(lv));
    const auto jj = static_cast<Eigen::Index>(j);
    for (int l = 0; l < lv; ++l) {
      v[static_cast<std::size_t>(l)] =
          s.emulator_box.lower(jj) + (s.emulator_box.upper(jj) - s.emulator_box.lower(jj)) * l / (lv - 1);
    }
    tl.push_back(std::move(v));
  }
  std::vector<Eigen::VectorXd> thetas{Eigen::VectorXd(0)};
  for (const auto& levels : tl) {
    std::vector<Eigen::VectorXd> next;
    for (const auto& t : thetas) {
      for (double v : levels) {
        Eigen::VectorXd e(t.size() + 1);
        e << t, v;
        next.push_back(e);
      }
    }
    thetas = std::move(next);
  }
  const int xl = x_levels * refine;
  const Eigen::Index q = model.param_dim();
  const Eigen::Index m = static_cast<Eigen::Index>(xl) * static_cast<Eigen::Index>(thetas.size());
  Eigen::MatrixXd in(m, 1 + q), out(m, model.response_dim());
  Eigen::Index row = 0;
  for (int i = 0; i < xl; ++i) {
    const double x = s.lower + s.width() * i / (xl - 1);
    for (const auto& t : thetas) {
      in(row, 0) = x;
      in.row(row).tail(q) = t.transpose();
      out.row(row) = model.eval(Eigen::VectorXd::Constant(1, x), t).transpose();
      ++row;
    }
  }
  return {in, out};
}

/// Trains the expensive-code surrogate for a builtin setting.
inline std::shared_ptr<const Emulator> train_setting_emulator(const ComputerModel& model, const BenchmarkSetting& s,
                                                              int refine = 1, const EmulatorOptions& opt = {}) {
  auto [in, out] = emulator_design(model, s, 14, refine);
  return std::make_shared<const Emulator>(train_emulator(in, out, 1, opt));
}

}  // namespace fcal
