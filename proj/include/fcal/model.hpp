#pragma once

// Computer models y^s(x, theta) and the four analytic benchmark settings.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fcal/data.hpp"
#include "fcal/errors.hpp"
#include "fcal/rng.hpp"

namespace fcal {

/// Per-coordinate box for the calibration parameter; infinite bounds are allowed.
struct ParameterBox {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  static ParameterBox unbounded(Eigen::Index q) {
    const double inf = std::numeric_limits<double>::infinity();
    return {Eigen::VectorXd::Constant(q, -inf), Eigen::VectorXd::Constant(q, inf)};
  }

  [[nodiscard]] Eigen::Index dim() const { return lower.size(); }
  [[nodiscard]] bool bounded() const { return lower.allFinite() && upper.allFinite(); }

  [[nodiscard]] bool contains(const Eigen::Ref<const Eigen::VectorXd>& theta) const {
    return (theta.array() >= lower.array()).all() && (theta.array() <= upper.array()).all();
  }

  [[nodiscard]] Eigen::VectorXd clamp(const Eigen::Ref<const Eigen::VectorXd>& theta) const {
    return theta.cwiseMax(lower).cwiseMin(upper);
  }
};

/// Uniform interface to a simulator: value r-vector and r x q theta-Jacobian.
class ComputerModel {
 public:
  using EvalFn = std::function<Eigen::VectorXd(const Eigen::VectorXd& x, const Eigen::VectorXd& theta)>;
  using GradFn = std::function<Eigen::MatrixXd(const Eigen::VectorXd& x, const Eigen::VectorXd& theta)>;

  ComputerModel() = default;
  ComputerModel(std::string name, int input_dim, int param_dim, int response_dim, ParameterBox box, EvalFn eval,
                GradFn grad = {})
      : name_(std::move(name)),
        d_(input_dim),
        q_(param_dim),
        r_(response_dim),
        box_(std::move(box)),
        eval_(std::move(eval)),
        grad_(std::move(grad)) {}

  [[nodiscard]] const std::string& name() const { return name_; }
  [[nodiscard]] int input_dim() const { return d_; }
  [[nodiscard]] int param_dim() const { return q_; }
  [[nodiscard]] int response_dim() const { return r_; }
  [[nodiscard]] const ParameterBox& box() const { return box_; }
  [[nodiscard]] bool has_analytic_grad() const { return static_cast<bool>(grad_); }

  [[nodiscard]] Eigen::VectorXd eval(const Eigen::VectorXd& x, const Eigen::VectorXd& theta) const {
    return eval_(x, theta);
  }

  /// Scalar shortcut for d = q = r = 1 models.
  [[nodiscard]] double eval(double x, double theta) const {
    return eval_(Eigen::VectorXd::Constant(1, x), Eigen::VectorXd::Constant(1, theta))(0);
  }

  /// d y^s_k / d theta_j without the Theta check (used inside solvers).
  [[nodiscard]] Eigen::MatrixXd grad_unchecked(const Eigen::VectorXd& x, const Eigen::VectorXd& theta) const {
    if (grad_) return grad_(x, theta);
    return finite_difference_grad(x, theta);
  }

  /// Central finite differences with relative step 1e-6 (1 + |theta_j|).
  [[nodiscard]] Eigen::MatrixXd finite_difference_grad(const Eigen::VectorXd& x, const Eigen::VectorXd& theta) const {
    Eigen::MatrixXd g(r_, q_);
    Eigen::VectorXd tp = theta;
    for (int j = 0; j < q_; ++j) {
      const double h = 1e-6 * (1.0 + std::abs(theta(j)));
      tp(j) = theta(j) + h;
      const Eigen::VectorXd fp = eval_(x, tp);
      tp(j) = theta(j) - h;
      const Eigen::VectorXd fm = eval_(x, tp);
      tp(j) = theta(j);
      g.col(j) = (fp - fm) / (2.0 * h);
    }
    return g;
  }

  /// Transforms the model into one with a different Theta (e.g. an emulator's training box).
  [[nodiscard]] ComputerModel with_box(ParameterBox box) const {
    ComputerModel m = *this;
    m.box_ = std::move(box);
    return m;
  }

 private:
  std::string name_;
  int d_ = 1;
  int q_ = 1;
  int r_ = 1;
  ParameterBox box_;
  EvalFn eval_;
  GradFn grad_;
};

/// r x q Jacobian at (x, theta); DomainError if theta is outside the model's Theta.
inline Eigen::MatrixXd model_grad(const ComputerModel& model, const Eigen::VectorXd& x, const Eigen::VectorXd& theta) {
  if (!model.box().contains(theta)) throw DomainError("model gradient requested outside the parameter box");
  return model.grad_unchecked(x, theta);
}

/// y^s(x, theta) = theta, the plain-regression special case (q = r = 1).
inline ComputerModel identity_model(int input_dim = 1) {
  return ComputerModel(
      "identity", input_dim, 1, 1, ParameterBox::unbounded(1),
      [](const Eigen::VectorXd&, const Eigen::VectorXd& t) { return Eigen::VectorXd(t); },
      [](const Eigen::VectorXd&, const Eigen::VectorXd&) { return Eigen::MatrixXd::Ones(1, 1); });
}

using ScalarFn = std::function<double(double)>;
using CalibrationFn = std::function<Eigen::VectorXd(double)>;

/// One of the four analytic simulation settings (all with scalar x and r = 1).
struct BenchmarkSetting {
  int id = 1;
  double lower = 0.0;  // control-variable domain
  double upper = 1.0;
  double sigma = 0.1;
  ScalarFn zeta;
  /// Unique optimal calibration function (settings 1-2 only).
  std::optional<CalibrationFn> theta_star;
  /// Functions theta(x) with y^s(x, theta(x)) = zeta(x); several for the non-identified settings.
  std::vector<CalibrationFn> witnesses;
  /// Training rectangle of the emulator in theta.
  ParameterBox emulator_box;
  /// Levels of the emulator design per theta coordinate (14 x-levels times prod(levels) = 15 theta points).
  std::vector<int> emulator_theta_levels;

  [[nodiscard]] bool identifiable() const { return theta_star.has_value(); }
  [[nodiscard]] double width() const { return upper - lower; }
};

namespace detail {

inline Eigen::VectorXd vec1(double a) { return Eigen::VectorXd::Constant(1, a); }
inline Eigen::VectorXd vec2(double a, double b) {
  Eigen::VectorXd v(2);
  v << a, b;
  return v;
}

}  // namespace detail

/// Analytic model and setting for benchmark `id` in {1, 2, 3, 4}.
inline std::pair<ComputerModel, BenchmarkSetting> builtin(int id) {
  using detail::vec1;
  using detail::vec2;
  constexpr double pi = std::numbers::pi;
  BenchmarkSetting s;
  s.id = id;
  switch (id) {
    case 1: {
      s.lower = pi;
      s.upper = 3.0 * pi;
      s.sigma = 0.1;
      s.zeta = [](double x) { return std::exp(x / 10.0) * std::cos(x); };
      s.theta_star = [](double x) { return vec1(0.5 * std::exp(x / 5.0)); };
      s.witnesses = {*s.theta_star};
      s.emulator_box = {vec1(pi / 5.0), vec1(6.0 * pi / 5.0)};
      s.emulator_theta_levels = {15};
      ComputerModel m(
          "sim1", 1, 1, 1, s.emulator_box,
          [](const Eigen::VectorXd& x, const Eigen::VectorXd& t) {
            return vec1(0.5 * std::exp(x(0) / 10.0) * std::cos(x(0)) * std::exp(x(0) / 5.0) / t(0));
          },
          [](const Eigen::VectorXd& x, const Eigen::VectorXd& t) {
            const double y = 0.5 * std::exp(x(0) / 10.0) * std::cos(x(0)) * std::exp(x(0) / 5.0) / t(0);
            return Eigen::MatrixXd::Constant(1, 1, -y / t(0));
          });
      return {m, s};
    }
    case 2: {
      s.lower = 0.5 * pi;
      s.upper = pi;
      s.sigma = 0.1;
      s.zeta = [](double x) { return std::cos(2.0 * x) * std::sin(x / 2.0); };
      s.theta_star = [](double x) { return vec1(0.5 * (x - 2.0) * (x - 2.0) + 0.5); };
      s.witnesses = {*s.theta_star};
      s.emulator_box = {vec1(pi / 9.0), vec1(pi / 2.0)};
      s.emulator_theta_levels = {15};
      auto value = [](double x, double t) {
        const double star = 0.5 * (x - 2.0) * (x - 2.0) + 0.5;
        return std::cos(2.0 * x) * std::sin(x / 2.0) * std::exp(3.0 * t / star - 3.0);
      };
      ComputerModel m(
          "sim2", 1, 1, 1, s.emulator_box,
          [value](const Eigen::VectorXd& x, const Eigen::VectorXd& t) { return vec1(value(x(0), t(0))); },
          [value](const Eigen::VectorXd& x, const Eigen::VectorXd& t) {
            const double star = 0.5 * (x(0) - 2.0) * (x(0) - 2.0) + 0.5;
            return Eigen::MatrixXd::Constant(1, 1, value(x(0), t(0)) * 3.0 / star);
          });
      return {m, s};
    }
    case 3: {
      s.lower = 1.0;
      s.upper = 2.0;
      s.sigma = 0.2;
      s.zeta = [](double x) { return 1.0 + x * x * x; };
      s.witnesses = {[](double x) { return vec2(1.0 / x, x); }, [](double x) { return vec2(x * x, 1.0 / (x * x)); }};
      s.emulator_box = {vec2(-4.0, 0.0), vec2(2.0, 5.0)};
      s.emulator_theta_levels = {3, 5};
      ComputerModel m(
          "sim3", 1, 2, 1, {Eigen::VectorXd::Constant(2, -10.0), Eigen::VectorXd::Constant(2, 10.0)},
          [](const Eigen::VectorXd& x, const Eigen::VectorXd& t) {
            return vec1(t(0) * x(0) + t(1) * x(0) * x(0));
          },
          [](const Eigen::VectorXd& x, const Eigen::VectorXd&) {
            Eigen::MatrixXd g(1, 2);
            g << x(0), x(0) * x(0);
            return g;
          });
      return {m, s};
    }
    case 4: {
      s.lower = 1.0;
      s.upper = 2.0;
      s.sigma = 0.2;
      s.zeta = [](double x) { return x * x * x; };
      s.witnesses = {[](double) { return vec2(1.0, 3.0); }, [](double x) { return vec2(x, 2.0); },
                     [](double x) { return vec2(x * x * x, 0.0); }};
      s.emulator_box = {vec2(0.5, 2.0), vec2(1.5, 4.0)};
      s.emulator_theta_levels = {3, 5};
      ComputerModel m(
          "sim4", 1, 2, 1, {Eigen::VectorXd::Constant(2, -10.0), Eigen::VectorXd::Constant(2, 10.0)},
          [](const Eigen::VectorXd& x, const Eigen::VectorXd& t) { return vec1(t(0) * std::pow(x(0), t(1))); },
          [](const Eigen::VectorXd& x, const Eigen::VectorXd& t) {
            const double p = std::pow(x(0), t(1));
            Eigen::MatrixXd g(1, 2);
            g << p, t(0) * p * std::log(x(0));
            return g;
          });
      return {m, s};
    }
    default:
      throw UsageError("unknown builtin setting " + std::to_string(id) + " (expected 1..4)");
  }
}

/// Builtin model by CLI name `sim1`..`sim4`.
inline std::pair<ComputerModel, BenchmarkSetting> builtin(const std::string& name) {
  if (name.size() == 4 && name.rfind("sim", 0) == 0 && name[3] >= '1' && name[3] <= '4') return builtin(name[3] - '0');
  throw UsageError("unknown builtin model '" + name + "' (expected sim1..sim4)");
}

/// n design points uniform on the domain with y = zeta(x) + sigma z, z ~ N(0,1).
inline PhysicalDataset sample_physical(const BenchmarkSetting& setting, Eigen::Index n, std::uint64_t seed,
                                       std::optional<double> sigma = std::nullopt) {
  if (n < 1) throw UsageError("sample size must be at least 1");
  Rng rng = make_rng(seed, 0x5eed);
  std::uniform_real_distribution<double> unif(setting.lower, setting.upper);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double sd = sigma.value_or(setting.sigma);
  PhysicalDataset data{Eigen::MatrixXd(n, 1), Eigen::MatrixXd(n, 1), detail::vec1(setting.lower),
                       detail::vec1(setting.upper)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = unif(rng);
    data.x(i, 0) = x;
    data.y(i, 0) = setting.zeta(x) + sd * normal(rng);
  }
  return data;
}

}  // namespace fcal
