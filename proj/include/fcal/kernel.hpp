#pragma once

// Reproducing kernels for the calibration-function space, their null-space
// bases and the matrices built from them.

#include <Eigen/Dense>

#include <cmath>
#include <locale>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fcal/errors.hpp"

namespace fcal {

/// Matern kernel normalized to 1 at zero distance:
///   Phi(s,t) = (2 sqrt(nu) phi r)^nu K_nu(2 sqrt(nu) phi r) / (Gamma(nu) 2^(nu-1)),  r = |s - t|.
struct Matern {
  double smoothness = 1.5;
  double scale = 1.0;
};

/// Reproducing kernel of the cubic smoothing spline (second-order Sobolev space
/// with the two-dimensional null space of linear functions):
///   k2(x,y) = B2(x) B2(y) / 4 - B4(|x - y|) / 24   on [0,1].
/// Inputs live on [lower, upper] and are mapped affinely onto [0,1].
struct SobolevCubic {
  double lower = 0.0;
  double upper = 1.0;

  [[nodiscard]] double to_unit(double x) const { return (x - lower) / (upper - lower); }
};

/// k(s,t) = variance * exp(-0.5 * sum_d ((s_d - t_d) / lengthscale_d)^2)
struct SquaredExponential {
  Eigen::VectorXd lengthscales;
  double variance = 1.0;
};

namespace detail {

inline double bernoulli2(double x) { return x * x - x + 1.0 / 6.0; }
inline double bernoulli4(double x) {
  const double x2 = x * x;
  return x2 * x2 - 2.0 * x2 * x + x2 - 1.0 / 30.0;
}

inline double matern_closed_or_bessel(double nu, double z) {
  if (z <= 0.0) return 1.0;
  if (nu == 0.5) return std::exp(-z);
  if (nu == 1.5) return (1.0 + z) * std::exp(-z);
  if (nu == 2.5) return (1.0 + z + z * z / 3.0) * std::exp(-z);
  if (z > 700.0) return 0.0;
  // log-space to keep z^nu / Gamma(nu) finite for large nu
  const double log_front = nu * std::log(z) - std::lgamma(nu) - (nu - 1.0) * std::numbers::ln2;
  const double k = std::cyl_bessel_k(nu, z);
  if (k == 0.0) return 0.0;
  return std::exp(log_front + std::log(k));
}

constexpr double kUnitTolerance = 1e-12;

}  // namespace detail

/// Finite-dimensional null space of the native-space seminorm, {v_1, ..., v_k}.
struct NullBasis {
  enum class Kind { constant, linear_unit };
  Kind kind = Kind::constant;
  double lower = 0.0;  // affine map for linear_unit: t = (x - lower) / (upper - lower)
  double upper = 1.0;

  [[nodiscard]] int dim() const { return kind == Kind::constant ? 1 : 2; }

  /// v_s(x) for every s. For linear_unit: {1, t - 1/2}.
  [[nodiscard]] Eigen::VectorXd eval(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    Eigen::VectorXd v(dim());
    v(0) = 1.0;
    if (kind == Kind::linear_unit) v(1) = (x(0) - lower) / (upper - lower) - 0.5;
    return v;
  }
};

class Kernel {
 public:
  using Variant = std::variant<Matern, SobolevCubic, SquaredExponential>;

  Kernel() : Kernel(SobolevCubic{}) {}
  explicit Kernel(Variant v) : v_(std::move(v)) { validate(); }

  static Kernel matern(double smoothness, double scale) { return Kernel(Matern{smoothness, scale}); }
  static Kernel sobolev_cubic(double lower = 0.0, double upper = 1.0) {
    return Kernel(SobolevCubic{lower, upper});
  }
  static Kernel squared_exponential(Eigen::VectorXd lengthscales, double variance) {
    return Kernel(SquaredExponential{std::move(lengthscales), variance});
  }

  [[nodiscard]] const Variant& variant() const { return v_; }
  [[nodiscard]] bool is_sobolev_cubic() const { return std::holds_alternative<SobolevCubic>(v_); }

  /// Phi(s, t); symmetric in its arguments.
  [[nodiscard]] double operator()(const Eigen::Ref<const Eigen::VectorXd>& s,
                                  const Eigen::Ref<const Eigen::VectorXd>& t) const {
    return std::visit([&](const auto& k) { return eval_impl(k, s, t); }, v_);
  }

  [[nodiscard]] NullBasis null_basis() const {
    if (const auto* c = std::get_if<SobolevCubic>(&v_)) {
      return NullBasis{NullBasis::Kind::linear_unit, c->lower, c->upper};
    }
    return NullBasis{};
  }

  /// Same kernel with the SobolevCubic domain map replaced (no-op for other kernels).
  [[nodiscard]] Kernel with_domain(double lower, double upper) const {
    if (is_sobolev_cubic()) return sobolev_cubic(lower, upper);
    return *this;
  }

  /// The CLI kernel string: `matern:<nu>:<phi>`, `cubic`, `sqexp:<l1,...,lk>:<var>`.
  [[nodiscard]] std::string spec() const {
    std::ostringstream os;
    os.precision(17);
    if (const auto* m = std::get_if<Matern>(&v_)) {
      os << "matern:" << m->smoothness << ':' << m->scale;
    } else if (const auto* se = std::get_if<SquaredExponential>(&v_)) {
      os << "sqexp:";
      for (Eigen::Index i = 0; i < se->lengthscales.size(); ++i) os << (i ? "," : "") << se->lengthscales(i);
      os << ':' << se->variance;
    } else {
      os << "cubic";
    }
    return os.str();
  }

 private:
  void validate() const {
    if (const auto* m = std::get_if<Matern>(&v_)) {
      if (!(m->smoothness > 0.0) || !(m->scale > 0.0)) {
        throw ParameterError("Matern kernel needs smoothness > 0 and scale > 0");
      }
    } else if (const auto* se = std::get_if<SquaredExponential>(&v_)) {
      if (se->lengthscales.size() == 0 || !(se->lengthscales.array() > 0.0).all() || !(se->variance > 0.0)) {
        throw ParameterError("squared-exponential kernel needs positive lengthscales and variance");
      }
    } else {
      const auto& c = std::get<SobolevCubic>(v_);
      if (!(c.upper > c.lower)) throw ParameterError("cubic kernel domain must satisfy lower < upper");
    }
  }

  static double eval_impl(const Matern& m, const Eigen::Ref<const Eigen::VectorXd>& s,
                          const Eigen::Ref<const Eigen::VectorXd>& t) {
    const double r = (s - t).norm();
    return detail::matern_closed_or_bessel(m.smoothness, 2.0 * std::sqrt(m.smoothness) * m.scale * r);
  }

  static double eval_impl(const SobolevCubic& c, const Eigen::Ref<const Eigen::VectorXd>& s,
                          const Eigen::Ref<const Eigen::VectorXd>& t) {
    const double x = c.to_unit(s(0));
    const double y = c.to_unit(t(0));
    constexpr double tol = detail::kUnitTolerance;
    if (x < -tol || x > 1.0 + tol || y < -tol || y > 1.0 + tol) {
      throw DomainError("cubic kernel input outside its domain [" + std::to_string(c.lower) + ", " +
                        std::to_string(c.upper) + "]");
    }
    return 0.25 * detail::bernoulli2(x) * detail::bernoulli2(y) - detail::bernoulli4(std::abs(x - y)) / 24.0;
  }

  static double eval_impl(const SquaredExponential& k, const Eigen::Ref<const Eigen::VectorXd>& s,
                          const Eigen::Ref<const Eigen::VectorXd>& t) {
    const double q = ((s - t).array() / k.lengthscales.array()).square().sum();
    return k.variance * std::exp(-0.5 * q);
  }

  Variant v_;
};

inline double kernel_eval(const Kernel& k, const Eigen::Ref<const Eigen::VectorXd>& s,
                          const Eigen::Ref<const Eigen::VectorXd>& t) {
  return k(s, t);
}

/// Gram matrix over the rows of `pts`.
inline Eigen::MatrixXd gram(const Kernel& k, const Eigen::MatrixXd& pts) {
  const Eigen::Index n = pts.rows();
  Eigen::MatrixXd g(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd pi = pts.row(i).transpose();
    for (Eigen::Index j = 0; j <= i; ++j) {
      g(i, j) = k(pi, pts.row(j).transpose());
      g(j, i) = g(i, j);
    }
  }
  return g;
}

/// (k(a_i, b_j))_{ij}
inline Eigen::MatrixXd cross_gram(const Kernel& k, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd g(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const Eigen::VectorXd ai = a.row(i).transpose();
    for (Eigen::Index j = 0; j < b.rows(); ++j) g(i, j) = k(ai, b.row(j).transpose());
  }
  return g;
}

/// phi(x) = (k(x, a_1), ..., k(x, a_n))
inline Eigen::VectorXd kernel_row(const Kernel& k, const Eigen::Ref<const Eigen::VectorXd>& x,
                                  const Eigen::MatrixXd& anchors) {
  Eigen::VectorXd out(anchors.rows());
  for (Eigen::Index i = 0; i < anchors.rows(); ++i) out(i) = k(x, anchors.row(i).transpose());
  return out;
}

/// Gram matrix with 1e-10 * mean(diag) added to the diagonal.
inline Eigen::MatrixXd jittered(Eigen::MatrixXd g, double relative = 1e-10) {
  if (g.rows() == 0) return g;
  const double j = relative * g.diagonal().mean();
  g.diagonal().array() += j;
  return g;
}

/// V = (v_s(x_i)), an n x k matrix.
inline Eigen::MatrixXd null_design(const NullBasis& basis, const Eigen::MatrixXd& pts) {
  Eigen::MatrixXd v(pts.rows(), basis.dim());
  for (Eigen::Index i = 0; i < pts.rows(); ++i) v.row(i) = basis.eval(pts.row(i).transpose()).transpose();
  return v;
}

namespace detail {

inline double parse_positive(std::string_view text, const char* what) {
  std::istringstream is{std::string(text)};
  is.imbue(std::locale::classic());
  double v = 0.0;
  is >> v;
  if (is.fail() || !is.eof()) throw UsageError(std::string("cannot parse ") + what + " '" + std::string(text) + "'");
  return v;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

/// Parses `matern:<nu>:<phi>`, `cubic`, `sqexp:<l1,...,lk>:<var>`. The cubic kernel
/// gets the domain [lower, upper] attached.
inline Kernel parse_kernel_spec(std::string_view spec, double lower = 0.0, double upper = 1.0) {
  const auto parts = detail::split(spec, ':');
  if (parts[0] == "cubic" && parts.size() == 1) return Kernel::sobolev_cubic(lower, upper);
  if (parts[0] == "matern" && parts.size() == 3) {
    return Kernel::matern(detail::parse_positive(parts[1], "Matern smoothness"),
                          detail::parse_positive(parts[2], "Matern scale"));
  }
  if (parts[0] == "sqexp" && parts.size() == 3) {
    const auto ls = detail::split(parts[1], ',');
    Eigen::VectorXd l(static_cast<Eigen::Index>(ls.size()));
    for (std::size_t i = 0; i < ls.size(); ++i) l(static_cast<Eigen::Index>(i)) = detail::parse_positive(ls[i], "lengthscale");
    return Kernel::squared_exponential(l, detail::parse_positive(parts[2], "variance"));
  }
  throw UsageError("unknown kernel spec '" + std::string(spec) + "' (expected matern:<nu>:<phi>, cubic, sqexp:<l1,..>:<var>)");
}

}  // namespace fcal
