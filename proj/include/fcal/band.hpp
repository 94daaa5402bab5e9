#pragma once

#include <Eigen/Dense>

#include <boost/math/distributions/normal.hpp>

#include <string>

#include "fcal/errors.hpp"

namespace fcal {

/// Upper (1 - level)/2 quantile of the standard normal, e.g. 1.645 for level 0.90.
inline double z_quantile(double level) {
  if (!(level > 0.0 && level < 1.0)) throw UsageError("confidence level must lie in (0, 1)");
  static const boost::math::normal_distribution<double> standard;
  return boost::math::quantile(boost::math::complement(standard, 0.5 * (1.0 - level)));
}

/// Pointwise band over an evaluation grid.
struct ConfidenceBand {
  Eigen::MatrixXd grid;  // m x d
  Eigen::VectorXd center;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  double level = 0.9;
  double sigma2 = 0.0;
  double rho = 0.0;
  /// "theta1", "theta2", ... or "prediction".
  std::string target;
  /// False for theta bands of non-identified problems.
  bool interpretable = true;
  /// Number of grid points where the delta method had a zero gradient.
  int degenerate_points = 0;

  [[nodiscard]] Eigen::Index size() const { return center.size(); }

  static ConfidenceBand from_sd(Eigen::MatrixXd grid, Eigen::VectorXd center, const Eigen::VectorXd& sd, double level,
                                std::string target) {
    ConfidenceBand b;
    const double z = z_quantile(level);
    b.grid = std::move(grid);
    b.lower = center - z * sd;
    b.upper = center + z * sd;
    b.center = std::move(center);
    b.level = level;
    b.target = std::move(target);
    return b;
  }
};

}  // namespace fcal
