#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "fcal/errors.hpp"

namespace fcal {

/// Physical observations y_i = zeta(x_i) + e_i.
struct PhysicalDataset {
  Eigen::MatrixXd x;      // n x d design
  Eigen::MatrixXd y;      // n x r responses
  Eigen::VectorXd lower;  // domain bounds, length d
  Eigen::VectorXd upper;

  [[nodiscard]] Eigen::Index size() const { return x.rows(); }
  [[nodiscard]] Eigen::Index input_dim() const { return x.cols(); }
  [[nodiscard]] Eigen::Index response_dim() const { return y.cols(); }

  /// Throws DataError on shape mismatch, non-finite values or points outside the bounds.
  void validate() const {
    if (x.rows() != y.rows()) throw DataError("design and response row counts differ");
    if (lower.size() != x.cols() || upper.size() != x.cols()) throw DataError("domain bounds do not match input dimension");
    if (!x.allFinite() || !y.allFinite()) throw DataError("physical data contain non-finite values");
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      for (Eigen::Index c = 0; c < x.cols(); ++c) {
        if (x(i, c) < lower(c) || x(i, c) > upper(c)) {
          throw DataError("design point " + std::to_string(i) + " lies outside the domain");
        }
      }
    }
  }

  /// Subset of rows, keeping the domain.
  template <class Indices>
  [[nodiscard]] PhysicalDataset subset(const Indices& rows) const {
    PhysicalDataset out{Eigen::MatrixXd(static_cast<Eigen::Index>(rows.size()), x.cols()),
                        Eigen::MatrixXd(static_cast<Eigen::Index>(rows.size()), y.cols()), lower, upper};
    Eigen::Index k = 0;
    for (auto i : rows) {
      out.x.row(k) = x.row(static_cast<Eigen::Index>(i));
      out.y.row(k) = y.row(static_cast<Eigen::Index>(i));
      ++k;
    }
    return out;
  }
};

}  // namespace fcal
