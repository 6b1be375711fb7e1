#ifndef PGPR_LINALG_HPP_
#define PGPR_LINALG_HPP_

#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "pgpr/errors.hpp"

namespace pgpr {

/// Cholesky factor of a symmetric positive definite matrix with jitter added
/// to its diagonal. Throws ConditioningError naming `what` on failure.
class Cholesky {
public:
  Cholesky() = default;

  Cholesky(Eigen::MatrixXd m, double jitter, const std::string &what) {
    if (m.rows() != m.cols()) {
      throw DimensionError(what + " is not square");
    }
    if (!m.allFinite()) {
      throw ConditioningError(what, "non-finite entries");
    }
    if (jitter > 0.0) {
      m.diagonal().array() += jitter;
    }
    llt_.compute(m);
    if (llt_.info() != Eigen::Success) {
      throw ConditioningError(what, "Cholesky factorization failed");
    }
  }

  Eigen::Index size() const { return llt_.rows(); }

  Eigen::MatrixXd solve(const Eigen::MatrixXd &b) const { return llt_.solve(b); }
  Eigen::VectorXd solve(const Eigen::VectorXd &b) const { return llt_.solve(b); }

  /// Solves one column at a time so that each column's result does not depend
  /// on how many other columns are solved alongside it.
  Eigen::MatrixXd solve_columnwise(const Eigen::MatrixXd &b) const {
    Eigen::MatrixXd out(b.rows(), b.cols());
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      Eigen::VectorXd col = b.col(j);
      out.col(j) = llt_.solve(col);
    }
    return out;
  }

  /// L^{-1} b, so that b^T A^{-1} b = |L^{-1} b|^2.
  Eigen::MatrixXd half_solve(const Eigen::MatrixXd &b) const {
    return llt_.matrixL().solve(b);
  }

  Eigen::MatrixXd inverse() const {
    return llt_.solve(Eigen::MatrixXd::Identity(size(), size()));
  }

  const Eigen::LLT<Eigen::MatrixXd> &llt() const { return llt_; }

private:
  Eigen::LLT<Eigen::MatrixXd> llt_;
};

inline Eigen::MatrixXd symmetrize(const Eigen::MatrixXd &m) {
  return 0.5 * (m + m.transpose());
}

} // namespace pgpr

#endif
