#ifndef PGPR_FULLGP_HPP_
#define PGPR_FULLGP_HPP_

#include <algorithm>
#include <optional>
#include <vector>

#include <Eigen/Eigenvalues>

#include "pgpr/kernel.hpp"
#include "pgpr/linalg.hpp"

namespace pgpr {

struct PredictOptions {
  bool full_covariance = false;
  double jitter = kDefaultJitter;
};

/// Gaussian predictive distribution over an ordered set of test inputs.
struct PredictiveDistribution {
  VectorXd mean;
  /// Always present; the diagonal of `covariance` when that is computed.
  VectorXd variance;
  std::optional<MatrixXd> covariance;
  /// False when some predictive variance is negative (or, with a full
  /// covariance, an eigenvalue is negative beyond tolerance). Only the ICF
  /// family can produce this.
  bool psd_valid = true;
  std::size_t negative_variance_count = 0;
  double most_negative_variance = 0.0;
  std::vector<PointId> ordering;

  std::size_t size() const { return static_cast<std::size_t>(mean.size()); }
};

/// Recomputes the validity fields from `variance` (and `covariance`).
inline void update_psd_flag(PredictiveDistribution &p) {
  p.negative_variance_count = 0;
  p.most_negative_variance = 0.0;
  for (Eigen::Index i = 0; i < p.variance.size(); ++i) {
    if (p.variance(i) < 0.0) {
      ++p.negative_variance_count;
      p.most_negative_variance = std::min(p.most_negative_variance, p.variance(i));
    }
  }
  p.psd_valid = p.negative_variance_count == 0;
  if (p.psd_valid && p.covariance && p.covariance->size() > 0) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(*p.covariance,
                                                Eigen::EigenvaluesOnly);
    const double scale = std::max(1.0, p.covariance->cwiseAbs().maxCoeff());
    if (eig.eigenvalues().minCoeff() < -1e-8 * scale) {
      p.psd_valid = false;
    }
  }
}

/// Exact GP posterior of `test` given `train`.
inline PredictiveDistribution fgp_predict(const Dataset &train,
                                          const Dataset &test,
                                          const Hyperparameters &h,
                                          const PredictOptions &opt = {}) {
  h.validate();
  train.validate();
  test.validate();
  if (test.empty()) {
    throw InvalidArgument("fgp_predict: empty test set");
  }
  if (train.empty()) {
    throw InvalidArgument("fgp_predict: empty training set");
  }
  const ResolvedMeans mu = resolve_means(train, test);
  const Cholesky k_dd(cov_matrix(train.inputs, train.inputs, h), opt.jitter,
                      "Sigma_DD");
  const MatrixXd k_du = cov_matrix(train.inputs, test.inputs, h);

  PredictiveDistribution out;
  out.ordering = test.inputs.ids;
  const VectorXd residual = train.y() - mu.train;
  out.mean = mu.test + k_du.transpose() * k_dd.solve(residual);

  const MatrixXd v = k_dd.half_solve(k_du);
  if (opt.full_covariance) {
    MatrixXd cov = cov_matrix(test.inputs, test.inputs, h);
    cov.noalias() -= v.transpose() * v;
    out.covariance = symmetrize(cov);
    out.variance = out.covariance->diagonal();
  } else {
    out.variance =
        prior_variances(test.inputs, h) - v.colwise().squaredNorm().transpose();
  }
  update_psd_flag(out);
  return out;
}

} // namespace pgpr

#endif
