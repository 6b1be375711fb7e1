#ifndef PGPR_HARNESS_SYNTHETIC_HPP_
#define PGPR_HARNESS_SYNTHETIC_HPP_

#include <cstdint>
#include <random>
#include <utility>

#include "pgpr/kernel.hpp"
#include "pgpr/linalg.hpp"

namespace pgpr {

/// Largest joint size generate_synthetic will factorize densely.
inline constexpr std::size_t kMaxDenseSample = 8192;

/// One joint draw of noisy outputs at `points` from the GP prior with
/// constant mean `mean`.
inline VectorXd sample_gp_outputs(const PointSet &points,
                                  const Hyperparameters &h, double mean,
                                  std::mt19937_64 &rng) {
  if (points.size() > kMaxDenseSample) {
    throw InvalidArgument("dense sampling infeasible for " +
                          std::to_string(points.size()) + " points (limit " +
                          std::to_string(kMaxDenseSample) + ")");
  }
  const Cholesky k(cov_matrix(points, points, h), kDefaultJitter, "joint prior");
  std::normal_distribution<double> normal(0.0, 1.0);
  VectorXd z(static_cast<Eigen::Index>(points.size()));
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = normal(rng);
  VectorXd y = k.llt().matrixL() * z;
  y.array() += mean;
  return y;
}

/// Train/test pair with inputs uniform in [0,1]^d and outputs drawn jointly
/// from the GP prior, so the model is well specified. Test outputs are
/// the held-out truth.
inline std::pair<Dataset, Dataset>
generate_synthetic(std::size_t n_train, std::size_t n_test, std::size_t d,
                   const Hyperparameters &h, std::uint64_t seed,
                   double mean = 0.0) {
  h.validate();
  detail::check_dim(d, h);
  if (n_train == 0) {
    throw InvalidArgument("generate_synthetic: need at least one training point");
  }
  if (n_train + n_test > kMaxDenseSample) {
    throw InvalidArgument("dense sampling infeasible for " +
                          std::to_string(n_train + n_test) + " points (limit " +
                          std::to_string(kMaxDenseSample) + ")");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const auto dd = static_cast<Eigen::Index>(d);
  MatrixXd xd(static_cast<Eigen::Index>(n_train), dd);
  MatrixXd xu(static_cast<Eigen::Index>(n_test), dd);
  for (Eigen::Index i = 0; i < xd.rows(); ++i)
    for (Eigen::Index k = 0; k < dd; ++k) xd(i, k) = unif(rng);
  for (Eigen::Index i = 0; i < xu.rows(); ++i)
    for (Eigen::Index k = 0; k < dd; ++k) xu(i, k) = unif(rng);

  // One joint draw over D and U. Ids are unique across the two parts so
  // every point gets its own noise term.
  MatrixXd all(xd.rows() + xu.rows(), dd);
  all << xd, xu;
  const VectorXd y = sample_gp_outputs(PointSet::sequential(all, kTrainDomain), h, mean, rng);

  Dataset train;
  train.inputs = PointSet::sequential(std::move(xd), kTrainDomain);
  train.outputs = y.head(static_cast<Eigen::Index>(n_train));
  Dataset test;
  test.inputs = PointSet::sequential(std::move(xu), kTestDomain);
  test.outputs = y.tail(static_cast<Eigen::Index>(n_test));
  return {std::move(train), std::move(test)};
}

} // namespace pgpr

#endif
