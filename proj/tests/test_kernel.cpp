#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pgpr/kernel.hpp"

using namespace pgpr;

namespace {

InputPoint pt(std::vector<double> f, PointId id, DomainId dom = kTrainDomain) {
  return {Eigen::Map<VectorXd>(f.data(), Eigen::Index(f.size())), id, dom};
}

} // namespace

TEST(Covariance, SamePointGetsNoise) {
  const Hyperparameters h{1.0, 0.1, {1.0}};
  EXPECT_DOUBLE_EQ(covariance(pt({0.3}, 4), pt({0.3}, 4), h), 1.1);
}

TEST(Covariance, DistinctIdsUnitDistance) {
  const Hyperparameters h{1.0, 0.1, {1.0}};
  EXPECT_NEAR(covariance(pt({0.0}, 0), pt({1.0}, 1), h), std::exp(-0.5), 1e-15);
}

TEST(Covariance, ArdLengthScales) {
  const Hyperparameters h{2.0, 0.1, {2.0, 1.0}};
  EXPECT_NEAR(covariance(pt({1, 2}, 0), pt({3, 1}, 1), h), 2.0 * std::exp(-1.0), 1e-15);
}

TEST(Covariance, SameIdDifferentDomainHasNoNoise) {
  const Hyperparameters h{1.0, 0.1, {1.0}};
  EXPECT_DOUBLE_EQ(covariance(pt({0.3}, 4, kTrainDomain), pt({0.3}, 4, kTestDomain), h), 1.0);
}

TEST(Covariance, DuplicateFeaturesDistinctIds) {
  const Hyperparameters h{1.0, 0.1, {1.0}};
  EXPECT_DOUBLE_EQ(covariance(pt({0.3}, 1), pt({0.3}, 2), h), 1.0);
}

TEST(Covariance, DimensionMismatchThrows) {
  const Hyperparameters h{1.0, 0.1, {1.0, 1.0}};
  EXPECT_THROW(covariance(pt({0.3}, 1), pt({0.3}, 2), h), DimensionError);
}

TEST(CovMatrix, SingletonSelf) {
  const Hyperparameters h{1.5, 0.2, {1.0}};
  const auto a = PointSet::sequential(MatrixXd::Constant(1, 1, 0.7), kTrainDomain);
  const MatrixXd k = cov_matrix(a, a, h);
  ASSERT_EQ(k.rows(), 1);
  EXPECT_DOUBLE_EQ(k(0, 0), 1.7);
}

TEST(CovMatrix, WellSeparatedPoints) {
  const Hyperparameters h{1.0, 0.1, {0.01}};
  MatrixXd x(2, 1);
  x << 0.0, 1.0;
  const auto a = PointSet::sequential(x, kTrainDomain);
  const MatrixXd k = cov_matrix(a, a, h);
  EXPECT_DOUBLE_EQ(k(0, 0), 1.1);
  EXPECT_DOUBLE_EQ(k(1, 1), 1.1);
  EXPECT_LT(std::abs(k(0, 1)), 1e-300);
}

TEST(CovMatrix, MatchesEntrywiseLoop) {
  auto [d, u] = oracle::random_problem(5, 4, 3, 11);
  const auto h = oracle::hyper(3, 0.4);
  EXPECT_LT(oracle::max_abs(cov_matrix(d.inputs, d.inputs, h), oracle::cov(d.inputs, d.inputs, h)), 1e-15);
  EXPECT_LT(oracle::max_abs(cov_matrix(d.inputs, u.inputs, h), oracle::cov(d.inputs, u.inputs, h)), 1e-15);
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < d.size(); ++j)
      EXPECT_DOUBLE_EQ(cov_matrix(d.inputs, d.inputs, h)(Eigen::Index(i), Eigen::Index(j)),
                       covariance(d.inputs.point(i), d.inputs.point(j), h));
}

TEST(CovMatrix, SubsetViewsShareNoiseOnCommonIds) {
  auto [d, u] = oracle::random_problem(6, 1, 2, 3);
  const auto h = oracle::hyper(2);
  const auto a = d.inputs.subset({0, 1, 2, 3});
  const auto b = d.inputs.subset({2, 3, 4});
  EXPECT_LT(oracle::max_abs(cov_matrix(a, b, h), oracle::cov(a, b, h)), 1e-15);
  EXPECT_DOUBLE_EQ(cov_matrix(a, b, h)(2, 0), h.prior_variance());
}

TEST(CovMatrix, SymmetricTransposeAndPositiveDefinite) {
  auto [d, u] = oracle::random_problem(30, 7, 2, 5);
  const auto h = oracle::hyper(2);
  const MatrixXd k = cov_matrix(d.inputs, d.inputs, h);
  EXPECT_EQ(k, k.transpose());
  EXPECT_EQ(cov_matrix(d.inputs, u.inputs, h), cov_matrix(u.inputs, d.inputs, h).transpose());
  Eigen::LLT<MatrixXd> llt(k);
  EXPECT_EQ(llt.info(), Eigen::Success);
}

TEST(CovMatrix, ShrinkingLengthScaleNeverRaisesOffDiagonal) {
  auto [d, u] = oracle::random_problem(12, 1, 3, 8);
  Hyperparameters h = oracle::hyper(3, 0.5);
  const MatrixXd before = cov_matrix(d.inputs, d.inputs, h);
  h.length_scales[1] = 0.2;
  const MatrixXd after = cov_matrix(d.inputs, d.inputs, h);
  for (Eigen::Index i = 0; i < before.rows(); ++i)
    for (Eigen::Index j = 0; j < before.cols(); ++j)
      if (i != j) {
        EXPECT_LE(after(i, j), before(i, j));
      }
}

TEST(Hyperparameters, ValidateRejectsNonPositive) {
  EXPECT_THROW((Hyperparameters{0.0, 0.1, {1.0}}.validate()), InvalidArgument);
  EXPECT_THROW((Hyperparameters{1.0, -0.1, {1.0}}.validate()), InvalidArgument);
  EXPECT_THROW((Hyperparameters{1.0, 0.1, {1.0, 0.0}}.validate()), InvalidArgument);
  EXPECT_THROW((Hyperparameters{1.0, 0.1, {}}.validate()), InvalidArgument);
}

TEST(Hyperparameters, ConfigRoundTrip) {
  const Hyperparameters h{1.25, 0.0625, {0.1, 0.30000000000000004, 7.0}};
  std::stringstream ss;
  write_hyperparameters(ss, h);
  const Hyperparameters back = read_hyperparameters(ss);
  EXPECT_EQ(back.signal_variance, h.signal_variance);
  EXPECT_EQ(back.noise_variance, h.noise_variance);
  EXPECT_EQ(back.length_scales, h.length_scales);
}

TEST(Hyperparameters, ConfigCommentsAndErrors) {
  std::stringstream ok("# comment\nsignal_variance = 2\nnoise_variance=0.5 # trailing\nlength_scales = 1, 2\n");
  const auto h = read_hyperparameters(ok);
  EXPECT_EQ(h.signal_variance, 2.0);
  EXPECT_EQ(h.length_scales, (std::vector<double>{1.0, 2.0}));
  std::stringstream missing("signal_variance = 2\nnoise_variance = 1\n");
  EXPECT_THROW(read_hyperparameters(missing), InvalidArgument);
  std::stringstream no_eq("signal_variance 2\n");
  EXPECT_THROW(read_hyperparameters(no_eq), InvalidArgument);
}

TEST(Dataset, ValidateCatchesDuplicatesAndLengths) {
  Dataset d{PointSet(MatrixXd::Zero(2, 1), {1, 1}, kTrainDomain), std::nullopt, std::nullopt};
  EXPECT_THROW(d.validate(), InvalidArgument);
  Dataset e{PointSet::sequential(MatrixXd::Zero(2, 1), kTrainDomain), VectorXd::Zero(3), std::nullopt};
  EXPECT_THROW(e.validate(), DimensionError);
}

TEST(PriorMean, DefaultsToTrainingMean) {
  auto [d, u] = oracle::random_problem(10, 3, 1, 2);
  const auto m = resolve_means(d, u);
  ASSERT_TRUE(m.constant.has_value());
  EXPECT_DOUBLE_EQ(*m.constant, d.y().mean());
  EXPECT_EQ(m.test, VectorXd::Constant(3, d.y().mean()));
}
