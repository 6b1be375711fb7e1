#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "pgpr/centralized.hpp"

using namespace pgpr;

namespace {

// Shuffled positions dealt round-robin into m blocks.
BlockStructure shuffled_blocks(std::size_t nd, std::size_t nu, std::size_t m, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  auto deal = [&](std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    std::shuffle(p.begin(), p.end(), g);
    std::vector<std::vector<std::size_t>> out(m);
    for (std::size_t i = 0; i < n; ++i) out[i % m].push_back(p[i]);
    return out;
  };
  BlockStructure b;
  b.train = deal(nd);
  b.test = deal(nu);
  return b;
}

double rel(const MatrixXd &a, const MatrixXd &b) {
  return oracle::max_abs(a, b) / std::max(1.0, b.cwiseAbs().maxCoeff());
}

} // namespace

TEST(Pitc, MatchesDenseDefinition) {
  auto [d, u] = oracle::random_problem(64, 12, 2, 3);
  const auto h = oracle::hyper(2);
  const auto s = select_support(d.inputs, 8, h);
  const auto b = shuffled_blocks(64, 12, 4, 1);
  const auto p = pitc_predict(d, u, s, b, h, {true});
  const auto o = oracle::pitc_pic(d, u, s.inputs, b, h, false);
  EXPECT_LT(rel(p.mean, o.mean), 1e-8);
  EXPECT_LT(rel(*p.covariance, o.cov), 1e-8);
}

TEST(Pic, MatchesDenseDefinition) {
  auto [d, u] = oracle::random_problem(64, 12, 3, 4);
  const auto h = oracle::hyper(3, 0.4);
  const auto s = select_support(d.inputs, 8, h);
  const auto b = shuffled_blocks(64, 12, 4, 2);
  const auto p = pic_predict(d, u, s, b, h, {true});
  const auto o = oracle::pitc_pic(d, u, s.inputs, b, h, true);
  EXPECT_LT(rel(p.mean, o.mean), 1e-8);
  EXPECT_LT(rel(*p.covariance, o.cov), 1e-8);
}

TEST(Pic, VarianceOnlyPathAgreesWithFullCovariance) {
  auto [d, u] = oracle::random_problem(48, 9, 2, 5);
  const auto h = oracle::hyper(2);
  const auto s = select_support(d.inputs, 6, h);
  const auto b = shuffled_blocks(48, 9, 3, 3);
  const auto full = pic_predict(d, u, s, b, h, {true});
  const auto diag = pic_predict(d, u, s, b, h);
  EXPECT_LT(oracle::max_abs(diag.variance, full.variance), 1e-12);
  const auto tfull = pitc_predict(d, u, s, b, h, {true});
  const auto tdiag = pitc_predict(d, u, s, b, h);
  EXPECT_LT(oracle::max_abs(tdiag.variance, tfull.variance), 1e-12);
}

TEST(Pic, EmptyTestBlockFallsBackToPitcRows) {
  auto [d, u] = oracle::random_problem(30, 4, 2, 6);
  const auto h = oracle::hyper(2);
  const auto s = select_support(d.inputs, 5, h);
  BlockStructure b = BlockStructure::even(30, 4, 2);
  b.test = {{}, {0, 1, 2, 3}};
  const auto pic = pic_predict(d, u, s, b, h, {true});
  const auto o = oracle::pitc_pic(d, u, s.inputs, b, h, true);
  EXPECT_LT(rel(pic.mean, o.mean), 1e-8);
}

TEST(SingleBlock, PicCollapsesToFgp) {
  auto [d, u] = oracle::random_problem(40, 10, 2, 7);
  const auto h = oracle::hyper(2);
  const auto s = select_support(d.inputs, 6, h);
  const auto p = pic_predict(d, u, s, BlockStructure::even(40, 10, 1), h, {true});
  const auto f = oracle::fgp(d, u, h);
  EXPECT_LT(oracle::max_abs(p.mean, f.mean) / f.mean.cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT(oracle::max_abs(*p.covariance, f.cov) / f.cov.cwiseAbs().maxCoeff(), 1e-8);
}

// One block makes the training matrix exact, but the test side still goes
// through the support set.
TEST(SingleBlock, PitcKeepsLowRankTestCovariance) {
  auto [d, u] = oracle::random_problem(40, 10, 2, 7);
  const auto h = oracle::hyper(2);
  const auto s = select_support(d.inputs, 6, h);
  const auto p = pitc_predict(d, u, s, BlockStructure::even(40, 10, 1), h, {true});
  const MatrixXd g = oracle::gamma(u.inputs, d.inputs, s.inputs, h);
  const MatrixXd w = oracle::inv(oracle::cov(d.inputs, d.inputs, h));
  const double mu = d.y().mean();
  const VectorXd mean = VectorXd::Constant(10, mu) + g * w * (d.y().array() - mu).matrix();
  const MatrixXd cov = oracle::cov(u.inputs, u.inputs, h) - g * w * g.transpose();
  EXPECT_LT(rel(p.mean, mean), 1e-8);
  EXPECT_LT(rel(*p.covariance, cov), 1e-8);
  EXPECT_GT(oracle::max_abs(p.mean, oracle::fgp(d, u, h).mean), 1e-3);
}

TEST(SingleBlock, PitcCollapsesToFgpWhenSupportHoldsTheTests) {
  auto [d, u] = oracle::random_problem(40, 10, 2, 7);
  const auto h = oracle::hyper(2);
  // Same domain and ids as the tests, so Sigma_US Sigma_SS^-1 is the identity.
  const SupportSet s{u.inputs, {}};
  const auto p = pitc_predict(d, u, s, BlockStructure::even(40, 10, 1), h, {true});
  const auto f = oracle::fgp(d, u, h);
  EXPECT_LT(oracle::max_abs(p.mean, f.mean) / f.mean.cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT(oracle::max_abs(*p.covariance, f.cov) / f.cov.cwiseAbs().maxCoeff(), 1e-8);
}

TEST(SupportEqualsTrain, PitcMatchesFgp) {
  auto [d, u] = oracle::random_problem(24, 6, 2, 8);
  const auto h = oracle::hyper(2);
  // Sharing the training ids makes every conditional block vanish; the
  // jitter is what keeps Lambda factorizable.
  const SupportSet s{d.inputs, {}};
  const auto b = BlockStructure::even(24, 6, 3);
  const auto p = pitc_predict(d, u, s, b, h, {true, 1e-7});
  const auto f = fgp_predict(d, u, h, {true});
  EXPECT_LT(oracle::max_abs(p.mean, f.mean), 1e-6);
  EXPECT_LT(oracle::max_abs(*p.covariance, *f.covariance), 1e-6);
}

TEST(Pitc, VariancesBelowPrior) {
  auto [d, u] = oracle::random_problem(60, 20, 2, 9);
  const auto h = oracle::hyper(2);
  const auto s = select_support(d.inputs, 10, h);
  const auto b = shuffled_blocks(60, 20, 4, 4);
  for (const auto &p : {pitc_predict(d, u, s, b, h), pic_predict(d, u, s, b, h)}) {
    for (Eigen::Index i = 0; i < p.variance.size(); ++i) {
      EXPECT_LE(p.variance(i), h.prior_variance() + 1e-12);
      EXPECT_GT(p.variance(i), 0.0);
    }
  }
}

TEST(Pitc, LargerSupportTracksFgpBetter) {
  auto [d, u] = oracle::random_problem(200, 40, 2, 10);
  const auto h = oracle::hyper(2, 0.2);
  const auto b = shuffled_blocks(200, 40, 4, 5);
  const auto f = fgp_predict(d, u, h);
  auto err = [&](std::size_t ns) {
    const auto s = select_support(d.inputs, ns, h);
    return (pitc_predict(d, u, s, b, h).mean - f.mean).norm();
  };
  EXPECT_LT(err(64), err(4));
}

TEST(Pitc, EmptySupportAndBadBlocksThrow) {
  auto [d, u] = oracle::random_problem(10, 2, 1, 1);
  const auto h = oracle::hyper(1);
  const SupportSet empty{PointSet(MatrixXd(0, 1), {}, kSupportDomain), {}};
  EXPECT_THROW(pitc_predict(d, u, empty, BlockStructure::even(10, 2, 2), h), InvalidArgument);
  const auto s = select_support(d.inputs, 3, h);
  BlockStructure overlap;
  overlap.train = {{0, 1, 2, 3, 4}, {4, 5, 6, 7, 8, 9}};
  EXPECT_THROW(pitc_predict(d, u, s, overlap, h), InvalidArgument);
  BlockStructure gap;
  gap.train = {{0, 1, 2}, {3, 4, 5, 6, 7, 8}};
  EXPECT_THROW(pitc_predict(d, u, s, gap, h), InvalidArgument);
  BlockStructure no_test = BlockStructure::even(10, 2, 2);
  no_test.test.clear();
  EXPECT_NO_THROW(pitc_predict(d, u, s, no_test, h));
  EXPECT_THROW(pic_predict(d, u, s, no_test, h), InvalidArgument);
}

TEST(BlockStructure, EvenSplitAndValidation) {
  const auto b = BlockStructure::even(10, 3, 3);
  EXPECT_EQ(b.train[0].size(), 3u);
  EXPECT_EQ(b.train[2].size(), 4u);
  EXPECT_EQ(b.test[2].size(), 1u);
  EXPECT_NO_THROW(b.validate(10, 3, true));
  EXPECT_THROW(b.validate(11, 3, true), InvalidArgument);
  EXPECT_THROW(BlockStructure::even(2, 1, 3), InvalidArgument);
  EXPECT_THROW(BlockStructure::even(2, 1, 0), InvalidArgument);
}

TEST(IcfFactorize, MatchesTextbookPivotedCholesky) {
  auto [d, u] = oracle::random_problem(32, 1, 2, 11);
  const auto h = oracle::hyper(2);
  std::vector<std::size_t> piv;
  const MatrixXd want = oracle::pivoted_cholesky(d, h, 8, &piv);
  const auto f = icf_factorize(d, h, 8);
  EXPECT_EQ(f.pivot_order, piv);
  EXPECT_LT(oracle::max_abs(f.factor, want), 1e-12);
  // Residual diagonal of the noise-free kernel after eight pivots.
  const MatrixXd kk = oracle::cov_clean(d.inputs, d.inputs, h);
  const VectorXd resid = kk.diagonal() - want.colwise().squaredNorm().transpose();
  for (auto p : piv) EXPECT_EQ(f.residual_diag(Eigen::Index(p)), 0.0);
  for (Eigen::Index j = 0; j < resid.size(); ++j)
    if (std::find(piv.begin(), piv.end(), std::size_t(j)) == piv.end()) {
      EXPECT_NEAR(f.residual_diag(j), resid(j), 1e-12);
    }
  EXPECT_NEAR((kk - f.factor.transpose() * f.factor).trace(), f.residual_diag.sum(), 1e-10);
}

TEST(IcfFactorize, FullRankReconstructs) {
  auto [d, u] = oracle::random_problem(20, 1, 3, 12);
  const auto h = oracle::hyper(3, 0.5);
  const auto f = icf_factorize(d, h, 20);
  const MatrixXd kk = oracle::cov_clean(d.inputs, d.inputs, h);
  EXPECT_LT(oracle::max_abs(MatrixXd(f.factor.transpose() * f.factor), kk), 1e-8);
}

TEST(IcfFactorize, UpperTriangularInPivotOrder) {
  auto [d, u] = oracle::random_problem(25, 1, 2, 13);
  const auto f = icf_factorize(d, oracle::hyper(2), 10);
  for (std::size_t k = 0; k < f.rank; ++k)
    for (std::size_t l = k + 1; l < f.rank; ++l)
      EXPECT_EQ(f.factor(Eigen::Index(l), Eigen::Index(f.pivot_order[k])), 0.0);
}

TEST(IcfFactorize, StopsEarlyOnDuplicates) {
  MatrixXd x = MatrixXd::Constant(5, 1, 0.4);
  Dataset d{PointSet::sequential(x, kTrainDomain), VectorXd::Ones(5), std::nullopt};
  const auto f = icf_factorize(d, oracle::hyper(1), 3);
  EXPECT_EQ(f.rank, 1u);
  EXPECT_EQ(f.pivot_order, std::vector<std::size_t>{0});
  EXPECT_NEAR(f.factor(0, 3), 1.0, 1e-15);
}

TEST(IcfFactorize, ExactLowRankDataset) {
  // Three distinct locations repeated: the kernel matrix has rank three.
  MatrixXd x(12, 1);
  for (int i = 0; i < 12; ++i) x(i, 0) = 0.3 * (i % 3);
  Dataset d{PointSet::sequential(x, kTrainDomain), VectorXd::LinSpaced(12, 0, 1), std::nullopt};
  const auto h = oracle::hyper(1);
  const auto f = icf_factorize(d, h, 12);
  EXPECT_EQ(f.rank, 3u);
  EXPECT_LT(oracle::max_abs(MatrixXd(f.factor.transpose() * f.factor),
                            oracle::cov_clean(d.inputs, d.inputs, h)),
            1e-12);
}

TEST(IcfFactorize, RankOutOfRangeThrows) {
  auto [d, u] = oracle::random_problem(5, 1, 1, 1);
  EXPECT_THROW(icf_factorize(d, oracle::hyper(1), 0), InvalidArgument);
  EXPECT_THROW(icf_factorize(d, oracle::hyper(1), 6), InvalidArgument);
}

TEST(IcfPredict, MatchesDenseDefinition) {
  auto [d, u] = oracle::random_problem(64, 10, 2, 14);
  const auto h = oracle::hyper(2);
  const auto f = icf_factorize(d, h, 16);
  const auto p = icf_predict(d, u, f, h, {true});
  const auto o = oracle::icf(d, u, oracle::pivoted_cholesky(d, h, 16), h);
  EXPECT_LT(rel(p.mean, o.mean), 1e-8);
  EXPECT_LT(rel(*p.covariance, o.cov), 1e-8);
  const auto diag = icf_predict(d, u, f, h);
  EXPECT_LT(oracle::max_abs(diag.variance, p.variance), 1e-12);
}

TEST(IcfPredict, FullRankCollapsesToFgp) {
  auto [d, u] = oracle::random_problem(30, 8, 2, 15);
  const auto h = oracle::hyper(2, 0.5, 0.1);
  const auto p = icf_predict(d, u, icf_factorize(d, h, 30), h, {true});
  const auto f = fgp_predict(d, u, h, {true});
  EXPECT_LT(oracle::max_abs(p.mean, f.mean), 1e-6);
  EXPECT_LT(oracle::max_abs(*p.covariance, *f.covariance), 1e-6);
}

TEST(IcfPredict, SmallRankCanGoNegativeAndIsFlagged) {
  auto [d, u] = oracle::random_problem(100, 40, 2, 16);
  const auto h = oracle::hyper(2, 0.15, 1e-3);
  const auto p = icf_predict(d, u, icf_factorize(d, h, 4), h);
  EXPECT_FALSE(p.psd_valid);
  EXPECT_GT(p.negative_variance_count, 0u);
  EXPECT_LT(p.most_negative_variance, 0.0);
  const auto full = icf_predict(d, u, icf_factorize(d, h, 100), h);
  EXPECT_TRUE(full.psd_valid);
}

TEST(IcfPredict, LargerRankTracksFgpBetter) {
  auto [d, u] = oracle::random_problem(200, 40, 2, 17);
  const auto h = oracle::hyper(2, 0.2);
  const auto f = fgp_predict(d, u, h);
  auto err = [&](std::size_t r) { return (icf_predict(d, u, icf_factorize(d, h, r), h).mean - f.mean).norm(); };
  EXPECT_LT(err(64), err(8));
}

TEST(IcfPredict, FactorShapeMismatchThrows) {
  auto [d, u] = oracle::random_problem(10, 2, 1, 1);
  auto [d2, u2] = oracle::random_problem(11, 2, 1, 1);
  const auto h = oracle::hyper(1);
  EXPECT_THROW(icf_predict(d, u, icf_factorize(d2, h, 3), h), DimensionError);
}

TEST(IcfFile, RoundTripAndCorruption) {
  auto [d, u] = oracle::random_problem(15, 1, 2, 18);
  const auto f = icf_factorize(d, oracle::hyper(2), 6);
  std::stringstream ss;
  write_icf_factor(ss, f);
  const std::string bytes = ss.str();
  const auto back = read_icf_factor(ss);
  EXPECT_EQ(back.rank, f.rank);
  EXPECT_EQ(back.pivot_order, f.pivot_order);
  EXPECT_EQ(back.factor, f.factor);
  EXPECT_EQ(back.residual_diag, f.residual_diag);

  std::stringstream bad_magic("NOTICF00");
  EXPECT_THROW(read_icf_factor(bad_magic), InvalidArgument);
  std::stringstream truncated(bytes.substr(0, bytes.size() - 4));
  EXPECT_THROW(read_icf_factor(truncated), InvalidArgument);
}
