#ifndef PGPR_CENTRALIZED_HPP_
#define PGPR_CENTRALIZED_HPP_

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "pgpr/fullgp.hpp"
#include "pgpr/support.hpp"

namespace pgpr {

/// M disjoint blocks of training positions and, when needed, the matching
/// blocks of test positions. Block m of the test set is paired with block m
/// of the training set.
struct BlockStructure {
  std::vector<std::vector<std::size_t>> train;
  std::vector<std::vector<std::size_t>> test;

  std::size_t count() const { return train.size(); }

  /// Contiguous blocks of size n/M; the last block absorbs the remainder.
  static BlockStructure even(std::size_t n_train, std::size_t n_test,
                             std::size_t blocks) {
    if (blocks == 0) {
      throw InvalidArgument("block count must be at least 1");
    }
    if (blocks > n_train) {
      throw InvalidArgument("more blocks than training points");
    }
    BlockStructure b;
    b.train = split(n_train, blocks);
    b.test = split(n_test, blocks);
    return b;
  }

  static std::vector<std::vector<std::size_t>> split(std::size_t n,
                                                     std::size_t blocks) {
    std::vector<std::vector<std::size_t>> out(blocks);
    const std::size_t base = n / blocks;
    std::size_t next = 0;
    for (std::size_t m = 0; m < blocks; ++m) {
      const std::size_t len = (m + 1 == blocks) ? n - next : base;
      for (std::size_t k = 0; k < len; ++k) out[m].push_back(next++);
    }
    return out;
  }

  void validate(std::size_t n_train, std::size_t n_test, bool need_test) const {
    if (train.empty()) {
      throw InvalidArgument("block structure has no blocks");
    }
    check_cover(train, n_train, "training");
    if (need_test) {
      if (test.size() != train.size()) {
        throw InvalidArgument("test blocks are not aligned with training blocks");
      }
      check_cover(test, n_test, "test");
    }
  }

private:
  static void check_cover(const std::vector<std::vector<std::size_t>> &blocks,
                          std::size_t n, const char *what) {
    std::vector<bool> seen(n, false);
    std::size_t total = 0;
    for (const auto &blk : blocks) {
      for (std::size_t i : blk) {
        if (i >= n || seen[i]) {
          throw InvalidArgument(std::string(what) +
                                " blocks are not a partition");
        }
        seen[i] = true;
        ++total;
      }
    }
    if (total != n) {
      throw InvalidArgument(std::string(what) + " blocks do not cover the set");
    }
  }
};

namespace detail {

/// Pieces shared by the centralized PITC and PIC predictors.
struct SupportBlockSystem {
  Cholesky k_ss;
  MatrixXd k_sd;             // |S| x |D|
  std::vector<Cholesky> lambda; // per-block Sigma_{DmDm|S}
  MatrixXd lambda_inv_ds;    // Lambda^{-1} Sigma_DS, |D| x |S|
  VectorXd lambda_inv_r;     // Lambda^{-1} (y_D - mu_D)
  MatrixXd q;                // Sigma_SD Lambda^{-1} Sigma_DS
  Cholesky global;           // Sigma_SS + q
  VectorXd weights;          // (Gamma_DD + Lambda)^{-1} (y_D - mu_D)
};

inline SupportBlockSystem build_support_system(const Dataset &train,
                                               const VectorXd &residual,
                                               const SupportSet &s,
                                               const BlockStructure &blocks,
                                               const Hyperparameters &h,
                                               double jitter) {
  if (s.size() == 0) {
    throw InvalidArgument("support set is empty");
  }
  SupportBlockSystem sys;
  const MatrixXd k_ss = cov_matrix(s.inputs, s.inputs, h);
  sys.k_ss = Cholesky(k_ss, jitter, "Sigma_SS");
  sys.k_sd = cov_matrix(s.inputs, train.inputs, h);
  const auto n = static_cast<Eigen::Index>(train.size());
  const auto ns = static_cast<Eigen::Index>(s.size());
  sys.lambda_inv_ds.resize(n, ns);
  sys.lambda_inv_r.resize(n);

  for (std::size_t m = 0; m < blocks.count(); ++m) {
    const auto &idx = blocks.train[m];
    if (idx.empty()) {
      sys.lambda.emplace_back();
      continue;
    }
    const PointSet dm = train.inputs.subset(idx);
    MatrixXd k_sdm(ns, static_cast<Eigen::Index>(idx.size()));
    VectorXd r_m(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      k_sdm.col(static_cast<Eigen::Index>(k)) =
          sys.k_sd.col(static_cast<Eigen::Index>(idx[k]));
      r_m(static_cast<Eigen::Index>(k)) = residual(static_cast<Eigen::Index>(idx[k]));
    }
    MatrixXd cond = cov_matrix(dm, dm, h);
    cond.noalias() -= k_sdm.transpose() * sys.k_ss.solve(k_sdm);
    sys.lambda.emplace_back(symmetrize(cond), jitter,
                            "Sigma_DmDm|S (block " + std::to_string(m + 1) + ")");
    const MatrixXd sol_ds = sys.lambda.back().solve(MatrixXd(k_sdm.transpose()));
    const VectorXd sol_r = sys.lambda.back().solve(r_m);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto row = static_cast<Eigen::Index>(idx[k]);
      sys.lambda_inv_ds.row(row) = sol_ds.row(static_cast<Eigen::Index>(k));
      sys.lambda_inv_r(row) = sol_r(static_cast<Eigen::Index>(k));
    }
  }
  sys.q = symmetrize(sys.k_sd * sys.lambda_inv_ds);
  sys.global = Cholesky(k_ss + sys.q, jitter, "Sigma_SS + Sigma_SD Lambda^-1 Sigma_DS");
  sys.weights = sys.lambda_inv_r -
                sys.lambda_inv_ds * sys.global.solve(VectorXd(sys.k_sd * sys.lambda_inv_r));
  return sys;
}

inline void check_predict_inputs(const Dataset &train, const Dataset &test,
                                 const Hyperparameters &h) {
  h.validate();
  train.validate();
  test.validate();
  if (train.empty() || test.empty()) {
    throw InvalidArgument("empty training or test set");
  }
  (void)train.y();
}

} // namespace detail

/// Centralized PITC: the training blocks are conditionally independent given
/// the support outputs. Mean and variance use Gamma_UD (Gamma_DD+Lambda)^{-1},
/// with the inverse applied through the block-diagonal Lambda and the
/// |S| x |S| global matrix.
inline PredictiveDistribution pitc_predict(const Dataset &train,
                                           const Dataset &test,
                                           const SupportSet &s,
                                           const BlockStructure &blocks,
                                           const Hyperparameters &h,
                                           const PredictOptions &opt = {}) {
  detail::check_predict_inputs(train, test, h);
  blocks.validate(train.size(), test.size(), false);
  const ResolvedMeans mu = resolve_means(train, test);
  const VectorXd residual = train.y() - mu.train;
  const auto sys =
      detail::build_support_system(train, residual, s, blocks, h, opt.jitter);

  const MatrixXd k_su = cov_matrix(s.inputs, test.inputs, h);
  // Gamma_UD = A Sigma_SD with A = Sigma_US Sigma_SS^{-1}.
  const MatrixXd a_t = sys.k_ss.solve(k_su); // A^T, |S| x |U|

  PredictiveDistribution out;
  out.ordering = test.inputs.ids;
  out.mean = mu.test + a_t.transpose() * (sys.k_sd * sys.weights);

  // Sigma_SD (Gamma_DD+Lambda)^{-1} Sigma_DS = Q - Q Sigma_ddot^{-1} Q
  const MatrixXd middle = symmetrize(sys.q - sys.q * sys.global.solve(sys.q));
  if (opt.full_covariance) {
    MatrixXd cov = cov_matrix(test.inputs, test.inputs, h);
    cov.noalias() -= a_t.transpose() * middle * a_t;
    out.covariance = symmetrize(cov);
    out.variance = out.covariance->diagonal();
  } else {
    const MatrixXd ma = middle * a_t;
    out.variance = prior_variances(test.inputs, h) -
                   a_t.cwiseProduct(ma).colwise().sum().transpose();
  }
  update_psd_flag(out);
  return out;
}

/// Centralized PIC: like PITC, but each test block keeps the exact
/// covariance to its own training block.
inline PredictiveDistribution pic_predict(const Dataset &train,
                                          const Dataset &test,
                                          const SupportSet &s,
                                          const BlockStructure &blocks,
                                          const Hyperparameters &h,
                                          const PredictOptions &opt = {}) {
  detail::check_predict_inputs(train, test, h);
  blocks.validate(train.size(), test.size(), true);
  const ResolvedMeans mu = resolve_means(train, test);
  const VectorXd residual = train.y() - mu.train;
  const auto sys =
      detail::build_support_system(train, residual, s, blocks, h, opt.jitter);

  const auto nu = static_cast<Eigen::Index>(test.size());
  const auto nd = static_cast<Eigen::Index>(train.size());
  const MatrixXd k_su = cov_matrix(s.inputs, test.inputs, h);
  const MatrixXd a_t = sys.k_ss.solve(k_su);

  // Gamma~_UD, built explicitly: low-rank everywhere, exact on paired blocks.
  MatrixXd g = a_t.transpose() * sys.k_sd; // |U| x |D|
  for (std::size_t m = 0; m < blocks.count(); ++m) {
    const auto &ui = blocks.test[m];
    const auto &dm = blocks.train[m];
    if (ui.empty() || dm.empty()) continue;
    const MatrixXd exact =
        cov_matrix(test.inputs.subset(ui), train.inputs.subset(dm), h);
    for (std::size_t a = 0; a < ui.size(); ++a) {
      for (std::size_t b = 0; b < dm.size(); ++b) {
        g(static_cast<Eigen::Index>(ui[a]), static_cast<Eigen::Index>(dm[b])) =
            exact(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
      }
    }
  }

  PredictiveDistribution out;
  out.ordering = test.inputs.ids;
  out.mean = mu.test + g * sys.weights;

  // Lambda^{-1} Gamma~_DU, block by block.
  MatrixXd lambda_inv_gt(nd, nu);
  for (std::size_t m = 0; m < blocks.count(); ++m) {
    const auto &dm = blocks.train[m];
    if (dm.empty()) continue;
    MatrixXd rhs(static_cast<Eigen::Index>(dm.size()), nu);
    for (std::size_t b = 0; b < dm.size(); ++b) {
      rhs.row(static_cast<Eigen::Index>(b)) =
          g.col(static_cast<Eigen::Index>(dm[b])).transpose();
    }
    const MatrixXd sol = sys.lambda[m].solve(rhs);
    for (std::size_t b = 0; b < dm.size(); ++b) {
      lambda_inv_gt.row(static_cast<Eigen::Index>(dm[b])) =
          sol.row(static_cast<Eigen::Index>(b));
    }
  }
  const MatrixXd w = sys.k_sd * lambda_inv_gt; // Sigma_SD Lambda^{-1} Gamma~_DU
  const MatrixXd corr = sys.global.solve(w);
  if (opt.full_covariance) {
    MatrixXd cov = cov_matrix(test.inputs, test.inputs, h);
    cov.noalias() -= g * lambda_inv_gt;
    cov.noalias() += w.transpose() * corr;
    out.covariance = symmetrize(cov);
    out.variance = out.covariance->diagonal();
  } else {
    out.variance = prior_variances(test.inputs, h) -
                   g.transpose().cwiseProduct(lambda_inv_gt).colwise().sum().transpose() +
                   w.cwiseProduct(corr).colwise().sum().transpose();
  }
  update_psd_flag(out);
  return out;
}

/// Rank-R pivoted incomplete Cholesky factor of the noise-free training
/// covariance: Sigma_DD ~= F^T F + noise * I. Columns of `factor` follow the
/// training order; row k is nonzero only on pivot k and on columns not yet
/// pivoted, so F is upper triangular in pivot order.
struct ICFFactor {
  MatrixXd factor; // rank x |D|
  std::size_t rank = 0;
  std::vector<std::size_t> pivot_order; // training positions, length rank
  VectorXd residual_diag;

  std::size_t columns() const { return static_cast<std::size_t>(factor.cols()); }

  /// Columns for a subset of training positions.
  MatrixXd columns_of(const std::vector<std::size_t> &idx) const {
    MatrixXd out(factor.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      out.col(static_cast<Eigen::Index>(k)) =
          factor.col(static_cast<Eigen::Index>(idx[k]));
    }
    return out;
  }
};

namespace detail {

inline constexpr double kIcfNegativeTolerance = -1e-8;
inline constexpr double kIcfStopRatio = 1e-12;

/// Noise-free kernel between every point of `a` and one feature vector.
inline VectorXd se_column(const PointSet &a, const VectorXd &x,
                          const Hyperparameters &h) {
  const auto inv = inverse_length_scales(h);
  VectorXd out(static_cast<Eigen::Index>(a.size()));
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    out(i) = se_term(a.features.row(i), x, inv.data(), h.signal_variance);
  }
  return out;
}

/// Noise-free diagonal of the kernel.
inline VectorXd se_diagonal(const PointSet &a, const Hyperparameters &h) {
  const auto inv = inverse_length_scales(h);
  VectorXd out(static_cast<Eigen::Index>(a.size()));
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    out(i) = se_term(a.features.row(i), a.features.row(i), inv.data(),
                     h.signal_variance);
  }
  return out;
}

/// Writes row `k` of the factor for a block of columns. `pivot_col` holds
/// the first k entries of the pivot's column, `kcol` the kernel between each
/// local column and the pivot. Plain loops keep the arithmetic identical no
/// matter how the columns are split across workers.
inline void icf_row(MatrixXd &f, VectorXd &diag, std::vector<bool> &pivoted,
                    Eigen::Index k, const VectorXd &pivot_col,
                    double pivot_value, const VectorXd &kcol,
                    Eigen::Index local_pivot) {
  const double root = std::sqrt(pivot_value);
  for (Eigen::Index j = 0; j < f.cols(); ++j) {
    if (j == local_pivot) {
      f(k, j) = root;
      diag(j) = 0.0;
      pivoted[static_cast<std::size_t>(j)] = true;
      continue;
    }
    if (pivoted[static_cast<std::size_t>(j)]) {
      f(k, j) = 0.0;
      continue;
    }
    double s = kcol(j);
    for (Eigen::Index l = 0; l < k; ++l) {
      s -= f(l, j) * pivot_col(l);
    }
    const double v = s / root;
    f(k, j) = v;
    diag(j) -= v * v;
  }
}

/// Largest remaining diagonal among unpivoted columns; ties go to the lowest
/// global position. Returns -1 when every column is pivoted.
inline Eigen::Index icf_argmax(const VectorXd &diag,
                               const std::vector<bool> &pivoted,
                               const std::vector<std::size_t> &global_pos) {
  Eigen::Index best = -1;
  for (Eigen::Index j = 0; j < diag.size(); ++j) {
    if (pivoted[static_cast<std::size_t>(j)]) continue;
    if (best < 0 || diag(j) > diag(best) ||
        (diag(j) == diag(best) &&
         global_pos[static_cast<std::size_t>(j)] <
             global_pos[static_cast<std::size_t>(best)])) {
      best = j;
    }
  }
  return best;
}

/// Stopping rule shared by the centralized and distributed factorizations.
/// Returns false when the factorization should stop before this pivot.
inline bool icf_accept_pivot(double value, double initial_max) {
  if (value < kIcfNegativeTolerance) {
    throw ConditioningError("Sigma_DD - noise*I",
                            "negative pivot " + std::to_string(value) +
                                " in incomplete Cholesky");
  }
  return value > kIcfStopRatio * initial_max;
}

} // namespace detail

/// Greedy pivoted incomplete Cholesky: each step pivots on the largest
/// remaining diagonal. Stops early if that diagonal is negligible.
inline ICFFactor icf_factorize(const Dataset &train, const Hyperparameters &h,
                               std::size_t rank) {
  h.validate();
  detail::check_dim(train.inputs.dim(), h);
  const std::size_t n = train.size();
  if (rank < 1 || rank > n) {
    throw InvalidArgument("icf rank must be in [1, |D|]");
  }
  MatrixXd f = MatrixXd::Zero(static_cast<Eigen::Index>(rank),
                              static_cast<Eigen::Index>(n));
  VectorXd diag = detail::se_diagonal(train.inputs, h);
  const double initial_max = diag.size() ? diag.maxCoeff() : 0.0;
  std::vector<bool> pivoted(n, false);
  std::vector<std::size_t> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[i] = i;

  ICFFactor out;
  for (std::size_t k = 0; k < rank; ++k) {
    const Eigen::Index p = detail::icf_argmax(diag, pivoted, pos);
    if (p < 0 || !detail::icf_accept_pivot(diag(p), initial_max)) break;
    const VectorXd pivot_col = f.col(p).head(static_cast<Eigen::Index>(k));
    const VectorXd kcol = detail::se_column(
        train.inputs, train.inputs.features.row(p).transpose(), h);
    detail::icf_row(f, diag, pivoted, static_cast<Eigen::Index>(k), pivot_col,
                    diag(p), kcol, p);
    out.pivot_order.push_back(static_cast<std::size_t>(p));
  }
  out.rank = out.pivot_order.size();
  out.factor = f.topRows(static_cast<Eigen::Index>(out.rank));
  out.residual_diag = diag;
  return out;
}

/// Centralized ICF-based GP: Sigma_DD replaced by F^T F + noise*I, inverted
/// through the R x R matrix Phi = I + F F^T / noise.
inline PredictiveDistribution icf_predict(const Dataset &train,
                                          const Dataset &test,
                                          const ICFFactor &f,
                                          const Hyperparameters &h,
                                          const PredictOptions &opt = {}) {
  detail::check_predict_inputs(train, test, h);
  if (f.columns() != train.size()) {
    throw DimensionError("ICF factor columns differ from training size");
  }
  const ResolvedMeans mu = resolve_means(train, test);
  const VectorXd residual = train.y() - mu.train;
  const double inv_n = 1.0 / h.noise_variance;
  const auto r = static_cast<Eigen::Index>(f.rank);

  MatrixXd phi = MatrixXd::Identity(r, r);
  phi.noalias() += inv_n * (f.factor * f.factor.transpose());
  const Cholesky phi_llt(symmetrize(phi), 0.0, "Phi");

  const MatrixXd k_ud = cov_matrix(test.inputs, train.inputs, h);
  const VectorXd alpha =
      inv_n * residual -
      inv_n * inv_n * (f.factor.transpose() * phi_llt.solve(VectorXd(f.factor * residual)));

  PredictiveDistribution out;
  out.ordering = test.inputs.ids;
  out.mean = mu.test + k_ud * alpha;

  const MatrixXd b = f.factor * k_ud.transpose(); // R x |U|
  const MatrixXd c = phi_llt.solve(b);
  if (opt.full_covariance) {
    MatrixXd cov = cov_matrix(test.inputs, test.inputs, h);
    cov.noalias() -= inv_n * (k_ud * k_ud.transpose());
    cov.noalias() += inv_n * inv_n * (b.transpose() * c);
    out.covariance = symmetrize(cov);
    out.variance = out.covariance->diagonal();
  } else {
    out.variance = prior_variances(test.inputs, h) -
                   inv_n * k_ud.rowwise().squaredNorm() +
                   inv_n * inv_n * b.cwiseProduct(c).colwise().sum().transpose();
  }
  update_psd_flag(out);
  return out;
}

// Binary ICF factor file, little-endian host order:
//   magic "PGPRICF1", u64 |D|, u64 R, R x u64 pivot positions,
//   R*|D| doubles (row-major factor), |D| doubles residual diagonal.

inline void write_icf_factor(std::ostream &out, const ICFFactor &f) {
  const char magic[8] = {'P', 'G', 'P', 'R', 'I', 'C', 'F', '1'};
  out.write(magic, 8);
  const std::uint64_t n = f.columns();
  const std::uint64_t r = f.rank;
  out.write(reinterpret_cast<const char *>(&n), sizeof n);
  out.write(reinterpret_cast<const char *>(&r), sizeof r);
  for (std::size_t p : f.pivot_order) {
    const std::uint64_t v = p;
    out.write(reinterpret_cast<const char *>(&v), sizeof v);
  }
  for (Eigen::Index i = 0; i < f.factor.rows(); ++i) {
    for (Eigen::Index j = 0; j < f.factor.cols(); ++j) {
      const double v = f.factor(i, j);
      out.write(reinterpret_cast<const char *>(&v), sizeof v);
    }
  }
  for (Eigen::Index j = 0; j < f.residual_diag.size(); ++j) {
    const double v = f.residual_diag(j);
    out.write(reinterpret_cast<const char *>(&v), sizeof v);
  }
  if (!out) {
    throw std::runtime_error("failed writing ICF factor");
  }
}

inline ICFFactor read_icf_factor(std::istream &in) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "PGPRICF1", 8) != 0) {
    throw InvalidArgument("not an ICF factor file");
  }
  std::uint64_t n = 0, r = 0;
  in.read(reinterpret_cast<char *>(&n), sizeof n);
  in.read(reinterpret_cast<char *>(&r), sizeof r);
  if (!in || r > n) {
    throw InvalidArgument("corrupt ICF factor header");
  }
  ICFFactor f;
  f.rank = static_cast<std::size_t>(r);
  f.pivot_order.resize(f.rank);
  for (auto &p : f.pivot_order) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char *>(&v), sizeof v);
    if (v >= n) throw InvalidArgument("corrupt ICF pivot order");
    p = static_cast<std::size_t>(v);
  }
  f.factor.resize(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < f.factor.rows(); ++i) {
    for (Eigen::Index j = 0; j < f.factor.cols(); ++j) {
      in.read(reinterpret_cast<char *>(&f.factor(i, j)), sizeof(double));
    }
  }
  f.residual_diag.resize(static_cast<Eigen::Index>(n));
  for (Eigen::Index j = 0; j < f.residual_diag.size(); ++j) {
    in.read(reinterpret_cast<char *>(&f.residual_diag(j)), sizeof(double));
  }
  if (!in) {
    throw InvalidArgument("truncated ICF factor file");
  }
  return f;
}

} // namespace pgpr

#endif
