#ifndef PGPR_PARALLEL_SUMMARIES_HPP_
#define PGPR_PARALLEL_SUMMARIES_HPP_

#include <algorithm>
#include <vector>

#include "pgpr/linalg.hpp"
#include "pgpr/parallel/partition.hpp"
#include "pgpr/support.hpp"

namespace pgpr {

/// What worker m tells the master about its data, projected on the support
/// set: y_dot = Sigma_SDm Sigma_DmDm|S^{-1} (y_Dm - mu_Dm) and
/// Sigma_dot = Sigma_SDm Sigma_DmDm|S^{-1} Sigma_DmS.
struct LocalSummary {
  VectorXd y_dot;
  MatrixXd sigma_dot;
  int owner = 0;
};

/// Fusion of all local summaries: y_ddot = sum of y_dot and
/// Sigma_ddot = Sigma_SS + sum of Sigma_dot.
struct GlobalSummary {
  VectorXd y_ddot;
  MatrixXd sigma_ddot;
};

/// Per-worker ICF summary: F_m r_m, F_m Sigma_DmU and F_m F_m^T.
struct ICFLocalSummary {
  VectorXd y_dot;
  MatrixXd sigma_dot;
  MatrixXd phi;
  int owner = 0;
};

/// Master-side ICF summary. `phi` is I + sum(Phi_m) / noise; y_ddot and
/// sigma_ddot already have Phi^{-1} applied.
struct ICFGlobalSummary {
  VectorXd y_ddot;
  MatrixXd sigma_ddot;
  MatrixXd phi;
};

namespace detail {

/// Sigma_{DmDm|S} for one worker's block, factorized.
inline Cholesky conditional_block(const PointSet &dm, const Cholesky &k_ss, const MatrixXd &k_sdm,
                                  const Hyperparameters &h, double jitter,
                                  int worker) {
  MatrixXd cond = cov_matrix(dm, dm, h);
  cond.noalias() -= k_sdm.transpose() * k_ss.solve(k_sdm);
  return Cholesky(symmetrize(cond), jitter,
                  "worker " + std::to_string(worker) + ": Sigma_DmDm|S");
}

inline VectorXd local_residual(const Dataset &d) {
  return d.y() - expand_mean(train_prior(d), d.size());
}

} // namespace detail

inline LocalSummary compute_local_summary(const WorkerAssignment &w,
                                          const SupportSet &s,
                                          const Hyperparameters &h,
                                          double jitter = kDefaultJitter) {
  h.validate();
  if (w.local_data.empty()) {
    throw InvalidArgument("worker " + std::to_string(w.worker_id) +
                          " has no training data");
  }
  if (s.size() == 0) {
    throw InvalidArgument("support set is empty");
  }
  const Cholesky k_ss(cov_matrix(s.inputs, s.inputs, h), jitter, "Sigma_SS");
  const MatrixXd k_sdm = cov_matrix(s.inputs, w.local_data.inputs, h);
  const Cholesky lam = detail::conditional_block(
      w.local_data.inputs, k_ss, k_sdm, h, jitter, w.worker_id);
  const MatrixXd v = lam.half_solve(k_sdm.transpose()); // L^{-1} Sigma_DmS
  const VectorXd z = lam.half_solve(detail::local_residual(w.local_data));

  LocalSummary out;
  out.owner = w.worker_id;
  out.y_dot = v.transpose() * z;
  out.sigma_dot = v.transpose() * v;
  return out;
}

namespace detail {

inline void check_summary(const LocalSummary &l, Eigen::Index ns) {
  if (l.y_dot.size() != ns || l.sigma_dot.rows() != ns ||
      l.sigma_dot.cols() != ns) {
    throw DimensionError("local summary of worker " + std::to_string(l.owner) +
                         " does not match the support set size");
  }
}

inline std::vector<const LocalSummary *>
by_owner(const std::vector<LocalSummary> &locals) {
  std::vector<const LocalSummary *> out;
  for (const auto &l : locals) out.push_back(&l);
  std::stable_sort(out.begin(), out.end(),
                   [](const LocalSummary *a, const LocalSummary *b) {
                     return a->owner < b->owner;
                   });
  return out;
}

} // namespace detail

/// Sums the local summaries in ascending worker order onto Sigma_SS.
inline GlobalSummary aggregate_global_summary(
    const std::vector<LocalSummary> &locals, const SupportSet &s,
    const Hyperparameters &h) {
  const auto ns = static_cast<Eigen::Index>(s.size());
  if (locals.empty()) {
    throw InvalidArgument("aggregate_global_summary: no local summaries");
  }
  GlobalSummary g;
  g.y_ddot = VectorXd::Zero(ns);
  g.sigma_ddot = cov_matrix(s.inputs, s.inputs, h);
  for (const LocalSummary *l : detail::by_owner(locals)) {
    detail::check_summary(*l, ns);
    g.y_ddot += l->y_dot;
    g.sigma_ddot += l->sigma_dot;
  }
  return g;
}

/// Folds summaries of new, disjoint data into an existing global summary.
inline GlobalSummary assimilate_new_data(const GlobalSummary &existing,
                                         const std::vector<LocalSummary> &new_locals) {
  GlobalSummary g = existing;
  const Eigen::Index ns = existing.y_ddot.size();
  if (existing.sigma_ddot.rows() != ns || existing.sigma_ddot.cols() != ns) {
    throw DimensionError("global summary is not square");
  }
  for (const LocalSummary *l : detail::by_owner(new_locals)) {
    detail::check_summary(*l, ns);
    g.y_ddot += l->y_dot;
    g.sigma_ddot += l->sigma_dot;
  }
  return g;
}

} // namespace pgpr

#endif
