#ifndef PGPR_SUPPORT_HPP_
#define PGPR_SUPPORT_HPP_

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "pgpr/kernel.hpp"

namespace pgpr {

/// The common support set known to every worker. Selected points live in
/// kSupportDomain, so they share no noise term with the training outputs
/// they were picked from; a SupportSet built directly from training inputs
/// keeps the training domain instead.
struct SupportSet {
  PointSet inputs;
  /// Posterior variance of each point at the moment it was selected.
  std::vector<double> selected_variances;

  std::size_t size() const { return inputs.size(); }

  /// True when the support set is not small relative to the data.
  bool oversized_for(std::size_t n_train) const {
    return 2 * size() > n_train;
  }
};

/// Greedy differential-entropy selection: repeatedly adds the candidate with
/// the largest posterior variance given the points chosen so far. Ties go to
/// the lowest id. Keeps a Cholesky factor of the chosen block grown one row
/// per round, so the whole selection costs O(|candidates| * target^2).
inline SupportSet select_support(const PointSet &candidates,
                                 std::size_t target_size,
                                 const Hyperparameters &h,
                                 double jitter = kDefaultJitter) {
  h.validate();
  if (candidates.empty()) {
    throw InvalidArgument("select_support: empty candidate pool");
  }
  if (target_size == 0 || target_size > candidates.size()) {
    throw InvalidArgument("select_support: target size must be in [1, " +
                          std::to_string(candidates.size()) + "]");
  }
  candidates.check_unique_ids();
  const auto n = static_cast<Eigen::Index>(candidates.size());
  const auto t = static_cast<Eigen::Index>(target_size);

  VectorXd var = prior_variances(candidates, h);
  // Row c holds L^{-1} Sigma_{S c} for the points selected so far.
  MatrixXd proj = MatrixXd::Zero(n, t);
  std::vector<bool> taken(candidates.size(), false);
  std::vector<std::size_t> order;
  order.reserve(target_size);

  SupportSet out;
  for (Eigen::Index k = 0; k < t; ++k) {
    Eigen::Index best = -1;
    for (Eigen::Index c = 0; c < n; ++c) {
      if (taken[static_cast<std::size_t>(c)]) continue;
      if (best < 0 || var(c) > var(best) ||
          (var(c) == var(best) && candidates.ids[static_cast<std::size_t>(c)] <
                                      candidates.ids[static_cast<std::size_t>(best)])) {
        best = c;
      }
    }
    taken[static_cast<std::size_t>(best)] = true;
    order.push_back(static_cast<std::size_t>(best));
    out.selected_variances.push_back(var(best));

    const double pivot = std::sqrt(std::max(var(best), 0.0) + jitter);
    if (!(pivot > 0.0)) {
      throw ConditioningError("Sigma_SS", "support point has no variance left");
    }
    const MatrixXd k_col =
        cov_matrix(candidates, candidates.subset({static_cast<std::size_t>(best)}), h);
    const VectorXd pivot_row = proj.row(best).head(k).transpose();
    for (Eigen::Index c = 0; c < n; ++c) {
      if (taken[static_cast<std::size_t>(c)]) continue;
      const double e =
          (k_col(c, 0) - proj.row(c).head(k).dot(pivot_row.transpose())) / pivot;
      proj(c, k) = e;
      var(c) -= e * e;
    }
  }
  out.inputs = candidates.subset(order);
  out.inputs.domain = kSupportDomain;
  return out;
}

// CSV: header `domain,id,f1,...,fd`; one support point per row.

inline void write_support_csv(std::ostream &out, const SupportSet &s) {
  out << "domain,id";
  for (std::size_t k = 0; k < s.inputs.dim(); ++k) out << ",f" << (k + 1);
  out << "\n" << std::setprecision(17);
  for (std::size_t i = 0; i < s.size(); ++i) {
    out << s.inputs.domain << "," << s.inputs.ids[i];
    for (Eigen::Index k = 0; k < s.inputs.features.cols(); ++k) {
      out << "," << s.inputs.features(static_cast<Eigen::Index>(i), k);
    }
    out << "\n";
  }
}

inline SupportSet read_support_csv(std::istream &in) {
  std::string line;
  if (!std::getline(in, line)) {
    throw InvalidArgument("support csv: missing header");
  }
  std::vector<std::vector<double>> rows;
  std::vector<PointId> ids;
  DomainId domain = 0;
  bool first = true;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    const auto dom = static_cast<DomainId>(std::stoull(cell));
    if (first) {
      domain = dom;
      first = false;
    } else if (dom != domain) {
      throw InvalidArgument("support csv: mixed domains");
    }
    std::getline(ss, cell, ',');
    ids.push_back(static_cast<PointId>(std::stoll(cell)));
    std::vector<double> f;
    while (std::getline(ss, cell, ',')) f.push_back(std::stod(cell));
    if (!rows.empty() && f.size() != rows.front().size()) {
      throw DimensionError("support csv: ragged rows");
    }
    rows.push_back(std::move(f));
  }
  if (rows.empty()) {
    throw InvalidArgument("support csv: no points");
  }
  MatrixXd feats(static_cast<Eigen::Index>(rows.size()),
                 static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t k = 0; k < rows[i].size(); ++k) {
      feats(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
    }
  }
  SupportSet s;
  s.inputs = PointSet(std::move(feats), std::move(ids), domain);
  return s;
}

} // namespace pgpr

#endif
