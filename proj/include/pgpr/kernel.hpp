#ifndef PGPR_KERNEL_HPP_
#define PGPR_KERNEL_HPP_

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "pgpr/errors.hpp"

namespace pgpr {

using Eigen::MatrixXd;
using Eigen::VectorXd;

using PointId = std::int64_t;

/// Tags the collection a point belongs to. Two points are the same random
/// variable (and share the noise term) only if both domain and id agree.
using DomainId = std::uint64_t;

inline constexpr DomainId kTrainDomain = 1;
inline constexpr DomainId kTestDomain = 2;
/// Selected support points are latent variables of their own.
inline constexpr DomainId kSupportDomain = 3;

inline DomainId fresh_domain() {
  static std::atomic<DomainId> next{1000};
  return next.fetch_add(1);
}

inline constexpr double kDefaultJitter = 1e-10;

struct Hyperparameters {
  double signal_variance = 1.0;
  double noise_variance = 0.1;
  std::vector<double> length_scales{1.0};

  std::size_t dim() const { return length_scales.size(); }

  void validate() const {
    if (!(signal_variance > 0.0) || !(noise_variance > 0.0)) {
      throw InvalidArgument("hyperparameters: variances must be positive");
    }
    if (length_scales.empty()) {
      throw InvalidArgument("hyperparameters: no length scales");
    }
    for (double l : length_scales) {
      if (!(l > 0.0)) {
        throw InvalidArgument("hyperparameters: length scales must be positive");
      }
    }
  }

  double prior_variance() const { return signal_variance + noise_variance; }
};

struct InputPoint {
  VectorXd features;
  PointId id = 0;
  DomainId domain = 0;
};

/// An ordered set of inputs, one row per point.
struct PointSet {
  MatrixXd features;
  std::vector<PointId> ids;
  DomainId domain = 0;

  PointSet() = default;

  PointSet(MatrixXd features_, std::vector<PointId> ids_, DomainId domain_)
      : features(std::move(features_)), ids(std::move(ids_)), domain(domain_) {
    if (static_cast<Eigen::Index>(ids.size()) != features.rows()) {
      throw DimensionError("point set: ids and feature rows differ in count");
    }
  }

  /// Points numbered 0..n-1 in a new domain.
  static PointSet sequential(MatrixXd features_, DomainId domain_) {
    std::vector<PointId> ids(static_cast<std::size_t>(features_.rows()));
    for (std::size_t i = 0; i < ids.size(); ++i) {
      ids[i] = static_cast<PointId>(i);
    }
    return PointSet(std::move(features_), std::move(ids), domain_);
  }

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }

  InputPoint point(std::size_t i) const {
    return {features.row(static_cast<Eigen::Index>(i)).transpose(), ids[i],
            domain};
  }

  PointSet subset(const std::vector<std::size_t> &indices) const {
    PointSet out;
    out.domain = domain;
    out.features.resize(static_cast<Eigen::Index>(indices.size()),
                        features.cols());
    out.ids.reserve(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) {
      out.features.row(static_cast<Eigen::Index>(k)) =
          features.row(static_cast<Eigen::Index>(indices[k]));
      out.ids.push_back(ids[indices[k]]);
    }
    return out;
  }

  /// Concatenation; both parts must share the domain.
  static PointSet concat(const PointSet &a, const PointSet &b) {
    if (a.empty()) return b;
    if (b.empty()) return a;
    if (a.domain != b.domain || a.dim() != b.dim()) {
      throw DimensionError("point set concat: domain or dimension mismatch");
    }
    PointSet out;
    out.domain = a.domain;
    out.features.resize(static_cast<Eigen::Index>(a.size() + b.size()),
                        a.features.cols());
    out.features << a.features, b.features;
    out.ids = a.ids;
    out.ids.insert(out.ids.end(), b.ids.begin(), b.ids.end());
    return out;
  }

  void check_unique_ids() const {
    std::vector<PointId> sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw InvalidArgument("point set: duplicate ids");
    }
  }
};

/// Prior mean: one constant for every point or one value per point.
using PriorMean = std::variant<double, VectorXd>;

struct Dataset {
  PointSet inputs;
  std::optional<VectorXd> outputs;
  std::optional<PriorMean> prior_mean;

  std::size_t size() const { return inputs.size(); }
  bool empty() const { return inputs.empty(); }

  void validate() const {
    inputs.check_unique_ids();
    if (outputs && static_cast<std::size_t>(outputs->size()) != size()) {
      throw DimensionError("dataset: outputs length differs from inputs");
    }
    if (prior_mean && std::holds_alternative<VectorXd>(*prior_mean) &&
        static_cast<std::size_t>(std::get<VectorXd>(*prior_mean).size()) !=
            size()) {
      throw DimensionError("dataset: prior mean length differs from inputs");
    }
  }

  const VectorXd &y() const {
    if (!outputs) {
      throw InvalidArgument("dataset has no outputs");
    }
    return *outputs;
  }

  Dataset subset(const std::vector<std::size_t> &indices) const {
    Dataset out;
    out.inputs = inputs.subset(indices);
    if (outputs) {
      VectorXd y(static_cast<Eigen::Index>(indices.size()));
      for (std::size_t k = 0; k < indices.size(); ++k) {
        y(static_cast<Eigen::Index>(k)) =
            (*outputs)(static_cast<Eigen::Index>(indices[k]));
      }
      out.outputs = std::move(y);
    }
    if (prior_mean) {
      if (const auto *c = std::get_if<double>(&*prior_mean)) {
        out.prior_mean = *c;
      } else {
        const auto &v = std::get<VectorXd>(*prior_mean);
        VectorXd mu(static_cast<Eigen::Index>(indices.size()));
        for (std::size_t k = 0; k < indices.size(); ++k) {
          mu(static_cast<Eigen::Index>(k)) =
              v(static_cast<Eigen::Index>(indices[k]));
        }
        out.prior_mean = std::move(mu);
      }
    }
    return out;
  }
};

/// Prior mean vectors for a training set and a test set. When the training
/// set carries no prior mean, the constant is the mean of its outputs.
struct ResolvedMeans {
  VectorXd train;
  VectorXd test;
  std::optional<double> constant;
};

inline VectorXd expand_mean(const PriorMean &mean, std::size_t n) {
  if (const auto *c = std::get_if<double>(&mean)) {
    return VectorXd::Constant(static_cast<Eigen::Index>(n), *c);
  }
  const auto &v = std::get<VectorXd>(mean);
  if (static_cast<std::size_t>(v.size()) != n) {
    throw DimensionError("prior mean length mismatch");
  }
  return v;
}

inline PriorMean train_prior(const Dataset &train) {
  if (train.prior_mean) {
    return *train.prior_mean;
  }
  const VectorXd &y = train.y();
  if (y.size() == 0) {
    throw InvalidArgument("empty training outputs");
  }
  return y.mean();
}

inline VectorXd test_prior(const PriorMean &train_mean, const Dataset &test) {
  if (test.prior_mean) {
    return expand_mean(*test.prior_mean, test.size());
  }
  if (const auto *c = std::get_if<double>(&train_mean)) {
    return VectorXd::Constant(static_cast<Eigen::Index>(test.size()), *c);
  }
  throw InvalidArgument(
      "test set needs a prior mean when the training prior is per-point");
}

inline ResolvedMeans resolve_means(const Dataset &train, const Dataset &test) {
  const PriorMean prior = train_prior(train);
  ResolvedMeans out;
  out.train = expand_mean(prior, train.size());
  out.test = test_prior(prior, test);
  if (const auto *c = std::get_if<double>(&prior)) {
    out.constant = *c;
  }
  return out;
}

namespace detail {

inline void check_dim(std::size_t features, const Hyperparameters &h) {
  if (features != h.dim()) {
    throw DimensionError("feature dimension " + std::to_string(features) +
                         " does not match " + std::to_string(h.dim()) +
                         " length scales");
  }
}

template <typename RowA, typename RowB>
double se_term(const RowA &a, const RowB &b, const double *inv_ell,
               double signal_variance) {
  double r2 = 0.0;
  for (Eigen::Index k = 0; k < a.size(); ++k) {
    const double z = (a[k] - b[k]) * inv_ell[k];
    r2 += z * z;
  }
  return signal_variance * std::exp(-0.5 * r2);
}

inline std::vector<double> inverse_length_scales(const Hyperparameters &h) {
  std::vector<double> inv(h.dim());
  for (std::size_t k = 0; k < inv.size(); ++k) {
    inv[k] = 1.0 / h.length_scales[k];
  }
  return inv;
}

} // namespace detail

/// Squared-exponential ARD covariance plus noise on identical points.
inline double covariance(const InputPoint &x, const InputPoint &x2,
                         const Hyperparameters &h) {
  detail::check_dim(static_cast<std::size_t>(x.features.size()), h);
  detail::check_dim(static_cast<std::size_t>(x2.features.size()), h);
  const auto inv = detail::inverse_length_scales(h);
  double k = detail::se_term(x.features, x2.features, inv.data(),
                             h.signal_variance);
  if (x.domain == x2.domain && x.id == x2.id) {
    k += h.noise_variance;
  }
  return k;
}

/// Covariance between every point of `a` (rows) and `b` (columns).
inline MatrixXd cov_matrix(const PointSet &a, const PointSet &b,
                           const Hyperparameters &h) {
  detail::check_dim(a.dim(), h);
  detail::check_dim(b.dim(), h);
  const auto inv = detail::inverse_length_scales(h);
  const auto na = static_cast<Eigen::Index>(a.size());
  const auto nb = static_cast<Eigen::Index>(b.size());
  MatrixXd k(na, nb);

  const bool same_view = a.domain == b.domain && a.ids == b.ids;
  if (same_view) {
    for (Eigen::Index j = 0; j < nb; ++j) {
      for (Eigen::Index i = 0; i < j; ++i) {
        const double v = detail::se_term(a.features.row(i), b.features.row(j),
                                         inv.data(), h.signal_variance);
        k(i, j) = v;
        k(j, i) = v;
      }
      k(j, j) = h.signal_variance + h.noise_variance;
    }
    return k;
  }

  for (Eigen::Index j = 0; j < nb; ++j) {
    for (Eigen::Index i = 0; i < na; ++i) {
      k(i, j) = detail::se_term(a.features.row(i), b.features.row(j),
                                inv.data(), h.signal_variance);
    }
  }
  if (a.domain == b.domain) {
    std::unordered_map<PointId, Eigen::Index> where;
    where.reserve(b.size());
    for (Eigen::Index j = 0; j < nb; ++j) {
      where.emplace(b.ids[static_cast<std::size_t>(j)], j);
    }
    for (Eigen::Index i = 0; i < na; ++i) {
      auto it = where.find(a.ids[static_cast<std::size_t>(i)]);
      if (it != where.end()) {
        k(i, it->second) += h.noise_variance;
      }
    }
  }
  return k;
}

/// Diagonal of cov_matrix(a, a, h).
inline VectorXd prior_variances(const PointSet &a, const Hyperparameters &h) {
  return VectorXd::Constant(static_cast<Eigen::Index>(a.size()),
                            h.prior_variance());
}

// Plain-text hyperparameter config: `key = value` lines, `#` comments.

inline std::string trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<double> parse_double_list(const std::string &text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    std::size_t used = 0;
    out.push_back(std::stod(item, &used));
    if (used != item.size()) {
      throw InvalidArgument("not a number: " + item);
    }
  }
  return out;
}

inline Hyperparameters read_hyperparameters(std::istream &in) {
  Hyperparameters h;
  bool have_s = false, have_n = false, have_l = false;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw InvalidArgument("hyperparameter config: expected key = value: " +
                            line);
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "signal_variance") {
      h.signal_variance = std::stod(value);
      have_s = true;
    } else if (key == "noise_variance") {
      h.noise_variance = std::stod(value);
      have_n = true;
    } else if (key == "length_scales") {
      h.length_scales = parse_double_list(value);
      have_l = true;
    }
  }
  if (!have_s || !have_n || !have_l) {
    throw InvalidArgument(
        "hyperparameter config needs signal_variance, noise_variance and "
        "length_scales");
  }
  h.validate();
  return h;
}

inline void write_hyperparameters(std::ostream &out, const Hyperparameters &h) {
  out << std::setprecision(17);
  out << "signal_variance = " << h.signal_variance << "\n";
  out << "noise_variance = " << h.noise_variance << "\n";
  out << "length_scales = ";
  for (std::size_t i = 0; i < h.length_scales.size(); ++i) {
    out << (i ? "," : "") << h.length_scales[i];
  }
  out << "\n";
}

inline Hyperparameters load_hyperparameters(const std::string &path) {
  std::ifstream in(path);
  if (!in) {
    throw InvalidArgument("cannot open hyperparameter file " + path);
  }
  return read_hyperparameters(in);
}

} // namespace pgpr

#endif
