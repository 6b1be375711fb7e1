#ifndef PGPR_HARNESS_METRICS_HPP_
#define PGPR_HARNESS_METRICS_HPP_

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "pgpr/fullgp.hpp"

namespace pgpr {

/// MNLP refuses to score a prediction with nonpositive variances.
class NonPositiveVarianceError : public std::runtime_error {
public:
  explicit NonPositiveVarianceError(std::size_t count)
      : std::runtime_error("mnlp: " + std::to_string(count) +
                           " nonpositive predictive variance(s)"),
        count_(count) {}
  std::size_t count() const { return count_; }

private:
  std::size_t count_;
};

namespace detail {
inline void check_aligned(const PredictiveDistribution &p, const VectorXd &y) {
  if (static_cast<std::size_t>(y.size()) != p.size()) {
    throw DimensionError("metric: prediction and truth differ in length");
  }
  if (y.size() == 0) {
    throw InvalidArgument("metric: empty prediction");
  }
}
} // namespace detail

inline double rmse(const VectorXd &mean, const VectorXd &truth) {
  if (mean.size() != truth.size()) {
    throw DimensionError("rmse: prediction and truth differ in length");
  }
  if (mean.size() == 0) {
    throw InvalidArgument("rmse: empty prediction");
  }
  return std::sqrt((mean - truth).squaredNorm() / static_cast<double>(mean.size()));
}

inline double rmse(const PredictiveDistribution &p, const VectorXd &truth) {
  detail::check_aligned(p, truth);
  return rmse(p.mean, truth);
}

inline std::size_t count_nonpositive(const VectorXd &v) {
  return static_cast<std::size_t>((v.array() <= 0.0).count());
}

inline double mnlp(const PredictiveDistribution &p, const VectorXd &truth) {
  detail::check_aligned(p, truth);
  const std::size_t bad = count_nonpositive(p.variance);
  if (bad > 0) throw NonPositiveVarianceError(bad);
  double s = 0.0;
  for (Eigen::Index i = 0; i < truth.size(); ++i) {
    const double r = truth(i) - p.mean(i);
    const double v = p.variance(i);
    s += r * r / v + std::log(2.0 * std::numbers::pi * v);
  }
  return 0.5 * s / static_cast<double>(truth.size());
}

} // namespace pgpr

#endif
