#ifndef PGPR_ERRORS_HPP_
#define PGPR_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace pgpr {

/// Raised when inputs disagree in shape (feature dimension, vector lengths,
/// summary sizes).
class DimensionError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a matrix that must be positive definite cannot be factorized,
/// even after jitter. The message names the offending matrix.
class ConditioningError : public std::runtime_error {
public:
  explicit ConditioningError(const std::string &matrix_name,
                             const std::string &detail = "")
      : std::runtime_error("conditioning failure in " + matrix_name +
                           (detail.empty() ? "" : ": " + detail)),
        matrix_(matrix_name) {}

  const std::string &matrix() const { return matrix_; }

private:
  std::string matrix_;
};

/// Preconditions on sizes and counts that do not concern matrix shape.
class InvalidArgument : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

} // namespace pgpr

#endif
