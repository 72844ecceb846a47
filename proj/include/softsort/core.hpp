#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace softsort {

inline constexpr const char* kVersion = "0.3.0";

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Raised when a computation cannot proceed in floating point, e.g. a
/// Gibbs kernel that underflows or a singular linear system.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

inline void require_finite(const Vector& v, const char* name) {
  if (!v.allFinite()) throw std::invalid_argument(std::string(name) + " contains non-finite entries");
}

inline void require_finite(const Matrix& m, const char* name) {
  if (!m.allFinite()) throw std::invalid_argument(std::string(name) + " contains non-finite entries");
}

// Prefix sums c_1, c_1 + c_2, ...
inline Vector cumulative_sum(const Vector& c) {
  Vector out(c.size());
  double acc = 0.0;
  for (Eigen::Index i = 0; i < c.size(); ++i) {
    acc += c[i];
    out[i] = acc;
  }
  return out;
}

}  // namespace detail
}  // namespace softsort
