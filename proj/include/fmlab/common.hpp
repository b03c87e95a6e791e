#ifndef FMLAB_COMMON_HPP
#define FMLAB_COMMON_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace fmlab {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class ErrorKind {
  invalid_argument,
  dimension_mismatch,
  not_admissible,
  numerical_failure,
  injectivity_violated,
  budget_exceeded,
  config,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid argument";
    case ErrorKind::dimension_mismatch: return "dimension mismatch";
    case ErrorKind::not_admissible: return "not admissible";
    case ErrorKind::numerical_failure: return "numerical failure";
    case ErrorKind::injectivity_violated: return "injectivity violated";
    case ErrorKind::budget_exceeded: return "budget exceeded";
    case ErrorKind::config: return "config error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& what) {
  if (!condition) throw Error(kind, what);
}

inline void require_same_dim(Index expected, Index actual, const std::string& context) {
  if (expected != actual) {
    throw Error(ErrorKind::dimension_mismatch,
                context + ": expected dimension " + std::to_string(expected) + ", got " +
                    std::to_string(actual));
  }
}

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

// Uniform double in [0, 1) from the top 53 bits; identical on every platform.
template <class Engine>
double uniform01(Engine& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

template <class Engine>
double uniform(Engine& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

}  // namespace fmlab

#endif  // FMLAB_COMMON_HPP
