#ifndef FMLAB_RKHS_HPP
#define FMLAB_RKHS_HPP

#include <numbers>
#include <vector>

#include <Eigen/Eigenvalues>

#include "fmlab/common.hpp"

namespace fmlab {

/// Sobolev H^s kernel on the circle, truncated Fourier series
///   k(t, t') = sum_{|n| <= cutoff} (1 + n^2)^{-s} e^{i n (t - t')}.
///
/// Functions of the space are represented by coordinates in the orthonormal
/// basis {1, sqrt2 (1+n^2)^{-s/2} cos nt, sqrt2 (1+n^2)^{-s/2} sin nt}, so
/// the feature vector of k_a is the coordinate vector of the kernel section
/// and point evaluation is a dot product with it.
struct SobolevCircleKernel {
  double smoothness = 2.0;
  int cutoff = 200;

  Index feature_dim() const { return 2 * cutoff + 1; }

  double weight(int n) const { return std::pow(1.0 + static_cast<double>(n) * n, -smoothness); }

  double operator()(double a, double b) const {
    double sum = 0.0;
    // Smallest terms first.
    for (int n = cutoff; n >= 1; --n) sum += 2.0 * weight(n) * std::cos(n * (a - b));
    return sum + 1.0;
  }

  Vector feature(double a) const {
    Vector phi(feature_dim());
    phi(0) = 1.0;
    for (int n = 1; n <= cutoff; ++n) {
      const double w = std::sqrt(2.0 * weight(n));
      phi(2 * n - 1) = w * std::cos(n * a);
      phi(2 * n) = w * std::sin(n * a);
    }
    return phi;
  }

  /// Coordinates of t -> cos(n t) (sine = false) or sin(n t).
  Vector trig_coordinates(int n, bool sine = false) const {
    require(n >= 0 && n <= cutoff, ErrorKind::invalid_argument, "frequency beyond kernel cutoff");
    Vector alpha = Vector::Zero(feature_dim());
    if (n == 0) {
      if (!sine) alpha(0) = 1.0;
      return alpha;
    }
    alpha(sine ? 2 * n : 2 * n - 1) = 1.0 / std::sqrt(2.0 * weight(n));
    return alpha;
  }

  double evaluate(const Vector& alpha, double t) const { return feature(t).dot(alpha); }
};

inline double circle_distance(double a, double b) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double d = std::fmod(std::abs(a - b), two_pi);
  return std::min(d, two_pi - d);
}

inline void require_distinct_nodes(const std::vector<double>& nodes) {
  require(!nodes.empty(), ErrorKind::invalid_argument, "node list is empty");
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (std::size_t j = i + 1; j < nodes.size(); ++j)
      require(circle_distance(nodes[i], nodes[j]) > 1e-12, ErrorKind::invalid_argument,
              "duplicate nodes " + std::to_string(i) + " and " + std::to_string(j) +
                  " (modulo 2pi); the Gram matrix would be singular");
}

inline Matrix rkhs_gram(const SobolevCircleKernel& kernel, const std::vector<double>& nodes) {
  require_distinct_nodes(nodes);
  const Index n = static_cast<Index>(nodes.size());
  Matrix k(n, n);
  for (Index i = 0; i < n; ++i) {
    k(i, i) = kernel(nodes[i], nodes[i]);
    for (Index j = i + 1; j < n; ++j) k(i, j) = k(j, i) = kernel(nodes[i], nodes[j]);
  }
  return k;
}

inline std::vector<double> equispaced_nodes(int n) {
  std::vector<double> nodes(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) nodes[static_cast<std::size_t>(i)] = 2.0 * std::numbers::pi * i / n;
  return nodes;
}

/// First n points of the base-2 van der Corput sequence scaled to [0, 2pi);
/// every prefix is a subset of the next, so the sampling spaces are nested.
inline std::vector<double> nested_circle_nodes(int n) {
  std::vector<double> nodes;
  nodes.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double x = 0.0, f = 0.5;
    for (unsigned k = static_cast<unsigned>(i); k != 0; k >>= 1, f *= 0.5)
      if (k & 1u) x += f;
    nodes.push_back(2.0 * std::numbers::pi * x);
  }
  return nodes;
}

struct RkhsSampleProjection {
  Vector coefficients;     // gram * c = samples
  double stable_constant;  // lambda_min(gram)^{-1/2}
  double projection_norm;  // ||Q_N f||_Y = sqrt(samples . c)
  double condition_number;
};

/// Recovers Q_N f = sum_j c_j k_{a_j} from the samples f(a_j).
inline RkhsSampleProjection rkhs_project_from_samples(const Matrix& gram, const Vector& samples) {
  require(gram.rows() == gram.cols(), ErrorKind::dimension_mismatch, "gram must be square");
  require_same_dim(gram.rows(), samples.size(), "rkhs samples");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (gram + gram.transpose()));
  const Vector& lambda = eig.eigenvalues();
  const double lmin = lambda.minCoeff();
  const double lmax = lambda.maxCoeff();
  const double cond = lmin > 0.0 ? lmax / lmin : std::numeric_limits<double>::infinity();
  require(lmin > 1e-12, ErrorKind::numerical_failure,
          "gram matrix is near-singular: min eigenvalue " + std::to_string(lmin) +
              ", condition number " + std::to_string(cond));
  const Matrix& v = eig.eigenvectors();
  RkhsSampleProjection out;
  out.coefficients = v * (v.transpose() * samples).cwiseQuotient(lambda);
  out.stable_constant = 1.0 / std::sqrt(lmin);
  out.projection_norm = std::sqrt(std::max(0.0, samples.dot(out.coefficients)));
  out.condition_number = cond;
  return out;
}

}  // namespace fmlab

#endif  // FMLAB_RKHS_HPP
