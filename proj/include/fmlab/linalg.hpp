#ifndef FMLAB_LINALG_HPP
#define FMLAB_LINALG_HPP

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "fmlab/common.hpp"

namespace fmlab::linalg {

inline double spectral_norm(const Eigen::Ref<const Matrix>& a) {
  if (a.size() == 0) return 0.0;
  // The Gram route is accurate enough for norms and far cheaper for tall matrices.
  if (a.rows() > 4 * a.cols()) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(a.transpose() * a, Eigen::EigenvaluesOnly);
    return std::sqrt(std::max(0.0, eig.eigenvalues().maxCoeff()));
  }
  Eigen::JacobiSVD<Matrix> svd(a);
  return svd.singularValues()(0);
}

inline double max_singular_value(const Eigen::Ref<const Matrix>& a) { return spectral_norm(a); }

inline Vector symmetric_eigenvalues(const Eigen::Ref<const Matrix>& a) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(a, Eigen::EigenvaluesOnly);
  return eig.eigenvalues();
}

inline double min_eigenvalue(const Eigen::Ref<const Matrix>& a) {
  return symmetric_eigenvalues(a).minCoeff();
}

inline double relative_asymmetry(const Eigen::Ref<const Matrix>& a) {
  const double scale = a.norm();
  if (scale == 0.0) return 0.0;
  return (a - a.transpose()).norm() / scale;
}

}  // namespace fmlab::linalg

#endif  // FMLAB_LINALG_HPP
