#ifndef FMLAB_PROJECTION_HPP
#define FMLAB_PROJECTION_HPP

#include <string>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>

#include "fmlab/common.hpp"
#include "fmlab/linalg.hpp"
#include "fmlab/measurement.hpp"
#include "fmlab/rkhs.hpp"

namespace fmlab {

enum class ProjectionKind { nested_orthogonal, two_sided_truncation, rkhs_sampling };

inline const char* to_string(ProjectionKind kind) {
  switch (kind) {
    case ProjectionKind::nested_orthogonal: return "nested-orthogonal";
    case ProjectionKind::two_sided_truncation: return "two-sided-truncation";
    case ProjectionKind::rkhs_sampling: return "rkhs-sampling";
  }
  return "?";
}

inline ProjectionKind projection_kind_from_string(const std::string& s) {
  if (s == "nested-orthogonal") return ProjectionKind::nested_orthogonal;
  if (s == "two-sided-truncation") return ProjectionKind::two_sided_truncation;
  if (s == "rkhs-sampling") return ProjectionKind::rkhs_sampling;
  throw Error(ErrorKind::invalid_argument, "unknown projection kind '" + s + "'");
}

/// Finite-rank measurement operator Q_N acting on measurement coordinates.
///
/// Every family is an orthogonal projection in the Euclidean coordinates of
/// Y, realized explicitly:
///  - nested-orthogonal: Q = U U^T with orthonormal columns U;
///  - two-sided-truncation: y is a side x side matrix (row-major) and
///    Q y = P y P keeps the leading block x block corner;
///  - rkhs-sampling: Q is the projection onto span{k_{a_j}}, computed from
///    the kernel features and an eigen-factorization of their Gram matrix.
/// `coordinates` returns Q y in an orthonormal basis of range(Q), so
/// ||Q y|| = ||coordinates(y)||.
class ProjectionSpec {
 public:
  static ProjectionSpec nested_orthogonal(int level, Matrix basis, std::string generator = "explicit",
                                          Index grid_n = 0) {
    ProjectionSpec p(ProjectionKind::nested_orthogonal, level);
    require(basis.cols() > 0 && basis.rows() >= basis.cols(), ErrorKind::invalid_argument,
            "nested-orthogonal basis must have 1..ambient columns");
    const double ortho = (basis.transpose() * basis - Matrix::Identity(basis.cols(), basis.cols()))
                             .cwiseAbs()
                             .maxCoeff();
    require(ortho < 1e-10, ErrorKind::invalid_argument,
            "nested-orthogonal basis is not orthonormal (deviation " + std::to_string(ortho) + ")");
    p.ambient_ = basis.rows();
    p.rank_ = basis.cols();
    p.basis_ = std::move(basis);
    p.generator_ = std::move(generator);
    p.grid_n_ = grid_n;
    return p;
  }

  static ProjectionSpec identity(Index ambient, int level = 0) {
    ProjectionSpec p(ProjectionKind::nested_orthogonal, level <= 0 ? static_cast<int>(ambient) : level);
    require(ambient > 0, ErrorKind::invalid_argument, "identity projection needs ambient > 0");
    p.ambient_ = ambient;
    p.rank_ = ambient;
    p.generator_ = "identity";
    p.identity_ = true;
    return p;
  }

  /// Keeps the leading 2N x 2N block of a side x side matrix measurement.
  static ProjectionSpec two_sided_truncation(int level, Index side) {
    ProjectionSpec p(ProjectionKind::two_sided_truncation, level);
    const Index block = 2 * static_cast<Index>(level);
    require(block <= side, ErrorKind::dimension_mismatch,
            "truncation block " + std::to_string(block) + " exceeds matrix side " + std::to_string(side));
    p.side_ = side;
    p.block_ = block;
    p.ambient_ = side * side;
    p.rank_ = block * block;
    p.generator_ = "trig-modes";
    return p;
  }

  static ProjectionSpec rkhs_sampling(const SobolevCircleKernel& kernel, std::vector<double> nodes) {
    ProjectionSpec p(ProjectionKind::rkhs_sampling, static_cast<int>(nodes.size()));
    require_distinct_nodes(nodes);
    p.kernel_ = kernel;
    p.nodes_ = std::move(nodes);
    p.ambient_ = kernel.feature_dim();
    p.rank_ = static_cast<Index>(p.nodes_.size());
    p.features_.resize(p.ambient_, p.rank_);
    for (Index j = 0; j < p.rank_; ++j) p.features_.col(j) = kernel.feature(p.nodes_[static_cast<std::size_t>(j)]);
    const Matrix gram = p.features_.transpose() * p.features_;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
    require(eig.eigenvalues().minCoeff() > 1e-12, ErrorKind::numerical_failure,
            "kernel Gram matrix is near-singular for the given nodes");
    p.gram_values_ = eig.eigenvalues();
    p.gram_vectors_ = eig.eigenvectors();
    p.generator_ = "sobolev-circle";
    return p;
  }

  ProjectionKind kind() const { return kind_; }
  int level() const { return level_; }
  Index rank() const { return rank_; }
  Index ambient_dim() const { return ambient_; }
  double norm_bound() const { return norm_bound_; }
  const std::string& generator() const { return generator_; }
  Index grid_n() const { return grid_n_; }
  bool is_identity() const { return identity_; }
  const Matrix& basis() const { return basis_; }
  Index side() const { return side_; }
  Index block() const { return block_; }
  const std::vector<double>& nodes() const { return nodes_; }
  const SobolevCircleKernel& kernel() const { return kernel_; }
  const Vector& gram_eigenvalues() const { return gram_values_; }

  /// Orthonormal coordinates of Q y (length rank()).
  Vector coordinates(const Vector& y) const {
    require_same_dim(ambient_, y.size(), "projection input");
    switch (kind_) {
      case ProjectionKind::nested_orthogonal:
        return identity_ ? y : Vector(basis_.transpose() * y);
      case ProjectionKind::two_sided_truncation: {
        Vector out(rank_);
        for (Index i = 0; i < block_; ++i)
          for (Index j = 0; j < block_; ++j) out(i * block_ + j) = y(i * side_ + j);
        return out;
      }
      case ProjectionKind::rkhs_sampling: {
        const Vector samples = features_.transpose() * y;
        return (gram_vectors_.transpose() * samples).cwiseQuotient(gram_values_.cwiseSqrt());
      }
    }
    return {};
  }

  Matrix coordinates(const Matrix& a) const {
    require_same_dim(ambient_, a.rows(), "projection input");
    Matrix out(rank_, a.cols());
    if (kind_ == ProjectionKind::nested_orthogonal) {
      if (identity_) return a;
      out.noalias() = basis_.transpose() * a;
      return out;
    }
    for (Index j = 0; j < a.cols(); ++j) out.col(j) = coordinates(Vector(a.col(j)));
    return out;
  }

  /// Adjoint of coordinates(): maps rank coordinates back to the ambient space.
  Vector embed(const Vector& c) const {
    require_same_dim(rank_, c.size(), "projection coordinates");
    switch (kind_) {
      case ProjectionKind::nested_orthogonal:
        return identity_ ? c : Vector(basis_ * c);
      case ProjectionKind::two_sided_truncation: {
        Vector out = Vector::Zero(ambient_);
        for (Index i = 0; i < block_; ++i)
          for (Index j = 0; j < block_; ++j) out(i * side_ + j) = c(i * block_ + j);
        return out;
      }
      case ProjectionKind::rkhs_sampling:
        return features_ * (gram_vectors_ * c.cwiseQuotient(gram_values_.cwiseSqrt()));
    }
    return {};
  }

  /// Q y in the ambient coordinates.
  Vector apply(const Vector& y) const {
    require_same_dim(ambient_, y.size(), "projection input");
    switch (kind_) {
      case ProjectionKind::nested_orthogonal:
        return identity_ ? y : Vector(basis_ * (basis_.transpose() * y));
      case ProjectionKind::two_sided_truncation: {
        Vector out = Vector::Zero(ambient_);
        for (Index i = 0; i < block_; ++i)
          for (Index j = 0; j < block_; ++j) out(i * side_ + j) = y(i * side_ + j);
        return out;
      }
      case ProjectionKind::rkhs_sampling: {
        const Vector samples = features_.transpose() * y;
        const Vector c = gram_vectors_ * (gram_vectors_.transpose() * samples).cwiseQuotient(gram_values_);
        return features_ * c;
      }
    }
    return {};
  }

  /// (I - Q) applied to every column of a.
  Matrix residual(const Matrix& a) const {
    require_same_dim(ambient_, a.rows(), "projection residual input");
    if (identity_) return Matrix::Zero(a.rows(), a.cols());
    if (kind_ == ProjectionKind::nested_orthogonal) {
      Matrix out = a;
      out.noalias() -= basis_ * (basis_.transpose() * a);
      return out;
    }
    Matrix out(a.rows(), a.cols());
    for (Index j = 0; j < a.cols(); ++j) {
      const Vector col = a.col(j);
      out.col(j) = col - apply(col);
    }
    return out;
  }

 private:
  ProjectionSpec(ProjectionKind kind, int level) : kind_(kind), level_(level) {
    require(level > 0, ErrorKind::invalid_argument, "projection level must be positive");
  }

  ProjectionKind kind_;
  int level_;
  Index rank_ = 0;
  Index ambient_ = 0;
  double norm_bound_ = 1.0;
  std::string generator_;
  Index grid_n_ = 0;
  bool identity_ = false;
  Matrix basis_;
  Index side_ = 0;
  Index block_ = 0;
  SobolevCircleKernel kernel_;
  std::vector<double> nodes_;
  Matrix features_;
  Vector gram_values_;
  Matrix gram_vectors_;
};

/// Finite-rank image of y. For two-sided truncation of a matrix measurement
/// the result is the leading block itself; every other family returns the
/// image in the ambient coordinates.
inline MeasurementObject project(const ProjectionSpec& spec, const MeasurementObject& y) {
  if (y.size() != spec.ambient_dim()) {
    throw Error(ErrorKind::dimension_mismatch,
                std::string("cannot project a measurement of dimension ") + std::to_string(y.size()) +
                    " with a " + to_string(spec.kind()) + " projection of ambient dimension " +
                    std::to_string(spec.ambient_dim()));
  }
  if (spec.kind() == ProjectionKind::two_sided_truncation) {
    require(y.shape == MeasurementObject::Shape::matrix, ErrorKind::dimension_mismatch,
            "two-sided truncation needs a matrix-shaped measurement");
    MeasurementObject out;
    out.shape = MeasurementObject::Shape::matrix;
    out.side = spec.block();
    out.entries = spec.coordinates(y.entries);
    out.norm_kind = y.norm_kind;
    return out;
  }
  MeasurementObject out = y;
  out.entries = spec.apply(y.entries);
  return out;
}

/// True when range(coarse) is contained in range(fine).
inline bool is_nested(const ProjectionSpec& coarse, const ProjectionSpec& fine, double tol = 1e-10) {
  if (coarse.ambient_dim() != fine.ambient_dim()) return false;
  if (fine.is_identity()) return true;
  if (coarse.is_identity()) return false;
  if (coarse.kind() == ProjectionKind::two_sided_truncation &&
      fine.kind() == ProjectionKind::two_sided_truncation)
    return coarse.block() <= fine.block();
  if (coarse.kind() == ProjectionKind::nested_orthogonal) {
    return fine.residual(coarse.basis()).cwiseAbs().maxCoeff() <= tol;
  }
  return false;
}

/// Spectral norm of T - P_N T P_N, P_N keeping the first N coordinates.
inline double compact_truncation_residual(const Matrix& t, Index level) {
  require(t.rows() == t.cols(), ErrorKind::dimension_mismatch, "truncation operator must be square");
  require(level >= 0 && level <= t.rows(), ErrorKind::dimension_mismatch,
          "truncation level " + std::to_string(level) + " exceeds matrix size " + std::to_string(t.rows()));
  Matrix r = t;
  r.topLeftCorner(level, level).setZero();
  return linalg::spectral_norm(r);
}

}  // namespace fmlab

#endif  // FMLAB_PROJECTION_HPP
