#ifndef FMLAB_BASIS_HPP
#define FMLAB_BASIS_HPP

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "fmlab/common.hpp"
#include "fmlab/linalg.hpp"

namespace fmlab {

/// Basis of the finite-dimensional unknown space W, sampled on a model grid.
///
/// `fields` holds one column per basis function, one row per grid node (or
/// element); `weights` are the quadrature weights of that grid, so the L2
/// inner product of two fields is sum_i w_i f_i g_i.
class SubspaceBasis {
 public:
  SubspaceBasis(std::string label, Matrix fields, Vector weights)
      : label_(std::move(label)), fields_(std::move(fields)), weights_(std::move(weights)) {
    require(fields_.cols() > 0, ErrorKind::invalid_argument, "basis must have at least one field");
    require_same_dim(fields_.rows(), weights_.size(), "basis quadrature weights");
    require(fields_.allFinite(), ErrorKind::invalid_argument, "basis fields must be finite");
    require((weights_.array() > 0.0).all(), ErrorKind::invalid_argument,
            "quadrature weights must be positive");
    gram_ = fields_.transpose() * weights_.asDiagonal() * fields_;
    const double lmin = linalg::min_eigenvalue(gram_);
    require(lmin > 1e-12, ErrorKind::invalid_argument,
            "basis fields are linearly dependent (Gram min eigenvalue " + std::to_string(lmin) + ")");
    disjoint_indicators_ = detect_indicators();
  }

  /// Disjoint-support indicator basis: node i belongs to the block labels[i]
  /// (or to no block when labels[i] < 0).
  static SubspaceBasis indicators(std::string label, const std::vector<int>& labels, int blocks,
                                  Vector weights) {
    Matrix fields = Matrix::Zero(static_cast<Index>(labels.size()), blocks);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0) continue;
      require(labels[i] < blocks, ErrorKind::invalid_argument, "indicator label out of range");
      fields(static_cast<Index>(i), labels[i]) = 1.0;
    }
    return SubspaceBasis(std::move(label), std::move(fields), std::move(weights));
  }

  Index dim() const { return fields_.cols(); }
  Index node_count() const { return fields_.rows(); }
  const std::string& label() const { return label_; }
  const Matrix& fields() const { return fields_; }
  const Vector& weights() const { return weights_; }
  const Matrix& gram() const { return gram_; }
  bool disjoint_indicators() const { return disjoint_indicators_; }

  Vector field(const Vector& coords) const {
    require_same_dim(dim(), coords.size(), "basis coordinates");
    return fields_ * coords;
  }

  /// X-norm: sup over grid nodes of the represented field.
  double sup_norm(const Vector& coords) const {
    return coords.size() == 0 ? 0.0 : field(coords).cwiseAbs().maxCoeff();
  }

  double l2_norm(const Vector& coords) const {
    return std::sqrt(std::max(0.0, coords.dot(gram_ * coords)));
  }

 private:
  bool detect_indicators() const {
    for (Index i = 0; i < fields_.rows(); ++i) {
      int nonzero = 0;
      for (Index j = 0; j < fields_.cols(); ++j) {
        const double v = fields_(i, j);
        if (v == 0.0) continue;
        if (v != 1.0) return false;
        ++nonzero;
      }
      if (nonzero > 1) return false;
    }
    return true;
  }

  std::string label_;
  Matrix fields_;
  Vector weights_;
  Matrix gram_;
  bool disjoint_indicators_ = false;
};

struct CoefficientVector {
  Vector coords;
  std::string basis_id;
};

/// Coordinate box K = prod_i [lower_i, upper_i]; compact and convex.
struct BoxSet {
  Vector lower;
  Vector upper;
  std::string basis_id;

  BoxSet() = default;
  BoxSet(Vector lo, Vector hi, std::string id = {})
      : lower(std::move(lo)), upper(std::move(hi)), basis_id(std::move(id)) {
    require_same_dim(lower.size(), upper.size(), "box bounds");
    for (Index i = 0; i < lower.size(); ++i) {
      require(lower(i) <= upper(i), ErrorKind::invalid_argument,
              "box lower bound exceeds upper bound on axis " + std::to_string(i));
    }
  }

  static BoxSet cube(Index d, double lo, double hi, std::string id = {}) {
    return BoxSet(Vector::Constant(d, lo), Vector::Constant(d, hi), std::move(id));
  }

  Index dim() const { return lower.size(); }

  bool contains(const Vector& x, double tol = 0.0) const {
    if (x.size() != dim()) return false;
    return ((x.array() >= lower.array() - tol) && (x.array() <= upper.array() + tol)).all();
  }

  Vector clamp(const Vector& x) const { return x.cwiseMax(lower).cwiseMin(upper); }

  Vector center() const { return 0.5 * (lower + upper); }

  /// Sup-norm diameter (exact for indicator bases).
  double diameter() const { return dim() == 0 ? 0.0 : (upper - lower).maxCoeff(); }

  bool is_point() const { return (upper - lower).cwiseAbs().maxCoeff() == 0.0; }
};

}  // namespace fmlab

#endif  // FMLAB_BASIS_HPP
