#ifndef FMLAB_MEASUREMENT_HPP
#define FMLAB_MEASUREMENT_HPP

#include <utility>

#include "fmlab/common.hpp"
#include "fmlab/linalg.hpp"

namespace fmlab {

enum class NormKind { euclidean, frobenius, spectral };

/// A finite-rank measurement: a flat vector or a square matrix stored
/// row-major in `entries`.
struct MeasurementObject {
  enum class Shape { vector, matrix };

  Shape shape = Shape::vector;
  Index side = 0;  // matrix side length; unused for vectors
  Vector entries;
  NormKind norm_kind = NormKind::euclidean;

  static MeasurementObject from_vector(Vector v) {
    MeasurementObject m;
    m.shape = Shape::vector;
    m.entries = std::move(v);
    return m;
  }

  static MeasurementObject from_matrix(const Matrix& a, NormKind kind = NormKind::frobenius) {
    require(a.rows() == a.cols(), ErrorKind::dimension_mismatch,
            "matrix measurement must be square, got " + std::to_string(a.rows()) + "x" +
                std::to_string(a.cols()));
    MeasurementObject m;
    m.shape = Shape::matrix;
    m.side = a.rows();
    m.entries.resize(a.size());
    for (Index i = 0; i < a.rows(); ++i)
      for (Index j = 0; j < a.cols(); ++j) m.entries(i * a.cols() + j) = a(i, j);
    m.norm_kind = kind;
    return m;
  }

  Index size() const { return entries.size(); }

  Matrix as_matrix() const {
    require(shape == Shape::matrix, ErrorKind::invalid_argument, "measurement is not matrix-shaped");
    Matrix a(side, side);
    for (Index i = 0; i < side; ++i)
      for (Index j = 0; j < side; ++j) a(i, j) = entries(i * side + j);
    return a;
  }

  double norm() const {
    if (norm_kind == NormKind::spectral && shape == Shape::matrix) {
      return linalg::spectral_norm(as_matrix());
    }
    return entries.norm();
  }
};

/// Row-major flattening shared by every matrix-shaped measurement.
inline Vector flatten_row_major(const Matrix& a) {
  Vector v(a.size());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j) v(i * a.cols() + j) = a(i, j);
  return v;
}

inline Matrix unflatten_row_major(const Vector& v, Index side) {
  require_same_dim(side * side, v.size(), "row-major matrix");
  Matrix a(side, side);
  for (Index i = 0; i < side; ++i)
    for (Index j = 0; j < side; ++j) a(i, j) = v(i * side + j);
  return a;
}

}  // namespace fmlab

#endif  // FMLAB_MEASUREMENT_HPP
