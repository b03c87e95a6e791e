#ifndef FMLAB_FORWARD_MODEL_HPP
#define FMLAB_FORWARD_MODEL_HPP

#include <memory>
#include <string>
#include <utility>

#include "fmlab/basis.hpp"
#include "fmlab/common.hpp"
#include "fmlab/measurement.hpp"

namespace fmlab {

/// Linearization of a forward map at a fixed point x. Holds whatever state
/// (factorizations, state fields) makes repeated derivative applications cheap.
///
/// Measurement coordinates are Euclidean: the Y inner product of two
/// measurements equals the dot product of their coordinate vectors.
class Linearization {
 public:
  virtual ~Linearization() = default;

  /// F(x) in measurement coordinates.
  virtual const Vector& value() const = 0;
  /// F'(x) tau, tau given in W coordinates.
  virtual Vector apply(const Vector& tau) const = 0;
  /// g with g_j = <F'(x) b_j, r>_Y.
  virtual Vector adjoint(const Vector& r) const = 0;

  /// Column j = F'(x) b_j.
  virtual Matrix jacobian() const {
    const Index d = dim();
    Matrix a(value().size(), d);
    for (Index j = 0; j < d; ++j) a.col(j) = apply(Vector::Unit(d, j));
    return a;
  }

  virtual Index dim() const = 0;
};

/// Capability set every forward model supplies. Implementations are
/// immutable after construction and safe to call from several threads.
class ForwardModel {
 public:
  virtual ~ForwardModel() = default;

  virtual std::string name() const = 0;
  virtual const SubspaceBasis& basis() const = 0;
  virtual Index measurement_dim() const = 0;
  /// Membership of the open admissible set A.
  virtual bool admissible(const Vector& x) const = 0;
  virtual Vector evaluate(const Vector& x) const = 0;
  virtual std::unique_ptr<Linearization> linearize(const Vector& x) const = 0;

  /// Wraps raw coordinates into the model's natural measurement shape.
  virtual MeasurementObject to_measurement(const Vector& coords) const {
    return MeasurementObject::from_vector(coords);
  }

  Index dim() const { return basis().dim(); }
  double norm_x(const Vector& x) const { return basis().sup_norm(x); }
  double norm_y(const Vector& y) const { return y.norm(); }

  Vector derivative_apply(const Vector& x, const Vector& tau) const {
    return linearize(x)->apply(tau);
  }
  Vector derivative_adjoint(const Vector& x, const Vector& r) const {
    return linearize(x)->adjoint(r);
  }

  void require_admissible(const Vector& x, const std::string& context) const {
    require_same_dim(dim(), x.size(), context);
    require(admissible(x), ErrorKind::not_admissible, context + ": point outside admissible set");
  }
};

/// Affine model F(x) = B x + offset on coordinates; used for calibration
/// cases where every constant is known in closed form.
class LinearForwardModel final : public ForwardModel {
 public:
  explicit LinearForwardModel(Matrix b, Vector offset = {})
      : b_(std::move(b)),
        offset_(offset.size() == 0 ? Vector::Zero(b_.rows()) : std::move(offset)),
        basis_(SubspaceBasis("coordinates", Matrix::Identity(b_.cols(), b_.cols()),
                             Vector::Ones(b_.cols()))) {
    require_same_dim(b_.rows(), offset_.size(), "linear model offset");
  }

  std::string name() const override { return "linear"; }
  const SubspaceBasis& basis() const override { return basis_; }
  Index measurement_dim() const override { return b_.rows(); }
  bool admissible(const Vector& x) const override { return x.size() == b_.cols() && x.allFinite(); }
  Vector evaluate(const Vector& x) const override { return b_ * x + offset_; }

  std::unique_ptr<Linearization> linearize(const Vector& x) const override {
    return std::make_unique<Lin>(b_, evaluate(x));
  }

 private:
  class Lin final : public Linearization {
   public:
    Lin(const Matrix& b, Vector value) : b_(b), value_(std::move(value)) {}
    const Vector& value() const override { return value_; }
    Vector apply(const Vector& tau) const override { return b_ * tau; }
    Vector adjoint(const Vector& r) const override { return b_.transpose() * r; }
    Matrix jacobian() const override { return b_; }
    Index dim() const override { return b_.cols(); }

   private:
    const Matrix& b_;
    Vector value_;
  };

  Matrix b_;
  Vector offset_;
  SubspaceBasis basis_;
};

}  // namespace fmlab

#endif  // FMLAB_FORWARD_MODEL_HPP
