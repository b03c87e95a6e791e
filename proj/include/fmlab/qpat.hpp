#ifndef FMLAB_QPAT_HPP
#define FMLAB_QPAT_HPP

#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "fmlab/basis.hpp"
#include "fmlab/common.hpp"
#include "fmlab/forward_model.hpp"
#include "fmlab/projection.hpp"

namespace fmlab::qpat {

using SparseMatrix = Eigen::SparseMatrix<double>;

/// Uniform grid on the unit square: n x n interior nodes, spacing h = 1/(n+1).
/// Interior node (i, j), 1 <= i, j <= n, sits at (i h, j h) and has linear
/// index (j - 1) n + (i - 1) (row-major with y as the row).
struct QpatGrid {
  Index n = 0;
  double h = 0.0;
  // Dirichlet data at the boundary neighbours of the interior nodes,
  // each of length n, ordered by the running index.
  Vector phi_bottom, phi_top, phi_left, phi_right;

  static QpatGrid uniform(Index n, const std::function<double(double, double)>& phi = nullptr) {
    require(n >= 1, ErrorKind::invalid_argument, "grid needs at least one interior node");
    QpatGrid g;
    g.n = n;
    g.h = 1.0 / static_cast<double>(n + 1);
    auto value = [&](double x, double y) { return phi ? phi(x, y) : 1.0; };
    g.phi_bottom.resize(n);
    g.phi_top.resize(n);
    g.phi_left.resize(n);
    g.phi_right.resize(n);
    for (Index k = 0; k < n; ++k) {
      const double t = static_cast<double>(k + 1) * g.h;
      g.phi_bottom(k) = value(t, 0.0);
      g.phi_top(k) = value(t, 1.0);
      g.phi_left(k) = value(0.0, t);
      g.phi_right(k) = value(1.0, t);
    }
    const double min_phi = std::min({g.phi_bottom.minCoeff(), g.phi_top.minCoeff(),
                                     g.phi_left.minCoeff(), g.phi_right.minCoeff()});
    require(min_phi > 0.0, ErrorKind::invalid_argument, "boundary data must satisfy min phi > 0");
    return g;
  }

  Index node_count() const { return n * n; }
  Index index(Index i, Index j) const { return (j - 1) * n + (i - 1); }
  double cell_weight() const { return h * h; }

  double min_phi() const {
    return std::min({phi_bottom.minCoeff(), phi_top.minCoeff(), phi_left.minCoeff(), phi_right.minCoeff()});
  }

  /// Boundary contribution of phi to the 5-point system.
  Vector boundary_load() const {
    Vector b = Vector::Zero(node_count());
    const double s = 1.0 / (h * h);
    for (Index k = 1; k <= n; ++k) {
      b(index(k, 1)) += s * phi_bottom(k - 1);
      b(index(k, n)) += s * phi_top(k - 1);
      b(index(1, k)) += s * phi_left(k - 1);
      b(index(n, k)) += s * phi_right(k - 1);
    }
    return b;
  }

  /// Full (n+2) x (n+2) field including the Dirichlet ring; corners are set to
  /// the average of their two neighbours, for export only.
  Matrix with_boundary(const Vector& interior) const {
    require_same_dim(node_count(), interior.size(), "grid field");
    Matrix full = Matrix::Zero(n + 2, n + 2);  // (row j, column i)
    for (Index j = 1; j <= n; ++j)
      for (Index i = 1; i <= n; ++i) full(j, i) = interior(index(i, j));
    for (Index k = 1; k <= n; ++k) {
      full(0, k) = phi_bottom(k - 1);
      full(n + 1, k) = phi_top(k - 1);
      full(k, 0) = phi_left(k - 1);
      full(k, n + 1) = phi_right(k - 1);
    }
    full(0, 0) = 0.5 * (full(0, 1) + full(1, 0));
    full(0, n + 1) = 0.5 * (full(0, n) + full(1, n + 1));
    full(n + 1, 0) = 0.5 * (full(n, 0) + full(n + 1, 1));
    full(n + 1, n + 1) = 0.5 * (full(n + 1, n) + full(n, n + 1));
    return full;
  }
};

/// Sampled field with quadrature weights.
struct DiscreteField {
  Vector values;
  Vector weights;

  double l2_norm() const { return std::sqrt((weights.array() * values.array().square()).sum()); }
  double sup_norm() const { return values.size() == 0 ? 0.0 : values.cwiseAbs().maxCoeff(); }
};

/// Factorized light operator -Delta_h + diag(mu) with homogeneous Dirichlet
/// conditions folded into the right-hand side.
class LightOperator {
 public:
  LightOperator(const QpatGrid& grid, const Vector& mu) : mu_(mu) {
    require_same_dim(grid.node_count(), mu.size(), "absorption field");
    require(mu.allFinite(), ErrorKind::invalid_argument, "absorption must be finite");
    require((mu.array() >= 0.0).all(), ErrorKind::not_admissible,
            "light solve needs a nonnegative absorption at every node");
    const Index n = grid.n;
    const double s = 1.0 / (grid.h * grid.h);
    std::vector<Eigen::Triplet<double>> t;
    t.reserve(static_cast<std::size_t>(5 * grid.node_count()));
    for (Index j = 1; j <= n; ++j) {
      for (Index i = 1; i <= n; ++i) {
        const Index p = grid.index(i, j);
        t.emplace_back(p, p, 4.0 * s + mu(p));
        if (i > 1) t.emplace_back(p, grid.index(i - 1, j), -s);
        if (i < n) t.emplace_back(p, grid.index(i + 1, j), -s);
        if (j > 1) t.emplace_back(p, grid.index(i, j - 1), -s);
        if (j < n) t.emplace_back(p, grid.index(i, j + 1), -s);
      }
    }
    a_.resize(grid.node_count(), grid.node_count());
    a_.setFromTriplets(t.begin(), t.end());
    solver_.compute(a_);
    require(solver_.info() == Eigen::Success, ErrorKind::numerical_failure,
            "light operator factorization failed");
  }

  Vector solve(const Vector& rhs) const {
    Vector x = solver_.solve(rhs);
    // One refinement sweep keeps the relative residual at rounding level.
    const Vector r = rhs - a_ * x;
    x += solver_.solve(r);
    return x;
  }

  double relative_residual(const Vector& x, const Vector& rhs) const {
    const double scale = rhs.norm();
    return scale == 0.0 ? (a_ * x).norm() : (a_ * x - rhs).norm() / scale;
  }

  const SparseMatrix& matrix() const { return a_; }
  const Vector& mu() const { return mu_; }

 private:
  Vector mu_;
  SparseMatrix a_;
  Eigen::SimplicialLDLT<SparseMatrix> solver_;
};

struct LightField {
  Vector u;  // interior nodes
  double relative_residual = 0.0;
};

inline LightField solve_light(const Vector& mu_nodes, const QpatGrid& grid) {
  LightOperator op(grid, mu_nodes);
  const Vector b = grid.boundary_load();
  LightField out;
  out.u = op.solve(b);
  out.relative_residual = op.relative_residual(out.u, b);
  return out;
}

/// Block-indicator labels of the interior nodes for a k x k partition.
inline std::vector<int> block_labels(Index n, Index k) {
  require(k >= 1 && k <= n, ErrorKind::invalid_argument, "block count must lie in [1, n]");
  std::vector<int> labels(static_cast<std::size_t>(n * n));
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < n; ++i) {
      const Index bx = i * k / n;
      const Index by = j * k / n;
      labels[static_cast<std::size_t>(j * n + i)] = static_cast<int>(by * k + bx);
    }
  return labels;
}

/// Orthonormal block-average projection at level N (N x N blocks). Levels
/// that divide each other give nested ranges.
inline ProjectionSpec block_average_projection(Index n, int level) {
  const std::vector<int> labels = block_labels(n, level);
  const Index rank = static_cast<Index>(level) * level;
  Vector counts = Vector::Zero(rank);
  for (int l : labels) counts(l) += 1.0;
  Matrix u = Matrix::Zero(n * n, rank);
  for (std::size_t i = 0; i < labels.size(); ++i)
    u(static_cast<Index>(i), labels[i]) = 1.0 / std::sqrt(counts(labels[i]));
  return ProjectionSpec::nested_orthogonal(level, std::move(u), "block-average", n);
}

/// Tensor DCT-II projection keeping frequencies (kx, ky) < N.
inline ProjectionSpec tensor_cosine_projection(Index n, int level) {
  require(level >= 1 && level <= n, ErrorKind::invalid_argument, "cosine level must lie in [1, n]");
  Matrix c(n, level);
  for (Index k = 0; k < level; ++k) {
    const double scale = std::sqrt((k == 0 ? 1.0 : 2.0) / static_cast<double>(n));
    for (Index i = 0; i < n; ++i)
      c(i, k) = scale * std::cos(std::numbers::pi * static_cast<double>(k) * (static_cast<double>(i) + 0.5) /
                                 static_cast<double>(n));
  }
  const Index rank = static_cast<Index>(level) * level;
  Matrix u(n * n, rank);
  for (Index ky = 0; ky < level; ++ky)
    for (Index kx = 0; kx < level; ++kx) {
      const Index col = ky * level + kx;
      for (Index j = 0; j < n; ++j)
        for (Index i = 0; i < n; ++i) u(j * n + i, col) = c(i, kx) * c(j, ky);
    }
  return ProjectionSpec::nested_orthogonal(level, std::move(u), "tensor-cosine", n);
}

/// mu -> H = mu u(mu). Measurement coordinates are h * H, so their Euclidean
/// norm is the quadrature L2 norm of H.
class QpatModel final : public ForwardModel {
 public:
  QpatModel(QpatGrid grid, Index blocks, double lambda = 2.0)
      : grid_(std::move(grid)),
        blocks_(blocks),
        lambda_(lambda),
        basis_(SubspaceBasis::indicators("qpat-blocks-" + std::to_string(blocks) + "x" + std::to_string(blocks),
                                         block_labels(grid_.n, blocks), static_cast<int>(blocks * blocks),
                                         Vector::Constant(grid_.node_count(), grid_.cell_weight()))),
        load_(grid_.boundary_load()) {
    require(lambda >= 1.0, ErrorKind::invalid_argument, "Lambda must be >= 1");
  }

  std::string name() const override { return "qpat"; }
  const SubspaceBasis& basis() const override { return basis_; }
  Index measurement_dim() const override { return grid_.node_count(); }
  const QpatGrid& grid() const { return grid_; }
  Index blocks() const { return blocks_; }
  double lambda() const { return lambda_; }

  BoxSet default_box() const {
    return BoxSet::cube(dim(), 1.0 / lambda_, lambda_, basis_.label());
  }

  bool admissible(const Vector& x) const override {
    if (x.size() != dim() || !x.allFinite()) return false;
    return (basis_.field(x).array() > 0.0).all();
  }

  Vector absorption(const Vector& x) const { return basis_.field(x); }

  LightField light(const Vector& x) const { return solve_light(absorption(x), grid_); }

  DiscreteField forward_field(const Vector& x) const {
    const Vector mu = absorption(x);
    const LightField l = solve_light(mu, grid_);
    return {mu.cwiseProduct(l.u), basis_.weights()};
  }

  Vector evaluate(const Vector& x) const override {
    require_admissible(x, "qpat forward");
    return grid_.h * forward_field(x).values;
  }

  std::unique_ptr<Linearization> linearize(const Vector& x) const override {
    require_admissible(x, "qpat linearization");
    return std::make_unique<Lin>(*this, x);
  }

  /// Sup norm of mu1 - mu2 - [(F1 - F2)/u1 + F2 (u2 - u1)/(u1 u2)].
  double identity_residual(const Vector& x1, const Vector& x2) const {
    const Vector mu1 = absorption(x1), mu2 = absorption(x2);
    const Vector u1 = solve_light(mu1, grid_).u, u2 = solve_light(mu2, grid_).u;
    require(u1.minCoeff() >= 1e-8 && u2.minCoeff() >= 1e-8, ErrorKind::numerical_failure,
            "light field too close to zero for the identity check");
    const Vector f1 = mu1.cwiseProduct(u1), f2 = mu2.cwiseProduct(u2);
    const Vector rebuilt = (f1 - f2).cwiseQuotient(u1) +
                           f2.cwiseProduct((u2 - u1).cwiseQuotient(u1.cwiseProduct(u2)));
    return (mu1 - mu2 - rebuilt).cwiseAbs().maxCoeff();
  }

  /// Lower bound on u over {mu <= Lambda}: by the discrete comparison
  /// principle u(mu) >= min(phi) * u_1(Lambda), with u_1 the solution for phi = 1.
  double positivity_floor() const {
    const QpatGrid unit = QpatGrid::uniform(grid_.n);
    const Vector u = solve_light(Vector::Constant(unit.node_count(), lambda_), unit).u;
    return grid_.min_phi() * u.minCoeff();
  }

 private:
  class Lin final : public Linearization {
   public:
    Lin(const QpatModel& m, const Vector& x)
        : model_(m), mu_(m.absorption(x)), op_(m.grid_, mu_) {
      u_ = op_.solve(m.load_);
      value_ = m.grid_.h * mu_.cwiseProduct(u_);
    }

    const Vector& value() const override { return value_; }
    Index dim() const override { return model_.dim(); }

    Vector apply(const Vector& tau) const override {
      const Vector t = model_.basis_.field(tau);
      const Vector tu = t.cwiseProduct(u_);
      const Vector v = op_.solve(-tu);
      return model_.grid_.h * (tu + mu_.cwiseProduct(v));
    }

    Vector adjoint(const Vector& r) const override {
      require_same_dim(model_.measurement_dim(), r.size(), "qpat adjoint residual");
      const Vector s = model_.grid_.h * r;
      const Vector w = op_.solve(-mu_.cwiseProduct(s));
      return model_.basis_.fields().transpose() * u_.cwiseProduct(s + w);
    }

    Matrix jacobian() const override {
      const Index d = dim();
      Matrix a(value_.size(), d);
      for (Index j = 0; j < d; ++j) a.col(j) = apply(Vector::Unit(d, j));
      return a;
    }

    const Vector& light() const { return u_; }

   private:
    const QpatModel& model_;
    Vector mu_;
    LightOperator op_;
    Vector u_;
    Vector value_;
  };

  QpatGrid grid_;
  Index blocks_;
  double lambda_;
  SubspaceBasis basis_;
  Vector load_;
};

}  // namespace fmlab::qpat

#endif  // FMLAB_QPAT_HPP
