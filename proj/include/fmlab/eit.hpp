#ifndef FMLAB_EIT_HPP
#define FMLAB_EIT_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "fmlab/basis.hpp"
#include "fmlab/common.hpp"
#include "fmlab/forward_model.hpp"
#include "fmlab/linalg.hpp"
#include "fmlab/measurement.hpp"

namespace fmlab::eit {

using SparseMatrix = Eigen::SparseMatrix<double>;
using Point = Eigen::Vector2d;
using Triangle = std::array<Index, 3>;

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

inline double angle_of(const Point& p) {
  const double a = std::atan2(p.y(), p.x());
  return a < 0.0 ? a + kTwoPi : a;
}

struct DiskMesh {
  std::vector<Point> vertices;
  std::vector<Triangle> triangles;
  std::vector<Index> boundary;  // counter-clockwise from angle 0
  double h = 0.0;               // longest edge
  Vector areas;
  Vector boundary_edge_lengths;  // edge k joins boundary[k] and boundary[k+1]

  Index vertex_count() const { return static_cast<Index>(vertices.size()); }
  Index triangle_count() const { return static_cast<Index>(triangles.size()); }
  Index boundary_count() const { return static_cast<Index>(boundary.size()); }
};

namespace detail {

inline double signed_area(const Point& a, const Point& b, const Point& c) {
  return 0.5 * ((b.x() - a.x()) * (c.y() - a.y()) - (c.x() - a.x()) * (b.y() - a.y()));
}

inline void add_triangle(std::vector<Triangle>& tris, const std::vector<Point>& v, Index a, Index b, Index c) {
  if (signed_area(v[static_cast<std::size_t>(a)], v[static_cast<std::size_t>(b)], v[static_cast<std::size_t>(c)]) < 0.0)
    std::swap(b, c);
  tris.push_back({a, b, c});
}

// Stitches two concentric rings (vertex ids in angular order) into a band
// of triangles by advancing along whichever ring has the nearer next angle.
inline void zip_rings(std::vector<Triangle>& tris, const std::vector<Point>& v, const std::vector<Index>& inner,
                      const std::vector<Index>& outer) {
  const std::size_t p = inner.size(), q = outer.size();
  auto ang = [&](Index id) { return angle_of(v[static_cast<std::size_t>(id)]); };
  const double a0 = ang(inner[0]);
  std::size_t j0 = 0;
  double best = 1e9;
  for (std::size_t j = 0; j < q; ++j) {
    double d = ang(outer[j]) - a0;
    d -= kTwoPi * std::round(d / kTwoPi);
    if (std::abs(d) < best) {
      best = std::abs(d);
      j0 = j;
    }
  }
  auto unwrap = [&](double base, double a) {
    while (a < base - 1e-12) a += kTwoPi;
    return a;
  };
  const double b0 = ang(outer[j0]);
  auto inner_angle = [&](std::size_t i) { return i >= p ? a0 + kTwoPi : unwrap(a0, ang(inner[i])); };
  auto outer_angle = [&](std::size_t j) {
    return j >= q ? b0 + kTwoPi : unwrap(b0, ang(outer[(j0 + j) % q]));
  };
  std::size_t i = 0, j = 0;
  while (i < p || j < q) {
    const Index ai = inner[i % p], bj = outer[(j0 + j) % q];
    const bool advance_inner = j >= q || (i < p && inner_angle(i + 1) <= outer_angle(j + 1));
    if (advance_inner) {
      add_triangle(tris, v, ai, inner[(i + 1) % p], bj);
      ++i;
    } else {
      add_triangle(tris, v, ai, outer[(j0 + j + 1) % q], bj);
      ++j;
    }
  }
}

inline DiskMesh build_ring_mesh(double h, Index boundary_count, double jitter) {
  // Ring spacing s keeps the zipped diagonals near h; radial steps are
  // halved at the boundary, where the high-frequency potentials live.
  const double s = h / std::sqrt(2.0);
  const double hb = kTwoPi / static_cast<double>(boundary_count);
  auto tangential = [&](double r) { return std::min(std::max(s, hb), hb + 0.5 * (1.0 - r)); };
  auto spacing = [&](double r) { return std::min(tangential(r), 0.5 * hb + 0.5 * (1.0 - r)); };
  std::vector<double> radii{1.0};
  for (;;) {
    const double r = radii.back() - spacing(radii.back());
    if (r < 0.5 * spacing(r)) break;
    radii.push_back(r);
  }
  DiskMesh mesh;
  auto& v = mesh.vertices;
  std::vector<std::vector<Index>> rings;
  for (std::size_t k = 0; k < radii.size(); ++k) {
    const double r = radii[k];
    const Index m = k == 0 ? boundary_count
                           : std::max<Index>(6, static_cast<Index>(std::lround(kTwoPi * r / tangential(r))));
    const double offset = k == 0 ? 0.0 : (0.5 * static_cast<double>(k % 2) + jitter) * kTwoPi / m;
    std::vector<Index> ring;
    for (Index j = 0; j < m; ++j) {
      const double t = offset + kTwoPi * static_cast<double>(j) / static_cast<double>(m);
      ring.push_back(static_cast<Index>(v.size()));
      v.emplace_back(r * std::cos(t), r * std::sin(t));
    }
    rings.push_back(std::move(ring));
  }
  // Rings are stored outside-in; stitch neighbours, then fan the centre.
  for (std::size_t k = 0; k + 1 < rings.size(); ++k) {
    auto inner = rings[k + 1];
    std::sort(inner.begin(), inner.end(), [&](Index a, Index b) {
      return angle_of(v[static_cast<std::size_t>(a)]) < angle_of(v[static_cast<std::size_t>(b)]);
    });
    auto outer = rings[k];
    std::sort(outer.begin(), outer.end(), [&](Index a, Index b) {
      return angle_of(v[static_cast<std::size_t>(a)]) < angle_of(v[static_cast<std::size_t>(b)]);
    });
    zip_rings(mesh.triangles, v, inner, outer);
  }
  const Index centre = static_cast<Index>(v.size());
  v.emplace_back(0.0, 0.0);
  {
    auto inner = rings.back();
    std::sort(inner.begin(), inner.end(), [&](Index a, Index b) {
      return angle_of(v[static_cast<std::size_t>(a)]) < angle_of(v[static_cast<std::size_t>(b)]);
    });
    for (std::size_t i = 0; i < inner.size(); ++i)
      add_triangle(mesh.triangles, v, centre, inner[i], inner[(i + 1) % inner.size()]);
  }
  mesh.boundary = rings.front();
  return mesh;
}

inline void finalize_mesh(DiskMesh& mesh) {
  const auto& v = mesh.vertices;
  mesh.areas.resize(mesh.triangle_count());
  mesh.h = 0.0;
  for (Index t = 0; t < mesh.triangle_count(); ++t) {
    const auto& tri = mesh.triangles[static_cast<std::size_t>(t)];
    const Point& a = v[static_cast<std::size_t>(tri[0])];
    const Point& b = v[static_cast<std::size_t>(tri[1])];
    const Point& c = v[static_cast<std::size_t>(tri[2])];
    mesh.areas(t) = signed_area(a, b, c);
    mesh.h = std::max({mesh.h, (a - b).norm(), (b - c).norm(), (c - a).norm()});
  }
  const Index nb = mesh.boundary_count();
  mesh.boundary_edge_lengths.resize(nb);
  for (Index k = 0; k < nb; ++k)
    mesh.boundary_edge_lengths(k) = (v[static_cast<std::size_t>(mesh.boundary[static_cast<std::size_t>(k)])] -
                                     v[static_cast<std::size_t>(mesh.boundary[static_cast<std::size_t>((k + 1) % nb)])])
                                        .norm();
}

inline bool mesh_is_valid(const DiskMesh& mesh) {
  if (mesh.areas.size() == 0 || mesh.areas.minCoeff() <= 1e-10 * mesh.h * mesh.h) return false;
  double prev = -1.0;
  for (Index id : mesh.boundary) {
    const Point& p = mesh.vertices[static_cast<std::size_t>(id)];
    if (std::abs(p.norm() - 1.0) > 1e-12) return false;
    const double a = angle_of(p);
    if (a <= prev) return false;
    prev = a;
  }
  return std::abs(mesh.areas.sum() - 0.5 * mesh.boundary_count() * std::sin(kTwoPi / mesh.boundary_count())) < 1e-9;
}

}  // namespace detail

/// Quasi-uniform ring triangulation of the unit disk. The boundary carries
/// at least `min_boundary` vertices (rounded up to a multiple of 4 so the
/// quadrant rays pass through boundary vertices); the radial spacing is
/// graded from the boundary spacing up to h_target in the interior.
inline DiskMesh mesh_disk(double h_target, Index min_boundary = 128, std::uint64_t seed = 0) {
  require(h_target >= 0.01 && h_target <= 0.3, ErrorKind::invalid_argument,
          "mesh size must lie in [0.01, 0.3], got " + std::to_string(h_target));
  Index nb = std::max<Index>(min_boundary, static_cast<Index>(std::ceil(kTwoPi * std::sqrt(2.0) / h_target)));
  nb = std::max<Index>(8, (nb + 3) / 4 * 4);
  std::mt19937_64 rng(seed);
  for (int attempt = 0; attempt < 5; ++attempt) {
    const double jitter = attempt == 0 ? 0.0 : uniform(rng, -0.2, 0.2);
    DiskMesh mesh = detail::build_ring_mesh(h_target, nb, jitter);
    detail::finalize_mesh(mesh);
    if (detail::mesh_is_valid(mesh)) return mesh;
  }
  throw Error(ErrorKind::numerical_failure, "disk mesh generation produced degenerate triangles after 5 attempts");
}

/// Sector label of every triangle (by centroid angle), sector 0 starting at angle 0.
inline std::vector<int> sector_labels(const DiskMesh& mesh, int sectors) {
  require(sectors >= 1, ErrorKind::invalid_argument, "sector count must be positive");
  std::vector<int> labels(mesh.triangles.size());
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    Point c = Point::Zero();
    for (Index id : mesh.triangles[t]) c += mesh.vertices[static_cast<std::size_t>(id)];
    const double a = angle_of(c / 3.0);
    labels[t] = std::min(sectors - 1, static_cast<int>(a / (kTwoPi / sectors)));
  }
  return labels;
}

/// Orthonormal trig mode m (0-based) in the order cos t, sin t, cos 2t, sin 2t, ...
inline double trig_mode(Index m, double t) {
  const double k = static_cast<double>(m / 2 + 1);
  return (m % 2 == 0 ? std::cos(k * t) : std::sin(k * t)) / std::sqrt(std::numbers::pi);
}

/// P1 finite elements on a disk mesh with the Neumann problem
///   -div(sigma grad u) = 0,  sigma du/dn = g,  int_{dOmega} u ds = 0,
/// the mean constraint carried by one Lagrange multiplier.
class DiskFem {
 public:
  explicit DiskFem(DiskMesh mesh) : mesh_(std::move(mesh)) {
    const Index nv = mesh_.vertex_count();
    const Index nt = mesh_.triangle_count();
    grads_.resize(static_cast<std::size_t>(nt));
    for (Index t = 0; t < nt; ++t) {
      const auto& tri = mesh_.triangles[static_cast<std::size_t>(t)];
      const Point& a = vertex(tri[0]);
      const Point& b = vertex(tri[1]);
      const Point& c = vertex(tri[2]);
      const double twice = 2.0 * mesh_.areas(t);
      Eigen::Matrix<double, 2, 3> g;
      g << b.y() - c.y(), c.y() - a.y(), a.y() - b.y(), c.x() - b.x(), a.x() - c.x(), b.x() - a.x();
      grads_[static_cast<std::size_t>(t)] = g / twice;
    }
    // Boundary trace weights and midpoint angles.
    const Index nb = mesh_.boundary_count();
    trace_weights_ = Vector::Zero(nv);
    edge_mid_angle_.resize(nb);
    for (Index k = 0; k < nb; ++k) {
      const Index p = mesh_.boundary[static_cast<std::size_t>(k)];
      const Index q = mesh_.boundary[static_cast<std::size_t>((k + 1) % nb)];
      const double len = mesh_.boundary_edge_lengths(k);
      trace_weights_(p) += 0.5 * len;
      trace_weights_(q) += 0.5 * len;
      edge_mid_angle_(k) = angle_of(vertex(p) + vertex(q));
    }
    // Augmented pattern: stiffness block plus the multiplier row/column.
    std::vector<Eigen::Triplet<double>> trip;
    for (const auto& tri : mesh_.triangles)
      for (Index a : tri)
        for (Index b : tri) trip.emplace_back(a, b, 0.0);
    pattern_.resize(nv, nv);
    pattern_.setFromTriplets(trip.begin(), trip.end());
    pattern_.makeCompressed();
    slots_.resize(static_cast<std::size_t>(nt));
    for (Index t = 0; t < nt; ++t) {
      const auto& tri = mesh_.triangles[static_cast<std::size_t>(t)];
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) slots_[static_cast<std::size_t>(t)][a * 3 + b] = slot(tri[a], tri[b]);
    }
    for (Index k = 0; k < pattern_.outerSize(); ++k)
      for (SparseMatrix::InnerIterator it(pattern_, k); it; ++it)
        if (it.row() == kPin || it.col() == kPin) pin_slots_.push_back(static_cast<Index>(&it.value() - pattern_.valuePtr()));
  }

  const DiskMesh& mesh() const { return mesh_; }
  Index vertex_count() const { return mesh_.vertex_count(); }
  const Point& vertex(Index id) const { return mesh_.vertices[static_cast<std::size_t>(id)]; }
  const Eigen::Matrix<double, 2, 3>& gradients(Index t) const { return grads_[static_cast<std::size_t>(t)]; }
  const Vector& trace_weights() const { return trace_weights_; }

  /// Load vector of int g phi_p ds by the edge-midpoint rule.
  Vector boundary_load(const std::function<double(double)>& g) const {
    Vector b = Vector::Zero(vertex_count());
    const Index nb = mesh_.boundary_count();
    for (Index k = 0; k < nb; ++k) {
      const double val = 0.5 * mesh_.boundary_edge_lengths(k) * g(edge_mid_angle_(k));
      b(mesh_.boundary[static_cast<std::size_t>(k)]) += val;
      b(mesh_.boundary[static_cast<std::size_t>((k + 1) % nb)]) += val;
    }
    return b;
  }

  /// Midpoint-rule integral of g and its L2 norm over the boundary.
  std::pair<double, double> boundary_moments(const std::function<double(double)>& g) const {
    double integral = 0.0, sq = 0.0;
    for (Index k = 0; k < mesh_.boundary_count(); ++k) {
      const double val = g(edge_mid_angle_(k));
      integral += mesh_.boundary_edge_lengths(k) * val;
      sq += mesh_.boundary_edge_lengths(k) * val * val;
    }
    return {integral, std::sqrt(sq)};
  }

  Matrix trig_loads(Index modes) const {
    Matrix b(vertex_count(), modes);
    for (Index m = 0; m < modes; ++m) b.col(m) = boundary_load([m](double t) { return trig_mode(m, t); });
    return b;
  }

  double boundary_mean(const Vector& u) const { return trace_weights_.dot(u); }

  /// Factorized Neumann system for one conductivity (element values).
  ///
  /// The saddle system [K c; c^T 0][u; l] = [b; 0] has l = 1^T b / 1^T c and
  /// u the zero-trace-mean solution of K u = b - l c. That u is computed from
  /// the SPD matrix with one vertex pinned, followed by a constant shift.
  class Solver {
   public:
    Solver(const DiskFem& fem, const Vector& sigma) : fem_(fem) {
      require_same_dim(fem.mesh_.triangle_count(), sigma.size(), "element conductivity");
      require(sigma.allFinite() && (sigma.array() > 0.0).all(), ErrorKind::not_admissible,
              "conductivity must be positive on every element");
      k_ = fem.pattern_;
      double* values = k_.valuePtr();
      std::fill(values, values + k_.nonZeros(), 0.0);
      for (Index t = 0; t < fem.mesh_.triangle_count(); ++t) {
        const auto& g = fem.grads_[static_cast<std::size_t>(t)];
        const Eigen::Matrix3d ke = (sigma(t) * fem.mesh_.areas(t)) * (g.transpose() * g);
        const auto& s = fem.slots_[static_cast<std::size_t>(t)];
        for (int a = 0; a < 3; ++a)
          for (int b = 0; b < 3; ++b) values[s[a * 3 + b]] += ke(a, b);
      }
      SparseMatrix pinned = k_;
      for (Index slot : fem.pin_slots_) pinned.valuePtr()[slot] = 0.0;
      pinned.coeffRef(kPin, kPin) = 1.0;
      llt_.compute(pinned);
      require(llt_.info() == Eigen::Success, ErrorKind::numerical_failure, "Neumann system factorization failed");
    }

    /// Columns of `loads` are right-hand sides over the vertices; returns the
    /// zero-boundary-mean solutions.
    Matrix solve(const Matrix& loads) const {
      require_same_dim(fem_.vertex_count(), loads.rows(), "Neumann load");
      const Vector& c = fem_.trace_weights_;
      const double csum = c.sum();
      Matrix rhs = loads;
      for (Index j = 0; j < rhs.cols(); ++j) rhs.col(j) -= (rhs.col(j).sum() / csum) * c;
      rhs.row(kPin).setZero();
      Matrix u = llt_.solve(rhs);
      for (Index j = 0; j < u.cols(); ++j) u.col(j).array() -= c.dot(u.col(j)) / csum;
      return u;
    }

    /// Relative residual of the augmented saddle system at (u, l).
    double relative_residual(const Matrix& u, const Matrix& loads) const {
      const Vector& c = fem_.trace_weights_;
      double num = 0.0, den = 0.0;
      for (Index j = 0; j < u.cols(); ++j) {
        const double l = loads.col(j).sum() / c.sum();
        const Vector r = loads.col(j) - k_ * u.col(j) - l * c;
        const double m = c.dot(u.col(j));
        num += r.squaredNorm() + m * m;
        den += loads.col(j).squaredNorm();
      }
      return den == 0.0 ? std::sqrt(num) : std::sqrt(num / den);
    }

   private:
    const DiskFem& fem_;
    SparseMatrix k_;
    Eigen::SimplicialLLT<SparseMatrix> llt_;
  };

 private:
  Index slot(Index row, Index col) const {
    for (SparseMatrix::InnerIterator it(pattern_, col); it; ++it)
      if (it.row() == row) return static_cast<Index>(&it.value() - pattern_.valuePtr());
    throw Error(ErrorKind::numerical_failure, "sparsity slot missing");
  }

  DiskMesh mesh_;
  std::vector<Eigen::Matrix<double, 2, 3>> grads_;
  Vector trace_weights_;
  Vector edge_mid_angle_;
  SparseMatrix pattern_;
  std::vector<std::array<Index, 9>> slots_;
  std::vector<Index> pin_slots_;
  static constexpr Index kPin = 0;
};

/// Solves the Neumann problem for boundary flux g with int g ds = 0.
inline Vector solve_neumann(const DiskFem& fem, const Vector& sigma, const std::function<double(double)>& g) {
  const auto [integral, norm] = fem.boundary_moments(g);
  require(std::abs(integral) <= 1e-12 * std::max(norm, 1e-300) || norm == 0.0, ErrorKind::invalid_argument,
          "incompatible Neumann data: boundary integral " + std::to_string(integral));
  if (norm == 0.0) return Vector::Zero(fem.vertex_count());
  DiskFem::Solver solver(fem, sigma);
  return solver.solve(fem.boundary_load(g)).col(0);
}

struct NdMatrix {
  Matrix entries;  // 2N x 2N, symmetrized
  int level = 0;
  double raw_asymmetry = 0.0;  // ||M - M^T||_F / ||M||_F before symmetrization
};

/// M_{mn} = int trace(u^{e_m}) e_n ds for the first N cos/sin pairs.
inline NdMatrix nd_matrix(const DiskFem& fem, const Vector& sigma, int level) {
  require(level >= 1, ErrorKind::invalid_argument, "ND level must be >= 1");
  require(fem.mesh().boundary_count() >= 4 * level, ErrorKind::invalid_argument,
          "boundary resolution too coarse for frequency " + std::to_string(level));
  const Matrix b = fem.trig_loads(2 * level);
  DiskFem::Solver solver(fem, sigma);
  const Matrix u = solver.solve(b);
  const Matrix m = b.transpose() * u;
  NdMatrix out;
  out.level = level;
  out.raw_asymmetry = linalg::relative_asymmetry(m);
  out.entries = 0.5 * (m + m.transpose());
  return out;
}

/// Continuum value of ||J (I - P_N)||_{L2 -> H^{-1/2}} on the unit disk.
inline double delta_N(int level) {
  require(level >= 1, ErrorKind::invalid_argument, "delta_N needs N >= 1");
  return 1.0 / std::sqrt(static_cast<double>(level) + 1.0);
}

/// Discrete counterpart of delta_N^2: largest Rayleigh quotient of the
/// sigma = 1 ND matrix on the trig modes above N (up to `top`).
inline double discrete_delta_squared(const DiskFem& fem, int level, int top) {
  require(top > level, ErrorKind::invalid_argument, "top frequency must exceed N");
  const NdMatrix m = nd_matrix(fem, Vector::Ones(fem.mesh().triangle_count()), top);
  const Index start = 2 * static_cast<Index>(level);
  const Index len = m.entries.rows() - start;
  return linalg::symmetric_eigenvalues(m.entries.block(start, start, len, len)).maxCoeff();
}

/// sigma -> M_sigma (2 Nmax x 2 Nmax, row-major) with the Frobenius inner product.
class EitModel final : public ForwardModel {
 public:
  EitModel(DiskMesh mesh, int n_max, int sectors = 4, double lambda = 2.0)
      : fem_(std::make_shared<DiskFem>(std::move(mesh))),
        n_max_(n_max),
        sectors_(sectors),
        lambda_(lambda),
        basis_(SubspaceBasis::indicators("eit-sectors-" + std::to_string(sectors), sector_labels(fem_->mesh(), sectors),
                                         sectors, fem_->mesh().areas)),
        loads_(fem_->trig_loads(2 * n_max)) {
    require(n_max >= 1, ErrorKind::invalid_argument, "Nmax must be >= 1");
    require(fem_->mesh().boundary_count() >= 8 * n_max, ErrorKind::invalid_argument,
            "boundary needs at least 8 Nmax vertices");
    require(lambda >= 1.0, ErrorKind::invalid_argument, "lambda must be >= 1");
  }

  std::string name() const override { return "eit"; }
  const SubspaceBasis& basis() const override { return basis_; }
  Index measurement_dim() const override { return side() * side(); }
  Index side() const { return 2 * static_cast<Index>(n_max_); }
  int n_max() const { return n_max_; }
  int sectors() const { return sectors_; }
  double lambda() const { return lambda_; }
  const DiskFem& fem() const { return *fem_; }

  BoxSet default_box() const { return BoxSet::cube(dim(), 1.0 / lambda_, lambda_, basis_.label()); }

  bool admissible(const Vector& x) const override {
    if (x.size() != dim() || !x.allFinite()) return false;
    return (basis_.field(x).array() > 0.0).all();
  }

  Vector conductivity(const Vector& x) const { return basis_.field(x); }

  Vector evaluate(const Vector& x) const override {
    require_admissible(x, "eit forward");
    DiskFem::Solver solver(*fem_, conductivity(x));
    const Matrix m = loads_.transpose() * solver.solve(loads_);
    return flatten_row_major(0.5 * (m + m.transpose()));
  }

  MeasurementObject to_measurement(const Vector& coords) const override {
    MeasurementObject out = MeasurementObject::from_matrix(unflatten_row_major(coords, side()));
    return out;
  }

  std::unique_ptr<Linearization> linearize(const Vector& x) const override {
    require_admissible(x, "eit linearization");
    return std::make_unique<Lin>(*this, x);
  }

  /// d matrices (2N x 2N) of the derivative in the direction of each basis field.
  std::vector<Matrix> derivative_tensor(const Vector& x, int level) const {
    require(level >= 1 && level <= n_max_, ErrorKind::invalid_argument, "level must lie in [1, Nmax]");
    const auto lin = linearize(x);
    const Index block = 2 * static_cast<Index>(level);
    std::vector<Matrix> out;
    for (Index j = 0; j < dim(); ++j) {
      const Matrix full = unflatten_row_major(lin->apply(Vector::Unit(dim(), j)), side());
      out.push_back(full.topLeftCorner(block, block));
    }
    return out;
  }

 private:
  class Lin final : public Linearization {
   public:
    Lin(const EitModel& m, const Vector& x) : model_(m) {
      const DiskFem& fem = *m.fem_;
      DiskFem::Solver solver(fem, m.conductivity(x));
      const Matrix u = solver.solve(m.loads_);
      const Matrix nd = m.loads_.transpose() * u;
      value_ = flatten_row_major(0.5 * (nd + nd.transpose()));
      // Rows 2e, 2e+1 hold sqrt(|e|) grad u_m on element e for every current m.
      const Index nt = fem.mesh().triangle_count();
      grads_.resize(2 * nt, m.side());
      for (Index t = 0; t < nt; ++t) {
        const auto& tri = fem.mesh().triangles[static_cast<std::size_t>(t)];
        const auto& g = fem.gradients(t);
        const double w = std::sqrt(fem.mesh().areas(t));
        grads_.middleRows(2 * t, 2) = w * (g.col(0) * u.row(tri[0]) + g.col(1) * u.row(tri[1]) + g.col(2) * u.row(tri[2]));
      }
    }

    const Vector& value() const override { return value_; }
    Index dim() const override { return model_.dim(); }

    // dM = -sum_e tau_e |e| grad u_m . grad u_n, the exact derivative of the discrete ND map.
    Vector apply(const Vector& tau) const override {
      return flatten_row_major(weighted_gram(model_.basis_.field(tau)));
    }

    Vector adjoint(const Vector& r) const override {
      require_same_dim(model_.measurement_dim(), r.size(), "eit adjoint residual");
      const Matrix rm = unflatten_row_major(r, model_.side());
      const Matrix gr = grads_ * rm;
      const Index nt = grads_.rows() / 2;
      Vector q(nt);
      for (Index t = 0; t < nt; ++t)
        q(t) = -(gr.middleRows(2 * t, 2).cwiseProduct(grads_.middleRows(2 * t, 2))).sum();
      return model_.basis_.fields().transpose() * q;
    }

    Matrix jacobian() const override {
      const Index d = dim();
      const Index modes = model_.side();
      Matrix a(modes * modes, d);
      for (Index j = 0; j < d; ++j) a.col(j) = flatten_row_major(weighted_gram(model_.basis_.fields().col(j)));
      return a;
    }

   private:
    // -G^T diag(t) G restricted to the elements where t is nonzero.
    Matrix weighted_gram(const Vector& t) const {
      std::vector<Index> rows;
      for (Index e = 0; e < t.size(); ++e)
        if (t(e) != 0.0) rows.push_back(e);
      const Index modes = model_.side();
      Matrix g(2 * static_cast<Index>(rows.size()), modes);
      Matrix tg(g.rows(), modes);
      for (std::size_t k = 0; k < rows.size(); ++k) {
        const Index e = rows[k];
        g.middleRows(2 * static_cast<Index>(k), 2) = grads_.middleRows(2 * e, 2);
        tg.middleRows(2 * static_cast<Index>(k), 2) = t(e) * grads_.middleRows(2 * e, 2);
      }
      Matrix out(modes, modes);
      out.noalias() = -(tg.transpose() * g);
      return 0.5 * (out + out.transpose());
    }

    const EitModel& model_;
    Vector value_;
    Matrix grads_;
  };

  std::shared_ptr<const DiskFem> fem_;
  int n_max_;
  int sectors_;
  double lambda_;
  SubspaceBasis basis_;
  Matrix loads_;
};

}  // namespace fmlab::eit

#endif  // FMLAB_EIT_HPP
