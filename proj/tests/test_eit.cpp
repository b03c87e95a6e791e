#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "fmlab/eit.hpp"
#include "fmlab/io.hpp"
#include "fmlab/projection.hpp"
#include "fmlab/stability.hpp"

using namespace fmlab;
using namespace fmlab::eit;

namespace {

const DiskFem& desk_fem() {
  static const DiskFem fem(mesh_disk(0.05, 128));
  return fem;
}

const EitModel& desk_model() {
  static const EitModel m(mesh_disk(0.05, 128), 16, 4, 2.0);
  return m;
}

// Largest relative deviation of diag(M_1) from the eigenvalues 1/n.
double diag_error(const DiskFem& fem, int level) {
  const NdMatrix m = nd_matrix(fem, Vector::Ones(fem.mesh().triangle_count()), level);
  double err = 0.0;
  for (Index k = 0; k < m.entries.rows(); ++k) {
    const double expected = 1.0 / static_cast<double>(k / 2 + 1);
    err = std::max(err, std::abs(m.entries(k, k) - expected) / expected);
  }
  return err;
}

// L2 error between a P1 field and a closed form, by vertex-average quadrature.
double l2_error(const DiskMesh& mesh, const Vector& u, const std::function<double(const Point&)>& exact) {
  double e = 0.0;
  for (Index t = 0; t < mesh.triangle_count(); ++t) {
    double s = 0.0;
    for (Index v : mesh.triangles[static_cast<std::size_t>(t)]) {
      const double d = u(v) - exact(mesh.vertices[static_cast<std::size_t>(v)]);
      s += d * d;
    }
    e += mesh.areas(t) * s / 3.0;
  }
  return std::sqrt(e);
}

}  // namespace

TEST(Mesh, CoarseMeshStructure) {
  const DiskMesh m = mesh_disk(0.3, 16);
  EXPECT_TRUE(eit::detail::mesh_is_valid(m));
  EXPECT_GT(m.areas.minCoeff(), 0.0);
  EXPECT_EQ(m.boundary_count() % 2, 0);
  EXPECT_GE(m.boundary_count(), 16);
  for (Index b : m.boundary) EXPECT_NEAR(m.vertices[static_cast<std::size_t>(b)].norm(), 1.0, 1e-14);
  // closed loop: boundary edges sum to the inscribed polygon perimeter
  double per = 0.0;
  for (Index k = 0; k < m.boundary_count(); ++k) per += m.boundary_edge_lengths(k);
  EXPECT_NEAR(per, 2.0 * m.boundary_count() * std::sin(std::numbers::pi / m.boundary_count()), 1e-6);
}

TEST(Mesh, BoundaryAnglesStrictlyIncreasing) {
  const DiskMesh m = mesh_disk(0.1, 64);
  double prev = -1.0;
  for (Index b : m.boundary) {
    const double a = angle_of(m.vertices[static_cast<std::size_t>(b)]);
    EXPECT_GT(a, prev);
    prev = a;
  }
}

TEST(Mesh, HalvingQuadruplesVertexCount) {
  const DiskMesh a = mesh_disk(0.1, 8), b = mesh_disk(0.05, 8);
  const double ratio = static_cast<double>(b.vertex_count()) / static_cast<double>(a.vertex_count());
  EXPECT_GT(ratio, 3.0);
  EXPECT_LT(ratio, 5.0);
  EXPECT_LE(b.h, 0.05 * 1.2);
}

TEST(Mesh, RangeChecked) {
  EXPECT_THROW(mesh_disk(0.005), Error);
  EXPECT_THROW(mesh_disk(0.5), Error);
}

TEST(Mesh, CsvExport) {
  const DiskMesh m = mesh_disk(0.3, 16);
  const io::MeshCsv csv = io::mesh_to_csv(m);
  EXPECT_EQ(std::count(csv.boundary.begin(), csv.boundary.end(), '\n'), m.boundary_count() + 2);
  EXPECT_EQ(std::count(csv.triangles.begin(), csv.triangles.end(), '\n'), m.triangle_count() + 2);
}

TEST(Neumann, ZeroFlux) {
  const Vector u = solve_neumann(desk_fem(), Vector::Ones(desk_fem().mesh().triangle_count()), [](double) { return 0.0; });
  EXPECT_EQ(u.norm(), 0.0);
}

TEST(Neumann, IncompatibleDataRejected) {
  EXPECT_THROW(solve_neumann(desk_fem(), Vector::Ones(desk_fem().mesh().triangle_count()), [](double) { return 1.0; }),
               Error);
}

TEST(Neumann, CosineAndSineOracles) {
  const DiskFem& fem = desk_fem();
  const Vector one = Vector::Ones(fem.mesh().triangle_count());
  const Vector u1 = solve_neumann(fem, one, [](double t) { return std::cos(t); });
  const double e1 = l2_error(fem.mesh(), u1, [](const Point& p) { return p.x(); });
  EXPECT_LT(e1, 5e-3);
  const Vector u2 = solve_neumann(fem, one, [](double t) { return std::sin(2.0 * t); });
  const double e2 = l2_error(fem.mesh(), u2, [](const Point& p) { return 0.5 * 2.0 * p.x() * p.y(); });
  EXPECT_LT(e2, 5e-3);
  // zero boundary mean
  EXPECT_LT(std::abs(fem.boundary_mean(u1)), 1e-14);
}

TEST(Neumann, ErrorIsSecondOrder) {
  const DiskFem coarse(mesh_disk(0.1, 64)), fine(mesh_disk(0.05, 64));
  auto err = [](const DiskFem& fem) {
    // P1 reproduces x exactly, so measure on the quadratic solution xy
    const Vector u =
        solve_neumann(fem, Vector::Ones(fem.mesh().triangle_count()), [](double t) { return std::sin(2.0 * t); });
    return l2_error(fem.mesh(), u, [](const Point& p) { return p.x() * p.y(); });
  };
  const double ratio = err(coarse) / err(fine);
  EXPECT_GT(ratio, 3.0);
  EXPECT_LT(ratio, 5.0);
}

TEST(Neumann, SaddleResidual) {
  const DiskFem& fem = desk_fem();
  const Vector sigma = Vector::LinSpaced(fem.mesh().triangle_count(), 0.6, 1.8);
  const DiskFem::Solver s(fem, sigma);
  const Matrix b = fem.trig_loads(8);
  EXPECT_LE(s.relative_residual(s.solve(b), b), 1e-12);
}

TEST(NdMatrix, UnitConductivityLevelTwo) {
  const NdMatrix m = nd_matrix(desk_fem(), Vector::Ones(desk_fem().mesh().triangle_count()), 2);
  const double expected[] = {1.0, 1.0, 0.5, 0.5};
  for (Index k = 0; k < 4; ++k) EXPECT_NEAR(m.entries(k, k), expected[k], 2e-2 * expected[k]);
  EXPECT_LT((m.entries - Matrix(m.entries.diagonal().asDiagonal())).cwiseAbs().maxCoeff(), 2e-2);
}

TEST(NdMatrix, DiagonalErrorLevelEight) { EXPECT_LE(diag_error(desk_fem(), 8), 2e-2); }

TEST(NdMatrix, SymmetryAndAsymmetryMetric) {
  const DiskFem& fem = desk_fem();
  std::mt19937_64 rng(3);
  Vector sigma(fem.mesh().triangle_count());
  for (Index t = 0; t < sigma.size(); ++t) sigma(t) = uniform(rng, 0.5, 2.0);
  const NdMatrix m = nd_matrix(fem, sigma, 4);
  EXPECT_LE(linalg::relative_asymmetry(m.entries), 1e-10);
  EXPECT_LE(m.raw_asymmetry, 1e-9);
}

TEST(NdMatrix, ConstantScaling) {
  const DiskFem& fem = desk_fem();
  const Index nt = fem.mesh().triangle_count();
  const NdMatrix a = nd_matrix(fem, Vector::Ones(nt), 3), b = nd_matrix(fem, Vector::Constant(nt, 2.5), 3);
  EXPECT_LT((b.entries - a.entries / 2.5).norm(), 1e-12 * a.entries.norm());
}

TEST(NdMatrix, SpectralOrdering) {
  const NdMatrix m = nd_matrix(desk_fem(), Vector::Ones(desk_fem().mesh().triangle_count()), 8);
  for (Index k = 2; k < m.entries.rows(); k += 2) EXPECT_LT(m.entries(k, k), m.entries(k - 2, k - 2));
}

TEST(NdMatrix, NeedsBoundaryResolution) {
  const DiskFem fem(mesh_disk(0.3, 16));
  const int too_high = static_cast<int>(fem.mesh().boundary_count() / 4) + 1;
  EXPECT_THROW(nd_matrix(fem, Vector::Ones(fem.mesh().triangle_count()), too_high), Error);
}

TEST(Model, TruncationConsistency) {
  const EitModel& m = desk_model();
  const Vector x = Eigen::Vector4d(0.7, 1.5, 1.2, 0.9);
  const Vector full = m.evaluate(x);
  const ProjectionSpec p = ProjectionSpec::two_sided_truncation(3, m.side());
  const MeasurementObject block = project(p, m.to_measurement(full));
  const NdMatrix direct = nd_matrix(m.fem(), m.conductivity(x), 3);
  EXPECT_LT((block.as_matrix() - direct.entries).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Model, DerivativeTensorZeroDirectionAndSymmetry) {
  const EitModel& m = desk_model();
  const Vector x = Eigen::Vector4d(0.7, 1.5, 1.2, 0.9);
  EXPECT_EQ(m.linearize(x)->apply(Vector::Zero(4)).norm(), 0.0);
  for (const Matrix& d : m.derivative_tensor(x, 8)) {
    EXPECT_LE((d - d.transpose()).cwiseAbs().maxCoeff(), 1e-12 * d.cwiseAbs().maxCoeff());
    // sigma -> N_sigma decreases: nonnegative directions give nonpositive diagonals
    EXPECT_LE(d.diagonal().maxCoeff(), 0.0);
  }
}

TEST(Model, TaylorSecondOrder) {
  const EitModel m(mesh_disk(0.05, 128), 8, 4, 2.0);
  const TaylorResult t = taylor_test(m, Eigen::Vector4d(0.8, 1.4, 1.1, 0.6), Eigen::Vector4d(0.4, -0.7, 1.0, 0.2));
  EXPECT_GE(t.fraction_in_band, 0.8);
}

TEST(Model, DotProduct) {
  const EitModel m(mesh_disk(0.05, 128), 8, 4, 2.0);
  std::mt19937_64 rng(12);
  for (int s = 0; s < 10; ++s) {
    Vector x(4), tau(4), r(m.measurement_dim());
    for (Index j = 0; j < 4; ++j) x(j) = uniform(rng, 0.5, 2.0);
    for (Index j = 0; j < 4; ++j) tau(j) = uniform(rng, -1.0, 1.0);
    for (Index j = 0; j < r.size(); ++j) r(j) = uniform(rng, -1.0, 1.0);
    EXPECT_LE(dot_product_test(m, x, tau, r).error, 1e-10);
  }
}

TEST(Model, JacobianMatchesApply) {
  const EitModel& m = desk_model();
  const Vector x = Eigen::Vector4d(0.7, 1.5, 1.2, 0.9);
  const auto lin = m.linearize(x);
  const Matrix a = lin->jacobian();
  for (Index j = 0; j < 4; ++j) EXPECT_LT((a.col(j) - lin->apply(Vector::Unit(4, j))).norm(), 1e-12 * a.norm());
}

TEST(Model, CompactnessProxyDecreases) {
  const EitModel& m = desk_model();
  const Vector x = Eigen::Vector4d(0.7, 1.5, 1.2, 0.9);
  const Matrix d = m.derivative_tensor(x, 16).front();
  double prev = 1e300;
  for (Index n = 2; n <= d.rows(); n += 2) {
    const double r = compact_truncation_residual(d, n);
    EXPECT_LE(r, prev + 1e-15);
    prev = r;
  }
}

TEST(DeltaN, Values) {
  EXPECT_DOUBLE_EQ(delta_N(3), 0.5);
  EXPECT_DOUBLE_EQ(delta_N(99), 0.1);
  for (int n = 1; n < 50; ++n) EXPECT_LT(delta_N(n + 1), delta_N(n));
  for (int n = 1; n <= 20; ++n) EXPECT_DOUBLE_EQ(delta_N(n) * delta_N(n), 1.0 / (n + 1.0));
  EXPECT_THROW(delta_N(0), Error);
}

TEST(DeltaN, DiscreteAnalogueWithinFivePercent) {
  for (int n = 1; n <= 8; ++n) {
    const double disc = discrete_delta_squared(desk_fem(), n, 16);
    EXPECT_NEAR(disc, 1.0 / (n + 1.0), 0.05 / (n + 1.0)) << "N = " << n;
  }
}
