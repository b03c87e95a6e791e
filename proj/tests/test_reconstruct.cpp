#include <random>

#include <gtest/gtest.h>

#include "fmlab/qpat.hpp"
#include "fmlab/reconstruct.hpp"

using namespace fmlab;

namespace {

qpat::QpatModel desk_qpat() { return qpat::QpatModel(qpat::QpatGrid::uniform(33), 2, 2.0); }

// Diagonal linear model with singular values sv (coordinates basis, unit weights).
LinearForwardModel diagonal_model(const Vector& sv) { return LinearForwardModel(Matrix(sv.asDiagonal())); }

}  // namespace

TEST(Stepsize, FormulaAndCap) {
  EXPECT_DOUBLE_EQ(stepsize_from_norm(3.0), 0.1);
  EXPECT_DOUBLE_EQ(stepsize_from_norm(0.5), 1.0);
  EXPECT_THROW(stepsize_from_norm(0.0), Error);
}

TEST(Stepsize, SigmaMaxThreeEverywhere) {
  const auto f = diagonal_model(Eigen::Vector3d(3.0, 1.0, 2.0));
  const BoxSet k = BoxSet::cube(3, 0.0, 1.0, f.basis().label());
  EXPECT_NEAR(choose_stepsize(f, nullptr, k, 5, 1), 0.1, 1e-14);
  EXPECT_NEAR(choose_stepsize(f, nullptr, k, 1), 0.1, 1e-14);
}

TEST(Stepsize, DegenerateModelRejected) {
  const auto f = diagonal_model(Vector::Zero(2));
  EXPECT_THROW(choose_stepsize(f, nullptr, BoxSet::cube(2, 0.0, 1.0, f.basis().label()), 3), Error);
}

TEST(LandweberStep, ExactDataIsFixedPoint) {
  const auto m = desk_qpat();
  const Vector x = Eigen::Vector4d(0.8, 1.2, 1.5, 0.7);
  const ProjectionSpec spec = qpat::block_average_projection(33, 2);
  const Vector y = projected_measurement(m, &spec, x);
  double res = -1.0;
  EXPECT_EQ(landweber_step(m, &spec, x, y, 0.5, &res), x);
  EXPECT_EQ(res, 0.0);
}

TEST(LandweberStep, ZeroStepIsFixedPoint) {
  const auto m = desk_qpat();
  const Vector x = Eigen::Vector4d(0.8, 1.2, 1.5, 0.7);
  const Vector y = projected_measurement(m, nullptr, Vector::Constant(4, 1.0));
  EXPECT_EQ(landweber_step(m, nullptr, x, y, 0.0), x);
}

TEST(LandweberStep, DeskQpatSingleStepContracts) {
  const auto m = desk_qpat();
  const BoxSet k = m.default_box();
  const ProjectionSpec spec = qpat::block_average_projection(33, 2);
  const Vector truth = Eigen::Vector4d(0.8, 1.7, 1.3, 0.6);
  const Vector y = projected_measurement(m, &spec, truth);
  const double mu = choose_stepsize(m, &spec, k, 16, 42);
  const Vector xk = truth + 0.01 * Vector::Unit(4, 0);
  const Vector next = landweber_step(m, &spec, xk, y, mu);
  EXPECT_LT((next - truth).cwiseAbs().maxCoeff(), (xk - truth).cwiseAbs().maxCoeff());
}

TEST(LandweberRun, StartAtTruthStopsImmediately) {
  const auto m = desk_qpat();
  const Vector truth = Eigen::Vector4d(0.8, 1.7, 1.3, 0.6);
  const Vector y = projected_measurement(m, nullptr, truth);
  LandweberConfig c;
  c.mu = 0.5;
  const IterationTrace t = landweber_run(m, nullptr, truth, y, m.default_box(), c);
  EXPECT_EQ(t.iterations, 0);
  EXPECT_EQ(t.stop_reason, StopReason::tol);
  EXPECT_LE(t.residuals.front(), 1e-12 * y.norm());
}

TEST(LandweberRun, InconsistentDataHitsMaxIter) {
  // y has a component outside the range of the 3x2 map.
  Matrix b(3, 2);
  b << 1, 0, 0, 1, 0, 0;
  const LinearForwardModel g(b);
  LandweberConfig c;
  c.mu = 0.5;
  c.max_iter = 5;
  const IterationTrace t =
      landweber_run(g, nullptr, Vector::Zero(2), Eigen::Vector3d(0.1, 0.2, 1.0), BoxSet::cube(2, -1, 1, "coordinates"), c);
  EXPECT_EQ(t.stop_reason, StopReason::max_iter);
  EXPECT_EQ(t.iterations, 5);
  EXPECT_EQ(t.residuals.size(), 6u);
}

TEST(LandweberRun, LinearModelConvergesGeometrically) {
  const auto f = diagonal_model(Eigen::Vector3d(1.0, 0.5, 0.8));
  const BoxSet k = BoxSet::cube(3, -2.0, 2.0, f.basis().label());
  const Vector truth = Eigen::Vector3d(0.3, -0.4, 0.1);
  LandweberConfig c;
  c.mu = choose_stepsize(f, nullptr, k, 1);
  const IterationTrace t = landweber_run(f, nullptr, Vector::Zero(3), f.evaluate(truth), k, c, truth);
  EXPECT_EQ(t.stop_reason, StopReason::tol);
  EXPECT_LT((t.final_iterate - truth).norm(), 1e-10);
  // slowest mode contracts by 1 - mu * 0.25; skip steps where the error is round-off
  for (std::size_t i = 0; i < t.ratios.size(); ++i)
    if (t.errors[i] > 1e-6) EXPECT_LE(t.ratios[i], (1.0 - c.mu * 0.25) * (1.0 + 1e-6)) << "step " << i;
  EXPECT_DOUBLE_EQ(t.monotone_fraction(), 1.0);
}

TEST(LandweberRun, ClampsInadmissibleIterates) {
  const auto m = desk_qpat();
  const BoxSet k = m.default_box();
  const Vector truth = Eigen::Vector4d(0.55, 0.55, 0.55, 0.55);
  const Vector y = projected_measurement(m, nullptr, truth);
  LandweberConfig c;
  c.mu = 1.0;  // far beyond the stable step: overshoots below zero
  c.max_iter = 3;
  const IterationTrace t = landweber_run(m, nullptr, Vector::Constant(4, 2.0), y, k, c, truth);
  for (const Vector& x : t.iterates) EXPECT_TRUE(m.admissible(x));
}

TEST(LandweberRun, DeskQpatFromDistanceFiveHundredths) {
  const auto m = desk_qpat();
  const BoxSet k = m.default_box();
  const ProjectionSpec spec = qpat::block_average_projection(33, 2);
  const Vector truth = Eigen::Vector4d(1.1, 0.9, 1.4, 0.7);
  const Vector x0 = truth + 0.05 * Vector(Eigen::Vector4d(1, -1, 1, -1));
  LandweberConfig c;
  c.mu = choose_stepsize(m, &spec, k, 16, 42);
  const IterationTrace t = landweber_run(m, &spec, x0, projected_measurement(m, &spec, truth), k, c, truth);
  EXPECT_EQ(t.stop_reason, StopReason::tol);
  std::vector<double> r = t.ratios;
  std::sort(r.begin(), r.end());
  EXPECT_LT(r[r.size() / 2], 1.0);
}

TEST(LandweberConfig, Validation) {
  LandweberConfig c;
  c.mu = 0.0;
  EXPECT_THROW(validate(c), Error);
  c.mu = 1.5;
  EXPECT_THROW(validate(c), Error);
  c.mu = 0.5;
  c.record_every = 0;
  EXPECT_THROW(validate(c), Error);
}

TEST(LatticeCover, SinglePointBox) {
  const LatticeCover c = build_lattice(BoxSet::cube(3, 1.0, 1.0), 1.0, 1.0, 0.1, 1.0);
  EXPECT_EQ(c.index_set_size, 1);
  EXPECT_EQ(c.point(0), Vector(Vector::Ones(3)));
}

TEST(LatticeCover, TwoPerAxis) {
  // r = rho / (2 L C D) = 0.3
  const LatticeCover c = build_lattice(BoxSet::cube(2, 0.0, 1.0), 1.0, 1.0, 0.6, 1.0);
  EXPECT_DOUBLE_EQ(c.radius, 0.3);
  EXPECT_EQ(c.per_axis, (std::vector<Index>{2, 2}));
  EXPECT_EQ(c.index_set_size, 4);
}

TEST(LatticeCover, TenPerAxis) {
  const LatticeCover c = build_lattice(BoxSet::cube(3, 0.0, 1.0), 1.0, 1.0, 0.1, 1.0);
  EXPECT_DOUBLE_EQ(c.radius, 0.05);
  EXPECT_EQ(c.index_set_size, 1000);
}

TEST(LatticeCover, CoversEveryPointOfK) {
  const BoxSet k(Eigen::Vector3d(0.0, -1.0, 2.0), Eigen::Vector3d(1.0, 1.5, 2.3));
  const LatticeCover c = build_lattice(k, 1.3, 2.1, 0.9, 1.0);
  EXPECT_LE(c.max_half_spacing(), c.radius);
  std::mt19937_64 rng(5);
  const auto pts = c.points();
  for (int s = 0; s < 200; ++s) {
    Vector x(3);
    for (Index j = 0; j < 3; ++j) x(j) = uniform(rng, k.lower(j), k.upper(j));
    double best = 1e300;
    for (const Vector& p : pts) best = std::min(best, (p - x).cwiseAbs().maxCoeff());
    EXPECT_LE(best, c.radius + 1e-15);
  }
}

TEST(LatticeCover, BudgetExceededReportsSize) {
  try {
    build_lattice(BoxSet::cube(4, 0.0, 1.0), 1.0, 1.0, 0.001, 1.0, 1e6);
    FAIL() << "expected budget_exceeded";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::budget_exceeded);
    EXPECT_NE(std::string(e.what()).find("1e+12"), std::string::npos) << e.what();
  }
}

TEST(InitialGuess, ExactLatticeData) {
  const auto m = desk_qpat();
  const LatticeCover cover = build_lattice(m.default_box(), 1.0, 1.0, 1.0, 1.0);  // 2 per axis
  const Vector y = projected_measurement(m, nullptr, cover.point(3));
  const InitialGuess g = initial_guess(m, nullptr, cover, y, 1e-9, 1.0);
  ASSERT_TRUE(g.index.has_value());
  EXPECT_EQ(*g.index, 3);
  EXPECT_EQ(g.distance, 0.0);
}

TEST(InitialGuess, ThresholdBelowEveryDistance) {
  const auto m = desk_qpat();
  const LatticeCover cover = build_lattice(m.default_box(), 1.0, 1.0, 1.0, 1.0);
  const Vector y = projected_measurement(m, nullptr, Eigen::Vector4d(0.9, 1.1, 0.95, 1.05));
  const InitialGuess g = initial_guess(m, nullptr, cover, y, 1e-9, 1.0);
  EXPECT_FALSE(g.index.has_value());
  EXPECT_GT(g.min_distance, 0.0);
  EXPECT_EQ(g.evaluated, cover.index_set_size);
}

TEST(InitialGuess, ChunkSizeDoesNotChangeResult) {
  const auto m = desk_qpat();
  const LatticeCover cover = build_lattice(m.default_box(), 1.0, 2.3, 0.9, 1.0);
  const Vector y = projected_measurement(m, nullptr, Eigen::Vector4d(0.9, 1.6, 0.75, 1.05));
  const InitialGuess a = initial_guess(m, nullptr, cover, y, 0.9, 2.3, 7);
  const InitialGuess b = initial_guess(m, nullptr, cover, y, 0.9, 2.3, 256);
  ASSERT_TRUE(a.index && b.index);
  EXPECT_EQ(*a.index, *b.index);
}

TEST(Global, LatticeTruthStopsAtZeroIterations) {
  const auto m = desk_qpat();
  const BoxSet k = m.default_box();
  GlobalConfig gc;
  gc.rho = 0.3;
  gc.c_hat = 1.2;
  gc.landweber.mu = 0.9;
  const LatticeCover cover = build_lattice(k, gc.l_hat, gc.c_hat, gc.rho, gc.q_norm);
  // the scan stops at the first admissible point, so use the first one
  const Vector truth = cover.point(0);
  const GlobalResult r = global_reconstruct(m, nullptr, k, projected_measurement(m, nullptr, truth), gc, truth);
  EXPECT_EQ(r.trace.iterations, 0);
  EXPECT_EQ(r.x, truth);
}

TEST(Global, NoGuessAborts) {
  const auto f = diagonal_model(Eigen::Vector2d(1.0, 1.0));
  GlobalConfig gc;
  gc.rho = 0.1;
  gc.c_hat = 1.0;
  gc.landweber.mu = 0.5;
  // data far outside F(K)
  EXPECT_THROW(global_reconstruct(f, nullptr, BoxSet::cube(2, 0.0, 1.0, "coordinates"), Eigen::Vector2d(5.0, 5.0), gc),
               Error);
}

TEST(Basin, LinearModelEveryRadiusConverges) {
  const auto f = diagonal_model(Eigen::Vector2d(1.0, 0.7));
  BasinOptions bo;
  bo.truths = 4;
  bo.landweber.mu = 0.9;
  const BasinCalibration cal = calibrate_basin(f, nullptr, BoxSet::cube(2, 0.0, 1.0, "coordinates"), bo);
  EXPECT_DOUBLE_EQ(cal.rho, 0.2);
  ASSERT_EQ(cal.success_rate.size(), 1u);
  EXPECT_DOUBLE_EQ(cal.success_rate.front(), 1.0);
  EXPECT_LT(cal.c_hat, 1.0);
}
