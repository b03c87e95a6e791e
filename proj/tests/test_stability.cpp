#include <random>

#include <gtest/gtest.h>

#include "fmlab/qpat.hpp"
#include "fmlab/stability.hpp"

using namespace fmlab;

namespace {

// Independent oracle: plain loop over all 2^d sign vectors.
double brute_opnorm(const Matrix& a) {
  const Index d = a.cols();
  double best = 0.0;
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << d); ++mask) {
    Vector v(d);
    for (Index j = 0; j < d; ++j) v(j) = (mask >> j) & 1u ? 1.0 : -1.0;
    best = std::max(best, (a * v).norm());
  }
  return best;
}

qpat::QpatModel desk_qpat() { return qpat::QpatModel(qpat::QpatGrid::uniform(33), 2, 2.0); }

}  // namespace

TEST(Opnorm, IdentityTwoByTwo) { EXPECT_NEAR(opnorm_supball(Matrix::Identity(2, 2)), std::sqrt(2.0), 1e-15); }

TEST(Opnorm, ZeroMatrix) { EXPECT_EQ(opnorm_supball(Matrix::Zero(3, 2)), 0.0); }

TEST(Opnorm, DiagonalThreeFour) {
  Matrix a(2, 2);
  a << 3, 0, 0, 4;
  EXPECT_NEAR(opnorm_supball(a), 5.0, 1e-14);
}

TEST(Opnorm, MatchesBruteForce) {
  std::mt19937_64 rng(11);
  for (Index d : {1, 3, 5, 8}) {
    Matrix a(7, d);
    for (Index i = 0; i < a.size(); ++i) a.data()[i] = uniform(rng, -1.0, 1.0);
    EXPECT_NEAR(opnorm_supball(a), brute_opnorm(a), 1e-12) << "d = " << d;
  }
}

TEST(Opnorm, LargeDimensionNeedsSamplingFlag) {
  const Matrix a = Matrix::Ones(3, 21);
  EXPECT_THROW(opnorm_supball(a), Error);
  OpnormOptions opt;
  opt.allow_sampling = true;
  // All-ones columns: the all-plus vertex gives sqrt(3) * 21, which polish must find.
  EXPECT_NEAR(opnorm_supball(a, opt), std::sqrt(3.0) * 21.0, 1e-9);
}

TEST(DerivativeMatrix, RejectsInadmissiblePoint) {
  const auto m = desk_qpat();
  EXPECT_THROW(assemble_derivative_matrix(m, Vector::Zero(4)), Error);
}

TEST(DerivativeMatrix, ZeroDirectionAndColumnScaling) {
  const auto m = desk_qpat();
  const Vector x = Vector::Constant(4, 1.2);
  const auto lin = m.linearize(x);
  EXPECT_EQ(lin->apply(Vector::Zero(4)).norm(), 0.0);
  const Vector e1 = Vector::Unit(4, 1);
  EXPECT_LT((lin->apply(3.0 * e1) - 3.0 * lin->apply(e1)).norm(), 1e-13 * lin->apply(e1).norm());
}

TEST(DerivativeMatrix, ConstantBasisMatchesCentralDifference) {
  const qpat::QpatModel m(qpat::QpatGrid::uniform(9), 1, 2.0);
  const Vector x = Vector::Constant(1, 1.0);
  const Matrix a = assemble_derivative_matrix(m, x).entries;
  const double h = 1e-5;
  const Vector fd = (m.evaluate(x.array() + h) - m.evaluate(x.array() - h)) / (2.0 * h);
  EXPECT_LT((a.col(0) - fd).norm(), 1e-8 * fd.norm());
}

TEST(SCurve, FullRankSpecGivesZero) {
  const auto m = desk_qpat();
  const SCurve c = estimate_s_curve(m, m.default_box(), 2, {ProjectionSpec::identity(m.measurement_dim())});
  EXPECT_EQ(c.points.front().s, 0.0);
}

TEST(SCurve, NestedLevelsNonincreasing) {
  const auto m = desk_qpat();
  std::vector<ProjectionSpec> specs;
  for (int l : {1, 2, 4, 8, 16, 32}) specs.push_back(qpat::block_average_projection(33, l));
  const SCurve c = estimate_s_curve(m, m.default_box(), 2, specs);
  for (std::size_t i = 1; i < c.points.size(); ++i) EXPECT_LE(c.points[i].s, c.points[i - 1].s);
  std::vector<ProjectionSpec> cos;
  for (int l : {1, 3, 6, 12, 24}) cos.push_back(qpat::tensor_cosine_projection(33, l));
  const SCurve cc = estimate_s_curve(m, m.default_box(), 2, cos);
  for (std::size_t i = 1; i < cc.points.size(); ++i) EXPECT_LE(cc.points[i].s, cc.points[i - 1].s);
}

TEST(SCurve, RegressionDeskQpat) {
  const auto m = desk_qpat();
  std::vector<ProjectionSpec> specs;
  for (int l : {1, 2, 4, 8, 16, 32}) specs.push_back(qpat::block_average_projection(33, l));
  const SCurve c = estimate_s_curve(m, m.default_box(), 3, specs);
  const double frozen[] = {0.9485958467979713, 0.06781142080509443, 0.04106124094351088,
                           0.02190196402578811, 0.010824836985858186, 0.004060096004279458};
  ASSERT_EQ(c.points.size(), 6u);
  EXPECT_EQ(c.lattice_size, 81u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(c.points[i].s, frozen[i], 1e-9 * frozen[i]);
}

TEST(EstimateC, DegenerateBox) {
  const auto m = desk_qpat();
  const CEstimate c = estimate_C(m, BoxSet::cube(4, 1.0, 1.0, m.basis().label()));
  EXPECT_TRUE(c.degenerate);
  EXPECT_EQ(c.c_hat, 0.0);
}

TEST(EstimateC, IsometryInOneDimension) {
  const LinearForwardModel f(Matrix::Identity(1, 1));
  const CEstimate c = estimate_C(f, BoxSet::cube(1, -1.0, 1.0, f.basis().label()));
  EXPECT_NEAR(c.c_hat, 1.0, 1e-14);
  EXPECT_NEAR(c.l_hat_raw, 1.0, 1e-14);
}

TEST(EstimateC, InjectivityViolationIsHardFailure) {
  Matrix b(2, 2);
  b << 1, 1, 1, 1;  // kernel along (1, -1)
  const LinearForwardModel f(b);
  CEstimateOptions opt;
  opt.lattice_resolution = 3;
  try {
    estimate_C(f, BoxSet::cube(2, 0.0, 1.0, f.basis().label()), opt);
    FAIL() << "expected an injectivity violation";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::injectivity_violated);
    EXPECT_NE(std::string(e.what()).find("injectivity violated at sample scale"), std::string::npos);
  }
}

TEST(EstimateC, RegressionDeskQpat) {
  const auto m = desk_qpat();
  CEstimateOptions opt;
  opt.pair_budget = 200;
  opt.seed = 42;
  const CEstimate c = estimate_C(m, m.default_box(), opt);
  EXPECT_NEAR(c.c_hat, 2.3222394275756657, 1e-9);
  EXPECT_EQ(c.pairs, 3440u);
  EXPECT_DOUBLE_EQ(c.l_hat, 1.0);
}

TEST(SelectN, WorkedExample) {
  const NSelection s = select_N({{1, 0.4}, {2, 0.2}, {4, 0.05}}, 2.0, 1.0);
  EXPECT_DOUBLE_EQ(s.threshold, 0.25);
  ASSERT_TRUE(s.n_star.has_value());
  EXPECT_EQ(*s.n_star, 2);
}

TEST(SelectN, NotReached) {
  const NSelection s = select_N({{1, 0.4}, {2, 0.2}, {4, 0.05}}, 1e9, 1.0);
  EXPECT_FALSE(s.n_star.has_value());
  EXPECT_GT(s.smallest_gap, 0.0);
}

TEST(SelectN, ThresholdIsInclusive) {
  const NSelection s = select_N({{1, 0.5}, {3, 0.25}, {5, 0.1}}, 2.0, 1.0);
  ASSERT_TRUE(s.n_star.has_value());
  EXPECT_EQ(*s.n_star, 3);
}

TEST(SelectN, DeskQpatRegression) {
  const std::vector<SPoint> curve{{1, 0.9485958467979713}, {2, 0.06781142080509443}, {4, 0.04106124094351088}};
  const NSelection s = select_N(curve, 2.3222394275756657, 2.0);
  ASSERT_TRUE(s.n_star.has_value());
  EXPECT_EQ(*s.n_star, 2);
}

TEST(Verify, EqualPointsTriviallyHold) {
  const auto m = desk_qpat();
  const Vector x = Vector::Constant(4, 1.0);
  VerifyOptions vo;
  vo.c_hat = 2.0;
  const auto v = verify_stability(m, nullptr, {{x, x}}, m.default_box(), vo);
  EXPECT_TRUE(v.verified);
  EXPECT_EQ(v.records.front().lhs, 0.0);
}

TEST(Verify, MismodelingTermVanishesInsideK) {
  const auto m = desk_qpat();
  VerifyOptions vo;
  vo.c_hat = 2.5;
  vo.include_mismodeling = true;
  const auto v = verify_stability(m, nullptr, {{Vector::Constant(4, 1.0), Vector::Constant(4, 1.5)}},
                                  m.default_box(), vo);
  EXPECT_EQ(v.records.front().mismodeling, 0.0);
}

TEST(Verify, OutsidePairsNeedMismodelingFlag) {
  const auto m = desk_qpat();
  VerifyOptions vo;
  vo.c_hat = 2.5;
  EXPECT_THROW(verify_stability(m, nullptr, {{Vector::Constant(4, 3.0), Vector::Constant(4, 1.5)}},
                                m.default_box(), vo),
               Error);
}

TEST(Verify, DeskQpatHeldOutPairs) {
  const auto m = desk_qpat();
  const BoxSet k = m.default_box();
  const ProjectionSpec spec = qpat::block_average_projection(33, 2);
  VerifyOptions vo;
  vo.c_hat = 2.3222394275756657;
  const auto v = verify_stability(m, &spec, sample_pairs(k, 100, 43), k, vo);
  EXPECT_TRUE(v.verified) << v.violations << " violations";
}

TEST(DistanceToK, Inside) {
  const BoxSet k = BoxSet::cube(2, 0.0, 1.0, "b");
  EXPECT_EQ(distance_to_K({Eigen::Vector2d(0.3, 0.9), "b"}, k).distance, 0.0);
}

TEST(DistanceToK, HandExamples) {
  const BoxSet k = BoxSet::cube(2, 0.0, 1.0, "b");
  const BoxDistance a = distance_to_K({Eigen::Vector2d(1.5, 0.5), "b"}, k);
  EXPECT_DOUBLE_EQ(a.distance, 0.5);
  EXPECT_EQ(a.clamped, Vector(Eigen::Vector2d(1.0, 0.5)));
  EXPECT_DOUBLE_EQ(distance_to_K({Eigen::Vector2d(2.0, -1.0), "b"}, k).distance, 1.0);
}

TEST(DistanceToK, BasisMismatchRejected) {
  const BoxSet k = BoxSet::cube(2, 0.0, 1.0, "b");
  EXPECT_THROW(distance_to_K({Eigen::Vector2d(0.5, 0.5), "other"}, k), Error);
}

TEST(Lattice, BoxLatticeOrdering) {
  const auto pts = box_lattice(BoxSet::cube(2, 0.0, 1.0), 3);
  ASSERT_EQ(pts.size(), 9u);
  EXPECT_EQ(pts[1], Vector(Eigen::Vector2d(0.0, 0.5)));
  EXPECT_EQ(pts[3], Vector(Eigen::Vector2d(0.5, 0.0)));
}
