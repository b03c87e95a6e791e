#ifndef FMLAB_STABILITY_HPP
#define FMLAB_STABILITY_HPP

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fmlab/basis.hpp"
#include "fmlab/common.hpp"
#include "fmlab/forward_model.hpp"
#include "fmlab/parallel.hpp"
#include "fmlab/projection.hpp"

namespace fmlab {

enum class DerivativeView { full, projected, residual };

/// Coordinate realization of F'(xi) restricted to W: m x d.
struct DerivativeMatrix {
  Matrix entries;
  Vector base_point;
  int level = -1;  // -1: full measurement
  DerivativeView view = DerivativeView::full;
};

/// Column j = measurement coordinates of F'(xi) b_j. With a projection, the
/// projected view gives orthonormal coordinates of Q F'(xi) b_j and the
/// residual view (I - Q) F'(xi) b_j in ambient coordinates.
inline DerivativeMatrix assemble_derivative_matrix(const ForwardModel& model, const Vector& xi,
                                                   const ProjectionSpec* spec = nullptr,
                                                   DerivativeView view = DerivativeView::projected) {
  model.require_admissible(xi, "derivative matrix");
  DerivativeMatrix out;
  out.base_point = xi;
  const Matrix a = model.linearize(xi)->jacobian();
  if (spec == nullptr || view == DerivativeView::full) {
    out.entries = a;
    out.view = DerivativeView::full;
    return out;
  }
  out.level = spec->level();
  out.view = view;
  out.entries = view == DerivativeView::residual ? spec->residual(a) : spec->coordinates(a);
  return out;
}

struct OpnormOptions {
  bool allow_sampling = false;
  std::uint64_t seed = 0;
  int samples = 10000;
};

namespace detail {
inline double vertex_search_sampled(const Matrix& a, const OpnormOptions& opt) {
  const Index d = a.cols();
  std::mt19937_64 rng(opt.seed);
  double best = 0.0;
  Vector v(d);
  for (int s = 0; s < opt.samples; ++s) {
    for (Index j = 0; j < d; ++j) v(j) = (rng() >> 63) ? 1.0 : -1.0;
    Vector av = a * v;
    double cur = av.squaredNorm();
    // Local polish: accept single sign flips while they improve.
    for (bool improved = true; improved;) {
      improved = false;
      for (Index j = 0; j < d; ++j) {
        const Vector trial = av - 2.0 * v(j) * a.col(j);
        const double val = trial.squaredNorm();
        if (val > cur) {
          av = trial;
          cur = val;
          v(j) = -v(j);
          improved = true;
        }
      }
    }
    best = std::max(best, cur);
  }
  return std::sqrt(best);
}
}  // namespace detail

/// ||A||_{W -> Y} with the sup norm on W (indicator coordinates): the convex
/// objective ||A v|| peaks at a vertex of the cube, so enumerating the 2^d
/// vertices (half of them, by symmetry) is exact.
inline double opnorm_supball(const Matrix& a, const OpnormOptions& opt = {}) {
  const Index d = a.cols();
  if (d == 0 || a.rows() == 0) return 0.0;
  if (d > 20) {
    require(opt.allow_sampling, ErrorKind::budget_exceeded,
            "vertex enumeration limited to d <= 20 (d = " + std::to_string(d) +
                "); enable the sampling fallback (allow_sampling) for larger bases");
    return detail::vertex_search_sampled(a, opt);
  }
  // Gray-code walk over sign vectors with the first sign fixed to +1.
  Vector v = Vector::Ones(d);
  Vector av = a.rowwise().sum();
  double best = av.squaredNorm();
  const std::uint64_t count = std::uint64_t{1} << (d - 1);
  for (std::uint64_t k = 1; k < count; ++k) {
    const Index flip = 1 + static_cast<Index>(__builtin_ctzll(k));
    av -= 2.0 * v(flip) * a.col(flip);
    v(flip) = -v(flip);
    best = std::max(best, av.squaredNorm());
  }
  return std::sqrt(best);
}

inline double opnorm_supball(const DerivativeMatrix& a, const OpnormOptions& opt = {}) {
  return opnorm_supball(a.entries, opt);
}

/// Regular lattice with `resolution` points per axis (first axis slowest).
inline std::vector<Vector> box_lattice(const BoxSet& k, int resolution) {
  require(resolution >= 2, ErrorKind::invalid_argument, "lattice resolution must be >= 2 per axis");
  const Index d = k.dim();
  std::size_t total = 1;
  for (Index i = 0; i < d; ++i) total *= static_cast<std::size_t>(resolution);
  std::vector<Vector> points;
  points.reserve(total);
  for (std::size_t idx = 0; idx < total; ++idx) {
    Vector x(d);
    std::size_t rem = idx;
    for (Index i = d - 1; i >= 0; --i) {
      const auto c = static_cast<double>(rem % static_cast<std::size_t>(resolution));
      rem /= static_cast<std::size_t>(resolution);
      x(i) = k.lower(i) + (k.upper(i) - k.lower(i)) * c / (resolution - 1);
    }
    points.push_back(std::move(x));
  }
  return points;
}

struct SPoint {
  int level = 0;
  double s = 0.0;
};

struct SCurve {
  std::vector<SPoint> points;
  int lattice_resolution = 0;
  std::size_t lattice_size = 0;
};

/// s_N for every spec over one xi-lattice of K: max over lattice points of
/// ||(I - Q_N) F'(xi)||_{W -> Y}. A lower bound on the true supremum.
inline SCurve estimate_s_curve(const ForwardModel& model, const BoxSet& k, int resolution,
                               const std::vector<ProjectionSpec>& specs, const OpnormOptions& opt = {}) {
  const std::vector<Vector> lattice = box_lattice(k, resolution);
  const std::size_t ns = specs.size();
  std::vector<std::vector<double>> values(lattice.size());
  parallel_for(lattice.size(), [&](std::size_t i) {
    model.require_admissible(lattice[i], "s_N lattice point");
    const Matrix a = model.linearize(lattice[i])->jacobian();
    values[i].resize(ns);
    for (std::size_t s = 0; s < ns; ++s) values[i][s] = opnorm_supball(specs[s].residual(a), opt);
  });
  SCurve curve;
  curve.lattice_resolution = resolution;
  curve.lattice_size = lattice.size();
  for (std::size_t s = 0; s < ns; ++s) {
    double best = 0.0;
    for (std::size_t i = 0; i < lattice.size(); ++i) best = std::max(best, values[i][s]);
    curve.points.push_back({specs[s].level(), best});
  }
  return curve;
}

inline double estimate_sN(const ForwardModel& model, const BoxSet& k, int resolution, const ProjectionSpec& spec,
                          const OpnormOptions& opt = {}) {
  return estimate_s_curve(model, k, resolution, {spec}, opt).points.front().s;
}

struct CEstimateOptions {
  int pair_budget = 200;
  std::uint64_t seed = 42;
  int lattice_resolution = 3;  // 0 disables lattice pairs
  const ProjectionSpec* spec = nullptr;
};

struct CEstimate {
  double c_hat = 0.0;       // max ||x1 - x2||_X / ||F(x1) - F(x2)||_Y
  double l_hat_raw = 0.0;   // max ||F(x1) - F(x2)||_Y / ||x1 - x2||_X
  double l_hat = 1.0;       // l_hat_raw floored at 1
  std::size_t pairs = 0;
  bool degenerate = false;  // no pair with positive X-distance
  Vector worst_x1, worst_x2;
};

namespace detail {
inline Vector measure(const ForwardModel& model, const Vector& x, const ProjectionSpec* spec) {
  const Vector y = model.evaluate(x);
  return spec ? spec->coordinates(y) : y;
}
}  // namespace detail

/// Random pairs in K: about half independent uniform pairs, half local
/// pairs (x, x + delta v) at log-uniform scales, which probe the
/// linearized constant.
inline std::vector<std::pair<Vector, Vector>> sample_pairs(const BoxSet& k, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Index d = k.dim();
  const double diam = k.diameter();
  auto uniform_point = [&] {
    Vector x(d);
    for (Index i = 0; i < d; ++i) x(i) = uniform(rng, k.lower(i), k.upper(i));
    return x;
  };
  std::vector<std::pair<Vector, Vector>> pairs;
  pairs.reserve(static_cast<std::size_t>(count));
  for (int p = 0; p < count; ++p) {
    Vector x1 = uniform_point();
    Vector x2;
    if (p % 2 == 0) {
      x2 = uniform_point();
    } else {
      const double scale = diam * std::pow(10.0, -uniform(rng, 0.0, 3.0));
      Vector v(d);
      for (Index i = 0; i < d; ++i) v(i) = uniform(rng, -1.0, 1.0);
      x2 = k.clamp(x1 + scale * v);
    }
    pairs.emplace_back(std::move(x1), std::move(x2));
  }
  return pairs;
}

inline CEstimate estimate_C(const ForwardModel& model, const BoxSet& k, const CEstimateOptions& opt = {}) {
  require(opt.pair_budget >= 10, ErrorKind::invalid_argument, "pair budget must be >= 10");
  std::vector<Vector> points;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  if (opt.lattice_resolution >= 2 && !k.is_point()) {
    points = box_lattice(k, opt.lattice_resolution);
    for (std::size_t i = 0; i < points.size(); ++i)
      for (std::size_t j = i + 1; j < points.size(); ++j) pairs.emplace_back(i, j);
  }
  for (auto& [a, b] : sample_pairs(k, opt.pair_budget, opt.seed)) {
    points.push_back(std::move(a));
    points.push_back(std::move(b));
    pairs.emplace_back(points.size() - 2, points.size() - 1);
  }
  const std::vector<Vector> measured =
      parallel_map<Vector>(points.size(), [&](std::size_t i) { return detail::measure(model, points[i], opt.spec); });

  CEstimate out;
  out.pairs = pairs.size();
  bool any = false;
  for (const auto& [i, j] : pairs) {
    const double dx = model.norm_x(points[i] - points[j]);
    if (dx == 0.0) continue;
    const double dy = (measured[i] - measured[j]).norm();
    const double scale = std::max(measured[i].norm(), measured[j].norm());
    if (dy <= 1e-15 * scale || dy == 0.0) {
      throw Error(ErrorKind::injectivity_violated,
                  "injectivity violated at sample scale: distinct points with X-distance " + std::to_string(dx) +
                      " have identical measurements");
    }
    any = true;
    const double ratio = dx / dy;
    if (ratio > out.c_hat) {
      out.c_hat = ratio;
      out.worst_x1 = points[i];
      out.worst_x2 = points[j];
    }
    out.l_hat_raw = std::max(out.l_hat_raw, dy / dx);
  }
  out.degenerate = !any;
  out.l_hat = std::max(1.0, out.l_hat_raw);
  return out;
}

struct NSelection {
  std::optional<int> n_star;
  double threshold = 0.0;     // 1 / (2 safety c_hat)
  double smallest_gap = 0.0;  // min over the curve of s_N - threshold
};

/// Smallest listed N with s_N <= 1/(2 safety c_hat).
inline NSelection select_N(const std::vector<SPoint>& curve, double c_hat, double safety = 1.0) {
  require(!curve.empty(), ErrorKind::invalid_argument, "s_N curve is empty");
  require(c_hat > 0.0, ErrorKind::invalid_argument, "c_hat must be positive");
  require(safety > 0.0, ErrorKind::invalid_argument, "safety factor must be positive");
  NSelection out;
  out.threshold = 1.0 / (2.0 * safety * c_hat);
  out.smallest_gap = std::numeric_limits<double>::infinity();
  for (const SPoint& p : curve) {
    out.smallest_gap = std::min(out.smallest_gap, p.s - out.threshold);
    if (p.s <= out.threshold && (!out.n_star || p.level < *out.n_star)) out.n_star = p.level;
  }
  return out;
}

struct BoxDistance {
  double distance = 0.0;
  Vector clamped;
};

/// Sup-norm distance to a coordinate box (exact for indicator bases).
inline BoxDistance distance_to_K(const CoefficientVector& x, const BoxSet& k) {
  require(x.basis_id == k.basis_id, ErrorKind::invalid_argument,
          "basis mismatch: point in '" + x.basis_id + "', box in '" + k.basis_id + "'");
  require_same_dim(k.dim(), x.coords.size(), "distance to K");
  BoxDistance out;
  out.clamped = k.clamp(x.coords);
  out.distance = x.coords.size() == 0 ? 0.0 : (x.coords - out.clamped).cwiseAbs().maxCoeff();
  return out;
}

struct PairRecord {
  Vector x1, x2;
  double lhs = 0.0;
  double rhs = 0.0;
  double mismodeling = 0.0;
  double margin = 0.0;  // rhs - lhs
};

struct StabilityVerification {
  std::vector<PairRecord> records;
  bool verified = true;
  std::size_t violations = 0;
};

struct VerifyOptions {
  double c_hat = 0.0;
  double d_bound = 1.0;
  double l_hat = 1.0;
  bool include_mismodeling = false;
};

/// Checks ||x1 - x2||_X <= 2 C ||Q F(x1) - Q F(x2)||_Y [+ 3 C D L (d(x1,K) + d(x2,K))]
/// on each pair with the empirical constants supplied.
inline StabilityVerification verify_stability(const ForwardModel& model, const ProjectionSpec* spec,
                                              const std::vector<std::pair<Vector, Vector>>& pairs,
                                              const BoxSet& k, const VerifyOptions& opt) {
  if (!opt.include_mismodeling) {
    for (const auto& [a, b] : pairs)
      require(k.contains(a) && k.contains(b), ErrorKind::invalid_argument,
              "pairs outside K need the mismodeling term");
  }
  std::vector<PairRecord> records(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    const auto& [a, b] = pairs[i];
    PairRecord& rec = records[i];
    rec.x1 = a;
    rec.x2 = b;
    rec.lhs = model.norm_x(a - b);
    const double dq = rec.lhs == 0.0 ? 0.0 : (detail::measure(model, a, spec) - detail::measure(model, b, spec)).norm();
    rec.rhs = 2.0 * opt.c_hat * dq;
    if (opt.include_mismodeling) {
      const double da = distance_to_K({a, k.basis_id}, k).distance;
      const double db = distance_to_K({b, k.basis_id}, k).distance;
      rec.mismodeling = 3.0 * opt.c_hat * opt.d_bound * opt.l_hat * (da + db);
      rec.rhs += rec.mismodeling;
    }
    rec.margin = rec.rhs - rec.lhs;
  });
  StabilityVerification out;
  for (const PairRecord& r : records)
    if (r.lhs > r.rhs) ++out.violations;
  out.verified = out.violations == 0;
  out.records = std::move(records);
  return out;
}

struct TaylorResult {
  std::vector<double> steps;
  std::vector<double> remainders;  // ||F(x + h tau) - F(x) - h F'(x) tau||
  std::vector<double> ratios;      // remainder(h) / remainder(h / 2)
  double max_scaled = 0.0;         // max remainder / h^2
  double fraction_in_band = 0.0;   // share of ratios in [3.5, 4.5]
};

/// Halving sequence from h_max down to h_min.
inline std::vector<double> halving_steps(double h_max = 1e-2, double h_min = 1e-4) {
  std::vector<double> hs;
  for (double h = h_max; h >= h_min * (1.0 - 1e-12); h *= 0.5) hs.push_back(h);
  return hs;
}

inline TaylorResult taylor_test(const ForwardModel& model, const Vector& x, const Vector& tau,
                                const std::vector<double>& steps = halving_steps()) {
  const auto lin = model.linearize(x);
  const Vector f0 = lin->value();
  const Vector df = lin->apply(tau);
  TaylorResult out;
  out.steps = steps;
  for (double h : steps) {
    const double rem = (model.evaluate(x + h * tau) - f0 - h * df).norm();
    out.remainders.push_back(rem);
    out.max_scaled = std::max(out.max_scaled, rem / (h * h));
  }
  int in_band = 0;
  for (std::size_t i = 0; i + 1 < out.remainders.size(); ++i) {
    const double ratio = out.remainders[i + 1] > 0.0 ? out.remainders[i] / out.remainders[i + 1] : 0.0;
    out.ratios.push_back(ratio);
    if (ratio >= 3.5 && ratio <= 4.5) ++in_band;
  }
  out.fraction_in_band = out.ratios.empty() ? 0.0 : static_cast<double>(in_band) / out.ratios.size();
  return out;
}

struct DotProductResult {
  double forward = 0.0;  // <F'(x) tau, r>_Y
  double adjoint = 0.0;  // <tau, F'(x)^* r>_W
  double error = 0.0;    // |forward - adjoint| / (1 + |forward|)
};

inline DotProductResult dot_product_test(const ForwardModel& model, const Vector& x, const Vector& tau,
                                         const Vector& r) {
  const auto lin = model.linearize(x);
  DotProductResult out;
  out.forward = lin->apply(tau).dot(r);
  out.adjoint = tau.dot(lin->adjoint(r));
  out.error = std::abs(out.forward - out.adjoint) / (1.0 + std::abs(out.forward));
  return out;
}

/// Everything the stability sweep produces, in the order it is computed.
struct StabilityReport {
  std::string model;
  std::vector<SPoint> s_curve;
  int lattice_resolution = 0;
  double c_hat = 0.0;
  double c_hat_projected = 0.0;
  double safety = 2.0;
  double lipschitz_F = 1.0;
  double lipschitz_F_raw = 0.0;
  double d_bound = 1.0;
  std::optional<int> n_star;
  double threshold = 0.0;
  double smallest_gap = 0.0;
  std::vector<PairRecord> pair_records;
  std::vector<PairRecord> mismodeling_records;
  bool verified = false;
  bool mismodeling_verified = false;
  std::uint64_t seed = 0;
  int pair_budget = 0;
  bool c_hat_degenerate = false;
};

}  // namespace fmlab

#endif  // FMLAB_STABILITY_HPP
