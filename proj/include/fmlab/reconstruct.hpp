#ifndef FMLAB_RECONSTRUCT_HPP
#define FMLAB_RECONSTRUCT_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Cholesky>

#include "fmlab/basis.hpp"
#include "fmlab/common.hpp"
#include "fmlab/forward_model.hpp"
#include "fmlab/linalg.hpp"
#include "fmlab/parallel.hpp"
#include "fmlab/projection.hpp"
#include "fmlab/stability.hpp"

namespace fmlab {

/// Q F(x) in the orthonormal coordinates of the projection (or F(x) itself).
inline Vector projected_measurement(const ForwardModel& model, const ProjectionSpec* spec, const Vector& x) {
  return detail::measure(model, x, spec);
}

/// L2-orthonormal coordinates of W: z = L^T c with Gram = L L^T.
class WCoordinates {
 public:
  explicit WCoordinates(const SubspaceBasis& basis) : llt_(basis.gram()) {
    require(llt_.info() == Eigen::Success, ErrorKind::numerical_failure, "basis Gram matrix is not positive definite");
  }
  Vector to_orthonormal(const Vector& c) const { return llt_.matrixU() * c; }
  Vector from_orthonormal(const Vector& z) const { return llt_.matrixU().solve(z); }
  /// Gram^{-1} g: the coefficient update of an orthonormal-coordinate gradient step.
  Vector precondition(const Vector& g) const { return llt_.solve(g); }
  /// A L^{-T}: the derivative in orthonormal W coordinates.
  Matrix orthonormal_columns(const Matrix& a) const {
    return llt_.matrixU().transpose().solve(a.transpose()).transpose();
  }

 private:
  Eigen::LLT<Matrix> llt_;
};

struct LandweberConfig {
  double mu = 0.0;
  double rho = 0.0;
  int max_iter = 20000;
  double residual_tol = -1.0;  // negative: 1e-12 ||y||
  int record_every = 1;
};

inline void validate(const LandweberConfig& c) {
  require(c.mu > 0.0 && c.mu <= 1.0, ErrorKind::invalid_argument, "step size must lie in (0, 1]");
  require(c.max_iter >= 0, ErrorKind::invalid_argument, "max_iter must be nonnegative");
  require(c.record_every >= 1, ErrorKind::invalid_argument, "record_every must be >= 1");
}

enum class StopReason { tol, max_iter, diverged };

inline const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::tol: return "tol";
    case StopReason::max_iter: return "max_iter";
    case StopReason::diverged: return "diverged";
  }
  return "?";
}

struct IterationTrace {
  std::vector<int> recorded_steps;
  std::vector<Vector> iterates;  // at recorded_steps
  std::vector<double> residuals;  // every step, ||Q F(x_k) - y||
  std::vector<double> errors;     // every step when the truth is known, ||x_k - x_true||_X
  std::vector<double> ratios;     // errors[k+1] / errors[k]
  std::vector<int> clamp_steps;
  StopReason stop_reason = StopReason::max_iter;
  int iterations = 0;
  Vector final_iterate;

  bool clamped() const { return !clamp_steps.empty(); }

  /// Fraction of steps with residual not increasing.
  double monotone_fraction() const {
    if (residuals.size() < 2) return 1.0;
    std::size_t ok = 0;
    for (std::size_t k = 1; k < residuals.size(); ++k)
      if (residuals[k] <= residuals[k - 1]) ++ok;
    return static_cast<double>(ok) / static_cast<double>(residuals.size() - 1);
  }

  /// Geometric-mean error contraction over the run.
  double mean_ratio() const {
    if (errors.size() < 2 || errors.front() == 0.0 || errors.back() == 0.0) return 0.0;
    return std::pow(errors.back() / errors.front(), 1.0 / static_cast<double>(errors.size() - 1));
  }

  double max_ratio() const {
    double m = 0.0;
    for (double r : ratios) m = std::max(m, r);
    return m;
  }
};

/// 0.9 / sigma^2 capped at 1.
inline double stepsize_from_norm(double sigma_max) {
  require(std::isfinite(sigma_max) && sigma_max >= 0.0, ErrorKind::invalid_argument, "invalid derivative norm");
  require(sigma_max > 0.0, ErrorKind::invalid_argument, "degenerate model: derivative vanishes at every sample");
  return std::min(1.0, 0.9 / (sigma_max * sigma_max));
}

/// Step size from the largest singular value of the projected derivative
/// (orthonormal W coordinates) over `samples` points of K: the centre first,
/// then seeded uniform draws.
inline double choose_stepsize(const ForwardModel& model, const ProjectionSpec* spec, const BoxSet& k, int samples,
                              std::uint64_t seed = 0) {
  require(samples >= 1, ErrorKind::invalid_argument, "choose_stepsize needs at least one sample");
  const SubspaceBasis& basis = model.basis();
  require(k.basis_id == basis.label(), ErrorKind::invalid_argument, "K is described in a different basis");
  const WCoordinates w(basis);
  std::vector<Vector> points{k.center()};
  std::mt19937_64 rng(seed);
  for (int i = 1; i < samples; ++i) {
    Vector x(k.dim());
    for (Index j = 0; j < x.size(); ++j) x(j) = uniform(rng, k.lower(j), k.upper(j));
    points.push_back(x);
  }
  const std::vector<double> norms = parallel_map<double>(points.size(), [&](std::size_t i) {
    const DerivativeMatrix a = assemble_derivative_matrix(model, points[i], spec);
    return linalg::max_singular_value(w.orthonormal_columns(a.entries));
  });
  return stepsize_from_norm(*std::max_element(norms.begin(), norms.end()));
}

/// x - mu Gram^{-1} A^T r with r = Q F(x) - y (y in projection coordinates).
inline Vector landweber_step(const ForwardModel& model, const ProjectionSpec* spec, const Vector& x, const Vector& y,
                             double mu, double* residual_norm = nullptr) {
  require(mu >= 0.0, ErrorKind::invalid_argument, "step size must be nonnegative");
  const auto lin = model.linearize(x);
  const Vector qf = spec ? spec->coordinates(lin->value()) : lin->value();
  require_same_dim(qf.size(), y.size(), "Landweber data");
  const Vector r = qf - y;
  if (residual_norm) *residual_norm = r.norm();
  if (mu == 0.0 || r.squaredNorm() == 0.0) return x;
  const Vector g = lin->adjoint(spec ? spec->embed(r) : r);
  return x - mu * WCoordinates(model.basis()).precondition(g);
}

namespace detail {
inline double sup_distance(const Vector& a, const Vector& b) { return (a - b).cwiseAbs().maxCoeff(); }
}  // namespace detail

/// Projected Landweber iteration. Iterates that leave the admissible set are
/// clamped to K and the step is logged.
inline IterationTrace landweber_run(const ForwardModel& model, const ProjectionSpec* spec, const Vector& x0,
                                    const Vector& y, const BoxSet& k, const LandweberConfig& config,
                                    const std::optional<Vector>& truth = std::nullopt) {
  validate(config);
  require(k.contains(x0, 1e-12), ErrorKind::invalid_argument, "Landweber start must lie in K");
  const WCoordinates w(model.basis());
  const double tol = config.residual_tol >= 0.0 ? config.residual_tol : 1e-12 * y.norm();
  const bool keep_errors = truth.has_value();
  IterationTrace trace;
  Vector x = x0;
  double initial_residual = -1.0;
  for (int it = 0;; ++it) {
    const auto lin = model.linearize(x);
    const Vector qf = spec ? spec->coordinates(lin->value()) : lin->value();
    require_same_dim(qf.size(), y.size(), "Landweber data");
    const Vector r = qf - y;
    const double res = r.norm();
    trace.residuals.push_back(res);
    if (keep_errors) {
      trace.errors.push_back(detail::sup_distance(x, *truth));
      if (trace.errors.size() >= 2 && trace.errors[trace.errors.size() - 2] > 0.0)
        trace.ratios.push_back(trace.errors.back() / trace.errors[trace.errors.size() - 2]);
    }
    if (it % config.record_every == 0) {
      trace.recorded_steps.push_back(it);
      trace.iterates.push_back(x);
    }
    if (initial_residual < 0.0) initial_residual = res;
    trace.iterations = it;
    if (!std::isfinite(res) || res > 1e8 * std::max(initial_residual, 1e-300)) {
      trace.stop_reason = StopReason::diverged;
      break;
    }
    if (res <= tol) {
      trace.stop_reason = StopReason::tol;
      break;
    }
    if (it >= config.max_iter) {
      trace.stop_reason = StopReason::max_iter;
      break;
    }
    Vector next = x - config.mu * w.precondition(lin->adjoint(spec ? spec->embed(r) : r));
    if (!next.allFinite()) {
      trace.stop_reason = StopReason::diverged;
      break;
    }
    if (!model.admissible(next)) {
      next = k.clamp(next);
      trace.clamp_steps.push_back(it + 1);
    }
    x = std::move(next);
  }
  if (trace.recorded_steps.empty() || trace.recorded_steps.back() != trace.iterations) {
    trace.recorded_steps.push_back(trace.iterations);
    trace.iterates.push_back(x);
  }
  trace.final_iterate = x;
  return trace;
}

/// Cell-centred grid cover of a box K by sup-norm balls of radius r.
struct LatticeCover {
  BoxSet box;
  double radius = 0.0;
  std::vector<Index> per_axis;
  Index index_set_size = 0;

  Vector point(Index i) const {
    require(i >= 0 && i < index_set_size, ErrorKind::invalid_argument, "lattice index out of range");
    const Index d = box.dim();
    Vector x(d);
    for (Index j = d - 1; j >= 0; --j) {
      const Index n = per_axis[static_cast<std::size_t>(j)];
      const Index c = i % n;
      i /= n;
      x(j) = box.lower(j) + (static_cast<double>(c) + 0.5) * (box.upper(j) - box.lower(j)) / static_cast<double>(n);
    }
    return box.clamp(x);
  }

  std::vector<Vector> points() const {
    std::vector<Vector> out;
    out.reserve(static_cast<std::size_t>(index_set_size));
    for (Index i = 0; i < index_set_size; ++i) out.push_back(point(i));
    return out;
  }

  /// Largest cell half-width, which must not exceed the radius.
  double max_half_spacing() const {
    double m = 0.0;
    for (Index j = 0; j < box.dim(); ++j)
      m = std::max(m, 0.5 * (box.upper(j) - box.lower(j)) / static_cast<double>(per_axis[static_cast<std::size_t>(j)]));
    return m;
  }
};

inline double lattice_radius(double l_hat, double c_hat, double rho, double q_norm) {
  require(l_hat > 0.0 && c_hat > 0.0 && rho > 0.0 && q_norm > 0.0, ErrorKind::invalid_argument,
          "lattice constants must be positive");
  return rho / (2.0 * l_hat * c_hat * q_norm);
}

inline LatticeCover build_lattice(const BoxSet& k, double l_hat, double c_hat, double rho, double q_norm,
                                  double budget = 1e6) {
  LatticeCover cover{k, lattice_radius(l_hat, c_hat, rho, q_norm), {}, 1};
  double total = 1.0;
  for (Index j = 0; j < k.dim(); ++j) {
    const double width = k.upper(j) - k.lower(j);
    // Guard against round-off pushing an exact ratio to the next integer.
    const double cells = width / (2.0 * cover.radius);
    const Index n = width == 0.0 ? 1 : std::max<Index>(1, static_cast<Index>(std::ceil(cells * (1.0 - 1e-12))));
    cover.per_axis.push_back(n);
    total *= static_cast<double>(n);
  }
  if (total > budget) {
    char msg[256];
    std::snprintf(msg, sizeof msg, "lattice needs |I| = %.6g points (radius %.6g), budget is %.6g", total,
                  cover.radius, budget);
    throw Error(ErrorKind::budget_exceeded, msg);
  }
  cover.index_set_size = static_cast<Index>(total);
  return cover;
}

struct InitialGuess {
  std::optional<Index> index;
  Vector point;
  double distance = std::numeric_limits<double>::infinity();      // of the returned point
  double min_distance = std::numeric_limits<double>::infinity();  // over everything evaluated
  double threshold = 0.0;
  Index evaluated = 0;
};

/// First lattice point (index order) with ||Q F(x_i) - y|| < rho / (2 C).
/// Candidates are evaluated in fixed-size chunks; the result does not
/// depend on the thread count.
inline InitialGuess initial_guess(const ForwardModel& model, const ProjectionSpec* spec, const LatticeCover& cover,
                                  const Vector& y, double rho, double c_hat, Index chunk = 256) {
  require(cover.index_set_size >= 1, ErrorKind::invalid_argument, "empty lattice");
  require(rho > 0.0 && c_hat > 0.0, ErrorKind::invalid_argument, "rho and C must be positive");
  InitialGuess out;
  out.threshold = rho / (2.0 * c_hat);
  for (Index start = 0; start < cover.index_set_size; start += chunk) {
    const Index n = std::min(chunk, cover.index_set_size - start);
    const std::vector<double> dist = parallel_map<double>(static_cast<std::size_t>(n), [&](std::size_t i) {
      const Vector x = cover.point(start + static_cast<Index>(i));
      return (projected_measurement(model, spec, x) - y).norm();
    });
    out.evaluated += n;
    for (Index i = 0; i < n; ++i) {
      const double dd = dist[static_cast<std::size_t>(i)];
      out.min_distance = std::min(out.min_distance, dd);
      if (!out.index && dd < out.threshold) {
        out.index = start + i;
        out.distance = dd;
      }
    }
    if (out.index) {
      out.point = cover.point(*out.index);
      return out;
    }
  }
  return out;
}

struct GlobalConfig {
  double rho = 0.0;
  double c_hat = 0.0;
  double l_hat = 1.0;
  double q_norm = 1.0;
  double lattice_budget = 1e6;
  LandweberConfig landweber;
};

struct GlobalResult {
  Vector x;
  IterationTrace trace;
  LatticeCover cover;
  InitialGuess guess;
};

/// Lattice cover, initial-guess search, then Landweber from the guess.
inline GlobalResult global_reconstruct(const ForwardModel& model, const ProjectionSpec* spec, const BoxSet& k,
                                       const Vector& y, const GlobalConfig& config,
                                       const std::optional<Vector>& truth = std::nullopt) {
  GlobalResult out;
  out.cover = build_lattice(k, config.l_hat, config.c_hat, config.rho, config.q_norm, config.lattice_budget);
  out.guess = initial_guess(model, spec, out.cover, y, config.rho, config.c_hat);
  if (!out.guess.index) {
    char msg[256];
    std::snprintf(msg, sizeof msg,
                  "no lattice point within %.6g of the data (closest %.6g over %lld points); rho or C is miscalibrated",
                  out.guess.threshold, out.guess.min_distance, static_cast<long long>(out.guess.evaluated));
    throw Error(ErrorKind::numerical_failure, msg);
  }
  out.trace = landweber_run(model, spec, out.guess.point, y, k, config.landweber, truth);
  if (out.trace.stop_reason == StopReason::diverged)
    throw Error(ErrorKind::numerical_failure, "Landweber iteration diverged after " +
                                                  std::to_string(out.trace.iterations) + " steps");
  out.x = out.trace.final_iterate;
  return out;
}

struct BasinRun {
  double radius = 0.0;
  Vector truth;
  Vector start;
  bool converged = false;
  bool clamped = false;
  int iterations = 0;
  double final_error = 0.0;
  double max_ratio = 0.0;
};

struct BasinCalibration {
  double rho = 0.0;        // largest tested radius with every run converging (0 if none)
  double c_hat = 0.0;      // worst single-step error ratio over the unclamped runs at rho
  std::vector<double> radii;
  std::vector<double> success_rate;
  std::vector<BasinRun> runs;
};

struct BasinOptions {
  std::vector<double> fractions{0.2, 0.1, 0.05, 0.025};  // radii as fractions of diam(K)
  int truths = 10;
  std::uint64_t seed = 7;
  double success_reduction = 1e-3;  // final error <= this times the start error
  LandweberConfig landweber;
};

/// Runs Landweber from starts at distance r from seeded truths in K, for
/// each radius in decreasing order, stopping at the first radius where all
/// runs converge. Truths are drawn from the middle half of K.
inline BasinCalibration calibrate_basin(const ForwardModel& model, const ProjectionSpec* spec, const BoxSet& k,
                                        const BasinOptions& opt) {
  require(opt.truths >= 1, ErrorKind::invalid_argument, "basin calibration needs at least one truth");
  BasinCalibration out;
  const double diam = k.diameter();
  std::vector<double> fractions = opt.fractions;
  std::sort(fractions.begin(), fractions.end(), std::greater<>());
  std::mt19937_64 rng(opt.seed);
  std::vector<Vector> truths, directions;
  for (int t = 0; t < opt.truths; ++t) {
    Vector x(k.dim()), v(k.dim());
    for (Index j = 0; j < x.size(); ++j) {
      const double mid = 0.5 * (k.lower(j) + k.upper(j)), half = 0.25 * (k.upper(j) - k.lower(j));
      x(j) = uniform(rng, mid - half, mid + half);
    }
    for (Index j = 0; j < v.size(); ++j) v(j) = uniform01(rng) < 0.5 ? -1.0 : 1.0;
    truths.push_back(x);
    directions.push_back(v);
  }
  for (double f : fractions) {
    const double radius = f * diam;
    std::vector<BasinRun> runs = parallel_map<BasinRun>(truths.size(), [&](std::size_t t) {
      BasinRun run;
      run.radius = radius;
      run.truth = truths[t];
      run.start = k.clamp(truths[t] + radius * directions[t]);
      const Vector y = projected_measurement(model, spec, run.truth);
      const IterationTrace tr = landweber_run(model, spec, run.start, y, k, opt.landweber, run.truth);
      const double e0 = tr.errors.front();
      run.iterations = tr.iterations;
      run.final_error = tr.errors.back();
      run.clamped = tr.clamped();
      run.max_ratio = tr.max_ratio();
      run.converged = tr.stop_reason != StopReason::diverged &&
                      (tr.stop_reason == StopReason::tol || run.final_error <= opt.success_reduction * e0);
      return run;
    });
    std::size_t ok = 0;
    double worst = 0.0;
    for (const auto& r : runs) {
      if (r.converged) ++ok;
      if (!r.clamped) worst = std::max(worst, r.max_ratio);
    }
    out.radii.push_back(radius);
    out.success_rate.push_back(static_cast<double>(ok) / static_cast<double>(runs.size()));
    out.runs.insert(out.runs.end(), runs.begin(), runs.end());
    if (ok == runs.size()) {
      out.rho = radius;
      out.c_hat = worst;
      break;
    }
  }
  return out;
}

}  // namespace fmlab

#endif  // FMLAB_RECONSTRUCT_HPP
