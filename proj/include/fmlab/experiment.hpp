#ifndef FMLAB_EXPERIMENT_HPP
#define FMLAB_EXPERIMENT_HPP

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "fmlab/eit.hpp"
#include "fmlab/io.hpp"
#include "fmlab/projection.hpp"
#include "fmlab/qpat.hpp"
#include "fmlab/reconstruct.hpp"
#include "fmlab/rkhs.hpp"
#include "fmlab/stability.hpp"

namespace fmlab::experiment {

using io::json;

// ---- Configuration ------------------------------------------------------

struct QpatSettings {
  Index n = 33;
  Index blocks = 2;
  double Lambda = 2.0;
  double phi_bottom = 1.0, phi_top = 1.0, phi_left = 1.0, phi_right = 1.0;
};

struct EitSettings {
  double h = 0.05;
  int Nmax = 16;
  int sectors = 4;
  double lambda = 2.0;
  Index min_boundary = 0;  // 0: 8 Nmax
};

struct RkhsSettings {
  double smoothness = 2.0;
  int cutoff = 200;
  std::vector<int> node_counts{4, 8, 16, 32};
  std::string nodes = "equispaced";
  int samples = 100;
};

struct StabilitySettings {
  int lattice_resolution = 3;
  int pair_budget = 200;
  double safety = 2.0;
  int verify_pairs = 100;
  int mismodeling_pairs = 100;
  double mismodeling_radius = 0.1;  // fraction of diam(K)
};

struct ReconstructSettings {
  std::optional<Vector> truth;
  std::optional<int> level;
  std::optional<double> rho;
  std::vector<double> basin_fractions{0.2, 0.1, 0.05, 0.025};
  int basin_truths = 10;
  int basin_max_iter = 2000;
  double basin_reduction = 1e-3;
  int max_iter = 20000;
  double residual_tol = -1.0;
  int record_every = 1;
  double lattice_budget = 1e6;
  int stepsize_samples = 16;
  bool dump_lattice = false;
};

struct ScalingSettings {
  double lower = 1.0;
  std::vector<double> widths{0.1, 0.3, 0.6, 1.0};
  double safety = 1.0;
};

struct ExperimentConfig {
  std::string experiment;
  std::string model;
  std::uint64_t seed = 0;
  std::optional<Vector> k_lower, k_upper;
  std::string family;
  std::vector<int> levels;
  QpatSettings qpat;
  EitSettings eit;
  RkhsSettings rkhs;
  StabilitySettings stability;
  ReconstructSettings reconstruct;
  ScalingSettings scaling;
  json echo;  // the document as read, with overrides applied
};

namespace detail {

inline void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  require(obj.is_object(), ErrorKind::config, where + " must be an object");
  for (const auto& [key, value] : obj.items())
    require(allowed.count(key) > 0, ErrorKind::config, "unknown key '" + key + "' in " + where);
}

template <class T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorKind::config, std::string("bad value for '") + key + "' in " + where);
  }
}

inline Vector read_bound(const json& v, const std::string& where) {
  if (v.is_number()) return Vector::Constant(1, v.get<double>());
  require(v.is_array(), ErrorKind::config, where + " must be a number or an array");
  return io::vector_from_json(v);
}

inline void positive(double v, const char* what) {
  require(v > 0.0 && std::isfinite(v), ErrorKind::config, std::string(what) + " must be positive");
}

}  // namespace detail

inline const std::set<std::string>& experiment_names() {
  static const std::set<std::string> names{"stability", "reconstruct", "scaling", "rkhs-demo"};
  return names;
}

/// Parses and validates a config document. Unknown keys are rejected.
inline ExperimentConfig parse_config(const json& doc, const std::string& experiment = {},
                                     std::optional<std::uint64_t> seed_override = std::nullopt) {
  using detail::check_keys;
  using detail::read;
  check_keys(doc, {"schema", "experiment", "model", "seed", "K", "projection", "qpat", "eit", "rkhs", "stability",
                   "reconstruct", "scaling"},
             "config");
  ExperimentConfig c;
  c.echo = doc;
  if (doc.contains("schema"))
    require(doc["schema"] == io::kSchema, ErrorKind::config, "unsupported schema " + doc["schema"].dump());
  read(doc, "experiment", c.experiment, "config");
  if (!experiment.empty()) {
    require(c.experiment.empty() || c.experiment == experiment, ErrorKind::config,
            "config is for experiment '" + c.experiment + "', not '" + experiment + "'");
    c.experiment = experiment;
  }
  require(experiment_names().count(c.experiment) > 0, ErrorKind::config, "unknown experiment '" + c.experiment + "'");
  read(doc, "model", c.model, "config");
  if (c.model.empty()) c.model = c.experiment == "rkhs-demo" ? "rkhs-demo" : c.experiment == "scaling" ? "eit" : "qpat";
  require(c.model == "qpat" || c.model == "eit" || c.model == "rkhs-demo", ErrorKind::config,
          "unknown model '" + c.model + "'");
  require((c.model == "rkhs-demo") == (c.experiment == "rkhs-demo"), ErrorKind::config,
          "the rkhs-demo model runs only in the rkhs-demo experiment");
  if (seed_override) {
    c.seed = *seed_override;
    c.echo["seed"] = *seed_override;
  } else {
    require(doc.contains("seed"), ErrorKind::config, "config needs a seed");
    read(doc, "seed", c.seed, "config");
  }

  if (doc.contains("K")) {
    const json& k = doc["K"];
    check_keys(k, {"lower", "upper"}, "K");
    require(k.contains("lower") && k.contains("upper"), ErrorKind::config, "K needs lower and upper");
    c.k_lower = detail::read_bound(k["lower"], "K.lower");
    c.k_upper = detail::read_bound(k["upper"], "K.upper");
  }
  if (doc.contains("projection")) {
    const json& p = doc["projection"];
    check_keys(p, {"family", "levels"}, "projection");
    read(p, "family", c.family, "projection");
    read(p, "levels", c.levels, "projection");
  }
  for (std::size_t i = 1; i < c.levels.size(); ++i)
    require(c.levels[i] > c.levels[i - 1], ErrorKind::config, "projection levels must be strictly increasing");
  for (int l : c.levels) require(l >= 1, ErrorKind::config, "projection levels must be positive");

  if (doc.contains("qpat")) {
    const json& q = doc["qpat"];
    check_keys(q, {"n", "blocks", "Lambda", "phi"}, "qpat");
    read(q, "n", c.qpat.n, "qpat");
    read(q, "blocks", c.qpat.blocks, "qpat");
    read(q, "Lambda", c.qpat.Lambda, "qpat");
    if (q.contains("phi")) {
      const json& phi = q["phi"];
      if (phi.is_number()) {
        c.qpat.phi_bottom = c.qpat.phi_top = c.qpat.phi_left = c.qpat.phi_right = phi.get<double>();
      } else {
        check_keys(phi, {"bottom", "top", "left", "right"}, "qpat.phi");
        read(phi, "bottom", c.qpat.phi_bottom, "qpat.phi");
        read(phi, "top", c.qpat.phi_top, "qpat.phi");
        read(phi, "left", c.qpat.phi_left, "qpat.phi");
        read(phi, "right", c.qpat.phi_right, "qpat.phi");
      }
    }
  }
  require(c.qpat.n >= 2 && c.qpat.blocks >= 1 && c.qpat.blocks <= c.qpat.n, ErrorKind::config,
          "qpat.n and qpat.blocks out of range");
  require(c.qpat.Lambda >= 1.0, ErrorKind::config, "qpat.Lambda must be >= 1");
  for (double v : {c.qpat.phi_bottom, c.qpat.phi_top, c.qpat.phi_left, c.qpat.phi_right})
    detail::positive(v, "qpat.phi");

  if (doc.contains("eit")) {
    const json& e = doc["eit"];
    check_keys(e, {"h", "Nmax", "sectors", "lambda", "min_boundary"}, "eit");
    read(e, "h", c.eit.h, "eit");
    read(e, "Nmax", c.eit.Nmax, "eit");
    read(e, "sectors", c.eit.sectors, "eit");
    read(e, "lambda", c.eit.lambda, "eit");
    read(e, "min_boundary", c.eit.min_boundary, "eit");
  }
  require(c.eit.h >= 0.01 && c.eit.h <= 0.3, ErrorKind::config, "eit.h must lie in [0.01, 0.3]");
  require(c.eit.Nmax >= 1 && c.eit.sectors >= 1 && c.eit.lambda >= 1.0, ErrorKind::config, "eit settings out of range");

  if (doc.contains("rkhs")) {
    const json& r = doc["rkhs"];
    check_keys(r, {"smoothness", "cutoff", "node_counts", "nodes", "samples"}, "rkhs");
    read(r, "smoothness", c.rkhs.smoothness, "rkhs");
    read(r, "cutoff", c.rkhs.cutoff, "rkhs");
    read(r, "node_counts", c.rkhs.node_counts, "rkhs");
    read(r, "nodes", c.rkhs.nodes, "rkhs");
    read(r, "samples", c.rkhs.samples, "rkhs");
  }
  require(c.rkhs.nodes == "equispaced" || c.rkhs.nodes == "nested", ErrorKind::config,
          "rkhs.nodes must be 'equispaced' or 'nested'");
  require(c.rkhs.cutoff >= 1 && c.rkhs.samples >= 1 && !c.rkhs.node_counts.empty(), ErrorKind::config,
          "rkhs budgets must be positive");
  for (std::size_t i = 0; i < c.rkhs.node_counts.size(); ++i)
    require(c.rkhs.node_counts[i] >= 1 && (i == 0 || c.rkhs.node_counts[i] > c.rkhs.node_counts[i - 1]),
            ErrorKind::config, "rkhs.node_counts must be positive and strictly increasing");

  if (doc.contains("stability")) {
    const json& s = doc["stability"];
    check_keys(s, {"lattice_resolution", "pair_budget", "safety", "verify_pairs", "mismodeling_pairs",
                   "mismodeling_radius"},
               "stability");
    read(s, "lattice_resolution", c.stability.lattice_resolution, "stability");
    read(s, "pair_budget", c.stability.pair_budget, "stability");
    read(s, "safety", c.stability.safety, "stability");
    read(s, "verify_pairs", c.stability.verify_pairs, "stability");
    read(s, "mismodeling_pairs", c.stability.mismodeling_pairs, "stability");
    read(s, "mismodeling_radius", c.stability.mismodeling_radius, "stability");
  }
  require(c.stability.lattice_resolution >= 2, ErrorKind::config, "stability.lattice_resolution must be >= 2");
  require(c.stability.pair_budget >= 10, ErrorKind::config, "stability.pair_budget must be >= 10");
  require(c.stability.verify_pairs >= 1 && c.stability.mismodeling_pairs >= 1, ErrorKind::config,
          "verification pair counts must be positive");
  detail::positive(c.stability.safety, "stability.safety");
  detail::positive(c.stability.mismodeling_radius, "stability.mismodeling_radius");

  if (doc.contains("reconstruct")) {
    const json& r = doc["reconstruct"];
    check_keys(r, {"truth", "level", "rho", "basin_fractions", "basin_truths", "basin_max_iter", "basin_reduction",
                   "max_iter", "residual_tol", "record_every", "lattice_budget", "stepsize_samples", "dump_lattice"},
               "reconstruct");
    if (r.contains("truth")) c.reconstruct.truth = io::vector_from_json(r["truth"]);
    if (r.contains("level") && !(r["level"].is_string() && r["level"] == "auto")) {
      int level = 0;
      read(r, "level", level, "reconstruct");
      c.reconstruct.level = level;
    }
    if (r.contains("rho")) {
      double rho = 0.0;
      read(r, "rho", rho, "reconstruct");
      detail::positive(rho, "reconstruct.rho");
      c.reconstruct.rho = rho;
    }
    read(r, "basin_fractions", c.reconstruct.basin_fractions, "reconstruct");
    read(r, "basin_truths", c.reconstruct.basin_truths, "reconstruct");
    read(r, "basin_max_iter", c.reconstruct.basin_max_iter, "reconstruct");
    read(r, "basin_reduction", c.reconstruct.basin_reduction, "reconstruct");
    read(r, "max_iter", c.reconstruct.max_iter, "reconstruct");
    read(r, "residual_tol", c.reconstruct.residual_tol, "reconstruct");
    read(r, "record_every", c.reconstruct.record_every, "reconstruct");
    read(r, "lattice_budget", c.reconstruct.lattice_budget, "reconstruct");
    read(r, "stepsize_samples", c.reconstruct.stepsize_samples, "reconstruct");
    read(r, "dump_lattice", c.reconstruct.dump_lattice, "reconstruct");
  }
  {
    const auto& r = c.reconstruct;
    require(!r.basin_fractions.empty(), ErrorKind::config, "reconstruct.basin_fractions must not be empty");
    for (double f : r.basin_fractions) detail::positive(f, "reconstruct.basin_fractions");
    require(r.basin_truths >= 1 && r.basin_max_iter >= 1 && r.max_iter >= 1 && r.record_every >= 1 &&
                r.stepsize_samples >= 1,
            ErrorKind::config, "reconstruct budgets must be positive");
    detail::positive(r.lattice_budget, "reconstruct.lattice_budget");
    detail::positive(r.basin_reduction, "reconstruct.basin_reduction");
    if (r.level) require(*r.level >= 1, ErrorKind::config, "reconstruct.level must be positive");
  }

  if (doc.contains("scaling")) {
    const json& s = doc["scaling"];
    check_keys(s, {"lower", "widths", "safety"}, "scaling");
    read(s, "lower", c.scaling.lower, "scaling");
    read(s, "widths", c.scaling.widths, "scaling");
    read(s, "safety", c.scaling.safety, "scaling");
  }
  detail::positive(c.scaling.lower, "scaling.lower");
  detail::positive(c.scaling.safety, "scaling.safety");
  require(c.scaling.widths.size() >= 2, ErrorKind::config, "scaling needs at least two widths");
  for (std::size_t i = 0; i < c.scaling.widths.size(); ++i)
    require(c.scaling.widths[i] > 0.0 && (i == 0 || c.scaling.widths[i] > c.scaling.widths[i - 1]),
            ErrorKind::config, "scaling.widths must be positive and strictly increasing");
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, const std::string& experiment = {},
                                    std::optional<std::uint64_t> seed_override = std::nullopt) {
  json doc;
  try {
    doc = json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::config, "config is not valid JSON: " + std::string(e.what()));
  }
  return parse_config(doc, experiment, seed_override);
}

// ---- Models ---------------------------------------------------------------

struct ModelBundle {
  std::unique_ptr<ForwardModel> model;
  BoxSet box;
  std::string family;
  std::vector<int> levels;
  std::function<ProjectionSpec(int)> make_spec;
  const qpat::QpatModel* qpat = nullptr;
  const eit::EitModel* eit = nullptr;
};

inline BoxSet config_box(const ExperimentConfig& c, const ForwardModel& model, const BoxSet& fallback) {
  if (!c.k_lower) return fallback;
  const Index d = model.dim();
  auto expand = [d](const Vector& v) {
    if (v.size() == 1) return Vector(Vector::Constant(d, v(0)));
    require(v.size() == d, ErrorKind::config,
            "K bounds have " + std::to_string(v.size()) + " entries, the model has " + std::to_string(d));
    return v;
  };
  BoxSet k(expand(*c.k_lower), expand(*c.k_upper), model.basis().label());
  for (Index i = 0; i < k.dim(); ++i)
    require(k.lower(i) > 0.0, ErrorKind::config, "K must lie in the admissible set (positive lower bounds)");
  return k;
}

inline std::unique_ptr<eit::EitModel> make_eit(const EitSettings& s) {
  const Index min_b = s.min_boundary > 0 ? s.min_boundary : 8 * static_cast<Index>(s.Nmax);
  return std::make_unique<eit::EitModel>(eit::mesh_disk(s.h, min_b), s.Nmax, s.sectors, s.lambda);
}

inline ModelBundle make_model(const ExperimentConfig& c) {
  ModelBundle b;
  if (c.model == "qpat") {
    const QpatSettings& q = c.qpat;
    auto phi = [q](double x, double y) {
      if (y == 0.0) return q.phi_bottom;
      if (y == 1.0) return q.phi_top;
      if (x == 0.0) return q.phi_left;
      return q.phi_right;
    };
    auto m = std::make_unique<qpat::QpatModel>(qpat::QpatGrid::uniform(q.n, phi), q.blocks, q.Lambda);
    b.qpat = m.get();
    b.box = config_box(c, *m, m->default_box());
    b.family = c.family.empty() ? "block-average" : c.family;
    const Index n = q.n;
    if (b.family == "block-average")
      b.make_spec = [n](int l) { return qpat::block_average_projection(n, l); };
    else if (b.family == "tensor-cosine")
      b.make_spec = [n](int l) { return qpat::tensor_cosine_projection(n, l); };
    else
      throw Error(ErrorKind::config, "projection family '" + b.family + "' does not apply to qpat");
    b.levels = c.levels.empty() ? std::vector<int>{1, 2, 4, 8, 16, 32} : c.levels;
    for (int l : b.levels) require(l <= n, ErrorKind::config, "projection level exceeds the grid size");
    b.model = std::move(m);
  } else if (c.model == "eit") {
    auto m = make_eit(c.eit);
    b.eit = m.get();
    b.box = config_box(c, *m, m->default_box());
    b.family = c.family.empty() ? "two-sided-truncation" : c.family;
    require(b.family == "two-sided-truncation", ErrorKind::config,
            "projection family '" + b.family + "' does not apply to eit");
    const Index side = m->side();
    b.make_spec = [side](int l) { return ProjectionSpec::two_sided_truncation(l, side); };
    if (c.levels.empty()) {
      for (int l = 1; l <= c.eit.Nmax; ++l) b.levels.push_back(l);
    } else {
      b.levels = c.levels;
    }
    for (int l : b.levels) require(l <= c.eit.Nmax, ErrorKind::config, "projection level exceeds eit.Nmax");
    b.model = std::move(m);
  } else {
    throw Error(ErrorKind::config, "model '" + c.model + "' has no forward map");
  }
  return b;
}

// ---- Report ------------------------------------------------------------

struct TraceRow {
  int iteration;
  double residual;
  double error;
  double ratio;
};

struct ScalingRow {
  double width;
  double c_hat;
  double threshold;
  int n_star;  // -1 when not reached
};

/// Everything emit_plots needs, kept next to the JSON body.
struct PlotData {
  std::vector<SPoint> s_curve;
  std::vector<TraceRow> trace;
  std::vector<ScalingRow> scaling;
};

struct ManifestEntry {
  std::string file;
  std::string sha256;
  std::uintmax_t bytes = 0;
};

struct ExperimentReport {
  std::string experiment;
  std::string status = "ok";
  std::string stage;
  std::string diagnostics;
  int exit_code = 0;
  json config;
  json results = json::object();
  PlotData plots;
  std::optional<StabilityReport> stability;
  std::vector<ManifestEntry> manifest;
  json wall_clock = json::object();
};

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config:
    case ErrorKind::invalid_argument:
    case ErrorKind::dimension_mismatch:
      return 2;
    default:
      return 3;
  }
}

inline json report_json(const ExperimentReport& r) {
  json j;
  j["schema"] = io::kSchema;
  j["experiment"] = r.experiment;
  j["status"] = r.status;
  j["stage"] = r.stage;
  j["diagnostics"] = r.diagnostics;
  j["config"] = r.config;
  j["results"] = r.results;
  json files = json::array();
  for (const auto& m : r.manifest) files.push_back({{"file", m.file}, {"sha256", m.sha256}, {"bytes", m.bytes}});
  j["manifest"] = std::move(files);
  j["wall_clock"] = r.wall_clock;
  return j;
}

/// Artifact writer: every file lands in the output directory and the manifest.
class ArtifactWriter {
 public:
  explicit ArtifactWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }
  const std::filesystem::path& dir() const { return dir_; }

  void text(const std::string& name, const std::string& body) {
    const auto path = dir_ / name;
    io::write_text(path, body);
    entries_.push_back({name, io::sha256_file(path), std::filesystem::file_size(path)});
  }
  void csv(const std::string& name, const io::CsvTable& t) { text(name, io::to_csv(t)); }
  void json_file(const std::string& name, const json& j) { text(name, j.dump(2) + "\n"); }

  std::vector<ManifestEntry> take() { return std::move(entries_); }

 private:
  std::filesystem::path dir_;
  std::vector<ManifestEntry> entries_;
};

/// Plot-ready CSVs: s_N vs N, residual and error vs iteration, N* vs C.
inline void emit_plots(const PlotData& p, ArtifactWriter& w) {
  io::CsvTable s{{"N", "s_N"}, {}};
  for (const SPoint& pt : p.s_curve) s.rows.push_back({static_cast<double>(pt.level), pt.s});
  w.csv("plot_s_curve.csv", s);
  io::CsvTable res{{"iteration", "residual"}, {}};
  io::CsvTable err{{"iteration", "error", "ratio"}, {}};
  for (const TraceRow& t : p.trace) {
    res.rows.push_back({static_cast<double>(t.iteration), t.residual});
    if (std::isfinite(t.error)) err.rows.push_back({static_cast<double>(t.iteration), t.error, t.ratio});
  }
  w.csv("plot_residual.csv", res);
  w.csv("plot_error.csv", err);
  io::CsvTable sc{{"c_hat", "n_star", "width", "threshold"}, {}};
  for (const ScalingRow& r : p.scaling)
    sc.rows.push_back({r.c_hat, static_cast<double>(r.n_star), r.width, r.threshold});
  w.csv("plot_scaling.csv", sc);
}

// ---- Pipelines ---------------------------------------------------------

namespace detail {

using Clock = std::chrono::steady_clock;

class StageTimer {
 public:
  StageTimer(ExperimentReport& r, std::string name) : r_(r), name_(std::move(name)), start_(Clock::now()) {
    r_.stage = name_;
  }
  ~StageTimer() { r_.wall_clock["stages"][name_] = std::chrono::duration<double>(Clock::now() - start_).count(); }

 private:
  ExperimentReport& r_;
  std::string name_;
  Clock::time_point start_;
};

inline Vector random_point(const BoxSet& k, std::mt19937_64& rng, double shrink = 1.0) {
  Vector x(k.dim());
  for (Index j = 0; j < x.size(); ++j) {
    const double mid = 0.5 * (k.lower(j) + k.upper(j)), half = 0.5 * shrink * (k.upper(j) - k.lower(j));
    x(j) = uniform(rng, mid - half, mid + half);
  }
  return x;
}

/// Pairs pushed outside K by up to radius (sup norm), kept admissible.
inline std::vector<std::pair<Vector, Vector>> perturbed_pairs(const ForwardModel& model, const BoxSet& k, int count,
                                                              double radius, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::pair<Vector, Vector>> out;
  auto push_out = [&](Vector x) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      Vector y = x;
      const Index j = static_cast<Index>(rng() % static_cast<std::uint64_t>(k.dim()));
      const double t = uniform(rng, 0.0, radius);
      y(j) = uniform01(rng) < 0.5 ? k.lower(j) - t : k.upper(j) + t;
      if (model.admissible(y) && model.admissible(2.0 * y - k.clamp(y))) return y;
    }
    throw Error(ErrorKind::numerical_failure, "could not place an admissible point outside K");
  };
  for (int i = 0; i < count; ++i) {
    Vector a = random_point(k, rng), b = random_point(k, rng);
    a = push_out(a);
    if (i % 2 == 0) b = push_out(b);
    out.emplace_back(std::move(a), std::move(b));
  }
  return out;
}

inline json vec(const Vector& v) { return io::to_json(v); }

}  // namespace detail

struct StabilityOutcome {
  StabilityReport report;
  SCurve curve;
  CEstimate c_full;
  std::optional<CEstimate> c_projected;
  int c_reestimates = 0;
};

/// s_N sweep, C estimate, N selection, and (optionally) pair verification.
inline StabilityOutcome stability_pipeline(const ModelBundle& b, const ExperimentConfig& c, ExperimentReport& rep,
                                           bool verify) {
  const ForwardModel& model = *b.model;
  const StabilitySettings& s = c.stability;
  StabilityOutcome out;
  StabilityReport& r = out.report;
  r.model = model.name();
  r.seed = c.seed;
  r.pair_budget = s.pair_budget;
  r.safety = s.safety;
  r.lattice_resolution = s.lattice_resolution;
  std::vector<ProjectionSpec> specs;
  for (int l : b.levels) specs.push_back(b.make_spec(l));
  {
    detail::StageTimer t(rep, "s_curve");
    out.curve = estimate_s_curve(model, b.box, s.lattice_resolution, specs, {});
    r.s_curve = out.curve.points;
  }
  {
    detail::StageTimer t(rep, "estimate_C");
    CEstimateOptions opt;
    opt.pair_budget = s.pair_budget;
    opt.seed = c.seed;
    opt.lattice_resolution = s.lattice_resolution;
    out.c_full = estimate_C(model, b.box, opt);
    r.c_hat = out.c_full.c_hat;
    r.c_hat_degenerate = out.c_full.degenerate;
    r.lipschitz_F = out.c_full.l_hat;
    r.lipschitz_F_raw = out.c_full.l_hat_raw;
  }
  require(!out.c_full.degenerate, ErrorKind::numerical_failure, "C estimate is degenerate: K is a single point");
  const NSelection sel = select_N(r.s_curve, r.c_hat, s.safety);
  r.n_star = sel.n_star;
  r.threshold = sel.threshold;
  r.smallest_gap = sel.smallest_gap;
  if (!verify || !r.n_star) return out;

  const ProjectionSpec spec = b.make_spec(*r.n_star);
  r.d_bound = spec.norm_bound();
  {
    detail::StageTimer t(rep, "estimate_C_projected");
    CEstimateOptions opt;
    opt.pair_budget = s.pair_budget;
    opt.seed = c.seed;
    opt.lattice_resolution = s.lattice_resolution;
    opt.spec = &spec;
    out.c_projected = estimate_C(model, b.box, opt);
    r.c_hat_projected = out.c_projected->c_hat;
  }
  {
    detail::StageTimer t(rep, "verify");
    const auto pairs = sample_pairs(b.box, s.verify_pairs, c.seed + 1);
    int budget = s.pair_budget;
    for (;;) {
      VerifyOptions vo;
      vo.c_hat = r.c_hat;
      const StabilityVerification v = verify_stability(model, &spec, pairs, b.box, vo);
      r.pair_records = v.records;
      r.verified = v.verified;
      if (v.verified || out.c_reestimates >= 2) break;
      // A violation means C was under-sampled: re-estimate with twice the pairs.
      budget *= 2;
      ++out.c_reestimates;
      CEstimateOptions opt;
      opt.pair_budget = budget;
      opt.seed = c.seed;
      opt.lattice_resolution = s.lattice_resolution;
      out.c_full = estimate_C(model, b.box, opt);
      r.c_hat = std::max(r.c_hat, out.c_full.c_hat);
    }
  }
  {
    detail::StageTimer t(rep, "verify_mismodeling");
    const auto pairs = detail::perturbed_pairs(model, b.box, s.mismodeling_pairs,
                                               s.mismodeling_radius * b.box.diameter(), c.seed + 2);
    VerifyOptions vo;
    vo.c_hat = r.c_hat;
    vo.d_bound = r.d_bound;
    vo.l_hat = r.lipschitz_F;
    vo.include_mismodeling = true;
    const StabilityVerification v = verify_stability(model, &spec, pairs, b.box, vo);
    r.mismodeling_records = v.records;
    r.mismodeling_verified = v.verified;
  }
  return out;
}

inline void run_stability(const ExperimentConfig& c, ExperimentReport& rep, ArtifactWriter& w) {
  ModelBundle b;
  {
    detail::StageTimer t(rep, "model");
    b = make_model(c);
  }
  StabilityOutcome o = stability_pipeline(b, c, rep, true);
  const StabilityReport& r = o.report;
  rep.results["model"] = r.model;
  rep.results["family"] = b.family;
  rep.results["levels"] = b.levels;
  rep.results["K"] = {{"lower", detail::vec(b.box.lower)}, {"upper", detail::vec(b.box.upper)}};
  rep.results["lattice_size"] = o.curve.lattice_size;
  rep.results["s_curve"] = io::to_json(r)["s_curve"];
  rep.results["s_nonincreasing"] = [&] {
    for (std::size_t i = 1; i < r.s_curve.size(); ++i)
      if (r.s_curve[i].s > r.s_curve[i - 1].s) return false;
    return true;
  }();
  rep.results["c_hat"] = r.c_hat;
  rep.results["c_hat_inflated"] = r.safety * r.c_hat;
  rep.results["c_hat_projected"] = r.c_hat_projected;
  rep.results["c_reestimates"] = o.c_reestimates;
  rep.results["lipschitz_F"] = r.lipschitz_F;
  rep.results["lipschitz_F_raw"] = r.lipschitz_F_raw;
  rep.results["pairs_used"] = o.c_full.pairs;
  rep.results["worst_pair"] = {{"x1", detail::vec(o.c_full.worst_x1)}, {"x2", detail::vec(o.c_full.worst_x2)}};
  rep.results["safety"] = r.safety;
  rep.results["threshold"] = r.threshold;
  rep.results["n_star"] = r.n_star ? json(*r.n_star) : json(nullptr);
  rep.results["smallest_gap"] = r.smallest_gap;
  auto violations = [](const std::vector<PairRecord>& recs) {
    std::size_t v = 0;
    for (const auto& p : recs) v += p.lhs > p.rhs ? 1 : 0;
    return v;
  };
  rep.results["verified"] = r.verified;
  rep.results["violations"] = violations(r.pair_records);
  rep.results["mismodeling_verified"] = r.mismodeling_verified;
  rep.results["mismodeling_violations"] = violations(r.mismodeling_records);
  w.json_file("stability.json", io::to_json(r));
  w.csv("s_curve.csv", io::s_curve_table(r.s_curve));
  w.csv("pairs.csv", io::pair_table(r));
  rep.plots.s_curve = r.s_curve;
  rep.stability = r;
}

inline void run_reconstruct(const ExperimentConfig& c, ExperimentReport& rep, ArtifactWriter& w) {
  ModelBundle b;
  {
    detail::StageTimer t(rep, "model");
    b = make_model(c);
  }
  const ForwardModel& model = *b.model;
  const ReconstructSettings& rs = c.reconstruct;
  std::mt19937_64 rng(c.seed);
  int level = 0;
  if (rs.level) {
    level = *rs.level;
  } else {
    StabilityOutcome o = stability_pipeline(b, c, rep, false);
    require(o.report.n_star.has_value(), ErrorKind::numerical_failure,
            "no listed level satisfies s_N <= 1/(2 C); cannot choose N automatically");
    level = *o.report.n_star;
    rep.results["s_curve"] = io::to_json(o.report)["s_curve"];
    rep.plots.s_curve = o.report.s_curve;
  }
  const ProjectionSpec spec = b.make_spec(level);
  Vector truth;
  if (rs.truth) {
    truth = *rs.truth;
    require(truth.size() == model.dim(), ErrorKind::config, "reconstruct.truth has the wrong dimension");
    require(b.box.contains(truth), ErrorKind::config, "reconstruct.truth must lie in K");
  } else {
    truth = detail::random_point(b.box, rng, 0.8);
  }
  const Vector y = projected_measurement(model, &spec, truth);

  CEstimate c_full, c_proj;
  {
    detail::StageTimer t(rep, "constants");
    CEstimateOptions opt;
    opt.pair_budget = c.stability.pair_budget;
    opt.seed = c.seed;
    opt.lattice_resolution = c.stability.lattice_resolution;
    c_full = estimate_C(model, b.box, opt);
    opt.spec = &spec;
    c_proj = estimate_C(model, b.box, opt);
  }
  // The lattice lemma consumes the constant of the projected estimate
  // ||dx|| <= 2 C ||Q dF||; the sampled projected constant stands in for 2 C.
  const double c_rec = c.stability.safety * c_proj.c_hat / 2.0;
  const double l_hat = c_full.l_hat;
  double mu = 0.0;
  {
    detail::StageTimer t(rep, "stepsize");
    mu = choose_stepsize(model, &spec, b.box, rs.stepsize_samples, c.seed);
  }
  LandweberConfig lw;
  lw.mu = mu;
  lw.max_iter = rs.max_iter;
  lw.residual_tol = rs.residual_tol;
  lw.record_every = rs.record_every;

  double rho = 0.0;
  json basin = json::object();
  if (rs.rho) {
    rho = *rs.rho;
    basin["source"] = "config";
  } else {
    detail::StageTimer t(rep, "basin");
    BasinOptions bo;
    bo.fractions = rs.basin_fractions;
    bo.truths = rs.basin_truths;
    bo.seed = c.seed + 7;
    bo.success_reduction = rs.basin_reduction;
    bo.landweber = lw;
    bo.landweber.max_iter = rs.basin_max_iter;
    const BasinCalibration cal = calibrate_basin(model, &spec, b.box, bo);
    rho = cal.rho;
    basin["source"] = "calibrated";
    basin["radii"] = cal.radii;
    basin["success_rate"] = cal.success_rate;
    basin["c_hat"] = cal.c_hat;
    io::CsvTable bt{{"radius", "run", "converged", "clamped", "iterations", "final_error", "max_ratio"}, {}};
    for (std::size_t i = 0; i < cal.runs.size(); ++i) {
      const auto& run = cal.runs[i];
      bt.rows.push_back({run.radius, static_cast<double>(i % static_cast<std::size_t>(bo.truths)),
                         run.converged ? 1.0 : 0.0, run.clamped ? 1.0 : 0.0, static_cast<double>(run.iterations),
                         run.final_error, run.max_ratio});
    }
    w.csv("basin.csv", bt);
    require(rho > 0.0, ErrorKind::numerical_failure, "basin calibration: no tested radius converged for every truth");
  }
  lw.rho = rho;
  basin["rho"] = rho;

  GlobalConfig gc;
  gc.rho = rho;
  gc.c_hat = c_rec;
  gc.l_hat = l_hat;
  gc.q_norm = spec.norm_bound();
  gc.lattice_budget = rs.lattice_budget;
  gc.landweber = lw;
  rep.results["level"] = level;
  rep.results["projection"] = io::to_json(spec);
  rep.results["truth"] = detail::vec(truth);
  rep.results["c_hat"] = c_full.c_hat;
  rep.results["c_hat_projected"] = c_proj.c_hat;
  rep.results["c_reconstruct"] = c_rec;
  rep.results["lipschitz_F"] = l_hat;
  rep.results["mu"] = mu;
  rep.results["basin"] = basin;

  GlobalResult g;
  {
    detail::StageTimer t(rep, "global");
    g = global_reconstruct(model, &spec, b.box, y, gc, truth);
  }
  const IterationTrace& tr = g.trace;
  const double scale = truth.cwiseAbs().maxCoeff();
  const double rel = (g.x - truth).cwiseAbs().maxCoeff() / scale;
  bool bound_holds = true;
  const double c_run = tr.max_ratio();
  for (std::size_t k = 0; k < tr.errors.size(); ++k)
    if (tr.errors[k] > rho * std::pow(c_run, static_cast<double>(k)) * (1.0 + 1e-12) + 1e-300) bound_holds = false;
  rep.results["lattice"] = {{"radius", g.cover.radius},
                            {"per_axis", g.cover.per_axis},
                            {"index_set_size", g.cover.index_set_size},
                            {"evaluated", g.guess.evaluated},
                            {"guess_index", *g.guess.index},
                            {"guess", detail::vec(g.guess.point)},
                            {"guess_measurement_distance", g.guess.distance},
                            {"guess_threshold", g.guess.threshold},
                            {"guess_error", (g.guess.point - truth).cwiseAbs().maxCoeff()}};
  rep.results["reconstruction"] = {{"x", detail::vec(g.x)},
                                   {"relative_error", rel},
                                   {"iterations", tr.iterations},
                                   {"stop_reason", to_string(tr.stop_reason)},
                                   {"final_residual", tr.residuals.back()},
                                   {"clamp_events", tr.clamp_steps.size()},
                                   {"monotone_fraction", tr.monotone_fraction()},
                                   {"mean_ratio", tr.mean_ratio()},
                                   {"max_ratio", c_run},
                                   {"rate_bound_holds", bound_holds}};
  io::CsvTable t{{"iteration", "residual", "error", "ratio"}, {}};
  for (std::size_t k = 0; k < tr.residuals.size(); ++k) {
    const double e = k < tr.errors.size() ? tr.errors[k] : std::nan("");
    const double r = k >= 1 && k - 1 < tr.ratios.size() ? tr.ratios[k - 1] : std::nan("");
    t.rows.push_back({static_cast<double>(k), tr.residuals[k], e, r});
    rep.plots.trace.push_back({static_cast<int>(k), tr.residuals[k], e, r});
  }
  w.csv("trace.csv", t);
  json summary = rep.results["reconstruction"];
  summary["schema"] = io::kSchema;
  w.json_file("trace_summary.json", summary);
  if (rs.dump_lattice) {
    io::CsvTable lt{{}, {}};
    for (Index j = 0; j < model.dim(); ++j) lt.header.push_back("x" + std::to_string(j));
    for (Index i = 0; i < g.cover.index_set_size; ++i) {
      const Vector p = g.cover.point(i);
      lt.rows.emplace_back(p.data(), p.data() + p.size());
    }
    w.csv("lattice.csv", lt);
  }
}

/// Least-squares slope and intercept of log N* against log C.
inline std::pair<double, double> fit_power_law(const std::vector<double>& c, const std::vector<double>& n) {
  require(c.size() == n.size() && c.size() >= 2, ErrorKind::numerical_failure, "power-law fit needs two points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    mx += std::log(c[i]);
    my += std::log(n[i]);
  }
  mx /= static_cast<double>(c.size());
  my /= static_cast<double>(c.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    sxy += (std::log(c[i]) - mx) * (std::log(n[i]) - my);
    sxx += (std::log(c[i]) - mx) * (std::log(c[i]) - mx);
  }
  require(sxx > 0.0, ErrorKind::numerical_failure, "power-law fit needs distinct C values");
  return {sxy / sxx, my - sxy / sxx * mx};
}

inline void run_scaling(const ExperimentConfig& c, ExperimentReport& rep, ArtifactWriter& w) {
  ModelBundle b;
  {
    detail::StageTimer t(rep, "model");
    b = make_model(c);
  }
  ExperimentConfig cw = c;
  cw.stability.safety = c.scaling.safety;
  io::CsvTable table{{"width", "lower", "upper", "c_hat", "lipschitz_F", "threshold", "n_star"}, {}};
  io::CsvTable curves{{"width", "N", "s_N"}, {}};
  std::vector<double> cs, ns;
  json rows = json::array();
  for (double width : c.scaling.widths) {
    b.box = BoxSet::cube(b.model->dim(), c.scaling.lower, c.scaling.lower + width, b.model->basis().label());
    StabilityOutcome o = stability_pipeline(b, cw, rep, false);
    const StabilityReport& r = o.report;
    const int n_star = r.n_star ? *r.n_star : -1;
    table.rows.push_back({width, c.scaling.lower, c.scaling.lower + width, r.c_hat, r.lipschitz_F, r.threshold,
                          static_cast<double>(n_star)});
    for (const SPoint& p : r.s_curve) curves.rows.push_back({width, static_cast<double>(p.level), p.s});
    rows.push_back({{"width", width},
                    {"c_hat", r.c_hat},
                    {"threshold", r.threshold},
                    {"n_star", r.n_star ? json(n_star) : json(nullptr)},
                    {"smallest_gap", r.smallest_gap}});
    rep.plots.scaling.push_back({width, r.c_hat, r.threshold, n_star});
    if (r.n_star) {
      cs.push_back(r.c_hat);
      ns.push_back(static_cast<double>(n_star));
    }
  }
  w.csv("scaling.csv", table);
  w.csv("scaling_s_curves.csv", curves);
  rep.results["model"] = b.model->name();
  rep.results["lower"] = c.scaling.lower;
  rep.results["safety"] = c.scaling.safety;
  rep.results["levels"] = b.levels;
  rep.results["rows"] = rows;
  bool c_monotone = true, n_monotone = true;
  for (std::size_t i = 1; i < rep.plots.scaling.size(); ++i) {
    c_monotone = c_monotone && rep.plots.scaling[i].c_hat >= rep.plots.scaling[i - 1].c_hat;
    n_monotone = n_monotone && rep.plots.scaling[i].n_star >= rep.plots.scaling[i - 1].n_star;
  }
  rep.results["c_hat_monotone"] = c_monotone;
  rep.results["n_star_monotone"] = n_monotone;
  rep.results["points_fitted"] = cs.size();
  {
    detail::StageTimer t(rep, "fit");
    require(cs.size() >= 2, ErrorKind::numerical_failure, "fewer than two widths reached N*; cannot fit an exponent");
    const auto [slope, intercept] = fit_power_law(cs, ns);
    rep.results["exponent"] = slope;
    rep.results["fit_intercept"] = intercept;
    // N* ~ c C^2 with c the fitted constant at exponent 2.
    double lc = 0.0;
    for (std::size_t i = 0; i < cs.size(); ++i) lc += std::log(ns[i]) - 2.0 * std::log(cs[i]);
    rep.results["quadratic_constant"] = std::exp(lc / static_cast<double>(cs.size()));
  }
  if (b.eit) {
    detail::StageTimer t(rep, "delta_N");
    json d = json::array();
    const int top = c.eit.Nmax;
    for (int n = 1; n < std::min(top, 9); ++n) {
      const double cont = eit::delta_N(n);
      const double disc = std::sqrt(eit::discrete_delta_squared(b.eit->fem(), n, top));
      d.push_back({{"N", n}, {"continuum", cont}, {"discrete", disc}, {"relative_gap", std::abs(disc - cont) / cont}});
    }
    rep.results["delta_N"] = d;
  }
}

inline void run_rkhs_demo(const ExperimentConfig& c, ExperimentReport& rep, ArtifactWriter& w) {
  detail::StageTimer timer(rep, "rkhs");
  SobolevCircleKernel kernel;
  kernel.smoothness = c.rkhs.smoothness;
  kernel.cutoff = c.rkhs.cutoff;
  std::mt19937_64 rng(c.seed);
  // Test function f = cos + 0.5 sin 2 on the circle, as kernel feature coordinates.
  const Vector f = kernel.trig_coordinates(1) + 0.5 * kernel.trig_coordinates(2, true);
  auto f_at = [](double t) { return std::cos(t) + 0.5 * std::sin(2.0 * t); };
  io::CsvTable table{{"N", "lambda_min", "C_N", "interpolation_error", "max_stability_ratio", "projection_norm"}, {}};
  json rows = json::array();
  bool all_ok = true;
  for (int n : c.rkhs.node_counts) {
    const std::vector<double> nodes = c.rkhs.nodes == "nested" ? nested_circle_nodes(n) : equispaced_nodes(n);
    const Matrix gram = rkhs_gram(kernel, nodes);
    const ProjectionSpec spec = ProjectionSpec::rkhs_sampling(kernel, nodes);
    const Vector qf = spec.apply(f);
    double interp = 0.0;
    for (double a : nodes) interp = std::max(interp, std::abs(kernel.feature(a).dot(qf) - f_at(a)));
    Vector samples(n);
    for (int j = 0; j < n; ++j) samples(j) = f_at(nodes[static_cast<std::size_t>(j)]);
    const RkhsSampleProjection proj = rkhs_project_from_samples(gram, samples);
    double worst = 0.0;
    for (int s = 0; s < c.rkhs.samples; ++s) {
      Vector v(n);
      for (int j = 0; j < n; ++j) v(j) = uniform(rng, -1.0, 1.0);
      const RkhsSampleProjection p = rkhs_project_from_samples(gram, v);
      worst = std::max(worst, p.projection_norm / (p.stable_constant * v.norm()));
    }
    const bool ok = interp <= 1e-8 && worst <= 1.0 + 1e-10;
    all_ok = all_ok && ok;
    const double lmin = 1.0 / (proj.stable_constant * proj.stable_constant);
    table.rows.push_back({static_cast<double>(n), lmin, proj.stable_constant, interp, worst, proj.projection_norm});
    rows.push_back({{"N", n},
                    {"lambda_min", lmin},
                    {"C_N", proj.stable_constant},
                    {"condition_number", proj.condition_number},
                    {"interpolation_error", interp},
                    {"max_stability_ratio", worst},
                    {"projection_norm", proj.projection_norm},
                    {"ok", ok}});
  }
  w.csv("rkhs.csv", table);
  rep.results["kernel"] = {{"smoothness", kernel.smoothness}, {"cutoff", kernel.cutoff}};
  rep.results["nodes"] = c.rkhs.nodes;
  rep.results["rows"] = rows;
  rep.results["all_ok"] = all_ok;
}

/// Runs the configured pipeline and writes every artifact plus report.json
/// into `out_dir`. Failures produce a partial report with the failing stage.
inline ExperimentReport run_experiment(const ExperimentConfig& c, const std::filesystem::path& out_dir) {
  const auto start = detail::Clock::now();
  ExperimentReport rep;
  rep.experiment = c.experiment;
  rep.config = c.echo;
  ArtifactWriter w(out_dir);
  try {
    if (c.experiment == "stability") run_stability(c, rep, w);
    else if (c.experiment == "reconstruct") run_reconstruct(c, rep, w);
    else if (c.experiment == "scaling") run_scaling(c, rep, w);
    else run_rkhs_demo(c, rep, w);
    rep.stage = "complete";
  } catch (const Error& e) {
    rep.status = "failed";
    rep.diagnostics = e.what();
    rep.exit_code = exit_code_for(e.kind());
  } catch (const std::exception& e) {
    rep.status = "failed";
    rep.diagnostics = e.what();
    rep.exit_code = 3;
  }
  emit_plots(rep.plots, w);
  rep.manifest = w.take();
  rep.wall_clock["total"] = std::chrono::duration<double>(detail::Clock::now() - start).count();
  io::write_text(out_dir / "report.json", report_json(rep).dump(2) + "\n");
  return rep;
}

/// report.json without its wall-clock field, for reproducibility checks.
inline std::string canonical_report(const std::filesystem::path& report_path) {
  json j = json::parse(io::read_text(report_path));
  j.erase("wall_clock");
  return j.dump();
}

}  // namespace fmlab::experiment

#endif  // FMLAB_EXPERIMENT_HPP
