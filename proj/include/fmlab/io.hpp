#ifndef FMLAB_IO_HPP
#define FMLAB_IO_HPP

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "fmlab/common.hpp"
#include "fmlab/eit.hpp"
#include "fmlab/projection.hpp"
#include "fmlab/qpat.hpp"
#include "fmlab/rkhs.hpp"
#include "fmlab/stability.hpp"

namespace fmlab::io {

using json = nlohmann::ordered_json;

inline constexpr const char* kSchema = "fm-report/1";

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline json to_json(const Vector& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Vector vector_from_json(const json& a) {
  require(a.is_array(), ErrorKind::config, "expected a numeric array");
  Vector v(static_cast<Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    require(a[i].is_number(), ErrorKind::config, "expected a numeric array");
    v(static_cast<Index>(i)) = a[i].get<double>();
  }
  return v;
}

inline void ensure_parent(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  ensure_parent(p);
  std::ofstream out(p, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::config, "cannot write " + p.string());
  out << text;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::config, "cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- CSV ----------------------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

/// Leading comment line carries the schema; header row follows.
inline std::string to_csv(const CsvTable& t) {
  std::string out = std::string("# schema: ") + kSchema + "\n";
  for (std::size_t i = 0; i < t.header.size(); ++i) out += (i ? "," : "") + t.header[i];
  out += "\n";
  for (const auto& row : t.rows) {
    require(row.size() == t.header.size(), ErrorKind::dimension_mismatch, "CSV row width differs from header");
    for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + format_double(row[i]);
    out += "\n";
  }
  return out;
}

inline void write_csv(const std::filesystem::path& p, const CsvTable& t) { write_text(p, to_csv(t)); }

/// Row-major matrix, one line per row after the schema comment.
inline std::string matrix_to_csv(const Matrix& m) {
  std::string out = std::string("# schema: ") + kSchema + "\n";
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) out += (j ? "," : "") + format_double(m(i, j));
    out += "\n";
  }
  return out;
}

inline Matrix matrix_from_csv(const std::string& text) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(std::stod(cell));
    require(rows.empty() || row.size() == rows.front().size(), ErrorKind::dimension_mismatch,
            "ragged CSV matrix");
    rows.push_back(std::move(row));
  }
  Matrix m(static_cast<Index>(rows.size()), rows.empty() ? 0 : static_cast<Index>(rows.front().size()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  return m;
}

/// Interior grid field as an n x n CSV, row j holding the nodes (1..n, j).
inline std::string grid_field_to_csv(const Vector& values, Index n) {
  require_same_dim(n * n, values.size(), "grid field");
  Matrix m(n, n);
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < n; ++i) m(j, i) = values(j * n + i);
  return matrix_to_csv(m);
}

// ---- FMQ1 binary grid fields -------------------------------------------
//   "FMQ1", u64 n, u64 count, then count * n * n little-endian doubles.

namespace detail {
template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}
}  // namespace detail

inline std::string fmq1_encode(Index n, const std::vector<Vector>& fields) {
  std::string out = "FMQ1";
  auto put = [&out](auto v) {
    v = detail::to_little(v);
    out.append(reinterpret_cast<const char*>(&v), sizeof v);
  };
  put(static_cast<std::uint64_t>(n));
  put(static_cast<std::uint64_t>(fields.size()));
  for (const Vector& f : fields) {
    require_same_dim(n * n, f.size(), "FMQ1 field");
    for (Index i = 0; i < f.size(); ++i) put(f(i));
  }
  return out;
}

struct Fmq1 {
  Index n = 0;
  std::vector<Vector> fields;
};

inline Fmq1 fmq1_decode(const std::string& bytes) {
  require(bytes.size() >= 20 && bytes.compare(0, 4, "FMQ1") == 0, ErrorKind::invalid_argument, "not an FMQ1 stream");
  std::size_t pos = 4;
  auto get = [&](auto& v) {
    require(pos + sizeof v <= bytes.size(), ErrorKind::invalid_argument, "truncated FMQ1 stream");
    std::memcpy(&v, bytes.data() + pos, sizeof v);
    v = detail::to_little(v);
    pos += sizeof v;
  };
  std::uint64_t n = 0, count = 0;
  get(n);
  get(count);
  require(bytes.size() == 20 + count * n * n * 8, ErrorKind::invalid_argument, "FMQ1 size does not match header");
  Fmq1 out;
  out.n = static_cast<Index>(n);
  for (std::uint64_t c = 0; c < count; ++c) {
    Vector f(static_cast<Index>(n * n));
    for (Index i = 0; i < f.size(); ++i) get(f(i));
    out.fields.push_back(std::move(f));
  }
  return out;
}

// ---- Mesh ---------------------------------------------------------------

struct MeshCsv {
  std::string vertices, triangles, boundary;
};

inline MeshCsv mesh_to_csv(const eit::DiskMesh& mesh) {
  MeshCsv out;
  const std::string tag = std::string("# schema: ") + kSchema + "\n";
  out.vertices = tag + "x,y\n";
  for (const auto& v : mesh.vertices) out.vertices += format_double(v.x()) + "," + format_double(v.y()) + "\n";
  out.triangles = tag + "a,b,c\n";
  for (const auto& t : mesh.triangles)
    out.triangles += std::to_string(t[0]) + "," + std::to_string(t[1]) + "," + std::to_string(t[2]) + "\n";
  out.boundary = tag + "vertex\n";
  for (Index b : mesh.boundary) out.boundary += std::to_string(b) + "\n";
  return out;
}

// ---- Hashing ------------------------------------------------------------

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  require(ctx != nullptr, ErrorKind::numerical_failure, "cannot allocate digest context");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 && EVP_DigestFinal_ex(ctx, digest, &len) == 1;
  EVP_MD_CTX_free(ctx);
  require(ok, ErrorKind::numerical_failure, "SHA-256 computation failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

inline std::string sha256_file(const std::filesystem::path& p) { return sha256_hex(read_text(p)); }

// ---- Projection specs ---------------------------------------------------

inline json to_json(const ProjectionSpec& p) {
  json j;
  j["kind"] = to_string(p.kind());
  j["level"] = p.level();
  j["rank"] = p.rank();
  j["norm_bound"] = p.norm_bound();
  json payload;
  payload["generator"] = p.generator();
  payload["ambient_dim"] = p.ambient_dim();
  switch (p.kind()) {
    case ProjectionKind::nested_orthogonal:
      if (p.generator() == "block-average" || p.generator() == "tensor-cosine") {
        payload["grid_n"] = p.grid_n();
      } else if (!p.is_identity()) {
        json cols = json::array();
        for (Index c = 0; c < p.basis().cols(); ++c) cols.push_back(to_json(Vector(p.basis().col(c))));
        payload["columns"] = std::move(cols);
      }
      break;
    case ProjectionKind::two_sided_truncation:
      payload["side"] = p.side();
      payload["block"] = p.block();
      break;
    case ProjectionKind::rkhs_sampling:
      payload["smoothness"] = p.kernel().smoothness;
      payload["cutoff"] = p.kernel().cutoff;
      payload["nodes"] = p.nodes();
      break;
  }
  j["payload"] = std::move(payload);
  return j;
}

inline ProjectionSpec projection_from_json(const json& j) {
  try {
    const ProjectionKind kind = projection_kind_from_string(j.at("kind").get<std::string>());
    const int level = j.at("level").get<int>();
    const json& payload = j.at("payload");
    const std::string gen = payload.at("generator").get<std::string>();
    ProjectionSpec out = [&] {
      switch (kind) {
        case ProjectionKind::nested_orthogonal: {
          if (gen == "identity") return ProjectionSpec::identity(payload.at("ambient_dim").get<Index>(), level);
          if (gen == "block-average") return qpat::block_average_projection(payload.at("grid_n").get<Index>(), level);
          if (gen == "tensor-cosine") return qpat::tensor_cosine_projection(payload.at("grid_n").get<Index>(), level);
          const json& cols = payload.at("columns");
          require(!cols.empty(), ErrorKind::config, "explicit projection needs columns");
          Matrix b(static_cast<Index>(cols[0].size()), static_cast<Index>(cols.size()));
          for (std::size_t c = 0; c < cols.size(); ++c) b.col(static_cast<Index>(c)) = vector_from_json(cols[c]);
          return ProjectionSpec::nested_orthogonal(level, std::move(b), gen);
        }
        case ProjectionKind::two_sided_truncation:
          return ProjectionSpec::two_sided_truncation(level, payload.at("side").get<Index>());
        case ProjectionKind::rkhs_sampling: {
          SobolevCircleKernel k;
          k.smoothness = payload.at("smoothness").get<double>();
          k.cutoff = payload.at("cutoff").get<int>();
          return ProjectionSpec::rkhs_sampling(k, payload.at("nodes").get<std::vector<double>>());
        }
      }
      throw Error(ErrorKind::config, "unknown projection kind");
    }();
    require(out.rank() == j.at("rank").get<Index>(), ErrorKind::config, "projection rank does not match payload");
    return out;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("malformed projection spec: ") + e.what());
  }
}

// ---- Stability report ---------------------------------------------------

inline json to_json(const PairRecord& r) {
  json j;
  j["x1"] = to_json(r.x1);
  j["x2"] = to_json(r.x2);
  j["lhs"] = r.lhs;
  j["rhs"] = r.rhs;
  j["mismodeling"] = r.mismodeling;
  j["margin"] = r.margin;
  return j;
}

inline json to_json(const StabilityReport& r) {
  json j;
  j["schema"] = kSchema;
  j["model"] = r.model;
  json curve = json::array();
  for (const SPoint& p : r.s_curve) curve.push_back({{"level", p.level}, {"s", p.s}});
  j["s_curve"] = std::move(curve);
  j["lattice_resolution"] = r.lattice_resolution;
  j["c_hat"] = r.c_hat;
  j["c_hat_projected"] = r.c_hat_projected;
  j["c_hat_degenerate"] = r.c_hat_degenerate;
  j["safety"] = r.safety;
  j["lipschitz_F"] = r.lipschitz_F;
  j["lipschitz_F_raw"] = r.lipschitz_F_raw;
  j["d_bound"] = r.d_bound;
  j["n_star"] = r.n_star ? json(*r.n_star) : json(nullptr);
  j["threshold"] = r.threshold;
  j["smallest_gap"] = r.smallest_gap;
  j["seed"] = r.seed;
  j["pair_budget"] = r.pair_budget;
  j["verified"] = r.verified;
  j["mismodeling_verified"] = r.mismodeling_verified;
  json pairs = json::array();
  for (const auto& p : r.pair_records) pairs.push_back(to_json(p));
  j["pairs"] = std::move(pairs);
  json mis = json::array();
  for (const auto& p : r.mismodeling_records) mis.push_back(to_json(p));
  j["mismodeling_pairs"] = std::move(mis);
  return j;
}

inline CsvTable s_curve_table(const std::vector<SPoint>& curve) {
  CsvTable t{{"N", "s_N"}, {}};
  for (const SPoint& p : curve) t.rows.push_back({static_cast<double>(p.level), p.s});
  return t;
}

/// One row per verified pair: set (0 in K, 1 perturbed), index, lhs, rhs, mismodeling, margin.
inline CsvTable pair_table(const StabilityReport& r) {
  CsvTable t{{"set", "index", "lhs", "rhs", "mismodeling", "margin"}, {}};
  auto add = [&t](const std::vector<PairRecord>& recs, double set) {
    for (std::size_t i = 0; i < recs.size(); ++i)
      t.rows.push_back({set, static_cast<double>(i), recs[i].lhs, recs[i].rhs, recs[i].mismodeling, recs[i].margin});
  };
  add(r.pair_records, 0.0);
  add(r.mismodeling_records, 1.0);
  return t;
}

}  // namespace fmlab::io

#endif  // FMLAB_IO_HPP
