#pragma once

// CSV ingestion/output and JSON persistence of estimates and emulators.

#include <Eigen/Dense>

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fcal/calibrate.hpp"
#include "fcal/data.hpp"
#include "fcal/emulator.hpp"
#include "fcal/errors.hpp"
#include "fcal/kernel.hpp"

#ifndef FCAL_VERSION
#define FCAL_VERSION "0.0.0"
#endif

namespace fcal {

using json = nlohmann::json;

inline constexpr const char* kEstimateSchema = "fcal.estimate/1";
inline constexpr const char* kEmulatorSchema = "fcal.emulator/1";

inline std::string library_version() { return FCAL_VERSION; }

/// What produced an artifact. `config` never contains thread counts or output paths.
struct Provenance {
  json config = json::object();
  std::uint64_t seed = 0;
  std::string version = library_version();

  [[nodiscard]] json to_json() const { return {{"version", version}, {"seed", seed}, {"config", config}}; }

  /// Single-line `# ...` header for CSV artifacts.
  [[nodiscard]] std::string comment() const {
    return "# fcal " + version + " seed=" + std::to_string(seed) + " config=" + config.dump();
  }
};

/// Shortest round-trip decimal form, independent of the C++ locale.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

struct CsvTable {
  std::vector<std::string> header;
  Eigen::MatrixXd values;
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && (s[a] == ' ' || s[a] == '\t' || s[a] == '\r')) ++a;
  while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
  return std::string(s.substr(a, b - a));
}

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline double parse_field(const std::string& field, const std::string& where) {
  double v = 0.0;
  const char* first = field.data();
  const char* last = first + field.size();
  if (!field.empty() && *first == '+') ++first;
  const auto res = std::from_chars(first, last, v);
  if (field.empty() || res.ec != std::errc() || res.ptr != last) {
    throw DataError(where + ": cannot parse '" + field + "' as a number");
  }
  if (!std::isfinite(v)) throw DataError(where + ": non-finite value '" + field + "'");
  return v;
}

}  // namespace detail

/// Reads a numeric CSV with one header row. Lines starting with '#' and blank
/// lines are skipped. NaN/Inf and malformed rows raise DataError with the line number.
inline CsvTable read_csv(std::istream& in, const std::string& name = "csv") {
  CsvTable t;
  std::string line;
  std::vector<std::vector<double>> rows;
  int lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = detail::trim(line);
    if (s.empty() || s[0] == '#') continue;
    auto fields = detail::split_fields(s);
    if (!have_header) {
      t.header = std::move(fields);
      have_header = true;
      continue;
    }
    const std::string where = name + ":" + std::to_string(lineno);
    if (fields.size() != t.header.size()) {
      throw DataError(where + ": expected " + std::to_string(t.header.size()) + " fields, found " +
                      std::to_string(fields.size()));
    }
    std::vector<double> r;
    r.reserve(fields.size());
    for (const auto& f : fields) r.push_back(detail::parse_field(f, where));
    rows.push_back(std::move(r));
  }
  if (!have_header) throw DataError(name + ": missing header row");
  t.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t.header.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      t.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  return t;
}

inline CsvTable read_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open '" + path + "'");
  return read_csv(in, path);
}

namespace detail {

/// Counts the leading run of columns named prefix1, prefix2, ... starting at `from`.
inline Eigen::Index prefix_run(const std::vector<std::string>& header, std::size_t from, char prefix) {
  Eigen::Index k = 0;
  for (std::size_t c = from; c < header.size(); ++c) {
    if (header[c] != std::string(1, prefix) + std::to_string(k + 1)) break;
    ++k;
  }
  return k;
}

inline std::string header_text(const std::vector<std::string>& h) {
  std::string s;
  for (std::size_t i = 0; i < h.size(); ++i) s += (i ? "," : "") + h[i];
  return s;
}

}  // namespace detail

/// Physical data with header `x1,...,xd,y1,...,yr`. The domain defaults to the
/// range of the design unless bounds are given.
inline PhysicalDataset physical_from_table(const CsvTable& t, const std::string& name = "physical data",
                                           const Eigen::VectorXd& lower = {}, const Eigen::VectorXd& upper = {}) {
  const Eigen::Index d = detail::prefix_run(t.header, 0, 'x');
  const Eigen::Index r = detail::prefix_run(t.header, static_cast<std::size_t>(d), 'y');
  if (d == 0 || r == 0 || d + r != static_cast<Eigen::Index>(t.header.size())) {
    throw DataError(name + ": malformed header '" + detail::header_text(t.header) + "' (expected x1,...,xd,y1,...,yr)");
  }
  if (t.values.rows() == 0) throw DataError(name + ": no observations");
  PhysicalDataset data;
  data.x = t.values.leftCols(d);
  data.y = t.values.rightCols(r);
  data.lower = lower.size() ? lower : Eigen::VectorXd(data.x.colwise().minCoeff().transpose());
  data.upper = upper.size() ? upper : Eigen::VectorXd(data.x.colwise().maxCoeff().transpose());
  data.validate();
  return data;
}

inline PhysicalDataset read_physical(const std::string& path, const Eigen::VectorXd& lower = {},
                                     const Eigen::VectorXd& upper = {}) {
  return physical_from_table(read_csv_file(path), path, lower, upper);
}

/// Computer runs with header `x1,...,xd,t1,...,tq,y1,...,yr`.
struct ComputerRuns {
  Eigen::MatrixXd inputs;   // m x (d + q)
  Eigen::MatrixXd outputs;  // m x r
  int input_dim = 1;
};

inline ComputerRuns runs_from_table(const CsvTable& t, const std::string& name = "computer runs") {
  const Eigen::Index d = detail::prefix_run(t.header, 0, 'x');
  const Eigen::Index q = detail::prefix_run(t.header, static_cast<std::size_t>(d), 't');
  const Eigen::Index r = detail::prefix_run(t.header, static_cast<std::size_t>(d + q), 'y');
  if (d == 0 || q == 0 || r == 0 || d + q + r != static_cast<Eigen::Index>(t.header.size())) {
    throw DataError(name + ": malformed header '" + detail::header_text(t.header) +
                    "' (expected x1,...,xd,t1,...,tq,y1,...,yr)");
  }
  return {t.values.leftCols(d + q), t.values.rightCols(r), static_cast<int>(d)};
}

inline ComputerRuns read_runs(const std::string& path) { return runs_from_table(read_csv_file(path), path); }

/// Writes a CSV with the provenance comment as first line.
inline void write_csv(std::ostream& out, const Provenance& prov, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
  out << prov.comment() << '\n' << detail::header_text(header) << '\n';
  for (const auto& r : rows) out << detail::header_text(r) << '\n';
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write '" + path + "'");
  out << text;
  if (!out) throw UsageError("failed writing '" + path + "'");
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace detail {

inline json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from(const json& j, Eigen::Index cols_if_empty = 0) {
  if (!j.is_array()) throw DataError("expected a matrix (array of rows)");
  const auto n = static_cast<Eigen::Index>(j.size());
  const Eigen::Index c = n ? static_cast<Eigen::Index>(j[0].size()) : cols_if_empty;
  Eigen::MatrixXd m(n, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    const json& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != c) throw DataError("ragged matrix in JSON");
    for (Eigen::Index k = 0; k < c; ++k) m(i, k) = row[static_cast<std::size_t>(k)].get<double>();
  }
  return m;
}

inline json vector_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Eigen::VectorXd vector_from(const json& j) {
  if (!j.is_array()) throw DataError("expected a vector");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = j[static_cast<std::size_t>(i)].get<double>();
  return v;
}

inline void check_schema(const json& j, const char* schema) {
  if (!j.is_object() || !j.contains("schema") || j["schema"] != schema) {
    throw DataError(std::string("not a ") + schema + " document");
  }
}

}  // namespace detail

/// Self-describing JSON for an estimate; `model` names the computer model it was fitted against.
inline json estimate_json(const CalibrationEstimate& est, const json& model, const Provenance& prov) {
  json kernel = {{"spec", est.kernel.spec()}};
  if (const auto* c = std::get_if<SobolevCubic>(&est.kernel.variant())) {
    kernel["lower"] = c->lower;
    kernel["upper"] = c->upper;
  }
  const auto& b = est.basis;
  json report = {{"objective", est.report.objective}, {"iterations", est.report.iterations},
                 {"converged", est.report.converged}, {"feasible", est.report.feasible},
                 {"monotone", est.report.monotone},   {"starts", est.report.starts},
                 {"message", est.report.message}};
  return {{"schema", kEstimateSchema},
          {"provenance", prov.to_json()},
          {"model", model},
          {"kernel", kernel},
          {"basis",
           {{"kind", b.kind == NullBasis::Kind::constant ? "constant" : "linear"}, {"lower", b.lower}, {"upper", b.upper}}},
          {"lambda", est.lambda},
          {"anchors", detail::matrix_json(est.anchors)},
          {"alpha", detail::matrix_json(est.coef.alpha)},
          {"beta", detail::matrix_json(est.coef.beta)},
          {"report", report}};
}

inline CalibrationEstimate estimate_from_json(const json& j) {
  detail::check_schema(j, kEstimateSchema);
  try {
    const json& k = j.at("kernel");
    CalibrationEstimate est{parse_kernel_spec(k.at("spec").get<std::string>(), k.value("lower", 0.0), k.value("upper", 1.0)),
                            NullBasis{}, Eigen::MatrixXd(), Coefficients{}, 0.0, ConvergenceReport{}};
    const json& b = j.at("basis");
    est.basis.kind = b.at("kind").get<std::string>() == "constant" ? NullBasis::Kind::constant : NullBasis::Kind::linear_unit;
    est.basis.lower = b.at("lower").get<double>();
    est.basis.upper = b.at("upper").get<double>();
    est.lambda = j.at("lambda").get<double>();
    est.anchors = detail::matrix_from(j.at("anchors"));
    est.coef.alpha = detail::matrix_from(j.at("alpha"));
    est.coef.beta = detail::matrix_from(j.at("beta"));
    if (est.coef.beta.cols() != est.anchors.rows() || est.coef.alpha.rows() != est.coef.beta.rows() ||
        est.coef.alpha.cols() != est.basis.dim()) {
      throw DataError("estimate coefficient shapes are inconsistent");
    }
    const json& r = j.at("report");
    est.report.objective = r.at("objective").is_null() ? std::nan("") : r.at("objective").get<double>();
    est.report.iterations = r.at("iterations").get<int>();
    est.report.converged = r.at("converged").get<bool>();
    est.report.feasible = r.at("feasible").get<bool>();
    est.report.monotone = r.at("monotone").get<bool>();
    est.report.starts = r.at("starts").get<int>();
    est.report.message = r.at("message").get<std::string>();
    return est;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed estimate: ") + e.what());
  }
}

inline json emulator_json(const Emulator& em, const Provenance& prov) {
  return {{"schema", kEmulatorSchema},
          {"provenance", prov.to_json()},
          {"input_dim", em.input_dim()},
          {"inputs", detail::matrix_json(em.inputs())},
          {"outputs", detail::matrix_json(em.outputs())},
          {"lower", detail::vector_json(em.lower())},
          {"upper", detail::vector_json(em.upper())},
          {"lengthscales", detail::vector_json(em.lengthscales())},
          {"jitter", em.jitter()},
          {"training_residual", em.training_residual()},
          {"log_likelihood", em.log_likelihood()}};
}

inline Emulator emulator_from_json(const json& j) {
  detail::check_schema(j, kEmulatorSchema);
  try {
    return Emulator(detail::matrix_from(j.at("inputs")), detail::matrix_from(j.at("outputs")),
                    j.at("input_dim").get<int>(), detail::vector_from(j.at("lower")),
                    detail::vector_from(j.at("upper")), detail::vector_from(j.at("lengthscales")),
                    j.at("jitter").get<double>());
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed emulator: ") + e.what());
  }
}

inline json parse_json_text(const std::string& text, const std::string& name) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(name + ": invalid JSON (" + e.what() + ")");
  }
}

}  // namespace fcal
