#pragma once

// The rkhs_calib command line: configuration parsing and subcommand runners.

#include <CLI11.hpp>

#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fcal/bench.hpp"
#include "fcal/calibrate.hpp"
#include "fcal/emulator.hpp"
#include "fcal/io.hpp"
#include "fcal/select.hpp"
#include "fcal/uq.hpp"

namespace fcal::cli {

inline constexpr const char* kThreadsEnv = "RKHS_CALIB_THREADS";

struct RunConfig {
  std::string command;
  // inputs
  std::string physical;
  std::string runs;
  std::string estimate;
  std::string emulator;
  std::string model;
  std::string at;
  std::string align;
  std::string domain;
  // method
  std::string kernel = "cubic";
  std::string lambda = "gcv";
  std::string trace = "per-copy";
  std::string method = "rkhs-cubic";
  std::string methods = "const,param-exp,param-quad,rkhs-cubic";
  std::string code = "cc";
  std::vector<double> levels{0.90, 0.95, 0.99};
  std::optional<double> rho;
  std::optional<double> interp_guard;
  int lambda_count = 40;
  double lambda_hi = 1e2;
  double lambda_lo = 1e-8;
  int multistart = 0;
  int max_iter = 500;
  int setting = 0;
  int n = 50;
  int reps = 100;
  int C = 1;
  int grid = 200;
  int refine = 1;
  std::uint64_t seed = 1;
  // outputs and execution (not part of provenance)
  std::string out;
  std::string gcv_out;
  unsigned threads = 1;

  /// The options that determine the numbers in an artifact.
  [[nodiscard]] json provenance_config() const {
    json j = {{"command", command}};
    auto put = [&](const char* key, const std::string& v) {
      if (!v.empty()) j[key] = v;
    };
    put("physical", physical);
    put("runs", runs);
    put("estimate", estimate);
    put("emulator", emulator);
    put("model", model);
    put("at", at);
    put("align", align);
    put("domain", domain);
    if (command == "calibrate" || command == "gcv-scan" || command == "cv") {
      j["kernel"] = kernel;
      j["lambda"] = lambda;
      j["lambda_grid"] = {lambda_count, lambda_hi, lambda_lo};
      j["gcv_trace"] = trace;
      j["multistart"] = multistart;
      j["max_iter"] = max_iter;
    }
    if (command == "uq") {
      j["levels"] = levels;
      j["gcv_trace"] = trace;
      if (rho) j["rho"] = *rho;
    }
    if (command == "uq" || command == "predict") j["grid"] = grid;
    if (command == "emulate" && interp_guard) j["interp_guard"] = *interp_guard;
    if (command == "simulate") {
      j["setting"] = setting;
      j["methods"] = methods;
      j["code"] = code;
      j["n"] = n;
      j["reps"] = reps;
      j["levels"] = levels;
      j["gcv_trace"] = trace;
    }
    if (command == "emulate") {
      if (setting) j["setting"] = setting;
      j["refine"] = refine;
    }
    if (command == "cv") {
      j["method"] = method;
      j["C"] = C;
      j["reps"] = reps;
    }
    return j;
  }

  [[nodiscard]] Provenance provenance() const { return {provenance_config(), seed, library_version()}; }
};

/// Every violated cross-flag constraint, empty when the configuration is usable.
inline std::vector<std::string> violations(const RunConfig& c) {
  std::vector<std::string> v;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) v.push_back(msg);
  };
  const bool has_model = !c.model.empty() || !c.emulator.empty();
  if (c.command == "calibrate" || c.command == "gcv-scan" || c.command == "cv") {
    need(!c.physical.empty(), "--physical is required for " + c.command);
    need(has_model, "--model or --emulator is required for " + c.command);
  }
  if (c.command == "predict" || c.command == "uq") need(!c.estimate.empty(), "--estimate is required for " + c.command);
  if (c.command == "uq") need(!c.physical.empty(), "--physical is required for uq");
  if (c.command == "simulate") need(c.setting >= 1 && c.setting <= 4, "--setting must be 1..4 for simulate");
  if (c.command == "emulate") {
    need(!c.runs.empty() || c.setting != 0, "--runs or --setting is required for emulate");
    need(c.runs.empty() || c.setting == 0, "--runs and --setting are mutually exclusive");
  }
  if (!c.model.empty() && !c.emulator.empty()) v.push_back("--model and --emulator are mutually exclusive");
  if (c.out.empty()) v.push_back("--out is required");
  for (double l : c.levels) need(l > 0.0 && l < 1.0, "levels must lie in (0, 1)");
  if (c.rho) need(*c.rho > 0.0, "--rho must be positive");
  need(c.lambda_count >= 1, "--lambda-count must be at least 1");
  need(c.lambda_lo > 0.0 && c.lambda_hi >= c.lambda_lo, "--lambda-range needs 0 < lo <= hi");
  need(c.n >= 3, "--n must be at least 3");
  need(c.reps >= 1, "--reps must be at least 1");
  need(c.C == 1 || c.C == 2, "--C must be 1 or 2");
  need(c.grid >= 1, "--grid must be at least 1");
  need(c.refine >= 1, "--refine must be at least 1");
  need(c.max_iter >= 1, "--max-iter must be at least 1");
  if (c.lambda != "gcv") {
    try {
      need(detail::parse_positive(c.lambda, "lambda") > 0.0, "--lambda must be positive or 'gcv'");
    } catch (const Error&) {
      v.push_back("--lambda must be a positive number or 'gcv'");
    }
  }
  try {
    (void)parse_trace(c.trace);
  } catch (const Error& e) {
    v.push_back(e.what());
  }
  return v;
}

inline unsigned default_threads() {
  const unsigned h = std::thread::hardware_concurrency();
  return h ? h : 1u;
}

/// Outcome of parsing: a config, or an exit status with the text to print.
struct Parsed {
  std::optional<RunConfig> config;
  int status = 0;
  std::string message;
};

inline Parsed parse_config(int argc, const char* const* argv) {
  RunConfig c;
  c.threads = default_threads();
  CLI::App app{"Nonparametric functional calibration of computer models", "rkhs_calib"};
  app.set_version_flag("--version", library_version());
  app.set_config("--config", "", "TOML/INI file with option values (sections per subcommand)");
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--threads", c.threads, "Worker threads (never changes results)")
      ->envname(kThreadsEnv)
      ->check(CLI::PositiveNumber);
  app.add_option("--seed", c.seed, "Base random seed");

  auto add_model = [&](CLI::App* s) {
    s->add_option("--model", c.model, "Builtin computer model sim1..sim4 or identity");
    s->add_option("--emulator", c.emulator, "Emulator JSON used as the computer model")->check(CLI::ExistingFile);
  };
  auto add_fit = [&](CLI::App* s) {
    s->add_option("--kernel", c.kernel, "cubic | matern:<nu>:<phi> | sqexp:<l1,..>:<var>");
    s->add_option("--lambda", c.lambda, "Penalty value or 'gcv'");
    s->add_option("--lambda-count", c.lambda_count, "GCV grid size");
    s->add_option("--lambda-hi", c.lambda_hi, "Largest lambda of the GCV grid");
    s->add_option("--lambda-lo", c.lambda_lo, "Smallest lambda of the GCV grid");
    s->add_option("--multistart", c.multistart, "Starts at the first fit (0 = automatic)");
    s->add_option("--max-iter", c.max_iter, "Quasi-Newton iteration limit");
  };
  auto add_trace = [&](CLI::App* s) { s->add_option("--gcv-trace", c.trace, "per-copy | literal"); };
  auto add_physical = [&](CLI::App* s) {
    s->add_option("--physical", c.physical, "Physical data CSV (x1..xd,y1..yr)")->check(CLI::ExistingFile);
    s->add_option("--domain", c.domain, "Domain bounds lo:hi (comma lists for d > 1)");
  };

  auto* cal = app.add_subcommand("calibrate", "Fit the calibration function");
  add_physical(cal);
  add_model(cal);
  add_fit(cal);
  add_trace(cal);
  cal->add_option("--out", c.out, "Estimate JSON");
  cal->add_option("--gcv-out", c.gcv_out, "Optional GCV curve CSV");

  auto* scan = app.add_subcommand("gcv-scan", "GCV curve over the lambda grid");
  add_physical(scan);
  add_model(scan);
  add_fit(scan);
  add_trace(scan);
  scan->add_option("--out", c.out, "CSV lambda,gcv,edf,sigma2");

  auto* pred = app.add_subcommand("predict", "Evaluate theta_hat and the prediction");
  pred->add_option("--estimate", c.estimate, "Estimate JSON")->check(CLI::ExistingFile);
  add_model(pred);
  pred->add_option("--at", c.at, "CSV of points (x1..xd)")->check(CLI::ExistingFile);
  pred->add_option("--grid", c.grid, "Midpoint grid size over the domain when --at is absent");
  pred->add_option("--domain", c.domain, "Grid bounds lo:hi (default: kernel domain or anchor range)");
  pred->add_option("--out", c.out, "Output CSV");

  auto* uq = app.add_subcommand("uq", "Pointwise confidence bands");
  uq->add_option("--estimate", c.estimate, "Estimate JSON")->check(CLI::ExistingFile);
  add_physical(uq);
  add_model(uq);
  add_trace(uq);
  uq->add_option("--levels", c.levels, "Nominal levels")->delimiter(',');
  uq->add_option("--rho", c.rho, "Prior scale of the null-space coefficients");
  uq->add_option("--grid", c.grid, "Midpoint grid size");
  uq->add_option("--out", c.out, "Band CSV");

  auto* sim = app.add_subcommand("simulate", "Replication study for a builtin setting");
  sim->add_option("--setting", c.setting, "1..4");
  sim->add_option("--methods", c.methods, "Comma list of const,param-exp,param-quad,rkhs-cubic");
  sim->add_option("--code", c.code, "cc | ec");
  sim->add_option("--n", c.n, "Physical sample size");
  sim->add_option("--reps", c.reps, "Replications");
  sim->add_option("--levels", c.levels, "Nominal levels")->delimiter(',');
  add_trace(sim);
  sim->add_option("--out", c.out, "Metrics table CSV");

  auto* emu = app.add_subcommand("emulate", "Train a Gaussian-process emulator");
  emu->add_option("--runs", c.runs, "Computer runs CSV (x1..xd,t1..tq,y1..yr)")->check(CLI::ExistingFile);
  emu->add_option("--setting", c.setting, "Use the 14x15 design of builtin setting 1..4");
  emu->add_option("--refine", c.refine, "Design refinement factor for --setting");
  emu->add_option("--interp-guard", c.interp_guard,
                  "Shrink lengthscales until the training residual is below this (relative to max(1, max|y|))")
      ->check(CLI::PositiveNumber);
  emu->add_option("--out", c.out, "Emulator JSON");

  auto* cv = app.add_subcommand("cv", "Leave-C-out cross-validated absolute prediction error");
  add_physical(cv);
  add_model(cv);
  add_fit(cv);
  add_trace(cv);
  cv->add_option("--method", c.method, "const | param-exp | param-quad | rkhs-cubic");
  cv->add_option("--C", c.C, "1 or 2");
  cv->add_option("--reps", c.reps, "Random pairs for C = 2");
  cv->add_option("--align", c.align, "Simulated data CSV (x1..xd,y1) for mean-shift alignment")
      ->check(CLI::ExistingFile);
  cv->add_option("--out", c.out, "APE CSV");

  Parsed p;
  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    std::ostringstream os, es;
    p.status = app.exit(e, os, es);
    p.message = os.str() + es.str();
    return p;
  } catch (const CLI::ParseError& e) {
    p.status = exit_code_for(ErrorKind::usage);
    p.message = e.what();
    return p;
  }
  c.command = app.get_subcommands().front()->get_name();
  const auto v = violations(c);
  if (!v.empty()) {
    std::string msg;
    for (std::size_t i = 0; i < v.size(); ++i) msg += (i ? "; " : "") + v[i];
    throw UsageError(msg);
  }
  p.config = c;
  return p;
}

namespace impl {

struct ResolvedModel {
  ComputerModel model;
  json descriptor;
  std::optional<BenchmarkSetting> setting;
};

inline ResolvedModel resolve_model(const std::string& name, const std::string& emulator_path, int input_dim = 1) {
  if (!emulator_path.empty()) {
    auto em = std::make_shared<const Emulator>(
        emulator_from_json(parse_json_text(read_text_file(emulator_path), emulator_path)));
    return {as_model(em), json{{"emulator", emulator_path}}, std::nullopt};
  }
  if (name == "identity") return {identity_model(input_dim), json{{"builtin", "identity"}}, std::nullopt};
  auto [m, s] = builtin(name);
  return {m, json{{"builtin", name}}, s};
}

inline ResolvedModel resolve_model(const json& descriptor, int input_dim) {
  if (descriptor.contains("emulator")) return resolve_model("", descriptor["emulator"].get<std::string>(), input_dim);
  if (descriptor.contains("builtin")) return resolve_model(descriptor["builtin"].get<std::string>(), "", input_dim);
  throw DataError("estimate does not name its computer model");
}

inline std::pair<Eigen::VectorXd, Eigen::VectorXd> parse_domain(const std::string& text) {
  const auto halves = fcal::detail::split(text, ':');
  if (halves.size() != 2) throw UsageError("--domain expects lo:hi");
  const auto lo = fcal::detail::split(halves[0], ',');
  const auto hi = fcal::detail::split(halves[1], ',');
  if (lo.size() != hi.size()) throw UsageError("--domain bounds differ in length");
  Eigen::VectorXd a(static_cast<Eigen::Index>(lo.size())), b(static_cast<Eigen::Index>(hi.size()));
  for (std::size_t i = 0; i < lo.size(); ++i) {
    a(static_cast<Eigen::Index>(i)) = fcal::detail::parse_field(std::string(lo[i]), "--domain");
    b(static_cast<Eigen::Index>(i)) = fcal::detail::parse_field(std::string(hi[i]), "--domain");
    if (!(b(static_cast<Eigen::Index>(i)) > a(static_cast<Eigen::Index>(i)))) throw UsageError("--domain needs lo < hi");
  }
  return {a, b};
}

inline PhysicalDataset load_physical(const RunConfig& c, const ResolvedModel& m) {
  if (!c.domain.empty()) {
    auto [lo, hi] = parse_domain(c.domain);
    return read_physical(c.physical, lo, hi);
  }
  if (m.setting) return read_physical(c.physical, fcal::detail::vec1(m.setting->lower), fcal::detail::vec1(m.setting->upper));
  return read_physical(c.physical);
}

inline Kernel kernel_for(const RunConfig& c, const PhysicalDataset& data) {
  if (c.kernel == "cubic") return default_kernel(data);
  return parse_kernel_spec(c.kernel, data.lower(0), data.upper(0));
}

inline FitOptions fit_options(const RunConfig& c) {
  FitOptions fo;
  fo.multistart = c.multistart;
  fo.seed = c.seed;
  fo.lbfgs.max_iter = c.max_iter;
  return fo;
}

inline std::vector<std::string> row_of(std::initializer_list<double> vals) {
  std::vector<std::string> r;
  for (double v : vals) r.push_back(format_double(v));
  return r;
}

inline std::string write_table(const RunConfig& c, const std::vector<std::string>& header,
                               const std::vector<std::vector<std::string>>& rows) {
  std::ostringstream os;
  write_csv(os, c.provenance(), header, rows);
  write_text_file(c.out, os.str());
  return os.str();
}

inline std::vector<std::string> indexed(const char* prefix, Eigen::Index k) {
  std::vector<std::string> h;
  for (Eigen::Index i = 0; i < k; ++i) h.push_back(prefix + std::to_string(i + 1));
  return h;
}

}  // namespace impl

/// Raised after all artifacts are written when the fit did not converge.
class NotConverged : public ConvergenceError {
 public:
  using ConvergenceError::ConvergenceError;
};

struct Context {
  std::ostream& out;
  std::string stage;
};

inline void run_calibrate(const RunConfig& c, Context& ctx) {
  ctx.stage = "load";
  const auto m = impl::resolve_model(c.model, c.emulator);
  const PhysicalDataset data = impl::load_physical(c, m);
  const Kernel kernel = impl::kernel_for(c, data);
  const FitOptions fo = impl::fit_options(c);
  const GcvTrace trace = parse_trace(c.trace);
  ctx.stage = "fit";
  std::vector<GcvPoint> curve;
  const CalibrationEstimate est = [&] {
    if (c.lambda != "gcv") return fit(data, m.model, kernel, detail::parse_positive(c.lambda, "lambda"), fo);
    LambdaSelection sel =
        select_lambda(data, m.model, kernel, default_lambda_grid(c.lambda_count, c.lambda_hi, c.lambda_lo), fo, trace);
    curve = std::move(sel.curve);
    return std::move(sel.estimate);
  }();
  ctx.stage = "write";
  write_text_file(c.out, estimate_json(est, m.descriptor, c.provenance()).dump(2) + "\n");
  if (!c.gcv_out.empty() && !curve.empty()) {
    RunConfig gc = c;
    gc.out = c.gcv_out;
    std::vector<std::vector<std::string>> rows;
    for (const auto& p : curve) rows.push_back(impl::row_of({p.lambda, p.gcv, p.edf, p.sigma2}));
    impl::write_table(gc, {"lambda", "gcv", "edf", "sigma2"}, rows);
  }
  ctx.stage = "fit";
  ctx.out << "lambda " << format_double(est.lambda) << " objective " << format_double(est.report.objective)
          << " iterations " << est.report.iterations << " converged " << (est.report.converged ? "yes" : "no") << "\n";
  if (!est.report.converged) throw NotConverged("fit did not converge: " + est.report.message);
}

inline void run_gcv_scan(const RunConfig& c, Context& ctx) {
  ctx.stage = "load";
  const auto m = impl::resolve_model(c.model, c.emulator);
  const PhysicalDataset data = impl::load_physical(c, m);
  const Kernel kernel = impl::kernel_for(c, data);
  ctx.stage = "scan";
  std::vector<double> grid;
  if (c.lambda == "gcv") {
    grid = default_lambda_grid(c.lambda_count, c.lambda_hi, c.lambda_lo);
  } else {
    grid = {detail::parse_positive(c.lambda, "lambda")};
  }
  const LambdaSelection sel = select_lambda(data, m.model, kernel, grid, impl::fit_options(c), parse_trace(c.trace));
  ctx.stage = "write";
  std::vector<std::vector<std::string>> rows;
  for (const auto& p : sel.curve) rows.push_back(impl::row_of({p.lambda, p.gcv, p.edf, p.sigma2}));
  impl::write_table(c, {"lambda", "gcv", "edf", "sigma2"}, rows);
  ctx.out << "selected lambda " << format_double(sel.lambda) << " gcv " << format_double(sel.stats.gcv) << "\n";
}

inline void run_predict(const RunConfig& c, Context& ctx) {
  ctx.stage = "load";
  const json doc = parse_json_text(read_text_file(c.estimate), c.estimate);
  const CalibrationEstimate est = estimate_from_json(doc);
  const Eigen::Index d = est.anchors.cols();
  const auto m = (!c.model.empty() || !c.emulator.empty())
                     ? impl::resolve_model(c.model, c.emulator, static_cast<int>(d))
                     : impl::resolve_model(doc.at("model"), static_cast<int>(d));
  Eigen::MatrixXd pts;
  if (!c.at.empty()) {
    const CsvTable t = read_csv_file(c.at);
    if (detail::prefix_run(t.header, 0, 'x') != d || static_cast<Eigen::Index>(t.header.size()) != d) {
      throw DataError(c.at + ": header must be x1..x" + std::to_string(d));
    }
    pts = t.values;
  } else {
    if (d != 1) throw UsageError("--grid needs scalar x; pass --at for d > 1");
    double lo = est.anchors.minCoeff(), hi = est.anchors.maxCoeff();
    if (!c.domain.empty()) {
      auto [a, b] = impl::parse_domain(c.domain);
      lo = a(0);
      hi = b(0);
    } else if (est.basis.kind == NullBasis::Kind::linear_unit) {
      lo = est.basis.lower;
      hi = est.basis.upper;
    }
    pts = midpoint_grid(lo, hi, c.grid);
  }
  ctx.stage = "predict";
  auto header = impl::indexed("x", d);
  for (const auto& h : impl::indexed("theta", est.param_dim())) header.push_back(h);
  for (const auto& h : impl::indexed("y", m.model.response_dim())) header.push_back(h);
  header.push_back("clamped");
  std::vector<std::vector<std::string>> rows;
  int clamped = 0;
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    const Eigen::VectorXd x = pts.row(i).transpose();
    const Prediction p = predict_at(est, m.model, x);
    std::vector<std::string> r;
    for (Eigen::Index k = 0; k < d; ++k) r.push_back(format_double(x(k)));
    const Eigen::VectorXd th = theta_at(est, x);
    for (Eigen::Index k = 0; k < th.size(); ++k) r.push_back(format_double(th(k)));
    for (Eigen::Index k = 0; k < p.value.size(); ++k) r.push_back(format_double(p.value(k)));
    r.push_back(p.clamped ? "1" : "0");
    clamped += p.clamped ? 1 : 0;
    rows.push_back(std::move(r));
  }
  ctx.stage = "write";
  impl::write_table(c, header, rows);
  ctx.out << "points " << pts.rows() << " clamped " << clamped << "\n";
}

inline void run_uq(const RunConfig& c, Context& ctx) {
  ctx.stage = "load";
  const json doc = parse_json_text(read_text_file(c.estimate), c.estimate);
  const CalibrationEstimate est = estimate_from_json(doc);
  const auto m = (!c.model.empty() || !c.emulator.empty())
                     ? impl::resolve_model(c.model, c.emulator, static_cast<int>(est.anchors.cols()))
                     : impl::resolve_model(doc.at("model"), static_cast<int>(est.anchors.cols()));
  const PhysicalDataset data = impl::load_physical(c, m);
  if (data.x.rows() != est.anchors.rows() || data.x.cols() != est.anchors.cols() || data.x != est.anchors) {
    throw DataError("physical data do not match the estimate's design points");
  }
  if (data.input_dim() != 1) throw UsageError("uq bands are evaluated on a scalar grid");
  ctx.stage = "linearize";
  const LinearizedSystem sys = linearize(est, data, m.model);
  const SmootherStats st = smoother_stats(sys, est.lambda, parse_trace(c.trace));
  const double rho = c.rho.value_or(default_rho(sys));
  const PosteriorFactor factor(sys, est.lambda, st.sigma2, rho);
  const Eigen::MatrixXd grid = midpoint_grid(data.lower(0), data.upper(0), c.grid);
  ctx.stage = "bands";
  const bool identifiable = m.setting ? m.setting->identifiable() : true;
  std::vector<std::vector<std::string>> rows;
  for (double level : c.levels) {
    auto bands = theta_ci(factor, est, grid, level, identifiable);
    bands.push_back(prediction_ci(factor, est, m.model, grid, level));
    for (const auto& b : bands) {
      for (Eigen::Index g = 0; g < b.size(); ++g) {
        rows.push_back({b.target, format_double(level), format_double(b.grid(g, 0)), format_double(b.center(g)),
                        format_double(b.lower(g)), format_double(b.upper(g)), b.interpretable ? "1" : "0"});
      }
    }
  }
  ctx.stage = "write";
  impl::write_table(c, {"target", "level", "x1", "center", "lower", "upper", "interpretable"}, rows);
  ctx.out << "sigma2 " << format_double(st.sigma2) << " rho " << format_double(rho) << " edf " << format_double(st.edf)
          << "\n";
}

inline std::vector<Method> parse_methods(const std::string& text) {
  std::vector<Method> out;
  for (auto part : detail::split(text, ',')) out.push_back(parse_method(std::string(part)));
  if (out.empty()) throw UsageError("--methods is empty");
  return out;
}

inline void run_simulate(const RunConfig& c, Context& ctx) {
  ctx.stage = "setup";
  SettingRunOptions o;
  o.methods = parse_methods(c.methods);
  o.code = parse_code(c.code);
  o.n = c.n;
  o.reps = c.reps;
  o.seed = c.seed;
  o.threads = c.threads;
  o.levels = c.levels;
  o.trace = parse_trace(c.trace);
  ctx.stage = "simulate";
  const MetricsTable t = run_setting(c.setting, o);
  ctx.stage = "write";
  std::vector<std::string> header{"setting", "code", "method", "loss_target", "loss_mean", "loss_se",
                                  "reps_ok", "failed", "nonconverged", "flagged"};
  for (double l : c.levels) {
    const std::string tag = format_double(l);
    for (const char* k : {"width", "width_normalized", "coverage"}) {
      header.push_back(std::string(k) + "_" + tag + "_mean");
      header.push_back(std::string(k) + "_" + tag + "_se");
    }
  }
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : t.rows) {
    std::vector<std::string> row{std::to_string(r.setting), code_name(r.code), method_name(r.method), r.loss_target,
                                 format_double(r.loss.mean), format_double(r.loss.se), std::to_string(r.loss.count),
                                 std::to_string(r.failed), std::to_string(r.nonconverged), r.flagged ? "1" : "0"};
    for (const auto& lm : r.levels) {
      for (const Summary* s : {&lm.width, &lm.width_normalized, &lm.coverage}) {
        row.push_back(format_double(s->mean));
        row.push_back(format_double(s->se));
      }
    }
    rows.push_back(std::move(row));
    ctx.out << method_name(r.method) << " loss " << format_double(r.loss.mean) << " failed " << r.failed
            << " nonconverged " << r.nonconverged << "\n";
  }
  impl::write_table(c, header, rows);
}

inline void run_emulate(const RunConfig& c, Context& ctx) {
  ctx.stage = "load";
  Eigen::MatrixXd in, out;
  int d = 1;
  if (!c.runs.empty()) {
    ComputerRuns r = read_runs(c.runs);
    in = std::move(r.inputs);
    out = std::move(r.outputs);
    d = r.input_dim;
  } else {
    auto [m, s] = builtin(c.setting);
    std::tie(in, out) = emulator_design(m, s, 14, c.refine);
  }
  ctx.stage = "train";
  EmulatorOptions eo;
  eo.residual_guard = c.interp_guard;
  const Emulator em = train_emulator(in, out, d, eo);
  ctx.stage = "write";
  write_text_file(c.out, emulator_json(em, c.provenance()).dump(2) + "\n");
  ctx.out << "runs " << em.size() << " training residual " << format_double(em.training_residual()) << "\n";
}

inline void run_cv(const RunConfig& c, Context& ctx) {
  ctx.stage = "load";
  const auto m = impl::resolve_model(c.model, c.emulator);
  PhysicalDataset data = impl::load_physical(c, m);
  double shift = 0.0;
  if (!c.align.empty()) {
    const PhysicalDataset sim = read_physical(c.align);
    const AlignedData a = mean_shift_align(data, sim.x, sim.y.col(0));
    data = a.data;
    shift = a.shift;
  }
  ctx.stage = "cv";
  MethodOptions mo;
  if (c.lambda != "gcv") mo.lambda = detail::parse_positive(c.lambda, "lambda");
  mo.trace = parse_trace(c.trace);
  mo.lambda_grid = default_lambda_grid(c.lambda_count, c.lambda_hi, c.lambda_lo);
  const CvSummary s = loo_cv(data, m.model, parse_method(c.method), c.C, c.reps, c.seed, c.threads, mo);
  ctx.stage = "write";
  impl::write_table(c, {"method", "C", "ape_count", "ape_mean", "ape_se", "failures", "shift"},
                      {{c.method, std::to_string(c.C), std::to_string(s.ape.size()), format_double(s.summary.mean),
                        format_double(s.summary.se), std::to_string(s.failures), format_double(shift)}});
  ctx.out << "APE mean " << format_double(s.summary.mean) << " se " << format_double(s.summary.se) << "\n";
}

inline std::string kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::usage:
      return "usage";
    case ErrorKind::parameter:
      return "parameter";
    case ErrorKind::data:
      return "data";
    case ErrorKind::domain:
      return "domain";
    case ErrorKind::numeric:
      return "numeric";
    case ErrorKind::nonconvergence:
      return "nonconvergence";
  }
  return "internal";
}

inline std::string error_json(const std::string& kind, const std::string& stage, const std::string& message, int code) {
  return json{{"error", {{"kind", kind}, {"stage", stage}, {"message", message}, {"exit_code", code}}}}.dump();
}

/// Parses argv and runs the subcommand. Returns the process exit status.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Context ctx{out, "parse"};
  try {
    const Parsed p = parse_config(argc, argv);
    if (!p.config) {
      if (p.status == 0) {
        out << p.message;
      } else {
        err << error_json("usage", "parse", p.message, p.status) << "\n";
      }
      return p.status;
    }
    const RunConfig& c = *p.config;
    if (c.command == "calibrate") run_calibrate(c, ctx);
    if (c.command == "gcv-scan") run_gcv_scan(c, ctx);
    if (c.command == "predict") run_predict(c, ctx);
    if (c.command == "uq") run_uq(c, ctx);
    if (c.command == "simulate") run_simulate(c, ctx);
    if (c.command == "emulate") run_emulate(c, ctx);
    if (c.command == "cv") run_cv(c, ctx);
    return 0;
  } catch (const Error& e) {
    err << error_json(kind_name(e.kind()), ctx.stage, e.what(), e.exit_code()) << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    err << error_json("internal", ctx.stage, e.what(), 1) << "\n";
    return 1;
  }
}

}  // namespace fcal::cli
