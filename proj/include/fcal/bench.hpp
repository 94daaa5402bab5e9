#pragma once

// Replication harness, Riemann-sum metrics, leave-C-out cross-validation and
// mean-shift alignment.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "fcal/band.hpp"
#include "fcal/baselines.hpp"
#include "fcal/calibrate.hpp"
#include "fcal/emulator.hpp"
#include "fcal/errors.hpp"
#include "fcal/model.hpp"
#include "fcal/rng.hpp"
#include "fcal/select.hpp"
#include "fcal/uq.hpp"

namespace fcal {

constexpr Eigen::Index kRiemannPoints = 200;

/// sqrt(sum_g (f - g)^2 dx) over the 200-point midpoint grid.
inline double l2_loss(const ScalarFn& f, const ScalarFn& g, double lower, double upper,
                      Eigen::Index m = kRiemannPoints) {
  const double dx = (upper - lower) / static_cast<double>(m);
  double s = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double x = lower + (static_cast<double>(i) + 0.5) * dx;
    const double d = f(x) - g(x);
    s += d * d;
  }
  return std::sqrt(s * dx);
}

struct CiMetrics {
  /// Integral of (U - L) over the domain.
  double width = 0.0;
  /// width / |X|
  double width_normalized = 0.0;
  /// Fraction of the domain where L < truth < U.
  double coverage = 0.0;
};

inline CiMetrics ci_metrics(const ConfidenceBand& band, const ScalarFn& truth, double lower, double upper) {
  const Eigen::Index m = band.size();
  const double len = upper - lower;
  const double dx = len / static_cast<double>(m);
  CiMetrics out;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double t = truth(band.grid(i, 0));
    out.width += (band.upper(i) - band.lower(i)) * dx;
    if (band.lower(i) < t && t < band.upper(i)) out.coverage += dx;
  }
  out.coverage /= len;
  out.width_normalized = out.width / len;
  return out;
}

enum class Method { constant, param_exp, param_quad, rkhs_cubic };
enum class CodeMode { cc, ec };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::constant:
      return "const";
    case Method::param_exp:
      return "param-exp";
    case Method::param_quad:
      return "param-quad";
    case Method::rkhs_cubic:
      return "rkhs-cubic";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "const") return Method::constant;
  if (s == "param-exp") return Method::param_exp;
  if (s == "param-quad") return Method::param_quad;
  if (s == "rkhs-cubic") return Method::rkhs_cubic;
  throw UsageError("unknown method '" + s + "' (expected const, param-exp, param-quad, rkhs-cubic)");
}

inline std::string code_name(CodeMode c) { return c == CodeMode::cc ? "CC" : "EC"; }

inline CodeMode parse_code(const std::string& s) {
  if (s == "cc" || s == "CC") return CodeMode::cc;
  if (s == "ec" || s == "EC") return CodeMode::ec;
  throw UsageError("unknown code mode '" + s + "' (expected cc or ec)");
}

/// A fitted method evaluated on a grid: centers and pointwise standard deviations.
struct MethodOutcome {
  Method method = Method::constant;
  Eigen::MatrixXd theta;      // m x q
  Eigen::MatrixXd theta_sd;   // m x q (empty when unavailable)
  Eigen::VectorXd pred;       // m
  Eigen::VectorXd pred_sd;    // m (empty when unavailable)
  double lambda = std::numeric_limits<double>::quiet_NaN();
  bool converged = true;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> predictor;
};

struct MethodOptions {
  std::vector<double> lambda_grid = default_lambda_grid();
  std::optional<double> lambda;  // fixed lambda instead of GCV
  std::optional<double> rho;
  std::uint64_t seed = 0;
  bool want_theta_bands = true;
  bool want_prediction_bands = true;
  bool identifiable = true;
  GcvTrace trace = GcvTrace::per_copy;
};

namespace detail {

inline Eigen::VectorXd sd_from_band(const ConfidenceBand& b) {
  return (b.upper - b.center) / z_quantile(b.level);
}

}  // namespace detail

/// Fits `method` and evaluates centers/sds on `grid` (scalar x).
inline MethodOutcome fit_method(Method method, const PhysicalDataset& data, const ComputerModel& model,
                                const Eigen::MatrixXd& grid, const MethodOptions& opt = {}) {
  MethodOutcome out;
  out.method = method;
  const Eigen::Index m = grid.rows(), q = model.param_dim();
  out.theta.resize(m, q);
  out.pred.resize(m);
  switch (method) {
    case Method::constant: {
      const ConstFit fc = fit_const(data, model);
      out.converged = fc.converged;
      for (Eigen::Index g = 0; g < m; ++g) {
        out.theta.row(g) = fc.theta.transpose();
        out.pred(g) = model.eval(grid.row(g).transpose(), fc.theta)(0);
      }
      const auto bands = const_bands(fc, data, model, grid, 0.9, opt.want_theta_bands, opt.want_prediction_bands);
      std::size_t b = 0;
      if (opt.want_theta_bands) {
        out.theta_sd.resize(m, q);
        for (Eigen::Index j = 0; j < q; ++j) out.theta_sd.col(j) = detail::sd_from_band(bands[b++]);
      }
      if (opt.want_prediction_bands) out.pred_sd = detail::sd_from_band(bands[b]);
      out.predictor = [model, fc](const Eigen::VectorXd& x) { return model.eval(x, fc.theta); };
      break;
    }
    case Method::param_exp:
    case Method::param_quad: {
      const auto fam = method == Method::param_exp ? ParametricFamily::exp : ParametricFamily::quad;
      const ParametricFit pf = fit_parametric(data, model, fam);
      out.converged = pf.converged;
      for (Eigen::Index g = 0; g < m; ++g) {
        out.theta.row(g) = pf.theta(grid(g, 0)).transpose();
        out.pred(g) = model.eval(grid.row(g).transpose(), model.box().clamp(pf.theta(grid(g, 0))))(0);
      }
      const auto bands =
          parametric_bands(pf, data, model, grid, 0.9, opt.want_theta_bands, opt.want_prediction_bands);
      std::size_t b = 0;
      if (opt.want_theta_bands) {
        out.theta_sd.resize(m, q);
        for (Eigen::Index j = 0; j < q; ++j) out.theta_sd.col(j) = detail::sd_from_band(bands[b++]);
      }
      if (opt.want_prediction_bands) out.pred_sd = detail::sd_from_band(bands[b]);
      out.predictor = [model, pf](const Eigen::VectorXd& x) {
        return model.eval(x, model.box().clamp(pf.theta(x(0))));
      };
      break;
    }
    case Method::rkhs_cubic: {
      const Kernel kernel = default_kernel(data);
      FitOptions fo;
      fo.seed = opt.seed;
      std::optional<LambdaSelection> sel;
      if (opt.lambda) {
        sel.emplace();
        sel->lambda = *opt.lambda;
        sel->estimate = fit(data, model, kernel, *opt.lambda, fo);
        sel->system = linearize(sel->estimate, data, model);
        sel->stats = smoother_stats(sel->system, *opt.lambda, opt.trace);
      } else {
        sel = select_lambda(data, model, kernel, opt.lambda_grid, fo, opt.trace);
      }
      out.lambda = sel->lambda;
      out.converged = sel->estimate.report.converged;
      const CalibrationEstimate& est = sel->estimate;
      const PosteriorFactor factor(sel->system, sel->lambda, sel->stats.sigma2,
                                   opt.rho.value_or(default_rho(sel->system)));
      if (opt.want_theta_bands) out.theta_sd.resize(m, q);
      if (opt.want_prediction_bands) out.pred_sd.resize(m);
      for (Eigen::Index g = 0; g < m; ++g) {
        const Eigen::VectorXd x = grid.row(g).transpose();
        out.theta.row(g) = theta_at(est, x).transpose();
        out.pred(g) = predict_at(est, model, x).value(0);
        if (opt.want_theta_bands) {
          for (Eigen::Index j = 0; j < q; ++j) out.theta_sd(g, j) = std::sqrt(theta_variance(factor, est, x, j).value);
        }
        if (opt.want_prediction_bands) out.pred_sd(g) = std::sqrt(prediction_variance(factor, est, model, x).value);
      }
      auto shared = std::make_shared<const CalibrationEstimate>(est);
      out.predictor = [model, shared](const Eigen::VectorXd& x) { return predict_at(*shared, model, x).value; };
      break;
    }
  }
  return out;
}

inline ConfidenceBand band_from(const Eigen::MatrixXd& grid, const Eigen::VectorXd& center, const Eigen::VectorXd& sd,
                                double level, const std::string& target) {
  return ConfidenceBand::from_sd(grid, center, sd, level, target);
}

struct Summary {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  Eigen::Index count = 0;
};

inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  s.count = static_cast<Eigen::Index>(v.size());
  if (v.empty()) return s;
  double sum = 0.0;
  for (double a : v) sum += a;
  s.mean = sum / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double a : v) ss += (a - s.mean) * (a - s.mean);
    s.se = std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
  }
  return s;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

struct LevelMetrics {
  double level = 0.9;
  Summary width;
  Summary width_normalized;
  Summary coverage;
  bool available = false;
};

struct MetricsRow {
  int setting = 1;
  CodeMode code = CodeMode::cc;
  Method method = Method::constant;
  /// "theta" (settings 1-2) or "prediction" (settings 3-4).
  std::string loss_target;
  Summary loss;
  std::vector<LevelMetrics> levels;
  std::vector<double> losses;  // per successful replication, in replication order
  Eigen::Index failed = 0;
  Eigen::Index nonconverged = 0;
  /// More than 5% of replications failed.
  bool flagged = false;
  std::vector<std::string> failures;
};

struct MetricsTable {
  std::vector<MetricsRow> rows;
  Eigen::Index reps = 0;
  Eigen::Index n = 0;
  std::uint64_t seed = 0;

  [[nodiscard]] const MetricsRow& row(Method m, CodeMode c) const {
    for (const auto& r : rows) {
      if (r.method == m && r.code == c) return r;
    }
    throw UsageError("no row for method " + method_name(m));
  }
};

struct SettingRunOptions {
  std::vector<Method> methods{Method::constant, Method::param_exp, Method::param_quad, Method::rkhs_cubic};
  CodeMode code = CodeMode::cc;
  Eigen::Index n = 50;
  Eigen::Index reps = 100;
  std::uint64_t seed = 1;
  unsigned threads = 1;
  std::vector<double> levels{0.90, 0.95, 0.99};
  /// Pre-trained emulator for EC mode (trained on the fly when empty).
  std::shared_ptr<const Emulator> emulator;
  std::optional<double> sigma;
  GcvTrace trace = GcvTrace::per_copy;
};

/// Runs `body(rep)` for rep in [0, reps) on `threads` workers; results are indexed by rep.
template <class Fn>
void parallel_for(Eigen::Index reps, unsigned threads, Fn&& body) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<Eigen::Index>(reps, 1))));
  std::atomic<Eigen::Index> next{0};
  auto worker = [&]() {
    for (Eigen::Index r = next++; r < reps; r = next++) body(r);
  };
  if (threads == 1) {
    worker();
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

/// Replication study for one builtin setting; results are independent of `threads`.
inline MetricsTable run_setting(int setting_id, const SettingRunOptions& opt) {
  if (opt.reps < 1) throw UsageError("reps must be at least 1");
  auto [analytic, setting] = builtin(setting_id);
  ComputerModel model = analytic;
  if (opt.code == CodeMode::ec) {
    auto em = opt.emulator ? opt.emulator : train_setting_emulator(analytic, setting);
    model = as_model(em, "emulator-" + analytic.name());
  }
  const bool theta_target = setting.identifiable();
  const Eigen::MatrixXd grid = midpoint_grid(setting.lower, setting.upper, kRiemannPoints);
  const std::size_t nm = opt.methods.size(), nl = opt.levels.size();

  struct RepResult {
    bool ok = false;
    bool converged = true;
    double loss = 0.0;
    std::vector<CiMetrics> ci;
    std::string error;
  };
  std::vector<std::vector<RepResult>> results(static_cast<std::size_t>(opt.reps), std::vector<RepResult>(nm));

  parallel_for(opt.reps, opt.threads, [&](Eigen::Index rep) {
    const std::uint64_t rs = stream_seed(opt.seed, static_cast<std::uint64_t>(rep));
    const PhysicalDataset data = sample_physical(setting, opt.n, rs, opt.sigma);
    for (std::size_t mi = 0; mi < nm; ++mi) {
      RepResult& res = results[static_cast<std::size_t>(rep)][mi];
      try {
        MethodOptions mo;
        mo.seed = rs;
        mo.want_theta_bands = theta_target;
        mo.want_prediction_bands = !theta_target;
        mo.identifiable = theta_target;
        mo.trace = opt.trace;
        const MethodOutcome out = fit_method(opt.methods[mi], data, model, grid, mo);
        res.converged = out.converged;
        const double dx = setting.width() / static_cast<double>(kRiemannPoints);
        double s = 0.0;
        Eigen::VectorXd truth(grid.rows());
        for (Eigen::Index g = 0; g < grid.rows(); ++g) {
          const double x = grid(g, 0);
          truth(g) = theta_target ? (*setting.theta_star)(x)(0) : setting.zeta(x);
          const double est = theta_target ? out.theta(g, 0) : out.pred(g);
          s += (est - truth(g)) * (est - truth(g));
        }
        res.loss = std::sqrt(s * dx);
        const Eigen::VectorXd center = theta_target ? Eigen::VectorXd(out.theta.col(0)) : out.pred;
        const Eigen::VectorXd sd = theta_target ? Eigen::VectorXd(out.theta_sd.col(0)) : out.pred_sd;
        for (double level : opt.levels) {
          const ConfidenceBand b = band_from(grid, center, sd, level, theta_target ? "theta1" : "prediction");
          res.ci.push_back(theta_target ? ci_metrics(b, [&](double x) { return (*setting.theta_star)(x)(0); },
                                                     setting.lower, setting.upper)
                                        : ci_metrics(b, setting.zeta, setting.lower, setting.upper));
        }
        res.ok = true;
      } catch (const Error& e) {
        res.error = e.what();
      } catch (const std::exception& e) {
        res.error = e.what();
      }
    }
  });

  MetricsTable table;
  table.reps = opt.reps;
  table.n = opt.n;
  table.seed = opt.seed;
  for (std::size_t mi = 0; mi < nm; ++mi) {
    MetricsRow row;
    row.setting = setting_id;
    row.code = opt.code;
    row.method = opt.methods[mi];
    row.loss_target = theta_target ? "theta" : "prediction";
    std::vector<std::vector<double>> w(nl), wn(nl), cov(nl);
    for (Eigen::Index rep = 0; rep < opt.reps; ++rep) {
      const RepResult& res = results[static_cast<std::size_t>(rep)][mi];
      if (!res.ok) {
        ++row.failed;
        row.failures.push_back("rep " + std::to_string(rep) + ": " + res.error);
        continue;
      }
      if (!res.converged) ++row.nonconverged;
      row.losses.push_back(res.loss);
      for (std::size_t l = 0; l < nl; ++l) {
        w[l].push_back(res.ci[l].width);
        wn[l].push_back(res.ci[l].width_normalized);
        cov[l].push_back(res.ci[l].coverage);
      }
    }
    row.loss = summarize(row.losses);
    for (std::size_t l = 0; l < nl; ++l) {
      LevelMetrics lm;
      lm.level = opt.levels[l];
      lm.width = summarize(w[l]);
      lm.width_normalized = summarize(wn[l]);
      lm.coverage = summarize(cov[l]);
      lm.available = !w[l].empty();
      row.levels.push_back(lm);
    }
    row.flagged = static_cast<double>(row.failed) > 0.05 * static_cast<double>(opt.reps);
    table.rows.push_back(std::move(row));
  }
  return table;
}

struct CvSummary {
  std::vector<double> ape;
  Summary summary;
  Eigen::Index failures = 0;
  std::vector<std::string> errors;
};

/// Leave-C-out absolute prediction errors |y_i - y_i^cv| (C = 1: every point; C = 2: `reps` random pairs).
inline CvSummary loo_cv(const PhysicalDataset& data, const ComputerModel& model, Method method, int C,
                        Eigen::Index reps, std::uint64_t seed, unsigned threads = 1,
                        const MethodOptions& mopt = {}) {
  if (C != 1 && C != 2) throw UsageError("leave-C-out supports C = 1 or 2");
  const Eigen::Index n = data.size();
  if (n <= C) throw DataError("need more observations than the number left out");
  std::vector<std::vector<Eigen::Index>> folds;
  if (C == 1) {
    for (Eigen::Index i = 0; i < n; ++i) folds.push_back({i});
  } else {
    Rng rng = make_rng(seed, 0xc5);
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    for (Eigen::Index r = 0; r < reps; ++r) {
      const Eigen::Index a = pick(rng);
      Eigen::Index b = pick(rng);
      while (b == a) b = pick(rng);
      folds.push_back({std::min(a, b), std::max(a, b)});
    }
  }
  struct FoldResult {
    std::vector<double> ape;
    std::string error;
  };
  std::vector<FoldResult> res(folds.size());
  parallel_for(static_cast<Eigen::Index>(folds.size()), threads, [&](Eigen::Index f) {
    const auto& out = folds[static_cast<std::size_t>(f)];
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (std::find(out.begin(), out.end(), i) == out.end()) keep.push_back(i);
    }
    try {
      const PhysicalDataset train = data.subset(keep);
      MethodOptions mo = mopt;
      mo.want_theta_bands = false;
      mo.want_prediction_bands = false;
      mo.seed = stream_seed(seed, static_cast<std::uint64_t>(f));
      const MethodOutcome fitted = fit_method(method, train, model, Eigen::MatrixXd(0, data.input_dim()), mo);
      for (Eigen::Index i : out) {
        const Eigen::VectorXd p = fitted.predictor(data.x.row(i).transpose());
        for (Eigen::Index k = 0; k < data.response_dim(); ++k) {
          res[static_cast<std::size_t>(f)].ape.push_back(std::abs(data.y(i, k) - p(k)));
        }
      }
    } catch (const Error& e) {
      res[static_cast<std::size_t>(f)].error = e.what();
    }
  });
  CvSummary s;
  for (std::size_t f = 0; f < res.size(); ++f) {
    if (!res[f].error.empty()) {
      ++s.failures;
      s.errors.push_back("fold " + std::to_string(f) + ": " + res[f].error);
    }
    s.ape.insert(s.ape.end(), res[f].ape.begin(), res[f].ape.end());
  }
  s.summary = summarize(s.ape);
  return s;
}

struct AlignedData {
  PhysicalDataset data;
  double shift = 0.0;
};

/// Shifts physical responses so that physical and simulated means agree over
/// the common x-range.
inline AlignedData mean_shift_align(const PhysicalDataset& physical, const Eigen::MatrixXd& sim_x,
                                    const Eigen::VectorXd& sim_y) {
  if (sim_x.rows() != sim_y.size()) throw DataError("simulated inputs and responses differ in length");
  if (sim_x.cols() != physical.input_dim()) throw DataError("simulated inputs have the wrong dimension");
  const Eigen::Index d = physical.input_dim();
  Eigen::VectorXd lo(d), hi(d);
  for (Eigen::Index c = 0; c < d; ++c) {
    lo(c) = std::max(physical.x.col(c).minCoeff(), sim_x.col(c).minCoeff());
    hi(c) = std::min(physical.x.col(c).maxCoeff(), sim_x.col(c).maxCoeff());
  }
  auto inside = [&](const Eigen::RowVectorXd& x) {
    return ((x.transpose().array() >= lo.array()) && (x.transpose().array() <= hi.array())).all();
  };
  double sp = 0.0, ss = 0.0;
  Eigen::Index np = 0, ns = 0;
  for (Eigen::Index i = 0; i < physical.size(); ++i) {
    if (inside(physical.x.row(i))) {
      sp += physical.y(i, 0);
      ++np;
    }
  }
  for (Eigen::Index i = 0; i < sim_x.rows(); ++i) {
    if (inside(sim_x.row(i))) {
      ss += sim_y(i);
      ++ns;
    }
  }
  if ((lo.array() > hi.array()).any() || np == 0 || ns == 0) {
    throw DataError("physical and simulated data have no common x-range");
  }
  AlignedData out{physical, ss / static_cast<double>(ns) - sp / static_cast<double>(np)};
  out.data.y.col(0).array() += out.shift;
  return out;
}

}  // namespace fcal
