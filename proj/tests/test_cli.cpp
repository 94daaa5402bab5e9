#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fcal/cli.hpp"

using namespace fcal;
namespace fs = std::filesystem;

namespace {

struct Result {
  int status;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "rkhs_calib");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int s = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {s, out.str(), err.str()};
}

cli::Parsed parse(std::vector<std::string> args) {
  args.insert(args.begin(), "rkhs_calib");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::parse_config(static_cast<int>(argv.size()), argv.data());
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("fcal_cli_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                         "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  [[nodiscard]] std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

std::string slurp(const std::string& path) { return read_text_file(path); }

void write_physical(const std::string& path, const PhysicalDataset& d) {
  std::ofstream f(path);
  f << "x1,y1\n";
  for (Eigen::Index i = 0; i < d.size(); ++i) f << format_double(d.x(i, 0)) << "," << format_double(d.y(i, 0)) << "\n";
}

}  // namespace

TEST(Cli, ParsesSimulateExample) {
  const auto p = parse({"simulate", "--setting", "1", "--code", "cc", "--n", "50", "--reps", "100", "--seed", "7",
                        "--out", "t.csv"});
  ASSERT_TRUE(p.config);
  EXPECT_EQ(p.config->command, "simulate");
  EXPECT_EQ(p.config->setting, 1);
  EXPECT_EQ(p.config->reps, 100);
  EXPECT_EQ(p.config->seed, 7u);
}

TEST(Cli, KernelGrammar) {
  const Kernel k = parse_kernel_spec("matern:1.5:2.0", 0.0, 1.0);
  const auto* m = std::get_if<Matern>(&k.variant());
  ASSERT_NE(m, nullptr);
  EXPECT_EQ(m->smoothness, 1.5);
  EXPECT_EQ(m->scale, 2.0);
  TempDir tmp;
  std::ofstream(tmp.file("p.csv")) << "x1,y1\n0,1\n";
  const auto p = parse({"calibrate", "--physical", tmp.file("p.csv"), "--model", "sim1", "--kernel", "matern:1.5:2.0",
                        "--out", "e.json"});
  ASSERT_TRUE(p.config);
  EXPECT_EQ(p.config->kernel, "matern:1.5:2.0");
}

TEST(Cli, MissingPhysicalIsUsageError) {
  const Result r = run_cli({"calibrate", "--model", "sim1", "--out", "e.json"});
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.err.find("--physical"), std::string::npos);
  const json j = json::parse(r.err);
  EXPECT_EQ(j["error"]["kind"], "usage");
  EXPECT_EQ(j["error"]["exit_code"], 2);
}

TEST(Cli, EveryViolationListed) {
  const Result r = run_cli({"simulate", "--setting", "9", "--reps", "0"});
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.err.find("--setting"), std::string::npos);
  EXPECT_NE(r.err.find("--reps"), std::string::npos);
  EXPECT_NE(r.err.find("--out"), std::string::npos);
}

TEST(Cli, UnknownFlagAndHelp) {
  EXPECT_EQ(run_cli({"simulate", "--bogus"}).status, 2);
  const Result h = run_cli({"--help"});
  EXPECT_EQ(h.status, 0);
  EXPECT_NE(h.out.find("simulate"), std::string::npos);
}

TEST(Cli, DataErrorsExitThree) {
  TempDir tmp;
  {
    std::ofstream f(tmp.file("bad.csv"));
    f << "x1,y1\n1,2\n3,nan\n";
  }
  const Result r = run_cli({"calibrate", "--physical", tmp.file("bad.csv"), "--model", "sim1", "--out",
                            tmp.file("e.json")});
  EXPECT_EQ(r.status, 3);
  EXPECT_NE(r.err.find(":3"), std::string::npos);
  EXPECT_EQ(json::parse(r.err)["error"]["stage"], "load");
}

TEST(Cli, SimulateSmokeTable) {
  TempDir tmp;
  const Result r = run_cli({"simulate", "--setting", "2", "--code", "cc", "--n", "30", "--reps", "3", "--seed", "5",
                            "--threads", "1", "--out", tmp.file("t.csv")});
  ASSERT_EQ(r.status, 0) << r.err;
  std::istringstream in(slurp(tmp.file("t.csv")));
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 6u);
  EXPECT_EQ(lines[0].rfind("# fcal ", 0), 0u);
  EXPECT_NE(lines[0].find("\"reps\":3"), std::string::npos);
  EXPECT_EQ(lines[1].rfind("setting,code,method,loss_target,loss_mean", 0), 0u);
  const char* methods[] = {"const", "param-exp", "param-quad", "rkhs-cubic"};
  for (int k = 0; k < 4; ++k) EXPECT_EQ(lines[2 + k].rfind(std::string("2,CC,") + methods[k] + ",theta,", 0), 0u);
}

TEST(Cli, SimulateIdenticalAcrossThreadCounts) {
  TempDir tmp;
  std::vector<std::string> base{"simulate", "--setting", "4", "--n", "30", "--reps", "4", "--seed", "11",
                                "--methods", "const,rkhs-cubic"};
  auto with = [&](const std::string& threads, const std::string& out) {
    auto a = base;
    for (const auto& s : {std::string("--threads"), threads, std::string("--out"), tmp.file(out)}) a.push_back(s);
    return a;
  };
  ASSERT_EQ(run_cli(with("1", "a.csv")).status, 0);
  ASSERT_EQ(run_cli(with("3", "b.csv")).status, 0);
  ASSERT_EQ(run_cli(with("1", "c.csv")).status, 0);
  EXPECT_EQ(slurp(tmp.file("a.csv")), slurp(tmp.file("b.csv")));
  EXPECT_EQ(slurp(tmp.file("a.csv")), slurp(tmp.file("c.csv")));
}

TEST(Cli, CalibratePredictRoundTrip) {
  TempDir tmp;
  auto [m, s] = builtin(1);
  const PhysicalDataset d = sample_physical(s, 30, 17);
  write_physical(tmp.file("p.csv"), d);
  const Result c = run_cli({"calibrate", "--physical", tmp.file("p.csv"), "--model", "sim1", "--lambda", "1e-4",
                            "--out", tmp.file("e.json")});
  ASSERT_EQ(c.status, 0) << c.err;
  const Result p = run_cli({"predict", "--estimate", tmp.file("e.json"), "--grid", "25", "--out", tmp.file("p_out.csv")});
  ASSERT_EQ(p.status, 0) << p.err;

  // the same fit in memory
  cli::RunConfig cfg;
  cfg.seed = 1;
  const PhysicalDataset again = read_physical(tmp.file("p.csv"), detail::vec1(s.lower), detail::vec1(s.upper));
  const CalibrationEstimate est = fit(again, m, default_kernel(again), 1e-4, cli::impl::fit_options(cfg));

  std::istringstream in(slurp(tmp.file("p_out.csv")));
  const CsvTable t = read_csv(in);
  ASSERT_EQ(t.values.rows(), 25);
  ASSERT_EQ(t.header.size(), 4u);
  EXPECT_EQ(t.header[1], "theta1");
  for (Eigen::Index i = 0; i < t.values.rows(); ++i) {
    const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, t.values(i, 0));
    EXPECT_NEAR(t.values(i, 1), theta_at(est, x)(0), 1e-12);
    EXPECT_NEAR(t.values(i, 2), predict_at(est, m, x).value(0), 1e-12);
  }
  EXPECT_NEAR(t.values(0, 0), s.lower + s.width() / 50.0, 1e-12);

  const json doc = json::parse(slurp(tmp.file("e.json")));
  EXPECT_EQ(doc["schema"], kEstimateSchema);
  EXPECT_EQ(doc["model"]["builtin"], "sim1");
  EXPECT_EQ(doc["provenance"]["seed"], 1);
  EXPECT_EQ(doc["provenance"]["config"]["command"], "calibrate");
  EXPECT_FALSE(doc["provenance"]["config"].contains("threads"));
}

TEST(Cli, UqAndGcvScanWriteTables) {
  TempDir tmp;
  auto [m, s] = builtin(2);
  write_physical(tmp.file("p.csv"), sample_physical(s, 25, 3));
  ASSERT_EQ(run_cli({"calibrate", "--physical", tmp.file("p.csv"), "--model", "sim2", "--lambda-count", "8",
                     "--out", tmp.file("e.json"), "--gcv-out", tmp.file("g.csv")})
                .status,
            0);
  std::istringstream g(slurp(tmp.file("g.csv")));
  EXPECT_EQ(read_csv(g).values.rows(), 8);
  const Result u = run_cli({"uq", "--estimate", tmp.file("e.json"), "--physical", tmp.file("p.csv"), "--levels",
                            "0.9", "--grid", "10", "--out", tmp.file("b.csv")});
  ASSERT_EQ(u.status, 0) << u.err;
  std::istringstream b(slurp(tmp.file("b.csv")));
  std::vector<std::string> lines;
  for (std::string l; std::getline(b, l);) lines.push_back(l);
  // comment, header, theta1 x 10, prediction x 10
  EXPECT_EQ(lines.size(), 22u);
  EXPECT_EQ(lines[1], "target,level,x1,center,lower,upper,interpretable");

  // bands computed against different data are refused
  write_physical(tmp.file("q.csv"), sample_physical(s, 25, 4));
  EXPECT_EQ(run_cli({"uq", "--estimate", tmp.file("e.json"), "--physical", tmp.file("q.csv"), "--out",
                     tmp.file("b2.csv")})
                .status,
            3);
}

TEST(Cli, EmulateThenCalibrateAgainstIt) {
  TempDir tmp;
  ASSERT_EQ(run_cli({"emulate", "--setting", "2", "--out", tmp.file("em.json")}).status, 0);
  const json em = json::parse(slurp(tmp.file("em.json")));
  EXPECT_EQ(em["schema"], kEmulatorSchema);
  EXPECT_EQ(em["inputs"].size(), 14u * 15u);
  auto [m, s] = builtin(2);
  write_physical(tmp.file("p.csv"), sample_physical(s, 25, 8));
  const Result c = run_cli({"calibrate", "--physical", tmp.file("p.csv"), "--emulator", tmp.file("em.json"),
                            "--domain", format_double(s.lower) + ":" + format_double(s.upper), "--lambda", "1e-4",
                            "--out", tmp.file("e.json")});
  EXPECT_EQ(c.status, 0) << c.err;
  EXPECT_EQ(run_cli({"emulate", "--setting", "2", "--runs", tmp.file("p.csv"), "--out", tmp.file("x.json")}).status, 2);
}

TEST(Cli, CrossValidationTable) {
  TempDir tmp;
  auto [m, s] = builtin(2);
  write_physical(tmp.file("p.csv"), sample_physical(s, 12, 9));
  const Result r = run_cli({"cv", "--physical", tmp.file("p.csv"), "--model", "sim2", "--method", "param-quad", "--C",
                            "1", "--out", tmp.file("cv.csv")});
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_FALSE(slurp(tmp.file("cv.csv")).empty());
}
