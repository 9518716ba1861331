#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "mmmpp/mmmpp.hpp"

using namespace mmmpp;
namespace fs = std::filesystem;

namespace {

const std::string kCli = MMMPP_CLI_PATH;
const std::string kSamples = MMMPP_SAMPLES_DIR;

struct RunResult {
  int status = -1;
  std::string err;
};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("mmmpp_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  RunResult run(const std::string& args, const std::string& env = "") const {
    const std::string err = path("stderr.txt");
    const std::string cmd = env + (env.empty() ? "" : " ") + "'" + kCli + "' " + args + " 2>'" + err + "' >/dev/null";
    RunResult r;
    const int raw = std::system(cmd.c_str());
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.err = fs::exists(err) ? read_file(err) : "";
    return r;
  }

  std::string fixture(const std::string& name) const { return "'" + kSamples + "/" + name + "'"; }

  std::string fit_args(const std::string& out) const {
    return "fit --config " + fixture("fixture_config.json") + " --events " + fixture("fixture_events.csv") +
           " --covariates " + fixture("fixture_covariates.csv") + " --out '" + out + "'";
  }

  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream(path(name), std::ios::binary) << text;
    return path(name);
  }

  fs::path dir_;
};

std::vector<std::vector<std::string>> csv_rows(const std::string& file) {
  std::vector<std::vector<std::string>> out;
  for (const auto& row : read_csv(file).rows) out.push_back(row.cells);
  return out;
}

Json error_record(const std::string& err) {
  // A single JSON object on one line.
  EXPECT_EQ(std::count(err.begin(), err.end(), '\n'), 1) << err;
  return Json::parse(err);
}

}  // namespace

TEST_F(CliTest, FitIsByteIdenticalAcrossRunsAndThreads) {
  ASSERT_EQ(run(fit_args(path("a.json"))).status, 0);
  ASSERT_EQ(run(fit_args(path("b.json")), "MMMPP_THREADS=1").status, 0);
  ASSERT_EQ(run(fit_args(path("c.json")), "MMMPP_THREADS=3").status, 0);
  const std::string a = read_file(path("a.json"));
  EXPECT_EQ(a, read_file(path("b.json")));
  EXPECT_EQ(a, read_file(path("c.json")));

  const Json j = Json::parse(a);
  EXPECT_EQ(j["tool"], "mmmpp");
  EXPECT_EQ(j["seed"], 11);
  EXPECT_EQ(j["layout"], kWorkingLayoutVersion);
  EXPECT_TRUE(j["converged"].get<bool>());
  EXPECT_EQ(j["n_params"], 13);
  EXPECT_EQ(j["starts"].size(), 3u);

  // The optimum beats the generating parameters on their own data.
  const Config cfg = load_config(kSamples + "/fixture_config.json");
  const Dataset ds = load_dataset(kSamples + "/fixture_events.csv", kSamples + "/fixture_covariates.csv", cfg);
  const LoadedParameters truth = load_parameters(kSamples + "/fixture_truth.json", std::nullopt);
  EXPECT_GE(j["loglik"].get<double>(), total_log_likelihood(truth.fit.estimates, ds.records, ds.spec));
  EXPECT_EQ(j["n_events"].get<std::size_t>(), 1127u);
}

TEST_F(CliTest, SeedFlagChangesProvenance) {
  ASSERT_EQ(run(fit_args(path("a.json")) + " --seed 99").status, 0);
  EXPECT_EQ(Json::parse(read_file(path("a.json")))["seed"], 99);
}

TEST_F(CliTest, DecodeHasOneRowPerEvent) {
  ASSERT_EQ(run(fit_args(path("fit.json"))).status, 0);
  ASSERT_EQ(run("decode --params '" + path("fit.json") + "' --events " + fixture("fixture_events.csv") +
                " --covariates " + fixture("fixture_covariates.csv") + " --out '" + path("dec.csv") + "'")
                .status,
            0);
  const CsvTable t = read_csv(path("dec.csv"));
  EXPECT_EQ(t.header, (std::vector<std::string>{"patient_id", "time", "time_offset", "mark", "decoded_state",
                                                "posterior_1", "posterior_2"}));
  EXPECT_EQ(t.rows.size(), 1127u);
  for (const auto& row : t.rows) {
    const double p1 = *parse_double(row.cells[5]), p2 = *parse_double(row.cells[6]);
    EXPECT_NEAR(p1 + p2, 1.0, 1e-10);
    EXPECT_TRUE(row.cells[4] == "1" || row.cells[4] == "2");
  }
  EXPECT_EQ(read_file(path("dec.csv")).rfind("# tool mmmpp", 0), 0u);
}

TEST_F(CliTest, DeriveReproducesReferenceRow) {
  ASSERT_EQ(run("derive --config " + fixture("derive_config.json") + " --params " + fixture("published_params.json") +
                " --out '" + path("d.csv") + "'")
                .status,
            0);
  const auto rows = csv_rows(path("d.csv"));
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0][0], "reference");
  EXPECT_LT(std::abs(*parse_double(rows[0][2]) / 48.2 - 1.0), 0.02);
  EXPECT_LT(std::abs(*parse_double(rows[1][2]) / 94.2 - 1.0), 0.02);
  EXPECT_LT(std::abs(*parse_double(rows[0][6]) / 0.338 - 1.0), 0.02);
  EXPECT_LT(std::abs(*parse_double(rows[3][2]) / 175.1 - 1.0), 0.02);
  // A bare parameter document carries no covariance, so interval cells are empty.
  EXPECT_EQ(rows[0][4], "");
  const auto curve = csv_rows(path("d.curve.csv"));
  EXPECT_EQ(curve.size(), 9u);
}

TEST_F(CliTest, DeriveFromFitHasIntervals) {
  ASSERT_EQ(run(fit_args(path("fit.json"))).status, 0);
  ASSERT_EQ(run("derive --config " + fixture("fixture_config.json") + " --params '" + path("fit.json") + "' --out '" +
                path("d.csv") + "'")
                .status,
            0);
  const auto rows = csv_rows(path("d.csv"));
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) {
    const double lo = *parse_double(r[4]), hi = *parse_double(r[5]), est = *parse_double(r[2]);
    EXPECT_LT(lo, est);
    EXPECT_GT(hi, est);
  }
}

TEST_F(CliTest, SimulateWritesLoadableCohort) {
  const std::string args = "simulate --config " + fixture("fixture_config.json") + " --params " +
                           fixture("fixture_truth.json") + " --covariates " + fixture("fixture_population.csv") +
                           " --n-patients 12 --t-max 500 --out ";
  ASSERT_EQ(run(args + "'" + path("s1.csv") + "'").status, 0);
  ASSERT_EQ(run(args + "'" + path("s2.csv") + "'", "MMMPP_THREADS=1").status, 0);
  EXPECT_EQ(read_file(path("s1.csv")), read_file(path("s2.csv")));
  EXPECT_EQ(read_file(path("s1.states.csv")), read_file(path("s2.states.csv")));

  const Config cfg = load_config(kSamples + "/fixture_config.json");
  const Dataset ds = load_dataset(path("s1.csv"), path("s1.covariates.csv"), cfg);
  EXPECT_EQ(ds.records.size(), 12u);
  for (const auto& r : ds.records) {
    EXPECT_EQ(*r.followup_end, 500.0);
    EXPECT_LE(r.times.back(), 500.0);
  }
  const auto states = csv_rows(path("s1.states.csv"));
  EXPECT_GE(states.size(), 12u);
}

TEST_F(CliTest, CheckWritesReport) {
  ASSERT_EQ(run("check --params " + fixture("fixture_truth.json") + " --config " + fixture("fixture_config.json") +
                " --events " + fixture("fixture_events.csv") + " --covariates " + fixture("fixture_covariates.csv") +
                " --n-sim 10 --out '" + path("chk.csv") + "'")
                .status,
            0);
  const auto rows = csv_rows(path("chk.csv"));
  EXPECT_EQ(rows.size(), 17u);
  EXPECT_EQ(csv_rows(path("chk.hist.csv")).size(), 40u);
}

TEST_F(CliTest, ErrorsAreJsonOnStderr) {
  const RunResult missing = run("fit --config '" + path("nope.json") + "' --out '" + path("o.json") + "'");
  EXPECT_EQ(missing.status, 1);
  const Json e = error_record(missing.err);
  EXPECT_EQ(e["error"], "parse");
  EXPECT_EQ(e["file"], path("nope.json"));

  const RunResult usage = run("fit --frobnicate");
  EXPECT_EQ(usage.status, 2);
  EXPECT_EQ(error_record(usage.err)["error"], "usage");

  const RunResult no_events = run("fit --config " + fixture("fixture_config.json") + " --out '" + path("o.json") + "'");
  EXPECT_EQ(no_events.status, 1);
  EXPECT_EQ(error_record(no_events.err)["field"], "--events");

  const std::string dup = write("dup.csv", "patient_id,time,mark\na,0,0\na,3,1\na,3,2\n");
  const RunResult bad = run("decode --params " + fixture("published_params.json") + " --events '" + dup + "' --out '" +
                            path("o.csv") + "'");
  EXPECT_EQ(bad.status, 1);
  const Json be = error_record(bad.err);
  EXPECT_EQ(be["line"], 4);
  EXPECT_NE(be["message"].get<std::string>().find("duplicate"), std::string::npos);
}

TEST_F(CliTest, FailedRunLeavesExistingOutputUntouched) {
  const std::string out = write("keep.csv", "previous contents\n");
  const std::string bad = write("bad.csv", "patient_id,time,mark\na,0,0\na,1,-4\n");
  const RunResult r =
      run("decode --params " + fixture("published_params.json") + " --events '" + bad + "' --out '" + out + "'");
  EXPECT_NE(r.status, 0);
  EXPECT_EQ(read_file(out), "previous contents\n");
  EXPECT_FALSE(fs::exists(out + ".tmp"));
}
