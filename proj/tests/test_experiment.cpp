#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "conflab/experiment.hpp"

namespace ex = conflab::exp;
namespace fs = std::filesystem;

namespace {

const fs::path configs = fs::path(CONFLAB_SOURCE_DIR) / "configs";

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("conflab_test_" + name);
  fs::remove_all(p);
  return p;
}

ex::RunOptions one_worker() {
  ex::RunOptions o;
  o.workers = 1;
  return o;
}

}  // namespace

TEST(Config, EveryShippedConfigParses) {
  int count = 0;
  for (const auto& e : fs::directory_iterator(configs)) {
    if (e.path().extension() != ".json") continue;
    EXPECT_NO_THROW(ex::load_config(e.path())) << e.path();
    ++count;
  }
  EXPECT_GE(count, 10);
}

TEST(Config, UnknownKeysAreRejected) {
  ex::json j = {{"experiment", "E1-existence"}, {"geometry", {{"n", 3}, {"colour", "red"}}}};
  EXPECT_THROW(ex::parse_config(j), ex::ConfigError);
  EXPECT_THROW(ex::parse_config({{"experiment", "E1-existence"}, {"bogus", 1}}), ex::ConfigError);
  EXPECT_THROW(ex::parse_config({{"experiment", "E9"}}), ex::ConfigError);
}

TEST(Config, ValueChecks) {
  EXPECT_THROW(ex::parse_config({{"experiment", "E1-existence"}, {"geometry", {{"n", 2}}}}), ex::ConfigError);
  EXPECT_THROW(ex::parse_config({{"experiment", "E1-existence"}, {"geometry", {{"order", 3}}}}), ex::ConfigError);
  EXPECT_THROW(ex::parse_config({{"experiment", "E1-existence"}, {"geometry", {{"m", "big"}}}}), ex::ConfigError);
  EXPECT_THROW(ex::parse_config({{"experiment", "E5-nonuniqueness"}, {"t_values", {0.5, 2.0}}}), ex::ConfigError);
  EXPECT_THROW(ex::parse_config({{"experiment", "E1-existence"}, {"sweep", {{"k", ex::json::array()}}}}),
               ex::ConfigError);
  EXPECT_THROW(ex::load_config(configs / "does_not_exist.json"), ex::ConfigError);
}

TEST(Output, CsvQuotingAndNumbers) {
  EXPECT_EQ(ex::csv_field("plain"), "plain");
  EXPECT_EQ(ex::csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(ex::csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
  EXPECT_EQ(ex::csv_field("two\nlines"), "\"two\nlines\"");
  EXPECT_EQ(ex::num(0.1), "0.1");
  EXPECT_EQ(ex::num(1.0 / 3.0), "0.3333333333");
  EXPECT_EQ(ex::num(std::nan("")), "nan");
  EXPECT_EQ(ex::num(-INFINITY), "-inf");
  ex::Table t;
  t.header = {"x", "msg"};
  t.rows = {{"1", "ok, fine"}};
  EXPECT_EQ(t.csv(), "x,msg\r\n1,\"ok, fine\"\r\n");
}

TEST(Output, WorkersFromEnvironment) {
  setenv("CONFLAB_WORKERS", "3", 1);
  EXPECT_EQ(ex::default_workers(), 3);
  setenv("CONFLAB_WORKERS", "junk", 1);
  EXPECT_GE(ex::default_workers(), 1);
  unsetenv("CONFLAB_WORKERS");
}

TEST(Harness, RunsAreByteIdentical) {
  const ex::Config c = ex::load_config(configs / "e1_rates.json");
  const fs::path a = scratch("run_a"), b = scratch("run_b");
  ex::run_experiment(c, a, one_worker());
  ex::RunOptions two = one_worker();
  two.workers = 2;  // scheduling must not leak into the output
  ex::run_experiment(c, b, two);
  for (const char* f : {"summary.csv", "manifest.json"}) EXPECT_EQ(ex::slurp(a / f), ex::slurp(b / f)) << f;
  const ex::json man = ex::json::parse(ex::slurp(a / "manifest.json"));
  EXPECT_EQ(man["experiment"], "E1-existence");
  EXPECT_EQ(man["summary_rows"], 3);
}

TEST(Harness, ReplayDetectsTampering) {
  const ex::Config c = ex::load_config(configs / "e1_cmc.json");
  const fs::path run = scratch("replay_src");
  ex::run_experiment(c, run, one_worker());
  EXPECT_EQ(ex::replay(run / "manifest.json", scratch("replay_ok"), 1).exit_code, 0);
  {
    std::ofstream o(run / "summary.csv", std::ios::app | std::ios::binary);
    o << "tampered\r\n";
  }
  const ex::ReplayReport r = ex::replay(run / "manifest.json", scratch("replay_bad"), 1);
  EXPECT_EQ(r.exit_code, 1);
  bool flagged = false;
  for (const auto& [name, same] : r.files) flagged = flagged || (name == "summary.csv" && !same);
  EXPECT_TRUE(flagged);
}

TEST(Harness, SweepExpandsTheGrid) {
  ex::Config c = ex::load_config(configs / "sweep_e1_k.json");
  const fs::path out = scratch("sweep");
  const ex::RunReport r = ex::run_sweep(c, out, one_worker());
  EXPECT_EQ(r.rows, 6u);
  EXPECT_TRUE(fs::exists(out / "points" / "k0.1_m64" / "traces"));
  c.sweep = nullptr;
  EXPECT_THROW(ex::run_sweep(c, out, one_worker()), ex::ConfigError);
}

TEST(Harness, StrictModeTurnsNonConvergenceIntoExitOne) {
  // sin tau on a cos warp puts a conformal Killing component in the source
  const ex::json j = {{"experiment", "E1-existence"},
                      {"geometry", {{"backend", "WarpedTorus"}, {"n", 3}, {"m", 32}, {"order", 2},
                                    {"warp", {{"kind", "cosine"}, {"r0", 1.0}, {"eps", 0.3}}}}},
                      {"seed", {{"tau", {{"kind", "sine"}, {"tau0", 3.0}, {"amp", 0.1}, {"phase", 0.0}}},
                                {"sigma", {{"kind", "Diagonal"}}}}}};
  const ex::Config c = ex::parse_config(j);
  ex::RunOptions o = one_worker();
  EXPECT_EQ(ex::run_experiment(c, scratch("lenient"), o).exit_code, 0);
  o.strict = true;
  const ex::RunReport r = ex::run_experiment(c, scratch("strict"), o);
  EXPECT_TRUE(r.any_nonconvergence);
  EXPECT_EQ(r.exit_code, 1);
}
