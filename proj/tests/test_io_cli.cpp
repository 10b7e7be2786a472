// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <iomanip>
#include <sstream>

#include "difflab/cli.hpp"

using namespace difflab;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = 0;
  std::string out, err;
};

CliRun run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "difflab");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("difflab-test-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Io, InstanceRoundTrip) {
  const Instance inst = desk_instance(3);
  const Instance back = instance_from_json(json::parse(to_json(inst).dump()));
  EXPECT_EQ(back.E(), inst.E());
  EXPECT_EQ(back.data.joint_table(), inst.data.joint_table());
  EXPECT_EQ(back.name, inst.name);
}

TEST(Io, ScheduleRoundTrip) {
  const NoiseSchedule s(-5, 7, PiecewiseLinearShape({0.1, 0.9, -0.4}));
  const NoiseSchedule b = schedule_from_json(json::parse(to_json(s).dump()));
  for (double t : {0.0, 0.2, 0.55, 1.0}) EXPECT_DOUBLE_EQ(b.gamma(t), s.gamma(t));
}

TEST(Io, CsvWidthChecked) {
  CsvTable t({"a", "b"});
  t.add({1.0, 0.5});
  EXPECT_THROW(t.add({1.0}), std::invalid_argument);
  EXPECT_EQ(t.str().substr(0, 4), "a,b\n");
}

TEST(Config, DefaultsValidateAgainstThemselves) {
  EXPECT_NO_THROW(cli::validate_config(cli::default_config(), cli::default_config()));
}

TEST(Config, UnknownKeyNamesTheField) {
  json bad = {{"optimum", {{"gird", 12}}}};
  try {
    cli::validate_config(bad, cli::default_config());
    FAIL() << "accepted an unknown key";
  } catch (const cli::UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("optimum.gird"), std::string::npos);
  }
}

TEST(Config, TypeMismatchNamesTheField) {
  json bad = {{"sample", {{"steps", "many"}}}};
  try {
    cli::validate_config(bad, cli::default_config());
    FAIL() << "accepted a string for an integer";
  } catch (const cli::UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("sample.steps"), std::string::npos);
  }
  EXPECT_THROW(cli::validate_config(json{{"seed", 1.5}}, cli::default_config()), cli::UsageError);
  EXPECT_NO_THROW(cli::validate_config(json{{"learn", {{"lr", 1}}}}, cli::default_config()));
}

TEST(Config, OverridesParseJsonValues) {
  json cfg = cli::default_config();
  cli::apply_override(cfg, "sample.steps=12");
  cli::apply_override(cfg, "instance.kind=tiny");
  cli::apply_override(cfg, "likelihood.K=[1,3]");
  EXPECT_EQ(cfg["sample"]["steps"], 12);
  EXPECT_EQ(cfg["instance"]["kind"], "tiny");
  EXPECT_EQ(cfg["likelihood"]["K"], json::parse("[1,3]"));
  EXPECT_THROW(cli::apply_override(cfg, "sample.nope=1"), cli::UsageError);
  EXPECT_THROW(cli::apply_override(cfg, "steps"), cli::UsageError);
}

TEST(Config, HashTracksContent) {
  json a = cli::default_config(), b = a;
  EXPECT_EQ(cli::config_hash(a), cli::config_hash(b));
  b["seed"] = 1;
  EXPECT_NE(cli::config_hash(a), cli::config_hash(b));
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run_cli({}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"no-such-command"}).code, cli::kUsage);
  const fs::path d = scratch_dir("usage");
  const CliRun r = run_cli({"--out-dir", d.string(), "--set", "optimum.gird=3", "make-instance"});
  EXPECT_EQ(r.code, cli::kUsage);
  EXPECT_NE(r.err.find("optimum.gird"), std::string::npos);
  EXPECT_EQ(run_cli({"--out-dir", d.string(), "verify", "--only", "99"}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"--out-dir", d.string(), "--set", "instance.kind=huge", "make-instance"}).code, cli::kUsage);
}

TEST(Cli, PrintDefaults) {
  const CliRun r = run_cli({"make-instance", "--print-defaults"});
  EXPECT_EQ(r.code, cli::kOk);
  EXPECT_EQ(json::parse(r.out), cli::default_config());
}

TEST(Cli, MakeInstanceWritesManifest) {
  const fs::path d = scratch_dir("make");
  ASSERT_EQ(run_cli({"--out-dir", d.string(), "--seed", "9", "make-instance"}).code, cli::kOk);
  const json m = json::parse(read_text(d / "manifest.json"));
  EXPECT_EQ(m["command"], "make-instance");
  EXPECT_EQ(m["seed"], 9);
  EXPECT_EQ(m["config_hash"], cli::config_hash(m["config"]));
  EXPECT_EQ(instance_from_json(json::parse(read_text(d / "instance.json"))).L(), 3);
}

TEST(Cli, SampleCsvIsByteIdenticalAcrossRuns) {
  const fs::path a = scratch_dir("sample-a"), b = scratch_dir("sample-b");
  const std::vector<std::string> common = {"--set", "sample.n=300", "--set", "sample.steps=16", "sample"};
  auto args = [&](const fs::path& d) {
    std::vector<std::string> v = {"--out-dir", d.string()};
    v.insert(v.end(), common.begin(), common.end());
    return v;
  };
  ASSERT_EQ(run_cli(args(a)).code, cli::kOk);
  ASSERT_EQ(run_cli(args(b)).code, cli::kOk);
  for (const char* name : {"samples_ancestral.csv", "samples_ddim.csv", "samples_dpmpp2m.csv", "samples_heun.csv"})
    EXPECT_EQ(read_text(a / name), read_text(b / name)) << name;
}

TEST(Cli, WorkerCountDoesNotChangeOutputs) {
  const fs::path a = scratch_dir("workers-a"), b = scratch_dir("workers-b");
  const std::vector<std::string> common = {"--set", "optimum.grid=64", "--set", "optimum.n=3000", "--set",
                                           "curves.points=5", "--set", "curves.n=3000", "--set", "curves.ce_n=500",
                                           "--set", "mc.shard_size=256", "loss-curves"};
  std::vector<std::string> va = {"--out-dir", a.string(), "--workers", "1"}, vb = {"--out-dir", b.string(), "--workers", "3"};
  va.insert(va.end(), common.begin(), common.end());
  vb.insert(vb.end(), common.begin(), common.end());
  ASSERT_EQ(run_cli(va).code, cli::kOk);
  ASSERT_EQ(run_cli(vb).code, cli::kOk);
  EXPECT_EQ(read_text(a / "loss_curves.csv"), read_text(b / "loss_curves.csv"));
}

TEST(Cli, ScheduleFileWithoutExtension) {
  const fs::path d = scratch_dir("sched");
  write_text(d / "bent.json", to_json(NoiseSchedule(-6, 6, PiecewiseLinearShape({0.2, 1.0}))).dump());
  const CliRun r = run_cli({"--out-dir", d.string(), "--set", "curves.points=3", "--set", "curves.n=500", "--set",
                            "curves.ce_n=200", "loss-curves", "--schedule", (d / "bent").string()});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_EQ(run_cli({"--out-dir", d.string(), "loss-curves", "--schedule", (d / "missing").string()}).code, cli::kUsage);
}

TEST(Cli, ScalingFitFromCsv) {
  const fs::path d = scratch_dir("scaling");
  std::ostringstream csv;
  csv << std::setprecision(17) << "C,N,loss,group\n";
  for (double c : {1e18, 1e19, 1e20})
    for (int i = 0; i < 5; ++i) {
      const double x = std::log(1e7) + 0.5 * std::log(c / 1e18) - 1.0 + 0.5 * i;
      const double lstar = std::exp(-0.05 * std::log(c) + 2.5);
      csv << c << "," << std::exp(x) << "," << lstar * std::exp(0.04 * std::pow(x - std::log(1e7) - 0.5 * std::log(c / 1e18), 2))
          << ",base\n";
    }
  write_text(d / "runs.csv", csv.str());
  const CliRun r = run_cli({"--out-dir", d.string(), "scaling-fit", "--input", (d / "runs.csv").string()});
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  const json fits = json::parse(read_text(d / "scaling_fits.json"));
  EXPECT_NEAR(fits["base"]["power_law"]["alpha"].get<double>(), -0.05, 1e-9);
  EXPECT_EQ(run_cli({"--out-dir", d.string(), "scaling-fit"}).code, cli::kUsage);
}
