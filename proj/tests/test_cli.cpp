// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "cli_app.hpp"

namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out, err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "tinyglass");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = tinyglass::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tinyglass_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

const char* kSmall[] = {"--set", "synth.n_train=4", "--set", "synth.n_val=2", "--set", "synth.n_test=4",
                        "--set", "synth.n_pool=2",  "--set", "synth.size=64"};

std::vector<std::string> with_small(std::vector<std::string> args) {
  args.insert(args.end(), std::begin(kSmall), std::end(kSmall));
  return args;
}

}  // namespace

TEST(Cli, UnknownCommandIsUsageError) {
  const CliRun r = cli({"frobnicate"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("unknown command"), std::string::npos);
}

TEST(Cli, MissingCommandIsUsageError) { EXPECT_EQ(cli({}).code, 2); }

TEST(Cli, HelpSucceeds) {
  const CliRun r = cli({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("profile"), std::string::npos);
}

TEST(Cli, UnknownConfigKeyIsUsageError) {
  const fs::path d = fresh_dir("badkey");
  const CliRun r = cli({"profile", "--out-dir", d.string(), "--set", "no.such=1"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("no.such"), std::string::npos);
  fs::remove_all(d);
}

TEST(Cli, ContractViolationExitsOne) {
  const fs::path d = fresh_dir("contract");
  const CliRun r = cli({"profile", "--out-dir", d.string(), "--input", "100"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("multiples of 32"), std::string::npos);
  fs::remove_all(d);
}

TEST(Cli, ProfileReportsBackboneMacs) {
  const fs::path d = fresh_dir("profile");
  const CliRun r = cli({"profile", "--out-dir", d.string(), "--latency", "0.05", "--energy", "0.004"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::smatch m;
  const std::regex re(R"(backbone\s+params\s+(\d+)\s+macs\s+(\d+))");
  ASSERT_TRUE(std::regex_search(r.out, m, re)) << r.out;
  EXPECT_EQ(std::stoull(m[1]), 2'778'304u);
  EXPECT_NEAR(std::stod(m[2]) / 1.844e9, 1.0, 0.03);
  EXPECT_TRUE(fs::exists(d / "profile.csv"));
  EXPECT_TRUE(fs::exists(d / "resolved_config.txt"));
  fs::remove_all(d);
}

TEST(Cli, SynthDataIsByteIdentical) {
  const fs::path a = fresh_dir("synth_a"), b = fresh_dir("synth_b");
  ASSERT_EQ(cli(with_small({"synth-data", "--out-dir", a.string(), "--seed", "4"})).code, 0);
  ASSERT_EQ(cli(with_small({"synth-data", "--out-dir", b.string(), "--seed", "4"})).code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file() || e.path().filename() == "run.log") continue;
    const fs::path rel = fs::relative(e.path(), a);
    ASSERT_TRUE(fs::exists(b / rel)) << rel;
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
    ++files;
  }
  EXPECT_GE(files, 4u + 6u + 2u);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Cli, TrainWritesCheckpointAndHistory) {
  const fs::path d = fresh_dir("train");
  const CliRun r = cli(with_small({"train", "--out-dir", d.string(), "--input-size", "64", "--set", "model.backbone=tiny",
                                "--set", "train.max_epochs=1", "--set", "train.batch_size=2", "--set",
                                "model.hidden=8"}));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(d / "checkpoint.tgw"));
  EXPECT_TRUE(fs::exists(d / "metrics.csv"));
  const std::string h = slurp(d / "history.csv");
  EXPECT_EQ(std::count(h.begin(), h.end(), '\n'), 2);
  const CliRun e = cli(with_small({"eval", "--out-dir", d.string(), "--input-size", "64", "--set", "model.backbone=tiny",
                                "--set", "model.hidden=8", "--checkpoint", (d / "checkpoint.tgw").string()}));
  EXPECT_EQ(e.code, 0) << e.err;
  fs::remove_all(d);
}

TEST(Cli, ConfigFileThenSetThenFlags) {
  const fs::path d = fresh_dir("precedence");
  fs::create_directories(d);
  { std::ofstream(d / "a.cfg") << "seed=1\ninput_size=64\nthreads=2\n"; }
  const CliRun r = cli({"profile", "--out-dir", d.string(), "--config", (d / "a.cfg").string(), "--set", "seed=2",
                     "--set", "input_size=96", "--input-size", "128"});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string resolved = slurp(d / "resolved_config.txt");
  EXPECT_NE(resolved.find("seed=2\n"), std::string::npos);
  EXPECT_NE(resolved.find("input_size=128\n"), std::string::npos);
  EXPECT_NE(resolved.find("threads=2\n"), std::string::npos);
  fs::remove_all(d);
}
