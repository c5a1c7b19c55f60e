// SPDX-License-Identifier: Apache-2.0
#include "percept/checkpoint.hpp"
#include "percept/cli.hpp"
#include "percept/experiments.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

using namespace percept;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_command(args, out, err);
  return {code, out.str(), err.str()};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    static int c = 0;
    dir = fs::temp_directory_path() / ("percept_cli_" + std::to_string(::getpid()) + "_" + std::to_string(c++));
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string p(const std::string& rel) const { return (dir / rel).string(); }

  json config_of(const std::string& rel) const {
    std::ifstream is(dir / rel / "config.json");
    return json::parse(is);
  }

  /// Tiny pre-trained then depth fine-tuned b1 checkpoint.
  std::string tiny_depth_checkpoint() {
    const Result a = run({"pretrain", "--model", "b1", "--steps", "2", "--batch", "2", "--count", "8", "--out", p("pre")});
    EXPECT_EQ(a.code, 0) << a.err;
    const Result b = run({"finetune", "--init", p("pre"), "--task", "depth", "--steps", "2", "--batch", "2", "--count", "8",
                          "--eval-samples", "0", "--out", p("ft")});
    EXPECT_EQ(b.code, 0) << b.err;
    return p("ft");
  }

  fs::path dir;
};

int subprocess_exit(const std::string& args) {
  const std::string cmd = std::string(PERCEPT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(CliExit, BinaryExitCodes) {
  EXPECT_EQ(subprocess_exit("--help"), 0);
  EXPECT_EQ(subprocess_exit(""), 2);
  EXPECT_EQ(subprocess_exit("frobnicate"), 2);
  EXPECT_EQ(subprocess_exit("infer --ckpt /nonexistent/ck --out /tmp/percept_never"), 1);
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"pretrain", "--bogus", "1"}).code, kExitUsage);
  const Result r = run({"pretrain", "--steps", "many", "--out", p("x")});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("--steps"), std::string::npos) << r.err;
  EXPECT_EQ(run({"pretrain", "--steps", "1"}).code, kExitUsage);  // no --out
  EXPECT_EQ(run({"infer", "--preset", "fastest", "--ckpt", p("x"), "--out", p("y")}).code, kExitUsage);
  EXPECT_EQ(run({"fit-law"}).code, kExitUsage);
  EXPECT_EQ(run({"sweep", "--plan", "no_such_plan", "--out", p("s")}).code, kExitUsage);
}

TEST_F(Cli, RuntimeErrorsExitOne) {
  const Result r = run({"infer", "--ckpt", p("missing"), "--out", p("o")});
  EXPECT_EQ(r.code, kExitRuntime);
  EXPECT_NE(r.err.find("missing"), std::string::npos) << r.err;
}

TEST_F(Cli, GenDataWritesDataset) {
  const Result r = run({"gen-data", "--task", "flow", "--count", "5", "--out", p("flow")});
  ASSERT_EQ(r.code, 0) << r.err;
  const DatasetManifest m = read_manifest(p("flow"));
  EXPECT_EQ(m.task, "flow");
  EXPECT_EQ(m.samples.size(), 5u);
  EXPECT_EQ(config_of("flow")["command"], "gen-data");
}

TEST_F(Cli, ConfigFileLayersUnderFlags) {
  {
    std::ofstream os(dir / "cfg.json");
    os << R"({"steps": 3, "lr": 0.02, "log_interval": 1})";
  }
  const Result r = run({"pretrain", "--config", p("cfg.json"), "--steps", "2", "--batch", "2", "--count", "4", "--out", p("run")});
  ASSERT_EQ(r.code, 0) << r.err;
  const json c = config_of("run");
  EXPECT_EQ(c["steps"], "2");
  EXPECT_EQ(c["lr"], 0.02);
  EXPECT_EQ(c["log-interval"], 1);
  EXPECT_EQ(c["command"], "pretrain");
  EXPECT_FALSE(c.contains("config"));

  std::ofstream(dir / "bad.json") << R"({"stepz": 3})";
  const Result bad = run({"pretrain", "--config", p("bad.json"), "--out", p("run2")});
  EXPECT_EQ(bad.code, kExitUsage);
  EXPECT_NE(bad.err.find("stepz"), std::string::npos) << bad.err;
}

TEST_F(Cli, SeedFromEnvironment) {
  ::setenv("PERCEPT_SEED", "17", 1);
  const Result r = run({"gen-data", "--task", "depth", "--count", "2", "--out", p("d")});
  ::unsetenv("PERCEPT_SEED");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(config_of("d")["seed"], "17");
  ASSERT_EQ(run({"gen-data", "--task", "depth", "--count", "2", "--seed", "17", "--out", p("e")}).code, 0);
  const DatasetManifest a = read_manifest(p("d")), b = read_manifest(p("e"));
  const PerceptionSample sa = load_sample(dir / "d" / a.samples[0].dir), sb = load_sample(dir / "e" / b.samples[0].dir);
  EXPECT_TRUE((sa.target.planes[0] == sb.target.planes[0]).all());
}

TEST_F(Cli, PresetExpandsAndFlagsOverride) {
  const std::string ck = tiny_depth_checkpoint();
  const Result r = run({"infer", "--ckpt", ck, "--preset", "paper-optimal", "--count", "1", "--out", p("inf")});
  ASSERT_EQ(r.code, 0) << r.err;
  const json c = config_of("inf");
  EXPECT_EQ(c["steps"], 200);
  EXPECT_EQ(c["ensemble"], 5);
  EXPECT_EQ(c["ensemble-mode"], to_string(EnsembleMode::median_compilation));
  EXPECT_EQ(c["schedule"], "cosine");
  EXPECT_NE(r.out.find("steps=200 N=5"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(dir / "inf" / "predictions" / "sample_00000" / "pred.bin"));
  EXPECT_TRUE(fs::exists(dir / "inf" / "predictions" / "sample_00000" / "pred.png"));
  std::ifstream is(dir / "inf" / "cost.json");
  const json cost = json::parse(is);
  EXPECT_GT(cost["total_macs"].get<double>(), 0);

  const Result o = run({"infer", "--ckpt", ck, "--preset", "paper-optimal", "--steps", "3", "--count", "1", "--out", p("inf2")});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(config_of("inf2")["steps"], "3");
  EXPECT_EQ(config_of("inf2")["ensemble"], 5);
}

TEST_F(Cli, EvalReportsMetrics) {
  const std::string ck = tiny_depth_checkpoint();
  const Result r = run({"eval", "--ckpt", ck, "--steps", "2", "--count", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  EXPECT_TRUE(j.contains("absrel"));
  EXPECT_TRUE(j.contains("delta1"));
  EXPECT_EQ(j["samples"], 2);
  EXPECT_EQ(j["aligned"], true);
}

TEST_F(Cli, FitLawOnExactData) {
  {
    std::ofstream os(dir / "law.csv");
    os << "compute_macs,loss\n";
    for (double c = 1e10; c <= 1e20; c *= 10) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", c, 0.23 * std::pow(c, -0.0098));
      os << buf;
    }
  }
  const Result r = run({"fit-law", "--csv", p("law.csv"), "--out", p("fit")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("a=0.23 b=-0.0098 r2=1"), std::string::npos) << r.out;
  std::ifstream is(dir / "fit" / "fit.json");
  const json j = json::parse(is);
  EXPECT_NEAR(j["a"].get<double>(), 0.23, 1e-9);
  EXPECT_NEAR(j["b"].get<double>(), -0.0098, 1e-9);
}

TEST_F(Cli, PretrainResumeMatchesUninterrupted) {
  const std::vector<std::string> common{"--model", "b1", "--batch", "2", "--count", "8", "--log-interval", "1"};
  auto cmd = [&](std::vector<std::string> head) {
    head.insert(head.end(), common.begin(), common.end());
    return head;
  };
  ASSERT_EQ(run(cmd({"pretrain", "--steps", "4", "--out", p("full")})).code, 0);
  ASSERT_EQ(run(cmd({"pretrain", "--steps", "2", "--out", p("leg1")})).code, 0);
  ASSERT_EQ(run(cmd({"pretrain", "--steps", "4", "--init", p("leg1"), "--out", p("leg2")})).code, 0);
  EXPECT_EQ(weights_hash(p("full/checkpoint")), weights_hash(p("leg2/checkpoint")));
  const Checkpoint ck = load_checkpoint(p("leg2/checkpoint"));
  EXPECT_EQ(ck.meta.step, 4);
  EXPECT_EQ(ck.meta.parent_hash, weights_hash(p("leg1/checkpoint")));
  // Compute column continues across the resume.
  std::ifstream a(dir / "full" / "runs.csv"), b(dir / "leg2" / "runs.csv");
  std::string la, lb, last_a, last_b;
  while (std::getline(a, la)) last_a = la;
  while (std::getline(b, lb)) last_b = lb;
  EXPECT_EQ(last_a, last_b);
}

TEST_F(Cli, UpcycleRecordsLineage) {
  ASSERT_EQ(run({"pretrain", "--model", "b1", "--steps", "1", "--batch", "2", "--count", "4", "--out", p("pre")}).code, 0);
  const std::string parent = weights_hash(p("pre/checkpoint"));
  const Result r = run({"upcycle", "--init", p("pre"), "--experts", "4", "--active", "2", "--out", p("moe")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("parent " + parent), std::string::npos) << r.out;
  const Checkpoint ck = load_checkpoint(p("moe/checkpoint"));
  EXPECT_EQ(ck.meta.parent_hash, parent);
  ASSERT_TRUE(ck.params.spec.moe);
  EXPECT_EQ(ck.params.spec.moe->num_experts, 4);
  EXPECT_EQ(run({"upcycle", "--init", p("pre"), "--experts", "2", "--active", "3", "--out", p("bad")}).code, kExitUsage);
}

TEST_F(Cli, SweepInferenceStepsIsResumable) {
  const std::vector<std::string> args{"sweep", "--plan", "inference_steps", "--pretrain-steps", "2", "--finetune-steps", "2",
                                      "--batch", "2", "--train-samples", "8", "--eval-samples", "1", "--model", "b1",
                                      "--out", p("sw")};
  const Result r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = read_sweep_csv(dir / "sw" / "fig7_steps.csv");
  ASSERT_EQ(rows.size(), 7u);
  const std::vector<std::string> expected{"1", "2", "5", "10", "20", "50", "100"};
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(rows[i].setting, expected[i]);
    EXPECT_TRUE(rows[i].absrel.has_value());
  }
  EXPECT_LT(rows[0].compute_macs_infer, rows[6].compute_macs_infer);
  const Result again = run(args);
  ASSERT_EQ(again.code, 0) << again.err;
  EXPECT_NE(again.out.find("0 new rows"), std::string::npos) << again.out;
  EXPECT_EQ(read_sweep_csv(dir / "sw" / "fig7_steps.csv").size(), 7u);
}

TEST_F(Cli, ReportRendersSvg) {
  std::ofstream(dir / "law.csv") << std::string(kSweepHeader) << "\n"
                                 << "p,a,1,100,5,0.5,0.2,0.8,,,0\n"
                                 << "p,b,2,1000,5,0.4,0.15,0.85,,,0\n";
  const Result r = run({"report", "--csv", p("law.csv"), "--out", p("rep")});
  ASSERT_EQ(r.code, 0) << r.err;
  bool svg = false;
  for (const auto& e : fs::directory_iterator(dir / "rep")) svg |= e.path().extension() == ".svg";
  EXPECT_TRUE(svg);
}
