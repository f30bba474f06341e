#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "s2moe/cli.hpp"
#include "s2moe/s2moe.hpp"

using namespace s2moe;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int status;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "s2moe");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int status = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {status, out.str(), err.str()};
}

double field(const std::string& text, const std::string& key) {
  const auto at = text.find(key + "=");
  if (at == std::string::npos) return -1.0;
  return std::stod(text.substr(at + key.size() + 1));
}

class CliRun : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("s2moe_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream cfg(path("tiny.cfg"));
    cfg << "preset=desk\ncorpus=builtin:20000\nn_layers=1\nd_model=16\nn_heads=2\nd_exp=16\n"
           "experts=4\nseq_len=12\nbatch=4\nsteps=6\neval_interval=3\ncheckpoint_interval=3\n"
           "precision=f64\nlr=0.01\n";
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& leaf) const { return (dir_ / leaf).string(); }

  fs::path dir_;
};

}  // namespace

TEST(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(run({"train", "--no-such-flag"}).status, 1);
  EXPECT_EQ(run({}).status, 1);
  EXPECT_EQ(run({"flops", "--preset", "desk"}).status, 1);
  EXPECT_EQ(run({"flops", "--preset", "desk", "--k", "9"}).status, 1);
  EXPECT_EQ(run({"train", "--variant", "moe"}).status, 1);
  EXPECT_EQ(run({"--help"}).status, 0);
}

TEST(Cli, RuntimeFailuresExitWithTwo) {
  const auto r = run({"eval", "--ckpt", "/nonexistent/checkpoint.bin", "--k", "1", "--split", "val"});
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.err.find("error"), std::string::npos);
}

TEST(Cli, FlopsReportsReductionAtOneExpert) {
  const auto r = run({"flops", "--preset", "paper-base", "--k", "1", "--baseline-k", "2"});
  ASSERT_EQ(r.status, 0) << r.err;
  const double pct = field(r.out, "reduction_percent");
  EXPECT_GE(pct, 24.0);
  EXPECT_LE(pct, 33.0);
  const auto desk = run({"flops", "--preset", "desk", "--k", "2"});
  EXPECT_DOUBLE_EQ(field(desk.out, "reduction_percent"), 0.0);
}

TEST_F(CliRun, SameSeedTrainsIdentically) {
  const auto cfg = path("tiny.cfg");
  const auto a = run({"train", "--config", cfg, "--seed", "3", "--out", path("a")});
  ASSERT_EQ(a.status, 0) << a.err;
  const auto b = run({"train", "--config", cfg, "--seed", "3", "--out", path("b")});
  ASSERT_EQ(b.status, 0) << b.err;
  EXPECT_EQ(read_file_bytes(path("a/metrics.csv")), read_file_bytes(path("b/metrics.csv")));
  EXPECT_TRUE(fs::exists(path("a/checkpoint.bin")));
}

TEST_F(CliRun, EvalValidatesKAgainstCheckpoint) {
  ASSERT_EQ(run({"train", "--config", path("tiny.cfg"), "--steps", "1", "--out", path("r")}).status, 0);
  const auto ckpt = path("r/checkpoint.bin");
  EXPECT_EQ(run({"eval", "--ckpt", ckpt, "--k", "17", "--split", "val"}).status, 1);
  EXPECT_EQ(run({"eval", "--ckpt", ckpt, "--k", "0", "--split", "val"}).status, 1);
  const auto ok = run({"eval", "--ckpt", ckpt, "--k", "4", "--split", "test", "--max-samples", "8"});
  ASSERT_EQ(ok.status, 0) << ok.err;
  EXPECT_GT(field(ok.out, "bpc"), 0.0);
  const auto probe = run({"probe", "--ckpt", ckpt, "--layer", "0"});
  EXPECT_EQ(probe.status, 0) << probe.err;
}
