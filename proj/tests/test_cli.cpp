#include <gtest/gtest.h>

#include <fstream>

#include "radvit/backbone.hpp"
#include "radvit/cli.hpp"
#include "radvit/config.hpp"
#include "test_util.hpp"

using namespace radvit;

namespace {

struct Outcome {
  int code;
  std::string err;
};

Outcome run(const std::vector<std::string>& args) {
  testing::internal::CaptureStderr();
  testing::internal::CaptureStdout();
  const int code = run_cli(args);
  testing::internal::GetCapturedStdout();
  return {code, testing::internal::GetCapturedStderr()};
}

}  // namespace

TEST(Cli, HelpExitsZeroEverywhere) {
  for (const auto& sub : std::vector<std::vector<std::string>>{{"--help"},
                                                               {"prep", "--help"},
                                                               {"pretrain", "--help"},
                                                               {"probe", "--help"},
                                                               {"segment", "--help"},
                                                               {"adapt", "--help"},
                                                               {"eval", "--help"},
                                                               {"inspect", "attn", "--help"},
                                                               {"inspect", "kmeans", "--help"},
                                                               {"inspect", "export", "--help"},
                                                               {"synth", "--help"}}) {
    EXPECT_EQ(run(sub).code, 0) << sub.front();
  }
}

TEST(Cli, BadArgumentsExitOne) {
  EXPECT_EQ(run({"probe", "--no-such-flag"}).code, 1);
  EXPECT_EQ(run({"nonsense"}).code, 1);
}

TEST(Cli, UnknownConfigKeyNamed) {
  testutil::TempDir dir;
  const auto o = run({"--quiet", "pretrain", "--manifest", (dir.path / "m.txt").string(), "--out",
                      (dir.path / "run").string(), "preset=toy-2d", "mystery_knob=3"});
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.err.find("mystery_knob"), std::string::npos) << o.err;
}

TEST(Cli, MissingCheckpointExitTwo) {
  testutil::TempDir dir;
  const auto task = dir.path / "task.json";
  std::ofstream(task) << R"({"name": "t", "type": "classification", "manifest": "m.txt"})";
  const auto ckpt = (dir.path / "absent.rvck").string();
  const auto o = run({"--quiet", "probe", "--ckpt", ckpt, "--task", task.string(), "--out",
                      (dir.path / "out").string()});
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find(ckpt), std::string::npos) << o.err;
}

TEST(Cli, EmptyBenchmarkSucceeds) {
  testutil::TempDir dir;
  const auto cfg = dir.path / "bench.json";
  std::ofstream(cfg) << R"({"tasks": []})";
  const auto o = run({"--quiet", "eval", "--config", cfg.string(), "--out", (dir.path / "out").string()});
  EXPECT_EQ(o.code, 0) << o.err;
  EXPECT_TRUE(std::filesystem::exists(dir.path / "out" / "report.jsonl"));
}

TEST(Cli, PretrainRecordsResolvedConfig) {
  testutil::TempDir dir;
  ASSERT_EQ(run({"--quiet", "synth", "--out", (dir.path / "corpus").string(), "--kind", "pretrain", "--count", "4",
                 "--size", "32"})
                .code,
            0);
  const auto out = dir.path / "run";
  const auto o = run({"--quiet", "pretrain", "--manifest", (dir.path / "corpus" / "manifest.txt").string(), "--out",
                      out.string(), "preset=toy-2d", "batch_size=2", "total_iterations=2", "warmup_iterations=1",
                      "local_crop_number=2"});
  ASSERT_EQ(o.code, 0) << o.err;
  const auto resolved = read_json_file(out / "resolved_config.json");
  EXPECT_EQ(resolved.at("command"), "pretrain");
  EXPECT_EQ(resolved.at("config").at("batch_size"), 2);
  EXPECT_EQ(resolved.at("config").at("preset"), "toy-2d");
  EXPECT_TRUE(std::filesystem::exists(out / "run.log"));
  EXPECT_TRUE(std::filesystem::exists(out / "final.rvck"));
  EXPECT_NO_THROW(load_backbone(out / "final.rvck"));
}
