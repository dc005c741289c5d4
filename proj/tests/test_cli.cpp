#include "aunet/cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

using namespace aunet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_command(args, out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

TEST(Cli, MissingSubcommandIsAUsageError) {
  EXPECT_EQ(run({}).code, kExitUsage);
  EXPECT_EQ(run({"frobnicate"}).code, kExitUsage);
}

TEST(Cli, UnknownModeIsAUsageError) {
  const Outcome o = run({"train", "--mode", "lstm", "--data", "x", "--out", "y"});
  EXPECT_EQ(o.code, kExitUsage);
  EXPECT_FALSE(o.err.empty());
}

TEST(Cli, MissingDatasetIsARuntimeError) {
  const Outcome o = run({"train", "--data", "/nonexistent/aunet", "--out", (fs::temp_directory_path() / "aunet_cli_x").string()});
  EXPECT_EQ(o.code, kExitRuntime);
  EXPECT_NE(o.err.find("/nonexistent/aunet"), std::string::npos) << o.err;
}

TEST(Cli, OpGradchecksPass) {
  const Outcome o = run({"gradcheck", "--ops-only"});
  EXPECT_EQ(o.code, kExitOk) << o.out;
  EXPECT_NE(o.out.find("all checks passed"), std::string::npos);
}

TEST(Cli, SynthTrainEvalReport) {
  const fs::path root = fs::temp_directory_path() / "aunet_cli_flow";
  fs::remove_all(root);
  const std::string data = (root / "data").string();
  ASSERT_EQ(run({"synth", "--out", data, "--subjects", "3", "--sessions", "1", "--frames", "12"}).code, kExitOk);
  const std::string ck = (root / "roi").string();
  const Outcome t = run({"train", "--mode", "roi", "--data", data, "--out", ck, "--iters", "3"});
  ASSERT_EQ(t.code, kExitOk) << t.err;
  const Outcome e = run({"eval", "--checkpoint", ck + "/checkpoint.bin", "--data", data, "--out", ck});
  ASSERT_EQ(e.code, kExitOk) << e.err;
  EXPECT_NE(e.out.find("Avg"), std::string::npos);
  EXPECT_TRUE(fs::exists(fs::path(ck) / "metrics.json"));
  const Outcome r = run({"report", "--runs", root.string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("roi"), std::string::npos);
}
