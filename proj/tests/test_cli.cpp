#include "test_util.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <sstream>
#include <sys/wait.h>

using mtcate::testing::read_file;
using mtcate::testing::TempDir;

namespace {

int run(const std::string& args, const std::filesystem::path& log) {
  const std::string cmd = std::string(MTCATE_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::size_t line_count(const std::filesystem::path& p) {
  const auto s = read_file(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

nlohmann::json manifest(const std::filesystem::path& dir) { return nlohmann::json::parse(read_file(dir / "manifest.json")); }

}  // namespace

TEST(Cli, SimulateWritesDataAndTruth) {
  TempDir dir;
  const auto out = dir / "sim";
  ASSERT_EQ(run("simulate --k 10 --n 500 --seed 7 --out-dir " + out.string(), dir / "log"), 0) << read_file(dir / "log");
  EXPECT_EQ(line_count(out / "data.csv"), 5001u);
  EXPECT_EQ(line_count(out / "truth.csv"), 5001u);
  EXPECT_EQ(read_file(out / "truth.csv").substr(0, 20), "row,trial,tau,y0,y1\n");
  const auto m = manifest(out);
  EXPECT_EQ(m["command"], "simulate");
  EXPECT_EQ(m["seed"], 7);
  EXPECT_TRUE(m["outputs"].contains("data.csv"));
}

TEST(Cli, BenchmarkIsReproducible) {
  TempDir dir;
  const std::string args = "benchmark --scenarios 1a --sd-pairs Low-Low --methods S-Pool,CF-Indicator --k 3 --n 60 "
                           "--n-reps 2 --n-trees 10 --seed 5 --out-dir ";
  ASSERT_EQ(run(args + (dir / "a").string(), dir / "log"), 0) << read_file(dir / "log");
  ASSERT_EQ(run(args + (dir / "b").string() + " --workers 2", dir / "log"), 0) << read_file(dir / "log");
  EXPECT_EQ(read_file(dir / "a" / "summary.csv"), read_file(dir / "b" / "summary.csv"));
  EXPECT_EQ(manifest(dir / "a")["outputs"]["summary.csv"], manifest(dir / "b")["outputs"]["summary.csv"]);
  EXPECT_EQ(line_count(dir / "a" / "replications.csv"), 5u);

  ASSERT_EQ(run("report --summary " + (dir / "a" / "summary.csv").string() + " --out-dir " + (dir / "r").string(),
                dir / "log"),
            0)
      << read_file(dir / "log");
  EXPECT_TRUE(std::filesystem::exists(dir / "r" / "ranked.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "r" / "comparison.csv"));
  const auto m = manifest(dir / "r");
  EXPECT_EQ(m["inputs"].size(), 1u);
}

TEST(Cli, FitPredictInterpret) {
  TempDir dir;
  const auto sim = dir / "sim";
  ASSERT_EQ(run("simulate --k 3 --n 100 --seed 2 --out-dir " + sim.string(), dir / "log"), 0);
  const auto data = (sim / "data.csv").string();
  const auto before = read_file(sim / "data.csv");
  ASSERT_EQ(run("fit --data " + data + " --method CF-Indicator --n-trees 20 --ci-groups 4 --out-dir " +
                    (dir / "fit").string(),
                dir / "log"),
            0)
      << read_file(dir / "log");
  const auto model = (dir / "fit" / "model.json").string();
  ASSERT_EQ(run("predict --model " + model + " --data " + data + " --ci --out-dir " + (dir / "pred").string(), dir / "log"),
            0)
      << read_file(dir / "log");
  EXPECT_EQ(line_count(dir / "pred" / "predictions.csv"), 301u);
  EXPECT_EQ(read_file(dir / "pred" / "predictions.csv").substr(0, 36), "row,trial,cate,variance,lower,upper\n");

  ASSERT_EQ(run("interpret --model " + model + " --data " + data + " --out-dir " + (dir / "int").string(), dir / "log"),
            0)
      << read_file(dir / "log");
  for (const char* f : {"cate.csv", "importance.csv", "interpretation_tree.json", "interpretation_tree.txt", "blp.csv"})
    EXPECT_TRUE(std::filesystem::exists(dir / "int" / f)) << f;

  // Inputs are never modified and their digests are recorded.
  EXPECT_EQ(read_file(sim / "data.csv"), before);
  const auto fm = manifest(dir / "fit");
  const auto sm = manifest(sim);
  ASSERT_EQ(fm["inputs"].size(), 1u);
  EXPECT_EQ(fm["inputs"].begin().value(), sm["outputs"]["data.csv"]);
}

TEST(Cli, ExitCodes) {
  TempDir dir;
  EXPECT_EQ(run("", dir / "log"), 1);
  EXPECT_EQ(run("fit", dir / "log"), 1);
  EXPECT_EQ(run("simulate --scenario 7 --out-dir " + (dir / "x").string(), dir / "log"), 1);
  EXPECT_EQ(run("fit --data " + (dir / "absent.csv").string() + " --out-dir " + (dir / "y").string(), dir / "log"), 2);
  const auto bad = dir.write("bad.csv", "trial,treat,y,x\n1,0,1,0\n1,5,1,0\n");
  EXPECT_EQ(run("fit --data " + bad.string() + " --out-dir " + (dir / "z").string(), dir / "log"), 2);
  EXPECT_NE(read_file(dir / "log").find("row 2"), std::string::npos) << read_file(dir / "log");
  EXPECT_EQ(run("--version", dir / "log"), 0);
}

TEST(Cli, RefusesToOverwriteInputs) {
  TempDir dir;
  ASSERT_EQ(run("simulate --k 2 --n 40 --out-dir " + dir.path().string(), dir / "log"), 0);
  ASSERT_EQ(run("fit --data " + (dir / "data.csv").string() + " --method S-Pool --n-trees 5 --out-dir " +
                    (dir / "fit").string(),
                dir / "log"),
            0);
  std::filesystem::copy_file(dir / "data.csv", dir / "fit" / "predictions.csv");
  const auto before = read_file(dir / "fit" / "predictions.csv");
  EXPECT_EQ(run("predict --model " + (dir / "fit" / "model.json").string() + " --data " +
                    (dir / "fit" / "predictions.csv").string() + " --out-dir " + (dir / "fit").string(),
                dir / "log"),
            1);
  EXPECT_EQ(read_file(dir / "fit" / "predictions.csv"), before);
}
