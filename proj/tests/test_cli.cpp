#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "branchlab/cli.hpp"

namespace fs = std::filesystem;
using branchlab::cli::run_cli;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "branchlab_cli" / name;
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

int run(std::vector<std::string> args, std::string* out = nullptr) {
  std::ostringstream o, e;
  const int code = run_cli(args, o, e);
  if (out) *out = o.str() + e.str();
  return code;
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}), 2);
  EXPECT_EQ(run({"frobnicate"}), 2);
  EXPECT_EQ(run({"toy1", "--no-such-flag"}), 2);
  EXPECT_EQ(run({"sweep", "--m", "0..4", "--output-dir", scratch("m0").string()}), 2);
  EXPECT_EQ(run({"sweep", "--m", "5..2", "--output-dir", scratch("m52").string()}), 2);
  EXPECT_EQ(run({"toy1", "--m", "2..3", "--output-dir", scratch("m23").string()}), 2);
  EXPECT_EQ(run({"toy1", "--set", "train.missing=1", "--output-dir", scratch("key").string()}), 2);
  EXPECT_FALSE(fs::exists(scratch("m0") / "manifest.json"));
}

TEST(Cli, HelpExitsCleanly) {
  std::string out;
  EXPECT_EQ(run({"--help"}, &out), 0);
  EXPECT_NE(out.find("sweep"), std::string::npos);
}

TEST(Cli, ConfigErrors) {
  const fs::path dir = scratch("config");
  fs::create_directories(dir);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_EQ(run({"toy1", "--config", (dir / "bad.json").string()}), 3);
  std::ofstream(dir / "typed.json") << R"({"train": {"learning_rate": "fast"}})";
  EXPECT_EQ(run({"toy1", "--config", (dir / "typed.json").string()}), 3);
  EXPECT_EQ(run({"toy1", "--config", (dir / "missing.json").string()}), 3);
}

TEST(Cli, SweepGridRows) {
  const fs::path dir = scratch("sweep");
  EXPECT_EQ(run({"sweep", "--experiment", "toy1", "--m", "2..30", "--trials", "2", "--seed", "1", "--output-dir", dir.string()}), 0);
  const std::string csv = slurp(dir / "results.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 29 * 2);
  const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(manifest["config"]["seed"], 1);
  EXPECT_EQ(manifest["config"]["trials"], 2);
  EXPECT_EQ(manifest["config"]["M_values"].size(), 29u);
}

TEST(Cli, ConfigFileAndOverrides) {
  const fs::path dir = scratch("layered");
  fs::create_directories(dir);
  std::ofstream(dir / "cfg.json") << R"({"train": {"learning_rate": 0.02, "max_steps": 40}, "seed": 5})";
  EXPECT_EQ(run({"toy2", "--config", (dir / "cfg.json").string(), "--set", "train.max_steps=30", "--m", "4",
                 "--output-dir", (dir / "out").string()}),
            0);
  const auto m = nlohmann::json::parse(slurp(dir / "out" / "manifest.json"));
  EXPECT_EQ(m["config"]["train"]["learning_rate"], 0.02);
  EXPECT_EQ(m["config"]["train"]["max_steps"], 30);
  EXPECT_EQ(m["config"]["seed"], 5);
  EXPECT_EQ(m["config"]["M_values"], nlohmann::json::array({4}));
  EXPECT_EQ(m["version"], branchlab::cli::kVersion);
}

TEST(Cli, ManifestIsPure) {
  const fs::path a = scratch("pure");
  EXPECT_EQ(run({"toy1", "--m", "3", "--set", "train.max_steps=20", "--output-dir", a.string()}), 0);
  const std::string first = slurp(a / "manifest.json");
  EXPECT_EQ(run({"toy1", "--m", "3", "--set", "train.max_steps=20", "--output-dir", a.string()}), 0);
  EXPECT_EQ(slurp(a / "manifest.json"), first);
  EXPECT_FALSE(slurp(a / "results.csv").empty());
}

TEST(Cli, SeedFallsBackToEnvironment) {
  const fs::path dir = scratch("env");
  ::setenv("BRANCHLAB_SEED", "42", 1);
  EXPECT_EQ(run({"toy1", "--m", "2", "--set", "train.max_steps=5", "--output-dir", (dir / "a").string()}), 0);
  EXPECT_EQ(run({"toy1", "--m", "2", "--seed", "7", "--set", "train.max_steps=5", "--output-dir", (dir / "b").string()}), 0);
  ::setenv("BRANCHLAB_SEED", "forty-two", 1);
  EXPECT_EQ(run({"toy1", "--output-dir", (dir / "c").string()}), 3);
  ::unsetenv("BRANCHLAB_SEED");
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "a" / "manifest.json"))["config"]["seed"], 42);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "b" / "manifest.json"))["config"]["seed"], 7);
}

TEST(Cli, VerifyPasses) {
  const fs::path dir = scratch("verify");
  std::string out;
  EXPECT_EQ(run({"verify", "--trials", "10", "--output-dir", dir.string()}, &out), 0);
  EXPECT_NE(out.find("40 passed, 0 failed"), std::string::npos) << out;
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
}

TEST(Cli, DiffuseAndHessianSubcommands) {
  const fs::path d = scratch("diffuse"), h = scratch("hessian");
  EXPECT_EQ(run({"diffuse", "--output-dir", d.string()}), 0);
  EXPECT_TRUE(fs::exists(d / "bands.svg"));
  EXPECT_LT(nlohmann::json::parse(slurp(d / "summary.json"))["reconstruction_error"].get<double>(), 1e-10);
  EXPECT_EQ(run({"hessian", "--experiment", "toy2", "--m", "3", "--output-dir", h.string()}), 0);
  const auto s = nlohmann::json::parse(slurp(h / "summary.json"));
  EXPECT_EQ(s["parameters"], 6);
  EXPECT_EQ(run({"hessian", "--experiment", "decompose", "--output-dir", scratch("hbad").string()}), 2);
}
