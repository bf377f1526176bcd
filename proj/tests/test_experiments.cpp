#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "branchlab/experiments.hpp"

namespace bl = branchlab;
namespace ex = branchlab::experiments;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "branchlab_tests" / name;
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::size_t line_count(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

}  // namespace

TEST(TrialSeed, StableAndDistinct) {
  EXPECT_EQ(ex::trial_seed(1, 10, 3), ex::trial_seed(1, 10, 3));
  EXPECT_NE(ex::trial_seed(1, 10, 3), ex::trial_seed(1, 10, 4));
  EXPECT_NE(ex::trial_seed(1, 10, 3), ex::trial_seed(1, 11, 3));
  EXPECT_NE(ex::trial_seed(1, 10, 3), ex::trial_seed(2, 10, 3));
}

TEST(Spec, JsonRoundTrip) {
  ex::ExperimentSpec s;
  s.name = "classify";
  s.M_values = {3, 5};
  s.seed = 99;
  s.train.mode = bl::TrainMode::SGD;
  s.classify.widths = {2, 6, 4};
  s.classify.output_gain = 0.3;
  s.decompose.hidden = 12;
  const ex::ExperimentSpec back = ex::spec_from_json(nlohmann::json::parse(ex::to_json(s).dump()), ex::ExperimentSpec{});
  EXPECT_EQ(ex::to_json(back), ex::to_json(s));
}

TEST(Sweep, SingleCellHasOneRecord) {
  ex::ExperimentSpec s;
  s.M_values = {4};
  s.trials = 1;
  s.output_dir = scratch("single_cell");
  const auto r = ex::run_toy_sweep(s);
  ASSERT_EQ(r.records.size(), 1u);
  ASSERT_EQ(r.aggregates.size(), 1u);
  EXPECT_EQ(r.aggregates[0].trials, 1u);
  EXPECT_EQ(line_count(s.output_dir / "results.csv"), 2u);
  EXPECT_TRUE(fs::exists(s.output_dir / "summary.json"));
  EXPECT_TRUE(fs::exists(s.output_dir / "success_rate.svg"));
}

TEST(Sweep, AggregatesMatchRecomputation) {
  ex::ExperimentSpec s;
  s.M_values = {2, 6};
  s.trials = 12;
  s.output_dir = scratch("aggregate");
  const auto r = ex::run_toy_sweep(s);
  for (const ex::MAggregate& a : r.aggregates) {
    double succ = 0, act = 0, sil = 0;
    std::size_t n = 0;
    for (const ex::TrialRecord& t : r.records)
      if (t.M == a.M) {
        ++n;
        succ += t.success;
        act += static_cast<double>(t.active);
        sil += static_cast<double>(t.silent);
        EXPECT_EQ(t.active + t.silent, t.M);
      }
    EXPECT_EQ(n, a.trials);
    EXPECT_DOUBLE_EQ(a.success_rate, succ / static_cast<double>(n));
    EXPECT_DOUBLE_EQ(a.mean_active, act / static_cast<double>(n));
    EXPECT_DOUBLE_EQ(a.mean_silent, sil / static_cast<double>(n));
  }
}

TEST(Sweep, IndependentOfWorkerCount) {
  ex::ExperimentSpec s;
  s.name = "toy2";
  s.M_values = {3, 8};
  s.trials = 8;
  s.jobs = 1;
  s.output_dir = scratch("jobs1");
  ex::run_toy_sweep(s);
  const std::string one = slurp(s.output_dir / "results.csv");
  s.jobs = 4;
  s.output_dir = scratch("jobs4");
  ex::run_toy_sweep(s);
  EXPECT_EQ(slurp(s.output_dir / "results.csv"), one);
}

TEST(Sweep, RejectsZeroBranches) {
  ex::ExperimentSpec s;
  s.M_values = {0, 2};
  s.output_dir = scratch("zero");
  EXPECT_THROW(ex::run_toy_sweep(s), std::invalid_argument);
}

TEST(ToyRun, WritesArtifactsAndSnapshots) {
  ex::ExperimentSpec s;
  s.name = "toy1";
  s.M_values = {10};
  s.seed = 3;
  s.output_dir = scratch("toy_run");
  const auto r = ex::run_toy(s);
  EXPECT_FALSE(r.result.trace.snapshots.empty());
  EXPECT_EQ(r.covariance.rows(), 10);
  EXPECT_EQ(r.split.active.size() + r.split.silent.size(), 10u);
  for (const char* f : {"results.csv", "trace.json", "model.json", "covariance.svg", "dynamics_x0.svg", "summary.json"})
    EXPECT_TRUE(fs::exists(s.output_dir / f)) << f;
  const auto back = bl::model_from_json(bl::io::read_json(s.output_dir / "model.json"));
  EXPECT_EQ(back, r.result.model);
}

TEST(Classify, SixteenBranchesSeparateBlobs) {
  ex::ExperimentSpec s;
  s.name = "classify";
  s.train = ex::classify_train_defaults();
  s.classify.hessian = false;
  s.output_dir = scratch("classify16");
  const auto r = ex::run_classify(s);
  EXPECT_GT(r.test_accuracy, 0.95);
  EXPECT_EQ(r.class_contribution.rows(), 16);
  EXPECT_EQ(r.confidence.rows(), 16);
  EXPECT_EQ(r.top_samples.size(), 16u);
  EXPECT_TRUE(fs::exists(s.output_dir / "class_contribution.svg"));
}

TEST(Classify, SingleBranchIsAPlainMlp) {
  ex::ExperimentSpec s;
  s.name = "classify";
  s.train = ex::classify_train_defaults();
  s.classify.branches = 1;
  s.classify.hessian = true;
  s.classify.hessian_samples = 32;
  s.output_dir = scratch("classify1");
  const auto r = ex::run_classify(s);
  EXPECT_GT(r.test_accuracy, 0.9);
  EXPECT_EQ(r.covariance.rows(), 1);
  EXPECT_EQ(r.split.active.size(), 1u);
  ASSERT_TRUE(r.hessian_final.has_value());
  EXPECT_EQ(r.hessian_final->off_block_ratio, 0.0);
}

TEST(Classify, ClassCountMismatch) {
  ex::ExperimentSpec s;
  s.classify.widths = {2, 8, 3};
  EXPECT_THROW(ex::run_classify(s), std::invalid_argument);
}

TEST(Classify, BranchPermutationPermutesTrainedBranches) {
  bl::BlobConfig blobs;
  blobs.per_class = 30;
  const bl::Dataset d = bl::gaussian_blobs(blobs);
  const auto arch = bl::BranchArch::mlp({2, 6, 4}, 0.01, true);
  const auto model = bl::init(arch, 4, 5, bl::ResidualMode::None, 0.1);
  const std::size_t perm[] = {2, 0, 3, 1};
  bl::TrainConfig cfg = ex::classify_train_defaults();
  cfg.max_steps = 200;
  const auto loss = bl::LossSpec::clamped_cross_entropy(4);
  const auto a = bl::train(model, d, loss, cfg);
  const auto b = bl::train(bl::permute_branches(model, perm), d, loss, cfg);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto pa = a.model.params().branch(perm[i]), pb = b.model.params().branch(i);
    for (std::size_t j = 0; j < pa.size(); ++j) EXPECT_NEAR(pa[j], pb[j], 1e-9);
  }
}

TEST(Decompose, ReconstructsImages) {
  ex::ExperimentSpec s;
  s.name = "decompose";
  s.train = ex::decompose_train_defaults();
  s.output_dir = scratch("decompose");
  const auto r = ex::run_decompose(s);
  EXPECT_LT(r.relative_error, 0.05);
  EXPECT_LT(r.max_sum_mismatch, 1e-12);
  EXPECT_EQ(r.alignment.rows(), 4);
  EXPECT_TRUE(fs::exists(s.output_dir / "decomposition_0.svg"));
}

TEST(Decompose, ConstantImagesLeaveBranchesSilent) {
  ex::ExperimentSpec s;
  s.name = "decompose";
  s.train = ex::decompose_train_defaults();
  s.decompose.constant_images = true;
  s.output_dir = scratch("decompose_const");
  const auto r = ex::run_decompose(s);
  EXPECT_LT(r.relative_error, 1e-12);
  EXPECT_TRUE(r.split.active.empty());
  EXPECT_LT(r.branch_norms.maxCoeff(), 1e-12);
}
