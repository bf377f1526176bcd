#include <gtest/gtest.h>

#include <random>

#include "branchlab/speclab.hpp"
#include "branchlab/verify.hpp"

namespace bl = branchlab;
namespace sl = branchlab::speclab;
using bl::BranchArch;
using bl::BranchedModel;
using bl::LossSpec;
using bl::Matrix;

namespace {

BranchedModel perceptrons(std::vector<double> wb) {
  const std::size_t m = wb.size() / 2;
  return BranchedModel(BranchArch::scalar_perceptron(), bl::ParamStore(std::move(wb), m, 0));
}

sl::ResponseMatrix from_rows(const Matrix& F) { return {F, F.rowwise().norm()}; }

bl::Dataset random_regression(std::mt19937_64& rng, Eigen::Index d, Eigen::Index c, Eigen::Index n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  bl::Dataset data;
  data.inputs.x = Matrix::NullaryExpr(d, n, [&] { return normal(rng); });
  data.targets = Matrix::NullaryExpr(c, n, [&] { return normal(rng); });
  return data;
}

}  // namespace

TEST(Response, ToyOneHandRows) {
  const auto r = sl::response_matrix(perceptrons({1, 0, -1, 0}), bl::toy1());
  Matrix expected(2, 4);
  expected << -0.01, 0, 0, 1, 1, 0, 0, -0.01;
  EXPECT_TRUE(r.F.isApprox(expected, 1e-15));
  EXPECT_EQ(sl::response_matrix(perceptrons({0, 0, 0, 0}), bl::toy1()).F.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Response, ColumnSumsReproduceForward) {
  const auto model = bl::init(BranchArch::mlp({2, 3, 2}), 4, 8);
  std::mt19937_64 rng(1);
  const bl::Dataset d = random_regression(rng, 2, 2, 5);
  const auto r = sl::response_matrix(model, d);
  const Matrix f = bl::forward(model, d.inputs);
  for (Eigen::Index j = 0; j < 5; ++j)
    for (Eigen::Index c = 0; c < 2; ++c) EXPECT_NEAR(r.F.col(j * 2 + c).sum(), f(c, j), 1e-14);
}

TEST(Covariance, GramIdentities) {
  EXPECT_EQ(sl::covariance(from_rows(Matrix::Identity(2, 2))), Matrix::Identity(2, 2));
  Matrix orth(2, 4);
  orth << 1, 0, 2, 0, 0, 3, 0, 1;
  const Matrix c = sl::covariance(from_rows(orth));
  EXPECT_EQ(c(0, 1), 0.0);
  EXPECT_EQ(c(1, 0), 0.0);
  Matrix dup(3, 3);
  dup << 1, 2, 3, 0, 1, 0, 1, 2, 3;
  const Matrix d = sl::covariance(from_rows(dup));
  EXPECT_EQ(d(0, 0), d(2, 2));
  EXPECT_EQ(d(0, 0), d(0, 2));
}

TEST(Covariance, SymmetricPositiveSemidefinite) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    const Matrix F = Matrix::NullaryExpr(6, 4 + t, [&] { return normal(rng); });
    const Matrix c = sl::covariance(from_rows(F));
    EXPECT_LT((c - c.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_GE(Eigen::SelfAdjointEigenSolver<Matrix>(c).eigenvalues().minCoeff(), -1e-10);
  }
}

TEST(Covariance, PermutationPermutesRowsAndColumns) {
  const auto model = bl::init(BranchArch::scalar_perceptron(), 5, 2);
  const std::size_t perm[] = {4, 2, 0, 1, 3};
  const Matrix a = sl::covariance(sl::response_matrix(model, bl::toy2()));
  const Matrix b = sl::covariance(sl::response_matrix(bl::permute_branches(model, perm), bl::toy2()));
  for (Eigen::Index i = 0; i < 5; ++i)
    for (Eigen::Index j = 0; j < 5; ++j)
      EXPECT_EQ(b(i, j), a(static_cast<Eigen::Index>(perm[i]), static_cast<Eigen::Index>(perm[j])));
}

TEST(Correlation, UnitDiagonalZeroForSilentRows) {
  Matrix cov(3, 3);
  cov << 4, 2, 0, 2, 9, 0, 0, 0, 0;
  const Matrix r = sl::correlation(cov);
  EXPECT_DOUBLE_EQ(r(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(r(0, 1), 2.0 / 6.0);
  EXPECT_EQ(r(2, 2), 0.0);
}

TEST(Active, DefinitionExamples) {
  Matrix F = Matrix::Zero(3, 1);
  F << 10, 0.5, 2;
  const auto s = sl::active_branches(from_rows(F));
  EXPECT_EQ(s.active, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(s.silent, (std::vector<std::size_t>{1}));
  EXPECT_EQ(sl::active_branches(from_rows(Matrix::Constant(1, 3, 0.2))).active.size(), 1u);
  EXPECT_EQ(sl::active_branches(from_rows(Matrix::Ones(3, 2)), 0.99).active.size(), 3u);
  EXPECT_EQ(sl::active_branches(from_rows(Matrix::Zero(3, 2))).silent.size(), 3u);
}

TEST(Active, ScaleInvariantAndThresholdChecked) {
  Matrix F(4, 3);
  F << 1, 2, 3, 0.1, 0, 0, 0, 0.5, 0.5, 4, 4, 4;
  const auto a = sl::active_branches(from_rows(F));
  const auto b = sl::active_branches(from_rows(F * 1e6));
  EXPECT_EQ(a.active, b.active);
  EXPECT_THROW(sl::active_branches(from_rows(F), 0.0), std::invalid_argument);
  EXPECT_THROW(sl::active_branches(from_rows(F), 1.0), std::invalid_argument);
}

TEST(Factorize, ScalarPerceptronHandCase) {
  const double xs[] = {-1.0}, ys[] = {1.0};
  const auto model = perceptrons({1, 0});
  const auto fg = sl::factorize_gradient(model, LossSpec::squared_l2(), bl::regression_dataset(xs, ys), 0);
  const double f = -0.01;
  EXPECT_DOUBLE_EQ(fg.collaborative(0), f - 1.0);
  EXPECT_NEAR(fg.assembled[0](0), (f - 1.0) * 0.01 * -1.0, 1e-15);
  EXPECT_NEAR(fg.assembled[0](1), (f - 1.0) * 0.01, 1e-15);
  EXPECT_EQ(fg.distributive[0].rows(), 1);
  EXPECT_EQ(fg.distributive[0].cols(), 2);
}

TEST(Factorize, PerfectFitGivesZeroAssembledGradient) {
  const auto model = perceptrons({1, 0, 0.5, 0.25});
  bl::Dataset d = bl::toy2();
  d.targets = bl::forward(model, d.inputs);
  for (std::size_t j = 0; j < 4; ++j) {
    const auto fg = sl::factorize_gradient(model, LossSpec::squared_l2(), d, j);
    EXPECT_EQ(fg.collaborative.norm(), 0.0);
    for (const auto& a : fg.assembled) EXPECT_EQ(a.norm(), 0.0);
  }
}

TEST(Factorize, IdentityHoldsOnRandomTriples) {
  for (std::uint64_t seed = 0; seed < 40; ++seed)
    EXPECT_LT(bl::verify::factorization_mismatch(bl::verify::random_triple(seed)), 1e-8) << "seed " << seed;
}

TEST(Factorize, SampleIndexChecked) {
  EXPECT_THROW(sl::factorize_gradient(perceptrons({1, 0}), LossSpec::squared_l2(), bl::toy1(), 4), std::out_of_range);
}

TEST(Hessian, TwoBranchQuadratic) {
  // v_k = w_k x with x = 1, y = 1: L = (w1 + w2 - 1)^2 / 2.
  const BranchedModel model(BranchArch::mlp({1, 1}, 0.01, false, false), bl::ParamStore({0.3, -0.8}, 2, 0));
  const double xs[] = {1.0}, ys[] = {1.0};
  const auto h = sl::hessian(model, LossSpec::squared_l2(), bl::regression_dataset(xs, ys));
  EXPECT_TRUE(h.H.isApprox(Matrix::Ones(2, 2), 1e-6));
  EXPECT_LT((h.H - Matrix::Ones(2, 2)).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_NEAR(h.off_block_ratio, std::sqrt(0.5), 1e-6);
}

TEST(Hessian, SymmetricAndBounded) {
  for (std::uint64_t seed = 1; seed < 12; ++seed) {
    const auto t = bl::verify::random_triple(seed);
    const auto h = sl::hessian(t.model, t.loss, t.data);
    EXPECT_LT(h.asymmetry, 1e-4) << t.label;
    EXPECT_GE(h.off_block_ratio, 0.0);
    EXPECT_LE(h.off_block_ratio, 1.0);
  }
}

TEST(Hessian, InterBranchBlocksMatchDirectEvaluation) {
  for (std::uint64_t seed = 1; seed < 12; ++seed) {
    const auto t = bl::verify::random_triple(seed);
    if (t.model.branches() < 2) continue;
    const auto h = sl::hessian(t.model, t.loss, t.data);
    const auto& s = h.block_slices;
    const Matrix direct = sl::inter_branch_block(t.model, t.loss, t.data, 0, 1);
    const Matrix fd = h.H.block(static_cast<Eigen::Index>(s[0].begin), static_cast<Eigen::Index>(s[1].begin),
                                static_cast<Eigen::Index>(s[0].size()), static_cast<Eigen::Index>(s[1].size()));
    EXPECT_LT((direct - fd).cwiseAbs().maxCoeff(), 1e-6 * std::max(1.0, direct.cwiseAbs().maxCoeff())) << t.label;
  }
}

TEST(Hessian, ZeroJacobianBranchDecouples) {
  // Branch 1 has both hidden units switched off on all (positive) inputs and alpha = 0.
  const BranchArch arch = BranchArch::mlp({1, 2, 1}, 0.0, false, false);
  const BranchedModel model(arch, bl::ParamStore({0.7, 1.2, 0.5, -0.9, -2.0, -3.0, 1.0, 1.0}, 2, 0));
  const double xs[] = {0.5, 1.0, 2.0}, ys[] = {0.3, -0.2, 1.0};
  const auto h = sl::hessian(model, LossSpec::squared_l2(), bl::regression_dataset(xs, ys));
  const double tol = 10.0 * h.step * h.step;
  EXPECT_LE(h.H.block(0, 4, 4, 4).cwiseAbs().maxCoeff(), tol);
  EXPECT_LE(h.H.block(4, 0, 4, 4).cwiseAbs().maxCoeff(), tol);
  EXPECT_GT(h.H.block(0, 0, 4, 4).cwiseAbs().maxCoeff(), 0.01);
}

TEST(Hessian, PermutationPermutesBlocks) {
  const auto t = bl::verify::random_triple(6);
  const std::size_t m = t.model.branches();
  std::vector<std::size_t> perm(m);
  for (std::size_t i = 0; i < m; ++i) perm[i] = m - 1 - i;
  const auto a = sl::hessian(t.model, t.loss, t.data);
  const auto b = sl::hessian(bl::permute_branches(t.model, perm), t.loss, t.data);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      EXPECT_NEAR(b.per_pair_block_norms(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)),
                  a.per_pair_block_norms(static_cast<Eigen::Index>(perm[i]), static_cast<Eigen::Index>(perm[j])), 1e-6);
}

TEST(Hessian, GuardsAndRestriction) {
  const auto big = bl::init(BranchArch::mlp({2, 40, 4}), 30, 0);
  bl::BlobConfig blobs;
  blobs.per_class = 2;
  EXPECT_THROW(sl::hessian(big, LossSpec::clamped_cross_entropy(4), bl::gaussian_blobs(blobs)), std::invalid_argument);
  Matrix H = Matrix::Identity(4, 4);
  H(0, 2) = H(2, 0) = 1.0;
  const auto r = sl::block_metrics(H, {{0, 2}, {2, 4}});
  EXPECT_NEAR(r.off_block_ratio, std::sqrt(2.0 / 6.0), 1e-15);
  EXPECT_DOUBLE_EQ(r.max_entry_ratio, 1.0);
  const std::size_t first[] = {0};
  const auto sub = sl::restrict_hessian(r, first);
  EXPECT_EQ(sub.H, Matrix::Ones(2, 2));
}

TEST(Equilibrium, FlagsPerfectFitAndStaysFinite) {
  const auto model = perceptrons({1, 0, 0.5, 0.25});
  bl::Dataset d = bl::toy2();
  d.targets = bl::forward(model, d.inputs);
  const auto rep = sl::equilibrium_diagnostic(model, LossSpec::squared_l2(), d);
  EXPECT_EQ(rep.perfect_fit_samples, 4u);
  EXPECT_FALSE(rep.mean_abs_cosine.has_value());

  const auto t = bl::verify::random_triple(2);
  const auto r2 = sl::equilibrium_diagnostic(t.model, t.loss, t.data);
  EXPECT_EQ(r2.entries.size(), t.model.branches() * static_cast<std::size_t>(t.data.size()));
  ASSERT_TRUE(r2.mean_abs_cosine.has_value());
  EXPECT_TRUE(std::isfinite(*r2.mean_abs_cosine));
  EXPECT_GE(r2.zero_column_fraction, 0.0);
  EXPECT_LE(r2.zero_column_fraction, 1.0);
}
