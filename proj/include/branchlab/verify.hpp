#pragma once

// Seeded identity checks shared by the `verify` subcommand and the test
// suites: AD gradient against central differences, the collaborative x
// distributive factorization, and the diffusion reconstruction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "branchlab/diffusion.hpp"
#include "branchlab/objective.hpp"
#include "branchlab/speclab.hpp"

namespace branchlab::verify {

struct Triple {
  BranchedModel model;
  LossSpec loss;
  Dataset data;
  std::string label;
};

// Cycles through scalar perceptron / L2, MLP / L2, clamped MLP / cross-entropy
// and unclamped MLP / cross-entropy; sizes and values come from the seed.
inline Triple random_triple(std::uint64_t seed) {
  std::mt19937_64 rng(detail::branch_stream(seed, 0x7f));
  const auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t variant = seed % 4;
  const std::size_t m = pick(1, 4), n = pick(1, 8);
  Triple t;
  if (variant == 0) {
    t.model = init(BranchArch::scalar_perceptron(), m, rng());
    t.loss = LossSpec::squared_l2();
    std::vector<double> xs(n), ys(n);
    for (std::size_t j = 0; j < n; ++j) xs[j] = 2.0 * normal(rng), ys[j] = normal(rng);
    t.data = regression_dataset(xs, ys);
    t.label = "scalar/l2";
    return t;
  }
  const std::size_t d = pick(1, 3), hidden = pick(2, 6);
  const std::size_t c = variant == 1 ? pick(1, 3) : pick(2, 4);
  const bool clamp = variant == 2;
  t.model = init(BranchArch::mlp({d, hidden, c}, 0.01, clamp), m, rng(), ResidualMode::None, clamp ? 0.5 : 1.0);
  Matrix x(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = normal(rng);
  if (variant == 1) {
    t.loss = LossSpec::squared_l2();
    t.data.inputs.x = x;
    t.data.targets.resize(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < t.data.targets.size(); ++i) t.data.targets(i) = normal(rng);
    t.label = "mlp/l2";
  } else {
    t.loss = LossSpec::clamped_cross_entropy(c);
    std::vector<std::size_t> labels(n);
    for (std::size_t& y : labels) y = pick(0, c - 1);
    t.data = classification_dataset(x, labels, c);
    t.label = clamp ? "mlp+clamp/ce" : "mlp/ce";
  }
  return t;
}

// ||g_ad - g_fd|| / max(||g_ad||, ||g_fd||), or the absolute gap when both
// are tiny.
inline double gradient_relative_error(const Triple& t, double h = 1e-5) {
  const diffkit::GradientVector ad = loss_gradient(t.model, t.loss, t.data);
  const diffkit::GradientVector fd = diffkit::finite_diff_gradient(t.model, t.loss, t.data, h);
  double diff = 0.0;
  for (std::size_t i = 0; i < ad.entries().size(); ++i) diff += std::pow(ad.entries()[i] - fd.entries()[i], 2);
  const double scale = std::max({ad.norm(), fd.norm(), 1e-8});
  return std::sqrt(diff) / scale;
}

// Largest per-entry gap between (grad v_k)^T D_collab and the direct per-sample
// gradient over every sample of the triple.
inline double factorization_mismatch(const Triple& t) {
  double worst = 0.0;
  for (std::size_t j = 0; j < static_cast<std::size_t>(t.data.size()); ++j)
    worst = std::max(worst, speclab::factorize_gradient(t.model, t.loss, t.data, j,
                                                        std::numeric_limits<double>::infinity())
                                .max_abs_mismatch);
  return worst;
}

struct ReconstructionCheck {
  double reconstruction_error = 0.0;  // ||x - (sum phi + R)||_inf / ||x||_inf
  double residual_error = 0.0;        // ||R - (u^M + t_M p(u^M))||_inf / ||x||_inf
};

// Random 1-D signal or 2-D image, random operator, step and band count.
inline ReconstructionCheck reconstruction_check(std::uint64_t seed) {
  std::mt19937_64 rng(detail::branch_stream(seed, 0xd1f));
  const auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  std::normal_distribution<double> normal(0.0, 1.0);
  const bool image = seed % 2 == 1;
  const Matrix x = Matrix::NullaryExpr(image ? pick(2, 12) : 1, pick(3, 40), [&] { return normal(rng); });
  const diffusion::SmoothingOperator p = seed % 3 == 2
                                             ? diffusion::SmoothingOperator::box_blur_residual(pick(1, 2))
                                             : diffusion::SmoothingOperator::laplacian(0.5 + std::uniform_real_distribution<double>(0.0, 1.0)(rng));
  const double bound = std::min(p.max_stable_dt(x), 1.0);
  const double dt = bound * std::uniform_real_distribution<double>(0.1, 1.0)(rng);
  const auto bands = static_cast<std::size_t>(pick(1, 8));
  const diffusion::DiffusionDecomposition dec = diffusion::diffuse(x, p, dt, bands);

  Matrix u = x;
  for (std::size_t n = 0; n < bands; ++n) u = u - dt * p.apply(u);
  const Matrix r = u + static_cast<double>(bands) * dt * p.apply(u);

  const double scale = x.cwiseAbs().maxCoeff();
  return {(x - dec.reconstruction()).cwiseAbs().maxCoeff() / scale, (dec.R - r).cwiseAbs().maxCoeff() / scale};
}

}  // namespace branchlab::verify
