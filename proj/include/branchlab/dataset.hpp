#pragma once

// Paired inputs and targets, plus the fixed and synthetic datasets used by the
// experiments.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "branchlab/branchnet.hpp"
#include "branchlab/losses.hpp"

namespace branchlab {

// `targets` is C x N: regression targets for SquaredL2, target distributions
// for cross-entropy (then `labels` holds the class indices).
struct Dataset {
  Inputs inputs;
  Matrix targets;
  std::vector<std::size_t> labels;

  Eigen::Index size() const { return inputs.size(); }

  Dataset select(std::span<const std::size_t> columns) const {
    Dataset d;
    d.inputs = inputs.select(columns);
    d.targets.resize(targets.rows(), static_cast<Eigen::Index>(columns.size()));
    for (std::size_t j = 0; j < columns.size(); ++j) {
      d.targets.col(static_cast<Eigen::Index>(j)) = targets.col(static_cast<Eigen::Index>(columns[j]));
      if (!labels.empty()) d.labels.push_back(labels[columns[j]]);
    }
    return d;
  }

  void validate(const LossSpec& spec) const {
    if (size() == 0) throw std::invalid_argument("dataset is empty");
    if (targets.cols() != size()) throw std::invalid_argument("targets and inputs disagree on sample count");
    if (spec.kind == LossKind::ClampedCrossEntropy) {
      if (static_cast<std::size_t>(targets.rows()) != spec.classes)
        throw std::invalid_argument("class count mismatch between data and loss");
    }
  }
};

inline Dataset regression_dataset(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("x and y lengths differ");
  Dataset d;
  d.inputs.x = Eigen::Map<const Matrix>(xs.data(), 1, static_cast<Eigen::Index>(xs.size()));
  d.targets = Eigen::Map<const Matrix>(ys.data(), 1, static_cast<Eigen::Index>(ys.size()));
  return d;
}

inline Dataset classification_dataset(Matrix x, std::vector<std::size_t> labels, std::size_t classes) {
  if (static_cast<std::size_t>(x.cols()) != labels.size()) throw std::invalid_argument("label count mismatch");
  Dataset d;
  d.inputs.x = std::move(x);
  d.targets = losses::target_pdfs(classes, labels);
  d.labels = std::move(labels);
  return d;
}

// 1-D XOR-like problem.
inline Dataset toy1() {
  const double xs[] = {-1.0, 0.0, 0.0, 1.0};
  const double ys[] = {1.0, 0.5, 0.5, 1.0};
  return regression_dataset(xs, ys);
}

// 1-D regression problem.
inline Dataset toy2() {
  const double xs[] = {-1.0, 0.0, 1.0, 2.0};
  const double ys[] = {1.0, 0.25, 0.5, 0.75};
  return regression_dataset(xs, ys);
}

struct BlobConfig {
  std::size_t classes = 4;
  std::size_t per_class = 200;
  double radius = 1.0;  // class centers sit on a circle of this radius
  double spread = 0.25; // isotropic standard deviation
  std::uint64_t seed = 0;
};

// Gaussian blobs in 2-D, samples interleaved by class.
inline Dataset gaussian_blobs(const BlobConfig& cfg) {
  if (cfg.classes < 2 || cfg.per_class == 0) throw std::invalid_argument("blobs need >= 2 classes and samples");
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, cfg.spread);
  const std::size_t n = cfg.classes * cfg.per_class;
  Matrix x(2, static_cast<Eigen::Index>(n));
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < cfg.per_class; ++i) {
    for (std::size_t c = 0; c < cfg.classes; ++c) {
      const std::size_t j = i * cfg.classes + c;
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(cfg.classes) +
                           std::numbers::pi / 4.0;
      x(0, static_cast<Eigen::Index>(j)) = cfg.radius * std::cos(angle) + noise(rng);
      x(1, static_cast<Eigen::Index>(j)) = cfg.radius * std::sin(angle) + noise(rng);
      labels[j] = c;
    }
  }
  return classification_dataset(std::move(x), std::move(labels), cfg.classes);
}

struct ImageConfig {
  std::size_t count = 64;
  std::size_t side = 16;
  std::size_t dots = 4;
  std::uint64_t seed = 0;
};

// One synthetic image split into the parts it was built from.
struct ImageParts {
  Matrix smooth, texture, dots;  // side x side each
};

// Sum of a smooth ramp, a periodic texture and sparse dots, each with random
// parameters. Returns flattened images (side*side x count), row-major pixels.
inline Matrix synthetic_images(const ImageConfig& cfg, std::vector<ImageParts>* parts = nullptr) {
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto s = static_cast<Eigen::Index>(cfg.side);
  Matrix out(s * s, static_cast<Eigen::Index>(cfg.count));
  for (std::size_t n = 0; n < cfg.count; ++n) {
    ImageParts p{Matrix::Zero(s, s), Matrix::Zero(s, s), Matrix::Zero(s, s)};
    const double gx = unit(rng) - 0.5, gy = unit(rng) - 0.5, base = 0.3 + 0.4 * unit(rng);
    const double freq = 2.0 + std::floor(3.0 * unit(rng)), phase = 2.0 * std::numbers::pi * unit(rng);
    const double amp = 0.1 + 0.1 * unit(rng);
    const bool vertical = unit(rng) < 0.5;
    for (Eigen::Index r = 0; r < s; ++r) {
      for (Eigen::Index c = 0; c < s; ++c) {
        const double u = static_cast<double>(c) / static_cast<double>(s - 1);
        const double v = static_cast<double>(r) / static_cast<double>(s - 1);
        p.smooth(r, c) = base + 0.5 * (gx * (u - 0.5) + gy * (v - 0.5));
        const double t = vertical ? u : v;
        p.texture(r, c) = amp * std::sin(2.0 * std::numbers::pi * freq * t + phase);
      }
    }
    std::uniform_int_distribution<Eigen::Index> pos(0, s - 1);
    for (std::size_t d = 0; d < cfg.dots; ++d) p.dots(pos(rng), pos(rng)) = 0.5 + 0.5 * unit(rng);
    const RowMajorMatrix img = p.smooth + p.texture + p.dots;
    out.col(static_cast<Eigen::Index>(n)) = Eigen::Map<const Vector>(img.data(), s * s);
    if (parts) parts->push_back(std::move(p));
  }
  return out;
}

}  // namespace branchlab
