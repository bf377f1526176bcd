#pragma once

// Losses over the aggregated output f and their derivative dL/df, the factor
// shared by every branch's gradient.
//
// Batches are C x N matrices. For cross-entropy the target matrix holds the
// per-sample target distributions p(x), built from class labels by
// target_pdf().

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "branchlab/diffkit.hpp"

namespace branchlab {

enum class LossKind { SquaredL2, ClampedCrossEntropy };

struct LossSpec {
  LossKind kind = LossKind::SquaredL2;
  std::size_t classes = 1;

  static LossSpec squared_l2() { return {LossKind::SquaredL2, 1}; }
  static LossSpec clamped_cross_entropy(std::size_t classes) {
    if (classes < 2) throw std::invalid_argument("cross-entropy needs at least two classes");
    return {LossKind::ClampedCrossEntropy, classes};
  }

  bool operator==(const LossSpec&) const = default;
};

namespace losses {

inline Vector softmax(const Vector& f) {
  const Vector e = (f.array() - f.maxCoeff()).exp().matrix();
  return e / e.sum();
}

// Softmax of the +1 / -1 class-indicator vector. Never one-hot.
inline Vector target_pdf(std::size_t classes, std::size_t label) {
  if (label >= classes) throw std::out_of_range("class index out of range");
  Vector logits = Vector::Constant(static_cast<Eigen::Index>(classes), -1.0);
  logits(static_cast<Eigen::Index>(label)) = 1.0;
  return softmax(logits);
}

inline Matrix target_pdfs(std::size_t classes, std::span<const std::size_t> labels) {
  Matrix p(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(labels.size()));
  for (std::size_t j = 0; j < labels.size(); ++j) p.col(static_cast<Eigen::Index>(j)) = target_pdf(classes, labels[j]);
  return p;
}

// The +1 / -1 logit pattern whose softmax is target_pdf(classes, label).
inline Vector indicator_logits(std::size_t classes, std::size_t label) {
  Vector v = Vector::Constant(static_cast<Eigen::Index>(classes), -1.0);
  v(static_cast<Eigen::Index>(label)) = 1.0;
  return v;
}

namespace detail {
inline void check_dims(const Vector& f, const Vector& t) {
  if (f.size() != t.size()) throw std::invalid_argument("output and target dimensions differ");
}
}  // namespace detail

// Per-sample loss against a target vector (y for SquaredL2, p(x) for CE).
inline double loss(const LossSpec& spec, const Vector& f, const Vector& target) {
  detail::check_dims(f, target);
  if (spec.kind == LossKind::SquaredL2) return 0.5 * (target - f).squaredNorm();
  if (static_cast<std::size_t>(f.size()) != spec.classes) throw std::invalid_argument("class count mismatch");
  const Vector s = softmax(f);
  return -(target.array() * s.array().log()).sum();
}

inline double loss(const LossSpec& spec, const Vector& f, std::size_t label) {
  if (spec.kind != LossKind::ClampedCrossEntropy) throw std::invalid_argument("class labels need cross-entropy");
  if (static_cast<std::size_t>(f.size()) != spec.classes) throw std::invalid_argument("class count mismatch");
  return loss(spec, f, target_pdf(spec.classes, label));
}

// dL/df. SquaredL2: f - y. Cross-entropy: softmax(f) - p.
inline Vector collaborative_gradient(const LossSpec& spec, const Vector& f, const Vector& target) {
  detail::check_dims(f, target);
  if (spec.kind == LossKind::SquaredL2) return f - target;
  if (static_cast<std::size_t>(f.size()) != spec.classes) throw std::invalid_argument("class count mismatch");
  return softmax(f) - target;
}

inline Vector collaborative_gradient(const LossSpec& spec, const Vector& f, std::size_t label) {
  if (spec.kind != LossKind::ClampedCrossEntropy) throw std::invalid_argument("class labels need cross-entropy");
  return collaborative_gradient(spec, f, target_pdf(spec.classes, label));
}

// d²L/df², independent of the target for both losses.
inline Matrix output_hessian(const LossSpec& spec, const Vector& f) {
  if (spec.kind == LossKind::SquaredL2) return Matrix::Identity(f.size(), f.size());
  const Vector s = softmax(f);
  Matrix h = -s * s.transpose();
  h.diagonal() += s;
  return h;
}

// Mean over columns.
inline double batch_loss(const LossSpec& spec, const Matrix& f, const Matrix& targets) {
  if (f.rows() != targets.rows() || f.cols() != targets.cols()) throw std::invalid_argument("batch shape mismatch");
  if (f.cols() == 0) throw std::invalid_argument("empty batch");
  double acc = 0.0;
  for (Eigen::Index j = 0; j < f.cols(); ++j) acc += loss(spec, f.col(j), targets.col(j));
  return acc / static_cast<double>(f.cols());
}

// Records the mean batch loss on a tape. `targets` is C x N.
inline diffkit::NodeId record_loss(diffkit::Tape& tape, const LossSpec& spec, diffkit::NodeId f,
                                   diffkit::NodeId targets) {
  const double n = static_cast<double>(tape.value(f).cols());
  if (spec.kind == LossKind::SquaredL2) return tape.scale(tape.sum(tape.square(tape.sub(f, targets))), 0.5 / n);
  if (static_cast<std::size_t>(tape.value(f).rows()) != spec.classes) throw std::invalid_argument("class count mismatch");
  const auto log_s = tape.log(tape.softmax_columns(f));
  return tape.scale(tape.sum(tape.mul(log_s, targets)), -1.0 / n);
}

}  // namespace losses
}  // namespace branchlab
