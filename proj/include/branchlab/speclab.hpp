#pragma once

// Specialization measurements: branch responses and their Gram matrix,
// active/silent split, the distributive x collaborative gradient
// factorization, finite-difference Hessians with per-branch block metrics,
// and the equilibrium orthogonality diagnostic.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "branchlab/errors.hpp"
#include "branchlab/objective.hpp"

namespace branchlab::speclab {

// F(i, j * C + c) = v_i(x_j)_c.
struct ResponseMatrix {
  Matrix F;
  Vector branch_norms;
};

inline ResponseMatrix response_matrix(const BranchedModel& model, const Inputs& inputs) {
  const std::vector<Matrix> outs = forward_all(model, inputs);
  const auto m = static_cast<Eigen::Index>(outs.size());
  const Eigen::Index c = outs.front().rows(), n = outs.front().cols();
  ResponseMatrix r{Matrix(m, n * c), Vector(m)};
  for (Eigen::Index i = 0; i < m; ++i) {
    // Column-major storage of a C x N block is exactly the j * C + c order.
    r.F.row(i) = Eigen::Map<const Eigen::RowVectorXd>(outs[static_cast<std::size_t>(i)].data(), n * c);
    r.branch_norms(i) = r.F.row(i).norm();
  }
  return r;
}

inline ResponseMatrix response_matrix(const BranchedModel& model, const Dataset& data) {
  return response_matrix(model, data.inputs);
}

// Uncentered F F^T.
inline Matrix covariance(const ResponseMatrix& r) {
  if (r.F.size() == 0) throw std::invalid_argument("empty response matrix");
  return r.F * r.F.transpose();
}

// Mean-centered (per branch, across samples) covariance, normalized by N.
inline Matrix centered_covariance(const ResponseMatrix& r) {
  if (r.F.size() == 0) throw std::invalid_argument("empty response matrix");
  const Matrix centered = r.F.colwise() - r.F.rowwise().mean();
  return centered * centered.transpose() / static_cast<double>(r.F.cols());
}

// cov(i, j) / sqrt(cov(i, i) cov(j, j)); rows of zero variance map to 0.
inline Matrix correlation(const Matrix& cov) {
  Matrix out = Matrix::Zero(cov.rows(), cov.cols());
  for (Eigen::Index i = 0; i < cov.rows(); ++i)
    for (Eigen::Index j = 0; j < cov.cols(); ++j) {
      const double d = std::sqrt(cov(i, i) * cov(j, j));
      if (d > 0.0) out(i, j) = cov(i, j) / d;
    }
  return out;
}

struct ActiveSplit {
  std::vector<std::size_t> active;
  std::vector<std::size_t> silent;
};

// Active: row norm >= threshold_frac * max row norm. An all-zero F is all silent.
inline ActiveSplit active_branches(const ResponseMatrix& r, double threshold_frac = 0.10) {
  if (!(threshold_frac > 0.0 && threshold_frac < 1.0)) throw std::invalid_argument("threshold must lie in (0, 1)");
  ActiveSplit s;
  const double max_norm = r.branch_norms.size() ? r.branch_norms.maxCoeff() : 0.0;
  for (Eigen::Index i = 0; i < r.branch_norms.size(); ++i) {
    const bool on = max_norm > 0.0 && r.branch_norms(i) >= threshold_frac * max_norm;
    (on ? s.active : s.silent).push_back(static_cast<std::size_t>(i));
  }
  return s;
}

// ---- gradient factorization ---------------------------------------------

struct FactorizedGradient {
  Vector collaborative;               // dL/d(branch sum), C
  std::vector<Matrix> distributive;   // per branch, C x |theta_k|: Jacobian of v_k
  std::vector<Vector> assembled;      // per branch, distributive^T * collaborative
  diffkit::GradientVector direct;     // AD gradient of the per-sample loss
  double max_abs_mismatch = 0.0;
};

namespace detail {

// Derivative mask of the output clamp (1 on [-1, 1], else 0), or all ones.
inline Vector clamp_mask(const BranchedModel& model, const Vector& pre_clamp) {
  if (!model.arch().output_clamp) return Vector::Ones(pre_clamp.size());
  return pre_clamp.unaryExpr([](double z) { return (z >= -1.0 && z <= 1.0) ? 1.0 : 0.0; });
}

inline Dataset single_sample(const Dataset& data, std::size_t j) {
  const std::size_t cols[] = {j};
  return data.select(cols);
}

}  // namespace detail

// Factorizes the per-sample gradient of sample j into the shared collaborative
// factor and per-branch Jacobians, and checks the product against the direct
// AD gradient. Throws ConsistencyError beyond `tolerance` (absolute).
inline FactorizedGradient factorize_gradient(const BranchedModel& model, const LossSpec& spec, const Dataset& data,
                                             std::size_t j, double tolerance = 1e-6) {
  if (j >= static_cast<std::size_t>(data.size())) throw std::out_of_range("sample index out of range");
  const Dataset one = detail::single_sample(data, j);
  Objective obj(model, spec, one);
  FactorizedGradient out;
  out.direct = obj.gradient();

  const Vector f = obj.output().col(0);
  const Vector target = one.targets.col(0);
  out.collaborative = losses::collaborative_gradient(spec, f, target).cwiseProduct(
      detail::clamp_mask(model, obj.pre_clamp().col(0)));

  const auto c = out.collaborative.size();
  diffkit::Tape& tape = obj.tape();
  for (std::size_t k = 0; k < model.branches(); ++k) {
    const Slice s = model.params().slices()[k];
    Matrix jac(c, static_cast<Eigen::Index>(s.size()));
    for (Eigen::Index row = 0; row < c; ++row) {
      Matrix seed = Matrix::Zero(c, 1);
      seed(row, 0) = 1.0;
      const std::vector<double> g = tape.vjp(obj.graph().branch_out[k], seed);
      for (std::size_t i = 0; i < s.size(); ++i) jac(row, static_cast<Eigen::Index>(i)) = g[s.begin + i];
    }
    Vector prod = jac.transpose() * out.collaborative;
    const auto direct = out.direct.branch(k);
    for (std::size_t i = 0; i < s.size(); ++i)
      out.max_abs_mismatch = std::max(out.max_abs_mismatch, std::abs(prod(static_cast<Eigen::Index>(i)) - direct[i]));
    out.distributive.push_back(std::move(jac));
    out.assembled.push_back(std::move(prod));
  }
  if (!(out.max_abs_mismatch <= tolerance))
    throw ConsistencyError("factorized gradient disagrees with direct gradient by " +
                           std::to_string(out.max_abs_mismatch));
  return out;
}

// ---- Hessian ---------------------------------------------------------------

inline constexpr std::size_t kMaxHessianParams = 5000;

struct HessianReport {
  Matrix H;
  std::vector<Slice> block_slices;
  double off_block_ratio = 0.0;     // ||off-diagonal blocks||_F / ||H||_F
  double max_entry_ratio = 0.0;     // max |off-block entry| / max |entry|
  Matrix per_pair_block_norms;      // M x M Frobenius norms
  double asymmetry = 0.0;           // ||H - H^T||_F / ||H||_F before symmetrizing
  double step = 0.0;
};

// Fills the block metrics of an already assembled Hessian.
inline HessianReport block_metrics(Matrix H, std::vector<Slice> slices) {
  if (!is_partition(slices, static_cast<std::size_t>(H.rows())) || H.rows() != H.cols())
    throw std::invalid_argument("block slices must partition a square Hessian");
  HessianReport r;
  const auto m = static_cast<Eigen::Index>(slices.size());
  r.per_pair_block_norms = Matrix::Zero(m, m);
  double off_sq = 0.0, off_max = 0.0;
  for (Eigen::Index k = 0; k < m; ++k) {
    for (Eigen::Index l = 0; l < m; ++l) {
      const Slice a = slices[static_cast<std::size_t>(k)], b = slices[static_cast<std::size_t>(l)];
      const auto block = H.block(static_cast<Eigen::Index>(a.begin), static_cast<Eigen::Index>(b.begin),
                                 static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(b.size()));
      const double nrm = block.norm();
      r.per_pair_block_norms(k, l) = nrm;
      if (k != l) {
        off_sq += nrm * nrm;
        if (block.size()) off_max = std::max(off_max, block.cwiseAbs().maxCoeff());
      }
    }
  }
  const double total = H.norm();
  const double total_max = H.size() ? H.cwiseAbs().maxCoeff() : 0.0;
  r.off_block_ratio = total > 0.0 ? std::sqrt(off_sq) / total : 0.0;
  r.max_entry_ratio = total_max > 0.0 ? off_max / total_max : 0.0;
  r.H = std::move(H);
  r.block_slices = std::move(slices);
  return r;
}

inline double default_hessian_step(std::span<const double> theta) {
  double inf = 0.0;
  for (double t : theta) inf = std::max(inf, std::abs(t));
  return 1e-4 * std::max(1.0, inf);
}

// Column i is (grad L(theta + h e_i) - grad L(theta - h e_i)) / 2h of the mean
// loss over `data`; the result is symmetrized. With `freeze_pieces`, clamp and
// leaky-relu nodes stay on the linear piece active at theta, which yields the
// curvature of the current piece even when a kink lies within h.
inline HessianReport hessian(const BranchedModel& model, const LossSpec& spec, const Dataset& data,
                             std::optional<double> step = std::nullopt, bool freeze_pieces = true) {
  const std::size_t p = model.params().size();
  if (p > kMaxHessianParams)
    throw std::invalid_argument("too many parameters for a dense Hessian (" + std::to_string(p) + ")");
  const double h = step.value_or(default_hessian_step(model.params().values()));
  if (!(h > 0.0)) throw std::invalid_argument("Hessian step must be positive");
  Objective obj(model, spec, data);
  if (freeze_pieces) obj.tape().freeze_pieces();
  std::vector<double> theta(model.params().values().begin(), model.params().values().end());
  Matrix H(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p));
  for (std::size_t i = 0; i < p; ++i) {
    const double saved = theta[i];
    theta[i] = saved + h;
    obj.evaluate(theta);
    const diffkit::GradientVector up = obj.gradient();
    theta[i] = saved - h;
    obj.evaluate(theta);
    const diffkit::GradientVector down = obj.gradient();
    theta[i] = saved;
    for (std::size_t r = 0; r < p; ++r) {
      const double v = (up[r] - down[r]) / (2.0 * h);
      if (!std::isfinite(v)) throw NonFiniteError("non-finite Hessian entry in column " + std::to_string(i), i);
      H(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) = v;
    }
  }
  const double nrm = H.norm();
  const double asym = nrm > 0.0 ? (H - H.transpose()).norm() / nrm : 0.0;
  Matrix sym = 0.5 * (H + H.transpose());
  HessianReport r = block_metrics(std::move(sym), model.params().slices());
  r.asymmetry = asym;
  r.step = h;
  return r;
}

// Sub-Hessian over the given per-branch local indices (same set for every
// branch), with block metrics recomputed.
inline HessianReport restrict_hessian(const HessianReport& full, std::span<const std::size_t> local) {
  std::vector<std::size_t> global;
  std::vector<Slice> slices;
  for (const Slice& s : full.block_slices) {
    const std::size_t begin = global.size();
    for (std::size_t i : local) {
      if (i >= s.size()) throw std::out_of_range("local index outside branch slice");
      global.push_back(s.begin + i);
    }
    slices.push_back({begin, global.size()});
  }
  const auto n = static_cast<Eigen::Index>(global.size());
  Matrix sub(n, n);
  for (Eigen::Index a = 0; a < n; ++a)
    for (Eigen::Index b = 0; b < n; ++b)
      sub(a, b) = full.H(static_cast<Eigen::Index>(global[static_cast<std::size_t>(a)]),
                         static_cast<Eigen::Index>(global[static_cast<std::size_t>(b)]));
  HessianReport r = block_metrics(std::move(sub), std::move(slices));
  r.asymmetry = full.asymmetry;
  r.step = full.step;
  return r;
}

// Local indices of the first layer (weights and bias) of one branch.
inline std::vector<std::size_t> first_layer_indices(const BranchArch& arch) {
  const std::size_t n = arch.kind == BranchKind::ScalarPerceptron ? 2 : arch.layer_offset(1);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

// Inter-branch block (k, l), k != l, evaluated directly as
// mean_x J_k(x)^T S(x) J_l(x), with J the branch Jacobians and S the loss
// curvature with respect to the branch sum. Mixed second derivatives of v_k
// vanish across branches, so this is the whole block.
inline Matrix inter_branch_block(const BranchedModel& model, const LossSpec& spec, const Dataset& data,
                                 std::size_t k, std::size_t l) {
  if (k == l) throw std::invalid_argument("inter-branch block needs k != l");
  const Slice sk = model.params().slices().at(k), sl = model.params().slices().at(l);
  Matrix acc = Matrix::Zero(static_cast<Eigen::Index>(sk.size()), static_cast<Eigen::Index>(sl.size()));
  for (Eigen::Index j = 0; j < data.size(); ++j) {
    const FactorizedGradient fg = factorize_gradient(model, spec, data, static_cast<std::size_t>(j));
    const Dataset one = detail::single_sample(data, static_cast<std::size_t>(j));
    Objective obj(model, spec, one);
    const Vector mask = detail::clamp_mask(model, obj.pre_clamp().col(0));
    const Matrix S = mask.asDiagonal() * losses::output_hessian(spec, obj.output().col(0)) * mask.asDiagonal();
    acc += fg.distributive[k].transpose() * S * fg.distributive[l];
  }
  return acc / static_cast<double>(data.size());
}

// ---- equilibrium diagnostic ------------------------------------------------

struct EquilibriumEntry {
  std::size_t branch = 0;
  std::size_t sample = 0;
  bool perfect_fit = false;            // collaborative factor vanishes
  double zero_column_fraction = 0.0;   // Jacobian columns with negligible norm
  std::size_t nonzero_columns = 0;
  std::optional<double> mean_abs_cosine;  // over non-zero columns, C >= 2 only
};

struct EquilibriumReport {
  std::vector<EquilibriumEntry> entries;
  double zero_column_fraction = 0.0;    // over all (branch, sample) pairs
  std::optional<double> mean_abs_cosine;  // over all non-zero columns of non-perfect samples
  std::size_t perfect_fit_samples = 0;
};

// For each (branch, sample): which Jacobian columns vanish, and the angle of
// the remaining ones to the collaborative factor. A column is zero when its
// norm is below 1e-6 of the largest column norm seen anywhere.
inline EquilibriumReport equilibrium_diagnostic(const BranchedModel& model, const LossSpec& spec,
                                                const Dataset& data) {
  std::vector<FactorizedGradient> per_sample;
  double max_col = 0.0;
  for (Eigen::Index j = 0; j < data.size(); ++j) {
    per_sample.push_back(factorize_gradient(model, spec, data, static_cast<std::size_t>(j)));
    for (const Matrix& jac : per_sample.back().distributive)
      if (jac.size()) max_col = std::max(max_col, jac.colwise().norm().maxCoeff());
  }
  const double tol = 1e-6 * max_col;
  EquilibriumReport rep;
  double zero_acc = 0.0, cos_acc = 0.0;
  std::size_t cos_count = 0;
  for (std::size_t j = 0; j < per_sample.size(); ++j) {
    const FactorizedGradient& fg = per_sample[j];
    const double collab_norm = fg.collaborative.norm();
    const bool perfect = collab_norm < 1e-12;
    if (perfect) ++rep.perfect_fit_samples;
    for (std::size_t k = 0; k < fg.distributive.size(); ++k) {
      const Matrix& jac = fg.distributive[k];
      EquilibriumEntry e;
      e.branch = k;
      e.sample = j;
      e.perfect_fit = perfect;
      std::size_t zeros = 0;
      double local_cos = 0.0;
      for (Eigen::Index col = 0; col < jac.cols(); ++col) {
        const double n = jac.col(col).norm();
        if (n < tol || n == 0.0) {
          ++zeros;
          continue;
        }
        ++e.nonzero_columns;
        if (!perfect && jac.rows() >= 2) local_cos += std::abs(jac.col(col).dot(fg.collaborative)) / (n * collab_norm);
      }
      e.zero_column_fraction = jac.cols() ? static_cast<double>(zeros) / static_cast<double>(jac.cols()) : 0.0;
      if (!perfect && jac.rows() >= 2 && e.nonzero_columns > 0) {
        e.mean_abs_cosine = local_cos / static_cast<double>(e.nonzero_columns);
        cos_acc += local_cos;
        cos_count += e.nonzero_columns;
      }
      zero_acc += e.zero_column_fraction;
      rep.entries.push_back(e);
    }
  }
  if (!rep.entries.empty()) rep.zero_column_fraction = zero_acc / static_cast<double>(rep.entries.size());
  if (cos_count) rep.mean_abs_cosine = cos_acc / static_cast<double>(cos_count);
  return rep;
}

}  // namespace branchlab::speclab
