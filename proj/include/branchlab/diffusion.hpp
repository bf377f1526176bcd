#pragma once

// Discrete nonlinear-diffusion decomposition x = sum_n phi_n + R.
//
// Forward Euler on u_t = -p(u), u^0 = x, with t_n = n dt and discrete time
// derivatives d_n = -p(u^n):
//
//   phi_n = t_n (d_n - d_{n-1}),   n = 1..M
//   R     = u^M - t_M d_M = u^M + t_M p(u^M)
//
// Summation by parts gives sum_n phi_n = t_M d_M - dt sum_{n<M} d_n
// = t_M d_M - (u^M - x), so the reconstruction is exact up to rounding.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "branchlab/branchnet.hpp"

namespace branchlab::diffusion {

enum class OperatorKind { LinearLaplacian, BoxBlurResidual };

// p(u) on a rows x cols grid (a 1-D signal is a single row). Both operators
// annihilate constants.
//
// LinearLaplacian: p(u) = -weight * Laplacian(u), 3-point stencil per axis,
// reflecting (Neumann) boundaries.
// BoxBlurResidual: p(u) = u - mean of the (2r+1)^2 window, edges replicated.
struct SmoothingOperator {
  OperatorKind kind = OperatorKind::LinearLaplacian;
  double weight = 1.0;
  int radius = 1;

  static SmoothingOperator laplacian(double weight = 1.0) { return {OperatorKind::LinearLaplacian, weight, 1}; }
  static SmoothingOperator box_blur_residual(int radius) {
    if (radius < 1) throw std::invalid_argument("box radius must be at least 1");
    return {OperatorKind::BoxBlurResidual, 1.0, radius};
  }

  Matrix apply(const Matrix& u) const {
    const Eigen::Index rows = u.rows(), cols = u.cols();
    Matrix out(rows, cols);
    if (kind == OperatorKind::LinearLaplacian) {
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
          double lap = 0.0;
          if (cols > 1) {
            const double left = u(r, c > 0 ? c - 1 : c + 1);
            const double right = u(r, c + 1 < cols ? c + 1 : c - 1);
            lap += left - 2.0 * u(r, c) + right;
          }
          if (rows > 1) {
            const double up = u(r > 0 ? r - 1 : r + 1, c);
            const double down = u(r + 1 < rows ? r + 1 : r - 1, c);
            lap += up - 2.0 * u(r, c) + down;
          }
          out(r, c) = -weight * lap;
        }
      }
      return out;
    }
    const Eigen::Index rr = rows > 1 ? radius : 0, rc = cols > 1 ? radius : 0;
    const double count = static_cast<double>((2 * rr + 1) * (2 * rc + 1));
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        double acc = 0.0;
        for (Eigen::Index dr = -rr; dr <= rr; ++dr)
          for (Eigen::Index dc = -rc; dc <= rc; ++dc)
            acc += u(std::clamp<Eigen::Index>(r + dr, 0, rows - 1), std::clamp<Eigen::Index>(c + dc, 0, cols - 1));
        out(r, c) = u(r, c) - acc / count;
      }
    }
    return out;
  }

  // Largest stable dt for explicit Euler, or +inf when unconstrained.
  double max_stable_dt(const Matrix& shape) const {
    if (kind != OperatorKind::LinearLaplacian) return std::numeric_limits<double>::infinity();
    const int axes = (shape.rows() > 1) + (shape.cols() > 1);
    if (axes == 0 || weight == 0.0) return std::numeric_limits<double>::infinity();
    return 0.5 / (axes * std::abs(weight));
  }
};

struct DiffusionDecomposition {
  std::vector<Matrix> phis;  // M bands
  Matrix R;
  double dt = 0.0;
  std::size_t steps = 0;     // M + 1
  std::vector<Matrix> trajectory;  // u^0 .. u^{M+1}

  Matrix reconstruction() const {
    Matrix acc = Matrix::Zero(R.rows(), R.cols());
    for (const Matrix& p : phis) acc += p;
    return acc + R;
  }
};

inline DiffusionDecomposition diffuse(const Matrix& x, const SmoothingOperator& p, double dt, std::size_t bands) {
  if (!(dt > 0.0)) throw std::invalid_argument("diffusion step must be positive");
  if (bands < 1) throw std::invalid_argument("band count must be at least 1");
  if (dt > p.max_stable_dt(x))
    throw std::invalid_argument("diffusion step " + std::to_string(dt) + " exceeds the stability bound " +
                                std::to_string(p.max_stable_dt(x)));
  DiffusionDecomposition out;
  out.dt = dt;
  out.steps = bands + 1;
  out.trajectory.reserve(bands + 2);
  out.trajectory.push_back(x);
  std::vector<Matrix> d;
  d.reserve(bands + 1);
  for (std::size_t n = 0; n <= bands; ++n) {
    Matrix pn = p.apply(out.trajectory.back());
    if (pn.rows() != x.rows() || pn.cols() != x.cols())
      throw std::invalid_argument("smoothing operator changed the signal shape");
    d.push_back(-pn);
    out.trajectory.push_back(out.trajectory.back() + dt * d.back());
  }
  for (std::size_t n = 1; n <= bands; ++n) {
    const double t = static_cast<double>(n) * dt;
    out.phis.push_back(t * (d[n] - d[n - 1]));
  }
  const double t_end = static_cast<double>(bands) * dt;
  out.R = out.trajectory[bands] - t_end * d[bands];
  return out;
}

// Per-sample decompositions of flattened images (pixels x N, row-major pixels).
struct DiffusionBatch {
  std::vector<Matrix> phis;  // M entries, pixels x N
  Matrix R;                  // pixels x N
};

inline DiffusionBatch residual_for_model(const Matrix& X, Eigen::Index rows, Eigen::Index cols,
                                         const SmoothingOperator& p, double dt, std::size_t bands) {
  if (rows * cols != X.rows()) throw std::invalid_argument("image shape does not match pixel count");
  DiffusionBatch out;
  out.phis.assign(bands, Matrix(X.rows(), X.cols()));
  out.R.resize(X.rows(), X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    const Vector col = X.col(j);
    const RowMajorMatrix img = Eigen::Map<const RowMajorMatrix>(col.data(), rows, cols);
    const DiffusionDecomposition dec = diffuse(img, p, dt, bands);
    const auto flat = [&](const Matrix& m) {
      const RowMajorMatrix rm = m;
      return Eigen::Map<const Vector>(rm.data(), rows * cols).eval();
    };
    for (std::size_t k = 0; k < bands; ++k) out.phis[k].col(j) = flat(dec.phis[k]);
    out.R.col(j) = flat(dec.R);
  }
  return out;
}

// Wires a decomposition into model inputs for the Diffusion residual mode.
inline void attach(Inputs& inputs, const DiffusionBatch& batch, std::size_t model_branches) {
  if (batch.phis.size() != model_branches)
    throw std::invalid_argument("band count " + std::to_string(batch.phis.size()) + " does not match " +
                                std::to_string(model_branches) + " branches");
  inputs.branch_inputs = batch.phis;
  inputs.residual = batch.R;
}

}  // namespace branchlab::diffusion
