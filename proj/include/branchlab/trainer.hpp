#pragma once

// Plain gradient descent, theta <- theta - lr * grad L(theta): the explicit
// Euler discretization of the gradient flow.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "branchlab/errors.hpp"
#include "branchlab/objective.hpp"

namespace branchlab {

enum class TrainMode { FullBatchGD, SGD };

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t max_steps = 50'000;
  TrainMode mode = TrainMode::FullBatchGD;
  std::size_t batch_size = 32;     // SGD only
  double success_delta = 1e-4;
  std::size_t snapshot_every = 0;  // 0 disables snapshots
  std::uint64_t seed = 0;          // SGD shuffling
};

struct Snapshot {
  std::size_t step = 0;
  std::vector<Matrix> branch_outputs;  // M entries, each C x N
  std::vector<double> params;
};

struct TrainTrace {
  std::vector<double> losses;      // loss at theta_s, before the update of step s
  std::vector<double> grad_norms;
  std::vector<Snapshot> snapshots;
  std::optional<std::size_t> converged_at;
  double grad_norm_final = 0.0;
};

struct TrainResult {
  BranchedModel model;
  TrainTrace trace;
};

// Sum over samples (and output coordinates) of (f(x_j) - y_j)^2 < delta.
// Unnormalized, unlike the mean loss used for training.
inline double residual_sum_squares(const Matrix& f, const Matrix& targets) { return (f - targets).squaredNorm(); }

inline bool success(const BranchedModel& model, const Dataset& data, double delta) {
  if (delta < 0.0) throw std::invalid_argument("success threshold must be nonnegative");
  return residual_sum_squares(forward(model, data.inputs), data.targets) < delta;
}

namespace detail {

inline void take_snapshot(TrainTrace& trace, std::size_t step, const BranchedModel& model, const Dataset& data) {
  const auto p = model.params().values();
  trace.snapshots.push_back({step, forward_all(model, data.inputs), std::vector<double>(p.begin(), p.end())});
}

inline void descend(std::span<double> theta, const diffkit::GradientVector& g, double lr) {
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * g[i];
}

}  // namespace detail

// Stops after max_steps updates, or as soon as the success criterion holds
// (full-batch squared loss only). Throws DivergenceError on a non-finite loss.
inline TrainResult train(BranchedModel model, const Dataset& data, const LossSpec& spec, const TrainConfig& cfg) {
  if (!(cfg.learning_rate >= 0.0)) throw std::invalid_argument("learning rate must be nonnegative");
  data.validate(spec);
  TrainResult out{std::move(model), {}};
  BranchedModel& m = out.model;
  TrainTrace& trace = out.trace;
  const std::span<double> theta = m.params().values();
  const bool check_success = spec.kind == LossKind::SquaredL2 && cfg.mode == TrainMode::FullBatchGD;

  const auto step_on = [&](Objective& obj, std::size_t step) {
    const double loss = obj.evaluate(theta);
    if (!std::isfinite(loss)) throw DivergenceError(step);
    const diffkit::GradientVector g = obj.gradient();
    trace.losses.push_back(loss);
    trace.grad_norms.push_back(g.norm());
    trace.grad_norm_final = trace.grad_norms.back();
    return g;
  };
  const auto maybe_snapshot = [&](std::size_t step) {
    if (cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0) detail::take_snapshot(trace, step, m, data);
  };

  if (cfg.mode == TrainMode::FullBatchGD) {
    Objective obj(m, spec, data);
    for (std::size_t step = 0; step < cfg.max_steps; ++step) {
      maybe_snapshot(step);
      const diffkit::GradientVector g = step_on(obj, step);
      if (check_success && residual_sum_squares(obj.output(), data.targets) < cfg.success_delta) {
        trace.converged_at = step;
        break;
      }
      detail::descend(theta, g, cfg.learning_rate);
    }
    return out;
  }

  if (cfg.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  const auto n = static_cast<std::size_t>(data.size());
  const std::size_t bs = std::min(cfg.batch_size, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(cfg.seed);
  std::unique_ptr<Objective> full, tail;
  std::size_t step = 0;
  while (step < cfg.max_steps) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n && step < cfg.max_steps; start += bs, ++step) {
      const std::size_t len = std::min(bs, n - start);
      const Dataset batch = data.select(std::span<const std::size_t>(order).subspan(start, len));
      std::unique_ptr<Objective>& obj = len == bs ? full : tail;
      if (!obj) obj = std::make_unique<Objective>(m, spec, batch);
      else obj->set_batch(batch);
      maybe_snapshot(step);
      detail::descend(theta, step_on(*obj, step), cfg.learning_rate);
    }
  }
  return out;
}

}  // namespace branchlab
