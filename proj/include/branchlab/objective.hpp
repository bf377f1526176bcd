#pragma once

// Mean batch loss of a branched model as a function of its parameters, with
// exact gradients from a recorded tape and a finite-difference oracle that
// goes through the plain (tape-free) forward path instead.

#include <span>
#include <vector>

#include "branchlab/branchnet.hpp"
#include "branchlab/dataset.hpp"
#include "branchlab/diffkit.hpp"
#include "branchlab/losses.hpp"

namespace branchlab {

class Objective {
 public:
  Objective(const BranchedModel& model, const LossSpec& spec, const Dataset& data)
      : tape_(model.params().values(), model.params().slices()) {
    data.validate(spec);
    graph_ = record_model(tape_, model, data.inputs);
    if (tape_.value(graph_.output).rows() != data.targets.rows())
      throw std::invalid_argument("model output and target dimensions differ");
    targets_ = tape_.constant(data.targets);
    loss_ = losses::record_loss(tape_, spec, graph_.output, targets_);
  }

  double value() const { return tape_.value(loss_)(0, 0); }

  double evaluate(std::span<const double> params) {
    tape_.forward(params);
    return value();
  }

  // Gradient at the last evaluated point.
  diffkit::GradientVector gradient() { return tape_.backward(loss_); }

  const Matrix& output() const { return tape_.value(graph_.output); }
  const Matrix& pre_clamp() const { return tape_.value(graph_.pre_clamp); }
  const Matrix& branch_output(std::size_t k) const { return tape_.value(graph_.branch_out.at(k)); }
  std::size_t branches() const { return graph_.branch_out.size(); }
  const ModelGraph& graph() const { return graph_; }
  diffkit::NodeId loss_node() const { return loss_; }
  diffkit::Tape& tape() { return tape_; }

  // Swaps in another batch of the same shape; call evaluate() afterwards.
  void set_batch(const Dataset& data) {
    if (graph_.branch_x.empty()) return;
    if (data.inputs.branch_inputs.empty()) {
      tape_.set_constant(graph_.x, data.inputs.x);
    } else {
      for (std::size_t k = 0; k < graph_.branch_x.size(); ++k)
        tape_.set_constant(graph_.branch_x[k], data.inputs.branch_inputs.at(k));
    }
    if (graph_.residual) tape_.set_constant(*graph_.residual, data.inputs.residual);
    tape_.set_constant(targets_, data.targets);
  }

 private:
  diffkit::Tape tape_;
  ModelGraph graph_;
  diffkit::NodeId targets_ = 0;
  diffkit::NodeId loss_ = 0;
};

// Mean loss through the tape-free forward path.
inline double mean_loss(const BranchedModel& model, const LossSpec& spec, const Dataset& data) {
  data.validate(spec);
  return losses::batch_loss(spec, forward(model, data.inputs), data.targets);
}

inline diffkit::GradientVector loss_gradient(const BranchedModel& model, const LossSpec& spec, const Dataset& data) {
  Objective obj(model, spec, data);
  return obj.gradient();
}

namespace diffkit {

// Central-difference gradient of the mean loss, one coordinate at a time.
inline GradientVector finite_diff_gradient(const BranchedModel& model, const LossSpec& spec, const Dataset& data,
                                           double h) {
  BranchedModel probe = model;
  auto fn = [&](std::span<const double> theta) {
    std::copy(theta.begin(), theta.end(), probe.params().values().begin());
    return mean_loss(probe, spec, data);
  };
  return GradientVector(central_difference(fn, model.params().values(), h), model.params().slices());
}

}  // namespace diffkit
}  // namespace branchlab
