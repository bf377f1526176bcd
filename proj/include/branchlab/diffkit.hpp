#pragma once

// Reverse-mode automatic differentiation over static dense graphs.
//
// A Tape records primitives in topological order and evaluates them eagerly.
// The graph never changes after construction, so the same tape can be
// re-evaluated at a new parameter vector with forward(); training loops rely
// on this to avoid rebuilding the graph every step.
//
// Every node holds a dense matrix. Batched data is laid out one sample per
// column.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "branchlab/errors.hpp"

namespace branchlab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Half-open index range [begin, end).
struct Slice {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const noexcept { return end - begin; }
  bool contains(std::size_t i) const noexcept { return i >= begin && i < end; }
  bool operator==(const Slice&) const = default;
};

// Checks that `slices` tile [0, total) in order without gaps or overlap.
inline bool is_partition(std::span<const Slice> slices, std::size_t total) {
  std::size_t cursor = 0;
  for (const Slice& s : slices) {
    if (s.begin != cursor || s.end < s.begin) return false;
    cursor = s.end;
  }
  return cursor == total;
}

namespace diffkit {

// Gradient of a scalar with respect to every registered parameter, with the
// per-branch index ranges kept alongside.
class GradientVector {
 public:
  GradientVector() = default;

  GradientVector(std::vector<double> entries, std::vector<Slice> slices)
      : entries_(std::move(entries)), slices_(std::move(slices)) {
    if (slices_.empty()) slices_.push_back({0, entries_.size()});
    if (!is_partition(slices_, entries_.size()))
      throw std::invalid_argument("branch slices must partition the gradient");
  }

  std::size_t size() const noexcept { return entries_.size(); }
  double operator[](std::size_t i) const { return entries_[i]; }
  std::span<const double> entries() const noexcept { return entries_; }
  const std::vector<Slice>& slices() const noexcept { return slices_; }

  std::span<const double> branch(std::size_t k) const {
    const Slice& s = slices_.at(k);
    return std::span<const double>(entries_).subspan(s.begin, s.size());
  }

  double norm() const {
    double acc = 0.0;
    for (double g : entries_) acc += g * g;
    return std::sqrt(acc);
  }

 private:
  std::vector<double> entries_;
  std::vector<Slice> slices_;
};

using NodeId = std::size_t;

enum class Op {
  Constant,
  Parameter,
  Add,
  Sub,
  Mul,
  Scale,
  AddColumn,
  MatMul,
  LeakyRelu,
  Clamp,
  SoftmaxColumns,
  Log,
  Square,
  Sum,
  SumRows,
};

class Tape {
 public:
  // `params` supplies the values parameter leaves read at construction time;
  // `slices` (optional) is copied into every GradientVector produced.
  explicit Tape(std::span<const double> params, std::vector<Slice> slices = {})
      : params_(params.begin(), params.end()), slices_(std::move(slices)) {
    if (slices_.empty()) slices_.push_back({0, params_.size()});
    if (!is_partition(slices_, params_.size()))
      throw std::invalid_argument("branch slices must partition the parameters");
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t param_count() const noexcept { return params_.size(); }
  const Matrix& value(NodeId id) const { return nodes_.at(id).value; }
  Op op(NodeId id) const { return nodes_.at(id).op; }

  NodeId constant(Matrix v) {
    Node n{Op::Constant};
    n.value = std::move(v);
    return push(std::move(n));
  }

  // Leaf whose (r, c) entry is params[indices[r * cols + c]].
  NodeId parameter(std::vector<std::size_t> indices, Eigen::Index rows, Eigen::Index cols) {
    if (static_cast<Eigen::Index>(indices.size()) != rows * cols)
      throw std::invalid_argument("parameter leaf: index count does not match shape");
    for (std::size_t i : indices)
      if (i >= params_.size()) throw std::out_of_range("parameter leaf: index out of range");
    Node n{Op::Parameter};
    n.indices = std::move(indices);
    n.value.resize(rows, cols);
    return push(std::move(n));
  }

  // Contiguous row-major block of the parameter vector.
  NodeId parameter_block(std::size_t offset, Eigen::Index rows, Eigen::Index cols) {
    std::vector<std::size_t> idx(static_cast<std::size_t>(rows * cols));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = offset + i;
    return parameter(std::move(idx), rows, cols);
  }

  NodeId add(NodeId a, NodeId b) { return binary_same_shape(Op::Add, a, b, "add"); }
  NodeId sub(NodeId a, NodeId b) { return binary_same_shape(Op::Sub, a, b, "sub"); }
  NodeId mul(NodeId a, NodeId b) { return binary_same_shape(Op::Mul, a, b, "mul"); }

  NodeId scale(NodeId a, double s) {
    Node n{Op::Scale, a};
    n.s0 = s;
    return push(std::move(n));
  }

  // a (r x c) plus column vector b (r x 1) broadcast across columns.
  NodeId add_column(NodeId a, NodeId b) {
    check(a);
    check(b);
    if (value(b).cols() != 1 || value(b).rows() != value(a).rows())
      throw std::invalid_argument("add_column: shape mismatch");
    return push(Node{Op::AddColumn, a, b});
  }

  NodeId matmul(NodeId a, NodeId b) {
    check(a);
    check(b);
    if (value(a).cols() != value(b).rows())
      throw std::invalid_argument("matmul: inner dimensions differ");
    return push(Node{Op::MatMul, a, b});
  }

  NodeId leaky_relu(NodeId a, double alpha) {
    Node n{Op::LeakyRelu, a};
    n.s0 = alpha;
    return push(std::move(n));
  }

  // Derivative is 1 on the closed interval [lo, hi] and 0 outside.
  NodeId clamp(NodeId a, double lo, double hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp: empty interval");
    Node n{Op::Clamp, a};
    n.s0 = lo;
    n.s1 = hi;
    return push(std::move(n));
  }

  NodeId softmax_columns(NodeId a) { return push(Node{Op::SoftmaxColumns, a}); }
  NodeId log(NodeId a) { return push(Node{Op::Log, a}); }
  NodeId square(NodeId a) { return push(Node{Op::Square, a}); }
  NodeId sum(NodeId a) { return push(Node{Op::Sum, a}); }
  // Sums over rows: (r x c) -> (1 x c).
  NodeId sum_rows(NodeId a) { return push(Node{Op::SumRows, a}); }

  // Replaces a constant's payload; the shape must not change.
  void set_constant(NodeId id, const Matrix& v) {
    Node& n = nodes_.at(id);
    if (n.op != Op::Constant) throw std::invalid_argument("set_constant: node is not a constant");
    if (n.value.rows() != v.rows() || n.value.cols() != v.cols())
      throw std::invalid_argument("set_constant: shape mismatch");
    n.value = v;
  }

  // Pins every clamp and leaky-relu node to the linear piece it is on at the
  // current point, so later forward() calls evaluate that piece's smooth
  // extension. Finite differences of the gradient then see the curvature of
  // the current piece instead of jumps at nearby kinks.
  void freeze_pieces() {
    for (Node& n : nodes_) {
      if (n.op == Op::LeakyRelu) {
        n.piece = nodes_[n.a].value.unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; });
      } else if (n.op == Op::Clamp) {
        const double lo = n.s0, hi = n.s1;
        n.piece = nodes_[n.a].value.unaryExpr([lo, hi](double x) { return x < lo ? -1.0 : (x > hi ? 1.0 : 0.0); });
      }
    }
    frozen_ = true;
  }

  void thaw_pieces() {
    for (Node& n : nodes_) n.piece.resize(0, 0);
    frozen_ = false;
  }

  bool frozen() const noexcept { return frozen_; }

  // Re-evaluates the whole graph at a new parameter vector.
  void forward(std::span<const double> params) {
    if (params.size() != params_.size())
      throw std::invalid_argument("forward: parameter count mismatch");
    std::copy(params.begin(), params.end(), params_.begin());
    for (Node& n : nodes_) evaluate(n);
  }

  // Exact gradient of a scalar node with respect to all parameters.
  GradientVector backward(NodeId root) {
    check(root);
    const Matrix& v = nodes_[root].value;
    if (v.rows() != 1 || v.cols() != 1) throw std::invalid_argument("gradient root must be scalar");
    return GradientVector(vjp(root, Matrix::Ones(1, 1)), slices_);
  }

  // Vector-Jacobian product: seedᵀ · d(root)/d(params).
  std::vector<double> vjp(NodeId root, const Matrix& seed) {
    check(root);
    Node& r = nodes_[root];
    if (seed.rows() != r.value.rows() || seed.cols() != r.value.cols())
      throw std::invalid_argument("vjp: seed shape mismatch");
    for (std::size_t i = 0; i <= root; ++i) nodes_[i].adjoint.setZero(nodes_[i].value.rows(), nodes_[i].value.cols());
    r.adjoint = seed;
    std::vector<double> grad(params_.size(), 0.0);
    for (std::size_t i = root + 1; i-- > 0;) propagate(nodes_[i], grad);
    return grad;
  }

 private:
  static constexpr NodeId kNone = static_cast<NodeId>(-1);

  struct Node {
    explicit Node(Op o, NodeId x = kNone, NodeId y = kNone) : op(o), a(x), b(y) {}

    Op op;
    NodeId a = kNone;
    NodeId b = kNone;
    double s0 = 0.0;
    double s1 = 0.0;
    std::vector<std::size_t> indices;
    Matrix value;
    Matrix adjoint;
    Matrix piece;  // frozen linear piece, see freeze_pieces()
  };

  void check(NodeId id) const {
    if (id >= nodes_.size()) throw std::out_of_range("node id not on this tape");
  }

  NodeId binary_same_shape(Op op, NodeId a, NodeId b, const char* name) {
    check(a);
    check(b);
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
      throw std::invalid_argument(std::string(name) + ": shape mismatch");
    return push(Node{op, a, b});
  }

  NodeId push(Node n) {
    if (n.a != kNone) check(n.a);
    if (n.b != kNone) check(n.b);
    evaluate(n);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  void evaluate(Node& n) {
    const auto in = [&](NodeId id) -> const Matrix& { return nodes_[id].value; };
    switch (n.op) {
      case Op::Constant:
        break;
      case Op::Parameter: {
        const Eigen::Index cols = n.value.cols();
        for (Eigen::Index r = 0; r < n.value.rows(); ++r)
          for (Eigen::Index c = 0; c < cols; ++c)
            n.value(r, c) = params_[n.indices[static_cast<std::size_t>(r * cols + c)]];
        break;
      }
      case Op::Add:
        n.value = in(n.a) + in(n.b);
        break;
      case Op::Sub:
        n.value = in(n.a) - in(n.b);
        break;
      case Op::Mul:
        n.value = in(n.a).cwiseProduct(in(n.b));
        break;
      case Op::Scale:
        n.value = in(n.a) * n.s0;
        break;
      case Op::AddColumn:
        n.value = in(n.a);
        n.value.colwise() += in(n.b).col(0);
        break;
      case Op::MatMul:
        n.value.noalias() = in(n.a) * in(n.b);
        break;
      case Op::LeakyRelu: {
        const double alpha = n.s0;
        if (n.piece.size())
          n.value = in(n.a).binaryExpr(n.piece, [alpha](double x, double up) { return up > 0.0 ? x : alpha * x; });
        else
          n.value = in(n.a).unaryExpr([alpha](double x) { return x > 0.0 ? x : alpha * x; });
        break;
      }
      case Op::Clamp: {
        const double lo = n.s0, hi = n.s1;
        if (n.piece.size())
          n.value = in(n.a).binaryExpr(n.piece, [lo, hi](double x, double side) { return side < 0.0 ? lo : (side > 0.0 ? hi : x); });
        else
          n.value = in(n.a).cwiseMax(lo).cwiseMin(hi);
        break;
      }
      case Op::SoftmaxColumns: {
        const Matrix& x = in(n.a);
        n.value.resize(x.rows(), x.cols());
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
          const double m = x.col(c).maxCoeff();
          n.value.col(c) = (x.col(c).array() - m).exp().matrix();
          n.value.col(c) /= n.value.col(c).sum();
        }
        break;
      }
      case Op::Log:
        n.value = in(n.a).array().log().matrix();
        break;
      case Op::Square:
        n.value = in(n.a).cwiseAbs2();
        break;
      case Op::Sum:
        n.value.resize(1, 1);
        n.value(0, 0) = in(n.a).sum();
        break;
      case Op::SumRows:
        n.value = in(n.a).colwise().sum();
        break;
    }
  }

  void propagate(Node& n, std::vector<double>& grad) {
    const Matrix& g = n.adjoint;
    const auto val = [&](NodeId id) -> const Matrix& { return nodes_[id].value; };
    const auto adj = [&](NodeId id) -> Matrix& { return nodes_[id].adjoint; };
    switch (n.op) {
      case Op::Constant:
        break;
      case Op::Parameter: {
        const Eigen::Index cols = g.cols();
        for (Eigen::Index r = 0; r < g.rows(); ++r)
          for (Eigen::Index c = 0; c < cols; ++c)
            grad[n.indices[static_cast<std::size_t>(r * cols + c)]] += g(r, c);
        break;
      }
      case Op::Add:
        adj(n.a) += g;
        adj(n.b) += g;
        break;
      case Op::Sub:
        adj(n.a) += g;
        adj(n.b) -= g;
        break;
      case Op::Mul:
        adj(n.a) += g.cwiseProduct(val(n.b));
        adj(n.b) += g.cwiseProduct(val(n.a));
        break;
      case Op::Scale:
        adj(n.a) += g * n.s0;
        break;
      case Op::AddColumn:
        adj(n.a) += g;
        adj(n.b) += g.rowwise().sum();
        break;
      case Op::MatMul:
        adj(n.a).noalias() += g * val(n.b).transpose();
        adj(n.b).noalias() += val(n.a).transpose() * g;
        break;
      case Op::LeakyRelu: {
        const double alpha = n.s0;
        if (n.piece.size())
          adj(n.a) += g.binaryExpr(n.piece, [alpha](double gi, double up) { return up > 0.0 ? gi : alpha * gi; });
        else
          adj(n.a) += g.binaryExpr(val(n.a), [alpha](double gi, double x) { return x > 0.0 ? gi : alpha * gi; });
        break;
      }
      case Op::Clamp: {
        const double lo = n.s0, hi = n.s1;
        if (n.piece.size())
          adj(n.a) += g.binaryExpr(n.piece, [](double gi, double side) { return side == 0.0 ? gi : 0.0; });
        else
          adj(n.a) += g.binaryExpr(val(n.a), [lo, hi](double gi, double x) { return (x >= lo && x <= hi) ? gi : 0.0; });
        break;
      }
      case Op::SoftmaxColumns: {
        const Matrix& s = n.value;
        Matrix& out = adj(n.a);
        for (Eigen::Index c = 0; c < s.cols(); ++c) {
          const double dot = s.col(c).dot(g.col(c));
          out.col(c) += s.col(c).cwiseProduct((g.col(c).array() - dot).matrix());
        }
        break;
      }
      case Op::Log:
        adj(n.a) += g.cwiseQuotient(val(n.a));
        break;
      case Op::Square:
        adj(n.a) += 2.0 * g.cwiseProduct(val(n.a));
        break;
      case Op::Sum:
        adj(n.a).array() += g(0, 0);
        break;
      case Op::SumRows:
        adj(n.a).rowwise() += g.row(0);
        break;
    }
  }

  std::vector<double> params_;
  std::vector<Slice> slices_;
  std::vector<Node> nodes_;
  bool frozen_ = false;
};

// Central differences of a scalar function, one coordinate at a time.
// Throws NonFiniteError naming the coordinate if a perturbed value is not finite.
template <class Fn>
std::vector<double> central_difference(Fn&& fn, std::span<const double> theta, double h) {
  if (!(h > 0.0) || !std::isfinite(h)) throw std::invalid_argument("finite difference step must be positive");
  std::vector<double> point(theta.begin(), theta.end());
  std::vector<double> grad(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double saved = point[i];
    point[i] = saved + h;
    const double up = fn(std::span<const double>(point));
    point[i] = saved - h;
    const double down = fn(std::span<const double>(point));
    point[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NonFiniteError("non-finite loss at perturbed coordinate " + std::to_string(i), i);
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace diffkit
}  // namespace branchlab
