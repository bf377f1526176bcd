#pragma once

// Branched architectures: M identical sub-networks with disjoint parameters
// whose outputs are summed, f(x) = R(x) + sum_k v_k(x), optionally clamped.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "branchlab/diffkit.hpp"

namespace branchlab {

enum class BranchKind { ScalarPerceptron, Mlp };

// Per-branch architecture, shared by every branch of a model.
//
// ScalarPerceptron: v(x) = leaky(w * x + b), two parameters, scalar in/out.
// Mlp: dense layers with the given widths; LeakyReLU on hidden layers only,
// the last layer is linear. Per layer, parameters are laid out as the weight
// matrix (out x in, row-major) followed by the bias (out), if enabled.
struct BranchArch {
  BranchKind kind = BranchKind::ScalarPerceptron;
  std::vector<std::size_t> widths{1, 1};
  double alpha = 0.01;
  bool output_clamp = false;
  bool bias = true;

  static BranchArch scalar_perceptron(double alpha = 0.01) {
    return BranchArch{BranchKind::ScalarPerceptron, {1, 1}, alpha, false, true};
  }

  static BranchArch mlp(std::vector<std::size_t> widths, double alpha = 0.01, bool output_clamp = false,
                        bool bias = true) {
    BranchArch a{BranchKind::Mlp, std::move(widths), alpha, output_clamp, bias};
    a.validate();
    return a;
  }

  void validate() const {
    if (kind == BranchKind::ScalarPerceptron) {
      if (widths != std::vector<std::size_t>{1, 1} || !bias)
        throw std::invalid_argument("scalar perceptron is 1 -> 1 with a bias");
      return;
    }
    if (widths.size() < 2) throw std::invalid_argument("mlp needs at least input and output widths");
    for (std::size_t w : widths)
      if (w == 0) throw std::invalid_argument("mlp widths must be positive");
  }

  std::size_t input_dim() const { return widths.front(); }
  std::size_t output_dim() const { return widths.back(); }
  std::size_t layers() const { return widths.size() - 1; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += widths[l] * widths[l + 1] + (bias ? widths[l + 1] : 0);
    return n;
  }

  // Offset of layer `l`'s weight block within one branch's parameters.
  std::size_t layer_offset(std::size_t l) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < l; ++i) n += widths[i] * widths[i + 1] + (bias ? widths[i + 1] : 0);
    return n;
  }

  bool operator==(const BranchArch&) const = default;
};

enum class ResidualMode { None, Fixed, Diffusion };

// Flat parameter vector split into one contiguous slice per branch.
class ParamStore {
 public:
  ParamStore() = default;

  ParamStore(std::vector<double> values, std::size_t branches, std::uint64_t seed)
      : values_(std::move(values)), seed_(seed) {
    if (branches == 0 || values_.size() % branches != 0)
      throw std::invalid_argument("parameters do not split into equal branch slices");
    const std::size_t per = values_.size() / branches;
    for (std::size_t k = 0; k < branches; ++k) slices_.push_back({k * per, (k + 1) * per});
  }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  const std::vector<Slice>& slices() const noexcept { return slices_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t size() const noexcept { return values_.size(); }

  std::span<double> branch(std::size_t k) { return values().subspan(slices_.at(k).begin, slices_[k].size()); }
  std::span<const double> branch(std::size_t k) const {
    return values().subspan(slices_.at(k).begin, slices_[k].size());
  }

  bool operator==(const ParamStore&) const = default;

 private:
  std::vector<double> values_;
  std::vector<Slice> slices_;
  std::uint64_t seed_ = 0;
};

// Model inputs, one sample per column. `branch_inputs[k]` (Diffusion mode)
// replaces x as the input of branch k; `residual` (Fixed and Diffusion modes)
// is added to the branch sum, one column per sample.
struct Inputs {
  Matrix x;
  std::vector<Matrix> branch_inputs;
  Matrix residual;

  Eigen::Index size() const { return x.cols(); }

  Inputs select(std::span<const std::size_t> columns) const {
    Inputs out;
    const auto pick = [&](const Matrix& m) {
      if (m.size() == 0) return Matrix();
      Matrix r(m.rows(), static_cast<Eigen::Index>(columns.size()));
      for (std::size_t j = 0; j < columns.size(); ++j) r.col(static_cast<Eigen::Index>(j)) = m.col(static_cast<Eigen::Index>(columns[j]));
      return r;
    };
    out.x = pick(x);
    for (const Matrix& b : branch_inputs) out.branch_inputs.push_back(pick(b));
    out.residual = pick(residual);
    return out;
  }
};

class BranchedModel {
 public:
  BranchedModel() = default;

  BranchedModel(BranchArch arch, ParamStore params, ResidualMode residual = ResidualMode::None)
      : arch_(std::move(arch)), params_(std::move(params)), residual_(residual) {
    arch_.validate();
    if (params_.slices().empty() || params_.slices().front().size() != arch_.param_count())
      throw std::invalid_argument("parameter slices do not match the branch architecture");
  }

  const BranchArch& arch() const noexcept { return arch_; }
  std::size_t branches() const noexcept { return params_.slices().size(); }
  const ParamStore& params() const noexcept { return params_; }
  ParamStore& params() noexcept { return params_; }
  ResidualMode residual_mode() const noexcept { return residual_; }
  void set_residual_mode(ResidualMode m) noexcept { residual_ = m; }

  bool operator==(const BranchedModel&) const = default;

 private:
  BranchArch arch_;
  ParamStore params_;
  ResidualMode residual_ = ResidualMode::None;
};

namespace detail {

inline double leaky(double x, double alpha) { return x > 0.0 ? x : alpha * x; }

inline std::uint64_t branch_stream(std::uint64_t seed, std::size_t k) {
  // splitmix64 of (seed, k); each branch gets its own generator.
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(k) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

// Draws every branch independently: ScalarPerceptron w, b ~ N(0, 1); Mlp
// weights ~ N(0, 2 / fan_in), biases 0. `output_gain` scales the standard
// deviation of the last Mlp layer.
inline BranchedModel init(const BranchArch& arch, std::size_t branches, std::uint64_t seed,
                          ResidualMode residual = ResidualMode::None, double output_gain = 1.0) {
  arch.validate();
  if (branches == 0) throw std::invalid_argument("branch count must be at least 1");
  const std::size_t per = arch.param_count();
  std::vector<double> values(per * branches, 0.0);
  for (std::size_t k = 0; k < branches; ++k) {
    std::mt19937_64 rng(detail::branch_stream(seed, k));
    double* p = values.data() + k * per;
    if (arch.kind == BranchKind::ScalarPerceptron) {
      std::normal_distribution<double> normal(0.0, 1.0);
      p[0] = normal(rng);
      p[1] = normal(rng);
      continue;
    }
    for (std::size_t l = 0; l < arch.layers(); ++l) {
      const std::size_t in = arch.widths[l], out = arch.widths[l + 1];
      const double gain = l + 1 == arch.layers() ? output_gain : 1.0;
      std::normal_distribution<double> normal(0.0, gain * std::sqrt(2.0 / static_cast<double>(in)));
      double* w = p + arch.layer_offset(l);
      for (std::size_t i = 0; i < in * out; ++i) w[i] = normal(rng);
    }
  }
  return BranchedModel(arch, ParamStore(std::move(values), branches, seed), residual);
}

// v_k on a batch (input_dim x N) -> (output_dim x N). No clamping.
inline Matrix branch_forward_batch(const BranchedModel& model, std::size_t k, const Matrix& x) {
  if (k >= model.branches()) throw std::out_of_range("branch index out of range");
  const BranchArch& arch = model.arch();
  if (static_cast<std::size_t>(x.rows()) != arch.input_dim()) throw std::invalid_argument("input dimension mismatch");
  const std::span<const double> p = model.params().branch(k);
  if (arch.kind == BranchKind::ScalarPerceptron) {
    const double w = p[0], b = p[1];
    return x.unaryExpr([&](double xi) { return detail::leaky(w * xi + b, arch.alpha); });
  }
  Matrix h = x;
  for (std::size_t l = 0; l < arch.layers(); ++l) {
    const auto in = static_cast<Eigen::Index>(arch.widths[l]);
    const auto out = static_cast<Eigen::Index>(arch.widths[l + 1]);
    const double* w = p.data() + arch.layer_offset(l);
    Matrix z = Eigen::Map<const RowMajorMatrix>(w, out, in) * h;
    if (arch.bias) z.colwise() += Eigen::Map<const Vector>(w + out * in, out);
    if (l + 1 < arch.layers()) z = z.unaryExpr([&](double v) { return detail::leaky(v, arch.alpha); });
    h = std::move(z);
  }
  return h;
}

inline std::vector<double> branch_forward(const BranchedModel& model, std::size_t k, std::span<const double> x) {
  const Matrix col = Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size()));
  const Matrix out = branch_forward_batch(model, k, col);
  return std::vector<double>(out.data(), out.data() + out.size());
}

// Per-branch outputs on a batch: element k is v_k over all samples (C x N).
// In Diffusion mode branch k reads inputs.branch_inputs[k] instead of x.
inline std::vector<Matrix> forward_all(const BranchedModel& model, const Inputs& inputs) {
  std::vector<Matrix> out;
  out.reserve(model.branches());
  const bool diffusion = model.residual_mode() == ResidualMode::Diffusion;
  if (diffusion && inputs.branch_inputs.size() != model.branches())
    throw std::invalid_argument("diffusion residual mode needs one input per branch");
  for (std::size_t k = 0; k < model.branches(); ++k)
    out.push_back(branch_forward_batch(model, k, diffusion ? inputs.branch_inputs[k] : inputs.x));
  return out;
}

// Order-independent sum: contributions are sorted before accumulation so the
// result does not depend on branch numbering.
inline double aggregate(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double acc = 0.0;
  for (double t : terms) acc += t;
  return acc;
}

// Branch-axis sum of forward_all output, plus residual, then clamp.
inline Matrix aggregate_outputs(const BranchedModel& model, const std::vector<Matrix>& per_branch,
                                const Inputs& inputs) {
  if (per_branch.empty()) throw std::invalid_argument("no branch outputs");
  const Eigen::Index rows = per_branch.front().rows(), cols = per_branch.front().cols();
  const bool residual = model.residual_mode() != ResidualMode::None;
  if (residual && (inputs.residual.rows() != rows || inputs.residual.cols() != cols))
    throw std::invalid_argument("residual shape does not match model output");
  Matrix f(rows, cols);
  std::vector<double> terms(per_branch.size());
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index c = 0; c < rows; ++c) {
      for (std::size_t k = 0; k < per_branch.size(); ++k) terms[k] = per_branch[k](c, j);
      double v = aggregate(terms);
      if (residual) v += inputs.residual(c, j);
      if (model.arch().output_clamp) v = std::clamp(v, -1.0, 1.0);
      f(c, j) = v;
    }
  }
  return f;
}

inline Matrix forward(const BranchedModel& model, const Inputs& inputs) {
  return aggregate_outputs(model, forward_all(model, inputs), inputs);
}

// Single-sample forward for models without a residual.
inline std::vector<double> forward(const BranchedModel& model, std::span<const double> x) {
  if (model.residual_mode() != ResidualMode::None)
    throw std::invalid_argument("residual models need full Inputs");
  Inputs in;
  in.x = Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size()));
  const Matrix f = forward(model, in);
  return std::vector<double>(f.data(), f.data() + f.size());
}

// Returns a copy with branches reordered: new branch i is old branch perm[i].
inline BranchedModel permute_branches(const BranchedModel& model, std::span<const std::size_t> perm) {
  if (perm.size() != model.branches()) throw std::invalid_argument("permutation size mismatch");
  std::vector<double> values;
  values.reserve(model.params().size());
  for (std::size_t i : perm) {
    const auto b = model.params().branch(i);
    values.insert(values.end(), b.begin(), b.end());
  }
  return BranchedModel(model.arch(), ParamStore(std::move(values), model.branches(), model.params().seed()),
                       model.residual_mode());
}

// ---- autodiff graph -------------------------------------------------------

struct ModelGraph {
  std::vector<diffkit::NodeId> branch_out;  // per branch, C x N
  diffkit::NodeId x = 0;
  std::vector<diffkit::NodeId> branch_x;
  diffkit::NodeId pre_clamp = 0;  // sum (+ residual) before clamping
  diffkit::NodeId output = 0;
  std::optional<diffkit::NodeId> residual;
};

// Records the graph of v_k applied to node `in` (input_dim x N).
inline diffkit::NodeId record_branch(diffkit::Tape& tape, const BranchArch& arch, std::size_t offset,
                                     diffkit::NodeId in) {
  if (arch.kind == BranchKind::ScalarPerceptron) {
    const auto w = tape.parameter_block(offset, 1, 1);
    const auto b = tape.parameter_block(offset + 1, 1, 1);
    return tape.leaky_relu(tape.add_column(tape.matmul(w, in), b), arch.alpha);
  }
  diffkit::NodeId h = in;
  for (std::size_t l = 0; l < arch.layers(); ++l) {
    const auto n_in = static_cast<Eigen::Index>(arch.widths[l]);
    const auto n_out = static_cast<Eigen::Index>(arch.widths[l + 1]);
    const std::size_t at = offset + arch.layer_offset(l);
    h = tape.matmul(tape.parameter_block(at, n_out, n_in), h);
    if (arch.bias) h = tape.add_column(h, tape.parameter_block(at + static_cast<std::size_t>(n_out * n_in), n_out, 1));
    if (l + 1 < arch.layers()) h = tape.leaky_relu(h, arch.alpha);
  }
  return h;
}

// Records f over a batch. Parameter leaves index into model.params().
inline ModelGraph record_model(diffkit::Tape& tape, const BranchedModel& model, const Inputs& inputs) {
  ModelGraph g;
  const std::size_t m = model.branches();
  const bool diffusion = model.residual_mode() == ResidualMode::Diffusion;
  if (diffusion && inputs.branch_inputs.size() != m)
    throw std::invalid_argument("diffusion residual mode needs one input per branch");
  if (static_cast<std::size_t>((diffusion ? inputs.branch_inputs.front() : inputs.x).rows()) !=
      model.arch().input_dim())
    throw std::invalid_argument("input dimension mismatch");
  if (!diffusion) g.x = tape.constant(inputs.x);
  for (std::size_t k = 0; k < m; ++k) {
    const diffkit::NodeId in = diffusion ? tape.constant(inputs.branch_inputs[k]) : g.x;
    g.branch_x.push_back(in);
    g.branch_out.push_back(record_branch(tape, model.arch(), model.params().slices()[k].begin, in));
  }
  diffkit::NodeId f = g.branch_out.front();
  for (std::size_t k = 1; k < m; ++k) f = tape.add(f, g.branch_out[k]);
  if (model.residual_mode() != ResidualMode::None) {
    g.residual = tape.constant(inputs.residual);
    f = tape.add(f, *g.residual);
  }
  g.pre_clamp = f;
  g.output = model.arch().output_clamp ? tape.clamp(f, -1.0, 1.0) : f;
  return g;
}

// ---- serialization --------------------------------------------------------

inline const char* to_string(BranchKind k) { return k == BranchKind::ScalarPerceptron ? "scalar_perceptron" : "mlp"; }

inline const char* to_string(ResidualMode m) {
  switch (m) {
    case ResidualMode::None: return "none";
    case ResidualMode::Fixed: return "fixed";
    case ResidualMode::Diffusion: return "diffusion";
  }
  return "none";
}

inline ResidualMode residual_mode_from_string(const std::string& s) {
  if (s == "none") return ResidualMode::None;
  if (s == "fixed") return ResidualMode::Fixed;
  if (s == "diffusion") return ResidualMode::Diffusion;
  throw std::invalid_argument("unknown residual mode: " + s);
}

inline nlohmann::json to_json(const BranchArch& a) {
  return {{"kind", to_string(a.kind)}, {"widths", a.widths}, {"alpha", a.alpha},
          {"output_clamp", a.output_clamp}, {"bias", a.bias}};
}

inline BranchArch arch_from_json(const nlohmann::json& j) {
  BranchArch a;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "scalar_perceptron") a.kind = BranchKind::ScalarPerceptron;
  else if (kind == "mlp") a.kind = BranchKind::Mlp;
  else throw std::invalid_argument("unknown branch kind: " + kind);
  a.widths = j.at("widths").get<std::vector<std::size_t>>();
  a.alpha = j.at("alpha").get<double>();
  a.output_clamp = j.value("output_clamp", false);
  a.bias = j.value("bias", true);
  a.validate();
  return a;
}

inline nlohmann::json to_json(const BranchedModel& m) {
  const auto v = m.params().values();
  return {{"arch", to_json(m.arch())},
          {"M", m.branches()},
          {"seed", m.params().seed()},
          {"residual_mode", to_string(m.residual_mode())},
          {"params", std::vector<double>(v.begin(), v.end())}};
}

inline BranchedModel model_from_json(const nlohmann::json& j) {
  BranchArch arch = arch_from_json(j.at("arch"));
  const auto m = j.at("M").get<std::size_t>();
  ParamStore ps(j.at("params").get<std::vector<double>>(), m, j.at("seed").get<std::uint64_t>());
  return BranchedModel(std::move(arch), std::move(ps), residual_mode_from_string(j.value("residual_mode", "none")));
}

}  // namespace branchlab
