#pragma once

// Scripted reproductions: toy dynamics and success/activity sweeps, blob
// classification with clamped logits, and residual (diffusion) decomposition
// of synthetic images. Every runner is deterministic given its spec and
// writes results.csv, summary.json and SVG figures under output_dir.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "branchlab/dataset.hpp"
#include "branchlab/diffusion.hpp"
#include "branchlab/io.hpp"
#include "branchlab/parallel.hpp"
#include "branchlab/speclab.hpp"
#include "branchlab/trainer.hpp"

namespace branchlab::experiments {

struct ClassifyOptions {
  std::size_t branches = 16;
  std::vector<std::size_t> widths{2, 16, 4};
  BlobConfig blobs{};
  double test_fraction = 0.2;
  bool hessian = true;
  std::size_t hessian_samples = 256;  // training samples used for the Hessian
  double top_fraction = 0.05;         // per-branch most-confident sample listing
  double output_gain = 0.1;           // last-layer init gain; 0 means 1 / sqrt(M)
};

struct DecomposeOptions {
  std::size_t branches = 4;
  std::size_t hidden = 128;
  ImageConfig images{};
  double operator_weight = 1.0;
  double dt = 0.2;
  bool constant_images = false;
};

struct ExperimentSpec {
  std::string name = "toy1";  // toy1, toy2, toy_sweep, classify, decompose
  std::vector<std::size_t> M_values{2};
  std::size_t trials = 200;
  TrainConfig train{};
  std::filesystem::path output_dir = "out";
  std::uint64_t seed = 0;
  std::size_t jobs = 0;  // 0: hardware concurrency
  double active_threshold = 0.10;
  std::size_t snapshot_every = 50;  // single toy runs
  ClassifyOptions classify{};
  DecomposeOptions decompose{};
};

inline TrainConfig classify_train_defaults() {
  TrainConfig t;
  t.learning_rate = 0.1;
  t.max_steps = 3000;
  t.mode = TrainMode::SGD;
  t.batch_size = 32;
  return t;
}

inline TrainConfig decompose_train_defaults() {
  TrainConfig t;
  t.learning_rate = 0.2;
  t.max_steps = 1500;
  return t;
}

// ---- spec (de)serialization ---------------------------------------------------

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"learning_rate", t.learning_rate}, {"max_steps", t.max_steps},
          {"mode", t.mode == TrainMode::SGD ? "sgd" : "full_batch"}, {"batch_size", t.batch_size},
          {"success_delta", t.success_delta}, {"snapshot_every", t.snapshot_every}, {"seed", t.seed}};
}

inline TrainConfig train_from_json(const nlohmann::json& j, TrainConfig t) {
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.max_steps = j.value("max_steps", t.max_steps);
  if (j.contains("mode")) {
    const std::string m = j.at("mode").get<std::string>();
    if (m == "sgd") t.mode = TrainMode::SGD;
    else if (m == "full_batch") t.mode = TrainMode::FullBatchGD;
    else throw std::invalid_argument("unknown training mode: " + m);
  }
  t.batch_size = j.value("batch_size", t.batch_size);
  t.success_delta = j.value("success_delta", t.success_delta);
  t.snapshot_every = j.value("snapshot_every", t.snapshot_every);
  t.seed = j.value("seed", t.seed);
  return t;
}

inline nlohmann::json to_json(const ExperimentSpec& s) {
  const ClassifyOptions& c = s.classify;
  const DecomposeOptions& d = s.decompose;
  return {{"name", s.name},
          {"M_values", s.M_values},
          {"trials", s.trials},
          {"train", to_json(s.train)},
          {"output_dir", s.output_dir.generic_string()},
          {"seed", s.seed},
          {"active_threshold", s.active_threshold},
          {"snapshot_every", s.snapshot_every},
          {"classify",
           {{"branches", c.branches}, {"widths", c.widths}, {"classes", c.blobs.classes},
            {"per_class", c.blobs.per_class}, {"radius", c.blobs.radius}, {"spread", c.blobs.spread},
            {"test_fraction", c.test_fraction}, {"hessian", c.hessian}, {"hessian_samples", c.hessian_samples},
            {"top_fraction", c.top_fraction}, {"output_gain", c.output_gain}}},
          {"decompose",
           {{"branches", d.branches}, {"hidden", d.hidden}, {"images", d.images.count}, {"side", d.images.side},
            {"dots", d.images.dots}, {"operator_weight", d.operator_weight}, {"dt", d.dt},
            {"constant_images", d.constant_images}}}};
}

// Applies the keys present in `j` on top of `s`.
inline ExperimentSpec spec_from_json(const nlohmann::json& j, ExperimentSpec s) {
  s.name = j.value("name", s.name);
  s.M_values = j.value("M_values", s.M_values);
  s.trials = j.value("trials", s.trials);
  if (j.contains("train")) s.train = train_from_json(j.at("train"), s.train);
  if (j.contains("output_dir")) s.output_dir = j.at("output_dir").get<std::string>();
  s.seed = j.value("seed", s.seed);
  s.active_threshold = j.value("active_threshold", s.active_threshold);
  s.snapshot_every = j.value("snapshot_every", s.snapshot_every);
  if (j.contains("classify")) {
    const auto& c = j.at("classify");
    ClassifyOptions& o = s.classify;
    o.branches = c.value("branches", o.branches);
    o.widths = c.value("widths", o.widths);
    o.blobs.classes = c.value("classes", o.blobs.classes);
    o.blobs.per_class = c.value("per_class", o.blobs.per_class);
    o.blobs.radius = c.value("radius", o.blobs.radius);
    o.blobs.spread = c.value("spread", o.blobs.spread);
    o.test_fraction = c.value("test_fraction", o.test_fraction);
    o.hessian = c.value("hessian", o.hessian);
    o.hessian_samples = c.value("hessian_samples", o.hessian_samples);
    o.top_fraction = c.value("top_fraction", o.top_fraction);
    o.output_gain = c.value("output_gain", o.output_gain);
  }
  if (j.contains("decompose")) {
    const auto& c = j.at("decompose");
    DecomposeOptions& o = s.decompose;
    o.branches = c.value("branches", o.branches);
    o.hidden = c.value("hidden", o.hidden);
    o.images.count = c.value("images", o.images.count);
    o.images.side = c.value("side", o.images.side);
    o.images.dots = c.value("dots", o.images.dots);
    o.operator_weight = c.value("operator_weight", o.operator_weight);
    o.dt = c.value("dt", o.dt);
    o.constant_images = c.value("constant_images", o.constant_images);
  }
  return s;
}

// Seed of one (M, trial) cell, independent of scheduling.
inline std::uint64_t trial_seed(std::uint64_t base, std::size_t m, std::size_t trial) {
  return detail::branch_stream(detail::branch_stream(base, m), trial);
}

inline Dataset toy_dataset(const std::string& name) {
  if (name == "toy1") return toy1();
  if (name == "toy2") return toy2();
  throw std::invalid_argument("unknown toy dataset: " + name);
}

// ---- toy sweep --------------------------------------------------------------

struct TrialRecord {
  std::size_t M = 0;
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  bool success = false;
  bool diverged = false;
  std::size_t active = 0;
  std::size_t silent = 0;
  double final_loss = 0.0;
  std::size_t steps = 0;
  Matrix covariance;
};

struct MAggregate {
  std::size_t M = 0;
  std::size_t trials = 0;
  double success_rate = 0.0;
  double mean_active = 0.0;
  double mean_silent = 0.0;
  double mean_final_loss = 0.0;  // over non-diverged trials
};

struct SweepResult {
  std::vector<TrialRecord> records;
  std::vector<MAggregate> aggregates;
};

inline std::vector<MAggregate> aggregate(const std::vector<TrialRecord>& records) {
  std::vector<MAggregate> out;
  for (const TrialRecord& r : records) {
    auto it = std::find_if(out.begin(), out.end(), [&](const MAggregate& a) { return a.M == r.M; });
    if (it == out.end()) {
      out.push_back({r.M});
      it = std::prev(out.end());
    }
    ++it->trials;
    it->success_rate += r.success ? 1.0 : 0.0;
    it->mean_active += static_cast<double>(r.active);
    it->mean_silent += static_cast<double>(r.silent);
  }
  for (MAggregate& a : out) {
    double loss = 0.0;
    std::size_t finite = 0;
    for (const TrialRecord& r : records)
      if (r.M == a.M && !r.diverged) {
        loss += r.final_loss;
        ++finite;
      }
    const double n = static_cast<double>(a.trials);
    a.success_rate /= n;
    a.mean_active /= n;
    a.mean_silent /= n;
    a.mean_final_loss = finite ? loss / static_cast<double>(finite) : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

inline TrialRecord run_toy_trial(const Dataset& data, std::size_t m, std::size_t trial, std::uint64_t seed,
                                 const TrainConfig& cfg, double threshold) {
  TrialRecord rec;
  rec.M = m;
  rec.trial = trial;
  rec.seed = seed;
  const LossSpec loss = LossSpec::squared_l2();
  try {
    TrainResult r = train(init(BranchArch::scalar_perceptron(), m, seed), data, loss, cfg);
    rec.success = success(r.model, data, cfg.success_delta);
    rec.final_loss = mean_loss(r.model, loss, data);
    rec.steps = r.trace.losses.size();
    const speclab::ResponseMatrix F = speclab::response_matrix(r.model, data);
    const speclab::ActiveSplit split = speclab::active_branches(F, threshold);
    rec.active = split.active.size();
    rec.silent = split.silent.size();
    rec.covariance = speclab::covariance(F);
  } catch (const DivergenceError& e) {
    rec.diverged = true;
    rec.final_loss = std::numeric_limits<double>::quiet_NaN();
    rec.steps = e.step();
    rec.silent = m;
    rec.covariance = Matrix::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
  }
  return rec;
}

inline std::string sweep_csv(const SweepResult& r) {
  std::ostringstream os;
  os << "M,trial,seed,success,diverged,active,silent,final_loss,steps\n";
  for (const TrialRecord& t : r.records)
    os << t.M << "," << t.trial << "," << t.seed << "," << t.success << "," << t.diverged << "," << t.active << ","
       << t.silent << "," << io::num(t.final_loss) << "," << t.steps << "\n";
  return os.str();
}

inline nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline SweepResult run_toy_sweep(const ExperimentSpec& spec) {
  if (spec.M_values.empty()) throw std::invalid_argument("sweep needs at least one branch count");
  if (spec.trials < 1) throw std::invalid_argument("sweep needs at least one trial");
  for (std::size_t m : spec.M_values)
    if (m < 1) throw std::invalid_argument("branch count must be at least 1");
  const std::string dataset = spec.name == "toy_sweep" ? "toy1" : spec.name;
  const Dataset data = toy_dataset(dataset);

  SweepResult res;
  res.records.resize(spec.M_values.size() * spec.trials);
  parallel_for(res.records.size(), spec.jobs, [&](std::size_t i) {
    const std::size_t m = spec.M_values[i / spec.trials], t = i % spec.trials;
    res.records[i] = run_toy_trial(data, m, t, trial_seed(spec.seed, m, t), spec.train, spec.active_threshold);
  });
  res.aggregates = aggregate(res.records);

  const auto& dir = spec.output_dir;
  io::write_text(dir / "results.csv", sweep_csv(res));
  nlohmann::json per_m = nlohmann::json::array();
  io::Series rate{"success rate", {}, {}}, active{"active", {}, {}}, silent{"silent", {}, {}};
  for (const MAggregate& a : res.aggregates) {
    per_m.push_back({{"M", a.M}, {"trials", a.trials}, {"success_rate", a.success_rate},
                     {"mean_active", a.mean_active}, {"mean_silent", a.mean_silent},
                     {"mean_final_loss", finite_or_null(a.mean_final_loss)}});
    const double m = static_cast<double>(a.M);
    rate.xs.push_back(m);
    rate.ys.push_back(a.success_rate);
    active.xs.push_back(m);
    active.ys.push_back(a.mean_active);
    silent.xs.push_back(m);
    silent.ys.push_back(a.mean_silent);
  }
  io::write_json(dir / "summary.json", {{"experiment", "toy_sweep"}, {"dataset", dataset}, {"per_M", per_m}});
  io::write_text(dir / "success_rate.svg", io::line_chart({rate}, dataset + ": success rate", "branches M", "rate"));
  io::write_text(dir / "active_silent.svg",
                 io::line_chart({active, silent}, dataset + ": active / silent branches", "branches M", "count"));
  // Up to ten example covariance matrices for the first M >= 10 (or the largest M).
  const auto pick = std::find_if(spec.M_values.begin(), spec.M_values.end(), [](std::size_t m) { return m >= 10; });
  const std::size_t show_m = pick != spec.M_values.end() ? *pick : spec.M_values.back();
  std::size_t shown = 0;
  for (const TrialRecord& t : res.records)
    if (t.M == show_m && shown < 10)
      io::write_text(dir / ("covariance_M" + std::to_string(show_m) + "_trial" + std::to_string(t.trial) + ".svg"),
                     io::heatmap(t.covariance, "F F^T, M=" + std::to_string(show_m) + ", trial " + std::to_string(shown++), 14.0));
  return res;
}

// ---- single toy run -----------------------------------------------------------

struct ToyRunReport {
  TrainResult result;
  speclab::ResponseMatrix response;
  Matrix covariance;
  speclab::ActiveSplit split;
  bool success = false;
};

// One training run with dynamics snapshots (branch outputs over time).
inline ToyRunReport run_toy(const ExperimentSpec& spec) {
  const Dataset data = toy_dataset(spec.name);
  if (spec.M_values.size() != 1) throw std::invalid_argument("a single toy run takes exactly one branch count");
  const std::size_t m = spec.M_values.front();
  TrainConfig cfg = spec.train;
  cfg.snapshot_every = spec.snapshot_every;
  ToyRunReport rep;
  rep.result = train(init(BranchArch::scalar_perceptron(), m, spec.seed), data, LossSpec::squared_l2(), cfg);
  rep.response = speclab::response_matrix(rep.result.model, data);
  rep.covariance = speclab::covariance(rep.response);
  rep.split = speclab::active_branches(rep.response, spec.active_threshold);
  rep.success = success(rep.result.model, data, cfg.success_delta);

  const auto& dir = spec.output_dir;
  const TrainTrace& tr = rep.result.trace;
  io::write_text(dir / "results.csv", io::trace_csv(tr));
  io::write_json(dir / "trace.json", io::trace_json(tr));
  io::write_json(dir / "model.json", to_json(rep.result.model));
  io::write_text(dir / "response.csv", io::matrix_csv(rep.response.F));
  io::write_text(dir / "covariance.csv", io::matrix_csv(rep.covariance));
  io::write_text(dir / "covariance.svg", io::heatmap(rep.covariance, "F F^T"));
  io::write_text(dir / "response.svg", io::heatmap(rep.response.F, "response v_i(x_j)"));
  // Dynamics: one panel per sample, one curve per branch.
  for (Eigen::Index j = 0; j < data.size(); ++j) {
    std::vector<io::Series> curves(m);
    for (std::size_t k = 0; k < m; ++k) curves[k].name = "v" + std::to_string(k + 1);
    for (const Snapshot& s : tr.snapshots)
      for (std::size_t k = 0; k < m; ++k) {
        curves[k].xs.push_back(static_cast<double>(s.step));
        curves[k].ys.push_back(s.branch_outputs[k](0, j));
      }
    io::write_text(dir / ("dynamics_x" + std::to_string(j) + ".svg"),
                   io::line_chart(curves, "x = " + io::num(data.inputs.x(0, j)), "step", "branch output"));
  }
  io::write_json(dir / "summary.json",
                 {{"experiment", spec.name}, {"M", m}, {"success", rep.success},
                  {"converged_at", tr.converged_at ? nlohmann::json(*tr.converged_at) : nlohmann::json(nullptr)},
                  {"steps", tr.losses.size()}, {"final_loss", mean_loss(rep.result.model, LossSpec::squared_l2(), data)},
                  {"active", rep.split.active}, {"silent", rep.split.silent},
                  {"covariance", io::matrix_json(rep.covariance)}});
  return rep;
}

// ---- classification -----------------------------------------------------------

struct ClassifyReport {
  BranchedModel initial;
  BranchedModel model;
  TrainTrace trace;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  Matrix class_contribution;  // M x C: mean true-class logit contribution per class
  Matrix confidence;          // M x N_test
  std::vector<std::vector<std::size_t>> top_samples;  // per branch, test indices
  Matrix covariance;
  speclab::ActiveSplit split;
  std::optional<speclab::HessianReport> hessian_init, hessian_final;
  std::optional<speclab::HessianReport> first_layer_init, first_layer_final;
};

inline double accuracy(const Matrix& logits, std::span<const std::size_t> labels) {
  std::size_t hit = 0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    Eigen::Index best = 0;
    logits.col(j).maxCoeff(&best);
    hit += static_cast<std::size_t>(best) == labels[static_cast<std::size_t>(j)];
  }
  return logits.cols() ? static_cast<double>(hit) / static_cast<double>(logits.cols()) : 0.0;
}

// Branch k's confidence on sample j: its contribution to the true-class logit
// minus its mean contribution to the other classes.
inline Matrix branch_confidence(const std::vector<Matrix>& per_branch, std::span<const std::size_t> labels) {
  const auto m = static_cast<Eigen::Index>(per_branch.size());
  const Eigen::Index n = per_branch.front().cols(), c = per_branch.front().rows();
  Matrix conf(m, n);
  for (Eigen::Index k = 0; k < m; ++k)
    for (Eigen::Index j = 0; j < n; ++j) {
      const Vector v = per_branch[static_cast<std::size_t>(k)].col(j);
      const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(j)]);
      conf(k, j) = c > 1 ? v(y) - (v.sum() - v(y)) / static_cast<double>(c - 1) : v(y);
    }
  return conf;
}

inline ClassifyReport run_classify(const ExperimentSpec& spec) {
  const ClassifyOptions& opt = spec.classify;
  if (opt.widths.size() < 2 || opt.widths.back() != opt.blobs.classes)
    throw std::invalid_argument("class-count mismatch between data and loss");
  if (opt.widths.front() != 2) throw std::invalid_argument("blob inputs are two-dimensional");
  BlobConfig blobs = opt.blobs;
  blobs.seed = spec.seed;
  const Dataset all = gaussian_blobs(blobs);
  const auto n = static_cast<std::size_t>(all.size());
  const auto n_test = static_cast<std::size_t>(std::lround(opt.test_fraction * static_cast<double>(n)));
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t j = 0; j < n; ++j) (j < n - n_test ? train_idx : test_idx).push_back(j);
  const Dataset train_set = all.select(train_idx);
  const Dataset test_set = all.select(test_idx);
  const LossSpec loss = LossSpec::clamped_cross_entropy(opt.blobs.classes);
  const BranchArch arch = BranchArch::mlp(opt.widths, 0.01, true);

  ClassifyReport rep;
  const double gain = opt.output_gain > 0.0 ? opt.output_gain : 1.0 / std::sqrt(static_cast<double>(opt.branches));
  rep.initial = init(arch, opt.branches, spec.seed, ResidualMode::None, gain);
  TrainConfig cfg = spec.train;
  cfg.seed = spec.seed;
  TrainResult tr = train(rep.initial, train_set, loss, cfg);
  rep.model = std::move(tr.model);
  rep.trace = std::move(tr.trace);
  rep.train_accuracy = accuracy(forward(rep.model, train_set.inputs), train_set.labels);
  rep.test_accuracy = accuracy(forward(rep.model, test_set.inputs), test_set.labels);

  const std::vector<Matrix> per_branch = forward_all(rep.model, test_set.inputs);
  const std::size_t C = opt.blobs.classes;
  rep.class_contribution = Matrix::Zero(static_cast<Eigen::Index>(opt.branches), static_cast<Eigen::Index>(C));
  std::vector<double> class_count(C, 0.0);
  for (std::size_t j = 0; j < test_set.labels.size(); ++j) class_count[test_set.labels[j]] += 1.0;
  for (std::size_t k = 0; k < opt.branches; ++k)
    for (std::size_t j = 0; j < test_set.labels.size(); ++j) {
      const std::size_t y = test_set.labels[j];
      rep.class_contribution(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(y)) +=
          per_branch[k](static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(j)) / class_count[y];
    }
  rep.confidence = branch_confidence(per_branch, test_set.labels);
  const auto top = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(opt.top_fraction * static_cast<double>(test_idx.size()))));
  for (std::size_t k = 0; k < opt.branches; ++k) {
    std::vector<std::size_t> order(test_idx.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return rep.confidence(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(a)) >
             rep.confidence(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(b));
    });
    order.resize(std::min(top, order.size()));
    rep.top_samples.push_back(std::move(order));
  }
  const speclab::ResponseMatrix F = speclab::response_matrix(rep.model, test_set);
  rep.covariance = speclab::covariance(F);
  rep.split = speclab::active_branches(F, spec.active_threshold);

  if (opt.hessian) {
    std::vector<std::size_t> hs(std::min(opt.hessian_samples, train_idx.size()));
    std::iota(hs.begin(), hs.end(), std::size_t{0});
    const Dataset hdata = train_set.select(hs);
    const auto first = speclab::first_layer_indices(arch);
    rep.hessian_init = speclab::hessian(rep.initial, loss, hdata);
    rep.hessian_final = speclab::hessian(rep.model, loss, hdata);
    rep.first_layer_init = speclab::restrict_hessian(*rep.hessian_init, first);
    rep.first_layer_final = speclab::restrict_hessian(*rep.hessian_final, first);
  }

  const auto& dir = spec.output_dir;
  {
    std::ostringstream os;
    os << "branch,test_sample,label,confidence\n";
    for (Eigen::Index k = 0; k < rep.confidence.rows(); ++k)
      for (Eigen::Index j = 0; j < rep.confidence.cols(); ++j)
        os << k << "," << j << "," << test_set.labels[static_cast<std::size_t>(j)] << "," << io::num(rep.confidence(k, j)) << "\n";
    io::write_text(dir / "results.csv", os.str());
  }
  io::write_text(dir / "trace.csv", io::trace_csv(rep.trace));
  io::write_text(dir / "class_contribution.csv", io::matrix_csv(rep.class_contribution));
  io::write_text(dir / "class_contribution.svg", io::heatmap(rep.class_contribution, "branch x class contribution", 20.0));
  io::write_text(dir / "confidence.svg", io::heatmap(rep.confidence, "branch x test-sample confidence", 3.0));
  io::write_text(dir / "covariance.csv", io::matrix_csv(rep.covariance));
  io::write_text(dir / "covariance.svg", io::heatmap(rep.covariance, "F F^T", 16.0));
  io::write_json(dir / "model.json", to_json(rep.model));
  nlohmann::json summary = {{"experiment", "classify"},
                            {"M", opt.branches},
                            {"train_accuracy", rep.train_accuracy},
                            {"test_accuracy", rep.test_accuracy},
                            {"active", rep.split.active},
                            {"silent", rep.split.silent},
                            {"covariance", io::matrix_json(rep.covariance)},
                            {"class_contribution", io::matrix_json(rep.class_contribution)},
                            {"top_samples", rep.top_samples},
                            {"final_loss", rep.trace.losses.empty() ? 0.0 : rep.trace.losses.back()}};
  if (opt.hessian) {
    const auto metrics = [](const speclab::HessianReport& h) {
      return nlohmann::json{{"off_block_ratio", h.off_block_ratio}, {"max_entry_ratio", h.max_entry_ratio},
                            {"asymmetry", h.asymmetry}, {"size", h.H.rows()}};
    };
    summary["hessian"] = {{"init", metrics(*rep.hessian_init)}, {"final", metrics(*rep.hessian_final)},
                          {"first_layer_init", metrics(*rep.first_layer_init)},
                          {"first_layer_final", metrics(*rep.first_layer_final)}};
    io::write_text(dir / "hessian_first_layer_init.svg", io::heatmap(rep.first_layer_init->H, "first-layer Hessian, init", 4.0));
    io::write_text(dir / "hessian_first_layer_final.svg", io::heatmap(rep.first_layer_final->H, "first-layer Hessian, converged", 4.0));
    io::write_text(dir / "hessian_blocks_init.csv", io::matrix_csv(rep.hessian_init->per_pair_block_norms));
    io::write_text(dir / "hessian_blocks_final.csv", io::matrix_csv(rep.hessian_final->per_pair_block_norms));
  }
  io::write_json(dir / "summary.json", summary);
  return rep;
}

// ---- residual decomposition -----------------------------------------------------

struct DecomposeReport {
  BranchedModel model;
  TrainTrace trace;
  Dataset data;
  double relative_error = 0.0;     // ||f(X) - X||_F / ||X||_F
  double max_sum_mismatch = 0.0;   // |R + sum_k v_k - f| (unclamped model)
  Matrix covariance;
  speclab::ActiveSplit split;
  Vector branch_norms;
  Matrix alignment;  // M x 3: |corr| of branch output with smooth / texture / dots parts
};

inline double abs_corr(const Vector& a, const Vector& b) {
  const Vector ca = a.array() - a.mean(), cb = b.array() - b.mean();
  const double d = ca.norm() * cb.norm();
  return d > 0.0 ? std::abs(ca.dot(cb)) / d : 0.0;
}

inline DecomposeReport run_decompose(const ExperimentSpec& spec) {
  const DecomposeOptions& opt = spec.decompose;
  ImageConfig icfg = opt.images;
  icfg.seed = spec.seed;
  std::vector<ImageParts> parts;
  Matrix X = synthetic_images(icfg, &parts);
  if (opt.constant_images)
    for (Eigen::Index j = 0; j < X.cols(); ++j) X.col(j).setConstant(X.col(j).mean());
  const auto side = static_cast<Eigen::Index>(icfg.side);
  const auto pixels = static_cast<std::size_t>(side * side);

  DecomposeReport rep;
  rep.data.inputs.x = X;
  rep.data.targets = X;
  const diffusion::DiffusionBatch bands = diffusion::residual_for_model(
      X, side, side, diffusion::SmoothingOperator::laplacian(opt.operator_weight), opt.dt, opt.branches);
  diffusion::attach(rep.data.inputs, bands, opt.branches);

  const BranchArch arch = BranchArch::mlp({pixels, opt.hidden, pixels});
  TrainResult tr = train(init(arch, opt.branches, spec.seed, ResidualMode::Diffusion), rep.data,
                         LossSpec::squared_l2(), spec.train);
  rep.model = std::move(tr.model);
  rep.trace = std::move(tr.trace);

  const std::vector<Matrix> per_branch = forward_all(rep.model, rep.data.inputs);
  const Matrix f = aggregate_outputs(rep.model, per_branch, rep.data.inputs);
  rep.relative_error = (f - X).norm() / X.norm();
  Matrix manual = rep.data.inputs.residual;
  for (const Matrix& v : per_branch) manual += v;
  rep.max_sum_mismatch = (manual - f).cwiseAbs().maxCoeff();

  const speclab::ResponseMatrix F = speclab::response_matrix(rep.model, rep.data);
  rep.covariance = speclab::covariance(F);
  rep.split = speclab::active_branches(F, spec.active_threshold);
  rep.branch_norms = F.branch_norms;
  rep.alignment = Matrix::Zero(static_cast<Eigen::Index>(opt.branches), 3);
  if (!opt.constant_images) {
    for (std::size_t k = 0; k < opt.branches; ++k)
      for (Eigen::Index j = 0; j < X.cols(); ++j) {
        const Vector v = per_branch[k].col(j);
        const ImageParts& p = parts[static_cast<std::size_t>(j)];
        const Matrix* comps[] = {&p.smooth, &p.texture, &p.dots};
        for (int c = 0; c < 3; ++c) {
          const RowMajorMatrix rm = *comps[c];
          rep.alignment(static_cast<Eigen::Index>(k), c) +=
              abs_corr(v, Eigen::Map<const Vector>(rm.data(), side * side)) / static_cast<double>(X.cols());
        }
      }
  }

  const auto& dir = spec.output_dir;
  const auto image = [&](const Matrix& m, Eigen::Index j) {
    const Vector col = m.col(j);
    return Matrix(Eigen::Map<const RowMajorMatrix>(col.data(), side, side));
  };
  for (Eigen::Index j = 0; j < std::min<Eigen::Index>(4, X.cols()); ++j) {
    std::vector<Matrix> imgs{image(X, j), image(rep.data.inputs.residual, j)};
    std::vector<std::string> labels{"x", "R"};
    for (std::size_t k = 0; k < opt.branches; ++k) {
      imgs.push_back(image(per_branch[k], j));
      labels.push_back("v" + std::to_string(k + 1));
    }
    imgs.push_back(image(f, j));
    labels.push_back("f");
    io::write_text(dir / ("decomposition_" + std::to_string(j) + ".svg"),
                   io::image_strip(imgs, labels, "sample " + std::to_string(j)));
    io::write_pgm(dir / ("sample" + std::to_string(j) + "_x.pgm"), imgs[0]);
    io::write_pgm(dir / ("sample" + std::to_string(j) + "_R.pgm"), imgs[1]);
  }
  {
    std::ostringstream os;
    os << "branch,response_norm,active,corr_smooth,corr_texture,corr_dots\n";
    for (std::size_t k = 0; k < opt.branches; ++k) {
      const bool on = std::find(rep.split.active.begin(), rep.split.active.end(), k) != rep.split.active.end();
      const auto kk = static_cast<Eigen::Index>(k);
      os << k << "," << io::num(rep.branch_norms(kk)) << "," << on << "," << io::num(rep.alignment(kk, 0)) << ","
         << io::num(rep.alignment(kk, 1)) << "," << io::num(rep.alignment(kk, 2)) << "\n";
    }
    io::write_text(dir / "results.csv", os.str());
  }
  io::write_text(dir / "trace.csv", io::trace_csv(rep.trace));
  io::write_text(dir / "covariance.csv", io::matrix_csv(rep.covariance));
  io::write_text(dir / "covariance.svg", io::heatmap(rep.covariance, "F F^T", 24.0));
  io::write_json(dir / "summary.json", {{"experiment", "decompose"},
                                        {"M", opt.branches},
                                        {"relative_error", rep.relative_error},
                                        {"max_sum_mismatch", rep.max_sum_mismatch},
                                        {"active", rep.split.active},
                                        {"silent", rep.split.silent},
                                        {"branch_norms", std::vector<double>(rep.branch_norms.data(), rep.branch_norms.data() + rep.branch_norms.size())},
                                        {"alignment", io::matrix_json(rep.alignment)},
                                        {"covariance", io::matrix_json(rep.covariance)}});
  return rep;
}

}  // namespace branchlab::experiments
