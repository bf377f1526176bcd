#pragma once

// Command-line front end. Config resolution order: subcommand defaults,
// BRANCHLAB_SEED, --config file, --set overrides, then explicit flags.
// Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config error.

#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "branchlab/experiments.hpp"
#include "branchlab/verify.hpp"

namespace branchlab::cli {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kConfig = 3 };

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CliConfig {
  std::string subcommand;
  std::optional<std::filesystem::path> config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> output_dir;
  std::optional<std::size_t> jobs;
  std::optional<std::string> m_range;
  std::optional<std::size_t> trials;
  std::string experiment = "toy1";
  std::optional<std::filesystem::path> model_path;
};

// "a..b" (inclusive), "a,b,c" or "a".
inline std::vector<std::size_t> parse_m_values(const std::string& text) {
  const auto number = [&](const std::string& s) -> long long {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (s.empty() || used != s.size()) throw UsageError("bad branch count '" + s + "' in --m " + text);
    if (v < 1) throw UsageError("branch counts must be at least 1 (got " + s + ")");
    return v;
  };
  std::vector<std::size_t> out;
  if (const auto dots = text.find(".."); dots != std::string::npos) {
    const long long a = number(text.substr(0, dots)), b = number(text.substr(dots + 2));
    if (a > b) throw UsageError("empty range --m " + text);
    for (long long m = a; m <= b; ++m) out.push_back(static_cast<std::size_t>(m));
    return out;
  }
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(static_cast<std::size_t>(number(item)));
  if (out.empty()) throw UsageError("empty --m");
  return out;
}

inline experiments::ExperimentSpec defaults_for(const CliConfig& c) {
  experiments::ExperimentSpec s;
  s.output_dir = std::filesystem::path("out") / c.subcommand;
  if (c.subcommand == "toy1" || c.subcommand == "toy2") {
    s.name = c.subcommand;
    s.M_values = {10};
  } else if (c.subcommand == "sweep") {
    if (c.experiment != "toy1" && c.experiment != "toy2")
      throw UsageError("sweep --experiment must be toy1 or toy2");
    s.name = c.experiment;
    s.M_values = parse_m_values("2..30");
  } else if (c.subcommand == "classify") {
    s.name = "classify";
    s.train = experiments::classify_train_defaults();
    s.M_values = {s.classify.branches};
  } else if (c.subcommand == "decompose" || c.subcommand == "diffuse") {
    s.name = c.subcommand;
    s.train = experiments::decompose_train_defaults();
    s.M_values = {s.decompose.branches};
  } else if (c.subcommand == "hessian") {
    s.name = c.experiment;
    s.M_values = {c.experiment == "classify" ? s.classify.branches : 10};
    if (c.experiment == "classify") s.train = experiments::classify_train_defaults();
  } else if (c.subcommand == "verify") {
    s.name = "verify";
    s.trials = 25;
  }
  return s;
}

// key=value with a dotted key into the spec JSON layout; the value is read as
// JSON when it parses and as a string otherwise.
inline nlohmann::json override_patch(const std::string& kv, const nlohmann::json& layout) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + kv + "'");
  const std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  std::vector<std::string> path;
  std::stringstream ss(key);
  for (std::string part; std::getline(ss, part, '.');) path.push_back(part);
  const nlohmann::json* node = &layout;
  for (const std::string& p : path) {
    if (!node->is_object() || !node->contains(p)) throw UsageError("unknown config key '" + key + "'");
    node = &node->at(p);
  }
  nlohmann::json patch = value;
  for (auto it = path.rbegin(); it != path.rend(); ++it) patch = nlohmann::json{{*it, patch}};
  return patch;
}

inline experiments::ExperimentSpec resolve(const CliConfig& c) {
  experiments::ExperimentSpec s = defaults_for(c);
  if (const char* env = std::getenv("BRANCHLAB_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      s.seed = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("BRANCHLAB_SEED is not an unsigned integer: ") + env);
    }
  }
  const nlohmann::json layout = experiments::to_json(s);
  try {
    if (c.config_path) {
      std::ifstream in(*c.config_path);
      if (!in) throw ConfigError("cannot read config " + c.config_path->string());
      const nlohmann::json j = nlohmann::json::parse(in);
      if (!j.is_object()) throw ConfigError("config must be a JSON object");
      s = experiments::spec_from_json(j, s);
    }
    for (const std::string& kv : c.overrides) s = experiments::spec_from_json(override_patch(kv, layout), s);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(e.what());
  } catch (const std::invalid_argument& e) {
    if (dynamic_cast<const UsageError*>(&e)) throw;
    throw ConfigError(e.what());
  }
  if (c.seed) s.seed = *c.seed;
  if (c.output_dir) s.output_dir = *c.output_dir;
  if (c.jobs) s.jobs = *c.jobs;
  if (c.trials) s.trials = *c.trials;
  if (c.m_range) {
    s.M_values = parse_m_values(*c.m_range);
    if (c.subcommand != "sweep" && s.M_values.size() != 1)
      throw UsageError(c.subcommand + " takes a single branch count");
  }
  if (c.subcommand == "classify" || (c.subcommand == "hessian" && c.experiment == "classify")) {
    if (c.m_range) s.classify.branches = s.M_values.front();
    s.M_values = {s.classify.branches};
  }
  if (c.subcommand == "decompose" || c.subcommand == "diffuse") {
    if (c.m_range) s.decompose.branches = s.M_values.front();
    s.M_values = {s.decompose.branches};
  }
  for (std::size_t m : s.M_values)
    if (m < 1) throw UsageError("branch counts must be at least 1");
  if (s.trials < 1) throw UsageError("--trials must be at least 1");
  return s;
}

inline nlohmann::json manifest(const CliConfig& c, const experiments::ExperimentSpec& s) {
  return {{"version", kVersion}, {"subcommand", c.subcommand}, {"config", experiments::to_json(s)}};
}

// ---- subcommands ----------------------------------------------------------------

inline int cmd_toy(const experiments::ExperimentSpec& s, std::ostream& out) {
  const experiments::ToyRunReport r = experiments::run_toy(s);
  out << s.name << " M=" << s.M_values.front() << " success=" << r.success << " steps=" << r.result.trace.losses.size()
      << " active=" << r.split.active.size() << " silent=" << r.split.silent.size() << "\n";
  return kOk;
}

inline int cmd_sweep(const experiments::ExperimentSpec& s, std::ostream& out) {
  const experiments::SweepResult r = experiments::run_toy_sweep(s);
  out << "M,success_rate,mean_active,mean_silent\n";
  for (const experiments::MAggregate& a : r.aggregates)
    out << a.M << "," << a.success_rate << "," << a.mean_active << "," << a.mean_silent << "\n";
  return kOk;
}

inline int cmd_classify(const experiments::ExperimentSpec& s, std::ostream& out) {
  const experiments::ClassifyReport r = experiments::run_classify(s);
  out << "train_accuracy=" << r.train_accuracy << " test_accuracy=" << r.test_accuracy
      << " active=" << r.split.active.size() << " silent=" << r.split.silent.size();
  if (r.hessian_init)
    out << " off_block_ratio " << r.hessian_init->off_block_ratio << " -> " << r.hessian_final->off_block_ratio;
  out << "\n";
  return kOk;
}

inline int cmd_decompose(const experiments::ExperimentSpec& s, std::ostream& out) {
  const experiments::DecomposeReport r = experiments::run_decompose(s);
  out << "relative_error=" << r.relative_error << " max_sum_mismatch=" << r.max_sum_mismatch
      << " active=" << r.split.active.size() << " silent=" << r.split.silent.size() << "\n";
  return kOk;
}

inline int cmd_hessian(const CliConfig& c, const experiments::ExperimentSpec& s, std::ostream& out) {
  BranchedModel model;
  Dataset data;
  LossSpec loss;
  if (c.experiment == "toy1" || c.experiment == "toy2") {
    data = experiments::toy_dataset(c.experiment);
    loss = LossSpec::squared_l2();
    model = init(BranchArch::scalar_perceptron(), s.M_values.front(), s.seed);
  } else if (c.experiment == "classify") {
    BlobConfig blobs = s.classify.blobs;
    blobs.seed = s.seed;
    const Dataset all = gaussian_blobs(blobs);
    std::vector<std::size_t> idx(std::min<std::size_t>(s.classify.hessian_samples, static_cast<std::size_t>(all.size())));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    data = all.select(idx);
    loss = LossSpec::clamped_cross_entropy(blobs.classes);
    const double gain = s.classify.output_gain > 0.0 ? s.classify.output_gain
                                                     : 1.0 / std::sqrt(static_cast<double>(s.classify.branches));
    model = init(BranchArch::mlp(s.classify.widths, 0.01, true), s.classify.branches, s.seed, ResidualMode::None, gain);
  } else {
    throw UsageError("hessian --experiment must be toy1, toy2 or classify");
  }
  if (c.model_path) model = model_from_json(io::read_json(*c.model_path));
  const speclab::HessianReport h = speclab::hessian(model, loss, data);
  const auto& dir = s.output_dir;
  io::write_text(dir / "hessian.csv", io::matrix_csv(h.H));
  io::write_text(dir / "blocks.csv", io::matrix_csv(h.per_pair_block_norms));
  io::write_text(dir / "hessian.svg", io::heatmap(h.H, "Hessian", h.H.rows() > 200 ? 2.0 : 6.0));
  io::write_json(dir / "summary.json", {{"experiment", "hessian"},
                                        {"dataset", c.experiment},
                                        {"parameters", h.H.rows()},
                                        {"off_block_ratio", h.off_block_ratio},
                                        {"max_entry_ratio", h.max_entry_ratio},
                                        {"asymmetry", h.asymmetry},
                                        {"step", h.step},
                                        {"block_norms", io::matrix_json(h.per_pair_block_norms)}});
  out << "parameters=" << h.H.rows() << " off_block_ratio=" << h.off_block_ratio << " asymmetry=" << h.asymmetry << "\n";
  return kOk;
}

inline int cmd_diffuse(const experiments::ExperimentSpec& s, std::ostream& out) {
  ImageConfig icfg = s.decompose.images;
  icfg.seed = s.seed;
  icfg.count = 1;
  const Matrix flat = synthetic_images(icfg);
  const auto side = static_cast<Eigen::Index>(icfg.side);
  const Vector col = flat.col(0);
  const Matrix img = Eigen::Map<const RowMajorMatrix>(col.data(), side, side);
  const diffusion::DiffusionDecomposition d = diffusion::diffuse(
      img, diffusion::SmoothingOperator::laplacian(s.decompose.operator_weight), s.decompose.dt, s.decompose.branches);
  const double err = (img - d.reconstruction()).cwiseAbs().maxCoeff() / img.cwiseAbs().maxCoeff();
  const auto& dir = s.output_dir;
  std::vector<Matrix> imgs{img};
  std::vector<std::string> labels{"x"};
  std::ostringstream csv;
  csv << "band,norm\n";
  for (std::size_t k = 0; k < d.phis.size(); ++k) {
    imgs.push_back(d.phis[k]);
    labels.push_back("phi" + std::to_string(k + 1));
    io::write_pgm(dir / ("phi" + std::to_string(k + 1) + ".pgm"), d.phis[k]);
    csv << k + 1 << "," << io::num(d.phis[k].norm()) << "\n";
  }
  csv << "R," << io::num(d.R.norm()) << "\n";
  imgs.push_back(d.R);
  labels.push_back("R");
  io::write_pgm(dir / "x.pgm", img);
  io::write_pgm(dir / "R.pgm", d.R);
  io::write_text(dir / "results.csv", csv.str());
  io::write_text(dir / "bands.svg", io::image_strip(imgs, labels, "diffusion bands"));
  io::write_json(dir / "summary.json",
                 {{"experiment", "diffuse"}, {"bands", d.phis.size()}, {"dt", d.dt}, {"reconstruction_error", err}});
  out << "bands=" << d.phis.size() << " reconstruction_error=" << err << "\n";
  return kOk;
}

inline int cmd_verify(const experiments::ExperimentSpec& s, std::ostream& out) {
  std::size_t pass = 0, fail = 0;
  nlohmann::json checks = nlohmann::json::array();
  const auto record = [&](const std::string& name, std::uint64_t seed, double value, double limit) {
    const bool ok = value < limit;
    (ok ? pass : fail) += 1;
    checks.push_back({{"check", name}, {"seed", seed}, {"value", value}, {"limit", limit}, {"pass", ok}});
  };
  for (std::size_t i = 0; i < s.trials; ++i) {
    const std::uint64_t seed = s.seed + i;
    const verify::Triple t = verify::random_triple(seed);
    record("gradient_vs_fd", seed, verify::gradient_relative_error(t), 1e-5);
    record("factorization", seed, verify::factorization_mismatch(t), 1e-8);
    const verify::ReconstructionCheck r = verify::reconstruction_check(seed);
    record("reconstruction", seed, r.reconstruction_error, 1e-10);
    record("residual", seed, r.residual_error, 1e-12);
  }
  io::write_json(s.output_dir / "summary.json", {{"experiment", "verify"}, {"pass", pass}, {"fail", fail}, {"checks", checks}});
  out << "verify: " << pass << " passed, " << fail << " failed\n";
  return fail == 0 ? kOk : kFailure;
}

// ---- entry point -------------------------------------------------------------

// `args` excludes the program name.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Branched-network specialization lab", "branchlab"};
  app.set_version_flag("--version", kVersion);
  CliConfig c;
  std::string config_path, output_dir, model_path;
  std::uint64_t seed = 0;
  std::size_t jobs = 0, trials = 0;
  std::string m_range;
  auto* o_config = app.add_option("--config", config_path, "JSON config file");
  app.add_option("--set", c.overrides, "override a config key, e.g. train.learning_rate=0.1")->take_all();
  auto* o_seed = app.add_option("--seed", seed, "base seed (falls back to BRANCHLAB_SEED)");
  auto* o_out = app.add_option("--output-dir", output_dir, "directory for all outputs");
  auto* o_jobs = app.add_option("--jobs", jobs, "worker threads (0: all cores)");
  auto* o_m = app.add_option("--m", m_range, "branch count, list a,b or inclusive range a..b");
  auto* o_trials = app.add_option("--trials", trials, "trials per branch count");
  app.add_option("--experiment", c.experiment, "toy1, toy2 or classify (sweep, hessian)");
  auto* o_model = app.add_option("--model", model_path, "model.json to analyze (hessian)");

  const std::pair<const char*, const char*> subs[] = {
      {"toy1", "single Toy1 run with dynamics"},
      {"toy2", "single Toy2 run with dynamics"},
      {"sweep", "success / activity sweep over M"},
      {"classify", "blob classification with clamped logits"},
      {"decompose", "residual diffusion decomposition of synthetic images"},
      {"hessian", "finite-difference Hessian and block metrics"},
      {"diffuse", "diffusion bands of one synthetic image"},
      {"verify", "gradient, factorization and reconstruction identities"}};
  for (const auto& [name, help] : subs) app.add_subcommand(name, help)->fallthrough();
  app.require_subcommand(1);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kUsage;
  }
  c.subcommand = app.get_subcommands().front()->get_name();
  if (*o_config) c.config_path = config_path;
  if (*o_seed) c.seed = seed;
  if (*o_out) c.output_dir = output_dir;
  if (*o_jobs) c.jobs = jobs;
  if (*o_m) c.m_range = m_range;
  if (*o_trials) c.trials = trials;
  if (*o_model) c.model_path = model_path;

  experiments::ExperimentSpec spec;
  try {
    spec = resolve(c);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  }

  try {
    io::write_json(spec.output_dir / "manifest.json", manifest(c, spec));
    const std::string& sub = c.subcommand;
    if (sub == "toy1" || sub == "toy2") return cmd_toy(spec, out);
    if (sub == "sweep") return cmd_sweep(spec, out);
    if (sub == "classify") return cmd_classify(spec, out);
    if (sub == "decompose") return cmd_decompose(spec, out);
    if (sub == "hessian") return cmd_hessian(c, spec, out);
    if (sub == "diffuse") return cmd_diffuse(spec, out);
    return cmd_verify(spec, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace branchlab::cli
