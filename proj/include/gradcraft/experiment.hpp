#pragma once

// Experiment configuration, the multi-seed runner, the tau/epsilon sweep and
// the gradient-dump crafting tool. Everything written to disk is
// deterministic: fixed ordering, no timestamps, shortest round-trip floats.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gradcraft/crafting.hpp"
#include "gradcraft/diagnostics.hpp"
#include "gradcraft/errors.hpp"
#include "gradcraft/format.hpp"
#include "gradcraft/synthbench.hpp"
#include "gradcraft/trainer.hpp"

namespace gradcraft {

using Json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

/// Process exit codes shared by every subcommand.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitParse = 2,
  kExitValidation = 3,
  kExitNumerical = 4,
  kExitIo = 5,
};

class IoError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Parsing helpers.

namespace detail {

inline std::pair<std::size_t, std::size_t> line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1;
  std::size_t col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

inline Json parse_json_text(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    // nlohmann reports the byte just past the offending token
    const auto [line, col] = line_col(text, e.byte > 0 ? e.byte - 1 : 0);
    throw ParseError(what + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + e.what(),
                     line, col);
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes via a temporary sibling and rename, so a failed run leaves no
/// partial file behind.
inline void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out << content;
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

// Typed field access with a schema path for error messages.
class Fields {
 public:
  Fields(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ValidationError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return obj_.contains(key); }
  const Json& raw(const std::string& key) const { return obj_.at(key); }

  double number(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    const Json& v = obj_.at(key);
    if (!v.is_number()) throw ValidationError(at(key), "expected a number");
    return v.get<double>();
  }

  std::uint64_t unsigned_int(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    const Json& v = obj_.at(key);
    if (!v.is_number_unsigned()) throw ValidationError(at(key), "expected a non-negative integer");
    return v.get<std::uint64_t>();
  }

  bool boolean(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const Json& v = obj_.at(key);
    if (!v.is_boolean()) throw ValidationError(at(key), "expected true or false");
    return v.get<bool>();
  }

  std::string string(const std::string& key, const std::string& fallback) const {
    if (!has(key)) return fallback;
    const Json& v = obj_.at(key);
    if (!v.is_string()) throw ValidationError(at(key), "expected a string");
    return v.get<std::string>();
  }

  std::vector<double> numbers(const std::string& key, std::vector<double> fallback) const {
    if (!has(key)) return fallback;
    const Json& v = obj_.at(key);
    if (!v.is_array()) throw ValidationError(at(key), "expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number())
        throw ValidationError(at(key) + "[" + std::to_string(i) + "]", "expected a number");
      out.push_back(v[i].get<double>());
    }
    return out;
  }

  void reject_unknown(const std::set<std::string>& known) const {
    for (const auto& [k, v] : obj_.items()) {
      if (!known.count(k)) throw ValidationError(at(k), "unknown field");
    }
  }

 private:
  const Json& obj_;
  std::string path_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Experiment configuration.

enum class Benchmark { Quadratic, Classification };

inline std::string_view to_string(Benchmark b) {
  return b == Benchmark::Quadratic ? "quadratic" : "classification";
}
inline std::string_view to_string(Optimizer o) { return o == Optimizer::SGD ? "sgd" : "adam"; }
inline std::string_view to_string(Activation a) {
  return a == Activation::Tanh ? "tanh" : "identity";
}

struct StrategyEntry {
  std::string label;
  CraftConfig craft;
  double learning_rate = 0.01;
};

struct SweepGrid {
  std::vector<double> tau;
  std::vector<double> epsilon;
  Strategy strategy = Strategy::GradCraft;
  double learning_rate = 0.01;
};

struct ExperimentConfig {
  Benchmark benchmark = Benchmark::Quadratic;
  SyntheticTaskSpec task;
  std::size_t hidden = 8;
  Activation activation = Activation::Tanh;
  double init_std = 0.01;
  std::vector<StrategyEntry> strategies;
  Optimizer optimizer = Optimizer::SGD;
  double learning_rate = 0.01;
  std::size_t max_steps = 500;
  std::size_t batch_size = 256;
  std::size_t patience = 10;
  std::size_t eval_every = 10;
  std::size_t snapshot_stride = 1;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "gradcraft_out";
  std::optional<SweepGrid> sweep;
};

/// The tau grid {0, 0.1, ..., 1.0}.
inline std::vector<double> default_tau_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 10; ++i) g.push_back(i / 10.0);
  return g;
}

/// The epsilon grid {0, 1e-12, ..., 1e-7}.
inline std::vector<double> default_epsilon_grid() {
  return {0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7};
}

namespace detail {

inline CraftConfig parse_craft(const Fields& f, const CraftConfig& base) {
  CraftConfig c = base;
  c.tau = f.number("tau", base.tau);
  c.epsilon = f.number("epsilon", base.epsilon);
  c.conflict_tol = f.number("conflict_tol", base.conflict_tol);
  c.residual_tol = f.number("residual_tol", base.residual_tol);
  c.rng_seed = f.unsigned_int("rng_seed", base.rng_seed);
  if (!(c.tau >= 0.0 && c.tau <= 1.0)) throw ValidationError(f.at("tau"), "must lie in [0, 1]");
  if (!(c.epsilon >= 0.0)) throw ValidationError(f.at("epsilon"), "must be >= 0");
  if (!(c.conflict_tol >= 0.0)) throw ValidationError(f.at("conflict_tol"), "must be >= 0");
  if (!(c.residual_tol > 0.0)) throw ValidationError(f.at("residual_tol"), "must be > 0");
  return c;
}

inline Strategy parse_strategy_field(const Fields& f, const std::string& key) {
  const std::string name = f.string(key, "");
  if (name.empty()) throw ValidationError(f.at(key), "missing strategy name");
  const auto s = parse_strategy(name);
  if (!s) throw ValidationError(f.at(key), "unknown strategy '" + name + "'");
  return *s;
}

inline std::size_t size_field(const Fields& f, const std::string& key, std::size_t fallback) {
  return static_cast<std::size_t>(f.unsigned_int(key, fallback));
}

}  // namespace detail

/// Parses and validates an experiment config. Unknown fields are rejected.
inline ExperimentConfig parse_experiment_config(const std::string& text,
                                                const std::string& source = "config") {
  using detail::Fields;
  const Json root = detail::parse_json_text(text, source);
  const Fields f(root, "");
  f.reject_unknown({"format_version", "benchmark", "task", "model", "strategies", "optimizer",
                    "learning_rate", "max_steps", "batch_size", "patience", "eval_every",
                    "snapshot_stride", "seeds", "output_dir", "sweep"});

  const auto version = f.unsigned_int("format_version", kFormatVersion);
  if (version != kFormatVersion)
    throw ValidationError("format_version", "unsupported version " + std::to_string(version));

  ExperimentConfig c;
  const std::string bench = f.string("benchmark", "quadratic");
  if (bench == "quadratic") c.benchmark = Benchmark::Quadratic;
  else if (bench == "classification") c.benchmark = Benchmark::Classification;
  else throw ValidationError("benchmark", "expected 'quadratic' or 'classification'");

  if (f.has("task")) {
    const Fields t(f.raw("task"), "task");
    t.reject_unknown({"n_tasks", "conflict_angle", "task_correlation", "norm_ratio", "dimension",
                      "curvature_condition", "samples", "d_in", "group_count", "signal",
                      "group_bias_std"});
    auto& s = c.task;
    s.n_tasks = detail::size_field(t, "n_tasks", s.n_tasks);
    s.conflict_angle = t.number("conflict_angle", s.conflict_angle);
    s.norm_ratio = t.number("norm_ratio", s.norm_ratio);
    s.dimension = detail::size_field(t, "dimension", s.dimension);
    s.curvature_condition = t.number("curvature_condition", s.curvature_condition);
    s.samples = detail::size_field(t, "samples", s.samples);
    s.d_in = detail::size_field(t, "d_in", s.d_in);
    s.group_count = detail::size_field(t, "group_count", s.group_count);
    s.signal = t.number("signal", s.signal);
    s.group_bias_std = t.number("group_bias_std", s.group_bias_std);
    if (t.has("task_correlation")) {
      const Json& m = t.raw("task_correlation");
      if (!m.is_array()) throw ValidationError("task.task_correlation", "expected an array of rows");
      for (std::size_t i = 0; i < m.size(); ++i) {
        const std::string p = "task.task_correlation[" + std::to_string(i) + "]";
        if (!m[i].is_array()) throw ValidationError(p, "expected an array of numbers");
        std::vector<double> row;
        for (std::size_t j = 0; j < m[i].size(); ++j) {
          if (!m[i][j].is_number())
            throw ValidationError(p + "[" + std::to_string(j) + "]", "expected a number");
          row.push_back(m[i][j].get<double>());
        }
        s.task_correlation.push_back(std::move(row));
      }
    }
    try {
      s.validate();
      (void)s.correlation();
      (void)psd_factor(s.correlation());
    } catch (const UsageError& e) {
      throw ValidationError("task", e.what());
    }
    if (c.benchmark == Benchmark::Quadratic && s.n_tasks > s.dimension)
      throw ValidationError("task.n_tasks", "must not exceed task.dimension");
    if (c.benchmark == Benchmark::Classification && s.n_tasks > s.d_in)
      throw ValidationError("task.n_tasks", "must not exceed task.d_in");
    if (c.benchmark == Benchmark::Classification && s.samples < 10)
      throw ValidationError("task.samples", "must be >= 10");
    if (c.benchmark == Benchmark::Classification && s.group_count == 0)
      throw ValidationError("task.group_count", "must be >= 1");
  }

  if (f.has("model")) {
    const Fields m(f.raw("model"), "model");
    m.reject_unknown({"hidden", "activation", "init_std"});
    c.hidden = detail::size_field(m, "hidden", c.hidden);
    if (c.hidden == 0) throw ValidationError("model.hidden", "must be >= 1");
    const std::string act = m.string("activation", "tanh");
    if (act == "tanh") c.activation = Activation::Tanh;
    else if (act == "identity") c.activation = Activation::Identity;
    else throw ValidationError("model.activation", "expected 'tanh' or 'identity'");
    c.init_std = m.number("init_std", c.init_std);
    if (!(c.init_std >= 0.0)) throw ValidationError("model.init_std", "must be >= 0");
  }

  const std::string opt = f.string("optimizer", "sgd");
  if (opt == "sgd") c.optimizer = Optimizer::SGD;
  else if (opt == "adam") c.optimizer = Optimizer::Adam;
  else throw ValidationError("optimizer", "expected 'sgd' or 'adam'");
  c.learning_rate = f.number("learning_rate", c.learning_rate);
  if (!(c.learning_rate > 0.0)) throw ValidationError("learning_rate", "must be > 0");

  c.max_steps = detail::size_field(f, "max_steps", c.max_steps);
  if (c.max_steps == 0) throw ValidationError("max_steps", "must be >= 1");
  c.batch_size = detail::size_field(f, "batch_size", c.batch_size);
  c.patience = detail::size_field(f, "patience", c.patience);
  c.eval_every = detail::size_field(f, "eval_every", c.eval_every);
  if (c.eval_every == 0) throw ValidationError("eval_every", "must be >= 1");
  c.snapshot_stride = detail::size_field(f, "snapshot_stride", c.snapshot_stride);
  if (c.snapshot_stride == 0) throw ValidationError("snapshot_stride", "must be >= 1");
  c.output_dir = f.string("output_dir", c.output_dir);

  if (f.has("seeds")) {
    const Json& s = f.raw("seeds");
    if (!s.is_array()) throw ValidationError("seeds", "expected an array of integers");
    c.seeds.clear();
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (!s[i].is_number_unsigned())
        throw ValidationError("seeds[" + std::to_string(i) + "]", "expected a non-negative integer");
      c.seeds.push_back(s[i].get<std::uint64_t>());
    }
  }
  if (c.seeds.empty()) throw ValidationError("seeds", "need at least one seed");

  if (f.has("strategies")) {
    const Json& arr = f.raw("strategies");
    if (!arr.is_array()) throw ValidationError("strategies", "expected an array");
    std::set<std::string> labels;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string p = "strategies[" + std::to_string(i) + "]";
      StrategyEntry e;
      if (arr[i].is_string()) {
        const auto s = parse_strategy(arr[i].get<std::string>());
        if (!s) throw ValidationError(p, "unknown strategy '" + arr[i].get<std::string>() + "'");
        e.craft.strategy = *s;
        e.label = std::string(to_string(*s));
        e.learning_rate = c.learning_rate;
      } else {
        const Fields sf(arr[i], p);
        sf.reject_unknown({"strategy", "label", "tau", "epsilon", "conflict_tol", "residual_tol",
                           "rng_seed", "learning_rate"});
        CraftConfig base;
        base.strategy = detail::parse_strategy_field(sf, "strategy");
        e.craft = detail::parse_craft(sf, base);
        e.label = sf.string("label", std::string(to_string(base.strategy)));
        e.learning_rate = sf.number("learning_rate", c.learning_rate);
        if (!(e.learning_rate > 0.0)) throw ValidationError(sf.at("learning_rate"), "must be > 0");
      }
      if (e.label.empty() || e.label == "Single")
        throw ValidationError(p + ".label", "label must be non-empty and not 'Single'");
      if (!labels.insert(e.label).second)
        throw ValidationError(p + ".label", "duplicate label '" + e.label + "'");
      c.strategies.push_back(std::move(e));
    }
  }

  if (f.has("sweep")) {
    const Fields sw(f.raw("sweep"), "sweep");
    sw.reject_unknown({"tau", "epsilon", "strategy", "learning_rate"});
    SweepGrid g;
    g.tau = sw.numbers("tau", default_tau_grid());
    g.epsilon = sw.numbers("epsilon", default_epsilon_grid());
    if (sw.has("strategy")) g.strategy = detail::parse_strategy_field(sw, "strategy");
    g.learning_rate = sw.number("learning_rate", c.learning_rate);
    if (g.tau.empty()) throw ValidationError("sweep.tau", "grid must be non-empty");
    if (g.epsilon.empty()) throw ValidationError("sweep.epsilon", "grid must be non-empty");
    for (std::size_t i = 0; i < g.tau.size(); ++i) {
      if (!(g.tau[i] >= 0.0 && g.tau[i] <= 1.0))
        throw ValidationError("sweep.tau[" + std::to_string(i) + "]", "must lie in [0, 1]");
    }
    for (std::size_t i = 0; i < g.epsilon.size(); ++i) {
      if (!(g.epsilon[i] >= 0.0))
        throw ValidationError("sweep.epsilon[" + std::to_string(i) + "]", "must be >= 0");
    }
    if (!(g.learning_rate > 0.0)) throw ValidationError("sweep.learning_rate", "must be > 0");
    c.sweep = std::move(g);
  }

  if (c.strategies.empty() && !c.sweep)
    throw ValidationError("strategies", "need at least one strategy");
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return parse_experiment_config(detail::read_file(path), path.string());
}

/// The config with every default written out; parsing it back yields the
/// same config.
inline Json resolved_config_json(const ExperimentConfig& c) {
  Json j;
  j["format_version"] = kFormatVersion;
  j["benchmark"] = std::string(to_string(c.benchmark));
  Json t;
  t["n_tasks"] = c.task.n_tasks;
  t["conflict_angle"] = c.task.conflict_angle;
  if (!c.task.task_correlation.empty()) t["task_correlation"] = c.task.task_correlation;
  t["norm_ratio"] = c.task.norm_ratio;
  t["dimension"] = c.task.dimension;
  t["curvature_condition"] = c.task.curvature_condition;
  t["samples"] = c.task.samples;
  t["d_in"] = c.task.d_in;
  t["group_count"] = c.task.group_count;
  t["signal"] = c.task.signal;
  t["group_bias_std"] = c.task.group_bias_std;
  j["task"] = t;
  j["model"] = {{"hidden", c.hidden},
                {"activation", std::string(to_string(c.activation))},
                {"init_std", c.init_std}};
  Json strategies = Json::array();
  for (const auto& e : c.strategies) {
    strategies.push_back({{"strategy", std::string(to_string(e.craft.strategy))},
                          {"label", e.label},
                          {"tau", e.craft.tau},
                          {"epsilon", e.craft.epsilon},
                          {"conflict_tol", e.craft.conflict_tol},
                          {"residual_tol", e.craft.residual_tol},
                          {"rng_seed", e.craft.rng_seed},
                          {"learning_rate", e.learning_rate}});
  }
  j["strategies"] = strategies;
  j["optimizer"] = std::string(to_string(c.optimizer));
  j["learning_rate"] = c.learning_rate;
  j["max_steps"] = c.max_steps;
  j["batch_size"] = c.batch_size;
  j["patience"] = c.patience;
  j["eval_every"] = c.eval_every;
  j["snapshot_stride"] = c.snapshot_stride;
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  if (c.sweep) {
    j["sweep"] = {{"tau", c.sweep->tau},
                  {"epsilon", c.sweep->epsilon},
                  {"strategy", std::string(to_string(c.sweep->strategy))},
                  {"learning_rate", c.sweep->learning_rate}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// Environment.

/// GRADCRAFT_THREADS, else the hardware concurrency (at least 1).
inline std::size_t thread_count_from_env() {
  if (const char* v = std::getenv("GRADCRAFT_THREADS")) {
    try {
      const long n = std::stol(v);
      if (n > 0) return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// GRADCRAFT_OUTPUT_DIR when set and non-empty, else `configured`.
inline std::string output_dir_from_env(const std::string& configured) {
  if (const char* v = std::getenv("GRADCRAFT_OUTPUT_DIR"); v && *v) return v;
  return configured;
}

/// Runs fn(0..n-1) on up to `threads` workers. Each index is handled once;
/// results must be written to per-index slots by the callee.
inline void parallel_for(std::size_t n, std::size_t threads,
                         const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
}

// ---------------------------------------------------------------------------
// Running experiments.

struct RunOutcome {
  std::string label;
  std::uint64_t seed = 0;
  /// Set for the Single reference runs.
  std::optional<std::size_t> single_task;
  RunResult result;
};

struct ExperimentResult {
  ExperimentConfig config;
  /// Per seed, the T Single runs (classification only), then one run per
  /// strategy, in config order.
  std::vector<RunOutcome> runs;

  const RunOutcome* find(const std::string& label, std::uint64_t seed) const {
    for (const auto& r : runs) {
      if (r.label == label && r.seed == seed && !r.single_task) return &r;
    }
    return nullptr;
  }

  /// Per-task Single metrics for a seed, if every Single run succeeded.
  std::optional<TaskMetrics> single_metrics(std::uint64_t seed) const {
    TaskMetrics m;
    for (std::size_t t = 0; t < config.task.n_tasks; ++t) {
      const RunOutcome* found = nullptr;
      for (const auto& r : runs) {
        if (r.seed == seed && r.single_task == t) found = &r;
      }
      if (!found || found->result.status != RunStatus::Ok) return std::nullopt;
      m.auc.push_back(found->result.test_metrics.auc[t]);
      m.gauc.push_back(found->result.test_metrics.gauc[t]);
    }
    return m;
  }
};

namespace detail {

inline RunSpec run_spec_for(const ExperimentConfig& c, const CraftConfig& craft, double lr,
                            std::uint64_t seed, std::optional<std::size_t> single) {
  RunSpec s;
  s.single_task = single;
  s.craft = craft;
  s.optimizer = c.optimizer;
  s.learning_rate = lr;
  s.max_steps = c.max_steps;
  s.batch_size = c.batch_size;
  s.patience = c.patience;
  s.eval_every = c.eval_every;
  s.snapshot_stride = c.snapshot_stride;
  s.seed = seed;
  s.hidden = c.hidden;
  s.activation = c.activation;
  s.init_std = c.init_std;
  return s;
}

struct Job {
  std::string label;
  std::uint64_t seed;
  std::optional<std::size_t> single;
  CraftConfig craft;
  double learning_rate;
};

// Problems are generated once per seed, up front, and shared read-only.
struct Problems {
  std::map<std::uint64_t, QuadraticLandscape> landscapes;
  std::map<std::uint64_t, DataSplits> data;
};

inline Problems make_problems(const ExperimentConfig& c) {
  Problems p;
  for (std::uint64_t seed : c.seeds) {
    SyntheticTaskSpec spec = c.task;
    spec.seed = seed;
    if (c.benchmark == Benchmark::Quadratic) p.landscapes.emplace(seed, gen_quadratic(spec));
    else p.data.emplace(seed, gen_classification(spec));
  }
  return p;
}

inline std::vector<RunOutcome> execute_jobs(const ExperimentConfig& c, const Problems& problems,
                                            const std::vector<Job>& jobs, std::size_t threads) {
  std::vector<RunOutcome> out(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t i) {
    const Job& job = jobs[i];
    const RunSpec spec = run_spec_for(c, job.craft, job.learning_rate, job.seed, job.single);
    RunResult r = c.benchmark == Benchmark::Quadratic
                      ? train_quadratic(problems.landscapes.at(job.seed), spec)
                      : train_classification(problems.data.at(job.seed), spec);
    out[i] = RunOutcome{job.label, job.seed, job.single, std::move(r)};
  });
  return out;
}

inline std::vector<Job> single_jobs(const ExperimentConfig& c) {
  std::vector<Job> jobs;
  if (c.benchmark != Benchmark::Classification) return jobs;
  for (std::uint64_t seed : c.seeds) {
    for (std::size_t t = 0; t < c.task.n_tasks; ++t) {
      CraftConfig craft;
      craft.strategy = Strategy::EW;
      jobs.push_back({"Single", seed, t, craft, c.learning_rate});
    }
  }
  return jobs;
}

}  // namespace detail

/// Trains every (strategy, seed) pair (plus Single references for the
/// classification benchmark) without touching the filesystem.
inline ExperimentResult execute_experiment(const ExperimentConfig& c,
                                           std::size_t threads = thread_count_from_env()) {
  if (c.strategies.empty()) throw ValidationError("strategies", "need at least one strategy");
  const detail::Problems problems = detail::make_problems(c);
  std::vector<detail::Job> jobs = detail::single_jobs(c);
  for (std::uint64_t seed : c.seeds) {
    for (const auto& e : c.strategies) jobs.push_back({e.label, seed, std::nullopt, e.craft, e.learning_rate});
  }
  return {c, detail::execute_jobs(c, problems, jobs, threads)};
}

// ---------------------------------------------------------------------------
// Report emission.

namespace detail {

inline std::string cell(double x) { return format_double(x); }

inline Json snapshot_json(const BalanceSnapshot& s) {
  return {{"norm_ratio", s.norm_ratio},
          {"raw_norm_ratio", s.raw_norm_ratio},
          {"conflict_count", s.conflict_count},
          {"min_pairwise_cosine", s.min_pairwise_cosine},
          {"post_craft_min_alignment", s.post_craft_min_alignment},
          {"max_jitter", s.max_jitter},
          {"certified", s.certified},
          {"violation", s.violation}};
}

inline Json summary_json(const TrajectorySummary& s) {
  return {{"snapshots", s.snapshots},
          {"mean_norm_ratio", s.mean_norm_ratio},
          {"max_norm_ratio", s.max_norm_ratio},
          {"mean_raw_norm_ratio", s.mean_raw_norm_ratio},
          {"max_raw_norm_ratio", s.max_raw_norm_ratio},
          {"mean_conflict_count", s.mean_conflict_count},
          {"max_conflict_count", s.max_conflict_count},
          {"mean_min_pairwise_cosine", s.mean_min_pairwise_cosine},
          {"min_min_pairwise_cosine", s.min_min_pairwise_cosine},
          {"mean_post_craft_min_alignment", s.mean_post_craft_min_alignment},
          {"min_post_craft_min_alignment", s.min_post_craft_min_alignment},
          {"max_jitter", s.max_jitter},
          {"jitter_fraction", s.jitter_fraction},
          {"violation_fraction", s.violation_fraction}};
}

inline std::string run_name(const RunOutcome& r) {
  return r.single_task ? "Single[task" + std::to_string(*r.single_task) + "]" : r.label;
}

}  // namespace detail

/// JSON Lines: for each run a "run" header, one "step" record per step and a
/// closing "summary" record.
inline std::string render_run_log(const ExperimentResult& res) {
  std::string out;
  for (const auto& run : res.runs) {
    const RunResult& r = run.result;
    Json head = {{"type", "run"},
                 {"run", detail::run_name(run)},
                 {"seed", run.seed},
                 {"status", std::string(to_string(r.status))},
                 {"message", r.message},
                 {"steps", r.steps},
                 {"best_step", r.best_step}};
    out += head.dump() + "\n";
    for (const auto& rec : r.log) {
      Json j = {{"type", "step"}, {"run", detail::run_name(run)}, {"seed", run.seed},
                {"step", rec.step}, {"losses", rec.losses}, {"update_norm", rec.update_norm}};
      if (rec.valid_loss) j["valid_loss"] = *rec.valid_loss;
      if (rec.snapshot) j["balance"] = detail::snapshot_json(*rec.snapshot);
      out += j.dump() + "\n";
    }
    Json tail = {{"type", "summary"}, {"run", detail::run_name(run)}, {"seed", run.seed},
                 {"final_losses", r.final_losses}};
    if (r.summary) tail["balance"] = detail::summary_json(*r.summary);
    out += tail.dump() + "\n";
  }
  return out;
}

/// Tab-separated metrics table, one row per (method, seed) plus a mean row
/// per method over its successful seeds.
inline std::string render_metrics(const ExperimentResult& res) {
  const ExperimentConfig& c = res.config;
  const std::size_t t_count = c.task.n_tasks;
  std::ostringstream os;
  os << "# gradcraft-metrics v" << kFormatVersion << "\n";
  os << "# benchmark=" << to_string(c.benchmark) << " tasks=" << t_count
     << " seeds=" << c.seeds.size() << "\n";

  if (c.benchmark == Benchmark::Quadratic) {
    os << "method\tseed\tstatus\tsteps";
    for (std::size_t t = 0; t < t_count; ++t) os << "\tloss_task" << t;
    os << "\tmean_loss\tworst_loss\n";
    for (const auto& e : c.strategies) {
      std::vector<double> mean_losses(t_count, 0.0);
      double mean_mean = 0.0, mean_worst = 0.0;
      std::size_t ok = 0;
      for (std::uint64_t seed : c.seeds) {
        const RunOutcome* run = res.find(e.label, seed);
        const RunResult& r = run->result;
        os << e.label << '\t' << seed << '\t' << to_string(r.status) << '\t' << r.steps;
        if (r.status == RunStatus::Ok) {
          double m = 0.0;
          for (std::size_t t = 0; t < t_count; ++t) {
            os << '\t' << detail::cell(r.final_losses[t]);
            m += r.final_losses[t];
            mean_losses[t] += r.final_losses[t];
          }
          m /= static_cast<double>(t_count);
          os << '\t' << detail::cell(m) << '\t' << detail::cell(r.worst_loss()) << '\n';
          mean_mean += m;
          mean_worst += r.worst_loss();
          ++ok;
        } else {
          for (std::size_t t = 0; t < t_count + 2; ++t) os << "\t-";
          os << '\n';
        }
      }
      os << e.label << "\tmean\t" << ok << '/' << c.seeds.size() << "\t-";
      if (ok > 0) {
        const double n = static_cast<double>(ok);
        for (double l : mean_losses) os << '\t' << detail::cell(l / n);
        os << '\t' << detail::cell(mean_mean / n) << '\t' << detail::cell(mean_worst / n) << '\n';
      } else {
        for (std::size_t t = 0; t < t_count + 2; ++t) os << "\t-";
        os << '\n';
      }
    }
    return os.str();
  }

  os << "method\tseed\tstatus\tsteps";
  for (std::size_t t = 0; t < t_count; ++t) os << "\tauc_task" << t;
  for (std::size_t t = 0; t < t_count; ++t) os << "\tgauc_task" << t;
  os << "\tav_a\tav_g\tri_a_pct\tri_g_pct\n";

  auto row = [&](const std::string& label, const std::string& seed, const std::string& status,
                 const std::string& steps, const std::optional<MetricTable>& m) {
    os << label << '\t' << seed << '\t' << status << '\t' << steps;
    if (!m) {
      for (std::size_t t = 0; t < 2 * t_count + 4; ++t) os << "\t-";
      os << '\n';
      return;
    }
    for (double v : m->method.auc) os << '\t' << detail::cell(v);
    for (double v : m->method.gauc) os << '\t' << detail::cell(v);
    os << '\t' << detail::cell(m->av_a) << '\t' << detail::cell(m->av_g) << '\t'
       << detail::cell(m->ri_a_percent()) << '\t' << detail::cell(m->ri_g_percent()) << '\n';
  };

  auto mean_row = [&](const std::string& label, const std::vector<MetricTable>& tables) {
    if (tables.empty()) {
      row(label, "mean", "0/" + std::to_string(c.seeds.size()), "-", std::nullopt);
      return;
    }
    MetricTable m;
    m.method.auc.assign(t_count, 0.0);
    m.method.gauc.assign(t_count, 0.0);
    const double n = static_cast<double>(tables.size());
    for (const auto& x : tables) {
      for (std::size_t t = 0; t < t_count; ++t) {
        m.method.auc[t] += x.method.auc[t] / n;
        m.method.gauc[t] += x.method.gauc[t] / n;
      }
      m.av_a += x.av_a / n;
      m.av_g += x.av_g / n;
      m.ri_a += x.ri_a / n;
      m.ri_g += x.ri_g / n;
    }
    row(label, "mean", std::to_string(tables.size()) + "/" + std::to_string(c.seeds.size()), "-", m);
  };

  std::vector<MetricTable> single_tables;
  for (std::uint64_t seed : c.seeds) {
    const auto single = res.single_metrics(seed);
    std::optional<MetricTable> m;
    if (single) {
      m = aggregate(*single, *single);
      single_tables.push_back(*m);
    }
    row("Single", std::to_string(seed), single ? "ok" : "failed", "-", m);
  }
  mean_row("Single", single_tables);

  for (const auto& e : c.strategies) {
    std::vector<MetricTable> tables;
    for (std::uint64_t seed : c.seeds) {
      const RunResult& r = res.find(e.label, seed)->result;
      const auto single = res.single_metrics(seed);
      std::optional<MetricTable> m;
      if (r.status == RunStatus::Ok && single) {
        m = aggregate(r.test_metrics, *single);
        tables.push_back(*m);
      }
      row(e.label, std::to_string(seed), std::string(to_string(r.status)), std::to_string(r.steps), m);
    }
    mean_row(e.label, tables);
  }
  return os.str();
}

inline std::string render_resolved_config(const ExperimentConfig& c) {
  return resolved_config_json(c).dump(2) + "\n";
}

struct ExperimentFiles {
  std::filesystem::path metrics;
  std::filesystem::path run_log;
  std::filesystem::path resolved_config;
};

inline ExperimentFiles write_experiment_outputs(const ExperimentResult& res,
                                                const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  ExperimentFiles files{dir / "metrics.tsv", dir / "run_log.jsonl", dir / "resolved_config.json"};
  detail::write_file(files.resolved_config, render_resolved_config(res.config));
  detail::write_file(files.run_log, render_run_log(res));
  detail::write_file(files.metrics, render_metrics(res));
  return files;
}

/// Runs the config and writes metrics.tsv, run_log.jsonl and
/// resolved_config.json into the output directory (GRADCRAFT_OUTPUT_DIR wins
/// over config.output_dir).
inline ExperimentResult run_experiment(const ExperimentConfig& config,
                                       std::size_t threads = thread_count_from_env()) {
  ExperimentConfig c = config;
  c.output_dir = output_dir_from_env(c.output_dir);
  ExperimentResult res = execute_experiment(c, threads);
  write_experiment_outputs(res, c.output_dir);
  return res;
}

// ---------------------------------------------------------------------------
// Sweep over (tau, epsilon).

struct SweepCell {
  double tau = 0.0;
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  RunResult result;
  /// Classification only.
  std::optional<MetricTable> metrics;
};

struct SweepResult {
  ExperimentConfig config;
  std::vector<SweepCell> cells;  // tau-major, then epsilon, then seed
  double best_tau = 0.0;
  double best_epsilon = 0.0;
  /// Mean AV-G (classification) or mean worst-task loss (quadratic) of the best point.
  double best_score = 0.0;
};

/// Label of the strategy entry a sweep grid point corresponds to.
inline std::string sweep_label(const SweepGrid& g, double tau, double eps) {
  return std::string(to_string(g.strategy)) + "(tau=" + format_double(tau) +
         ",epsilon=" + format_double(eps) + ")";
}

inline SweepResult execute_sweep(const ExperimentConfig& c,
                                 std::size_t threads = thread_count_from_env()) {
  if (!c.sweep) throw ValidationError("sweep", "config has no sweep grid");
  const SweepGrid& g = *c.sweep;
  const detail::Problems problems = detail::make_problems(c);

  std::vector<detail::Job> jobs = detail::single_jobs(c);
  const std::size_t n_single = jobs.size();
  for (double tau : g.tau) {
    for (double eps : g.epsilon) {
      for (std::uint64_t seed : c.seeds) {
        CraftConfig craft;
        craft.strategy = g.strategy;
        craft.tau = tau;
        craft.epsilon = eps;
        jobs.push_back({sweep_label(g, tau, eps), seed, std::nullopt, craft, g.learning_rate});
      }
    }
  }
  std::vector<RunOutcome> runs = detail::execute_jobs(c, problems, jobs, threads);

  ExperimentResult singles{c, {}};
  singles.runs.assign(std::make_move_iterator(runs.begin()),
                      std::make_move_iterator(runs.begin() + static_cast<std::ptrdiff_t>(n_single)));

  SweepResult out;
  out.config = c;
  std::size_t k = n_single;
  bool have_best = false;
  for (double tau : g.tau) {
    for (double eps : g.epsilon) {
      double score = 0.0;
      std::size_t ok = 0;
      for (std::uint64_t seed : c.seeds) {
        SweepCell cell{tau, eps, seed, std::move(runs[k++].result), std::nullopt};
        if (cell.result.status == RunStatus::Ok) {
          if (c.benchmark == Benchmark::Classification) {
            if (const auto single = singles.single_metrics(seed)) {
              cell.metrics = aggregate(cell.result.test_metrics, *single);
              score += cell.metrics->av_g;
              ++ok;
            }
          } else {
            score += cell.result.worst_loss();
            ++ok;
          }
        }
        out.cells.push_back(std::move(cell));
      }
      // a point counts only when every seed succeeded
      if (ok != c.seeds.size()) continue;
      score /= static_cast<double>(ok);
      const bool better = c.benchmark == Benchmark::Classification ? score > out.best_score
                                                                   : score < out.best_score;
      if (!have_best || better) {
        have_best = true;
        out.best_tau = tau;
        out.best_epsilon = eps;
        out.best_score = score;
      }
    }
  }
  if (!have_best) out.best_score = std::numeric_limits<double>::quiet_NaN();
  return out;
}

inline std::string render_sweep(const SweepResult& s) {
  const ExperimentConfig& c = s.config;
  std::ostringstream os;
  os << "# gradcraft-sweep v" << kFormatVersion << "\n";
  os << "# benchmark=" << to_string(c.benchmark) << " strategy=" << to_string(c.sweep->strategy)
     << " tau_points=" << c.sweep->tau.size() << " epsilon_points=" << c.sweep->epsilon.size()
     << " seeds=" << c.seeds.size() << "\n";
  const bool cls = c.benchmark == Benchmark::Classification;
  os << "tau\tepsilon\tseed\tstatus\tsteps";
  os << (cls ? "\tav_a\tav_g\tri_a_pct\tri_g_pct\n" : "\tmean_loss\tworst_loss\n");
  for (const auto& cell : s.cells) {
    os << format_double(cell.tau) << '\t' << format_double(cell.epsilon) << '\t' << cell.seed << '\t'
       << to_string(cell.result.status) << '\t' << cell.result.steps;
    if (cls) {
      if (cell.metrics) {
        os << '\t' << format_double(cell.metrics->av_a) << '\t' << format_double(cell.metrics->av_g)
           << '\t' << format_double(cell.metrics->ri_a_percent()) << '\t'
           << format_double(cell.metrics->ri_g_percent()) << '\n';
      } else {
        os << "\t-\t-\t-\t-\n";
      }
    } else if (cell.result.status == RunStatus::Ok) {
      double m = 0.0;
      for (double l : cell.result.final_losses) m += l;
      m /= static_cast<double>(cell.result.final_losses.size());
      os << '\t' << format_double(m) << '\t' << format_double(cell.result.worst_loss()) << '\n';
    } else {
      os << "\t-\t-\n";
    }
  }
  os << "# best tau=" << format_double(s.best_tau) << " epsilon=" << format_double(s.best_epsilon)
     << (cls ? " mean_av_g=" : " mean_worst_loss=") << format_double(s.best_score) << "\n";
  return os.str();
}

/// Runs the grid and writes sweep_summary.tsv and resolved_config.json.
inline SweepResult run_sweep(const ExperimentConfig& config,
                             std::size_t threads = thread_count_from_env()) {
  ExperimentConfig c = config;
  c.output_dir = output_dir_from_env(c.output_dir);
  SweepResult s = execute_sweep(c, threads);
  std::filesystem::create_directories(c.output_dir);
  const std::filesystem::path dir = c.output_dir;
  detail::write_file(dir / "resolved_config.json", render_resolved_config(c));
  detail::write_file(dir / "sweep_summary.tsv", render_sweep(s));
  return s;
}

// ---------------------------------------------------------------------------
// Gradient dump files.
//
// Input:  {"format_version": 1, "dimension": d,
//          "tasks": [{"name": "...", "grad": [d numbers]}, ...]}
// Output: {"format_version": 1, "strategy": ..., "tau": ..., "epsilon": ...,
//          "dimension": d, "combined": [...],
//          "tasks": [{"name", "crafted", "norm_before", "norm_after_adjust",
//                     "conflicts_with", "residual", "jitter"}],
//          "conflict_matrix": [[0/1...]], "combined_norm": ...}

inline GradientSet parse_gradient_dump(const std::string& text, const std::string& source = "dump") {
  using detail::Fields;
  const Json root = detail::parse_json_text(text, source);
  const Fields f(root, "");
  f.reject_unknown({"format_version", "dimension", "tasks"});
  const auto version = f.unsigned_int("format_version", kFormatVersion);
  if (version != kFormatVersion)
    throw ValidationError("format_version", "unsupported version " + std::to_string(version));
  if (!f.has("dimension")) throw ValidationError("dimension", "missing field");
  const std::size_t d = detail::size_field(f, "dimension", 0);
  if (d == 0) throw ValidationError("dimension", "must be >= 1");
  if (!f.has("tasks") || !f.raw("tasks").is_array() || f.raw("tasks").empty())
    throw ValidationError("tasks", "expected a non-empty array");

  const Json& tasks = f.raw("tasks");
  std::vector<std::string> names;
  std::vector<DenseVector> grads;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const std::string p = "tasks[" + std::to_string(i) + "]";
    const Fields tf(tasks[i], p);
    tf.reject_unknown({"name", "grad"});
    const std::string name = tf.string("name", "");
    if (name.empty()) throw ValidationError(p + ".name", "missing or empty");
    if (!seen.insert(name).second) throw ValidationError(p + ".name", "duplicate task name '" + name + "'");
    if (!tf.has("grad")) throw ValidationError(p + ".grad", "missing field");
    std::vector<double> g = tf.numbers("grad", {});
    if (g.size() != d)
      throw ValidationError(p + ".grad", "has " + std::to_string(g.size()) + " entries, dimension is " +
                                             std::to_string(d));
    names.push_back(name);
    grads.emplace_back(std::move(g));
  }
  return GradientSet(std::move(names), std::move(grads));
}

inline Json craft_record(const GradientSet& gs, const CraftConfig& cfg, const CraftOutcome& out) {
  Json j;
  j["format_version"] = kFormatVersion;
  j["strategy"] = std::string(to_string(cfg.strategy));
  j["tau"] = cfg.tau;
  j["epsilon"] = cfg.epsilon;
  j["conflict_tol"] = cfg.conflict_tol;
  j["rng_seed"] = cfg.rng_seed;
  j["dimension"] = gs.dimension();
  j["combined"] = out.combined.raw();
  j["combined_norm"] = out.report.combined_norm;
  Json matrix = Json::array();
  for (const auto& row : out.report.conflict_matrix) {
    Json r = Json::array();
    for (bool b : row) r.push_back(b ? 1 : 0);
    matrix.push_back(r);
  }
  j["conflict_matrix"] = matrix;
  Json tasks = Json::array();
  for (std::size_t i = 0; i < gs.size(); ++i) {
    Json conflicts = Json::array();
    for (std::size_t k = 0; k < gs.size(); ++k) {
      if (out.report.conflict_matrix[i][k]) conflicts.push_back(gs.task_names()[k]);
    }
    tasks.push_back({{"name", gs.task_names()[i]},
                     {"crafted", out.per_task[i].raw()},
                     {"norm_before", out.report.norms_before[i]},
                     {"norm_after_adjust", out.report.norms_after_adjust[i]},
                     {"conflicts_with", conflicts},
                     {"residual", out.report.projection_residuals[i]},
                     {"residual_exceeded", static_cast<bool>(out.report.residual_exceeded[i])},
                     {"jitter", out.report.jitter_levels[i]}});
  }
  j["tasks"] = tasks;
  return j;
}

/// Crafts a dump file and writes the record to `out_path`. Nothing is
/// written when parsing, validation or the solve fails.
inline CraftOutcome craft_file(const std::filesystem::path& in_path,
                               const std::filesystem::path& out_path, const CraftConfig& cfg) {
  const GradientSet gs = parse_gradient_dump(detail::read_file(in_path), in_path.string());
  CraftOutcome out = craft_step(gs, cfg);
  detail::write_file(out_path, craft_record(gs, cfg, out).dump(2) + "\n");
  return out;
}

}  // namespace gradcraft
