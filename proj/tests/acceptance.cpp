// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include <sys/wait.h>

#include <Eigen/Dense>

#include "gradcraft/experiment.hpp"

namespace {

using namespace gradcraft;
namespace fs = std::filesystem;

const fs::path kSource = GRADCRAFT_SOURCE_DIR;

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double x) { return format_double(x); }

DenseVector gaussian(Rng& rng, std::size_t d, double scale) {
  std::vector<double> v(d);
  for (double& x : v) x = scale * rng.normal();
  return DenseVector(std::move(v));
}

GradientSet spread_set(Rng& rng, std::size_t t, std::size_t d, double decades) {
  std::vector<DenseVector> g;
  for (std::size_t i = 0; i < t; ++i)
    g.push_back(gaussian(rng, d, std::pow(10.0, rng.uniform(-decades / 2.0, decades / 2.0))));
  return GradientSet::unnamed(std::move(g));
}

CraftConfig gradcraft(double tau, double eps) {
  CraftConfig c;
  c.strategy = Strategy::GradCraft;
  c.tau = tau;
  c.epsilon = eps;
  return c;
}

// 1. Adjusted norms stay within a factor 1/tau of each other.
Verdict norm_ratio_bound() {
  const auto t0 = Clock::now();
  Rng rng(0xc1);
  double worst_excess = -INFINITY;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t t = 2 + rng.below(15);
    const std::size_t d = 8 + rng.below(4089);
    const GradientSet gs = spread_set(rng, t, d, 6.0);
    for (int k = 1; k <= 10; ++k) {
      const double tau = k / 10.0;
      const GradientSet adj = adjust_magnitudes(gs, tau);
      double lo = INFINITY, hi = 0.0;
      for (const auto& g : adj.grads()) {
        const double n = norm(g);
        lo = std::min(lo, n);
        hi = std::max(hi, n);
      }
      worst_excess = std::max(worst_excess, hi / lo - 1.0 / tau);
    }
  }
  const double secs = seconds_since(t0);
  return {worst_excess <= 1e-9 && secs < 10.0,
          "max(ratio - 1/tau) = " + fmt(worst_excess) + " (tol 1e-9), " + fmt(secs) + " s (budget 10 s)"};
}

// 2. Every conflicting task's crafted gradient meets its targets.
Verdict projection_contract() {
  const auto t0 = Clock::now();
  Rng rng(0xc2);
  const double eps_grid[] = {0.0, 1e-12, 1e-10, 1e-8, 1e-7, 1e-3, 0.1};
  double worst = 0.0;
  int sets = 0, rejected = 0, checked = 0;
  while (sets < 1000) {
    const std::size_t t = 2 + rng.below(9);
    const std::size_t d = t + 2 + rng.below(62);
    const GradientSet gs = spread_set(rng, t, d, 2.0);
    const CraftConfig cfg = gradcraft(rng.uniform(), eps_grid[rng.below(7)]);
    const GradientSet adj = adjust_magnitudes(gs, cfg.tau);
    const ConflictMatrix cm = detect_conflicts(adj);

    bool any = false, well_conditioned = true;
    for (std::size_t i = 0; i < t; ++i) {
      std::vector<std::size_t> js;
      for (std::size_t j = 0; j < t; ++j)
        if (cm[i][j]) js.push_back(j);
      if (js.empty()) continue;
      any = true;
      Eigen::MatrixXd g(js.size(), d);
      for (std::size_t r = 0; r < js.size(); ++r)
        for (std::size_t k = 0; k < d; ++k) g(r, k) = adj[js[r]][k];
      const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(g * g.transpose()).eigenvalues();
      if (!(ev.minCoeff() > 0.0) || ev.maxCoeff() / ev.minCoeff() > 1e6) well_conditioned = false;
    }
    if (!any || !well_conditioned) {
      ++rejected;
      continue;
    }
    ++sets;
    const CraftOutcome out = craft_step(gs, cfg);
    for (std::size_t i = 0; i < t; ++i) {
      std::vector<double> z;
      std::vector<double> got;
      for (std::size_t j = 0; j < t; ++j) {
        if (!cm[i][j]) continue;
        z.push_back(cfg.epsilon * norm(adj[i]) * norm(adj[j]));
        got.push_back(inner(out.per_task[i], adj[j]));
      }
      if (z.empty()) continue;
      double zinf = 0.0;
      for (double v : z) zinf = std::max(zinf, std::abs(v));
      for (std::size_t k = 0; k < z.size(); ++k) {
        worst = std::max(worst, std::abs(got[k] - z[k]) / std::max(1.0, zinf));
        ++checked;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-6 && secs < 10.0,
          "max |<g~_i, g^_j> - z_j| / max(1, |z|_inf) = " + fmt(worst) + " over " + std::to_string(checked) +
              " constraints (tol 1e-6; " + std::to_string(rejected) + " draws resampled), " + fmt(secs) +
              " s (budget 10 s)"};
}

// 3. Two tasks with one conflict and eps = 0 reduce to the squared-norm projection.
Verdict pcgrad_degeneration() {
  Rng rng(0xc3);
  double worst = 0.0;
  int instances = 0;
  while (instances < 200) {
    const std::size_t d = 2 + rng.below(200);
    const GradientSet gs = spread_set(rng, 2, d, 3.0);
    const double tau = rng.uniform();
    const double n0 = norm(gs[0]), n1 = norm(gs[1]);
    const double mx = std::max(n0, n1);
    const DenseVector a0 = scaled(gs[0], 1.0 + tau * (mx / n0 - 1.0));
    const DenseVector a1 = scaled(gs[1], 1.0 + tau * (mx / n1 - 1.0));
    const double dot = inner(a0, a1);
    if (!(dot < 0.0)) continue;
    ++instances;
    const CraftOutcome out = craft_step(gs, gradcraft(tau, 0.0));
    const DenseVector* self[] = {&a0, &a1};
    for (int i = 0; i < 2; ++i) {
      const DenseVector& other = *self[1 - i];
      const double c = dot / inner(other, other);
      std::vector<double> ref(d);
      for (std::size_t k = 0; k < d; ++k) ref[k] = (*self[i])[k] - c * other[k];
      double num = 0.0, den = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        num = std::max(num, std::abs(out.per_task[i][k] - ref[k]));
        den = std::max(den, std::abs(ref[k]));
      }
      worst = std::max(worst, num / den);
    }
  }
  return {worst <= 1e-8, "max relative deviation " + fmt(worst) + " over 200 instances (tol 1e-8)"};
}

// 4. Analytic gradients agree with central differences.
Verdict gradient_correctness() {
  Rng rng(0xc4);
  double mlp = 0.0, quad = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d_in = 2 + rng.below(6), hid = 2 + rng.below(6), t = 1 + rng.below(4);
    std::vector<std::string> names;
    std::vector<LossKind> kinds;
    for (std::size_t i = 0; i < t; ++i) {
      names.push_back("t" + std::to_string(i));
      kinds.push_back(i % 2 ? LossKind::MSE : LossKind::BCE);
    }
    SharedBottomModel m(d_in, hid, names, Activation::Tanh, kinds);
    m.initialize(rng.next_u64(), 0.5);
    const std::size_t n = 8 + rng.below(24);
    Batch b{n, d_in, t, {}, {}};
    for (std::size_t i = 0; i < n * d_in; ++i) b.features.push_back(rng.normal());
    for (std::size_t i = 0; i < n * t; ++i)
      b.labels.push_back(kinds[i % t] == LossKind::BCE ? static_cast<double>(rng.below(2)) : rng.normal());
    mlp = std::max(mlp, grad_check(m, b, 1e-5));
  }
  for (int trial = 0; trial < 20; ++trial) {
    SyntheticTaskSpec spec;
    spec.n_tasks = 1 + rng.below(4);
    spec.dimension = 4 + rng.below(12);
    spec.norm_ratio = 1.0 + 9.0 * rng.uniform();
    const double widest = spec.n_tasks > 1 ? std::acos(-1.0 / static_cast<double>(spec.n_tasks - 1)) : std::numbers::pi;
    spec.conflict_angle = widest * rng.uniform();
    spec.seed = rng.next_u64();
    const QuadraticLandscape land = gen_quadratic(spec);
    std::vector<double> theta(spec.dimension);
    for (double& x : theta) x = rng.normal();
    quad = std::max(quad, grad_check(land, theta, 1e-5));
  }
  return {mlp <= 1e-5 && quad <= 1e-7, "shared-bottom max rel err " + fmt(mlp) + " (tol 1e-5), quadratic " +
                                            fmt(quad) + " (tol 1e-7), 20 instances each"};
}

// 5. Aggregate metrics on published per-task numbers.
Verdict metric_fixtures() {
  const TaskMetrics single{{0.7641, 0.8484, 0.7610, 0.8661, 0.8829, 0.8940},
                           {0.6207, 0.7731, 0.6499, 0.6324, 0.6847, 0.7012}};
  const TaskMetrics ew{{0.7641, 0.8484, 0.7604, 0.8664, 0.8810, 0.9012},
                       {0.6209, 0.7745, 0.6503, 0.6382, 0.6820, 0.7129}};
  const double av_a = aggregate(single, single).av_a;
  const double ri_a = aggregate(ew, single).ri_a_percent();
  const bool ok = std::abs(av_a - 0.8361) <= 5e-5 && std::abs(ri_a - 0.091) <= 5e-4;
  return {ok, "AV-A " + fmt(av_a) + " (0.8361 +- 5e-5), RI-A " + fmt(ri_a) + "% (0.091 +- 5e-4 pp)"};
}

struct BenchmarkRun {
  ExperimentConfig config;
  Json oracle;
  ExperimentResult result;
  double seconds = 0.0;
  std::string error;
};

double mean_worst(const ExperimentResult& res, const std::string& label) {
  double s = 0.0;
  for (std::uint64_t seed : res.config.seeds) s += res.find(label, seed)->result.worst_loss();
  return s / static_cast<double>(res.config.seeds.size());
}

BenchmarkRun run_benchmark() {
  BenchmarkRun b;
  b.config = load_experiment_config(kSource / "configs" / "conflict_benchmark.json");
  b.oracle = Json::parse(detail::read_file(kSource / "tests" / "golden" / "conflict_benchmark_oracle.json"));
  for (const auto& e : b.config.strategies) {
    if (!b.oracle["strategies"].contains(e.label) ||
        b.oracle["strategies"][e.label]["learning_rate"].get<double>() != e.learning_rate)
      b.error = "learning rate of " + e.label + " differs from the oracle record";
  }
  const auto t0 = Clock::now();
  b.result = execute_experiment(b.config, thread_count_from_env());
  b.seconds = seconds_since(t0);
  for (const auto& r : b.result.runs) {
    if (r.result.status != RunStatus::Ok) b.error = r.label + " seed " + std::to_string(r.seed) + " " +
                                                    std::string(to_string(r.result.status));
  }
  return b;
}

// 6. Crafting beats equal weighting on the worse task.
Verdict conflict_dominance(const BenchmarkRun& b) {
  if (!b.error.empty()) return {false, b.error};
  const int need = b.oracle["dominance_min_seeds"].get<int>();
  int wins = 0;
  for (std::uint64_t seed : b.config.seeds)
    wins += b.result.find("GradCraft", seed)->result.worst_loss() <= b.result.find("EW", seed)->result.worst_loss();
  return {wins >= need && b.seconds < 60.0,
          "GradCraft worse-task loss <= EW in " + std::to_string(wins) + "/" + std::to_string(b.config.seeds.size()) +
              " seeds (need " + std::to_string(need) + "); mean " + fmt(mean_worst(b.result, "GradCraft")) +
              " vs " + fmt(mean_worst(b.result, "EW")) + ", " + fmt(b.seconds) + " s (budget 60 s)"};
}

// 7. Full method is no worse than its ablations, up to the recorded slack.
Verdict ablation_ordering(const BenchmarkRun& b) {
  if (!b.error.empty()) return {false, b.error};
  const double gc = mean_worst(b.result, "GradCraft");
  bool ok = true;
  std::string detail = "GradCraft mean worse-task loss " + fmt(gc);
  for (const char* label : {"GradCraftFixTau", "GradCraftOri", "GradCraftLocal"}) {
    const double v = mean_worst(b.result, label);
    const double slack = b.oracle["strategies"][label]["ablation_slack"].get<double>();
    const bool pass = gc <= v + slack;
    ok = ok && pass;
    detail += std::string("; ") + label + " " + fmt(v) + " + slack " + fmt(slack) + (pass ? " ok" : " VIOLATED");
  }
  return {ok, detail};
}

// 8. Singular conflict systems fall back to the jittered solve.
Verdict degeneracy_robustness() {
  Rng rng(0xc8);
  int jittered = 0, instances = 0;
  double worst = 0.0;
  bool finite = true;
  std::string failure;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 3 + rng.below(30);
    const DenseVector a = gaussian(rng, d, 1.0);
    DenseVector b = gaussian(rng, d, 1.0);
    if (inner(a, b) > 0.0) b = scaled(b, -1.0);
    std::vector<DenseVector> grads{a, b, trial % 2 ? b : scaled(b, 3.0)};
    for (std::size_t extra = rng.below(3); extra > 0; --extra) grads.push_back(b);
    const GradientSet gs = GradientSet::unnamed(std::move(grads));
    const CraftConfig cfg = gradcraft(trial % 2 ? rng.uniform() : 1.0, trial % 3 ? 0.0 : 1e-8);
    try {
      const CraftOutcome out = craft_step(gs, cfg);
      ++instances;
      for (double x : out.combined.values()) finite = finite && std::isfinite(x);
      if (out.report.jitter_levels[0] > 0.0) ++jittered;
      else failure = "task 0 solve recorded no jitter";
      for (std::size_t i = 0; i < gs.size(); ++i) {
        if (out.report.jitter_levels[i] == 0.0) continue;
        double scale = 1.0;
        for (std::size_t j = 0; j < gs.size(); ++j)
          if (out.report.conflict_matrix[i][j])
            scale = std::max(scale, norm(out.adjusted[i]) * norm(out.adjusted[j]));
        worst = std::max(worst, out.report.projection_residuals[i] / scale);
      }
    } catch (const std::exception& e) {
      failure = std::string("aborted: ") + e.what();
    }
  }
  const bool ok = failure.empty() && finite && instances == 200 && worst <= 1e-3;
  return {ok, std::to_string(instances) + "/200 completed, " + std::to_string(jittered) +
                  " with recorded jitter on the duplicated system, max residual/scale " + fmt(worst) +
                  " (tol 1e-3)" + (finite ? "" : ", NON-FINITE output") + (failure.empty() ? "" : ", " + failure)};
}

int shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// 9. Committed inputs reproduce byte-identical outputs.
Verdict determinism_and_golden() {
  const fs::path dir = fs::temp_directory_path() / "gradcraft_acceptance_c9";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cli = std::string("'") + GRADCRAFT_CLI + "'";
  const std::string quiet = " >/dev/null 2>&1";
  const std::string config = "'" + (kSource / "configs" / "conflict_benchmark.json").string() + "'";
  const std::string dump = "'" + (kSource / "configs" / "craft_fixture.json").string() + "'";
  int rc = 0;
  for (const char* tag : {"a", "b"}) {
    rc |= shell("GRADCRAFT_OUTPUT_DIR='" + (dir / "out").string() + "' " + cli + " run " + config + quiet);
    if (fs::exists(dir / "out")) fs::rename(dir / "out", dir / tag);
    rc |= shell(cli + " craft " + dump + " --strategy GradCraft --tau 0 --eps 0 --out '" +
                (dir / (std::string(tag) + ".json")).string() + "'" + quiet);
  }
  if (rc != 0) return {false, "a CLI invocation exited nonzero"};
  std::vector<std::string> differing;
  for (const char* f : {"metrics.tsv", "run_log.jsonl", "resolved_config.json"}) {
    if (detail::read_file(dir / "a" / f) != detail::read_file(dir / "b" / f)) differing.push_back(f);
  }
  const std::string craft_a = detail::read_file(dir / "a.json");
  if (craft_a != detail::read_file(dir / "b.json")) differing.push_back("craft output");
  const std::string golden = detail::read_file(kSource / "tests" / "golden" / "craft_fixture_gradcraft.json");
  const bool matches_golden = craft_a == golden;
  const auto combined = Json::parse(craft_a)["combined"].get<std::vector<double>>();
  const bool hand = combined == std::vector<double>{1.0, 0.5};
  fs::remove_all(dir);
  std::string detail = differing.empty() ? "run and craft outputs byte-identical across two invocations"
                                         : "outputs differ:";
  for (const auto& f : differing) detail += " " + f;
  detail += std::string(matches_golden ? "; craft equals golden" : "; craft DIFFERS from golden") +
            "; combined = (" + fmt(combined.at(0)) + ", " + fmt(combined.at(1)) + ")";
  return {differing.empty() && matches_golden && hand, detail};
}

// 10. The full tau/epsilon grid fits the time budget.
Verdict sweep_budget() {
  const ExperimentConfig c = load_experiment_config(kSource / "configs" / "conflict_sweep.json");
  const std::size_t threads = std::min<std::size_t>(4, thread_count_from_env());
  const auto t0 = Clock::now();
  const SweepResult s = execute_sweep(c, threads);
  const double secs = seconds_since(t0);
  std::size_t ok = 0;
  for (const auto& cell : s.cells) ok += cell.result.status == RunStatus::Ok;
  const bool shape = c.sweep->tau.size() == 11 && c.sweep->epsilon.size() == 7 && c.seeds.size() == 3;
  return {shape && secs < 600.0,
          std::to_string(c.sweep->tau.size()) + "x" + std::to_string(c.sweep->epsilon.size()) + " grid, " +
              std::to_string(c.seeds.size()) + " seeds, " + std::to_string(ok) + "/" + std::to_string(s.cells.size()) +
              " runs ok, " + fmt(secs) + " s on " + std::to_string(threads) + " threads (budget 600 s); best tau=" +
              fmt(s.best_tau) + " epsilon=" + fmt(s.best_epsilon)};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Verdict()>& check) {
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failures += !v.pass;
    std::printf("%s  %2d %s: %s\n", v.pass ? "PASS" : "FAIL", id, name, v.detail.c_str());
    std::fflush(stdout);
  };

  report(1, "norm-ratio bound", norm_ratio_bound);
  report(2, "projection contract", projection_contract);
  report(3, "two-task projection degeneration", pcgrad_degeneration);
  report(4, "gradient correctness", gradient_correctness);
  report(5, "aggregate metric fixtures", metric_fixtures);
  BenchmarkRun bench;
  try {
    bench = run_benchmark();
  } catch (const std::exception& e) {
    bench.error = std::string("exception: ") + e.what();
  }
  report(6, "conflict dominance", [&] { return conflict_dominance(bench); });
  report(7, "ablation ordering", [&] { return ablation_ordering(bench); });
  report(8, "degeneracy robustness", degeneracy_robustness);
  report(9, "determinism and golden files", determinism_and_golden);
  report(10, "sweep budget", sweep_budget);

  std::printf("%d/10 criteria passed\n", 10 - failures);
  return failures == 0 ? 0 : 1;
}
