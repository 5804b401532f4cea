#pragma once

// Gradient crafting for multi-task training: magnitude adjustment toward the
// largest task norm, conflict detection, per-task global deconfliction by a
// small SPD solve against every conflicting gradient at once, and the
// baseline combiners (EW, DBMTL, PCGrad, PCGrad+) plus ablation variants.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gradcraft/errors.hpp"
#include "gradcraft/linalg.hpp"
#include "gradcraft/rng.hpp"

namespace gradcraft {

/// Per-task gradients of one optimization step, all of the same dimension.
class GradientSet {
 public:
  GradientSet() = default;

  GradientSet(std::vector<std::string> task_names, std::vector<DenseVector> grads)
      : names_(std::move(task_names)), grads_(std::move(grads)) {
    if (grads_.empty()) throw UsageError("GradientSet: need at least one task");
    if (names_.size() != grads_.size())
      throw UsageError("GradientSet: names and gradients differ in count");
    const std::size_t d = grads_.front().size();
    for (const auto& g : grads_) {
      if (g.size() != d) throw UsageError("GradientSet: gradients differ in dimension");
    }
    std::set<std::string> seen;
    for (const auto& n : names_) {
      if (!seen.insert(n).second)
        throw UsageError("GradientSet: duplicate task name '" + n + "'");
    }
  }

  /// Names tasks "task0", "task1", ...
  static GradientSet unnamed(std::vector<DenseVector> grads) {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < grads.size(); ++i) names.push_back("task" + std::to_string(i));
    return GradientSet(std::move(names), std::move(grads));
  }

  std::size_t size() const noexcept { return grads_.size(); }
  std::size_t dimension() const noexcept {
    return grads_.empty() ? 0 : grads_.front().size();
  }

  const std::vector<std::string>& task_names() const noexcept { return names_; }
  const std::vector<DenseVector>& grads() const noexcept { return grads_; }
  const DenseVector& operator[](std::size_t i) const { return grads_[i]; }

  /// Same names, new gradients.
  GradientSet with_grads(std::vector<DenseVector> grads) const {
    return GradientSet(names_, std::move(grads));
  }

 private:
  std::vector<std::string> names_;
  std::vector<DenseVector> grads_;
};

enum class Strategy {
  GradCraft,
  EW,
  DBMTL,
  PCGrad,
  PCGradPlus,
  GradCraftFixEps,
  GradCraftFixTau,
  GradCraftOri,
  GradCraftLocal,
};

inline constexpr Strategy kAllStrategies[] = {
    Strategy::GradCraft,       Strategy::EW,
    Strategy::DBMTL,           Strategy::PCGrad,
    Strategy::PCGradPlus,      Strategy::GradCraftFixEps,
    Strategy::GradCraftFixTau, Strategy::GradCraftOri,
    Strategy::GradCraftLocal,
};

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::GradCraft: return "GradCraft";
    case Strategy::EW: return "EW";
    case Strategy::DBMTL: return "DBMTL";
    case Strategy::PCGrad: return "PCGrad";
    case Strategy::PCGradPlus: return "PCGradPlus";
    case Strategy::GradCraftFixEps: return "GradCraftFixEps";
    case Strategy::GradCraftFixTau: return "GradCraftFixTau";
    case Strategy::GradCraftOri: return "GradCraftOri";
    case Strategy::GradCraftLocal: return "GradCraftLocal";
  }
  return "?";
}

inline std::optional<Strategy> parse_strategy(std::string_view name) {
  for (Strategy s : kAllStrategies) {
    if (to_string(s) == name) return s;
  }
  return std::nullopt;
}

struct CraftConfig {
  double tau = 0.5;
  double epsilon = 0.0;
  Strategy strategy = Strategy::GradCraft;
  /// Pairs conflict when inner(g_i, g_j) < -conflict_tol.
  double conflict_tol = 0.0;
  /// Relative tolerance for the projection equality check.
  double residual_tol = 1e-6;
  /// Seeds the task visiting order of the pairwise (PCGrad-style) projection.
  std::uint64_t rng_seed = 0;
  JitterPolicy jitter;

  void validate() const {
    if (!(tau >= 0.0 && tau <= 1.0)) throw UsageError("CraftConfig: tau must lie in [0, 1]");
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon))
      throw UsageError("CraftConfig: epsilon must be finite and >= 0");
    if (!(conflict_tol >= 0.0) || !std::isfinite(conflict_tol))
      throw UsageError("CraftConfig: conflict_tol must be finite and >= 0");
    if (!(residual_tol > 0.0)) throw UsageError("CraftConfig: residual_tol must be > 0");
  }
};

using ConflictMatrix = std::vector<std::vector<bool>>;

struct CraftReport {
  std::vector<double> norms_before;
  std::vector<double> norms_after_adjust;
  ConflictMatrix conflict_matrix;
  std::vector<std::size_t> per_task_conflict_counts;
  /// inf-norm of G_i g~_i^T - z per task; 0 for tasks without conflicts and
  /// for strategies that do not run the global projection.
  std::vector<double> projection_residuals;
  /// Diagonal shift used by each task's solve (0 = none).
  std::vector<double> jitter_levels;
  /// Tasks whose jitter-free solve missed the residual tolerance.
  std::vector<bool> residual_exceeded;
  double combined_norm = 0.0;
};

/// How a strategy maps onto the two crafting stages.
struct StrategyPlan {
  enum class Projection { None, Global, Pairwise };
  bool adjust = false;
  double tau = 0.0;
  Projection projection = Projection::None;
  double epsilon = 0.0;
};

inline StrategyPlan plan_for(const CraftConfig& cfg) {
  using P = StrategyPlan::Projection;
  switch (cfg.strategy) {
    case Strategy::GradCraft: return {true, cfg.tau, P::Global, cfg.epsilon};
    case Strategy::EW: return {false, 0.0, P::None, 0.0};
    case Strategy::DBMTL: return {true, 1.0, P::None, 0.0};
    case Strategy::PCGrad: return {false, 0.0, P::Pairwise, 0.0};
    case Strategy::PCGradPlus: return {true, cfg.tau, P::Pairwise, 0.0};
    case Strategy::GradCraftFixEps: return {true, cfg.tau, P::Global, 0.0};
    case Strategy::GradCraftFixTau: return {true, 1.0, P::Global, cfg.epsilon};
    case Strategy::GradCraftOri: return {false, 0.0, P::Global, cfg.epsilon};
    case Strategy::GradCraftLocal: return {true, cfg.tau, P::Pairwise, 0.0};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Magnitude adjustment.

/// Blends every gradient toward the largest task norm:
///   g^_i = tau * (max_j |g_j| / |g_i|) * g_i + (1 - tau) * g_i.
/// Evaluated as a single factor 1 + tau * (max/|g_i| - 1) so the task holding
/// the maximum is returned bit-for-bit. Zero gradients stay zero and do not
/// take part in the maximum.
inline GradientSet adjust_magnitudes(const GradientSet& gs, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw UsageError("adjust_magnitudes: tau must lie in [0, 1]");
  std::vector<double> norms(gs.size());
  double max_norm = 0.0;
  for (std::size_t i = 0; i < gs.size(); ++i) {
    norms[i] = norm(gs[i]);
    max_norm = std::max(max_norm, norms[i]);
  }
  if (max_norm == 0.0)
    throw DegenerateInputError("adjust_magnitudes: every task gradient is zero");

  std::vector<DenseVector> out;
  out.reserve(gs.size());
  for (std::size_t i = 0; i < gs.size(); ++i) {
    if (norms[i] == 0.0) {
      out.push_back(gs[i]);
      continue;
    }
    const double factor = 1.0 + tau * (max_norm / norms[i] - 1.0);
    out.push_back(factor == 1.0 ? gs[i] : scaled(gs[i], factor));
  }
  return gs.with_grads(std::move(out));
}

// ---------------------------------------------------------------------------
// Conflicts.

inline ConflictMatrix detect_conflicts(const GradientSet& gs, double conflict_tol = 0.0) {
  const std::size_t t = gs.size();
  ConflictMatrix m(t, std::vector<bool>(t, false));
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i + 1; j < t; ++j) {
      const bool c = inner(gs[i], gs[j]) < -conflict_tol;
      m[i][j] = c;
      m[j][i] = c;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Global projection.

struct ProjectionResult {
  DenseVector grad;
  /// Solve weights, one per conflicting gradient.
  std::vector<double> weights;
  /// Similarity targets z_j = epsilon * |g_i| * |g_j|.
  std::vector<double> targets;
  double residual = 0.0;
  double jitter = 0.0;
  bool residual_exceeded = false;
};

namespace detail {

// No n <= d check: with more conflicts than dimensions the Gram matrix is
// singular and the solve goes through the jitter levels.
inline ProjectionResult project_any(const DenseVector& g, std::span<const DenseVector> conflicts,
                                    double epsilon, double residual_tol, const JitterPolicy& jitter) {
  if (conflicts.empty()) return {g, {}, {}, 0.0, 0.0, false};
  const std::size_t n = conflicts.size();
  const double g_norm = norm(g);
  std::vector<double> z(n);
  std::vector<double> g_dot(n);
  std::vector<double> rhs(n);
  for (std::size_t j = 0; j < n; ++j) {
    z[j] = epsilon * g_norm * norm(conflicts[j]);
    g_dot[j] = inner(conflicts[j], g);
    rhs[j] = -g_dot[j] + z[j];
  }

  SpdSolution sol = solve_spd(gram(conflicts), rhs, jitter);

  std::vector<double> out(g.raw());
  for (std::size_t j = 0; j < n; ++j) {
    const double w = sol.x[j];
    const auto c = conflicts[j].values();
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += w * c[k];
  }
  ProjectionResult res{DenseVector(std::move(out)), std::move(sol.x), std::move(z), 0.0,
                       sol.jitter, false};

  for (std::size_t j = 0; j < n; ++j) {
    res.residual = std::max(res.residual, std::abs(inner(conflicts[j], res.grad) - res.targets[j]));
  }
  const double scale = std::max({1.0, norm_inf(res.targets), norm_inf(g_dot)});
  res.residual_exceeded = res.jitter == 0.0 && res.residual > residual_tol * scale;
  return res;
}

}  // namespace detail

/// Deconflicts `g` against every vector of `conflicts` at once: finds w with
/// G G^T w = -G g^T + z and returns g + w^T G, so that inner(result, c_j)
/// equals z_j = epsilon * |g| * |c_j| for every conflicting c_j.
inline ProjectionResult project_task(const DenseVector& g,
                                     std::span<const DenseVector> conflicts,
                                     double epsilon, double residual_tol = 1e-6,
                                     const JitterPolicy& jitter = {}) {
  if (conflicts.empty()) return {g, {}, {}, 0.0, 0.0, false};
  if (!(epsilon >= 0.0)) throw UsageError("project_task: epsilon must be >= 0");
  for (const auto& c : conflicts) {
    if (c.size() != g.size()) throw UsageError("project_task: dimension mismatch");
  }
  if (conflicts.size() > g.size())
    throw UsageError("project_task: more conflicting gradients than dimensions");
  return detail::project_any(g, conflicts, epsilon, residual_tol, jitter);
}

// ---------------------------------------------------------------------------
// Combination.

/// Mean of the gradients. Each coordinate's summands are added in ascending
/// order of value, so the result does not depend on task order.
inline DenseVector combine(std::span<const DenseVector> grads) {
  if (grads.empty()) throw UsageError("combine: need at least one gradient");
  const std::size_t d = grads.front().size();
  for (const auto& g : grads) {
    if (g.size() != d) throw UsageError("combine: gradients differ in dimension");
  }
  const double t = static_cast<double>(grads.size());
  std::vector<double> out(d);
  std::vector<double> column(grads.size());
  for (std::size_t k = 0; k < d; ++k) {
    for (std::size_t i = 0; i < grads.size(); ++i) column[i] = grads[i][k];
    std::sort(column.begin(), column.end());
    double acc = 0.0;
    for (double v : column) acc += v;
    out[k] = acc / t;
  }
  return DenseVector(std::move(out));
}

inline DenseVector combine(const GradientSet& gs) { return combine(gs.grads()); }

// ---------------------------------------------------------------------------
// Pairwise projection (PCGrad).

/// Sequential pairwise surgery. One seeded shuffle fixes the visiting order;
/// each task walks it (skipping itself) and removes the component along any
/// gradient it currently conflicts with. Zero-norm gradients are skipped.
inline std::vector<DenseVector> pcgrad_project(std::span<const DenseVector> grads,
                                               std::uint64_t seed) {
  const std::size_t t = grads.size();
  Rng rng(seed);
  const std::vector<std::size_t> order = rng.permutation(t);
  std::vector<double> sq(t);
  for (std::size_t j = 0; j < t; ++j) sq[j] = inner(grads[j], grads[j]);

  std::vector<DenseVector> out;
  out.reserve(t);
  for (std::size_t i = 0; i < t; ++i) {
    std::vector<double> cur(grads[i].raw());
    for (std::size_t j : order) {
      if (j == i || sq[j] == 0.0) continue;
      const double dot = inner(std::span<const double>(cur), grads[j].values());
      if (dot < 0.0) {
        const double c = dot / sq[j];
        const auto gj = grads[j].values();
        for (std::size_t k = 0; k < cur.size(); ++k) cur[k] -= c * gj[k];
      }
    }
    out.emplace_back(std::move(cur));
  }
  return out;
}

inline DenseVector baseline_ew(const GradientSet& gs) { return combine(gs); }

inline DenseVector baseline_dbmtl(const GradientSet& gs) {
  return combine(adjust_magnitudes(gs, 1.0));
}

inline DenseVector baseline_pcgrad(const GradientSet& gs, std::uint64_t seed) {
  return combine(pcgrad_project(gs.grads(), seed));
}

inline DenseVector baseline_pcgrad_plus(const GradientSet& gs, double tau, std::uint64_t seed) {
  return baseline_pcgrad(adjust_magnitudes(gs, tau), seed);
}

// ---------------------------------------------------------------------------
// Full step.

struct CraftOutcome {
  DenseVector combined;
  /// Gradients after adjustment (equal to the input when the strategy skips it).
  GradientSet adjusted;
  /// Per-task gradients after the projection stage, in input task order.
  std::vector<DenseVector> per_task;
  CraftReport report;
};

/// One crafting step: adjust magnitudes, detect conflicts among the adjusted
/// gradients, project every task against its conflicts (each task sees the
/// same adjusted set, never another task's projected output), then average.
///
/// Conflict sets are ordered by task name so a permutation of the input only
/// permutes the per-task outputs.
inline CraftOutcome craft_step(const GradientSet& gs, const CraftConfig& cfg) {
  cfg.validate();
  if (gs.size() == 0) throw UsageError("craft_step: empty gradient set");
  const StrategyPlan plan = plan_for(cfg);
  const std::size_t t = gs.size();

  CraftReport report;
  report.norms_before.resize(t);
  for (std::size_t i = 0; i < t; ++i) report.norms_before[i] = norm(gs[i]);

  GradientSet adjusted = plan.adjust ? adjust_magnitudes(gs, plan.tau) : gs;
  report.norms_after_adjust.resize(t);
  for (std::size_t i = 0; i < t; ++i) report.norms_after_adjust[i] = norm(adjusted[i]);

  report.conflict_matrix = detect_conflicts(adjusted, cfg.conflict_tol);
  report.per_task_conflict_counts.assign(t, 0);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < t; ++j) {
      if (report.conflict_matrix[i][j]) ++report.per_task_conflict_counts[i];
    }
  }
  report.projection_residuals.assign(t, 0.0);
  report.jitter_levels.assign(t, 0.0);
  report.residual_exceeded.assign(t, false);

  std::vector<DenseVector> per_task;
  switch (plan.projection) {
    case StrategyPlan::Projection::None:
      per_task = adjusted.grads();
      break;
    case StrategyPlan::Projection::Pairwise:
      per_task = pcgrad_project(adjusted.grads(), cfg.rng_seed);
      break;
    case StrategyPlan::Projection::Global: {
      std::vector<std::size_t> by_name(t);
      std::iota(by_name.begin(), by_name.end(), std::size_t{0});
      const auto& names = gs.task_names();
      std::sort(by_name.begin(), by_name.end(),
                [&](std::size_t a, std::size_t b) { return names[a] < names[b]; });
      per_task.reserve(t);
      std::vector<DenseVector> conflict_set;
      for (std::size_t i = 0; i < t; ++i) {
        conflict_set.clear();
        for (std::size_t j : by_name) {
          if (report.conflict_matrix[i][j]) conflict_set.push_back(adjusted[j]);
        }
        ProjectionResult pr =
            detail::project_any(adjusted[i], conflict_set, plan.epsilon, cfg.residual_tol, cfg.jitter);
        report.projection_residuals[i] = pr.residual;
        report.jitter_levels[i] = pr.jitter;
        report.residual_exceeded[i] = pr.residual_exceeded;
        per_task.push_back(std::move(pr.grad));
      }
      break;
    }
  }

  DenseVector combined = combine(per_task);
  report.combined_norm = norm(combined);
  return {std::move(combined), std::move(adjusted), std::move(per_task), std::move(report)};
}

}  // namespace gradcraft
