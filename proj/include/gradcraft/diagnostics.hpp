#pragma once

// Per-step balance measurements and an online check that the projection
// targets were actually met.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "gradcraft/crafting.hpp"
#include "gradcraft/errors.hpp"
#include "gradcraft/linalg.hpp"

namespace gradcraft {

struct BalanceSnapshot {
  std::uint64_t step = 0;
  /// max/min norm over nonzero adjusted task gradients (1 if fewer than two).
  double norm_ratio = 1.0;
  /// Same ratio on the raw gradients.
  double raw_norm_ratio = 1.0;
  /// Conflicting pairs among the adjusted gradients.
  std::size_t conflict_count = 0;
  /// Over pairs of nonzero adjusted gradients; 1 when there are none.
  double min_pairwise_cosine = 1.0;
  /// min over tasks i and conflicts j of inner(g~_i, g^_j) - z_j; 0 if no conflicts.
  double post_craft_min_alignment = 0.0;
  /// Largest solver jitter used this step.
  double max_jitter = 0.0;
  /// True when the strategy promises the projection targets (global projection).
  bool certified = false;
  /// A certified, jitter-free task fell below -residual_tol * scale.
  bool violation = false;
};

namespace detail {

inline double norm_ratio_of(const GradientSet& gs) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = 0.0;
  std::size_t nonzero = 0;
  for (const auto& g : gs.grads()) {
    const double n = norm(g);
    if (n == 0.0) continue;
    ++nonzero;
    lo = std::min(lo, n);
    hi = std::max(hi, n);
  }
  return nonzero < 2 ? 1.0 : hi / lo;
}

}  // namespace detail

/// `crafted` holds the per-task gradients after projection, in task order.
/// `jitter` (optional, per task) exempts tasks whose solve needed a shift.
inline BalanceSnapshot snapshot(std::uint64_t step, const GradientSet& before,
                                const GradientSet& adjusted,
                                std::span<const DenseVector> crafted, const CraftConfig& cfg,
                                std::span<const double> jitter = {}) {
  const std::size_t t = adjusted.size();
  if (before.size() != t || crafted.size() != t)
    throw UsageError("snapshot: task counts differ");
  if (!jitter.empty() && jitter.size() != t) throw UsageError("snapshot: jitter length mismatch");

  const StrategyPlan plan = plan_for(cfg);
  BalanceSnapshot s;
  s.step = step;
  s.norm_ratio = detail::norm_ratio_of(adjusted);
  s.raw_norm_ratio = detail::norm_ratio_of(before);
  s.certified = plan.projection == StrategyPlan::Projection::Global;
  for (double j : jitter) s.max_jitter = std::max(s.max_jitter, j);

  std::vector<double> norms(t);
  for (std::size_t i = 0; i < t; ++i) norms[i] = norm(adjusted[i]);

  const ConflictMatrix conflicts = detect_conflicts(adjusted, cfg.conflict_tol);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i + 1; j < t; ++j) {
      if (conflicts[i][j]) ++s.conflict_count;
      if (norms[i] > 0.0 && norms[j] > 0.0)
        s.min_pairwise_cosine =
            std::min(s.min_pairwise_cosine, inner(adjusted[i], adjusted[j]) / (norms[i] * norms[j]));
    }
  }

  bool any = false;
  for (std::size_t i = 0; i < t; ++i) {
    double worst = std::numeric_limits<double>::infinity();
    double scale = 1.0;
    for (std::size_t j = 0; j < t; ++j) {
      if (!conflicts[i][j]) continue;
      const double z = plan.epsilon * norms[i] * norms[j];
      const double gap = inner(crafted[i], adjusted[j]) - z;
      worst = std::min(worst, gap);
      scale = std::max({scale, std::abs(z), std::abs(inner(adjusted[i], adjusted[j]))});
    }
    if (!std::isfinite(worst)) continue;
    s.post_craft_min_alignment = any ? std::min(s.post_craft_min_alignment, worst) : worst;
    any = true;
    const bool jittered = !jitter.empty() && jitter[i] != 0.0;
    if (s.certified && !jittered && worst < -cfg.residual_tol * scale) s.violation = true;
  }
  return s;
}

struct TrajectorySummary {
  std::size_t snapshots = 0;
  double mean_norm_ratio = 0.0;
  double max_norm_ratio = 0.0;
  double mean_raw_norm_ratio = 0.0;
  double max_raw_norm_ratio = 0.0;
  double mean_conflict_count = 0.0;
  std::size_t max_conflict_count = 0;
  double mean_min_pairwise_cosine = 0.0;
  double min_min_pairwise_cosine = 0.0;
  double mean_post_craft_min_alignment = 0.0;
  double min_post_craft_min_alignment = 0.0;
  double max_jitter = 0.0;
  double jitter_fraction = 0.0;
  double violation_fraction = 0.0;
};

inline TrajectorySummary trajectory_summary(std::span<const BalanceSnapshot> snaps) {
  if (snaps.empty()) throw UsageError("trajectory_summary: no snapshots");
  TrajectorySummary s;
  s.snapshots = snaps.size();
  s.max_norm_ratio = snaps.front().norm_ratio;
  s.max_raw_norm_ratio = snaps.front().raw_norm_ratio;
  s.min_min_pairwise_cosine = snaps.front().min_pairwise_cosine;
  s.min_post_craft_min_alignment = snaps.front().post_craft_min_alignment;
  std::size_t violations = 0;
  std::size_t jittered = 0;
  for (const auto& x : snaps) {
    s.mean_norm_ratio += x.norm_ratio;
    s.mean_raw_norm_ratio += x.raw_norm_ratio;
    s.mean_conflict_count += static_cast<double>(x.conflict_count);
    s.mean_min_pairwise_cosine += x.min_pairwise_cosine;
    s.mean_post_craft_min_alignment += x.post_craft_min_alignment;
    s.max_norm_ratio = std::max(s.max_norm_ratio, x.norm_ratio);
    s.max_raw_norm_ratio = std::max(s.max_raw_norm_ratio, x.raw_norm_ratio);
    s.max_conflict_count = std::max(s.max_conflict_count, x.conflict_count);
    s.min_min_pairwise_cosine = std::min(s.min_min_pairwise_cosine, x.min_pairwise_cosine);
    s.min_post_craft_min_alignment = std::min(s.min_post_craft_min_alignment, x.post_craft_min_alignment);
    s.max_jitter = std::max(s.max_jitter, x.max_jitter);
    if (x.violation) ++violations;
    if (x.max_jitter > 0.0) ++jittered;
  }
  const double n = static_cast<double>(snaps.size());
  s.mean_norm_ratio /= n;
  s.mean_raw_norm_ratio /= n;
  s.mean_conflict_count /= n;
  s.mean_min_pairwise_cosine /= n;
  s.mean_post_craft_min_alignment /= n;
  s.violation_fraction = static_cast<double>(violations) / n;
  s.jitter_fraction = static_cast<double>(jittered) / n;
  return s;
}

}  // namespace gradcraft
