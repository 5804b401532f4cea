#pragma once

// The training loop: per step compute task gradients, craft the shared
// update, record balance diagnostics and apply the optimizer. Works on a
// quadratic landscape (all parameters shared) or on a shared-bottom model
// over labeled data with validation-driven early stopping.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gradcraft/crafting.hpp"
#include "gradcraft/diagnostics.hpp"
#include "gradcraft/rng.hpp"
#include "gradcraft/synthbench.hpp"
#include "gradcraft/toygrad.hpp"

namespace gradcraft {

struct RunSpec {
  /// When set, train on this task's loss alone (the Single reference).
  std::optional<std::size_t> single_task;
  CraftConfig craft;
  Optimizer optimizer = Optimizer::SGD;
  double learning_rate = 0.01;
  std::size_t max_steps = 500;
  /// Mini-batch size for classification; 0 means full batch.
  std::size_t batch_size = 256;
  /// Evaluations without validation improvement before stopping; 0 disables.
  std::size_t patience = 10;
  std::size_t eval_every = 10;
  /// Take a balance snapshot every this many steps.
  std::size_t snapshot_stride = 1;
  std::uint64_t seed = 0;
  /// Classification model shape.
  std::size_t hidden = 8;
  Activation activation = Activation::Tanh;
  double init_std = 0.01;
};

struct StepRecord {
  std::uint64_t step = 0;
  std::vector<double> losses;
  double update_norm = 0.0;
  std::optional<BalanceSnapshot> snapshot;
  /// Mean validation loss when evaluated at this step.
  std::optional<double> valid_loss;
};

enum class RunStatus { Ok, Diverged, Failed };

inline std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::Ok: return "ok";
    case RunStatus::Diverged: return "diverged";
    case RunStatus::Failed: return "failed";
  }
  return "?";
}

struct RunResult {
  RunStatus status = RunStatus::Ok;
  std::string message;
  std::size_t steps = 0;
  /// Per-task loss of the returned parameters (train loss for quadratic,
  /// test loss for classification).
  std::vector<double> final_losses;
  std::vector<double> params;
  /// Classification only: per-task test AUC/GAUC.
  TaskMetrics test_metrics;
  std::size_t best_step = 0;
  std::vector<StepRecord> log;
  std::optional<TrajectorySummary> summary;

  double worst_loss() const {
    double w = -std::numeric_limits<double>::infinity();
    for (double l : final_losses) w = std::max(w, l);
    return w;
  }
};

namespace detail {

inline bool all_finite(const std::vector<double>& xs) {
  for (double x : xs) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

inline bool all_zero(const GradientSet& gs) {
  for (const auto& g : gs.grads()) {
    for (double x : g.values()) {
      if (x != 0.0) return false;
    }
  }
  return true;
}

struct CraftedStep {
  DenseVector shared;
  std::optional<BalanceSnapshot> snapshot;
};

inline CraftedStep craft_shared(const GradientSet& gs, const RunSpec& spec, std::uint64_t step,
                                bool want_snapshot) {
  if (spec.single_task) {
    return {gs[*spec.single_task], std::nullopt};
  }
  if (all_zero(gs)) return {DenseVector::zeros(gs.dimension()), std::nullopt};
  CraftConfig cfg = spec.craft;
  cfg.rng_seed = Rng::derive(spec.craft.rng_seed ^ spec.seed, step);
  CraftOutcome out = craft_step(gs, cfg);
  std::optional<BalanceSnapshot> snap;
  if (want_snapshot)
    snap = snapshot(step, gs, out.adjusted, out.per_task, cfg, out.report.jitter_levels);
  return {std::move(out.combined), std::move(snap)};
}

inline void finish_summary(RunResult& r) {
  std::vector<BalanceSnapshot> snaps;
  for (const auto& rec : r.log) {
    if (rec.snapshot) snaps.push_back(*rec.snapshot);
  }
  if (!snaps.empty()) r.summary = trajectory_summary(snaps);
}

}  // namespace detail

/// Trains from theta = 0 for spec.max_steps steps (or until every task
/// gradient vanishes).
inline RunResult train_quadratic(const QuadraticLandscape& land, const RunSpec& spec) {
  RunResult r;
  const std::size_t d = land.dimension();
  TrainState state = TrainState::create(std::vector<double>(d, 0.0), ParamLayout{d, {}},
                                        spec.optimizer, spec.learning_rate, spec.seed);
  const std::size_t stride = std::max<std::size_t>(spec.snapshot_stride, 1);
  try {
    for (std::size_t step = 0; step < spec.max_steps; ++step) {
      const QuadraticEval ev = quad_losses_grads(land, state.params);
      if (!detail::all_finite(ev.losses)) {
        r.status = RunStatus::Diverged;
        r.message = "non-finite loss at step " + std::to_string(step);
        break;
      }
      if (detail::all_zero(ev.grads)) break;
      auto crafted = detail::craft_shared(ev.grads, spec, step, step % stride == 0);
      StepRecord rec{step, ev.losses, norm(crafted.shared), std::move(crafted.snapshot), std::nullopt};
      apply_update_in_place(state, crafted.shared, {});
      r.log.push_back(std::move(rec));
      r.steps = step + 1;
    }
  } catch (const NumericalError& e) {
    r.status = RunStatus::Diverged;
    r.message = e.what();
  } catch (const Error& e) {
    r.status = RunStatus::Failed;
    r.message = e.what();
  }
  r.params = state.params;
  if (r.status == RunStatus::Ok) {
    r.final_losses = quad_losses_grads(land, state.params).losses;
    if (!detail::all_finite(r.final_losses)) {
      r.status = RunStatus::Diverged;
      r.message = "non-finite final loss";
    }
  }
  r.best_step = r.steps;
  detail::finish_summary(r);
  return r;
}

/// Mini-batch training of a shared-bottom model on data.train with early
/// stopping on the mean validation loss; the best parameters are scored on
/// data.test. In Single mode only the chosen task's head is trained.
inline RunResult train_classification(const DataSplits& data, const RunSpec& spec) {
  RunResult r;
  const std::size_t t_count = data.train.batch.tasks;
  std::vector<std::string> names;
  for (std::size_t t = 0; t < t_count; ++t) names.push_back("task" + std::to_string(t));
  SharedBottomModel model(data.train.batch.d_in, spec.hidden, names, spec.activation);
  model.initialize(Rng::derive(spec.seed, 0x1417), spec.init_std);

  TrainState state = TrainState::create(model.params(), model.layout(), spec.optimizer,
                                        spec.learning_rate, spec.seed);
  const std::size_t n = data.train.batch.samples;
  const std::size_t bs = spec.batch_size == 0 ? n : std::min(spec.batch_size, n);
  const std::size_t stride = std::max<std::size_t>(spec.snapshot_stride, 1);
  const std::size_t eval_every = std::max<std::size_t>(spec.eval_every, 1);

  Rng shuffle(Rng::derive(spec.seed, 0x5bf1));
  std::vector<std::size_t> order;
  std::size_t cursor = n;

  auto mean_valid_loss = [&](const SharedBottomModel& m) {
    const auto losses = task_losses(m, data.valid.batch);
    if (spec.single_task) return losses[*spec.single_task];
    double s = 0.0;
    for (double l : losses) s += l;
    return s / static_cast<double>(losses.size());
  };

  double best = std::numeric_limits<double>::infinity();
  std::vector<double> best_params = state.params;
  std::size_t since_best = 0;

  try {
    for (std::size_t step = 0; step < spec.max_steps; ++step) {
      if (cursor + bs > n) {
        order = shuffle.permutation(n);
        cursor = 0;
      }
      const Batch mb = data.train.batch.select(std::span<const std::size_t>(order).subspan(cursor, bs));
      cursor += bs;

      model.set_params(state.params);
      TaskGradients tg = task_gradients(model, mb);
      if (!detail::all_finite(tg.losses)) {
        r.status = RunStatus::Diverged;
        r.message = "non-finite loss at step " + std::to_string(step);
        break;
      }
      auto crafted = detail::craft_shared(tg.shared, spec, step, step % stride == 0);
      if (spec.single_task) {
        for (std::size_t t = 0; t < t_count; ++t) {
          if (t != *spec.single_task) tg.heads[t] = DenseVector::zeros(model.head_count());
        }
      }
      StepRecord rec{step, tg.losses, norm(crafted.shared), std::move(crafted.snapshot), std::nullopt};
      apply_update_in_place(state, crafted.shared, tg.heads);
      r.steps = step + 1;

      if (r.steps % eval_every == 0 || r.steps == spec.max_steps) {
        model.set_params(state.params);
        const double v = mean_valid_loss(model);
        rec.valid_loss = v;
        if (!std::isfinite(v)) {
          r.log.push_back(std::move(rec));
          r.status = RunStatus::Diverged;
          r.message = "non-finite validation loss at step " + std::to_string(r.steps);
          break;
        }
        if (v < best) {
          best = v;
          best_params = state.params;
          r.best_step = r.steps;
          since_best = 0;
        } else if (spec.patience > 0 && ++since_best >= spec.patience) {
          r.log.push_back(std::move(rec));
          break;
        }
      }
      r.log.push_back(std::move(rec));
    }
  } catch (const NumericalError& e) {
    r.status = RunStatus::Diverged;
    r.message = e.what();
  } catch (const Error& e) {
    r.status = RunStatus::Failed;
    r.message = e.what();
  }

  r.params = best_params;
  if (r.status == RunStatus::Ok) {
    model.set_params(best_params);
    r.final_losses = task_losses(model, data.test.batch);
    const std::vector<double> logits = model.predict(data.test.batch);
    try {
      for (std::size_t t = 0; t < t_count; ++t) {
        std::vector<double> scores(data.test.batch.samples);
        for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = logits[i * t_count + t];
        const auto labels = data.test.task_labels(t);
        r.test_metrics.auc.push_back(auc(scores, labels));
        r.test_metrics.gauc.push_back(gauc(scores, labels, data.test.group_ids));
      }
    } catch (const UndefinedMetricError& e) {
      r.status = RunStatus::Failed;
      r.message = e.what();
    }
  }
  detail::finish_summary(r);
  return r;
}

}  // namespace gradcraft
