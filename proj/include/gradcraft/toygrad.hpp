#pragma once

// Small differentiable multi-task problems: a shared-bottom network with one
// scalar head per task and a family of quadratic task losses. Gradients are
// exact and hand-derived; grad_check compares them against central
// differences. Crafting applies to the shared parameter segment only, each
// head is trained on its own task's gradient.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gradcraft/crafting.hpp"
#include "gradcraft/errors.hpp"
#include "gradcraft/linalg.hpp"
#include "gradcraft/rng.hpp"

namespace gradcraft {

enum class Activation { Identity, Tanh };
enum class LossKind { BCE, MSE };

/// Samples with one feature row and one label per task, both row-major.
struct Batch {
  std::size_t samples = 0;
  std::size_t d_in = 0;
  std::size_t tasks = 0;
  std::vector<double> features;  // samples x d_in
  std::vector<double> labels;    // samples x tasks

  double feature(std::size_t i, std::size_t k) const { return features[i * d_in + k]; }
  double label(std::size_t i, std::size_t t) const { return labels[i * tasks + t]; }

  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(features).subspan(i * d_in, d_in);
  }

  void validate() const {
    if (samples == 0) throw UsageError("Batch: empty batch");
    if (features.size() != samples * d_in) throw UsageError("Batch: feature size mismatch");
    if (labels.size() != samples * tasks) throw UsageError("Batch: label size mismatch");
  }

  /// Rows `idx` in the given order.
  Batch select(std::span<const std::size_t> idx) const {
    Batch out{idx.size(), d_in, tasks, {}, {}};
    out.features.reserve(idx.size() * d_in);
    out.labels.reserve(idx.size() * tasks);
    for (std::size_t i : idx) {
      out.features.insert(out.features.end(), features.begin() + static_cast<std::ptrdiff_t>(i * d_in),
                          features.begin() + static_cast<std::ptrdiff_t>((i + 1) * d_in));
      out.labels.insert(out.labels.end(), labels.begin() + static_cast<std::ptrdiff_t>(i * tasks),
                        labels.begin() + static_cast<std::ptrdiff_t>((i + 1) * tasks));
    }
    return out;
  }
};

/// Flat parameter layout: one shared segment followed by one segment per head.
struct ParamLayout {
  std::size_t shared = 0;
  std::vector<std::size_t> heads;

  std::size_t total() const {
    std::size_t n = shared;
    for (std::size_t h : heads) n += h;
    return n;
  }
  std::size_t head_offset(std::size_t t) const {
    std::size_t off = shared;
    for (std::size_t i = 0; i < t; ++i) off += heads[i];
    return off;
  }
};

// ---------------------------------------------------------------------------
// Shared-bottom model.
//
// h = act(W^T x + b),  logit_t = v_t . h + c_t
//
// Flat layout: W (d_in x hidden, row-major), b (hidden), then per task
// v_t (hidden) followed by c_t.
class SharedBottomModel {
 public:
  SharedBottomModel(std::size_t d_in, std::size_t hidden, std::vector<std::string> task_names,
                    Activation activation = Activation::Tanh,
                    std::vector<LossKind> losses = {})
      : d_in_(d_in), hidden_(hidden), activation_(activation), names_(std::move(task_names)),
        losses_(std::move(losses)) {
    if (d_in_ == 0 || hidden_ == 0) throw UsageError("SharedBottomModel: zero-sized layer");
    if (names_.empty()) throw UsageError("SharedBottomModel: need at least one task");
    if (losses_.empty()) losses_.assign(names_.size(), LossKind::BCE);
    if (losses_.size() != names_.size())
      throw UsageError("SharedBottomModel: one loss kind per task required");
    params_.assign(layout().total(), 0.0);
  }

  /// Gaussian initialization, mean 0.
  void initialize(std::uint64_t seed, double stddev = 0.01) {
    Rng rng(seed);
    for (double& p : params_) p = rng.normal(0.0, stddev);
  }

  std::size_t d_in() const noexcept { return d_in_; }
  std::size_t hidden() const noexcept { return hidden_; }
  std::size_t tasks() const noexcept { return names_.size(); }
  Activation activation() const noexcept { return activation_; }
  const std::vector<std::string>& task_names() const noexcept { return names_; }
  const std::vector<LossKind>& losses() const noexcept { return losses_; }

  std::size_t shared_count() const noexcept { return d_in_ * hidden_ + hidden_; }
  std::size_t head_count() const noexcept { return hidden_ + 1; }

  ParamLayout layout() const {
    return {shared_count(), std::vector<std::size_t>(tasks(), head_count())};
  }

  std::vector<double>& params() noexcept { return params_; }
  const std::vector<double>& params() const noexcept { return params_; }

  void set_params(std::vector<double> p) {
    if (p.size() != params_.size()) throw UsageError("SharedBottomModel: parameter size mismatch");
    params_ = std::move(p);
  }

  double w(std::size_t k, std::size_t h) const { return params_[k * hidden_ + h]; }
  double b(std::size_t h) const { return params_[d_in_ * hidden_ + h]; }
  double head_w(std::size_t t, std::size_t h) const {
    return params_[shared_count() + t * head_count() + h];
  }
  double head_b(std::size_t t) const {
    return params_[shared_count() + t * head_count() + hidden_];
  }

  /// Pre-activations and activations for one sample.
  void hidden_layer(std::span<const double> x, std::vector<double>& pre,
                    std::vector<double>& act) const {
    pre.assign(hidden_, 0.0);
    act.assign(hidden_, 0.0);
    for (std::size_t h = 0; h < hidden_; ++h) {
      double a = b(h);
      for (std::size_t k = 0; k < d_in_; ++k) a += x[k] * w(k, h);
      pre[h] = a;
      act[h] = activation_ == Activation::Tanh ? std::tanh(a) : a;
    }
  }

  double logit(std::size_t t, std::span<const double> act) const {
    double z = head_b(t);
    for (std::size_t h = 0; h < hidden_; ++h) z += head_w(t, h) * act[h];
    return z;
  }

  /// samples x tasks logits, row-major.
  std::vector<double> predict(const Batch& batch) const {
    check_batch(batch);
    std::vector<double> out(batch.samples * tasks());
    std::vector<double> pre, act;
    for (std::size_t i = 0; i < batch.samples; ++i) {
      hidden_layer(batch.row(i), pre, act);
      for (std::size_t t = 0; t < tasks(); ++t) out[i * tasks() + t] = logit(t, act);
    }
    return out;
  }

  void check_batch(const Batch& batch) const {
    batch.validate();
    if (batch.d_in != d_in_) throw UsageError("SharedBottomModel: batch feature width mismatch");
    if (batch.tasks != tasks()) throw UsageError("SharedBottomModel: batch task count mismatch");
  }

 private:
  std::size_t d_in_;
  std::size_t hidden_;
  Activation activation_;
  std::vector<std::string> names_;
  std::vector<LossKind> losses_;
  std::vector<double> params_;
};

namespace detail {

// log(1 + exp(-|z|)) form; exact for large |z| of either sign
inline double bce_with_logit(double z, double y) {
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double sample_loss(LossKind kind, double z, double y) {
  if (kind == LossKind::BCE) return bce_with_logit(z, y);
  const double r = z - y;
  return r * r;
}

inline double sample_dloss(LossKind kind, double z, double y) {
  if (kind == LossKind::BCE) return sigmoid(z) - y;
  return 2.0 * (z - y);
}

}  // namespace detail

/// Mean loss per task over the batch.
inline std::vector<double> task_losses(const SharedBottomModel& model, const Batch& batch) {
  const std::vector<double> logits = model.predict(batch);
  const std::size_t t_count = model.tasks();
  std::vector<double> out(t_count, 0.0);
  for (std::size_t t = 0; t < t_count; ++t) {
    double acc = 0.0;
    for (std::size_t i = 0; i < batch.samples; ++i)
      acc += detail::sample_loss(model.losses()[t], logits[i * t_count + t], batch.label(i, t));
    out[t] = acc / static_cast<double>(batch.samples);
  }
  return out;
}

struct TaskGradients {
  std::vector<double> losses;
  /// Gradient of each task's loss w.r.t. the shared segment.
  GradientSet shared;
  /// Gradient of each task's loss w.r.t. its own head.
  std::vector<DenseVector> heads;
};

inline TaskGradients task_gradients(const SharedBottomModel& model, const Batch& batch) {
  model.check_batch(batch);
  const std::size_t t_count = model.tasks();
  const std::size_t hid = model.hidden();
  const std::size_t d_in = model.d_in();
  const double inv_n = 1.0 / static_cast<double>(batch.samples);

  std::vector<std::vector<double>> g_shared(t_count, std::vector<double>(model.shared_count(), 0.0));
  std::vector<std::vector<double>> g_head(t_count, std::vector<double>(model.head_count(), 0.0));
  std::vector<double> losses(t_count, 0.0);

  std::vector<double> pre, act;
  std::vector<double> da(hid);
  for (std::size_t i = 0; i < batch.samples; ++i) {
    const auto x = batch.row(i);
    model.hidden_layer(x, pre, act);
    for (std::size_t t = 0; t < t_count; ++t) {
      const double z = model.logit(t, act);
      const double y = batch.label(i, t);
      losses[t] += detail::sample_loss(model.losses()[t], z, y);
      const double dz = detail::sample_dloss(model.losses()[t], z, y) * inv_n;

      auto& gh = g_head[t];
      for (std::size_t h = 0; h < hid; ++h) gh[h] += dz * act[h];
      gh[hid] += dz;

      for (std::size_t h = 0; h < hid; ++h) {
        const double dh = dz * model.head_w(t, h);
        da[h] = model.activation() == Activation::Tanh ? dh * (1.0 - act[h] * act[h]) : dh;
      }
      auto& gs = g_shared[t];
      for (std::size_t k = 0; k < d_in; ++k) {
        const double xk = x[k];
        for (std::size_t h = 0; h < hid; ++h) gs[k * hid + h] += xk * da[h];
      }
      for (std::size_t h = 0; h < hid; ++h) gs[d_in * hid + h] += da[h];
    }
  }

  TaskGradients out;
  out.losses.resize(t_count);
  std::vector<DenseVector> shared;
  for (std::size_t t = 0; t < t_count; ++t) {
    out.losses[t] = losses[t] * inv_n;
    shared.emplace_back(std::move(g_shared[t]));
    out.heads.emplace_back(std::move(g_head[t]));
  }
  out.shared = GradientSet(model.task_names(), std::move(shared));
  return out;
}

// ---------------------------------------------------------------------------
// Quadratic landscape: loss_i = 0.5 s_i (theta - c_i)^T A_i (theta - c_i).

struct QuadraticTask {
  std::string name;
  DenseVector center;
  SymMatrix curvature;
  double scale = 1.0;
};

class QuadraticLandscape {
 public:
  explicit QuadraticLandscape(std::vector<QuadraticTask> tasks) : tasks_(std::move(tasks)) {
    if (tasks_.empty()) throw UsageError("QuadraticLandscape: need at least one task");
    const std::size_t d = tasks_.front().center.size();
    for (const auto& t : tasks_) {
      if (t.center.size() != d || t.curvature.n() != d)
        throw UsageError("QuadraticLandscape: task '" + t.name + "' has mismatched dimension");
      if (!(t.scale > 0.0)) throw UsageError("QuadraticLandscape: scale must be > 0");
      std::vector<double> l;
      if (std::isfinite(detail::cholesky(t.curvature, 0.0, 0.0, l)))
        throw UsageError("QuadraticLandscape: curvature of '" + t.name +
                         "' is not positive definite");
    }
  }

  std::size_t dimension() const { return tasks_.front().center.size(); }
  std::size_t size() const { return tasks_.size(); }
  const std::vector<QuadraticTask>& tasks() const noexcept { return tasks_; }

  std::vector<std::string> task_names() const {
    std::vector<std::string> n;
    for (const auto& t : tasks_) n.push_back(t.name);
    return n;
  }

 private:
  std::vector<QuadraticTask> tasks_;
};

struct QuadraticEval {
  std::vector<double> losses;
  GradientSet grads;
};

inline QuadraticEval quad_losses_grads(const QuadraticLandscape& land,
                                       std::span<const double> theta) {
  if (theta.size() != land.dimension())
    throw UsageError("quad_losses_grads: theta has dimension " + std::to_string(theta.size()) +
                     ", landscape has " + std::to_string(land.dimension()));
  const std::size_t d = theta.size();
  QuadraticEval out;
  std::vector<DenseVector> grads;
  std::vector<double> diff(d);
  for (const auto& task : land.tasks()) {
    for (std::size_t k = 0; k < d; ++k) diff[k] = theta[k] - task.center[k];
    std::vector<double> ad = task.curvature.multiply(diff);
    out.losses.push_back(0.5 * task.scale * inner(diff, ad));
    for (double& v : ad) v *= task.scale;
    grads.emplace_back(std::move(ad));
  }
  out.grads = GradientSet(land.task_names(), std::move(grads));
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer state and updates.

enum class Optimizer { SGD, Adam };

struct TrainState {
  std::vector<double> params;
  ParamLayout layout;
  Optimizer optimizer = Optimizer::SGD;
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;

  static TrainState create(std::vector<double> params, ParamLayout layout, Optimizer opt,
                           double learning_rate, std::uint64_t seed = 0) {
    if (params.size() != layout.total())
      throw UsageError("TrainState: parameter count does not match layout");
    TrainState s;
    s.params = std::move(params);
    s.layout = std::move(layout);
    s.optimizer = opt;
    s.learning_rate = learning_rate;
    s.seed = seed;
    if (opt == Optimizer::Adam) {
      s.m.assign(s.params.size(), 0.0);
      s.v.assign(s.params.size(), 0.0);
    }
    return s;
  }
};

namespace detail {

inline void update_segment(TrainState& s, std::size_t offset, std::span<const double> g,
                           double bias1, double bias2) {
  if (s.optimizer == Optimizer::SGD) {
    for (std::size_t k = 0; k < g.size(); ++k) s.params[offset + k] -= s.learning_rate * g[k];
    return;
  }
  for (std::size_t k = 0; k < g.size(); ++k) {
    const std::size_t p = offset + k;
    s.m[p] = s.beta1 * s.m[p] + (1.0 - s.beta1) * g[k];
    s.v[p] = s.beta2 * s.v[p] + (1.0 - s.beta2) * g[k] * g[k];
    const double m_hat = s.m[p] / bias1;
    const double v_hat = s.v[p] / bias2;
    s.params[p] -= s.learning_rate * m_hat / (std::sqrt(v_hat) + s.adam_eps);
  }
}

}  // namespace detail

/// Applies the crafted shared gradient to the shared segment and each head's
/// own gradient to that head. `head_grads` must hold one vector per head in
/// the layout (pass zero vectors for heads that should not learn).
inline void apply_update_in_place(TrainState& s, const DenseVector& crafted_shared,
                                  std::span<const DenseVector> head_grads) {
  if (crafted_shared.size() != s.layout.shared)
    throw UsageError("apply_update: crafted gradient has length " +
                     std::to_string(crafted_shared.size()) + ", shared segment has " +
                     std::to_string(s.layout.shared));
  if (head_grads.size() != s.layout.heads.size())
    throw UsageError("apply_update: expected one gradient per head");
  for (std::size_t t = 0; t < head_grads.size(); ++t) {
    if (head_grads[t].size() != s.layout.heads[t])
      throw UsageError("apply_update: head " + std::to_string(t) + " gradient length mismatch");
  }
  if (s.optimizer == Optimizer::Adam && (s.m.size() != s.params.size() || s.v.size() != s.params.size()))
    throw UsageError("apply_update: Adam moments do not match parameter count");

  ++s.step;
  const double t = static_cast<double>(s.step);
  const double bias1 = 1.0 - std::pow(s.beta1, t);
  const double bias2 = 1.0 - std::pow(s.beta2, t);
  detail::update_segment(s, 0, crafted_shared.values(), bias1, bias2);
  for (std::size_t h = 0; h < head_grads.size(); ++h)
    detail::update_segment(s, s.layout.head_offset(h), head_grads[h].values(), bias1, bias2);
}

inline TrainState apply_update(TrainState s, const DenseVector& crafted_shared,
                               std::span<const DenseVector> head_grads = {}) {
  apply_update_in_place(s, crafted_shared, head_grads);
  return s;
}

// ---------------------------------------------------------------------------
// Finite-difference checks.

namespace detail {

inline double rel_err(double analytic, double fd) {
  return std::abs(analytic - fd) / std::max(1e-8, std::abs(analytic) + std::abs(fd));
}

}  // namespace detail

/// Max relative error between analytic gradients (shared plus own head, zero
/// for other heads) and central differences over every task and parameter.
inline double grad_check(const SharedBottomModel& model, const Batch& batch, double h = 1e-5) {
  if (!(h > 0.0)) throw UsageError("grad_check: step must be > 0");
  const TaskGradients tg = task_gradients(model, batch);
  const ParamLayout lay = model.layout();
  const std::size_t t_count = model.tasks();

  SharedBottomModel probe = model;
  double worst = 0.0;
  for (std::size_t p = 0; p < lay.total(); ++p) {
    const double orig = model.params()[p];
    probe.params()[p] = orig + h;
    const auto up = task_losses(probe, batch);
    probe.params()[p] = orig - h;
    const auto down = task_losses(probe, batch);
    probe.params()[p] = orig;
    for (std::size_t t = 0; t < t_count; ++t) {
      const double fd = (up[t] - down[t]) / (2.0 * h);
      double analytic = 0.0;
      if (p < lay.shared) {
        analytic = tg.shared[t][p];
      } else {
        const std::size_t off = lay.head_offset(t);
        if (p >= off && p < off + lay.heads[t]) analytic = tg.heads[t][p - off];
      }
      worst = std::max(worst, detail::rel_err(analytic, fd));
    }
  }
  return worst;
}

inline double grad_check(const QuadraticLandscape& land, std::span<const double> theta,
                         double h = 1e-5) {
  if (!(h > 0.0)) throw UsageError("grad_check: step must be > 0");
  const QuadraticEval base = quad_losses_grads(land, theta);
  std::vector<double> probe(theta.begin(), theta.end());
  double worst = 0.0;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    const double orig = probe[k];
    probe[k] = orig + h;
    const auto up = quad_losses_grads(land, probe).losses;
    probe[k] = orig - h;
    const auto down = quad_losses_grads(land, probe).losses;
    probe[k] = orig;
    for (std::size_t t = 0; t < land.size(); ++t)
      worst = std::max(worst, detail::rel_err(base.grads[t][k], (up[t] - down[t]) / (2.0 * h)));
  }
  return worst;
}

}  // namespace gradcraft
