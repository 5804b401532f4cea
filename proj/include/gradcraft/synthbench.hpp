#pragma once

// Synthetic multi-task problems with controllable conflict and imbalance,
// and the ranking metrics used to score them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gradcraft/errors.hpp"
#include "gradcraft/format.hpp"
#include "gradcraft/linalg.hpp"
#include "gradcraft/rng.hpp"
#include "gradcraft/toygrad.hpp"

namespace gradcraft {

struct SyntheticTaskSpec {
  std::size_t n_tasks = 2;
  /// Pairwise angle between task directions, radians.
  double conflict_angle = std::numbers::pi / 2.0;
  /// Optional explicit task correlation matrix; overrides conflict_angle.
  std::vector<std::vector<double>> task_correlation;
  /// Largest over smallest task gradient scale.
  double norm_ratio = 1.0;

  // quadratic mode
  std::size_t dimension = 16;
  /// Eigenvalues of each curvature matrix are log-uniform in [1, this].
  double curvature_condition = 10.0;

  // classification mode
  std::size_t samples = 5000;
  std::size_t d_in = 16;
  std::size_t group_count = 50;
  /// Norm of each ground-truth task weight vector.
  double signal = 2.0;
  /// Std of the per-group logit offset shared by all tasks.
  double group_bias_std = 0.5;

  std::uint64_t seed = 0;

  void validate() const {
    if (n_tasks == 0) throw UsageError("SyntheticTaskSpec: n_tasks must be >= 1");
    if (!(norm_ratio >= 1.0) || !std::isfinite(norm_ratio))
      throw UsageError("SyntheticTaskSpec: norm_ratio must be >= 1");
    if (!(conflict_angle >= 0.0 && conflict_angle <= std::numbers::pi))
      throw UsageError("SyntheticTaskSpec: conflict_angle must lie in [0, pi]");
    if (!task_correlation.empty() && task_correlation.size() != n_tasks)
      throw UsageError("SyntheticTaskSpec: task_correlation must be n_tasks x n_tasks");
    if (!(curvature_condition >= 1.0))
      throw UsageError("SyntheticTaskSpec: curvature_condition must be >= 1");
    if (!(signal >= 0.0) || !(group_bias_std >= 0.0))
      throw UsageError("SyntheticTaskSpec: signal and group_bias_std must be >= 0");
  }

  /// Correlation between task directions, validated as a correlation matrix.
  SymMatrix correlation() const {
    SymMatrix c(n_tasks);
    if (task_correlation.empty()) {
      const double cs = std::cos(conflict_angle);
      for (std::size_t i = 0; i < n_tasks; ++i) {
        for (std::size_t j = 0; j < i; ++j) c.set(i, j, cs);
        c.set(i, i, 1.0);
      }
      return c;
    }
    for (std::size_t i = 0; i < n_tasks; ++i) {
      if (task_correlation[i].size() != n_tasks)
        throw UsageError("SyntheticTaskSpec: task_correlation must be square");
      for (std::size_t j = 0; j < n_tasks; ++j) {
        const double v = task_correlation[i][j];
        if (!(v >= -1.0 && v <= 1.0))
          throw UsageError("SyntheticTaskSpec: correlations must lie in [-1, 1]");
        if (v != task_correlation[j][i])
          throw UsageError("SyntheticTaskSpec: task_correlation must be symmetric");
      }
      if (task_correlation[i][i] != 1.0)
        throw UsageError("SyntheticTaskSpec: task_correlation diagonal must be 1");
    }
    return SymMatrix::from_lower(task_correlation);
  }

  /// Per-task scales, largest first: ratio^((T-1-t)/(T-1)).
  std::vector<double> task_scales() const {
    std::vector<double> r(n_tasks, 1.0);
    if (n_tasks == 1) return r;
    for (std::size_t t = 0; t < n_tasks; ++t) {
      const double e = static_cast<double>(n_tasks - 1 - t) / static_cast<double>(n_tasks - 1);
      r[t] = t == 0 ? norm_ratio : std::pow(norm_ratio, e);
    }
    return r;
  }

  std::vector<std::string> task_names() const {
    std::vector<std::string> names;
    for (std::size_t t = 0; t < n_tasks; ++t) names.push_back("task" + std::to_string(t));
    return names;
  }
};

namespace detail {

// `count` orthonormal vectors in R^dim by modified Gram-Schmidt on Gaussians.
inline std::vector<std::vector<double>> random_orthonormal(Rng& rng, std::size_t count,
                                                           std::size_t dim) {
  if (count > dim) throw UsageError("random_orthonormal: more vectors than dimensions");
  std::vector<std::vector<double>> basis;
  while (basis.size() < count) {
    std::vector<double> v(dim);
    for (double& x : v) x = rng.normal();
    for (const auto& e : basis) {
      const double c = inner(v, e);
      for (std::size_t k = 0; k < dim; ++k) v[k] -= c * e[k];
    }
    const double n = norm(v);
    if (n < 1e-8) continue;
    for (double& x : v) x /= n;
    basis.push_back(std::move(v));
  }
  return basis;
}

// Rows u_t = sum_k L[t][k] e_k, so inner(u_i, u_j) = corr(i, j).
inline std::vector<std::vector<double>> correlated_directions(
    const std::vector<double>& factor, const std::vector<std::vector<double>>& basis) {
  const std::size_t t_count = basis.size();
  const std::size_t dim = basis.front().size();
  std::vector<std::vector<double>> out(t_count, std::vector<double>(dim, 0.0));
  for (std::size_t t = 0; t < t_count; ++t) {
    for (std::size_t k = 0; k <= t; ++k) {
      const double c = factor[t * t_count + k];
      if (c == 0.0) continue;
      for (std::size_t m = 0; m < dim; ++m) out[t][m] += c * basis[k][m];
    }
  }
  return out;
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Generators.

/// Quadratic tasks whose gradients at theta = 0 have pairwise angle
/// `conflict_angle` and norms r_t = task_scales()[t], while every task's loss
/// at theta = 0 equals 1. Each task gets a random SPD curvature with
/// eigenvalues log-uniform in [1, curvature_condition]; the scale and center
/// are then solved for so both conditions hold exactly.
inline QuadraticLandscape gen_quadratic(const SyntheticTaskSpec& spec) {
  spec.validate();
  const std::size_t d = spec.dimension;
  if (spec.n_tasks > d) throw UsageError("gen_quadratic: n_tasks exceeds dimension");
  const std::vector<double> factor = psd_factor(spec.correlation());

  Rng rng(Rng::derive(spec.seed, 0x9a1));
  const auto dirs = detail::correlated_directions(factor, detail::random_orthonormal(rng, spec.n_tasks, d));
  const auto scales = spec.task_scales();
  const auto names = spec.task_names();
  const double log_cond = std::log(spec.curvature_condition);

  std::vector<QuadraticTask> tasks;
  for (std::size_t t = 0; t < spec.n_tasks; ++t) {
    const auto basis = detail::random_orthonormal(rng, d, d);
    std::vector<double> eig(d);
    for (double& e : eig) e = std::exp(rng.uniform() * log_cond);
    SymMatrix a(d);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += basis[k][i] * eig[k] * basis[k][j];
        a.set(i, j, s);
      }
    }
    // q = u^T A^{-1} u. With s = r^2 q / 2 and c = -(r / s) A^{-1} u the
    // gradient at the origin is r u and the loss there is exactly 1.
    SpdSolution ainv_u = solve_spd(a, dirs[t], JitterPolicy{{}});
    const double q = inner(dirs[t], ainv_u.x);
    const double r = scales[t];
    const double s = 0.5 * r * r * q;
    std::vector<double> c(d);
    for (std::size_t k = 0; k < d; ++k) c[k] = -(r / s) * ainv_u.x[k];
    tasks.push_back({names[t], DenseVector(std::move(c)), std::move(a), s});
  }
  return QuadraticLandscape(std::move(tasks));
}

/// Binary multi-task samples with a group id per sample.
struct LabeledBatch {
  Batch batch;
  std::vector<std::size_t> group_ids;
  std::size_t group_count = 1;

  void validate() const {
    batch.validate();
    if (group_ids.size() != batch.samples) throw UsageError("LabeledBatch: one group id per sample");
    for (std::size_t g : group_ids) {
      if (g >= group_count) throw UsageError("LabeledBatch: group id out of range");
    }
    for (double y : batch.labels) {
      if (y != 0.0 && y != 1.0) throw UsageError("LabeledBatch: labels must be 0 or 1");
    }
  }

  /// Column of labels for one task.
  std::vector<double> task_labels(std::size_t t) const {
    std::vector<double> out(batch.samples);
    for (std::size_t i = 0; i < batch.samples; ++i) out[i] = batch.label(i, t);
    return out;
  }

  LabeledBatch slice(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    LabeledBatch out{batch.select(idx), {}, group_count};
    out.group_ids.assign(group_ids.begin() + static_cast<std::ptrdiff_t>(begin),
                         group_ids.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
  }
};

struct DataSplits {
  LabeledBatch train;
  LabeledBatch valid;
  LabeledBatch test;
};

/// Logistic multi-task data. Ground-truth task weights have pairwise cosine
/// given by the task correlation matrix and norm `signal`. Task t's bias
/// targets a positive rate of 0.5 / r_t (r = task_scales()), so sparser tasks
/// yield smaller gradients. Label noise is coupled across tasks through a
/// Gaussian copula with the same correlation, keeping each label's marginal
/// probability equal to sigmoid(logit). Split 8:1:1 in generation order.
inline DataSplits gen_classification(const SyntheticTaskSpec& spec) {
  spec.validate();
  const std::size_t t_count = spec.n_tasks;
  if (t_count > spec.d_in) throw UsageError("gen_classification: n_tasks exceeds d_in");
  if (spec.samples < 10) throw UsageError("gen_classification: need at least 10 samples");
  if (spec.group_count == 0) throw UsageError("gen_classification: group_count must be >= 1");
  const std::vector<double> factor = psd_factor(spec.correlation());

  Rng rng(Rng::derive(spec.seed, 0xc1a5));
  auto weights = detail::correlated_directions(factor, detail::random_orthonormal(rng, t_count, spec.d_in));
  for (auto& w : weights) {
    for (double& x : w) x *= spec.signal;
  }
  std::vector<double> bias(t_count);
  const auto scales = spec.task_scales();
  for (std::size_t t = 0; t < t_count; ++t) bias[t] = -std::log(2.0 * scales[t] - 1.0);
  std::vector<double> group_bias(spec.group_count);
  for (double& g : group_bias) g = rng.normal(0.0, spec.group_bias_std);

  LabeledBatch all;
  all.group_count = spec.group_count;
  all.batch = Batch{spec.samples, spec.d_in, t_count, {}, {}};
  all.batch.features.resize(spec.samples * spec.d_in);
  all.batch.labels.resize(spec.samples * t_count);
  all.group_ids.resize(spec.samples);

  std::vector<double> xi(t_count);
  for (std::size_t i = 0; i < spec.samples; ++i) {
    double* x = &all.batch.features[i * spec.d_in];
    for (std::size_t k = 0; k < spec.d_in; ++k) x[k] = rng.normal();
    const std::size_t g = static_cast<std::size_t>(rng.below(spec.group_count));
    all.group_ids[i] = g;
    for (double& v : xi) v = rng.normal();
    for (std::size_t t = 0; t < t_count; ++t) {
      double latent = 0.0;
      for (std::size_t k = 0; k <= t; ++k) latent += factor[t * t_count + k] * xi[k];
      const double u = detail::normal_cdf(latent);
      double a = bias[t] + group_bias[g];
      for (std::size_t k = 0; k < spec.d_in; ++k) a += weights[t][k] * x[k];
      // P(u > sigmoid(-a)) = sigmoid(a)
      all.batch.labels[i * t_count + t] = u > detail::sigmoid(-a) ? 1.0 : 0.0;
    }
  }

  const std::size_t n_train = spec.samples * 8 / 10;
  const std::size_t n_valid = spec.samples / 10;
  return {all.slice(0, n_train), all.slice(n_train, n_train + n_valid),
          all.slice(n_train + n_valid, spec.samples)};
}

// ---------------------------------------------------------------------------
// Metrics.

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Uses average ranks.
inline double auc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw UsageError("auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0.0;
  double neg = 0.0;
  double rank_sum = 0.0;  // over positives, ranks from 1
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k) {
      const double y = labels[order[k]];
      if (y == 1.0) {
        pos += 1.0;
        rank_sum += avg_rank;
      } else if (y == 0.0) {
        neg += 1.0;
      } else {
        throw UsageError("auc: labels must be 0 or 1");
      }
    }
    i = j + 1;
  }
  if (pos == 0.0 || neg == 0.0) throw UndefinedMetricError("auc: need both positive and negative labels");
  const double u = rank_sum - pos * (pos + 1.0) / 2.0;
  return u / (pos * neg);
}

/// Sample-count weighted mean of per-group AUC over groups that contain both
/// classes; single-class groups are skipped.
inline double gauc(std::span<const double> scores, std::span<const double> labels,
                   std::span<const std::size_t> group_ids) {
  if (scores.size() != labels.size() || scores.size() != group_ids.size())
    throw UsageError("gauc: scores, labels and group ids differ in length");
  std::size_t n_groups = 0;
  for (std::size_t g : group_ids) n_groups = std::max(n_groups, g + 1);
  std::vector<std::vector<std::size_t>> members(n_groups);
  for (std::size_t i = 0; i < group_ids.size(); ++i) members[group_ids[i]].push_back(i);

  std::vector<double> aucs;
  std::vector<double> weights;
  std::vector<double> s, y;
  for (const auto& idx : members) {
    bool has_pos = false;
    bool has_neg = false;
    for (std::size_t i : idx) (labels[i] == 1.0 ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) continue;
    s.clear();
    y.clear();
    for (std::size_t i : idx) {
      s.push_back(scores[i]);
      y.push_back(labels[i]);
    }
    aucs.push_back(auc(s, y));
    weights.push_back(static_cast<double>(idx.size()));
  }
  if (aucs.empty()) throw UndefinedMetricError("gauc: no group contains both classes");
  double total = 0.0;
  for (double w : weights) total += w;
  double out = 0.0;
  for (std::size_t g = 0; g < aucs.size(); ++g) out += (weights[g] / total) * aucs[g];
  return out;
}

struct TaskMetrics {
  std::vector<double> auc;
  std::vector<double> gauc;
};

/// Method-vs-Single comparison. Relative improvements are fractions;
/// multiply by 100 for percentages.
struct MetricTable {
  TaskMetrics method;
  TaskMetrics single;
  double av_a = 0.0;
  double av_g = 0.0;
  double ri_a = 0.0;
  double ri_g = 0.0;

  double ri_a_percent() const { return 100.0 * ri_a; }
  double ri_g_percent() const { return 100.0 * ri_g; }
};

inline MetricTable aggregate(const TaskMetrics& method, const TaskMetrics& single) {
  const std::size_t t = method.auc.size();
  if (t == 0) throw UsageError("aggregate: no tasks");
  if (method.gauc.size() != t || single.auc.size() != t || single.gauc.size() != t)
    throw UsageError("aggregate: task counts differ");
  MetricTable m{method, single, 0.0, 0.0, 0.0, 0.0};
  for (std::size_t i = 0; i < t; ++i) {
    if (single.auc[i] == 0.0 || single.gauc[i] == 0.0)
      throw UsageError("aggregate: Single reference metric is zero");
    m.av_a += method.auc[i];
    m.av_g += method.gauc[i];
    m.ri_a += (method.auc[i] - single.auc[i]) / single.auc[i];
    m.ri_g += (method.gauc[i] - single.gauc[i]) / single.gauc[i];
  }
  const double n = static_cast<double>(t);
  m.av_a /= n;
  m.av_g /= n;
  m.ri_a /= n;
  m.ri_g /= n;
  return m;
}

// ---------------------------------------------------------------------------
// Dataset file: tab-separated text.
//
//   # gradcraft-dataset v1
//   # samples=<n> d_in=<d> tasks=<T> groups=<G>
//   group  y0 .. y{T-1}  x0 .. x{d-1}
//   <one row per sample>

inline void write_dataset(std::ostream& os, const LabeledBatch& data) {
  data.validate();
  const Batch& b = data.batch;
  os << "# gradcraft-dataset v1\n";
  os << "# samples=" << b.samples << " d_in=" << b.d_in << " tasks=" << b.tasks
     << " groups=" << data.group_count << "\n";
  os << "group";
  for (std::size_t t = 0; t < b.tasks; ++t) os << "\ty" << t;
  for (std::size_t k = 0; k < b.d_in; ++k) os << "\tx" << k;
  os << "\n";
  for (std::size_t i = 0; i < b.samples; ++i) {
    os << data.group_ids[i];
    for (std::size_t t = 0; t < b.tasks; ++t) os << '\t' << (b.label(i, t) == 1.0 ? '1' : '0');
    for (std::size_t k = 0; k < b.d_in; ++k) os << '\t' << format_double(b.feature(i, k));
    os << '\n';
  }
}

inline LabeledBatch read_dataset(std::istream& is) {
  std::string line;
  std::size_t line_no = 0;
  auto next = [&]() -> bool {
    if (!std::getline(is, line)) return false;
    ++line_no;
    return true;
  };
  if (!next() || line != "# gradcraft-dataset v1")
    throw ParseError("dataset: missing '# gradcraft-dataset v1' header", 1, 1);
  if (!next()) throw ParseError("dataset: missing size line", 2, 1);
  std::size_t samples = 0, d_in = 0, tasks = 0, groups = 0;
  {
    std::istringstream ss(line);
    std::string hash, a, b, c, d;
    ss >> hash >> a >> b >> c >> d;
    auto field = [&](const std::string& tok, const std::string& key, std::size_t& out) {
      if (tok.rfind(key + "=", 0) != 0)
        throw ParseError("dataset: expected '" + key + "=' on size line", line_no, 1);
      try {
        out = std::stoul(tok.substr(key.size() + 1));
      } catch (const std::exception&) {
        throw ParseError("dataset: bad value for '" + key + "'", line_no, 1);
      }
    };
    if (hash != "#") throw ParseError("dataset: malformed size line", line_no, 1);
    field(a, "samples", samples);
    field(b, "d_in", d_in);
    field(c, "tasks", tasks);
    field(d, "groups", groups);
  }
  if (!next()) throw ParseError("dataset: missing column header", line_no + 1, 1);

  LabeledBatch out;
  out.group_count = groups;
  out.batch = Batch{samples, d_in, tasks, {}, {}};
  out.batch.features.reserve(samples * d_in);
  out.batch.labels.reserve(samples * tasks);
  for (std::size_t i = 0; i < samples; ++i) {
    if (!next()) throw ParseError("dataset: expected " + std::to_string(samples) + " rows", line_no + 1, 1);
    std::istringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, '\t')) cells.push_back(cell);
    if (cells.size() != 1 + tasks + d_in)
      throw ParseError("dataset: row has " + std::to_string(cells.size()) + " columns, expected " +
                           std::to_string(1 + tasks + d_in),
                       line_no, 1);
    std::size_t col = 0;
    try {
      out.group_ids.push_back(std::stoul(cells[col++]));
      for (std::size_t t = 0; t < tasks; ++t) out.batch.labels.push_back(std::stod(cells[col++]));
      for (std::size_t k = 0; k < d_in; ++k) out.batch.features.push_back(std::stod(cells[col++]));
    } catch (const std::exception&) {
      throw ParseError("dataset: unparseable number in column " + std::to_string(col), line_no, 1);
    }
  }
  try {
    out.validate();
  } catch (const UsageError& e) {
    throw ValidationError("dataset", e.what());
  }
  return out;
}

}  // namespace gradcraft
