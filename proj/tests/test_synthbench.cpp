#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "gradcraft/synthbench.hpp"
#include "support.hpp"

namespace gradcraft {
namespace {

const std::vector<double> kWechatSingleAuc{0.7641, 0.8484, 0.7610, 0.8661, 0.8829, 0.8940};
const std::vector<double> kWechatEwAuc{0.7641, 0.8484, 0.7604, 0.8664, 0.8810, 0.9012};
const std::vector<double> kWechatSingleGauc{0.6207, 0.7731, 0.6499, 0.6324, 0.6847, 0.7012};
const std::vector<double> kWechatEwGauc{0.6209, 0.7745, 0.6503, 0.6382, 0.6820, 0.7129};

double phi(const LabeledBatch& b, std::size_t s, std::size_t t) {
  double n11 = 0, n10 = 0, n01 = 0, n00 = 0;
  for (std::size_t i = 0; i < b.batch.samples; ++i) {
    const bool a = b.batch.label(i, s) == 1.0, c = b.batch.label(i, t) == 1.0;
    (a ? (c ? n11 : n10) : (c ? n01 : n00)) += 1;
  }
  return (n11 * n00 - n10 * n01) / std::sqrt((n11 + n10) * (n01 + n00) * (n11 + n01) * (n10 + n00));
}

LabeledBatch all_splits(const DataSplits& s) {
  LabeledBatch out = s.train;
  for (const LabeledBatch* part : {&s.valid, &s.test}) {
    out.batch.features.insert(out.batch.features.end(), part->batch.features.begin(), part->batch.features.end());
    out.batch.labels.insert(out.batch.labels.end(), part->batch.labels.begin(), part->batch.labels.end());
    out.group_ids.insert(out.group_ids.end(), part->group_ids.begin(), part->group_ids.end());
    out.batch.samples += part->batch.samples;
  }
  return out;
}

TEST(Spec, Validation) {
  SyntheticTaskSpec s;
  s.n_tasks = 0;
  EXPECT_THROW(s.validate(), UsageError);
  s = {};
  s.norm_ratio = 0.5;
  EXPECT_THROW(s.validate(), UsageError);
  s = {};
  s.conflict_angle = 4.0;
  EXPECT_THROW(s.validate(), UsageError);
  s = {};
  s.n_tasks = 3;
  s.conflict_angle = std::numbers::pi;  // three mutually opposite directions do not exist
  EXPECT_THROW(gen_quadratic(s), UsageError);
  s = {};
  s.task_correlation = {{1, 0.9}, {0.9, 1}};
  s.n_tasks = 3;
  EXPECT_THROW(s.validate(), UsageError);
}

TEST(GenQuadratic, AntiparallelAtOrigin) {
  SyntheticTaskSpec s;
  s.conflict_angle = std::numbers::pi;
  s.dimension = 2;
  const auto ev = quad_losses_grads(gen_quadratic(s), std::vector<double>{0, 0});
  for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(ev.grads[0][k], -ev.grads[1][k], 1e-12);
}

TEST(GenQuadratic, OrthogonalAtOrigin) {
  SyntheticTaskSpec s;
  s.conflict_angle = std::numbers::pi / 2;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    s.seed = seed;
    const auto ev = quad_losses_grads(gen_quadratic(s), std::vector<double>(s.dimension, 0.0));
    EXPECT_NEAR(inner(ev.grads[0], ev.grads[1]), 0.0, 1e-12);
  }
}

TEST(GenQuadratic, NormRatioAngleAndEqualLossAtOrigin) {
  SyntheticTaskSpec s;
  s.norm_ratio = 10.0;
  s.conflict_angle = 5.0 * std::numbers::pi / 6.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    s.seed = seed;
    const auto ev = quad_losses_grads(gen_quadratic(s), std::vector<double>(s.dimension, 0.0));
    EXPECT_NEAR(norm(ev.grads[0]) / norm(ev.grads[1]), 10.0, 1e-9);
    EXPECT_NEAR(inner(ev.grads[0], ev.grads[1]) / (norm(ev.grads[0]) * norm(ev.grads[1])),
                std::cos(s.conflict_angle), 1e-12);
    EXPECT_NEAR(ev.losses[0], 1.0, 1e-12);
    EXPECT_NEAR(ev.losses[1], 1.0, 1e-12);
  }
}

TEST(GenQuadratic, CorrelationMatrixSetsPairwiseCosines) {
  SyntheticTaskSpec s;
  s.n_tasks = 3;
  s.task_correlation = {{1, -0.4, 0.2}, {-0.4, 1, 0.1}, {0.2, 0.1, 1}};
  const auto ev = quad_losses_grads(gen_quadratic(s), std::vector<double>(s.dimension, 0.0));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      const double c = inner(ev.grads[i], ev.grads[j]) / (norm(ev.grads[i]) * norm(ev.grads[j]));
      EXPECT_NEAR(c, s.task_correlation[i][j], 1e-12);
    }
  }
}

TEST(GenQuadratic, Deterministic) {
  SyntheticTaskSpec s;
  s.n_tasks = 3;
  s.seed = 77;
  const auto a = gen_quadratic(s), b = gen_quadratic(s);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_TRUE(a.tasks()[t].center == b.tasks()[t].center);
    EXPECT_EQ(a.tasks()[t].scale, b.tasks()[t].scale);
  }
}

TEST(GenClassification, SplitsAndInvariants) {
  SyntheticTaskSpec s;
  s.n_tasks = 3;
  s.samples = 1000;
  s.group_count = 7;
  const DataSplits d = gen_classification(s);
  EXPECT_EQ(d.train.batch.samples, 800u);
  EXPECT_EQ(d.valid.batch.samples, 100u);
  EXPECT_EQ(d.test.batch.samples, 100u);
  for (const auto* part : {&d.train, &d.valid, &d.test}) EXPECT_NO_THROW(part->validate());
}

TEST(GenClassification, IdenticalWeightsGiveCorrelatedLabels) {
  SyntheticTaskSpec s;
  s.conflict_angle = 0.0;
  s.samples = 10000;
  EXPECT_GT(phi(all_splits(gen_classification(s)), 0, 1), 0.9);
}

TEST(GenClassification, OppositeWeightsGiveAnticorrelatedLabels) {
  SyntheticTaskSpec s;
  s.conflict_angle = std::numbers::pi;
  s.samples = 10000;
  EXPECT_LT(phi(all_splits(gen_classification(s)), 0, 1), -0.5);
}

TEST(GenClassification, SingleTaskIsLogisticData) {
  SyntheticTaskSpec s;
  s.n_tasks = 1;
  s.samples = 2000;
  const LabeledBatch b = all_splits(gen_classification(s));
  EXPECT_EQ(b.batch.tasks, 1u);
  double pos = 0;
  for (double y : b.batch.labels) pos += y;
  EXPECT_GT(pos, 0.3 * 2000);
  EXPECT_LT(pos, 0.7 * 2000);
}

TEST(GenClassification, NormRatioMakesSparserPositives) {
  SyntheticTaskSpec s;
  s.n_tasks = 2;
  s.norm_ratio = 8.0;
  s.samples = 20000;
  s.group_bias_std = 0.0;
  const LabeledBatch b = all_splits(gen_classification(s));
  double p0 = 0, p1 = 0;
  for (std::size_t i = 0; i < b.batch.samples; ++i) {
    p0 += b.batch.label(i, 0);
    p1 += b.batch.label(i, 1);
  }
  EXPECT_LT(p0, 0.5 * p1);
}

TEST(GenClassification, Deterministic) {
  SyntheticTaskSpec s;
  s.seed = 5;
  s.samples = 500;
  const auto a = gen_classification(s), b = gen_classification(s);
  EXPECT_EQ(a.train.batch.features, b.train.batch.features);
  EXPECT_EQ(a.test.batch.labels, b.test.batch.labels);
  EXPECT_EQ(a.valid.group_ids, b.valid.group_ids);
}

TEST(Auc, HandExamples) {
  EXPECT_EQ(auc(std::vector<double>{0.9, 0.1}, std::vector<double>{1, 0}), 1.0);
  EXPECT_EQ(auc(std::vector<double>{0.1, 0.9}, std::vector<double>{1, 0}), 0.0);
  EXPECT_EQ(auc(std::vector<double>{0.5, 0.5, 0.2}, std::vector<double>{1, 0, 0}), 0.75);
  EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<double>{1, 1}), UndefinedMetricError);
}

TEST(Auc, MatchesPairCountingOracle) {
  Rng rng(51);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(60);
    std::vector<double> s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(6));  // many ties
      y[i] = static_cast<double>(rng.below(2));
    }
    y[0] = 1;
    y[1] = 0;
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (y[i] != 1 || y[j] != 0) continue;
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
    }
    EXPECT_NEAR(auc(s, y), wins / pairs, 1e-14);
  }
}

TEST(Auc, InvariantUnderMonotoneTransformAndComplement) {
  Rng rng(52);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(80);
    std::vector<double> s(n), y(n), t(n), neg(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = std::round(rng.normal() * 4.0) / 4.0;
      y[i] = static_cast<double>(rng.below(2));
      t[i] = std::exp(3.0 * s[i]) + 7.0;
      neg[i] = -s[i];
    }
    y[0] = 1;
    y[1] = 0;
    EXPECT_EQ(auc(s, y), auc(t, y));
    EXPECT_EQ(auc(s, y) + auc(neg, y), 1.0);
  }
}

TEST(Gauc, HandExamples) {
  const std::vector<double> s{0.9, 0.1, 0.5, 0.5};
  const std::vector<double> y{1, 0, 1, 0};
  const std::vector<std::size_t> g{0, 0, 1, 1};
  EXPECT_EQ(gauc(s, y, g), 0.75);
  const std::vector<std::size_t> one{0, 0, 0, 0};
  EXPECT_EQ(gauc(s, y, one), auc(s, y));
  EXPECT_THROW(gauc(s, std::vector<double>{1, 1, 0, 0}, g), UndefinedMetricError);
}

TEST(Gauc, SingleClassGroupsAreSkipped) {
  const std::vector<double> s{0.9, 0.1, 0.3, 0.4, 0.2};
  const std::vector<double> y{1, 0, 1, 1, 1};
  const std::vector<std::size_t> g{0, 0, 1, 1, 1};
  EXPECT_EQ(gauc(s, y, g), 1.0);
}

TEST(Gauc, OneGroupIsBitwiseAuc) {
  Rng rng(53);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(100);
    std::vector<double> s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rng.normal();
      y[i] = static_cast<double>(rng.below(2));
    }
    y[0] = 1;
    y[1] = 0;
    const std::vector<std::size_t> g(n, 0);
    const double a = auc(s, y), b = gauc(s, y, g);
    EXPECT_EQ(std::memcmp(&a, &b, sizeof a), 0);
  }
}

TEST(Aggregate, PublishedSingleAverage) {
  const TaskMetrics single{kWechatSingleAuc, kWechatSingleGauc};
  const MetricTable m = aggregate(single, single);
  EXPECT_NEAR(m.av_a, 0.8361, 5e-5);
  EXPECT_NEAR(m.av_g, 0.6770, 5e-5);
  EXPECT_EQ(m.ri_a, 0.0);
  EXPECT_EQ(m.ri_g, 0.0);
}

TEST(Aggregate, PublishedEqualWeightImprovement) {
  const MetricTable m = aggregate({kWechatEwAuc, kWechatEwGauc}, {kWechatSingleAuc, kWechatSingleGauc});
  EXPECT_NEAR(m.ri_a_percent(), 0.091, 5e-4);
  // The per-task GAUC entries are published to 4 decimals, so their half-unit
  // rounding (5e-5) propagates into the relative improvement; the published
  // RI-G must lie within that first-order band.
  double band = 0.0;
  for (std::size_t t = 0; t < kWechatSingleGauc.size(); ++t) {
    const double s = kWechatSingleGauc[t], e = kWechatEwGauc[t];
    band += 5e-5 / s + 5e-5 * e / (s * s);
  }
  band = 100.0 * band / static_cast<double>(kWechatSingleGauc.size());
  EXPECT_NEAR(m.ri_g_percent(), 0.413, band);
  EXPECT_NEAR(m.ri_a, m.ri_a_percent() / 100.0, 1e-18);
}

TEST(Aggregate, Errors) {
  EXPECT_THROW(aggregate({{0.5}, {0.5}}, {{0.5, 0.6}, {0.5, 0.6}}), UsageError);
  EXPECT_THROW(aggregate({{0.5}, {0.5}}, {{0.0}, {0.5}}), UsageError);
}

TEST(Dataset, RoundTripIsExact) {
  SyntheticTaskSpec s;
  s.n_tasks = 2;
  s.samples = 200;
  const DataSplits d = gen_classification(s);
  std::stringstream ss;
  write_dataset(ss, d.test);
  const LabeledBatch back = read_dataset(ss);
  EXPECT_EQ(back.batch.features, d.test.batch.features);
  EXPECT_EQ(back.batch.labels, d.test.batch.labels);
  EXPECT_EQ(back.group_ids, d.test.group_ids);
  EXPECT_EQ(back.group_count, d.test.group_count);
}

TEST(Dataset, MalformedInputIsParseError) {
  std::stringstream bad("not a dataset\n");
  EXPECT_THROW(read_dataset(bad), ParseError);
  std::stringstream short_row(
      "# gradcraft-dataset v1\n# samples=1 d_in=2 tasks=1 groups=1\ngroup\ty0\tx0\tx1\n0\t1\t0.5\n");
  try {
    read_dataset(short_row);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 4u);
  }
}

}  // namespace
}  // namespace gradcraft
