#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "gradcraft/crafting.hpp"
#include "gradcraft/rng.hpp"

namespace gradcraft::testing {

inline DenseVector random_vector(Rng& rng, std::size_t d, double scale = 1.0) {
  std::vector<double> v(d);
  for (double& x : v) x = scale * rng.normal();
  return DenseVector(std::move(v));
}

/// T random gradients of dimension d whose norms are spread log-uniformly
/// over `decades` orders of magnitude.
inline GradientSet random_set(Rng& rng, std::size_t t, std::size_t d, double decades = 0.0) {
  std::vector<DenseVector> grads;
  for (std::size_t i = 0; i < t; ++i) {
    const double scale = std::pow(10.0, rng.uniform(-decades / 2.0, decades / 2.0));
    grads.push_back(random_vector(rng, d, scale));
  }
  return GradientSet::unnamed(std::move(grads));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

inline double rel_diff(const DenseVector& a, const DenseVector& b) {
  return max_abs_diff(a.values(), b.values()) / std::max(1e-300, norm_inf(b.values()));
}

/// Distance in units in the last place between two finite doubles.
inline std::int64_t ulps(double a, double b) {
  auto key = [](double x) {
    std::int64_t i;
    std::memcpy(&i, &x, sizeof x);
    return i < 0 ? std::numeric_limits<std::int64_t>::min() - i : i;
  };
  const std::int64_t ka = key(a);
  const std::int64_t kb = key(b);
  return ka > kb ? ka - kb : kb - ka;
}

}  // namespace gradcraft::testing
