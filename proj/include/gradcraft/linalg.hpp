#pragma once

// Minimal dense linear algebra for the crafting kernel. Sizes are small
// (Gram systems are at most T x T with T in the tens), so everything is
// straightforward loops with a fixed left-to-right summation order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gradcraft/errors.hpp"

namespace gradcraft {

/// A finite, non-empty vector of doubles.
class DenseVector {
 public:
  DenseVector() = default;

  explicit DenseVector(std::vector<double> values) : values_(std::move(values)) {
    validate();
  }

  DenseVector(std::initializer_list<double> values) : values_(values) {
    validate();
  }

  static DenseVector zeros(std::size_t d) {
    if (d == 0) throw UsageError("DenseVector: dimension must be >= 1");
    DenseVector v;
    v.values_.assign(d, 0.0);
    return v;
  }

  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double operator[](std::size_t i) const { return values_[i]; }

  std::span<const double> values() const noexcept { return values_; }
  const std::vector<double>& raw() const noexcept { return values_; }

  friend bool operator==(const DenseVector&, const DenseVector&) = default;

 private:
  void validate() const {
    if (values_.empty()) throw UsageError("DenseVector: dimension must be >= 1");
    for (double x : values_) {
      if (!std::isfinite(x))
        throw NumericalError("DenseVector: non-finite entry");
    }
  }

  std::vector<double> values_;
};

/// Dense symmetric n x n matrix. Writes go through set(), which fills both
/// triangles, so the stored array is exactly symmetric.
class SymMatrix {
 public:
  explicit SymMatrix(std::size_t n) : n_(n), values_(n * n, 0.0) {
    if (n == 0) throw UsageError("SymMatrix: n must be >= 1");
  }

  /// Builds from the lower triangle of `rows`; the upper triangle is ignored.
  static SymMatrix from_lower(const std::vector<std::vector<double>>& rows) {
    SymMatrix m(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != i + 1 && rows[i].size() != rows.size())
        throw UsageError("SymMatrix: row " + std::to_string(i) + " must hold " + std::to_string(i + 1) +
                         " or " + std::to_string(rows.size()) + " entries");
      for (std::size_t j = 0; j <= i; ++j) m.set(i, j, rows[i][j]);
    }
    return m;
  }

  static SymMatrix identity(std::size_t n) {
    SymMatrix m(n);
    for (std::size_t i = 0; i < n; ++i) m.set(i, i, 1.0);
    return m;
  }

  std::size_t n() const noexcept { return n_; }

  double operator()(std::size_t i, std::size_t j) const {
    return values_[i * n_ + j];
  }

  void set(std::size_t i, std::size_t j, double v) {
    values_[i * n_ + j] = v;
    values_[j * n_ + i] = v;
  }

  double trace() const {
    double t = 0.0;
    for (std::size_t i = 0; i < n_; ++i) t += (*this)(i, i);
    return t;
  }

  /// Max absolute row sum.
  double norm_inf() const {
    double best = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < n_; ++j) row += std::abs((*this)(i, j));
      best = std::max(best, row);
    }
    return best;
  }

  std::vector<double> multiply(std::span<const double> x) const {
    if (x.size() != n_) throw UsageError("SymMatrix::multiply: dimension mismatch");
    std::vector<double> y(n_, 0.0);
    for (std::size_t i = 0; i < n_; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n_; ++j) acc += (*this)(i, j) * x[j];
      y[i] = acc;
    }
    return y;
  }

  std::span<const double> data() const noexcept { return values_; }

 private:
  std::size_t n_;
  std::vector<double> values_;
};

// ---------------------------------------------------------------------------
// Vector kernels. Summation runs strictly left to right.

inline double inner(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw UsageError("inner: dimension mismatch (" + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()) + ")");
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) acc += a[k] * b[k];
  return acc;
}

inline double inner(const DenseVector& a, const DenseVector& b) {
  return inner(a.values(), b.values());
}

inline double norm(std::span<const double> a) { return std::sqrt(inner(a, a)); }

inline double norm(const DenseVector& a) { return norm(a.values()); }

inline double norm_inf(std::span<const double> a) {
  double m = 0.0;
  for (double x : a) m = std::max(m, std::abs(x));
  return m;
}

/// c * a
inline DenseVector scaled(const DenseVector& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = c * a[k];
  return DenseVector(std::move(out));
}

/// a + c * b
inline DenseVector axpy(const DenseVector& a, double c, const DenseVector& b) {
  if (a.size() != b.size()) throw UsageError("axpy: dimension mismatch");
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] + c * b[k];
  return DenseVector(std::move(out));
}

/// Gram matrix of `rows`: result(j, k) = inner(rows[j], rows[k]).
inline SymMatrix gram(std::span<const DenseVector> rows) {
  if (rows.empty()) throw UsageError("gram: need at least one row");
  const std::size_t d = rows.front().size();
  for (const auto& r : rows) {
    if (r.size() != d) throw UsageError("gram: rows differ in length");
  }
  SymMatrix g(rows.size());
  for (std::size_t j = 0; j < rows.size(); ++j) {
    for (std::size_t k = 0; k <= j; ++k) g.set(j, k, inner(rows[j], rows[k]));
  }
  return g;
}

// ---------------------------------------------------------------------------
// SPD solve.

/// Diagonal shifts tried, in order, when plain factorization fails. Each
/// level is multiplied by trace(A)/n before use.
struct JitterPolicy {
  std::vector<double> levels{1e-10, 1e-8, 1e-6};
};

struct SpdSolution {
  std::vector<double> x;
  /// Absolute shift added to the diagonal; 0 when none was needed.
  double jitter = 0.0;
};

namespace detail {

// In-place lower Cholesky of A + shift*I. Returns the first pivot that fell
// at or below `floor`, or nothing on success (pivot reported as +inf).
inline double cholesky(const SymMatrix& a, double shift, double floor,
                       std::vector<double>& l) {
  const std::size_t n = a.n();
  l.assign(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a(j, j) + shift;
    for (std::size_t k = 0; k < j; ++k) diag -= l[j * n + k] * l[j * n + k];
    if (!(diag > floor)) return diag;
    const double ljj = std::sqrt(diag);
    l[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = s / ljj;
    }
  }
  return std::numeric_limits<double>::infinity();
}

inline std::vector<double> cholesky_solve(const std::vector<double>& l,
                                          std::size_t n,
                                          std::span<const double> rhs) {
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = rhs[i];
    for (std::size_t k = 0; k < i; ++k) s -= l[i * n + k] * y[k];
    y[i] = s / l[i * n + i];
  }
  std::vector<double> x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = y[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l[k * n + ii] * x[k];
    x[ii] = s / l[ii * n + ii];
  }
  return x;
}

}  // namespace detail

/// Solves A x = rhs for symmetric positive definite A.
///
/// A pivot counts as failed when it is not above 64 eps * max(diag A). On
/// failure the factorization is retried on A + lambda I for each jitter level,
/// lambda = level * trace(A) / n, and the lambda that succeeded is returned.
/// One step of iterative refinement is applied against the factored matrix.
inline SpdSolution solve_spd(const SymMatrix& a, std::span<const double> rhs,
                             const JitterPolicy& policy = {}) {
  const std::size_t n = a.n();
  if (rhs.size() != n)
    throw UsageError("solve_spd: rhs length " + std::to_string(rhs.size()) +
                     " does not match matrix order " + std::to_string(n));
  for (double v : a.data()) {
    if (!std::isfinite(v)) throw NumericalError("solve_spd: non-finite matrix entry");
  }
  for (double v : rhs) {
    if (!std::isfinite(v)) throw NumericalError("solve_spd: non-finite rhs entry");
  }

  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, a(i, i));
  const double floor = 64.0 * std::numeric_limits<double>::epsilon() * max_diag;
  const double unit = a.trace() / static_cast<double>(n);

  std::vector<double> l;
  double shift = 0.0;
  double pivot = detail::cholesky(a, shift, floor, l);
  for (std::size_t level = 0; std::isfinite(pivot) && level < policy.levels.size();
       ++level) {
    shift = policy.levels[level] * unit;
    if (!(shift > 0.0)) continue;
    pivot = detail::cholesky(a, shift, floor, l);
  }
  if (std::isfinite(pivot)) {
    throw SingularSystemError(
        "solve_spd: factorization failed at every jitter level (last pivot " +
            std::to_string(pivot) + ")",
        pivot);
  }

  std::vector<double> x = detail::cholesky_solve(l, n, rhs);

  // residual against the matrix that was actually factored
  std::vector<double> r(n);
  const std::vector<double> ax = a.multiply(x);
  for (std::size_t i = 0; i < n; ++i) r[i] = rhs[i] - (ax[i] + shift * x[i]);
  const std::vector<double> dx = detail::cholesky_solve(l, n, r);
  for (std::size_t i = 0; i < n; ++i) x[i] += dx[i];

  for (double v : x) {
    if (!std::isfinite(v)) throw NumericalError("solve_spd: non-finite solution");
  }
  return {std::move(x), shift};
}

/// Factor of a positive semidefinite matrix: returns lower-triangular L
/// (row-major, n x n) with L L^T = A. Pivots within `tol * max(diag)` of zero
/// are treated as exact zeros and their column is left empty; a pivot below
/// that band means A is not PSD and raises UsageError.
inline std::vector<double> psd_factor(const SymMatrix& a, double tol = 1e-10) {
  const std::size_t n = a.n();
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(a(i, i)));
  const double band = tol * std::max(max_diag, 1e-300);

  std::vector<double> l(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= l[j * n + k] * l[j * n + k];
    if (diag < -band)
      throw UsageError("psd_factor: matrix is not positive semidefinite");
    if (diag <= band) {
      // the column must vanish too, otherwise A is indefinite
      for (std::size_t i = j + 1; i < n; ++i) {
        double s = a(i, j);
        for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
        if (std::abs(s) > std::sqrt(band) * std::sqrt(max_diag) + band)
          throw UsageError("psd_factor: matrix is not positive semidefinite");
      }
      continue;
    }
    const double ljj = std::sqrt(diag);
    l[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = s / ljj;
    }
  }
  return l;
}

}  // namespace gradcraft
