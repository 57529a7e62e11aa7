#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "adaptsp/error.hpp"
#include "adaptsp/matrix.hpp"

namespace adaptsp {

/// Neumaier's variant of Kahan summation. Order of add() calls is the only
/// thing that determines the result, so callers keep canonical row order.
class CompensatedSum {
 public:
  void add(double x) noexcept {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      carry_ += (sum_ - t) + x;
    } else {
      carry_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const noexcept { return sum_ + carry_; }

 private:
  double sum_ = 0.0;
  double carry_ = 0.0;
};

inline double compensated_dot(std::span<const double> a, std::span<const double> b) {
  CompensatedSum acc;
  for (std::size_t i = 0; i < a.size(); ++i) acc.add(a[i] * b[i]);
  return acc.value();
}

inline double norm2(std::span<const double> a) { return std::sqrt(compensated_dot(a, a)); }

/// Elementwise mean of the rows of `rows`, summed top to bottom.
inline Vector compensated_mean(const Matrix& rows) {
  if (rows.rows() == 0) throw validation_error("compensated_mean: empty input");
  const std::size_t d = rows.cols();
  std::vector<CompensatedSum> acc(d);
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    const auto r = rows.row(i);
    for (std::size_t j = 0; j < d; ++j) acc[j].add(r[j]);
  }
  Vector mean(d);
  const double n = static_cast<double>(rows.rows());
  for (std::size_t j = 0; j < d; ++j) mean[j] = acc[j].value() / n;
  return mean;
}

/// Cosine similarity clamped into [-1, 1]. Throws on a zero-norm operand.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw validation_error("cosine: dimension mismatch");
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) throw validation_error("undefined cosine: zero-norm vector");
  const double c = compensated_dot(a, b) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

inline double infinity_norm(const Matrix& m) {
  double best = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double s = 0.0;
    for (double x : m.row(i)) s += std::abs(x);
    best = std::max(best, s);
  }
  return best;
}

inline double frobenius_norm(const Matrix& m) { return norm2(m.flat()); }

/// Flip `v` so its largest-magnitude element (lowest index on ties) is >= 0.
inline void apply_sign_convention(std::span<double> v) {
  std::size_t arg = 0;
  double best = -1.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (std::abs(v[i]) > best) {
      best = std::abs(v[i]);
      arg = i;
    }
  }
  if (!v.empty() && v[arg] < 0.0) {
    for (double& x : v) x = -x;
  }
}

struct EigenDecomposition {
  Vector eigenvalues;   // descending
  Matrix eigenvectors;  // column j pairs with eigenvalues[j]
  std::size_t sweeps = 0;

  std::size_t order() const noexcept { return eigenvalues.size(); }
  Vector vector(std::size_t j) const {
    Vector v(eigenvectors.rows());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = eigenvectors(i, j);
    return v;
  }
};

struct JacobiOptions {
  double tolerance = 1e-14;   // off-diagonal Frobenius norm relative to ||G||_F
  std::size_t max_sweeps = 100;
  double symmetry_tolerance = 1e-9;
};

/// Cyclic Jacobi eigensolver for a symmetric matrix.
///
/// Each sweep visits the strict upper triangle in row-major order and zeroes
/// (p, q) with one plane rotation. Iteration stops once the off-diagonal
/// Frobenius norm is at most `tolerance * ||G||_F`. Eigenpairs come back
/// sorted by descending eigenvalue (stable on ties) with every eigenvector
/// normalised to the sign convention of apply_sign_convention().
inline EigenDecomposition sym_eigendecomp(const Matrix& input, const JacobiOptions& opt = {}) {
  const std::size_t m = input.rows();
  if (m == 0 || input.cols() != m) {
    throw validation_error("sym_eigendecomp: expected a non-empty square matrix");
  }

  const double g_inf = infinity_norm(input);
  double defect = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (!std::isfinite(input(i, j))) throw validation_error("sym_eigendecomp: non-finite entry");
      defect = std::max(defect, std::abs(input(i, j) - input(j, i)));
    }
  }
  if (defect > opt.symmetry_tolerance * g_inf) {
    throw validation_error("sym_eigendecomp: matrix is not symmetric (defect " +
                           std::to_string(defect) + ")");
  }

  Matrix a(m, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) a(i, j) = 0.5 * (input(i, j) + input(j, i));
  Matrix v = Matrix::identity(m);

  const double target = opt.tolerance * frobenius_norm(a);
  auto off_norm = [&] {
    CompensatedSum s;
    for (std::size_t p = 0; p < m; ++p)
      for (std::size_t q = p + 1; q < m; ++q) s.add(2.0 * a(p, q) * a(p, q));
    return std::sqrt(s.value());
  };

  std::size_t sweep = 0;
  double off = off_norm();
  while (off > target) {
    if (sweep == opt.max_sweeps) {
      throw degenerate_error("sym_eigendecomp: no convergence after " +
                             std::to_string(opt.max_sweeps) +
                             " sweeps (off-diagonal norm " + std::to_string(off) + ")");
    }
    for (std::size_t p = 0; p + 1 < m; ++p) {
      for (std::size_t q = p + 1; q < m; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        for (std::size_t k = 0; k < m; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < m; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
    ++sweep;
    off = off_norm();
  }

  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

  EigenDecomposition out;
  out.sweeps = sweep;
  out.eigenvalues.resize(m);
  out.eigenvectors = Matrix(m, m);
  Vector col(m);
  for (std::size_t j = 0; j < m; ++j) {
    out.eigenvalues[j] = a(order[j], order[j]);
    for (std::size_t i = 0; i < m; ++i) col[i] = v(i, order[j]);
    apply_sign_convention(col);
    for (std::size_t i = 0; i < m; ++i) out.eigenvectors(i, j) = col[i];
  }
  return out;
}

}  // namespace adaptsp
