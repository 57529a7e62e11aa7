#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "adaptsp/embedding_store.hpp"
#include "adaptsp/error.hpp"
#include "adaptsp/numerics.hpp"
#include "adaptsp/residuals.hpp"

namespace adaptsp {

inline constexpr double kRankTolerance = 1e-10;  // relative to the leading eigenvalue
inline constexpr double kMinTotalVariance = 1e-20;

/// Principal subspace of a set of rows: the mean plus orthonormal components
/// ordered by the variance they carry (sample variance, divisor n - 1).
struct Subspace {
  Vector mean;
  Matrix components;  // rank x d, one component per row
  Vector eigenvalues;
  Vector explained_variance_ratio;
  Vector cev;
  std::string source_digest;

  std::size_t rank() const noexcept { return components.rows(); }
  std::size_t dim() const noexcept { return mean.size(); }
};

/// Snapshot PCA: eigendecompose the n x n Gram matrix of the centered rows and
/// lift each retained eigenvector u_j to data space as X_c^T u_j / ||X_c^T u_j||.
inline Subspace fit_subspace(const Matrix& rows, std::string source_digest) {
  const std::size_t n = rows.rows();
  const std::size_t d = rows.cols();
  if (n < 2) throw validation_error("fit_subspace: need at least 2 rows");

  Subspace s;
  s.source_digest = std::move(source_digest);
  s.mean = compensated_mean(rows);

  Matrix centered(n, d);
  double mean_sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    auto out = centered.row(i);
    const auto in = rows.row(i);
    for (std::size_t j = 0; j < d; ++j) out[j] = in[j] - s.mean[j];
    mean_sq = std::max(mean_sq, compensated_dot(in, in));
  }

  Matrix gram(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      gram(i, j) = gram(j, i) = compensated_dot(centered.row(i), centered.row(j));
    }
  }
  double trace = 0.0;
  for (std::size_t i = 0; i < n; ++i) trace += gram(i, i);
  const double divisor = static_cast<double>(n - 1);
  // Subtracting the mean of identical rows can leave ulp-level debris, so the
  // floor also scales with the squared magnitude of the data.
  if (trace / divisor <= kMinTotalVariance * std::max(1.0, mean_sq)) {
    throw degenerate_error("all residuals identical: CEV undefined");
  }

  const auto eig = sym_eigendecomp(gram);
  const double lead = eig.eigenvalues.front();
  const std::size_t max_rank = std::min(n - 1, d);
  std::vector<Vector> basis;
  for (std::size_t j = 0; j < eig.order() && basis.size() < max_rank; ++j) {
    if (!(eig.eigenvalues[j] > kRankTolerance * lead)) break;
    const Vector u = eig.vector(j);
    Vector v(d, 0.0);
    std::vector<CompensatedSum> acc(d);
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = centered.row(i);
      for (std::size_t k = 0; k < d; ++k) acc[k].add(u[i] * r[k]);
    }
    for (std::size_t k = 0; k < d; ++k) v[k] = acc[k].value();
    // Two Gram-Schmidt passes against the earlier components keep the
    // trailing, small-eigenvalue directions orthogonal.
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& b : basis) {
        const double proj = compensated_dot(v, b);
        for (std::size_t k = 0; k < d; ++k) v[k] -= proj * b[k];
      }
    }
    const double len = norm2(v);
    if (len == 0.0) break;
    for (double& x : v) x /= len;
    apply_sign_convention(v);
    basis.push_back(std::move(v));
    s.eigenvalues.push_back(eig.eigenvalues[j] / divisor);
  }

  s.components = Matrix(basis.size(), d);
  for (std::size_t j = 0; j < basis.size(); ++j) {
    std::copy(basis[j].begin(), basis[j].end(), s.components.row(j).begin());
  }

  CompensatedSum total;
  for (double l : s.eigenvalues) total.add(l);
  CompensatedSum running;
  for (double l : s.eigenvalues) {
    const double ratio = l / total.value();
    s.explained_variance_ratio.push_back(ratio);
    running.add(ratio);
    s.cev.push_back(running.value());
  }
  return s;
}

inline Subspace fit_subspace(const ResidualSet& residuals) {
  return fit_subspace(residuals.data, residual_digest(residuals));
}

inline Subspace fit_subspace(const EmbeddingSet& set) {
  return fit_subspace(set.data, matrix_digest(set.data));
}

struct CevPoint {
  std::size_t k;
  double cev;
};

inline std::vector<CevPoint> cev_curve(const Subspace& s, std::size_t k_max) {
  if (k_max < 1) throw validation_error("cev_curve: k_max must be at least 1");
  std::vector<CevPoint> out;
  for (std::size_t k = 1; k <= std::min(k_max, s.rank()); ++k) out.push_back({k, s.cev[k - 1]});
  return out;
}

struct ThresholdCount {
  std::size_t k;
  bool reached;  // false: the CEV never got to the threshold, k == rank
};

/// Smallest k with cev_k >= threshold.
inline ThresholdCount components_to_threshold(const Subspace& s, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw validation_error("threshold must lie in (0, 1]");
  }
  for (std::size_t k = 0; k < s.rank(); ++k) {
    if (s.cev[k] >= threshold) return {k + 1, true};
  }
  // cev ends at 1 up to rounding; a threshold of exactly 1 counts as reached
  // within the same tolerance the CEV invariant allows.
  if (s.rank() > 0 && s.cev.back() >= threshold - 1e-9) return {s.rank(), true};
  return {s.rank(), false};
}

/// Affine projection mean + sum_{j<k} <r - mean, v_j> v_j. With recenter off
/// this is the plain linear projection sum_{j<k} <r, v_j> v_j.
inline Vector project(const Subspace& s, std::span<const double> r, std::size_t k, bool recenter = true) {
  if (k > s.rank()) {
    throw validation_error("k = " + std::to_string(k) + " exceeds subspace rank " + std::to_string(s.rank()));
  }
  if (r.size() != s.dim()) throw validation_error("project: dimension mismatch");
  const std::size_t d = s.dim();
  Vector delta(r.begin(), r.end());
  if (recenter) {
    for (std::size_t i = 0; i < d; ++i) delta[i] -= s.mean[i];
  }
  Vector out = recenter ? s.mean : Vector(d, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    const auto v = s.components.row(j);
    const double w = compensated_dot(delta, v);
    for (std::size_t i = 0; i < d; ++i) out[i] += w * v[i];
  }
  return out;
}

inline std::string subspace_digest(const Subspace& s) {
  return Sha256()
      .update(std::to_string(s.rank()) + "x" + std::to_string(s.dim()) + ";")
      .update(s.mean)
      .update(s.components.flat())
      .update(s.eigenvalues)
      .finish();
}

inline json spectrum_json(const Subspace& s) {
  return {{"eigenvalues", s.eigenvalues},
          {"ratios", s.explained_variance_ratio},
          {"cev", s.cev},
          {"rank", s.rank()},
          {"source_digest", s.source_digest},
          {"divisor", "n-1"},
          {"format_version", kFormatVersion}};
}

/// Archive layout: <dir>/mean.npy, <dir>/components.npy, <dir>/spectrum.json.
inline void save_subspace(const Subspace& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_vector(s.mean, dir / "mean.npy", Dtype::f64);
  const std::size_t shape[] = {s.rank(), s.dim()};
  write_npy(dir / "components.npy", shape, s.components.flat(), Dtype::f64);
  write_file(dir / "spectrum.json", spectrum_json(s).dump(2) + "\n");
}

inline Subspace load_subspace(const std::filesystem::path& dir) {
  Subspace s;
  s.mean = load_vector(dir / "mean.npy");
  auto comps = read_npy(dir / "components.npy");
  if (comps.shape.size() != 2 || comps.shape[1] != s.mean.size()) {
    throw validation_error("subspace archive: components shape does not match mean");
  }
  s.components = Matrix(comps.shape[0], comps.shape[1], std::move(comps.values));
  try {
    const auto j = json::parse(read_file(dir / "spectrum.json"));
    if (j.at("format_version").get<int>() != kFormatVersion) {
      throw validation_error("subspace archive: unsupported format_version");
    }
    s.eigenvalues = j.at("eigenvalues").get<Vector>();
    s.explained_variance_ratio = j.at("ratios").get<Vector>();
    s.cev = j.at("cev").get<Vector>();
    s.source_digest = j.at("source_digest").get<std::string>();
    if (j.at("rank").get<std::size_t>() != s.rank() || s.eigenvalues.size() != s.rank() ||
        s.cev.size() != s.rank() || s.explained_variance_ratio.size() != s.rank()) {
      throw validation_error("subspace archive: spectrum does not match components");
    }
  } catch (const json::exception& ex) {
    throw validation_error(std::string("subspace archive: ") + ex.what());
  }
  return s;
}

}  // namespace adaptsp
