#pragma once

#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "adaptsp/embedding_store.hpp"
#include "adaptsp/error.hpp"
#include "adaptsp/numerics.hpp"
#include "adaptsp/subspace.hpp"

namespace adaptsp {

inline constexpr double kSlerpLerpThreshold = 1e-7;  // on sin(omega)

/// Runs fn(i) for every row index. Each row owns its output slot, so the
/// result does not depend on `threads`.
inline void for_each_row(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::jthread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&, lo, hi] {
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

enum class AdjustMode { mean_residual, subspace_projection, slerp };

inline const char* to_string(AdjustMode m) {
  switch (m) {
    case AdjustMode::mean_residual: return "mean_residual";
    case AdjustMode::subspace_projection: return "subspace_projection";
    case AdjustMode::slerp: return "slerp";
  }
  return "?";
}

struct AdjustmentRequest {
  EmbeddingSet anchor;
  AdjustMode mode = AdjustMode::mean_residual;
  std::optional<Vector> r_m;
  std::optional<Subspace> subspace;
  std::optional<ResidualSet> residuals;
  std::optional<std::size_t> k;
  std::optional<double> t;
  std::optional<EmbeddingSet> target;
  bool recenter = true;
  unsigned threads = 1;
};

namespace adjust_detail {

inline EmbeddingSet like(const EmbeddingSet& anchor) {
  return {Matrix(anchor.size(), anchor.dim()), anchor.manifest, anchor.dtype_on_disk};
}

}  // namespace adjust_detail

/// anchor_i + r_m for every row (the anchor may come from either encoder).
inline EmbeddingSet adjust_mean_residual(const EmbeddingSet& anchor, std::span<const double> r_m,
                                         unsigned threads = 1) {
  validate(anchor);
  if (r_m.size() != anchor.dim()) {
    throw validation_error("dimension mismatch: anchor d = " + std::to_string(anchor.dim()) +
                           ", r_m d = " + std::to_string(r_m.size()));
  }
  auto out = adjust_detail::like(anchor);
  for_each_row(anchor.size(), threads, [&](std::size_t i) {
    const auto a = anchor.data.row(i);
    auto o = out.data.row(i);
    for (std::size_t j = 0; j < o.size(); ++j) o[j] = a[j] + r_m[j];
  });
  out.manifest.adjustment = {{"mode", to_string(AdjustMode::mean_residual)},
                             {"rm_digest", vector_digest(r_m)},
                             {"parents", {manifest_digest(anchor.manifest)}}};
  return out;
}

/// anchor_i + project(s, r_i, k): only the first k principal directions of
/// each prompt's own residual survive around the mean.
inline EmbeddingSet adjust_subspace(const EmbeddingSet& anchor, const ResidualSet& residuals, const Subspace& s,
                                    std::size_t k, bool recenter = true, unsigned threads = 1) {
  validate(anchor);
  if (anchor.manifest.prompt_ids() != residuals.prompt_ids) {
    throw validation_error("alignment failure: anchor and residual prompt ids differ");
  }
  if (anchor.dim() != residuals.dim() || s.dim() != anchor.dim()) {
    throw validation_error("dimension mismatch between anchor, residuals and subspace");
  }
  if (k > s.rank()) {
    throw validation_error("k = " + std::to_string(k) + " exceeds subspace rank " + std::to_string(s.rank()));
  }
  auto out = adjust_detail::like(anchor);
  for_each_row(anchor.size(), threads, [&](std::size_t i) {
    const Vector p = project(s, residuals.data.row(i), k, recenter);
    const auto a = anchor.data.row(i);
    auto o = out.data.row(i);
    for (std::size_t j = 0; j < o.size(); ++j) o[j] = a[j] + p[j];
  });
  out.manifest.adjustment = {
      {"mode", to_string(AdjustMode::subspace_projection)},
      {"k", k},
      {"recenter", recenter},
      {"anchor_encoder", anchor.manifest.entries.front().encoder},
      {"subspace_digest", subspace_digest(s)},
      {"parents", {manifest_digest(anchor.manifest), residual_digest(residuals)}}};
  return out;
}

/// Spherical interpolation between one anchor and one target row.
inline Vector slerp(std::span<const double> a, std::span<const double> b, double t) {
  const double omega = std::acos(cosine(a, b));
  const double so = std::sin(omega);
  Vector out(a.size());
  if (so > kSlerpLerpThreshold) {
    const double wa = std::sin((1.0 - t) * omega) / so;
    const double wb = std::sin(t * omega) / so;
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = wa * a[j] + wb * b[j];
  } else {
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = (1.0 - t) * a[j] + t * b[j];
  }
  return out;
}

inline EmbeddingSet slerp_adjust(const EmbeddingSet& anchor, const EmbeddingSet& target, double t,
                                 unsigned threads = 1) {
  validate(anchor);
  validate(target);
  if (!(t >= 0.0 && t <= 1.0)) throw validation_error("t must lie in [0, 1]");
  if (anchor.dim() != target.dim()) throw validation_error("dimension mismatch between anchor and target");
  if (anchor.manifest.prompt_ids() != target.manifest.prompt_ids()) {
    throw validation_error("alignment failure: anchor and target prompt ids differ");
  }
  auto out = adjust_detail::like(anchor);
  for_each_row(anchor.size(), threads, [&](std::size_t i) {
    const auto a = anchor.data.row(i);
    const auto b = target.data.row(i);
    if (norm2(a) == 0.0 || norm2(b) == 0.0) {
      throw validation_error("slerp: zero-norm row for prompt '" + anchor.manifest.entries[i].prompt_id + "'");
    }
    const Vector r = slerp(a, b, t);
    std::copy(r.begin(), r.end(), out.data.row(i).begin());
  });
  out.manifest.adjustment = {{"mode", to_string(AdjustMode::slerp)},
                             {"t", t},
                             {"lerp_threshold", kSlerpLerpThreshold},
                             {"parents", {manifest_digest(anchor.manifest), manifest_digest(target.manifest)}}};
  return out;
}

/// Dispatches a request after checking the mode's required inputs.
inline EmbeddingSet apply(const AdjustmentRequest& req) {
  switch (req.mode) {
    case AdjustMode::mean_residual:
      if (!req.r_m) throw validation_error("mean_residual adjustment requires r_m");
      return adjust_mean_residual(req.anchor, *req.r_m, req.threads);
    case AdjustMode::subspace_projection:
      if (!req.subspace || !req.residuals || !req.k) {
        throw validation_error("subspace_projection adjustment requires subspace, residuals and k");
      }
      return adjust_subspace(req.anchor, *req.residuals, *req.subspace, *req.k, req.recenter, req.threads);
    case AdjustMode::slerp:
      if (!req.target || !req.t) throw validation_error("slerp adjustment requires target and t");
      return slerp_adjust(req.anchor, *req.target, *req.t, req.threads);
  }
  throw internal_error("unknown adjustment mode");
}

}  // namespace adaptsp
