#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "adaptsp/embedding_store.hpp"
#include "adaptsp/error.hpp"
#include "adaptsp/numerics.hpp"

namespace adaptsp {

inline constexpr double kZeroResidualNorm = 1e-12;

/// r_i = personalized_i - class_i over aligned sets. Both sets must already be
/// in the same prompt order (see align()).
inline ResidualSet compute_residuals(const EmbeddingSet& personalized, const EmbeddingSet& class_set) {
  validate(personalized);
  validate(class_set);
  if (!aligned(personalized, class_set)) {
    throw validation_error("residuals: sets are not aligned (call align first)");
  }
  for (const auto& e : personalized.manifest.entries) {
    if (e.token != TokenRole::personalized) {
      throw validation_error("residuals: personalized set entry '" + e.prompt_id + "' is not tagged personalized");
    }
  }
  for (const auto& e : class_set.manifest.entries) {
    if (e.token != TokenRole::class_anchor) {
      throw validation_error("residuals: class set entry '" + e.prompt_id + "' is not tagged class_anchor");
    }
  }

  ResidualSet r;
  r.data = Matrix(personalized.size(), personalized.dim());
  for (std::size_t i = 0; i < personalized.size(); ++i) {
    const auto p = personalized.data.row(i);
    const auto c = class_set.data.row(i);
    auto out = r.data.row(i);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = p[j] - c[j];
  }
  r.prompt_ids = personalized.manifest.prompt_ids();
  r.parents = {manifest_digest(personalized.manifest), manifest_digest(class_set.manifest)};
  r.sequence_length = personalized.manifest.sequence_length;
  r.token_dim = personalized.manifest.token_dim;
  return r;
}

/// r_m: the compensated mean of the residual rows in stored order.
inline Vector mean_residual(const ResidualSet& residuals) {
  if (residuals.size() == 0) throw validation_error("mean_residual: empty residual set");
  return compensated_mean(residuals.data);
}

struct ResidualStats {
  std::size_t n = 0;
  std::vector<double> pairwise_cosine;  // usable pairs, i < j, row-major
  std::size_t n_pairs = 0;
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double median = 0.0;
  std::vector<std::string> zero_residual_ids;
};

/// Pairwise cosine agreement of the residuals. Rows with norm below 1e-12 are
/// reported in zero_residual_ids and left out of every pair.
inline ResidualStats residual_stats(const ResidualSet& residuals) {
  ResidualStats st;
  st.n = residuals.size();
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < residuals.size(); ++i) {
    if (norm2(residuals.data.row(i)) < kZeroResidualNorm) {
      st.zero_residual_ids.push_back(residuals.prompt_ids.at(i));
    } else {
      usable.push_back(i);
    }
  }
  if (usable.size() < 2) {
    throw validation_error("residual_stats: fewer than 2 residuals with non-zero norm");
  }

  CompensatedSum total;
  for (std::size_t a = 0; a < usable.size(); ++a) {
    for (std::size_t b = a + 1; b < usable.size(); ++b) {
      const double c = cosine(residuals.data.row(usable[a]), residuals.data.row(usable[b]));
      st.pairwise_cosine.push_back(c);
      total.add(c);
    }
  }
  st.n_pairs = st.pairwise_cosine.size();
  st.mean = total.value() / static_cast<double>(st.n_pairs);

  std::vector<double> sorted = st.pairwise_cosine;
  std::sort(sorted.begin(), sorted.end());
  st.min = sorted.front();
  st.max = sorted.back();
  const std::size_t mid = sorted.size() / 2;
  st.median = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
  // Rounding in the compensated mean can leave it a hair outside [min, max].
  st.mean = std::clamp(st.mean, st.min, st.max);
  return st;
}

inline json to_json(const ResidualStats& st) {
  return {{"n", st.n},       {"n_pairs", st.n_pairs}, {"min", st.min},
          {"max", st.max},   {"mean", st.mean},       {"median", st.median},
          {"zero_residual_ids", st.zero_residual_ids}};
}

}  // namespace adaptsp
