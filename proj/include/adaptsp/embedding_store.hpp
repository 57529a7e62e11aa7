#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "adaptsp/digest.hpp"
#include "adaptsp/error.hpp"
#include "adaptsp/matrix.hpp"
#include "adaptsp/npy.hpp"

namespace adaptsp {

using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

enum class TokenRole { personalized, class_anchor };
enum class EncoderKind { fine_tuned, original };

NLOHMANN_JSON_SERIALIZE_ENUM(TokenRole, {{TokenRole::personalized, "personalized"},
                                         {TokenRole::class_anchor, "class_anchor"}})
NLOHMANN_JSON_SERIALIZE_ENUM(EncoderKind, {{EncoderKind::fine_tuned, "fine_tuned"},
                                           {EncoderKind::original, "original"}})

struct ManifestEntry {
  std::string prompt_id;
  std::string context;  // template with the concept slot left as a placeholder
  TokenRole token = TokenRole::personalized;
  EncoderKind encoder = EncoderKind::fine_tuned;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::size_t sequence_length = 1;
  std::size_t token_dim = 1;
  json adjustment;  // null unless the set was produced by an adjustment

  std::size_t dim() const noexcept { return sequence_length * token_dim; }
  std::vector<std::string> prompt_ids() const {
    std::vector<std::string> ids;
    ids.reserve(entries.size());
    for (const auto& e : entries) ids.push_back(e.prompt_id);
    return ids;
  }
};

inline json to_json(const Manifest& m) {
  json j;
  j["format_version"] = kFormatVersion;
  j["sequence_length"] = m.sequence_length;
  j["token_dim"] = m.token_dim;
  j["entries"] = json::array();
  for (const auto& e : m.entries) {
    j["entries"].push_back(
        {{"prompt_id", e.prompt_id}, {"context", e.context}, {"token", e.token}, {"encoder", e.encoder}});
  }
  if (!m.adjustment.is_null()) j["adjustment"] = m.adjustment;
  return j;
}

// Unknown enum strings deserialize to the first enumerator under
// NLOHMANN_JSON_SERIALIZE_ENUM, so the raw strings are checked explicitly.
inline TokenRole parse_token(const json& j) {
  const auto s = j.get<std::string>();
  if (s == "personalized") return TokenRole::personalized;
  if (s == "class_anchor") return TokenRole::class_anchor;
  throw validation_error("manifest: unknown token role '" + s + "'");
}

inline EncoderKind parse_encoder(const json& j) {
  const auto s = j.get<std::string>();
  if (s == "fine_tuned") return EncoderKind::fine_tuned;
  if (s == "original") return EncoderKind::original;
  throw validation_error("manifest: unknown encoder '" + s + "'");
}

inline Manifest manifest_from_json(const json& j) {
  try {
    if (j.at("format_version").get<int>() != kFormatVersion) {
      throw validation_error("manifest: unsupported format_version");
    }
    Manifest m;
    m.sequence_length = j.at("sequence_length").get<std::size_t>();
    m.token_dim = j.at("token_dim").get<std::size_t>();
    if (m.sequence_length == 0 || m.token_dim == 0) {
      throw validation_error("manifest: sequence_length and token_dim must be positive");
    }
    for (const auto& e : j.at("entries")) {
      m.entries.push_back({e.at("prompt_id").get<std::string>(), e.at("context").get<std::string>(),
                           parse_token(e.at("token")), parse_encoder(e.at("encoder"))});
    }
    if (j.contains("adjustment")) m.adjustment = j["adjustment"];
    return m;
  } catch (const json::exception& ex) {
    throw validation_error(std::string("manifest: ") + ex.what());
  }
}

/// SHA-256 of the manifest's canonical JSON text (keys sorted, no whitespace).
inline std::string manifest_digest(const Manifest& m) { return sha256_hex(to_json(m).dump()); }

inline std::string matrix_digest(const Matrix& m) {
  Sha256 h;
  h.update(std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ";");
  h.update(m.flat());
  return h.finish();
}

inline std::string vector_digest(std::span<const double> v) {
  return Sha256().update(std::to_string(v.size()) + ";").update(v).finish();
}

struct EmbeddingSet {
  Matrix data;  // n prompts x d = sequence_length * token_dim
  Manifest manifest;
  Dtype dtype_on_disk = Dtype::f64;

  std::size_t size() const noexcept { return data.rows(); }
  std::size_t dim() const noexcept { return data.cols(); }
};

inline void check_unique_ids(const std::vector<std::string>& ids) {
  std::set<std::string> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) throw validation_error("duplicate prompt_id '" + id + "'");
  }
}

inline void check_finite(const Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (!std::isfinite(r[j])) {
        throw validation_error("non-finite value at (" + std::to_string(i) + ", " + std::to_string(j) + ")");
      }
    }
  }
}

inline void validate(const EmbeddingSet& s) {
  if (s.data.rows() == 0) throw validation_error("empty embedding set");
  if (s.data.cols() == 0) throw validation_error("embedding dimension must be positive");
  if (s.manifest.entries.size() != s.data.rows()) {
    throw validation_error("manifest lists " + std::to_string(s.manifest.entries.size()) +
                           " entries but the array has " + std::to_string(s.data.rows()) + " rows");
  }
  if (s.manifest.dim() != s.data.cols()) {
    throw validation_error("manifest sequence_length x token_dim = " + std::to_string(s.manifest.dim()) +
                           " does not match array dimension " + std::to_string(s.data.cols()));
  }
  check_unique_ids(s.manifest.prompt_ids());
  check_finite(s.data);
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& ex) {
    throw validation_error("manifest " + path.string() + ": " + ex.what());
  }
  return manifest_from_json(j);
}

inline void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  write_file(path, to_json(m).dump(2) + "\n");
}

/// Companion manifest path for an array file: `x.npy` -> `x.manifest.json`.
inline std::filesystem::path manifest_path_for(const std::filesystem::path& array_path) {
  auto p = array_path;
  p.replace_extension(".manifest.json");
  return p;
}

/// Converts a decoded 2-D (n, d) or 3-D (n, L, D) array into a row matrix.
/// 3-D payloads are already row-major, so (i, l, t) lands at column l*D + t.
inline Matrix rows_from_array(NpyArray arr, const Manifest* manifest = nullptr) {
  if (arr.shape.size() == 2) {
    return Matrix(arr.shape[0], arr.shape[1], std::move(arr.values));
  }
  if (arr.shape.size() == 3) {
    if (manifest && (arr.shape[1] != manifest->sequence_length || arr.shape[2] != manifest->token_dim)) {
      throw validation_error("3-D array (L, D) does not match manifest sequence_length/token_dim");
    }
    return Matrix(arr.shape[0], arr.shape[1] * arr.shape[2], std::move(arr.values));
  }
  throw validation_error("malformed array header: expected a 2-D or 3-D shape, got " +
                         std::to_string(arr.shape.size()) + "-D");
}

inline EmbeddingSet load_embedding_set(const std::filesystem::path& path,
                                       const std::filesystem::path& manifest_path) {
  EmbeddingSet s;
  s.manifest = load_manifest(manifest_path);
  auto arr = read_npy(path);
  s.dtype_on_disk = arr.dtype;
  s.data = rows_from_array(std::move(arr), &s.manifest);
  validate(s);
  return s;
}

inline EmbeddingSet load_embedding_set(const std::filesystem::path& path) {
  return load_embedding_set(path, manifest_path_for(path));
}

/// Writes the array to `path` and the manifest next to it.
inline void save_embedding_set(const EmbeddingSet& s, const std::filesystem::path& path, Dtype dtype) {
  validate(s);
  const std::size_t shape[] = {s.data.rows(), s.data.cols()};
  write_npy(path, shape, s.data.flat(), dtype);
  save_manifest(s.manifest, manifest_path_for(path));
}

/// Copy of `s` with rows sorted by prompt_id.
inline EmbeddingSet canonical_order(const EmbeddingSet& s) {
  std::vector<std::size_t> index(s.size());
  std::iota(index.begin(), index.end(), std::size_t{0});
  std::sort(index.begin(), index.end(), [&](std::size_t a, std::size_t b) {
    return s.manifest.entries[a].prompt_id < s.manifest.entries[b].prompt_id;
  });
  EmbeddingSet out{Matrix(s.size(), s.dim()), s.manifest, s.dtype_on_disk};
  out.manifest.entries.clear();
  for (std::size_t k = 0; k < index.size(); ++k) {
    const auto src = s.data.row(index[k]);
    std::copy(src.begin(), src.end(), out.data.row(k).begin());
    out.manifest.entries.push_back(s.manifest.entries[index[k]]);
  }
  return out;
}

inline bool aligned(const EmbeddingSet& a, const EmbeddingSet& b) {
  return a.dim() == b.dim() && a.manifest.prompt_ids() == b.manifest.prompt_ids();
}

/// Puts both sets into lexicographic prompt_id order. The id sets must match.
inline std::pair<EmbeddingSet, EmbeddingSet> align(const EmbeddingSet& a, const EmbeddingSet& b) {
  validate(a);
  validate(b);
  auto ids_a = a.manifest.prompt_ids();
  auto ids_b = b.manifest.prompt_ids();
  std::sort(ids_a.begin(), ids_a.end());
  std::sort(ids_b.begin(), ids_b.end());
  if (ids_a != ids_b) throw validation_error("prompt-id sets differ");
  if (a.dim() != b.dim()) {
    throw validation_error("dimension mismatch: " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  }
  return {canonical_order(a), canonical_order(b)};
}

struct ResidualParents {
  std::string personalized_manifest_digest;
  std::string class_manifest_digest;
};

struct ResidualSet {
  Matrix data;
  std::vector<std::string> prompt_ids;
  ResidualParents parents;
  std::size_t sequence_length = 1;
  std::size_t token_dim = 1;

  std::size_t size() const noexcept { return data.rows(); }
  std::size_t dim() const noexcept { return data.cols(); }
};

inline std::string residual_digest(const ResidualSet& r) {
  Sha256 h;
  for (const auto& id : r.prompt_ids) h.update(id).update("\n", 1);
  h.update(std::to_string(r.data.rows()) + "x" + std::to_string(r.data.cols()) + ";");
  h.update(r.data.flat());
  return h.finish();
}

inline json residual_manifest_json(const ResidualSet& r) {
  return {{"format_version", kFormatVersion},
          {"kind", "residual"},
          {"prompt_ids", r.prompt_ids},
          {"sequence_length", r.sequence_length},
          {"token_dim", r.token_dim},
          {"parents",
           {{"personalized_manifest_digest", r.parents.personalized_manifest_digest},
            {"class_manifest_digest", r.parents.class_manifest_digest}}}};
}

inline void save_residual_set(const ResidualSet& r, const std::filesystem::path& path, Dtype dtype) {
  if (r.size() == 0) throw validation_error("empty residual set");
  const std::size_t shape[] = {r.data.rows(), r.data.cols()};
  write_npy(path, shape, r.data.flat(), dtype);
  write_file(manifest_path_for(path), residual_manifest_json(r).dump(2) + "\n");
}

inline ResidualSet load_residual_set(const std::filesystem::path& path,
                                     const std::filesystem::path& manifest_path) {
  ResidualSet r;
  try {
    const auto j = json::parse(read_file(manifest_path));
    if (j.at("format_version").get<int>() != kFormatVersion || j.value("kind", "") != "residual") {
      throw validation_error("residual manifest: unsupported format");
    }
    r.prompt_ids = j.at("prompt_ids").get<std::vector<std::string>>();
    r.sequence_length = j.at("sequence_length").get<std::size_t>();
    r.token_dim = j.at("token_dim").get<std::size_t>();
    r.parents.personalized_manifest_digest = j.at("parents").at("personalized_manifest_digest");
    r.parents.class_manifest_digest = j.at("parents").at("class_manifest_digest");
  } catch (const json::exception& ex) {
    throw validation_error("residual manifest " + manifest_path.string() + ": " + ex.what());
  }
  r.data = rows_from_array(read_npy(path));
  if (r.data.rows() == 0) throw validation_error("empty residual set");
  if (r.prompt_ids.size() != r.data.rows()) throw validation_error("residual manifest does not match array rows");
  if (r.sequence_length * r.token_dim != r.data.cols()) {
    throw validation_error("residual manifest dimension does not match array");
  }
  check_unique_ids(r.prompt_ids);
  check_finite(r.data);
  return r;
}

inline ResidualSet load_residual_set(const std::filesystem::path& path) {
  return load_residual_set(path, manifest_path_for(path));
}

/// Loads a 1-D (d) or single-row array as a vector.
inline Vector load_vector(const std::filesystem::path& path) {
  auto arr = read_npy(path);
  if (arr.shape.size() == 1 || (arr.shape.size() == 2 && arr.shape[0] == 1)) {
    for (double x : arr.values) {
      if (!std::isfinite(x)) throw validation_error("non-finite value in " + path.string());
    }
    if (arr.values.empty()) throw validation_error("empty vector in " + path.string());
    return std::move(arr.values);
  }
  throw validation_error(path.string() + ": expected a 1-D array");
}

inline void save_vector(std::span<const double> v, const std::filesystem::path& path, Dtype dtype) {
  const std::size_t shape[] = {v.size()};
  write_npy(path, shape, v, dtype);
}

}  // namespace adaptsp
