#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <string>
#include <vector>

#include "adaptsp/embedding_store.hpp"

namespace adaptsp::testing {

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("adaptsp_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<std::string> numbered_ids(std::size_t n, const std::string& prefix = "p") {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) {
    std::string num = std::to_string(i);
    ids.push_back(prefix + std::string(3 - std::min<std::size_t>(3, num.size()), '0') + num);
  }
  return ids;
}

inline Manifest make_manifest(const std::vector<std::string>& ids, TokenRole token, std::size_t sequence_length,
                              std::size_t token_dim, EncoderKind encoder = EncoderKind::fine_tuned) {
  Manifest m;
  m.sequence_length = sequence_length;
  m.token_dim = token_dim;
  for (const auto& id : ids) m.entries.push_back({id, "A photo of a {} (" + id + ")", token, encoder});
  return m;
}

inline EmbeddingSet make_set(Matrix data, const std::vector<std::string>& ids, TokenRole token,
                             EncoderKind encoder = EncoderKind::fine_tuned) {
  const std::size_t d = data.cols();
  return {std::move(data), make_manifest(ids, token, 1, d, encoder), Dtype::f64};
}

}  // namespace adaptsp::testing
