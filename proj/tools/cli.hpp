#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace adaptsp::cli {

struct RunConfig {
  std::string subcommand;

  // inputs
  std::filesystem::path personalized, personalized_manifest;
  std::filesystem::path class_set, class_manifest;
  std::filesystem::path residuals, residuals_manifest;
  std::filesystem::path anchor, anchor_manifest;
  std::filesystem::path target, target_manifest;
  std::filesystem::path input, input_manifest;
  std::filesystem::path rm;
  std::filesystem::path subspace_dir;
  std::filesystem::path scores;

  std::filesystem::path out;

  std::string mode;
  std::size_t k = 2;
  std::vector<std::size_t> ks;
  std::size_t k_max = 10;
  std::vector<double> thresholds{0.7, 0.8};
  std::optional<double> t;
  std::string dtype = "f64";
  double scale = 1.0;
  bool no_recenter = false;
  bool stats_only = false;
  unsigned threads = 1;
  std::string log_level;
};

/// Parses argv, runs the subcommand and maps failures onto exit codes:
/// 0 success, 2 input/validation error, 3 numerical degeneracy,
/// 4 internal invariant violation.
int run(int argc, char** argv);

int cmd_residuals(const RunConfig& cfg);
int cmd_subspace(const RunConfig& cfg);
int cmd_cev(const RunConfig& cfg);
int cmd_adjust(const RunConfig& cfg);
int cmd_report(const RunConfig& cfg);
int cmd_sweep(const RunConfig& cfg);
int cmd_verify(const RunConfig& cfg);

}  // namespace adaptsp::cli
