#include "cli.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <set>

#include "adaptsp/adaptsp.hpp"

namespace adaptsp::cli {
namespace {

namespace fs = std::filesystem;

fs::path or_default_manifest(const fs::path& array, const fs::path& manifest) {
  return manifest.empty() ? manifest_path_for(array) : manifest;
}

void require(const fs::path& p, const char* flag) {
  if (p.empty()) throw validation_error(std::string("missing required input ") + flag);
}

/// Records what a command read and wrote; written last as provenance.json so
/// `verify` can recompute every digest in the chain.
class Provenance {
 public:
  Provenance(std::string command, fs::path dir) : dir_(std::move(dir)) {
    doc_["format_version"] = kFormatVersion;
    doc_["command"] = std::move(command);
    doc_["parameters"] = json::object();
    doc_["inputs"] = json::array();
    doc_["outputs"] = json::array();
    fs::create_directories(dir_);
  }

  template <class T>
  void param(const std::string& key, const T& value) {
    doc_["parameters"][key] = value;
  }

  void input(const fs::path& p) {
    if (p.empty()) return;
    check_not_output(p);
    doc_["inputs"].push_back({{"path", p.generic_string()}, {"sha256", sha256_file(p)}});
  }

  fs::path output(const std::string& relative) {
    outputs_.push_back(relative);
    return dir_ / relative;
  }

  void write() {
    std::sort(outputs_.begin(), outputs_.end());
    for (const auto& rel : outputs_) {
      doc_["outputs"].push_back({{"file", rel}, {"sha256", sha256_file(dir_ / rel)}});
    }
    write_file(dir_ / "provenance.json", doc_.dump(2) + "\n");
    spdlog::info("wrote {} output file(s) to {}", outputs_.size(), dir_.string());
  }

 private:
  void check_not_output(const fs::path& p) const {
    const auto in = fs::weakly_canonical(p);
    if (in.parent_path() == fs::weakly_canonical(dir_)) {
      throw validation_error("input " + p.string() + " lives in the output directory; choose a different --out");
    }
  }

  fs::path dir_;
  json doc_;
  std::vector<std::string> outputs_;
};

void add_array_input(Provenance& prov, const fs::path& array, const fs::path& manifest) {
  prov.input(array);
  prov.input(manifest);
}

void write_thresholds(const Subspace& s, const std::vector<double>& thresholds, const fs::path& path) {
  json j = json::object();
  for (double th : thresholds) {
    const auto count = components_to_threshold(s, th);
    if (!count.reached) {
      spdlog::warn("CEV never reaches {} (rank {}), reporting k = rank", th, s.rank());
    }
    j[format_shortest(th)] = count.k;
  }
  write_file(path, j.dump(2) + "\n");
}

std::string cev_csv(const Subspace& s, std::size_t k_max) {
  std::string out = "k,cev\n";
  for (const auto& p : cev_curve(s, k_max)) out += std::to_string(p.k) + "," + format_shortest(p.cev) + "\n";
  return out;
}

EmbeddingSet load_set(const fs::path& array, const fs::path& manifest) {
  auto s = load_embedding_set(array, or_default_manifest(array, manifest));
  spdlog::debug("loaded {} ({} x {}, {} on disk)", array.string(), s.size(), s.dim(), to_string(s.dtype_on_disk));
  return s;
}

}  // namespace

int cmd_residuals(const RunConfig& cfg) {
  require(cfg.personalized, "--personalized");
  require(cfg.class_set, "--class");
  require(cfg.out, "--out");
  const auto p_manifest = or_default_manifest(cfg.personalized, cfg.personalized_manifest);
  const auto c_manifest = or_default_manifest(cfg.class_set, cfg.class_manifest);

  Provenance prov("residuals", cfg.out);
  add_array_input(prov, cfg.personalized, p_manifest);
  add_array_input(prov, cfg.class_set, c_manifest);
  prov.param("stats_only", cfg.stats_only);
  prov.param("dtype", cfg.dtype);

  const auto [personalized, class_set] =
      align(load_set(cfg.personalized, p_manifest), load_set(cfg.class_set, c_manifest));
  const auto residuals = compute_residuals(personalized, class_set);
  const auto stats = residual_stats(residuals);
  spdlog::info("{} residuals, mean pairwise cosine {:.4f} (min {:.4f}, max {:.4f})", stats.n, stats.mean, stats.min,
               stats.max);
  if (!stats.zero_residual_ids.empty()) {
    spdlog::warn("{} zero residual(s) excluded from statistics", stats.zero_residual_ids.size());
  }

  write_file(prov.output("stats.json"), to_json(stats).dump(2) + "\n");
  if (!cfg.stats_only) {
    const auto dtype = parse_dtype(cfg.dtype);
    save_residual_set(residuals, prov.output("residuals.npy"), dtype);
    prov.output("residuals.manifest.json");
    save_vector(mean_residual(residuals), prov.output("rm.npy"), dtype);
  }
  prov.write();
  return 0;
}

int cmd_subspace(const RunConfig& cfg) {
  require(cfg.residuals, "--residuals");
  require(cfg.out, "--out");
  const auto manifest = or_default_manifest(cfg.residuals, cfg.residuals_manifest);

  Provenance prov("subspace", cfg.out);
  add_array_input(prov, cfg.residuals, manifest);
  prov.param("thresholds", cfg.thresholds);
  prov.param("k_max", cfg.k_max);

  const auto residuals = load_residual_set(cfg.residuals, manifest);
  const auto s = fit_subspace(residuals);
  spdlog::info("fitted subspace of rank {} (cev_1 = {:.6f})", s.rank(), s.cev.front());

  save_subspace(s, cfg.out / "subspace");
  for (const char* f : {"subspace/mean.npy", "subspace/components.npy", "subspace/spectrum.json"}) prov.output(f);
  write_file(prov.output("cev.csv"), cev_csv(s, cfg.k_max));
  write_thresholds(s, cfg.thresholds, prov.output("thresholds.json"));
  prov.write();
  return 0;
}

int cmd_cev(const RunConfig& cfg) {
  require(cfg.input, "--input");
  require(cfg.out, "--out");
  const auto manifest = or_default_manifest(cfg.input, cfg.input_manifest);

  Provenance prov("cev", cfg.out);
  add_array_input(prov, cfg.input, manifest);
  prov.param("thresholds", cfg.thresholds);
  prov.param("k_max", cfg.k_max);

  json head;
  try {
    head = json::parse(read_file(manifest));
  } catch (const json::parse_error& ex) {
    throw validation_error("manifest " + manifest.string() + ": " + ex.what());
  }
  const bool is_residual = head.is_object() && head.value("kind", "") == "residual";
  const Subspace s = is_residual ? fit_subspace(load_residual_set(cfg.input, manifest))
                                 : fit_subspace(load_set(cfg.input, manifest));
  prov.param("input_kind", is_residual ? "residual" : "embedding");

  write_file(prov.output("cev.csv"), cev_csv(s, cfg.k_max));
  write_file(prov.output("spectrum.json"), spectrum_json(s).dump(2) + "\n");
  write_thresholds(s, cfg.thresholds, prov.output("thresholds.json"));
  prov.write();
  return 0;
}

int cmd_adjust(const RunConfig& cfg) {
  require(cfg.anchor, "--anchor");
  require(cfg.out, "--out");
  const auto anchor_manifest = or_default_manifest(cfg.anchor, cfg.anchor_manifest);

  Provenance prov("adjust", cfg.out);
  add_array_input(prov, cfg.anchor, anchor_manifest);
  prov.param("mode", cfg.mode);
  prov.param("dtype", cfg.dtype);

  const auto anchor = canonical_order(load_set(cfg.anchor, anchor_manifest));
  EmbeddingSet result;

  if (cfg.mode == "rm") {
    Vector r_m;
    if (!cfg.rm.empty()) {
      prov.input(cfg.rm);
      r_m = load_vector(cfg.rm);
    } else if (!cfg.subspace_dir.empty()) {
      prov.input(cfg.subspace_dir / "mean.npy");
      r_m = load_vector(cfg.subspace_dir / "mean.npy");
    } else {
      throw validation_error("--mode rm requires --rm or --subspace");
    }
    result = adjust_mean_residual(anchor, r_m, cfg.threads);
  } else if (cfg.mode == "proj") {
    require(cfg.subspace_dir, "--subspace");
    require(cfg.residuals, "--residuals");
    const auto res_manifest = or_default_manifest(cfg.residuals, cfg.residuals_manifest);
    add_array_input(prov, cfg.residuals, res_manifest);
    for (const char* f : {"mean.npy", "components.npy", "spectrum.json"}) prov.input(cfg.subspace_dir / f);
    prov.param("k", cfg.k);
    prov.param("recenter", !cfg.no_recenter);
    const auto s = load_subspace(cfg.subspace_dir);
    const auto residuals = load_residual_set(cfg.residuals, res_manifest);
    result = adjust_subspace(anchor, residuals, s, cfg.k, !cfg.no_recenter, cfg.threads);
  } else if (cfg.mode == "slerp") {
    require(cfg.target, "--target");
    if (!cfg.t) throw validation_error("--mode slerp requires --t");
    const auto target_manifest = or_default_manifest(cfg.target, cfg.target_manifest);
    add_array_input(prov, cfg.target, target_manifest);
    prov.param("t", *cfg.t);
    const auto [a, b] = align(anchor, load_set(cfg.target, target_manifest));
    result = slerp_adjust(a, b, *cfg.t, cfg.threads);
  } else {
    throw validation_error("--mode must be one of rm, proj, slerp");
  }

  save_embedding_set(result, prov.output("adjusted.npy"), parse_dtype(cfg.dtype));
  prov.output("adjusted.manifest.json");
  prov.write();
  return 0;
}

int cmd_report(const RunConfig& cfg) {
  require(cfg.scores, "--scores");
  require(cfg.out, "--out");
  if (cfg.scale != 1.0 && cfg.scale != 100.0) throw validation_error("--scale must be 1 or 100");

  Provenance prov("report", cfg.out);
  prov.input(cfg.scores);
  prov.param("scale", cfg.scale);

  const auto text = read_file(cfg.scores);
  const auto rows = cfg.scores.extension() == ".json" ? parse_scores_json(text) : parse_scores_csv(text);
  const auto table = aggregate(rows);
  spdlog::info("aggregated {} score rows into {} group(s)", rows.size(), table.groups.size());

  write_file(prov.output("table.csv"), table_csv(table, cfg.scale));
  write_file(prov.output("table.md"), table_markdown(table, cfg.scale));
  write_file(prov.output("table.json"), table_json(table, cfg.scale).dump(2) + "\n");
  prov.write();
  return 0;
}

int cmd_sweep(const RunConfig& cfg) {
  require(cfg.out, "--out");
  if (cfg.scores.empty() && cfg.anchor.empty()) {
    throw validation_error("sweep needs --scores (score table) and/or --anchor (embedding sweep)");
  }
  Provenance prov("sweep", cfg.out);

  if (!cfg.scores.empty()) {
    prov.input(cfg.scores);
    write_file(prov.output("sweep.csv"), sweep_table(parse_sweep_csv(read_file(cfg.scores))));
  }

  if (!cfg.anchor.empty()) {
    require(cfg.subspace_dir, "--subspace");
    require(cfg.residuals, "--residuals");
    const auto anchor_manifest = or_default_manifest(cfg.anchor, cfg.anchor_manifest);
    const auto res_manifest = or_default_manifest(cfg.residuals, cfg.residuals_manifest);
    add_array_input(prov, cfg.anchor, anchor_manifest);
    add_array_input(prov, cfg.residuals, res_manifest);
    for (const char* f : {"mean.npy", "components.npy", "spectrum.json"}) prov.input(cfg.subspace_dir / f);

    const auto anchor = canonical_order(load_set(cfg.anchor, anchor_manifest));
    const auto residuals = load_residual_set(cfg.residuals, res_manifest);
    const auto s = load_subspace(cfg.subspace_dir);
    std::vector<std::size_t> ks = cfg.ks;
    if (ks.empty()) {
      for (std::size_t k = 0; k <= s.rank(); ++k) ks.push_back(k);
    }
    std::sort(ks.begin(), ks.end());
    if (std::adjacent_find(ks.begin(), ks.end()) != ks.end()) throw validation_error("duplicate k in --ks");
    prov.param("ks", ks);
    prov.param("recenter", !cfg.no_recenter);

    const auto base = adjust_mean_residual(anchor, s.mean);
    std::string drift = "k,mean_drift\n";
    for (std::size_t k : ks) {
      const auto adjusted = adjust_subspace(anchor, residuals, s, k, !cfg.no_recenter, cfg.threads);
      CompensatedSum total;
      for (std::size_t i = 0; i < adjusted.size(); ++i) {
        Vector diff(adjusted.dim());
        for (std::size_t j = 0; j < diff.size(); ++j) diff[j] = adjusted.data(i, j) - base.data(i, j);
        total.add(norm2(diff));
      }
      drift += std::to_string(k) + "," + format_shortest(total.value() / static_cast<double>(adjusted.size())) + "\n";
      const std::string name = "adjusted_k" + std::to_string(k) + ".npy";
      save_embedding_set(adjusted, prov.output(name), parse_dtype(cfg.dtype));
      prov.output("adjusted_k" + std::to_string(k) + ".manifest.json");
    }
    write_file(prov.output("drift.csv"), drift);
  }
  prov.write();
  return 0;
}

int cmd_verify(const RunConfig& cfg) {
  require(cfg.input, "<dir>");
  const auto doc_path = cfg.input / "provenance.json";
  json doc;
  try {
    doc = json::parse(read_file(doc_path));
  } catch (const json::parse_error& ex) {
    throw validation_error(doc_path.string() + ": " + ex.what());
  }
  std::size_t checked = 0;
  std::vector<std::string> problems;
  for (const auto& o : doc.at("outputs")) {
    const auto path = cfg.input / o.at("file").get<std::string>();
    if (!fs::exists(path)) {
      problems.push_back("missing output " + path.string());
    } else if (sha256_file(path) != o.at("sha256").get<std::string>()) {
      problems.push_back("digest mismatch for output " + path.string());
    }
    ++checked;
  }
  for (const auto& in : doc.at("inputs")) {
    const fs::path path = in.at("path").get<std::string>();
    if (!fs::exists(path)) {
      spdlog::warn("input {} no longer present, skipped", path.string());
      continue;
    }
    if (sha256_file(path) != in.at("sha256").get<std::string>()) {
      problems.push_back("digest mismatch for input " + path.string());
    }
    ++checked;
  }
  if (!problems.empty()) {
    for (std::size_t i = 1; i < problems.size(); ++i) spdlog::error("{}", problems[i]);
    throw validation_error(problems.front());
  }
  std::cout << "verified " << checked << " digest(s) in " << cfg.input.string() << "\n";
  return 0;
}

namespace {

void configure_logging(const std::string& flag_level) {
  auto logger = spdlog::stderr_color_st("adaptsp");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  std::string level = flag_level;
  if (level.empty()) {
    if (const char* env = std::getenv("ADAPTSP_LOG")) level = env;
  }
  spdlog::set_level(level.empty() ? spdlog::level::warn : spdlog::level::from_str(level));
}

void add_dtype(CLI::App* app, RunConfig& cfg) {
  app->add_option("--dtype", cfg.dtype, "On-disk precision of written arrays")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
}

void add_thresholds(CLI::App* app, RunConfig& cfg) {
  app->add_option("--thresholds", cfg.thresholds, "CEV thresholds to resolve into component counts")
      ->delimiter(',')
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  app->add_option("--k-max", cfg.k_max, "Largest k written to cev.csv")->check(CLI::PositiveNumber)->capture_default_str();
}

void add_adjust_inputs(CLI::App* app, RunConfig& cfg) {
  app->add_option("--anchor", cfg.anchor, "Anchor embedding set (.npy)")->required();
  app->add_option("--anchor-manifest", cfg.anchor_manifest, "Anchor manifest (default: <anchor>.manifest.json)");
  app->add_option("--target", cfg.target, "Personalized embedding set for slerp");
  app->add_option("--target-manifest", cfg.target_manifest, "Target manifest");
  app->add_option("--t", cfg.t, "Interpolation weight in [0, 1]")->check(CLI::Range(0.0, 1.0));
  app->add_option("--threads", cfg.threads, "Worker threads for row-wise maps")->capture_default_str();
  add_dtype(app, cfg);
  app->add_option("--out", cfg.out, "Output directory")->required();
}

void add_projection_inputs(CLI::App* app, RunConfig& cfg) {
  app->add_option("--residuals", cfg.residuals, "Residual set (.npy)");
  app->add_option("--residuals-manifest", cfg.residuals_manifest, "Residual manifest");
  app->add_option("--subspace", cfg.subspace_dir, "Subspace archive directory");
  app->add_flag("--no-recenter", cfg.no_recenter, "Use the raw linear projection (mean omitted)");
}

}  // namespace

int run(int argc, char** argv) {
  RunConfig cfg;
  CLI::App app{"adaptsp: residual-subspace analysis and test-time adjustment of prompt embeddings"};
  app.require_subcommand(1);
  app.add_option("--log-level", cfg.log_level, "trace|debug|info|warn|err|off (default from ADAPTSP_LOG)");

  auto* res = app.add_subcommand("residuals", "Residuals between personalized and class embedding sets");
  res->add_option("--personalized", cfg.personalized, "Personalized embedding set (.npy)")->required();
  res->add_option("--personalized-manifest", cfg.personalized_manifest, "Manifest for --personalized");
  res->add_option("--class", cfg.class_set, "Class-prompt embedding set (.npy)")->required();
  res->add_option("--class-manifest", cfg.class_manifest, "Manifest for --class");
  res->add_flag("--stats-only", cfg.stats_only, "Write stats.json only");
  add_dtype(res, cfg);
  res->add_option("--out", cfg.out, "Output directory")->required();

  auto* sub = app.add_subcommand("subspace", "Fit the residual PCA subspace and emit CEV data");
  sub->add_option("--residuals", cfg.residuals, "Residual set (.npy)")->required();
  sub->add_option("--residuals-manifest", cfg.residuals_manifest, "Residual manifest");
  add_thresholds(sub, cfg);
  sub->add_option("--out", cfg.out, "Output directory")->required();

  auto* cev = app.add_subcommand("cev", "CEV curve of any embedding or residual set");
  cev->add_option("--input", cfg.input, "Embedding or residual set (.npy)")->required();
  cev->add_option("--manifest", cfg.input_manifest, "Manifest for --input");
  add_thresholds(cev, cfg);
  cev->add_option("--out", cfg.out, "Output directory")->required();

  auto* adj = app.add_subcommand("adjust", "Produce adjusted prompt embeddings");
  adj->add_option("--mode", cfg.mode, "rm | proj | slerp")->required()->check(CLI::IsMember({"rm", "proj", "slerp"}));
  adj->add_option("--rm", cfg.rm, "Mean residual (.npy, 1-D)");
  adj->add_option("--k", cfg.k, "Retained principal components")->capture_default_str();
  add_projection_inputs(adj, cfg);
  add_adjust_inputs(adj, cfg);

  auto* slerp_cmd = app.add_subcommand("slerp", "Alias for adjust --mode slerp");
  add_adjust_inputs(slerp_cmd, cfg);

  auto* rep = app.add_subcommand("report", "Aggregate per-concept scores into tables with Average columns");
  rep->add_option("--scores", cfg.scores, "Scores (.csv method,variant,concept,metric,value or .json)")->required();
  rep->add_option("--scale", cfg.scale, "Presentation scale, 1 or 100")->capture_default_str();
  rep->add_option("--out", cfg.out, "Output directory")->required();

  auto* sw = app.add_subcommand("sweep", "Principal-component ablation data");
  sw->add_option("--scores", cfg.scores, "Sweep scores (.csv k,clip_t,clip_i)");
  sw->add_option("--anchor", cfg.anchor, "Anchor embedding set for an embedding sweep");
  sw->add_option("--anchor-manifest", cfg.anchor_manifest, "Anchor manifest");
  sw->add_option("--ks", cfg.ks, "Component counts (default 0..rank)")->delimiter(',');
  add_projection_inputs(sw, cfg);
  sw->add_option("--threads", cfg.threads, "Worker threads for row-wise maps")->capture_default_str();
  add_dtype(sw, cfg);
  sw->add_option("--out", cfg.out, "Output directory")->required();

  auto* ver = app.add_subcommand("verify", "Recompute and check the digests in <dir>/provenance.json");
  ver->add_option("dir", cfg.input, "Output directory of an earlier run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "adaptsp: error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::validation);
  }

  try {
    configure_logging(cfg.log_level);
    for (double th : cfg.thresholds) {
      if (!(th > 0.0 && th <= 1.0)) throw validation_error("thresholds must lie in (0, 1]");
    }
    if (cfg.threads == 0) throw validation_error("--threads must be at least 1");
    if (res->parsed()) return cmd_residuals(cfg);
    if (sub->parsed()) return cmd_subspace(cfg);
    if (cev->parsed()) return cmd_cev(cfg);
    if (adj->parsed()) return cmd_adjust(cfg);
    if (slerp_cmd->parsed()) {
      cfg.mode = "slerp";
      return cmd_adjust(cfg);
    }
    if (rep->parsed()) return cmd_report(cfg);
    if (sw->parsed()) return cmd_sweep(cfg);
    if (ver->parsed()) return cmd_verify(cfg);
  } catch (const Error& e) {
    std::cerr << "adaptsp: error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "adaptsp: internal error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::internal);
  }
  return static_cast<int>(ErrorKind::internal);
}

}  // namespace adaptsp::cli
