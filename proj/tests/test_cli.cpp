#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "adaptsp/adaptsp.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

namespace adaptsp {
namespace {

namespace fs = std::filesystem;
using testing::make_manifest;
using testing::numbered_ids;
using testing::Rng;
using testing::TempDir;

struct RunResult {
  int exit_code;
  std::string out;
  std::string err;
};

RunResult run_cli(const TempDir& dir, const std::string& args) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string(ADAPTSP_CLI) + " " + args + " > '" + out.string() + "' 2> '" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(out), read_file(err)};
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

fs::path write_set(const fs::path& path, const Matrix& data, const std::vector<std::string>& ids, TokenRole role,
                   EncoderKind encoder = EncoderKind::fine_tuned) {
  save_embedding_set({data, make_manifest(ids, role, 1, data.cols(), encoder), Dtype::f64}, path, Dtype::f64);
  return path;
}

Matrix read_rows(const fs::path& path) {
  auto a = read_npy(path);
  const std::size_t rows = a.shape.at(0);
  const std::size_t cols = a.shape.size() > 1 ? a.shape[1] : 1;
  return Matrix(rows, cols, std::move(a.values));
}

TEST(Cli, HelpListsSubcommands) {
  TempDir dir;
  const auto r = run_cli(dir, "--help");
  EXPECT_EQ(r.exit_code, 0);
  for (const char* sub : {"residuals", "subspace", "cev", "adjust", "slerp", "report", "sweep", "verify"}) {
    EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
  }
}

TEST(Cli, ResidualsWritesStatsResidualsAndMean) {
  TempDir dir;
  Rng rng(1);
  const auto ids = numbered_ids(5);
  const Matrix p = testing::random_matrix(rng, 5, 6), c = testing::random_matrix(rng, 5, 6);
  write_set(dir / "p.npy", p, ids, TokenRole::personalized);
  write_set(dir / "c.npy", c, ids, TokenRole::class_anchor);
  const auto r = run_cli(dir, "residuals --personalized " + q(dir / "p.npy") + " --class " + q(dir / "c.npy") +
                                  " --out " + q(dir / "res"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  for (const char* f : {"stats.json", "residuals.npy", "residuals.manifest.json", "rm.npy", "provenance.json"}) {
    EXPECT_TRUE(fs::exists(dir / "res" / f)) << f;
  }
  const Matrix res = read_rows(dir / "res" / "residuals.npy");
  for (std::size_t k = 0; k < res.flat().size(); ++k) EXPECT_EQ(res.flat()[k], p.flat()[k] - c.flat()[k]);
  const auto stats = json::parse(read_file(dir / "res" / "stats.json"));
  EXPECT_EQ(stats["n"], 5);
  EXPECT_EQ(stats["n_pairs"], 10);
  EXPECT_EQ(json::parse(read_file(dir / "res" / "residuals.manifest.json"))["kind"], "residual");
}

TEST(Cli, ResidualsStatsOnly) {
  TempDir dir;
  const auto ids = numbered_ids(3);
  write_set(dir / "p.npy", Matrix(3, 2, {1, 2, 3, 4, 5, 7}), ids, TokenRole::personalized);
  write_set(dir / "c.npy", Matrix(3, 2, {0, 0, 0, 0, 0, 0}), ids, TokenRole::class_anchor);
  const auto r = run_cli(dir, "residuals --stats-only --personalized " + q(dir / "p.npy") + " --class " +
                                  q(dir / "c.npy") + " --out " + q(dir / "res"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "res" / "stats.json"));
  EXPECT_FALSE(fs::exists(dir / "res" / "residuals.npy"));
}

TEST(Cli, MismatchedPromptIdsExitTwo) {
  TempDir dir;
  write_set(dir / "p.npy", Matrix(2, 2, {1, 2, 3, 4}), {"a", "b"}, TokenRole::personalized);
  write_set(dir / "c.npy", Matrix(2, 2, {1, 2, 3, 4}), {"a", "z"}, TokenRole::class_anchor);
  const auto r = run_cli(dir, "residuals --personalized " + q(dir / "p.npy") + " --class " + q(dir / "c.npy") +
                                  " --out " + q(dir / "res"));
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("prompt-id sets differ"), std::string::npos) << r.err;
}

TEST(Cli, MissingFileAndBadFlagsExitTwo) {
  TempDir dir;
  EXPECT_EQ(run_cli(dir, "residuals --personalized /nonexistent.npy --class /nonexistent2.npy --out " +
                             q(dir / "o")).exit_code,
            2);
  EXPECT_EQ(run_cli(dir, "adjust --mode bogus --anchor x.npy --out " + q(dir / "o")).exit_code, 2);
  EXPECT_EQ(run_cli(dir, "no-such-command").exit_code, 2);
}

TEST(Cli, SubspaceOnRankOneResiduals) {
  TempDir dir;
  const auto ids = numbered_ids(3);
  write_set(dir / "p.npy", Matrix(3, 3, {1, 2, 3, 2, 4, 6, 3, 6, 9}), ids, TokenRole::personalized);
  write_set(dir / "c.npy", Matrix(3, 3), ids, TokenRole::class_anchor);
  ASSERT_EQ(run_cli(dir, "residuals --personalized " + q(dir / "p.npy") + " --class " + q(dir / "c.npy") +
                             " --out " + q(dir / "res"))
                .exit_code,
            0);
  const auto r = run_cli(dir, "subspace --residuals " + q(dir / "res" / "residuals.npy") + " --thresholds 0.7,0.8 --out " +
                                  q(dir / "sub"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const auto th = json::parse(read_file(dir / "sub" / "thresholds.json"));
  EXPECT_EQ(th["0.7"], 1);
  EXPECT_EQ(th["0.8"], 1);
  const auto spec = json::parse(read_file(dir / "sub" / "subspace" / "spectrum.json"));
  EXPECT_EQ(spec["rank"], 1);
  EXPECT_NEAR(spec["cev"][0].get<double>(), 1.0, 1e-12);
}

TEST(Cli, CevCsvMatchesCovarianceOracle) {
  TempDir dir;
  Rng rng(6);
  const Matrix rows = testing::random_matrix(rng, 6, 10);
  write_set(dir / "x.npy", rows, numbered_ids(6), TokenRole::personalized);
  const auto r = run_cli(dir, "cev --input " + q(dir / "x.npy") + " --out " + q(dir / "cev"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const auto oracle = testing::covariance_pca(rows, 5);
  std::istringstream in(read_file(dir / "cev" / "cev.csv"));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "k,cev");
  std::size_t k = 0;
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    EXPECT_EQ(std::stoul(line.substr(0, comma)), k + 1);
    EXPECT_NEAR(std::stod(line.substr(comma + 1)), oracle.cev.at(k), 1e-9);
    ++k;
  }
  EXPECT_EQ(k, 5u);
}

TEST(Cli, IdenticalResidualsExitThree) {
  TempDir dir;
  const auto ids = numbered_ids(4);
  write_set(dir / "p.npy", Matrix(4, 2, {2, 3, 2, 3, 2, 3, 2, 3}), ids, TokenRole::personalized);
  write_set(dir / "c.npy", Matrix(4, 2, {1, 1, 1, 1, 1, 1, 1, 1}), ids, TokenRole::class_anchor);
  ASSERT_EQ(run_cli(dir, "residuals --personalized " + q(dir / "p.npy") + " --class " + q(dir / "c.npy") +
                             " --out " + q(dir / "res"))
                .exit_code,
            0);
  const auto r = run_cli(dir, "subspace --residuals " + q(dir / "res" / "residuals.npy") + " --out " + q(dir / "sub"));
  EXPECT_EQ(r.exit_code, 3);
  EXPECT_NE(r.err.find("CEV undefined"), std::string::npos) << r.err;
}

class CliAdjust : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(42);
    ids = numbered_ids(6);
    p = testing::random_matrix(rng, 6, 8);
    c = testing::random_matrix(rng, 6, 8);
    a = testing::random_matrix(rng, 6, 8);
    write_set(dir / "p.npy", p, ids, TokenRole::personalized);
    write_set(dir / "c.npy", c, ids, TokenRole::class_anchor);
    write_set(dir / "a.npy", a, ids, TokenRole::class_anchor, EncoderKind::original);
    ASSERT_EQ(run_cli(dir, "residuals --personalized " + q(dir / "p.npy") + " --class " + q(dir / "c.npy") +
                               " --out " + q(dir / "res"))
                  .exit_code,
              0);
    ASSERT_EQ(run_cli(dir, "subspace --residuals " + q(dir / "res" / "residuals.npy") + " --out " + q(dir / "sub"))
                  .exit_code,
              0);
  }

  TempDir dir;
  std::vector<std::string> ids;
  Matrix p, c, a;
};

TEST_F(CliAdjust, ZeroMeanResidualLeavesAnchorBitwise) {
  save_vector(Vector(8, 0.0), dir / "zero.npy", Dtype::f64);
  const auto r = run_cli(dir, "adjust --mode rm --anchor " + q(dir / "a.npy") + " --rm " + q(dir / "zero.npy") +
                                  " --out " + q(dir / "adj"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_EQ(read_rows(dir / "adj" / "adjusted.npy"), a);
  const auto m = json::parse(read_file(dir / "adj" / "adjusted.manifest.json"));
  EXPECT_EQ(m["adjustment"]["mode"], "mean_residual");
}

TEST_F(CliAdjust, ProjectionWithZeroComponentsMatchesMeanResidual) {
  ASSERT_EQ(run_cli(dir, "adjust --mode rm --anchor " + q(dir / "a.npy") + " --rm " + q(dir / "res" / "rm.npy") +
                             " --out " + q(dir / "rm"))
                .exit_code,
            0);
  const auto r = run_cli(dir, "adjust --mode proj --k 0 --anchor " + q(dir / "a.npy") + " --residuals " +
                                  q(dir / "res" / "residuals.npy") + " --subspace " + q(dir / "sub" / "subspace") +
                                  " --out " + q(dir / "proj"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const Matrix rm = read_rows(dir / "rm" / "adjusted.npy"), proj = read_rows(dir / "proj" / "adjusted.npy");
  for (std::size_t k = 0; k < rm.flat().size(); ++k) EXPECT_NEAR(rm.flat()[k], proj.flat()[k], 1e-12);
}

TEST_F(CliAdjust, FullRankProjectionOnClassAnchorRestoresPersonalized) {
  const auto r = run_cli(dir, "adjust --mode proj --k 5 --anchor " + q(dir / "c.npy") + " --residuals " +
                                  q(dir / "res" / "residuals.npy") + " --subspace " + q(dir / "sub" / "subspace") +
                                  " --out " + q(dir / "proj"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const Matrix out = read_rows(dir / "proj" / "adjusted.npy");
  for (std::size_t k = 0; k < out.flat().size(); ++k) EXPECT_NEAR(out.flat()[k], p.flat()[k], 1e-9);
}

TEST_F(CliAdjust, KBeyondRankExitsTwo) {
  const auto r = run_cli(dir, "adjust --mode proj --k 6 --anchor " + q(dir / "a.npy") + " --residuals " +
                                  q(dir / "res" / "residuals.npy") + " --subspace " + q(dir / "sub" / "subspace") +
                                  " --out " + q(dir / "proj"));
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("exceeds subspace rank"), std::string::npos) << r.err;
}

TEST_F(CliAdjust, SlerpEndpoint) {
  const auto r = run_cli(dir, "slerp --t 1 --anchor " + q(dir / "a.npy") + " --target " + q(dir / "p.npy") +
                                  " --out " + q(dir / "sl"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const Matrix out = read_rows(dir / "sl" / "adjusted.npy");
  for (std::size_t k = 0; k < out.flat().size(); ++k) EXPECT_NEAR(out.flat()[k], p.flat()[k], 1e-12);
}

TEST_F(CliAdjust, MissingModeInputsExitTwo) {
  EXPECT_EQ(run_cli(dir, "adjust --mode proj --anchor " + q(dir / "a.npy") + " --out " + q(dir / "x")).exit_code, 2);
  EXPECT_EQ(run_cli(dir, "adjust --mode slerp --anchor " + q(dir / "a.npy") + " --out " + q(dir / "x")).exit_code,
            2);
  EXPECT_EQ(run_cli(dir, "adjust --mode rm --anchor " + q(dir / "a.npy") + " --out " + q(dir / "x")).exit_code, 2);
}

TEST_F(CliAdjust, SweepWritesOneFilePerK) {
  const auto r = run_cli(dir, "sweep --ks 0,2,5 --anchor " + q(dir / "a.npy") + " --residuals " +
                                  q(dir / "res" / "residuals.npy") + " --subspace " + q(dir / "sub" / "subspace") +
                                  " --out " + q(dir / "sw"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  for (const char* f : {"adjusted_k0.npy", "adjusted_k2.npy", "adjusted_k5.npy", "drift.csv"}) {
    EXPECT_TRUE(fs::exists(dir / "sw" / f)) << f;
  }
}

TEST_F(CliAdjust, VerifyDetectsTampering) {
  ASSERT_EQ(run_cli(dir, "adjust --mode rm --anchor " + q(dir / "a.npy") + " --rm " + q(dir / "res" / "rm.npy") +
                             " --out " + q(dir / "adj"))
                .exit_code,
            0);
  const auto ok = run_cli(dir, "verify " + q(dir / "adj"));
  EXPECT_EQ(ok.exit_code, 0) << ok.err;
  EXPECT_NE(ok.out.find("verified"), std::string::npos);
  {
    std::ofstream f(dir / "adj" / "adjusted.manifest.json", std::ios::app);
    f << " ";
  }
  const auto bad = run_cli(dir, "verify " + q(dir / "adj"));
  EXPECT_EQ(bad.exit_code, 2);
  EXPECT_NE(bad.err.find("digest mismatch"), std::string::npos) << bad.err;
}

TEST(Cli, ReportReproducesPublishedAverages) {
  TempDir dir;
  const auto r = run_cli(dir, "report --scores '" + std::string(ADAPTSP_FIXTURES) + "/cc101_scores.csv' --out " +
                                  q(dir / "rep"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  const auto table = read_file(dir / "rep" / "table.csv");
  EXPECT_NE(table.find("DreamBooth,baseline,clip_t_f,"), std::string::npos);
  EXPECT_NE(table.find(",21.93\n"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "rep" / "table.md"));

  const auto c = run_cli(dir, "report --scores '" + std::string(ADAPTSP_FIXTURES) + "/celeba_scores.csv' --out " +
                                  q(dir / "rep2"));
  ASSERT_EQ(c.exit_code, 0) << c.err;
  EXPECT_NE(read_file(dir / "rep2" / "table.csv").find(",24.56\n"), std::string::npos);
}

TEST(Cli, ReportRejectsEmptyScoresAndBadScale) {
  TempDir dir;
  write_file(dir / "empty.csv", "method,variant,concept,metric,value\n");
  const auto r = run_cli(dir, "report --scores " + q(dir / "empty.csv") + " --out " + q(dir / "rep"));
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("empty group"), std::string::npos) << r.err;
  write_file(dir / "one.csv", "method,variant,concept,metric,value\nA,b,c,dino,0.5\n");
  EXPECT_EQ(run_cli(dir, "report --scale 10 --scores " + q(dir / "one.csv") + " --out " + q(dir / "rep")).exit_code, 2);
  ASSERT_EQ(run_cli(dir, "report --scale 100 --scores " + q(dir / "one.csv") + " --out " + q(dir / "rep")).exit_code,
            0);
  EXPECT_NE(read_file(dir / "rep" / "table.csv").find("50.00,50.00"), std::string::npos);
}

TEST(Cli, SweepFromScores) {
  TempDir dir;
  write_file(dir / "s.csv", "k,clip_t,clip_i\n5,25.44,63.40\n0,26.35,61.16\n");
  const auto r = run_cli(dir, "sweep --scores " + q(dir / "s.csv") + " --out " + q(dir / "sw"));
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_EQ(read_file(dir / "sw" / "sweep.csv"), "k,clip_t,clip_i\n0,26.35,61.16\n5,25.44,63.40\n");
}

}  // namespace
}  // namespace adaptsp
