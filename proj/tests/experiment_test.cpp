#include <gtest/gtest.h>

#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "cubeworld/experiment.hpp"
#include "test_util.hpp"

using namespace testutil;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Cli {
  int code;
  std::string out;
};

fs::path fresh_dir(const std::string& name) {
  fs::remove_all(fs::temp_directory_path() / name);
  return temp_dir(name);
}

Cli cli(const std::string& args) {
  const auto log = temp_dir("cw_cli_log") / "out.txt";
  const std::string cmd = std::string(CUBEWORLD_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

cw::KeyValueText kv(std::initializer_list<std::pair<const char*, const char*>> items) {
  cw::KeyValueText out;
  for (const auto& [k, v] : items) out.set(k, v);
  return out;
}

}  // namespace

TEST(Config, LaterLayersWin) {
  const std::vector<cw::KeyValueText> layers{kv({{"layers", "5"}, {"lr", "0.01"}}), kv({{"layers", "2"}})};
  const auto c = cw::make_config(layers);
  EXPECT_EQ(c.model.layers, 2);
  EXPECT_DOUBLE_EQ(c.train.lr, 0.01);
  EXPECT_EQ(c.model.d_model, cw::ExperimentConfig::desk().model.d_model);
}

TEST(Config, ScaleSelectsPresetBeforeOverrides) {
  const std::vector<cw::KeyValueText> layers{kv({{"d-model", "64"}}), kv({{"scale", "full"}})};
  const auto c = cw::make_config(layers);
  EXPECT_EQ(c.scale, "full");
  EXPECT_EQ(c.model.d_model, 64);
  EXPECT_EQ(c.ft_states, 0u);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(cw::make_config(std::vector<cw::KeyValueText>{kv({{"layer", "2"}})}), cw::ValidationError);
  EXPECT_THROW(cw::make_config(std::vector<cw::KeyValueText>{kv({{"seed", "-1"}})}), cw::ValidationError);
  EXPECT_THROW(cw::make_config(std::vector<cw::KeyValueText>{kv({{"lr", "fast"}})}), cw::ValidationError);
  EXPECT_THROW(cw::make_config(std::vector<cw::KeyValueText>{kv({{"scale", "huge"}})}), cw::ValidationError);
}

TEST(Config, RoundTripsThroughText) {
  auto c = cw::ExperimentConfig::full();
  c.seed = 17;
  c.train.lr = 3.5e-4;
  const auto back = cw::make_config(std::vector<cw::KeyValueText>{cw::config_to_kv(c)});
  EXPECT_EQ(cw::config_to_kv(back).str(), cw::config_to_kv(c).str());
}

TEST(Report, EmptyDirectoryGivesEmptyTables) {
  const auto dir = fresh_dir("cw_empty_report");
  const auto tables = cw::build_report(dir, std::nullopt);
  ASSERT_EQ(tables.size(), 4u);
  for (const auto& t : tables) EXPECT_TRUE(t.rows.empty()) << t.name;
}

TEST(Report, AveragesSeedsAndMarksGaps) {
  const auto dir = fresh_dir("cw_avg_report");
  for (int s = 0; s < 2; ++s) {
    cw::MetricsWriter w(dir / ("seed" + std::to_string(s)) / "ft_d1" / "metrics", false);
    w.value("ft_d1", "task_accuracy", "3", 0.5 + 0.2 * s, 10);
    if (s == 0) w.value("ft_d1", "task_accuracy", "4", 0.1, 10);
  }
  const auto tables = cw::build_report(dir, std::nullopt);
  const auto& t = tables[0];
  ASSERT_EQ(t.columns.size(), 2u);
  EXPECT_EQ(t.rows[3][1], "0.600000");
  EXPECT_EQ(t.rows[4][1], "0.100000");
  EXPECT_EQ(t.rows[5][1], "NA");
}

TEST(DataStore, MissingArtifactsNameTheCommand) {
  cw::DataStore store(fresh_dir("cw_no_data"));
  try {
    store.distances();
    FAIL();
  } catch (const cw::MissingArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find("distances build"), std::string::npos);
  }
  EXPECT_THROW(store.splits(), cw::MissingArtifactError);
}

TEST(RunDir, DeterministicManifestHasNoTimestamp) {
  const auto dir = fresh_dir("cw_manifest");
  cw::DataStore store(dir / "data");
  const cw::RunDir run(dir, "x");
  run.write_manifest("train", cw::ExperimentConfig::desk(), store, {}, true);
  const auto a = slurp(run.manifest());
  run.write_manifest("train", cw::ExperimentConfig::desk(), store, {}, true);
  EXPECT_EQ(slurp(run.manifest()), a);
  EXPECT_EQ(a.find("written_at"), std::string::npos);
  EXPECT_NE(a.find("config.d-model = 128"), std::string::npos);
}

TEST(Cli, ReportsMissingCheckpointWithExitThree) {
  const auto dir = fresh_dir("cw_cli_missing");
  const auto r = cli("--out " + dir.string() + " --data-dir " + (dir / "data").string() + " eval --run nothing");
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_NE(r.out.find("train"), std::string::npos) << r.out;
}

TEST(Cli, RejectsUnknownConfigKeys) {
  const auto dir = fresh_dir("cw_cli_badkey");
  std::ofstream(dir / "bad.cfg") << "layers = 2\nwidth = 9\n";
  const auto r = cli("--config " + (dir / "bad.cfg").string() + " --out " + dir.string() + " report");
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_NE(r.out.find("width"), std::string::npos) << r.out;
}

TEST(Cli, ReportOnEmptyRunsIsStable) {
  const auto dir = fresh_dir("cw_cli_report");
  const std::string args = "--out " + dir.string() + " --data-dir " + (dir / "data").string() + " report";
  ASSERT_EQ(cli(args).code, 0);
  const auto first = slurp(dir / "report" / "task_accuracy.csv");
  ASSERT_EQ(cli(args).code, 0);
  EXPECT_EQ(slurp(dir / "report" / "task_accuracy.csv"), first);
}

TEST(Cli, DistancesBuildIsIdempotent) {
  const auto dir = fresh_dir("cw_cli_distances");
  const std::string args = "--data-dir " + (dir / "data").string() + " distances build";
  const auto a = cli(args);
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_NE(a.out.find("states 3674160, max depth 11"), std::string::npos) << a.out;
  const auto bytes = slurp(dir / "data" / "distances.bin");
  const auto b = cli(args);
  ASSERT_EQ(b.code, 0);
  EXPECT_NE(b.out.find("up to date"), std::string::npos) << b.out;
  EXPECT_EQ(slurp(dir / "data" / "distances.bin"), bytes);
}
