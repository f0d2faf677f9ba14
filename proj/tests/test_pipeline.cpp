#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "transecg/pipeline.hpp"
#include "test_util.hpp"

using namespace transecg;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

RunConfig tiny_config() {
  RunConfig c;
  for (const char* kv : {"seq_len=500", "stride=500", "hidden_dim=16", "n_heads=2", "n_layers=2", "mlp_dim=32",
                         "lr=0.001", "max_epochs=3", "synth_subjects=8", "synth_duration_s=20"})
    c = apply_override(c, kv);
  return c;
}

}  // namespace

TEST(RunConfig, DefaultsAreTheReferenceSetup) {
  const RunConfig c;
  EXPECT_EQ(c.low_hz, 0.5);
  EXPECT_EQ(c.high_hz, 40.0);
  EXPECT_EQ(c.fs_target, 250.0);
  EXPECT_EQ(c.seq_len, 2000u);
  EXPECT_EQ(c.patch_size, 20u);
  EXPECT_EQ(c.n_layers, 6u);
  EXPECT_EQ(c.n_heads, 6u);
  EXPECT_EQ(c.hidden_dim, 256u);
  EXPECT_EQ(c.mlp_dim, 128u);
  EXPECT_EQ(c.lr, 1e-4);
  EXPECT_EQ(c.survival_prob, 0.8);
  EXPECT_EQ(c.max_epochs, 45u);
  EXPECT_EQ(c.train_frac, 0.70);
  EXPECT_EQ(c.val_frac, 0.15);
  EXPECT_EQ(c.test_frac, 0.15);
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, JsonRoundTripAndOverrides) {
  auto c = apply_override(RunConfig{}, "lr=0.003");
  c = apply_override(c, "task=id");
  c = apply_override(c, "early_stopping=false");
  EXPECT_EQ(c.lr, 0.003);
  EXPECT_EQ(c.task, "id");
  EXPECT_FALSE(c.early_stopping);
  const nlohmann::json j = c;
  EXPECT_EQ(apply_json(RunConfig{}, j).lr, 0.003);
  EXPECT_THROW(apply_override(c, "nonsense=1"), std::invalid_argument);
  EXPECT_THROW(apply_override(c, "lr"), std::invalid_argument);
}

TEST(RunConfig, OutOfRangeNamesField) {
  const auto c = apply_override(RunConfig{}, "lr=-1");
  try {
    c.validate();
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("'lr'"), std::string::npos);
  }
  EXPECT_THROW(apply_override(RunConfig{}, "task=mood").validate(), std::invalid_argument);
  EXPECT_THROW(apply_override(RunConfig{}, "seq_len=2010").validate(), std::invalid_argument);
}

TEST(WindowStore, RoundTrip) {
  const auto dir = fs::temp_directory_path() / "transecg_store_test";
  fs::remove_all(dir);
  WindowStore s;
  s.seq_len = 3;
  s.fs = 250.0;
  s.windows.push_back({EcgWindow{"a", {0.1, 0.2, 0.3}, 250.0, 0}, Gender::female, 40});
  s.windows.push_back({EcgWindow{"b", {1.0 / 3.0, 0.0, 1.0}, 250.0, 3}, std::nullopt, std::nullopt});
  save_window_store(dir, s);
  const auto t = load_window_store(dir);
  ASSERT_EQ(t.windows.size(), 2u);
  EXPECT_EQ(t.windows[0].window.samples, s.windows[0].window.samples);
  EXPECT_EQ(t.windows[1].window.samples, s.windows[1].window.samples);
  EXPECT_EQ(t.windows[1].window.source_offset, 3u);
  EXPECT_EQ(t.windows[0].gender, Gender::female);
  EXPECT_FALSE(t.windows[1].age_years);
  fs::remove_all(dir);
}

TEST(Commands, SmokePipelineAndDeterministicEvaluate) {
  const auto wd = fs::temp_directory_path() / "transecg_cmd_test";
  fs::remove_all(wd);
  const auto cfg = tiny_config();
  EXPECT_THROW(cmd_explain(cfg, wd), std::runtime_error);  // nothing yet
  cmd_synth(cfg, wd);
  EXPECT_TRUE(fs::exists(wd / "data/manifest.json"));
  cmd_preprocess(cfg, wd);
  EXPECT_THROW(cmd_explain(cfg, wd), std::runtime_error);  // no checkpoint
  cmd_train(cfg, wd);
  EXPECT_TRUE(fs::exists(wd / cfg.checkpoint));
  cmd_evaluate(cfg, wd);
  const auto m1 = slurp(wd / "metrics.json");
  cmd_evaluate(cfg, wd);
  EXPECT_EQ(slurp(wd / "metrics.json"), m1);
  const auto line = cmd_explain(cfg, wd);
  EXPECT_NE(line.find("explain:"), std::string::npos);
  const auto rep = report_from_json(nlohmann::json::parse(slurp(wd / "explain/attribution.json")));
  double base = 0.0;
  for (Interval b : kBaseIntervals) base += rep[b];
  EXPECT_NEAR(base, 100.0, 0.01);
  EXPECT_EQ(rep.top3.size(), 3u);
  fs::remove_all(wd);
}

TEST(Commands, SeqLenMismatchWithStoreIsNamed) {
  const auto wd = fs::temp_directory_path() / "transecg_cmd_mismatch";
  fs::remove_all(wd);
  auto cfg = tiny_config();
  cmd_synth(cfg, wd);
  cmd_preprocess(cfg, wd);
  cfg = apply_override(cfg, "seq_len=1000");
  try {
    cmd_train(cfg, wd);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("seq_len"), std::string::npos);
  }
  fs::remove_all(wd);
}
