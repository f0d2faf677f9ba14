#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "transecg/pipeline.hpp"

namespace {

struct Options {
  std::string config;
  std::string workdir = ".";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> task;
  std::vector<std::string> overrides;
};

transecg::RunConfig resolve(const Options& o) {
  auto cfg = o.config.empty() ? transecg::RunConfig{} : transecg::load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.task) cfg.task = *o.task;
  for (const auto& kv : o.overrides) cfg = transecg::apply_override(cfg, kv);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ECG transformer: preprocessing, training, evaluation and attention attribution"};
  app.require_subcommand(1, 1);
  Options o;
  app.add_option("--config", o.config, "JSON run config");
  app.add_option("--workdir", o.workdir, "directory all stages read from and write to");
  app.add_option("--seed", o.seed, "run seed");
  app.add_option("--task", o.task, "classification task")->check(CLI::IsMember({"gender", "age", "id"}));
  app.add_option("--set", o.overrides, "config override key=value (repeatable)");

  using Cmd = std::string (*)(const transecg::RunConfig&, const std::filesystem::path&);
  const std::vector<std::pair<std::string, Cmd>> cmds = {
      {"synth", transecg::cmd_synth},       {"preprocess", transecg::cmd_preprocess},
      {"train", transecg::cmd_train},       {"evaluate", transecg::cmd_evaluate},
      {"explain", transecg::cmd_explain},
  };
  const std::vector<std::string> help = {
      "generate a synthetic corpus (manifest + CSVs)", "filter, resample and window the manifest records",
      "train the transformer and write a checkpoint", "score the checkpoint on the test split",
      "attribute attention to ECG intervals"};
  for (std::size_t i = 0; i < cmds.size(); ++i) app.add_subcommand(cmds[i].first, help[i])->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const auto cfg = resolve(o);
    const std::filesystem::path wd = o.workdir;
    std::filesystem::create_directories(wd);
    for (const auto& [name, fn] : cmds)
      if (app.got_subcommand(name)) std::cout << fn(cfg, wd) << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
