// Command-line front end: one subcommand per pipeline stage plus `pipeline`.
#include <exception>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "detox/config.hpp"
#include "detox/errors.hpp"
#include "detox/pipeline.hpp"

namespace {

using Stage = std::function<void(const detox::RunConfig&, std::ostream&)>;

struct Options {
  std::string config;
  std::uint64_t seed = 13;
  std::string out = "./out";
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "Run configuration (JSON)")->required();
  cmd->add_option("--seed", o.seed, "Global seed");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--set", o.overrides, "Override a config value, e.g. rl.episodes=200 (repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Detoxification and attribution-entropy experiments on a tiny transformer LM"};
  app.require_subcommand(1);

  Options opts;
  const std::vector<std::pair<std::string, std::pair<std::string, Stage>>> stages = {
      {"synth", {"Write the synthetic corpora", detox::stage_synth}},
      {"train-base", {"Instruction-tune the base (IT) model", detox::stage_train_base}},
      {"train-oracle", {"Train the reward and eval toxicity oracles", detox::stage_train_oracle}},
      {"train-ft", {"Counter-narrative fine-tuning of a LoRA adapter", detox::stage_train_ft}},
      {"train-rl", {"REINFORCE detoxification of a LoRA adapter", detox::stage_train_rl}},
      {"generate", {"Generate completions for IT, FT and RL", detox::stage_generate}},
      {"evaluate", {"Toxic-completion table over the challenging splits", detox::stage_evaluate}},
      {"attribute", {"Gradient saliency of generations", detox::stage_attribute}},
      {"report", {"Entropy profiles, buckets, charts and keyword analysis", detox::stage_report}},
      {"pipeline", {"Run every stage in order", detox::run_pipeline}},
  };
  std::map<std::string, Stage> handlers;
  for (const auto& [name, entry] : stages) {
    add_common(app.add_subcommand(name, entry.first), opts);
    handlers[name] = entry.second;
  }

  if (argc <= 1) {
    std::cerr << app.help();
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    std::vector<std::string> overrides = {"seed=" + std::to_string(opts.seed)};
    overrides.insert(overrides.end(), opts.overrides.begin(), opts.overrides.end());
    auto cfg = detox::load_run_config(opts.config, overrides);
    cfg.out_dir = opts.out;
    cfg.validate();
    const std::string name = app.get_subcommands().front()->get_name();
    handlers.at(name)(cfg, std::cout);
  } catch (const detox::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
