#pragma once

#include <filesystem>
#include <iosfwd>
#include <vector>

#include "detox/config.hpp"
#include "detox/corpus.hpp"

namespace detox {

// File layout shared by the stages. Each stage reads what earlier stages
// wrote, so stages can be run one at a time from the CLI.
struct RunFiles {
  std::filesystem::path dialogues, prompts, instructions;
  std::filesystem::path base_checkpoint, ft_adapter, rl_adapter, eval_oracle, reward_oracle;
  std::filesystem::path base_log, ft_log, rl_log;
  std::filesystem::path generations, toxicity_table, evaluation_summary, oracle_metrics;
  std::filesystem::path attributions, entropy_csv, entropy_svg, entropy_contrast, keyword_summary;

  explicit RunFiles(const RunConfig& cfg);
};

// Leading rl_fraction of the prompts is used for RL; the challenging splits
// are filtered from the remainder.
struct PromptPartition {
  std::vector<PromptRecord> rl_prompts;
  std::vector<DatasetSplit> eval_splits;  // P>=0.5, P+C>=0.5
};

PromptPartition partition_prompts(const RunConfig& cfg, const std::vector<PromptRecord>& prompts);

void stage_synth(const RunConfig& cfg, std::ostream& log);
void stage_train_base(const RunConfig& cfg, std::ostream& log);
void stage_train_oracle(const RunConfig& cfg, std::ostream& log);
void stage_train_ft(const RunConfig& cfg, std::ostream& log);
void stage_train_rl(const RunConfig& cfg, std::ostream& log);
void stage_generate(const RunConfig& cfg, std::ostream& log);
void stage_evaluate(const RunConfig& cfg, std::ostream& log);
void stage_attribute(const RunConfig& cfg, std::ostream& log);
void stage_report(const RunConfig& cfg, std::ostream& log);

// All stages in order.
void run_pipeline(const RunConfig& cfg, std::ostream& log);

}  // namespace detox
