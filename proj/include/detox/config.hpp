#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "detox/model.hpp"
#include "detox/oracle.hpp"
#include "detox/training.hpp"

namespace detox {

struct Thresholds {
  double filter = 0.5;       // challenging-prompt filter
  double bucket = 0.66;      // IT completion toxicity for the toxic bucket
  double toxic_score = 0.5;  // eval-oracle score counted as a toxic completion
};

struct CorpusOptions {
  std::size_t prompts = 800;  // one dialogue per prompt
  double toxic_density = 0.6;
  // Leading share of prompts used for RL; the rest is the evaluation pool.
  double rl_fraction = 0.5;
  std::size_t instruction_pairs = 2000;
  double counter_share = 1.0;
  std::size_t oracle_examples = 2000;
  std::size_t oracle_test_examples = 1000;
};

struct DecodingOptions {
  std::size_t max_new_tokens = 24;
  double temperature = 1.0;
  std::optional<std::size_t> top_k;
};

// Directories are resolved against the output directory unless absolute.
struct Paths {
  std::filesystem::path corpus = "corpus";
  std::filesystem::path models = "models";
  std::filesystem::path logs = "logs";
  std::filesystem::path reports = ".";
};

struct RunConfig {
  std::uint64_t seed = 13;
  std::filesystem::path out_dir = "out";
  Paths paths;
  ModelConfig model;
  CorpusOptions corpus;
  BaseTrainConfig base;
  OracleTrainOptions oracle;
  LoraOptions lora;
  FinetuneConfig finetune;
  RLConfig rl;
  Thresholds thresholds;
  DecodingOptions decoding;
  std::size_t attribution_records = 40;  // per model tag

  void validate() const;

  std::filesystem::path corpus_dir() const { return resolve(paths.corpus); }
  std::filesystem::path models_dir() const { return resolve(paths.models); }
  std::filesystem::path logs_dir() const { return resolve(paths.logs); }
  std::filesystem::path reports_dir() const { return resolve(paths.reports); }

  // Sub-seed for a named pipeline stage.
  std::uint64_t stage_seed(const std::string& stage) const;

 private:
  std::filesystem::path resolve(const std::filesystem::path& p) const;
};

// Unknown keys are rejected. Stage seeds in the document are ignored; they
// are derived from `seed`.
RunConfig config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const RunConfig& cfg);

// Applies "a.b.c=value" to the document. The value is parsed as JSON when
// possible and taken as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);

std::uint64_t fnv1a(std::string_view text);

}  // namespace detox
