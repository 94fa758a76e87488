#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "detox/attribution.hpp"
#include "detox/config.hpp"
#include "detox/corpus.hpp"
#include "detox/model.hpp"
#include "detox/oracle.hpp"

namespace detox {

struct ModelVariant {
  ModelTag tag = ModelTag::IT;
  const TransformerWeights* weights = nullptr;
  const LoraAdapter* adapter = nullptr;
};

struct ScoredGeneration {
  GenerationRecord record;
  std::string prompt;
  std::string completion;  // decoded, reserved tokens dropped
  double toxicity = 0.0;   // eval-oracle score
};

struct ToxicityCell {
  SplitName split = SplitName::kPromptGe05;
  ModelTag tag = ModelTag::IT;
  std::optional<double> fraction;  // empty split -> none
  std::size_t n = 0;
};

struct ToxicityTable {
  std::vector<ToxicityCell> cells;
  const ToxicityCell& cell(SplitName split, ModelTag tag) const;
};

struct EvaluationResult {
  ToxicityTable table;
  // One per (unique prompt id, tag) in prompt order, tags in input order.
  std::vector<ScoredGeneration> generations;
  std::vector<std::string> warnings;
};

// Share of scores >= threshold; none for an empty list.
std::optional<double> toxic_fraction(std::span<const double> scores, double threshold);

// Seed used for a prompt; identical for every model tag.
std::uint64_t prompt_seed(std::uint64_t seed, const std::string& prompt_id);

GenerationParams decoding_params(const DecodingOptions& decoding, std::uint64_t seed);

// Generates one completion per prompt and variant, stopping at EOS.
std::vector<ScoredGeneration> generate_scored(std::span<const ModelVariant> models,
                                              std::span<const PromptRecord> prompts,
                                              const OracleModel& eval_oracle, const Vocabulary& vocab,
                                              const DecodingOptions& decoding, std::uint64_t seed);

// Toxic-completion fraction per (split, tag). Every tag sees the same prompts
// in the same order with the same per-prompt seeds.
EvaluationResult run_evaluation(std::span<const ModelVariant> models, std::span<const DatasetSplit> splits,
                                const OracleModel& eval_oracle, const Vocabulary& vocab,
                                const DecodingOptions& decoding, std::uint64_t seed,
                                double toxic_threshold = 0.5);

void write_toxicity_table(const std::filesystem::path& path, const ToxicityTable& table);

void save_generations(const std::filesystem::path& path, std::span<const ScoredGeneration> generations);
std::vector<ScoredGeneration> load_generations(const std::filesystem::path& path);

void save_attributions(const std::filesystem::path& path, std::span<const AttributionMatrix> matrices);
std::vector<AttributionMatrix> load_attributions(const std::filesystem::path& path);

// entropy.csv: step,model_tag,bucket,mean_entropy,ci_low,ci_high,n
std::string entropy_csv(const BucketedProfiles& buckets);
// Line chart of mean entropy per (tag, bucket) with shaded 95% bands.
std::string entropy_svg(const BucketedProfiles& buckets);
// Writes entropy.csv and entropy.svg into out_dir.
void emit_entropy_report(const BucketedProfiles& buckets, const std::filesystem::path& out_dir);

// Paired per-record difference of mean prompt-attribution entropy between a
// detoxified variant and IT, within one bucket.
struct EntropyContrast {
  Bucket bucket = Bucket::kToxic;
  ModelTag variant = ModelTag::FT;
  BucketStep difference;
};

std::vector<EntropyContrast> entropy_contrasts(std::span<const EntropyProfile> profiles,
                                               const std::map<std::string, double>& it_toxicity_by_id,
                                               double threshold);
void write_entropy_contrasts(const std::filesystem::path& path, std::span<const EntropyContrast> rows);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace detox
