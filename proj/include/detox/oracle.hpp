#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "detox/corpus.hpp"

namespace detox {

enum class OracleRole { kReward, kEval };

const char* oracle_role_name(OracleRole role);
OracleRole oracle_role_from_name(const std::string& name);

// Bag-of-tokens logistic scorer: sigmoid(bias + mean of per-token weights).
struct OracleModel {
  OracleRole role = OracleRole::kEval;
  std::uint64_t seed = 0;
  double bias = 0.0;
  std::vector<double> weights;  // one per vocabulary id
};

enum class ScoreSource { kOracleEval, kOracleReward, kGroundTruthDensity };

struct ToxicityScore {
  double value = 0.0;
  ScoreSource source = ScoreSource::kOracleEval;
};

struct LabeledExample {
  std::vector<TokenId> tokens;
  int label = 0;  // 1 = toxic
};

// Sentences with a uniformly drawn toxic-word density; label is 1 when at
// least half the words are toxic.
std::vector<LabeledExample> synthesize_toxicity_dataset(const Vocabulary& vocab, std::uint64_t seed,
                                                        std::size_t n);

struct OracleTrainOptions {
  double learning_rate = 0.1;
  std::size_t epochs = 300;
};

// Per-example gradient descent on the logistic loss with a seeded shuffle
// each epoch. Throws TrainingError if only one label is present.
OracleModel train_oracle(std::span<const LabeledExample> dataset, std::size_t vocab_size,
                         OracleRole role, std::uint64_t seed, const OracleTrainOptions& options = {});

double oracle_accuracy(const OracleModel& oracle, std::span<const LabeledExample> dataset);

// Empty input scores 0.0.
ToxicityScore score(const OracleModel& oracle, std::span<const TokenId> tokens);

// 1 - 2 * score. Only reward-role oracles may be used here.
double reward(const OracleModel& oracle, std::span<const TokenId> completion);

void save_oracle(const std::filesystem::path& path, const OracleModel& oracle);
OracleModel load_oracle(const std::filesystem::path& path);

}  // namespace detox
