#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "detox/corpus.hpp"
#include "detox/model.hpp"
#include "detox/oracle.hpp"

namespace detox {

struct TrainingLog {
  struct Entry {
    std::size_t step = 0;
    std::string metric;
    double value = 0.0;
  };
  std::vector<Entry> entries;

  void add(std::size_t step, std::string metric, double value);
  // Values of one metric in step order.
  std::vector<double> series(const std::string& metric) const;
  // CSV with header step,metric,value.
  void write_csv(const std::filesystem::path& path) const;
};

// Optional periodic evaluation of the adapter being trained, logged as
// "probe_toxicity".
struct ProbeHook {
  std::function<double(const LoraAdapter&)> evaluate;
  std::size_t every = 0;
};

// ---- instruction tuning of the base model -----------------------------------

struct BaseTrainConfig {
  std::size_t epochs = 3;
  double learning_rate = 1e-3;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
};

std::vector<LossSequence> render_instruction_pairs(const Vocabulary& vocab,
                                                   std::span<const InstructionPair> pairs);

// Full-parameter training on "BOS prompt SEP response EOS" sequences. Returns
// new weights; the input is not modified.
std::pair<TransformerWeights, TrainingLog> train_base_model(const TransformerWeights& init,
                                                            const Vocabulary& vocab,
                                                            std::span<const InstructionPair> pairs,
                                                            const BaseTrainConfig& cfg);

// ---- counter-narrative fine-tuning --------------------------------------------

enum class LossMask { kResponseOnly, kFullSequence };

struct FinetuneConfig {
  std::size_t epochs = 5;
  double learning_rate = 1e-3;
  std::size_t batch_size = 8;
  LossMask loss_mask = LossMask::kResponseOnly;
  std::uint64_t seed = 0;

  void validate() const;
};

// One "BOS hs SEP cn EOS" sequence per HS->CN pair. With response-only
// masking the first scored target is the SEP token.
std::vector<LossSequence> render_counter_narrative_pairs(const Vocabulary& vocab,
                                                         std::span<const DialogueRecord> dialogues,
                                                         LossMask mask);

struct AdapterResult {
  LoraAdapter adapter;
  TrainingLog log;
};

// Standard LM objective on counter-narrative responses, updating only the
// adapter (Adam). The base weights are never written.
AdapterResult finetune_counter_narrative(const TransformerWeights& base, const LoraAdapter& adapter,
                                         const Vocabulary& vocab,
                                         std::span<const DialogueRecord> dialogues,
                                         const FinetuneConfig& cfg, const ProbeHook& probe = {});

// ---- RL detoxification ------------------------------------------------------------

struct RLConfig {
  std::size_t episodes = 500;
  double learning_rate = 1e-4;
  double kl_coefficient = 0.05;
  double baseline_decay = 0.9;
  std::size_t max_new_tokens = 24;
  std::uint64_t seed = 0;

  void validate() const;
};

// sum_i p_i ln(p_i / q_i) with 0 ln 0 = 0. Throws NumericDomainError when an
// input is not a distribution or q vanishes where p does not.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// REINFORCE with an exponential-moving-average baseline. Each episode samples
// a prompt, generates a completion (temperature 1), and ascends
//   (reward - kl_coefficient * sum_t KL(policy_t || reference_t) - baseline) * sum_t log pi(token_t)
// through the adapter only. The reference is the base model without adapter.
// The baseline starts at the first episode's return.
AdapterResult rl_detoxify(const TransformerWeights& base, const LoraAdapter& adapter,
                          const OracleModel& reward_oracle, const Vocabulary& vocab,
                          std::span<const PromptRecord> prompts, const RLConfig& cfg,
                          const ProbeHook& probe = {});

}  // namespace detox
