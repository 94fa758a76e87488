#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "detox/tensor.hpp"

namespace detox {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 128;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class Projection { kQuery, kKey, kValue, kOutput };

const char* projection_name(Projection p);
Projection projection_from_name(const std::string& name);

struct BlockWeights {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // W: [out, in]
  Tensor ln2_gamma, ln2_beta;
  Tensor ff_in, ff_in_bias;    // [d_ff, d_model]
  Tensor ff_out, ff_out_bias;  // [d_model, d_ff]

  Tensor& projection(Projection p);
  const Tensor& projection(Projection p) const;
};

// Pre-LN decoder-only transformer with learned positions and an untied
// output head.
struct TransformerWeights {
  ModelConfig config;
  Tensor token_embedding;     // [vocab, d]
  Tensor position_embedding;  // [max_seq_len, d]
  std::vector<BlockWeights> blocks;
  Tensor final_gamma, final_beta;
  Tensor head, head_bias;  // [vocab, d], [vocab]
  // Number of adapters folded into the matrices by merge_lora.
  int merged_adapters = 0;

  static TransformerWeights init(const ModelConfig& config, std::uint64_t seed);

  TransformerWeights clone() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  void set_requires_grad(bool value);
  void clear_grads();
  // Throws ShapeError/NumericDomainError when a tensor disagrees with config.
  void validate() const;
};

struct LoraSlot {
  std::size_t block = 0;
  Projection target = Projection::kQuery;
  Tensor a;  // [r, d_in]
  Tensor b;  // [d_out, r]
};

struct LoraOptions {
  std::size_t rank = 4;
  double alpha = 8.0;
  std::vector<Projection> targets{Projection::kQuery, Projection::kValue};
};

// Low-rank deltas (alpha/r)·B·A on selected projection matrices. B starts at
// zero so a fresh adapter leaves the model unchanged.
struct LoraAdapter {
  std::size_t rank = 4;
  double alpha = 8.0;
  std::vector<Projection> targets;
  std::vector<LoraSlot> slots;

  static LoraAdapter init(const ModelConfig& config, const LoraOptions& options, std::uint64_t seed);

  double scaling() const { return alpha / static_cast<double>(rank); }
  const LoraSlot* find(std::size_t block, Projection target) const;
  LoraAdapter clone() const;
  std::vector<Tensor> parameters() const;
  void set_requires_grad(bool value);
  void clear_grads();
  // Throws ShapeError when the adapter cannot wrap a model with this config.
  void validate_against(const ModelConfig& config) const;
};

// token + position embeddings, [T, d].
Tensor embed_tokens(Tape& tape, const TransformerWeights& w, std::span<const TokenId> tokens);

// Runs the blocks and output head on precomputed input embeddings.
Tensor forward_embeddings(Tape& tape, const TransformerWeights& w, const LoraAdapter* adapter,
                          const Tensor& embeddings);

// Logits [T, vocab]; row t depends only on tokens[0..t].
Tensor forward(Tape& tape, const TransformerWeights& w, const LoraAdapter* adapter,
               std::span<const TokenId> tokens);

// A training sequence; targets tokens[j] for j >= first_target are scored.
struct LossSequence {
  std::vector<TokenId> tokens;
  std::size_t first_target = 1;
};

// Mean next-token cross-entropy over all scored positions of the batch.
Tensor lm_loss(Tape& tape, const TransformerWeights& w, const LoraAdapter* adapter,
               std::span<const LossSequence> batch);
double lm_loss(const TransformerWeights& w, const LoraAdapter* adapter,
               const std::vector<std::vector<TokenId>>& batch);

enum class ModelTag { IT, FT, RL };

const char* model_tag_name(ModelTag tag);
ModelTag model_tag_from_name(const std::string& name);

struct GenerationParams {
  std::size_t max_new_tokens = 24;
  double temperature = 1.0;
  std::optional<std::size_t> top_k;
  std::uint64_t seed = 0;
  bool greedy = false;
  // Generation stops after emitting this token (kept in the completion).
  std::optional<TokenId> stop_token;

  void validate() const;
};

struct GenerationRecord {
  std::string id;
  std::vector<TokenId> prompt_ids;
  std::vector<TokenId> completion_ids;
  std::vector<double> step_logprobs;  // log-prob of each emitted token
  ModelTag model_tag = ModelTag::IT;
  // Sampling transform the log-probs were taken under.
  double temperature = 1.0;
  std::optional<std::size_t> top_k;

  std::vector<TokenId> full_sequence() const;
};

// log-probabilities of the sampling distribution: temperature scaling, then
// top-k restriction (excluded tokens get -inf).
std::vector<double> sampling_logprobs(std::span<const double> logits, double temperature,
                                      std::optional<std::size_t> top_k);

GenerationRecord generate(const TransformerWeights& w, const LoraAdapter* adapter,
                          std::span<const TokenId> prompt, const GenerationParams& params,
                          ModelTag tag = ModelTag::IT);

// Per-step log-probs of the record's completion recomputed by teacher forcing.
std::vector<double> teacher_forced_logprobs(const TransformerWeights& w, const LoraAdapter* adapter,
                                            const GenerationRecord& record);

enum class MergePolicy { kRejectMerged, kAllowStacking };

// W' = W + (alpha/r)·B·A for every adapter slot. The result records that an
// adapter was folded in; merging into already-merged weights stacks another
// delta and is rejected unless explicitly allowed.
TransformerWeights merge_lora(const TransformerWeights& w, const LoraAdapter& adapter,
                              MergePolicy policy = MergePolicy::kRejectMerged);

}  // namespace detox
