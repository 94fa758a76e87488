#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "detox/tensor.hpp"

namespace detox {

enum class WordClass { kSpecial, kBenign, kToxic, kCounter };

// Closed word-level vocabulary. Ids are dense: the four reserved tokens come
// first, then benign, toxic and counter-narrative words in that order.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kSep = 3;

  Vocabulary(const std::vector<std::string>& benign, const std::vector<std::string>& toxic,
             const std::vector<std::string>& counter);

  // The built-in lexicon used by the synthetic corpus.
  static const Vocabulary& standard();

  std::size_t size() const { return words_.size(); }
  std::optional<TokenId> find(std::string_view word) const;
  TokenId id(std::string_view word) const;  // LexicalError if unknown
  const std::string& word(TokenId id) const;  // IndexError if out of range
  WordClass word_class(TokenId id) const;
  bool is_toxic(TokenId id) const { return word_class(id) == WordClass::kToxic; }
  bool is_special(TokenId id) const { return id >= 0 && id < 4; }

  std::span<const TokenId> benign() const { return benign_; }
  std::span<const TokenId> toxic() const { return toxic_; }
  std::span<const TokenId> counter() const { return counter_; }

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> tokens) const;

 private:
  std::vector<std::string> words_;
  std::vector<WordClass> classes_;
  std::unordered_map<std::string, TokenId> index_;
  std::vector<TokenId> benign_, toxic_, counter_;
};

// Whitespace-normalized form: words joined by single spaces.
std::string normalize(std::string_view text);
std::vector<std::string> split_words(std::string_view text);

// Fraction of non-special tokens that are in the toxic lexicon (0 if none).
double lexicon_toxicity(const Vocabulary& vocab, std::span<const TokenId> tokens);
// Drops reserved tokens.
std::vector<TokenId> content_tokens(const Vocabulary& vocab, std::span<const TokenId> tokens);

enum class Speaker { HS, CN };

struct Turn {
  Speaker speaker = Speaker::HS;
  std::string text;
  bool operator==(const Turn&) const = default;
};

struct DialogueRecord {
  std::string id;
  std::vector<Turn> turns;

  // Turns must alternate HS, CN, ... starting with HS, with at least one pair.
  void validate() const;
  bool operator==(const DialogueRecord&) const = default;
};

struct PromptRecord {
  std::string id;
  std::string prompt;
  double prompt_toxicity = 0.0;
  double continuation_toxicity = 0.0;
  bool challenging = false;

  void validate() const;
  bool operator==(const PromptRecord&) const = default;
};

enum class SplitName { kPromptGe05, kPromptContinuationGe05 };

const char* split_name(SplitName s);

struct DatasetSplit {
  SplitName name = SplitName::kPromptGe05;
  std::vector<PromptRecord> records;
};

struct SynthCorpus {
  std::vector<DialogueRecord> dialogues;
  std::vector<PromptRecord> prompts;
};

// Dialogues and prompts with toxicity known by construction. Each hate-speech
// word is toxic with probability `toxic_density`; counter-narratives use only
// benign and counter-narrative words. One prompt is produced per dialogue.
SynthCorpus synthesize_detox_corpus(const Vocabulary& vocab, std::uint64_t seed,
                                    std::size_t n_dialogues, double toxic_density);

// Prompt/response pairs that define the instruction-tuned behaviour the
// detoxification procedures start from: the chance of a toxic reply equals
// the prompt's toxic-word fraction. A clean reply is a counter-narrative
// sentence with probability counter_share * (1 - prompt toxicity)^2.
struct InstructionPair {
  std::string prompt;
  std::string response;
  bool operator==(const InstructionPair&) const = default;
};

std::vector<InstructionPair> synthesize_instruction_corpus(const Vocabulary& vocab, std::uint64_t seed,
                                                           std::size_t n, double counter_share = 1.0);

std::vector<DialogueRecord> load_dialogues(const std::filesystem::path& path);
std::vector<PromptRecord> load_prompts(const std::filesystem::path& path);
std::vector<InstructionPair> load_instructions(const std::filesystem::path& path);
void save_dialogues(const std::filesystem::path& path, std::span<const DialogueRecord> records);
void save_prompts(const std::filesystem::path& path, std::span<const PromptRecord> records);
void save_instructions(const std::filesystem::path& path, std::span<const InstructionPair> records);

// P_ge_05 keeps challenging prompts with prompt_toxicity >= threshold;
// PC_ge_05 additionally needs continuation_toxicity >= threshold.
std::pair<DatasetSplit, DatasetSplit> filter_challenging(std::span<const PromptRecord> records,
                                                         double threshold = 0.5);

// "BOS prompt SEP" as fed to the model at generation time.
std::vector<TokenId> render_prompt(const Vocabulary& vocab, std::string_view prompt);

}  // namespace detox
