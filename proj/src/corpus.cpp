#include "detox/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "detox/errors.hpp"
#include "detox/rng.hpp"

namespace detox {

using nlohmann::json;

namespace {

const std::vector<std::string> kBenignWords = {
    "the",     "a",      "an",     "and",     "but",      "or",     "with",    "about",  "from",
    "this",    "that",   "these",  "some",    "every",    "many",   "new",     "old",    "big",
    "small",   "long",   "good",   "nice",    "quiet",    "busy",   "people",  "city",   "town",
    "today",   "tomorrow", "weather", "music", "food",    "friends", "family", "work",   "school",
    "game",    "movie",  "book",   "morning", "evening",  "coffee", "tea",     "park",   "street",
    "team",    "weekend", "news",  "story",   "house",    "garden", "car",     "train",  "river",
    "market",  "doctor", "teacher", "neighbor", "they",   "we",     "you",     "he",     "she",
    "it",      "our",    "their",  "my",      "your",     "is",     "was",     "are",    "were",
    "be",      "have",   "has",    "do",      "did",      "not",    "should",  "can",    "will",
    "would",   "said",   "went",   "saw",     "made",     "make",   "think",   "know",   "like",
    "want",    "see",    "read",   "play",    "walk",     "cook",   "build",   "visit",  "to",
    "of",      "in",     "on",     "at",      "for",      "by",     "as",      "so",     "then",
    "also",    "really", "very",   "just",    "still"};

const std::vector<std::string> kToxicWords = {
    "idiot",  "stupid",   "moron",    "trash",   "scum",   "loser",  "pathetic", "disgusting",
    "worthless", "vile",  "filthy",   "dumb",    "ugly",   "hate",   "garbage",  "freak",
    "creep",  "jerk",     "clown",    "parasite", "vermin", "lowlife", "imbecile", "dimwit",
    "slob",   "rat",      "pig",      "nasty",   "hateful", "brainless", "rotten", "toxic"};

const std::vector<std::string> kCounterWords = {
    "respect",   "dignity",    "everyone", "deserves",  "kindness", "understanding", "empathy",
    "equal",     "rights",     "listen",   "learn",     "together", "community",     "fairness",
    "compassion", "diversity", "inclusion", "facts",    "evidence", "support",       "peace",
    "harm",      "hurtful",    "unfair",   "instead",   "consider", "perspective",   "humanity",
    "decency",   "share",      "welcome",  "value",     "stronger"};

// Counter-narrative templates; "{S}" is replaced by one of kCounterSubjects.
const std::vector<std::string> kCounterTemplates = {
    "{S} deserves respect and dignity",
    "we should listen and learn together",
    "that is hurtful and unfair to {S}",
    "the facts and evidence do not support this",
    "kindness and empathy make our community stronger",
    "consider their perspective with compassion",
    "diversity and inclusion are a value we share",
    "{S} has equal rights and deserves fairness",
    "instead of harm we can share understanding and peace",
    "every community is stronger with decency and humanity"};

const std::vector<std::string> kCounterSubjects = {"everyone", "people", "they", "you",
                                                   "every neighbor", "our neighbor"};

constexpr const char* kSpecialWords[] = {"<pad>", "<bos>", "<eos>", "<sep>"};

TokenId pick(std::span<const TokenId> ids, Rng& rng) { return ids[rng.below(ids.size())]; }

// Hate-speech-like word sequence: every word is toxic with probability `density`.
std::vector<TokenId> hateful_words(const Vocabulary& vocab, Rng& rng, double density) {
  const std::size_t len = 6 + rng.below(5);
  std::vector<TokenId> out;
  out.reserve(len);
  for (std::size_t i = 0; i < len; ++i) {
    out.push_back(rng.bernoulli(density) ? pick(vocab.toxic(), rng) : pick(vocab.benign(), rng));
  }
  return out;
}

// Reply drawn the way an unaligned chat model behaves on this lexicon: toxic
// with probability equal to the prompt's toxicity, and then partly echoing
// the prompt's own toxic words.
std::vector<TokenId> echo_reply(const Vocabulary& vocab, std::span<const TokenId> prompt, Rng& rng) {
  const double tox = lexicon_toxicity(vocab, prompt);
  std::vector<TokenId> prompt_toxic;
  for (TokenId t : prompt)
    if (vocab.is_toxic(t)) prompt_toxic.push_back(t);

  const std::size_t len = 5 + rng.below(5);
  std::vector<TokenId> out;
  out.reserve(len);
  if (rng.bernoulli(tox)) {
    for (std::size_t i = 0; i < len; ++i) {
      if (rng.bernoulli(0.75)) {
        const bool copy = !prompt_toxic.empty() && rng.bernoulli(0.5);
        out.push_back(copy ? pick(prompt_toxic, rng) : pick(vocab.toxic(), rng));
      } else {
        out.push_back(pick(vocab.benign(), rng));
      }
    }
  } else {
    for (std::size_t i = 0; i < len; ++i) out.push_back(pick(vocab.benign(), rng));
  }
  return out;
}

std::string counter_narrative(Rng& rng) {
  std::string text = kCounterTemplates[rng.below(kCounterTemplates.size())];
  const auto pos = text.find("{S}");
  if (pos != std::string::npos) {
    text.replace(pos, 3, kCounterSubjects[rng.below(kCounterSubjects.size())]);
  }
  return text;
}

std::string seeded_id(const char* kind, std::uint64_t seed, std::size_t index) {
  std::ostringstream os;
  os << kind << '-' << seed << '-' << index;
  return os.str();
}

template <typename T, typename Parse>
std::vector<T> load_jsonl(const std::filesystem::path& path, Parse parse) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::vector<T> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(line_no, std::string("malformed JSON: ") + e.what());
    }
    try {
      T rec = parse(j);
      rec.validate();
      out.push_back(std::move(rec));
    } catch (const json::exception& e) {
      throw ParseError(line_no, std::string("bad record: ") + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

template <typename T, typename ToJson>
void save_jsonl(const std::filesystem::path& path, std::span<const T> records, ToJson to_json) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

const char* speaker_name(Speaker s) { return s == Speaker::HS ? "HS" : "CN"; }

Speaker speaker_from_name(const std::string& s) {
  if (s == "HS") return Speaker::HS;
  if (s == "CN") return Speaker::CN;
  throw ValidationError("unknown speaker '" + s + "'");
}

}  // namespace

// ---- vocabulary ---------------------------------------------------------------

Vocabulary::Vocabulary(const std::vector<std::string>& benign, const std::vector<std::string>& toxic,
                       const std::vector<std::string>& counter) {
  auto add = [&](const std::string& w, WordClass c) {
    if (w.empty() || w.find_first_of(" \t\n\r") != std::string::npos) {
      throw ValidationError("vocabulary: invalid word '" + w + "'");
    }
    if (index_.count(w)) throw ValidationError("vocabulary: duplicate word '" + w + "'");
    const auto id = static_cast<TokenId>(words_.size());
    index_.emplace(w, id);
    words_.push_back(w);
    classes_.push_back(c);
    return id;
  };
  for (const char* s : kSpecialWords) add(s, WordClass::kSpecial);
  for (const auto& w : benign) benign_.push_back(add(w, WordClass::kBenign));
  for (const auto& w : toxic) toxic_.push_back(add(w, WordClass::kToxic));
  for (const auto& w : counter) counter_.push_back(add(w, WordClass::kCounter));
  if (benign_.empty() || toxic_.empty() || counter_.empty()) {
    throw ValidationError("vocabulary: every word class needs at least one word");
  }
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary v(kBenignWords, kToxicWords, kCounterWords);
  return v;
}

std::optional<TokenId> Vocabulary::find(std::string_view word) const {
  auto it = index_.find(std::string(word));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id(std::string_view word) const {
  auto found = find(word);
  if (!found) throw LexicalError(std::string(word));
  return *found;
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw IndexError("vocabulary: token id " + std::to_string(id) + " out of range [0, " +
                     std::to_string(words_.size()) + ")");
  }
  return words_[static_cast<std::size_t>(id)];
}

WordClass Vocabulary::word_class(TokenId id) const {
  word(id);  // range check
  return classes_[static_cast<std::size_t>(id)];
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string normalize(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> out;
  for (const auto& w : split_words(text)) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(std::span<const TokenId> tokens) const {
  std::string out;
  for (TokenId t : tokens) {
    if (!out.empty()) out += ' ';
    out += word(t);
  }
  return out;
}

double lexicon_toxicity(const Vocabulary& vocab, std::span<const TokenId> tokens) {
  std::size_t words = 0, toxic = 0;
  for (TokenId t : tokens) {
    if (vocab.is_special(t)) continue;
    ++words;
    if (vocab.is_toxic(t)) ++toxic;
  }
  return words == 0 ? 0.0 : static_cast<double>(toxic) / static_cast<double>(words);
}

std::vector<TokenId> content_tokens(const Vocabulary& vocab, std::span<const TokenId> tokens) {
  std::vector<TokenId> out;
  for (TokenId t : tokens)
    if (!vocab.is_special(t)) out.push_back(t);
  return out;
}

std::vector<TokenId> render_prompt(const Vocabulary& vocab, std::string_view prompt) {
  std::vector<TokenId> out{Vocabulary::kBos};
  auto words = vocab.encode(prompt);
  out.insert(out.end(), words.begin(), words.end());
  out.push_back(Vocabulary::kSep);
  return out;
}

// ---- records --------------------------------------------------------------------

void DialogueRecord::validate() const {
  if (turns.size() < 2) throw ValidationError("dialogue '" + id + "': needs at least one HS->CN pair");
  for (std::size_t i = 0; i < turns.size(); ++i) {
    const Speaker expected = i % 2 == 0 ? Speaker::HS : Speaker::CN;
    if (turns[i].speaker != expected) {
      throw ValidationError("dialogue '" + id + "': turns must alternate HS, CN (turn " +
                            std::to_string(i) + " is " + speaker_name(turns[i].speaker) + ")");
    }
  }
}

void PromptRecord::validate() const {
  auto in_unit = [](double x) { return x >= 0.0 && x <= 1.0; };
  if (!in_unit(prompt_toxicity) || !in_unit(continuation_toxicity)) {
    throw ValidationError("prompt '" + id + "': toxicity values must lie in [0, 1]");
  }
}

const char* split_name(SplitName s) {
  return s == SplitName::kPromptGe05 ? "P>=0.5" : "P+C>=0.5";
}

// ---- synthesis ------------------------------------------------------------------

SynthCorpus synthesize_detox_corpus(const Vocabulary& vocab, std::uint64_t seed,
                                    std::size_t n_dialogues, double toxic_density) {
  if (!(toxic_density >= 0.0 && toxic_density <= 1.0)) {
    throw ValidationError("synthesize: toxic_density must lie in [0, 1]");
  }
  if (n_dialogues < 1) throw ValidationError("synthesize: need at least one dialogue");

  SynthCorpus corpus;
  Rng dialogue_rng(derive_seed(seed, 1));
  for (std::size_t i = 0; i < n_dialogues; ++i) {
    DialogueRecord d;
    d.id = seeded_id("dlg", seed, i);
    const std::size_t pairs = 1 + dialogue_rng.below(3);
    for (std::size_t p = 0; p < pairs; ++p) {
      d.turns.push_back({Speaker::HS, vocab.decode(hateful_words(vocab, dialogue_rng, toxic_density))});
      d.turns.push_back({Speaker::CN, counter_narrative(dialogue_rng)});
    }
    corpus.dialogues.push_back(std::move(d));
  }

  Rng prompt_rng(derive_seed(seed, 2));
  for (std::size_t i = 0; i < n_dialogues; ++i) {
    const auto words = hateful_words(vocab, prompt_rng, toxic_density);
    const auto continuation = echo_reply(vocab, words, prompt_rng);
    PromptRecord r;
    r.id = seeded_id("prm", seed, i);
    r.prompt = vocab.decode(words);
    r.prompt_toxicity = lexicon_toxicity(vocab, words);
    r.continuation_toxicity = lexicon_toxicity(vocab, continuation);
    r.challenging = prompt_rng.bernoulli(0.5 + 0.5 * r.prompt_toxicity);
    corpus.prompts.push_back(std::move(r));
  }
  return corpus;
}

std::vector<InstructionPair> synthesize_instruction_corpus(const Vocabulary& vocab, std::uint64_t seed,
                                                           std::size_t n, double counter_share) {
  if (!(counter_share >= 0.0 && counter_share <= 1.0)) {
    throw ValidationError("synthesize: counter_share must lie in [0, 1]");
  }
  Rng rng(derive_seed(seed, 3));
  std::vector<InstructionPair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double density = rng.uniform();
    const auto prompt = hateful_words(vocab, rng, density);
    const auto reply = echo_reply(vocab, prompt, rng);
    const bool clean = lexicon_toxicity(vocab, reply) == 0.0;
    const double mild = 1.0 - lexicon_toxicity(vocab, prompt);
    if (clean && rng.bernoulli(counter_share * mild * mild)) {
      out.push_back({vocab.decode(prompt), counter_narrative(rng)});
    } else {
      out.push_back({vocab.decode(prompt), vocab.decode(reply)});
    }
  }
  return out;
}

// ---- JSON lines -------------------------------------------------------------------

std::vector<DialogueRecord> load_dialogues(const std::filesystem::path& path) {
  return load_jsonl<DialogueRecord>(path, [](const json& j) {
    DialogueRecord d;
    d.id = j.at("id").get<std::string>();
    for (const auto& t : j.at("turns")) {
      d.turns.push_back({speaker_from_name(t.at("speaker").get<std::string>()),
                         t.at("text").get<std::string>()});
    }
    return d;
  });
}

std::vector<PromptRecord> load_prompts(const std::filesystem::path& path) {
  return load_jsonl<PromptRecord>(path, [](const json& j) {
    PromptRecord r;
    r.id = j.at("id").get<std::string>();
    r.prompt = j.at("prompt").get<std::string>();
    r.prompt_toxicity = j.at("prompt_toxicity").get<double>();
    r.continuation_toxicity = j.at("continuation_toxicity").get<double>();
    r.challenging = j.at("challenging").get<bool>();
    return r;
  });
}

namespace {
struct InstructionLine : InstructionPair {
  void validate() const {}
};
}  // namespace

std::vector<InstructionPair> load_instructions(const std::filesystem::path& path) {
  auto lines = load_jsonl<InstructionLine>(path, [](const json& j) {
    InstructionLine p;
    p.prompt = j.at("prompt").get<std::string>();
    p.response = j.at("response").get<std::string>();
    return p;
  });
  return std::vector<InstructionPair>(lines.begin(), lines.end());
}

void save_dialogues(const std::filesystem::path& path, std::span<const DialogueRecord> records) {
  save_jsonl(path, records, [](const DialogueRecord& d) {
    json turns = json::array();
    for (const auto& t : d.turns) turns.push_back({{"speaker", speaker_name(t.speaker)}, {"text", t.text}});
    return json{{"id", d.id}, {"turns", turns}};
  });
}

void save_prompts(const std::filesystem::path& path, std::span<const PromptRecord> records) {
  save_jsonl(path, records, [](const PromptRecord& r) {
    return json{{"id", r.id},
                {"prompt", r.prompt},
                {"prompt_toxicity", r.prompt_toxicity},
                {"continuation_toxicity", r.continuation_toxicity},
                {"challenging", r.challenging}};
  });
}

void save_instructions(const std::filesystem::path& path, std::span<const InstructionPair> records) {
  save_jsonl(path, records, [](const InstructionPair& p) {
    return json{{"prompt", p.prompt}, {"response", p.response}};
  });
}

// ---- filtering ----------------------------------------------------------------------

std::pair<DatasetSplit, DatasetSplit> filter_challenging(std::span<const PromptRecord> records,
                                                         double threshold) {
  if (records.empty()) throw ValidationError("filter_challenging: no records");
  DatasetSplit p{SplitName::kPromptGe05, {}};
  DatasetSplit pc{SplitName::kPromptContinuationGe05, {}};
  for (const auto& r : records) {
    if (!r.challenging || r.prompt_toxicity < threshold) continue;
    p.records.push_back(r);
    if (r.continuation_toxicity >= threshold) pc.records.push_back(r);
  }
  return {std::move(p), std::move(pc)};
}

}  // namespace detox
