#include "detox/config.hpp"

#include <fstream>
#include <set>

#include "detox/corpus.hpp"
#include "detox/errors.hpp"
#include "detox/rng.hpp"

namespace detox {

using nlohmann::json;

namespace {

// Reads known keys of one object and rejects the rest.
class Section {
 public:
  Section(const json& doc, std::string name) : name_(std::move(name)) {
    if (doc.contains(name_)) {
      if (!doc.at(name_).is_object()) throw ValidationError("config: '" + name_ + "' must be an object");
      obj_ = &doc.at(name_);
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return;
    try {
      out = obj_->at(key).get<T>();
    } catch (const json::exception& e) {
      throw ValidationError("config: " + name_ + "." + key + ": " + e.what());
    }
  }

  template <typename T>
  void get_optional(const std::string& key, std::optional<T>& out) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return;
    if (obj_->at(key).is_null()) {
      out.reset();
      return;
    }
    T v{};
    get(key, v);
    out = v;
  }

  void finish() const {
    if (!obj_) return;
    for (const auto& [key, value] : obj_->items()) {
      if (!seen_.count(key)) throw ValidationError("config: unknown key '" + name_ + "." + key + "'");
    }
  }

 private:
  std::string name_;
  const json* obj_ = nullptr;
  std::set<std::string> seen_;
};

LossMask loss_mask_from_name(const std::string& s) {
  if (s == "response_only") return LossMask::kResponseOnly;
  if (s == "full_sequence") return LossMask::kFullSequence;
  throw ValidationError("config: unknown loss_mask '" + s + "'");
}

const char* loss_mask_name(LossMask m) {
  return m == LossMask::kResponseOnly ? "response_only" : "full_sequence";
}

void check_unit(double v, const char* what) {
  if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(std::string("config: ") + what + " must lie in [0, 1]");
}

}  // namespace

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t RunConfig::stage_seed(const std::string& stage) const { return derive_seed(seed, fnv1a(stage)); }

std::filesystem::path RunConfig::resolve(const std::filesystem::path& p) const {
  return p.is_absolute() ? p : out_dir / p;
}

void RunConfig::validate() const {
  model.validate();
  if (model.vocab_size != Vocabulary::standard().size()) {
    throw ValidationError("config: model.vocab_size must equal the vocabulary size " +
                          std::to_string(Vocabulary::standard().size()));
  }
  check_unit(thresholds.filter, "thresholds.filter");
  check_unit(thresholds.bucket, "thresholds.bucket");
  check_unit(thresholds.toxic_score, "thresholds.toxic_score");
  check_unit(corpus.toxic_density, "corpus.toxic_density");
  check_unit(corpus.counter_share, "corpus.counter_share");
  if (!(corpus.rl_fraction > 0.0 && corpus.rl_fraction < 1.0)) {
    throw ValidationError("config: corpus.rl_fraction must lie in (0, 1)");
  }
  if (corpus.prompts < 2) throw ValidationError("config: corpus.prompts must be >= 2");
  if (corpus.instruction_pairs < 1) throw ValidationError("config: corpus.instruction_pairs must be >= 1");
  if (corpus.oracle_examples < 2) throw ValidationError("config: corpus.oracle_examples must be >= 2");
  if (base.batch_size == 0 || !(base.learning_rate > 0.0)) {
    throw ValidationError("config: base.batch_size and base.learning_rate must be positive");
  }
  if (!(oracle.learning_rate > 0.0)) throw ValidationError("config: oracle.learning_rate must be positive");
  if (lora.rank == 0 || !(lora.alpha > 0.0) || lora.targets.empty()) {
    throw ValidationError("config: lora needs rank >= 1, alpha > 0 and at least one target");
  }
  if (finetune.epochs < 1) throw ValidationError("config: finetune.epochs must be >= 1");
  finetune.validate();
  rl.validate();
  GenerationParams gp;
  gp.max_new_tokens = decoding.max_new_tokens;
  gp.temperature = decoding.temperature;
  gp.top_k = decoding.top_k;
  gp.validate();
  if (out_dir.empty()) throw ValidationError("config: output directory is empty");
}

RunConfig config_from_json(const json& doc) {
  if (!doc.is_object()) throw ValidationError("config: top level must be an object");
  static const std::set<std::string> sections = {"seed",     "paths",    "model",      "corpus",
                                                 "base",     "oracle",   "lora",       "finetune",
                                                 "rl",       "thresholds", "decoding", "attribution"};
  for (const auto& [key, value] : doc.items()) {
    if (!sections.count(key)) throw ValidationError("config: unknown section '" + key + "'");
  }
  RunConfig cfg;
  cfg.model.vocab_size = Vocabulary::standard().size();
  if (doc.contains("seed")) {
    try {
      cfg.seed = doc.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw ValidationError(std::string("config: seed: ") + e.what());
    }
  }

  Section paths(doc, "paths");
  std::string corpus_dir = cfg.paths.corpus, models_dir = cfg.paths.models, logs_dir = cfg.paths.logs,
              reports_dir = cfg.paths.reports;
  paths.get("corpus", corpus_dir);
  paths.get("models", models_dir);
  paths.get("logs", logs_dir);
  paths.get("reports", reports_dir);
  paths.finish();
  cfg.paths = {corpus_dir, models_dir, logs_dir, reports_dir};

  Section model(doc, "model");
  model.get("vocab_size", cfg.model.vocab_size);
  model.get("d_model", cfg.model.d_model);
  model.get("n_heads", cfg.model.n_heads);
  model.get("n_layers", cfg.model.n_layers);
  model.get("d_ff", cfg.model.d_ff);
  model.get("max_seq_len", cfg.model.max_seq_len);
  model.finish();

  Section corpus(doc, "corpus");
  corpus.get("prompts", cfg.corpus.prompts);
  corpus.get("toxic_density", cfg.corpus.toxic_density);
  corpus.get("rl_fraction", cfg.corpus.rl_fraction);
  corpus.get("instruction_pairs", cfg.corpus.instruction_pairs);
  corpus.get("counter_share", cfg.corpus.counter_share);
  corpus.get("oracle_examples", cfg.corpus.oracle_examples);
  corpus.get("oracle_test_examples", cfg.corpus.oracle_test_examples);
  corpus.finish();

  Section base(doc, "base");
  base.get("epochs", cfg.base.epochs);
  base.get("learning_rate", cfg.base.learning_rate);
  base.get("batch_size", cfg.base.batch_size);
  base.finish();

  Section oracle(doc, "oracle");
  oracle.get("epochs", cfg.oracle.epochs);
  oracle.get("learning_rate", cfg.oracle.learning_rate);
  oracle.finish();

  Section lora(doc, "lora");
  lora.get("rank", cfg.lora.rank);
  lora.get("alpha", cfg.lora.alpha);
  std::vector<std::string> targets;
  for (Projection p : cfg.lora.targets) targets.push_back(projection_name(p));
  lora.get("targets", targets);
  lora.finish();
  cfg.lora.targets.clear();
  for (const auto& t : targets) cfg.lora.targets.push_back(projection_from_name(t));

  Section ft(doc, "finetune");
  std::string mask = loss_mask_name(cfg.finetune.loss_mask);
  ft.get("epochs", cfg.finetune.epochs);
  ft.get("learning_rate", cfg.finetune.learning_rate);
  ft.get("batch_size", cfg.finetune.batch_size);
  ft.get("loss_mask", mask);
  ft.finish();
  cfg.finetune.loss_mask = loss_mask_from_name(mask);

  Section rl(doc, "rl");
  rl.get("episodes", cfg.rl.episodes);
  rl.get("learning_rate", cfg.rl.learning_rate);
  rl.get("kl_coefficient", cfg.rl.kl_coefficient);
  rl.get("baseline_decay", cfg.rl.baseline_decay);
  rl.get("max_new_tokens", cfg.rl.max_new_tokens);
  rl.finish();

  Section th(doc, "thresholds");
  th.get("filter", cfg.thresholds.filter);
  th.get("bucket", cfg.thresholds.bucket);
  th.get("toxic_score", cfg.thresholds.toxic_score);
  th.finish();

  Section dec(doc, "decoding");
  dec.get("max_new_tokens", cfg.decoding.max_new_tokens);
  dec.get("temperature", cfg.decoding.temperature);
  dec.get_optional("top_k", cfg.decoding.top_k);
  dec.finish();

  Section attr(doc, "attribution");
  attr.get("records_per_model", cfg.attribution_records);
  attr.finish();

  cfg.base.seed = cfg.stage_seed("train-base");
  cfg.finetune.seed = cfg.stage_seed("train-ft");
  cfg.rl.seed = cfg.stage_seed("train-rl");
  return cfg;
}

json config_to_json(const RunConfig& cfg) {
  std::vector<std::string> targets;
  for (Projection p : cfg.lora.targets) targets.push_back(projection_name(p));
  return json{
      {"seed", cfg.seed},
      {"paths",
       {{"corpus", cfg.paths.corpus.string()},
        {"models", cfg.paths.models.string()},
        {"logs", cfg.paths.logs.string()},
        {"reports", cfg.paths.reports.string()}}},
      {"model",
       {{"vocab_size", cfg.model.vocab_size},
        {"d_model", cfg.model.d_model},
        {"n_heads", cfg.model.n_heads},
        {"n_layers", cfg.model.n_layers},
        {"d_ff", cfg.model.d_ff},
        {"max_seq_len", cfg.model.max_seq_len}}},
      {"corpus",
       {{"prompts", cfg.corpus.prompts},
        {"toxic_density", cfg.corpus.toxic_density},
        {"rl_fraction", cfg.corpus.rl_fraction},
        {"instruction_pairs", cfg.corpus.instruction_pairs},
        {"counter_share", cfg.corpus.counter_share},
        {"oracle_examples", cfg.corpus.oracle_examples},
        {"oracle_test_examples", cfg.corpus.oracle_test_examples}}},
      {"base",
       {{"epochs", cfg.base.epochs}, {"learning_rate", cfg.base.learning_rate}, {"batch_size", cfg.base.batch_size}}},
      {"oracle", {{"epochs", cfg.oracle.epochs}, {"learning_rate", cfg.oracle.learning_rate}}},
      {"lora", {{"rank", cfg.lora.rank}, {"alpha", cfg.lora.alpha}, {"targets", targets}}},
      {"finetune",
       {{"epochs", cfg.finetune.epochs},
        {"learning_rate", cfg.finetune.learning_rate},
        {"batch_size", cfg.finetune.batch_size},
        {"loss_mask", loss_mask_name(cfg.finetune.loss_mask)}}},
      {"rl",
       {{"episodes", cfg.rl.episodes},
        {"learning_rate", cfg.rl.learning_rate},
        {"kl_coefficient", cfg.rl.kl_coefficient},
        {"baseline_decay", cfg.rl.baseline_decay},
        {"max_new_tokens", cfg.rl.max_new_tokens}}},
      {"thresholds",
       {{"filter", cfg.thresholds.filter},
        {"bucket", cfg.thresholds.bucket},
        {"toxic_score", cfg.thresholds.toxic_score}}},
      {"decoding",
       {{"max_new_tokens", cfg.decoding.max_new_tokens},
        {"temperature", cfg.decoding.temperature},
        {"top_k", cfg.decoding.top_k ? json(*cfg.decoding.top_k) : json(nullptr)}}},
      {"attribution", {{"records_per_model", cfg.attribution_records}}},
  };
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ValidationError("--set expects key=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ValidationError("--set: malformed key '" + key + "'");
    if (!node->is_object()) throw ValidationError("--set: '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config: cannot open " + path.string());
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ValidationError("config: " + path.string() + " is not valid JSON");
  for (const auto& o : overrides) apply_override(doc, o);
  RunConfig cfg = config_from_json(doc);
  cfg.validate();
  return cfg;
}

}  // namespace detox
