#include "detox/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <map>
#include <ostream>
#include <set>

#include <json.hpp>

#include "detox/attribution.hpp"
#include "detox/checkpoint.hpp"
#include "detox/errors.hpp"
#include "detox/format.hpp"
#include "detox/oracle.hpp"
#include "detox/report.hpp"
#include "detox/training.hpp"

namespace detox {

using nlohmann::json;

RunFiles::RunFiles(const RunConfig& cfg) {
  const auto corpus = cfg.corpus_dir(), models = cfg.models_dir(), logs = cfg.logs_dir(),
             reports = cfg.reports_dir();
  dialogues = corpus / "dialogues.jsonl";
  prompts = corpus / "prompts.jsonl";
  instructions = corpus / "instructions.jsonl";
  base_checkpoint = models / "it.json";
  ft_adapter = models / "ft_adapter.json";
  rl_adapter = models / "rl_adapter.json";
  eval_oracle = models / "oracle_eval.json";
  reward_oracle = models / "oracle_reward.json";
  base_log = logs / "base.csv";
  ft_log = logs / "ft.csv";
  rl_log = logs / "rl.csv";
  generations = reports / "generations.jsonl";
  toxicity_table = reports / "toxicity_table.csv";
  evaluation_summary = reports / "evaluation.json";
  oracle_metrics = reports / "oracle_metrics.json";
  attributions = reports / "attributions.jsonl";
  entropy_csv = reports / "entropy.csv";
  entropy_svg = reports / "entropy.svg";
  entropy_contrast = reports / "entropy_contrast.csv";
  keyword_summary = reports / "keywords.json";
}

namespace {

class StageTimer {
 public:
  StageTimer(std::ostream& log, const char* name)
      : log_(log), name_(name), start_(std::chrono::steady_clock::now()) {
    log_ << "[" << name_ << "] start\n";
  }
  ~StageTimer() {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    log_ << "[" << name_ << "] done in " << fixed1(s) << " s\n";
    log_.flush();
  }

 private:
  static std::string fixed1(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", v);
    return buf;
  }
  std::ostream& log_;
  const char* name_;
  std::chrono::steady_clock::time_point start_;
};

void require_files(std::initializer_list<std::filesystem::path> paths, const char* stage) {
  for (const auto& p : paths) {
    if (!std::filesystem::exists(p)) {
      throw ValidationError(std::string(stage) + ": missing input " + p.string() +
                            " (run the earlier stages first)");
    }
  }
}

void write_json(const std::filesystem::path& path, const json& doc) { write_text_file(path, doc.dump(2) + "\n"); }

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

struct LoadedModels {
  TransformerWeights base;
  LoraAdapter ft, rl;
  std::vector<ModelVariant> variants() const {
    return {{ModelTag::IT, &base, nullptr}, {ModelTag::FT, &base, &ft}, {ModelTag::RL, &base, &rl}};
  }
};

LoadedModels load_models(const RunFiles& files) {
  LoadedModels m{load_weights(files.base_checkpoint), {}, {}};
  m.ft = load_adapter(files.ft_adapter, m.base.config);
  m.rl = load_adapter(files.rl_adapter, m.base.config);
  return m;
}

std::vector<PromptRecord> evaluation_pool(const PromptPartition& part) {
  std::vector<PromptRecord> pool;
  std::set<std::string> seen;
  for (const auto& split : part.eval_splits)
    for (const auto& r : split.records)
      if (seen.insert(r.id).second) pool.push_back(r);
  return pool;
}

}  // namespace

PromptPartition partition_prompts(const RunConfig& cfg, const std::vector<PromptRecord>& prompts) {
  const auto n_rl = static_cast<std::size_t>(cfg.corpus.rl_fraction * static_cast<double>(prompts.size()));
  if (n_rl == 0 || n_rl >= prompts.size()) {
    throw ValidationError("prompt partition leaves no RL or no evaluation prompts");
  }
  PromptPartition part;
  part.rl_prompts.assign(prompts.begin(), prompts.begin() + static_cast<std::ptrdiff_t>(n_rl));
  const std::vector<PromptRecord> held(prompts.begin() + static_cast<std::ptrdiff_t>(n_rl), prompts.end());
  auto [p, pc] = filter_challenging(held, cfg.thresholds.filter);
  part.eval_splits = {std::move(p), std::move(pc)};
  return part;
}

void stage_synth(const RunConfig& cfg, std::ostream& log) {
  StageTimer timer(log, "synth");
  const RunFiles files(cfg);
  const auto& vocab = Vocabulary::standard();
  const auto corpus =
      synthesize_detox_corpus(vocab, cfg.stage_seed("synth"), cfg.corpus.prompts, cfg.corpus.toxic_density);
  const auto pairs = synthesize_instruction_corpus(vocab, cfg.stage_seed("synth-instructions"),
                                                   cfg.corpus.instruction_pairs, cfg.corpus.counter_share);
  save_dialogues(files.dialogues, corpus.dialogues);
  save_prompts(files.prompts, corpus.prompts);
  save_instructions(files.instructions, pairs);
  log << "  " << corpus.dialogues.size() << " dialogues, " << corpus.prompts.size() << " prompts, "
      << pairs.size() << " instruction pairs\n";
}

void stage_train_base(const RunConfig& cfg, std::ostream& log) {
  StageTimer timer(log, "train-base");
  const RunFiles files(cfg);
  require_files({files.instructions}, "train-base");
  const auto& vocab = Vocabulary::standard();
  const auto pairs = load_instructions(files.instructions);
  const auto init = TransformerWeights::init(cfg.model, cfg.stage_seed("init-base"));
  auto [weights, tlog] = train_base_model(init, vocab, pairs, cfg.base);
  save_checkpoint(files.base_checkpoint, cfg.model, &weights, nullptr);
  tlog.write_csv(files.base_log);
  const auto losses = tlog.series("epoch_loss");
  if (!losses.empty()) {
    log << "  epoch loss " << format_double(losses.front()) << " -> " << format_double(losses.back()) << "\n";
  }
}

void stage_train_oracle(const RunConfig& cfg, std::ostream& log) {
  StageTimer timer(log, "train-oracle");
  const RunFiles files(cfg);
  const auto& vocab = Vocabulary::standard();
  // Each role gets its own training split.
  const auto eval_train =
      synthesize_toxicity_dataset(vocab, cfg.stage_seed("oracle-data"), cfg.corpus.oracle_examples);
  const auto reward_train =
      synthesize_toxicity_dataset(vocab, cfg.stage_seed("oracle-data-reward"), cfg.corpus.oracle_examples);
  const auto test =
      synthesize_toxicity_dataset(vocab, cfg.stage_seed("oracle-test"), cfg.corpus.oracle_test_examples);
  const auto eval =
      train_oracle(eval_train, vocab.size(), OracleRole::kEval, cfg.stage_seed("oracle-eval"), cfg.oracle);
  const auto rew =
      train_oracle(reward_train, vocab.size(), OracleRole::kReward, cfg.stage_seed("oracle-reward"), cfg.oracle);
  save_oracle(files.eval_oracle, eval);
  save_oracle(files.reward_oracle, rew);
  const double eval_acc = oracle_accuracy(eval, test), reward_acc = oracle_accuracy(rew, test);
  write_json(files.oracle_metrics, json{{"eval_accuracy", eval_acc}, {"reward_accuracy", reward_acc},
                                         {"test_examples", test.size()}});
  log << "  held-out accuracy eval " << format_double(eval_acc) << ", reward " << format_double(reward_acc) << "\n";
}

void stage_train_ft(const RunConfig& cfg, std::ostream& log) {
  StageTimer timer(log, "train-ft");
  const RunFiles files(cfg);
  require_files({files.base_checkpoint, files.dialogues}, "train-ft");
  const auto& vocab = Vocabulary::standard();
  const auto base = load_weights(files.base_checkpoint);
  const auto dialogues = load_dialogues(files.dialogues);
  const auto adapter = LoraAdapter::init(base.config, cfg.lora, cfg.stage_seed("lora-ft"));
  const auto result = finetune_counter_narrative(base, adapter, vocab, dialogues, cfg.finetune);
  save_checkpoint(files.ft_adapter, base.config, nullptr, &result.adapter);
  result.log.write_csv(files.ft_log);
  const auto losses = result.log.series("epoch_loss");
  if (!losses.empty()) {
    log << "  epoch loss " << format_double(losses.front()) << " -> " << format_double(losses.back()) << "\n";
  }
}

void stage_train_rl(const RunConfig& cfg, std::ostream& log) {
  StageTimer timer(log, "train-rl");
  const RunFiles files(cfg);
  require_files({files.base_checkpoint, files.prompts, files.reward_oracle}, "train-rl");
  const auto& vocab = Vocabulary::standard();
  const auto base = load_weights(files.base_checkpoint);
  const auto oracle = load_oracle(files.reward_oracle);
  const auto part = partition_prompts(cfg, load_prompts(files.prompts));
  const auto adapter = LoraAdapter::init(base.config, cfg.lora, cfg.stage_seed("lora-rl"));
  const auto result = rl_detoxify(base, adapter, oracle, vocab, part.rl_prompts, cfg.rl);
  save_checkpoint(files.rl_adapter, base.config, nullptr, &result.adapter);
  result.log.write_csv(files.rl_log);
  const auto rewards = result.log.series("reward");
  const std::size_t window = std::min<std::size_t>(50, rewards.size());
  if (window > 0) {
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < window; ++i) {
      head += rewards[i];
      tail += rewards[rewards.size() - 1 - i];
    }
    log << "  mean reward first " << window << " episodes " << format_double(head / window) << ", last "
        << window << " " << format_double(tail / window) << "\n";
  }
}

void stage_generate(const RunConfig& cfg, std::ostream& log) {
  StageTimer timer(log, "generate");
  const RunFiles files(cfg);
  require_files({files.base_checkpoint, files.ft_adapter, files.rl_adapter, files.eval_oracle, files.prompts},
                "generate");
  const auto models = load_models(files);
  const auto oracle = load_oracle(files.eval_oracle);
  const auto pool = evaluation_pool(partition_prompts(cfg, load_prompts(files.prompts)));
  const auto variants = models.variants();
  const auto gens =
      generate_scored(variants, pool, oracle, Vocabulary::standard(), cfg.decoding, cfg.stage_seed("evaluate"));
  save_generations(files.generations, gens);
  log << "  " << gens.size() << " generations\n";
}

void stage_evaluate(const RunConfig& cfg, std::ostream& log) {
  StageTimer timer(log, "evaluate");
  const RunFiles files(cfg);
  require_files({files.base_checkpoint, files.ft_adapter, files.rl_adapter, files.eval_oracle, files.prompts},
                "evaluate");
  const auto models = load_models(files);
  const auto oracle = load_oracle(files.eval_oracle);
  const auto part = partition_prompts(cfg, load_prompts(files.prompts));
  const auto variants = models.variants();
  const auto result = run_evaluation(variants, part.eval_splits, oracle, Vocabulary::standard(), cfg.decoding,
                                     cfg.stage_seed("evaluate"), cfg.thresholds.toxic_score);
  for (const auto& w : result.warnings) log << "  warning: " << w << "\n";
  save_generations(files.generations, result.generations);
  write_toxicity_table(files.toxicity_table, result.table);

  json splits = json::object();
  for (const auto& split : part.eval_splits) {
    const auto& it = result.table.cell(split.name, ModelTag::IT);
    json entry{{"n", split.records.size()}};
    for (ModelTag tag : {ModelTag::IT, ModelTag::FT, ModelTag::RL}) {
      const auto& c = result.table.cell(split.name, tag);
      entry[model_tag_name(tag)] = optional_json(c.fraction);
      if (tag != ModelTag::IT) {
        std::optional<double> drop;
        if (it.fraction && c.fraction && *it.fraction > 0.0) drop = (*it.fraction - *c.fraction) / *it.fraction;
        entry[std::string(model_tag_name(tag)) + "_relative_drop"] = optional_json(drop);
      }
      log << "  " << split_name(split.name) << " " << model_tag_name(tag) << " "
          << (c.fraction ? format_double(*c.fraction) : std::string("null")) << " (n=" << c.n << ")\n";
    }
    splits[split_name(split.name)] = entry;
  }
  write_json(files.evaluation_summary,
             json{{"toxic_score_threshold", cfg.thresholds.toxic_score}, {"splits", splits},
                  {"warnings", result.warnings}});
}

void stage_attribute(const RunConfig& cfg, std::ostream& log) {
  StageTimer timer(log, "attribute");
  const RunFiles files(cfg);
  require_files({files.base_checkpoint, files.ft_adapter, files.rl_adapter, files.generations, files.prompts},
                "attribute");
  const auto models = load_models(files);
  const auto gens = load_generations(files.generations);
  const auto part = partition_prompts(cfg, load_prompts(files.prompts));

  std::vector<std::string> ids;
  for (const auto& r : part.eval_splits.front().records) {
    if (ids.size() >= cfg.attribution_records) break;
    ids.push_back(r.id);
  }
  std::map<std::pair<std::string, ModelTag>, const ScoredGeneration*> index;
  for (const auto& g : gens) index[{g.record.id, g.record.model_tag}] = &g;

  std::vector<AttributionMatrix> out;
  std::size_t fallback_rows = 0;
  for (const auto& v : models.variants()) {
    for (const auto& id : ids) {
      const auto it = index.find({id, v.tag});
      if (it == index.end()) {
        throw MappingError("attribute: no " + std::string(model_tag_name(v.tag)) + " generation for " + id);
      }
      out.push_back(gradient_saliency(*v.weights, v.adapter, it->second->record));
      fallback_rows += out.back().uniform_fallback_rows.size();
    }
  }
  save_attributions(files.attributions, out);
  log << "  " << out.size() << " attributed generations";
  if (fallback_rows > 0) log << " (" << fallback_rows << " all-zero rows set to uniform)";
  log << "\n";
}

void stage_report(const RunConfig& cfg, std::ostream& log) {
  StageTimer timer(log, "report");
  const RunFiles files(cfg);
  require_files({files.attributions, files.generations, files.prompts}, "report");
  const auto& vocab = Vocabulary::standard();
  const auto attributions = load_attributions(files.attributions);
  const auto gens = load_generations(files.generations);
  std::map<std::string, double> prompt_toxicity;
  for (const auto& p : load_prompts(files.prompts)) prompt_toxicity[p.id] = p.prompt_toxicity;

  std::map<std::string, double> it_toxicity;
  std::map<std::pair<std::string, ModelTag>, const ScoredGeneration*> index;
  for (const auto& g : gens) {
    index[{g.record.id, g.record.model_tag}] = &g;
    if (g.record.model_tag == ModelTag::IT) it_toxicity[g.record.id] = g.toxicity;
  }

  std::vector<EntropyProfile> profiles;
  std::vector<std::vector<ToxicSpan>> spans;
  for (const auto& a : attributions) {
    const auto tox = prompt_toxicity.find(a.record_id);
    profiles.push_back(prompt_entropy_profile(a, tox == prompt_toxicity.end() ? 0.0 : tox->second));
    const auto g = index.find({a.record_id, a.model_tag});
    if (g == index.end()) throw MappingError("report: no generation for attributed record " + a.record_id);
    spans.push_back(locate_toxic_spans(g->second->record, vocab));
  }

  const auto buckets = bucket_and_aggregate(profiles, it_toxicity, cfg.thresholds.bucket);
  emit_entropy_report(buckets, cfg.reports_dir());
  const auto contrasts = entropy_contrasts(profiles, it_toxicity, cfg.thresholds.bucket);
  write_entropy_contrasts(files.entropy_contrast, contrasts);
  for (const auto& c : contrasts) {
    log << "  " << bucket_name(c.bucket) << " bucket " << model_tag_name(c.variant)
        << "-IT mean entropy difference " << format_double(c.difference.mean);
    if (c.difference.ci_low) {
      log << " [" << format_double(*c.difference.ci_low) << ", " << format_double(*c.difference.ci_high) << "]";
    }
    log << " (n=" << c.difference.n << ")\n";
  }

  json keywords{{"records", profiles.size()}};
  std::size_t toxic_steps = 0;
  for (const auto& s : spans) toxic_steps += s.size();
  keywords["toxic_steps"] = toxic_steps;
  try {
    const double r = entropy_keyword_correlation(profiles, spans);
    keywords["entropy_keyword_correlation"] = r;
    log << "  entropy/keyword correlation " << format_double(r) << "\n";
  } catch (const DegenerateStatisticsError& e) {
    keywords["entropy_keyword_correlation"] = nullptr;
    keywords["note"] = e.what();
    log << "  entropy/keyword correlation undefined: " << e.what() << "\n";
  }
  write_json(files.keyword_summary, keywords);
}

void run_pipeline(const RunConfig& cfg, std::ostream& log) {
  stage_synth(cfg, log);
  stage_train_oracle(cfg, log);
  stage_train_base(cfg, log);
  stage_train_ft(cfg, log);
  stage_train_rl(cfg, log);
  stage_evaluate(cfg, log);
  stage_attribute(cfg, log);
  stage_report(cfg, log);
}

}  // namespace detox
