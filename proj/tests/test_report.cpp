#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "detox/config.hpp"
#include "detox/errors.hpp"
#include "detox/pipeline.hpp"
#include "detox/report.hpp"
#include "support.hpp"

using namespace detox;
using namespace detox::testing;
namespace fs = std::filesystem;

namespace {

const Vocabulary& vocab() { return Vocabulary::standard(); }

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "detox_report_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(DETOX_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = vocab().size();
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 1;
  c.d_ff = 32;
  c.max_seq_len = 48;
  return c;
}

const OracleModel& eval_oracle() {
  static const OracleModel m =
      train_oracle(synthesize_toxicity_dataset(vocab(), 5, 600), vocab().size(), OracleRole::kEval, 6, {0.1, 40});
  return m;
}

BucketedProfiles sample_buckets() {
  BucketedProfiles b;
  b[{ModelTag::IT, Bucket::kToxic}] = {{0.5, 0.4, 0.6, 3}, {0.7, 0.55, 0.85, 3}, {0.9, std::nullopt, std::nullopt, 1}};
  b[{ModelTag::FT, Bucket::kToxic}] = {{0.8, 0.7, 0.9, 2}, {1.0 / 3.0, 0.1, 0.5666, 2}};
  b[{ModelTag::RL, Bucket::kNontoxic}] = {{1.25, 1.0, 1.5, 4}};
  return b;
}

}  // namespace

TEST(ToxicFraction, CountsScoresAtThreshold) {
  EXPECT_EQ(toxic_fraction(std::vector<double>{0.7, 0.3, 0.55, 0.1}, 0.5), 0.5);
  EXPECT_EQ(toxic_fraction(std::vector<double>{0.5}, 0.5), 1.0);
  EXPECT_FALSE(toxic_fraction(std::vector<double>{}, 0.5).has_value());
}

TEST(Evaluation, SamePromptsAndSeedsAcrossTagsAndRecount) {
  const auto c = small_config();
  const auto w = rough_weights(c, 1);
  const auto zero = LoraAdapter::init(c, {}, 2);
  const auto other = random_adapter(c, 3, 0.5);
  const std::vector<ModelVariant> models = {{ModelTag::IT, &w, nullptr},
                                            {ModelTag::FT, &w, &zero},
                                            {ModelTag::RL, &w, &other}};
  const auto prompts = synthesize_detox_corpus(vocab(), 4, 60, 0.7).prompts;
  const auto [p, pc] = filter_challenging(prompts);
  ASSERT_FALSE(pc.records.empty());
  const std::vector<DatasetSplit> splits = {p, pc};
  DecodingOptions dec;
  dec.max_new_tokens = 10;
  const auto result = run_evaluation(models, splits, eval_oracle(), vocab(), dec, 77);
  EXPECT_TRUE(result.warnings.empty());
  ASSERT_EQ(result.generations.size(), 3 * p.records.size());

  for (std::size_t i = 0; i < p.records.size(); ++i) {
    const auto& it = result.generations[3 * i];
    const auto& ft = result.generations[3 * i + 1];
    const auto& rl = result.generations[3 * i + 2];
    EXPECT_EQ(it.record.id, p.records[i].id);
    EXPECT_EQ(ft.record.id, it.record.id);
    EXPECT_EQ(rl.record.id, it.record.id);
    EXPECT_EQ(rl.record.prompt_ids, it.record.prompt_ids);
    EXPECT_EQ(it.record.model_tag, ModelTag::IT);
    EXPECT_EQ(rl.record.model_tag, ModelTag::RL);
    // A zero adapter with the same seed must reproduce IT exactly.
    EXPECT_EQ(ft.record.completion_ids, it.record.completion_ids);
  }

  for (const auto& split : splits) {
    for (const auto tag : {ModelTag::IT, ModelTag::FT, ModelTag::RL}) {
      std::size_t hits = 0;
      for (const auto& r : split.records)
        for (const auto& g : result.generations)
          if (g.record.id == r.id && g.record.model_tag == tag && g.toxicity >= 0.5) ++hits;
      const auto& cell = result.table.cell(split.name, tag);
      EXPECT_EQ(cell.n, split.records.size());
      EXPECT_DOUBLE_EQ(*cell.fraction, static_cast<double>(hits) / static_cast<double>(split.records.size()));
    }
  }
}

TEST(Evaluation, EmptySplitIsNullWithWarning) {
  const auto c = small_config();
  const auto w = rough_weights(c, 1);
  const std::vector<ModelVariant> models = {{ModelTag::IT, &w, nullptr}};
  const std::vector<DatasetSplit> splits = {{SplitName::kPromptGe05, {}}};
  const auto result = run_evaluation(models, splits, eval_oracle(), vocab(), DecodingOptions{}, 1);
  ASSERT_EQ(result.warnings.size(), 1u);
  EXPECT_FALSE(result.table.cell(SplitName::kPromptGe05, ModelTag::IT).fraction.has_value());
  const auto path = fresh_dir("empty-split") / "toxicity_table.csv";
  write_toxicity_table(path, result.table);
  EXPECT_EQ(read_file(path), "split,model_tag,fraction,n\nP>=0.5,IT,,0\n");
}

TEST(Evaluation, RewardOracleIsRejected) {
  OracleModel reward = eval_oracle();
  reward.role = OracleRole::kReward;
  const auto w = rough_weights(small_config(), 1);
  const std::vector<ModelVariant> models = {{ModelTag::IT, &w, nullptr}};
  EXPECT_THROW(run_evaluation(models, {}, reward, vocab(), DecodingOptions{}, 1), RoleMisuseError);
}

TEST(Generations, JsonlRoundTrip) {
  const auto c = small_config();
  const auto w = rough_weights(c, 8);
  const std::vector<ModelVariant> models = {{ModelTag::IT, &w, nullptr}};
  const auto prompts = synthesize_detox_corpus(vocab(), 9, 5, 0.5).prompts;
  const auto gens = generate_scored(models, prompts, eval_oracle(), vocab(), DecodingOptions{}, 3);
  const auto path = fresh_dir("gens") / "generations.jsonl";
  save_generations(path, gens);
  const auto loaded = load_generations(path);
  ASSERT_EQ(loaded.size(), gens.size());
  for (std::size_t i = 0; i < gens.size(); ++i) {
    EXPECT_EQ(loaded[i].record.id, gens[i].record.id);
    EXPECT_EQ(loaded[i].record.completion_ids, gens[i].record.completion_ids);
    EXPECT_EQ(loaded[i].record.step_logprobs, gens[i].record.step_logprobs);
    EXPECT_EQ(loaded[i].completion, gens[i].completion);
    EXPECT_EQ(loaded[i].toxicity, gens[i].toxicity);
  }
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  const auto j = nlohmann::json::parse(line);
  for (const char* key : {"id", "model_tag", "prompt", "completion", "toxicity"}) EXPECT_TRUE(j.contains(key));
}

TEST(Attributions, JsonlRoundTrip) {
  AttributionMatrix a;
  a.record_id = "x";
  a.model_tag = ModelTag::RL;
  a.prompt_len = 2;
  a.rows = {{0.1, 0.9}, {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0}};
  const auto path = fresh_dir("attr") / "attributions.jsonl";
  save_attributions(path, std::vector<AttributionMatrix>{a});
  const auto back = load_attributions(path);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].rows, a.rows);
  EXPECT_EQ(back[0].model_tag, ModelTag::RL);
  EXPECT_EQ(back[0].prompt_len, 2u);
}

TEST(EntropyReport, OneBucketThreeSteps) {
  BucketedProfiles b;
  b[{ModelTag::IT, Bucket::kToxic}] = {{0.1, std::nullopt, std::nullopt, 1}, {0.2, 0.1, 0.3, 2}, {0.3, 0.2, 0.4, 2}};
  const std::string csv = entropy_csv(b);
  std::istringstream in(csv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "step,model_tag,bucket,mean_entropy,ci_low,ci_high,n");
  EXPECT_EQ(lines[1], "0,IT,toxic,0.1,,,1");
  EXPECT_EQ(lines[2], "1,IT,toxic,0.2,0.1,0.3,2");
}

TEST(EntropyReport, DeterministicBytes) {
  const auto a = fresh_dir("det-a"), b = fresh_dir("det-b");
  emit_entropy_report(sample_buckets(), a);
  emit_entropy_report(sample_buckets(), b);
  EXPECT_EQ(read_file(a / "entropy.csv"), read_file(b / "entropy.csv"));
  EXPECT_EQ(read_file(a / "entropy.svg"), read_file(b / "entropy.svg"));
  const std::string svg = read_file(a / "entropy.svg");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  EXPECT_NE(svg.find("<polyline"), std::string::npos);
  EXPECT_NE(svg.find("<polygon"), std::string::npos);
  EXPECT_THROW(emit_entropy_report({}, a), ValidationError);
}

TEST(EntropyReport, CsvRoundTripMatchesBuckets) {
  const auto buckets = sample_buckets();
  std::istringstream in(entropy_csv(buckets));
  std::string line;
  std::getline(in, line);
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.push_back("");
    ASSERT_EQ(f.size(), 7u) << line;
    const auto tag = model_tag_from_name(f[1]);
    const auto bucket = f[2] == "toxic" ? Bucket::kToxic : Bucket::kNontoxic;
    const auto& s = buckets.at({tag, bucket}).at(std::stoul(f[0]));
    EXPECT_NEAR(std::stod(f[3]), s.mean, 1e-9);
    if (s.ci_low) {
      EXPECT_NEAR(std::stod(f[4]), *s.ci_low, 1e-9);
      EXPECT_NEAR(std::stod(f[5]), *s.ci_high, 1e-9);
    } else {
      EXPECT_TRUE(f[4].empty() && f[5].empty());
    }
    EXPECT_EQ(std::stoul(f[6]), s.n);
    ++rows;
  }
  EXPECT_EQ(rows, 6u);
}

TEST(EntropyReport, UnwritableDirectoryIsIoError) {
  const auto dir = fresh_dir("blocked");
  write_text_file(dir / "file", "x");
  EXPECT_THROW(emit_entropy_report(sample_buckets(), dir / "file" / "sub"), IoError);
}

TEST(Contrasts, PairedDifferencesPerBucket) {
  auto prof = [](const std::string& id, ModelTag tag, std::vector<double> h) {
    EntropyProfile p;
    p.record_id = id;
    p.model_tag = tag;
    p.prompt_len = 3;
    p.entropy = std::move(h);
    return p;
  };
  const std::vector<EntropyProfile> ps = {prof("a", ModelTag::IT, {1.0, 1.0}), prof("a", ModelTag::FT, {1.5, 1.5}),
                                          prof("b", ModelTag::IT, {0.5, 0.7}), prof("b", ModelTag::FT, {1.0, 1.0}),
                                          prof("c", ModelTag::IT, {0.2}),      prof("c", ModelTag::RL, {0.1})};
  const auto rows = entropy_contrasts(ps, {{"a", 0.9}, {"b", 0.8}, {"c", 0.1}}, 0.66);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].bucket, Bucket::kToxic);
  EXPECT_EQ(rows[0].variant, ModelTag::FT);
  EXPECT_NEAR(rows[0].difference.mean, 0.45, 1e-15);
  EXPECT_EQ(rows[0].difference.n, 2u);
  EXPECT_EQ(rows[1].bucket, Bucket::kNontoxic);
  EXPECT_EQ(rows[1].variant, ModelTag::RL);
  EXPECT_NEAR(rows[1].difference.mean, -0.1, 1e-15);
}

TEST(Config, DefaultsAndOverrides) {
  const auto cfg = load_run_config(fs::path(DETOX_SOURCE_DIR) / "configs" / "desk.json",
                                   {"seed=21", "rl.episodes=40", "decoding.top_k=5", "thresholds.bucket=0.7"});
  EXPECT_EQ(cfg.seed, 21u);
  EXPECT_EQ(cfg.rl.episodes, 40u);
  EXPECT_EQ(cfg.decoding.top_k, std::optional<std::size_t>(5));
  EXPECT_EQ(cfg.thresholds.bucket, 0.7);
  EXPECT_EQ(cfg.thresholds.filter, 0.5);
  EXPECT_EQ(cfg.model.vocab_size, vocab().size());
  EXPECT_NE(cfg.stage_seed("synth"), cfg.stage_seed("evaluate"));
  EXPECT_EQ(cfg.rl.seed, cfg.stage_seed("train-rl"));
  const auto again = config_from_json(config_to_json(cfg));
  EXPECT_EQ(config_to_json(again), config_to_json(cfg));
}

TEST(Config, RejectsBadValues) {
  nlohmann::json doc = config_to_json(RunConfig{});
  apply_override(doc, "thresholds.filter=1.5");
  EXPECT_THROW(config_from_json(doc).validate(), ValidationError);
  doc = config_to_json(RunConfig{});
  apply_override(doc, "rl.unknown_key=3");
  EXPECT_THROW(config_from_json(doc), ValidationError);
  doc = config_to_json(RunConfig{});
  apply_override(doc, "finetune.loss_mask=full_sequence");
  EXPECT_EQ(config_from_json(doc).finetune.loss_mask, LossMask::kFullSequence);
  EXPECT_THROW(apply_override(doc, "no-equals-sign"), ValidationError);
  EXPECT_THROW(load_run_config("/nonexistent/config.json", {}), ValidationError);
}

TEST(Cli, NoArgumentsPrintsUsageAndFails) {
  const auto log = fresh_dir("cli-noargs") / "log.txt";
  EXPECT_EQ(run_cli("", log), 1);
  EXPECT_NE(read_file(log).find("pipeline"), std::string::npos);
}

TEST(Cli, UnknownSubcommandOrFlagFails) {
  const auto log = fresh_dir("cli-unknown") / "log.txt";
  EXPECT_EQ(run_cli("frobnicate", log), 1);
  EXPECT_EQ(run_cli("synth --bogus", log), 1);
  EXPECT_EQ(run_cli("synth", log), 1);  // --config is required
}

TEST(Cli, EvaluateWithMissingCheckpointFailsBeforeGenerating) {
  const auto out = fresh_dir("cli-missing");
  const std::string config = (fs::path(DETOX_SOURCE_DIR) / "configs" / "desk.json").string();
  EXPECT_EQ(run_cli("evaluate --config " + config + " --out " + out.string(), out / "log.txt"), 1);
  EXPECT_NE(read_file(out / "log.txt").find("missing"), std::string::npos) << read_file(out / "log.txt");
  EXPECT_FALSE(fs::exists(out / "generations.jsonl"));
  EXPECT_FALSE(fs::exists(out / "toxicity_table.csv"));
}

TEST(Cli, BadOverrideIsValidationError) {
  const auto out = fresh_dir("cli-override");
  const std::string config = (fs::path(DETOX_SOURCE_DIR) / "configs" / "desk.json").string();
  EXPECT_EQ(run_cli("synth --config " + config + " --out " + out.string() + " --set thresholds.bucket=2",
                    out / "log.txt"),
            1);
}

TEST(Cli, SynthIsSeedDeterministic) {
  const auto a = fresh_dir("cli-synth-a"), b = fresh_dir("cli-synth-b"), c = fresh_dir("cli-synth-c");
  const std::string config = (fs::path(DETOX_SOURCE_DIR) / "configs" / "desk.json").string();
  ASSERT_EQ(run_cli("synth --config " + config + " --seed 5 --out " + a.string(), a / "log.txt"), 0);
  ASSERT_EQ(run_cli("synth --config " + config + " --seed 5 --out " + b.string(), b / "log.txt"), 0);
  ASSERT_EQ(run_cli("synth --config " + config + " --seed 6 --out " + c.string(), c / "log.txt"), 0);
  EXPECT_EQ(read_file(a / "corpus" / "prompts.jsonl"), read_file(b / "corpus" / "prompts.jsonl"));
  EXPECT_NE(read_file(a / "corpus" / "prompts.jsonl"), read_file(c / "corpus" / "prompts.jsonl"));
}
