#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "detox/attribution.hpp"
#include "detox/errors.hpp"
#include "support.hpp"

using namespace detox;
using namespace detox::testing;

namespace {

GenerationRecord sample_record(const TransformerWeights& w, const LoraAdapter* adapter, std::uint64_t seed,
                               std::size_t prompt_len = 4, std::size_t new_tokens = 6,
                               std::optional<std::size_t> top_k = std::nullopt, double temperature = 1.0) {
  GenerationParams p;
  p.seed = seed;
  p.max_new_tokens = new_tokens;
  p.top_k = top_k;
  p.temperature = temperature;
  auto rec = generate(w, adapter, random_tokens(prompt_len, w.config.vocab_size, seed + 1000), p);
  rec.id = "rec-" + std::to_string(seed);
  return rec;
}

// Log-prob of the sampled token at `step`, evaluated from scratch for the
// given input embeddings.
double target_logprob(const TransformerWeights& w, const LoraAdapter* adapter, const GenerationRecord& rec,
                      const Tensor& embeddings, std::size_t step) {
  Tape tape(false);
  const Tensor logits = forward_embeddings(tape, w, adapter, embeddings);
  const std::size_t v = w.config.vocab_size, row = rec.prompt_ids.size() - 1 + step;
  const auto lp = sampling_logprobs(logits.data().subspan(row * v, v), rec.temperature, rec.top_k);
  return lp[static_cast<std::size_t>(rec.completion_ids[step])];
}

EntropyProfile profile(const std::string& id, ModelTag tag, std::vector<double> h) {
  EntropyProfile p;
  p.record_id = id;
  p.model_tag = tag;
  p.prompt_len = 5;
  p.entropy = std::move(h);
  return p;
}

}  // namespace

TEST(Saliency, RowsAreNormalizedOnManyGenerations) {
  const ModelConfig c = tiny_config();
  const auto w = rough_weights(c, 1);
  const auto adapter = random_adapter(c, 2);
  std::size_t checked = 0;
  for (std::uint64_t i = 0; i < 60; ++i) {
    const auto rec = sample_record(w, i % 2 ? &adapter : nullptr, i, 2 + i % 5, 3 + i % 6,
                                   i % 3 == 0 ? std::optional<std::size_t>(5) : std::nullopt, i % 4 ? 1.0 : 0.8);
    const auto attr = gradient_saliency(w, i % 2 ? &adapter : nullptr, rec);
    EXPECT_NO_THROW(attr.validate(1e-9));
    ASSERT_EQ(attr.rows.size(), rec.completion_ids.size());
    for (std::size_t t = 0; t < attr.rows.size(); ++t) {
      EXPECT_EQ(attr.rows[t].size(), rec.prompt_ids.size() + t);
      double s = 0.0;
      for (double x : attr.rows[t]) s += x;
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
    ++checked;
  }
  EXPECT_GE(checked, 50u);
}

TEST(Saliency, FutureTokensGetExactlyZeroGradient) {
  const ModelConfig c = tiny_config();
  const auto w = rough_weights(c, 3);
  const auto adapter = random_adapter(c, 4);
  for (std::uint64_t i = 0; i < 10; ++i) {
    const auto rec = sample_record(w, &adapter, 50 + i, 3, 7);
    const std::size_t p = rec.prompt_ids.size(), d = c.d_model;
    for (std::size_t t = 0; t < rec.completion_ids.size(); ++t) {
      const Tensor g = embedding_gradient(w, &adapter, rec, t);
      ASSERT_EQ(g.dim(0), p + rec.completion_ids.size() - 1);
      for (std::size_t row = p + t; row < g.dim(0); ++row)
        for (std::size_t k = 0; k < d; ++k) EXPECT_EQ(g[row * d + k], 0.0);
      double visible = 0.0;
      for (std::size_t k = 0; k < (p + t) * d; ++k) visible += std::abs(g[k]);
      EXPECT_GT(visible, 0.0);
    }
  }
}

TEST(Saliency, MatchesFiniteDifferencesOfEmbeddings) {
  const ModelConfig c = tiny_config();
  const auto w = rough_weights(c, 5);
  const auto adapter = random_adapter(c, 6);
  const auto rec = sample_record(w, &adapter, 7, 5, 8, std::size_t{6}, 0.9);
  const auto seq = rec.full_sequence();
  Tape plain(false);
  const Tensor emb = embed_tokens(plain, w, std::span(seq).first(seq.size() - 1)).clone();
  const std::size_t d = c.d_model, p = rec.prompt_ids.size();
  const double eps = 1e-4;

  Rng rng(8);
  for (int pick = 0; pick < 5; ++pick) {
    const std::size_t t = rng.below(rec.completion_ids.size());
    const std::size_t i = rng.below(p + t);
    const Tensor g = embedding_gradient(w, &adapter, rec, t);
    double fd_norm_sq = 0.0, an_norm_sq = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      Tensor plus = emb.clone(), minus = emb.clone();
      plus[i * d + k] += eps;
      minus[i * d + k] -= eps;
      const double fd =
          (target_logprob(w, &adapter, rec, plus, t) - target_logprob(w, &adapter, rec, minus, t)) / (2 * eps);
      const double an = g[i * d + k];
      EXPECT_LT(std::abs(an - fd), 1e-3 * std::max(std::abs(fd), 1e-6)) << "step " << t << " token " << i;
      fd_norm_sq += fd * fd;
      an_norm_sq += an * an;
    }
    const auto attr = gradient_saliency(w, &adapter, rec);
    double raw_total = 0.0;
    for (std::size_t j = 0; j < p + t; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += g[j * d + k] * g[j * d + k];
      raw_total += std::sqrt(s);
    }
    EXPECT_NEAR(attr.rows[t][i] * raw_total, std::sqrt(an_norm_sq), 1e-12);
    EXPECT_LT(std::abs(std::sqrt(an_norm_sq) - std::sqrt(fd_norm_sq)), 1e-3 * std::sqrt(fd_norm_sq));
  }
}

TEST(Saliency, StaleRecordIsRejected) {
  const ModelConfig c = tiny_config();
  const auto w = rough_weights(c, 9);
  auto rec = sample_record(w, nullptr, 10);
  rec.step_logprobs[2] += 1e-5;
  EXPECT_THROW(gradient_saliency(w, nullptr, rec), StalenessError);
  const auto other = rough_weights(c, 11);
  EXPECT_THROW(gradient_saliency(other, nullptr, sample_record(w, nullptr, 10)), StalenessError);
}

TEST(Saliency, DoesNotTouchModelGradients) {
  const ModelConfig c = tiny_config();
  const auto w = rough_weights(c, 12);
  const auto before = w.clone();
  gradient_saliency(w, nullptr, sample_record(w, nullptr, 13));
  EXPECT_TRUE(bit_equal(w, before));
  for (const auto& t : w.parameters()) EXPECT_FALSE(t.has_grad());
}

TEST(Normalize, UniformFallbackAndErrors) {
  bool fell_back = false;
  const auto u = normalize_scores(std::vector<double>{0, 0, 0, 0}, &fell_back);
  EXPECT_TRUE(fell_back);
  for (double x : u) EXPECT_EQ(x, 0.25);
  EXPECT_THROW(normalize_scores(std::vector<double>{1, -1}), ValidationError);
  EXPECT_THROW(normalize_scores(std::vector<double>{1, NAN}), ValidationError);
  EXPECT_THROW(normalize_scores(std::vector<double>{}), ValidationError);
}

TEST(Normalize, ScaleInvariance) {
  Rng rng(14);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> s(1 + rng.below(20));
    for (auto& x : s) x = rng.bernoulli(0.2) ? 0.0 : rng.uniform() * 10;
    const auto base = normalize_scores(s);
    // Powers of two scale exactly.
    auto pow2 = s;
    for (auto& x : pow2) x *= 8.0;
    EXPECT_EQ(normalize_scores(pow2), base);
    const double c = 1e-3 + rng.uniform() * 1e3;
    auto scaled = s;
    for (auto& x : scaled) x *= c;
    const auto row = normalize_scores(scaled);
    for (std::size_t i = 0; i < row.size(); ++i) EXPECT_NEAR(row[i], base[i], 1e-15);
    EXPECT_EQ(std::max_element(row.begin(), row.end()) - row.begin(),
              std::max_element(base.begin(), base.end()) - base.begin());
    EXPECT_NEAR(shannon_entropy(row), shannon_entropy(base), 1e-14);
  }
}

TEST(Entropy, ReferenceValues) {
  EXPECT_NEAR(shannon_entropy(std::vector<double>(8, 0.125)), std::log(8.0), 1e-12);
  EXPECT_NEAR(shannon_entropy(std::vector<double>(8, 0.125)), 2.0794415416798357, 1e-12);
  EXPECT_EQ(shannon_entropy(std::vector<double>{0, 1, 0}), 0.0);
  EXPECT_NEAR(shannon_entropy(std::vector<double>{0.5, 0.5, 0, 0}), 0.6931471805599453, 1e-15);
  for (std::size_t n = 1; n <= 64; ++n)
    EXPECT_NEAR(shannon_entropy(std::vector<double>(n, 1.0 / static_cast<double>(n))),
                std::log(static_cast<double>(n)), 1e-12);
}

TEST(Entropy, ProfileRestrictsToPromptAndRenormalizes) {
  AttributionMatrix attr;
  attr.record_id = "x";
  attr.prompt_len = 4;
  attr.rows = {{0.25, 0.25, 0.25, 0.25},
               {0.2, 0.2, 0.0, 0.0, 0.6},
               {0.0, 0.0, 0.0, 0.1, 0.5, 0.4},
               {0.0, 0.0, 0.0, 0.0, 0.5, 0.3, 0.2}};
  const auto prof = prompt_entropy_profile(attr, 0.7);
  ASSERT_EQ(prof.entropy.size(), 4u);
  EXPECT_NEAR(prof.entropy[0], std::log(4.0), 1e-12);
  EXPECT_NEAR(prof.entropy[1], std::log(2.0), 1e-12);
  EXPECT_EQ(prof.entropy[2], 0.0);
  EXPECT_NEAR(prof.entropy[3], std::log(4.0), 1e-12);  // uniform fallback
  EXPECT_EQ(prof.prompt_toxicity, 0.7);
  attr.prompt_len = 0;
  EXPECT_THROW(prompt_entropy_profile(attr), ValidationError);
}

TEST(Entropy, BoundsHoldOnGeneratedProfiles) {
  const ModelConfig c = tiny_config();
  const auto w = rough_weights(c, 15);
  for (std::uint64_t i = 0; i < 30; ++i) {
    const auto rec = sample_record(w, nullptr, 200 + i, 1 + i % 6, 8);
    const auto prof = prompt_entropy_profile(gradient_saliency(w, nullptr, rec));
    for (double h : prof.entropy) {
      EXPECT_GE(h, 0.0);
      EXPECT_LE(h, std::log(static_cast<double>(rec.prompt_ids.size())) + 1e-12);
    }
  }
}

TEST(AttributionMatrix, ValidateCatchesViolations) {
  AttributionMatrix a;
  a.prompt_len = 2;
  a.rows = {{0.5, 0.5}, {0.2, 0.3, 0.5}};
  EXPECT_NO_THROW(a.validate());
  a.rows[1] = {0.5, 0.5};
  EXPECT_THROW(a.validate(), ValidationError);
  a.rows[1] = {0.2, 0.3, 0.6};
  EXPECT_THROW(a.validate(), ValidationError);
  a.rows[1] = {-0.2, 0.7, 0.5};
  EXPECT_THROW(a.validate(), ValidationError);
}

TEST(Buckets, SingleProfileHasNoInterval) {
  const std::vector<EntropyProfile> ps = {profile("a", ModelTag::FT, {0.5, 0.7})};
  const auto b = bucket_and_aggregate(ps, {{"a", 0.9}});
  ASSERT_EQ(b.size(), 1u);
  const auto& steps = b.at({ModelTag::FT, Bucket::kToxic});
  ASSERT_EQ(steps.size(), 2u);
  EXPECT_EQ(steps[0].mean, 0.5);
  EXPECT_EQ(steps[1].mean, 0.7);
  EXPECT_EQ(steps[0].n, 1u);
  EXPECT_FALSE(steps[0].ci_low.has_value());
  EXPECT_FALSE(steps[0].ci_high.has_value());
}

TEST(Buckets, IdenticalProfilesHaveZeroWidth) {
  const std::vector<EntropyProfile> ps = {profile("a", ModelTag::IT, {0.3, 0.4}),
                                          profile("b", ModelTag::IT, {0.3, 0.4})};
  const auto b = bucket_and_aggregate(ps, {{"a", 0.1}, {"b", 0.2}});
  for (const auto& s : b.at({ModelTag::IT, Bucket::kNontoxic})) {
    EXPECT_EQ(s.n, 2u);
    EXPECT_EQ(*s.ci_low, s.mean);
    EXPECT_EQ(*s.ci_high, s.mean);
  }
}

TEST(Buckets, ThresholdIsInclusiveAndMissingIdsFail) {
  const std::vector<EntropyProfile> ps = {profile("a", ModelTag::RL, {1.0}), profile("b", ModelTag::RL, {2.0})};
  const auto b = bucket_and_aggregate(ps, {{"a", 0.66}, {"b", 0.6599}});
  EXPECT_EQ(b.at({ModelTag::RL, Bucket::kToxic})[0].mean, 1.0);
  EXPECT_EQ(b.at({ModelTag::RL, Bucket::kNontoxic})[0].mean, 2.0);
  EXPECT_THROW(bucket_and_aggregate(ps, {{"a", 0.7}}), MappingError);
  EXPECT_THROW(bucket_and_aggregate(ps, {{"a", 0.7}, {"b", 0.1}}, 1.5), ValidationError);
}

// Brute-force reaggregation: each (tag, bucket, step) cell recomputed by a
// full scan over the profiles.
TEST(Buckets, MatchBruteForceOracle) {
  Rng rng(16);
  std::vector<EntropyProfile> ps;
  std::map<std::string, double> tox;
  for (int i = 0; i < 100; ++i) {
    const std::string id = "r" + std::to_string(i % 40);
    tox[id] = rng.uniform();
    std::vector<double> h(1 + rng.below(12));
    for (auto& x : h) x = rng.uniform() * 2;
    ps.push_back(profile(id, static_cast<ModelTag>(i % 3), h));
  }
  const auto agg = bucket_and_aggregate(ps, tox, 0.66);
  std::size_t cells = 0;
  for (const auto tag : {ModelTag::IT, ModelTag::FT, ModelTag::RL}) {
    for (const auto bucket : {Bucket::kToxic, Bucket::kNontoxic}) {
      for (std::size_t t = 0; t < 12; ++t) {
        std::vector<double> xs;
        for (const auto& p : ps) {
          const bool toxic = tox.at(p.record_id) >= 0.66;
          if (p.model_tag == tag && toxic == (bucket == Bucket::kToxic) && t < p.entropy.size())
            xs.push_back(p.entropy[t]);
        }
        const auto it = agg.find({tag, bucket});
        if (xs.empty()) {
          EXPECT_TRUE(it == agg.end() || t >= it->second.size());
          continue;
        }
        ASSERT_NE(it, agg.end());
        ASSERT_LT(t, it->second.size());
        const auto& cell = it->second[t];
        double mean = 0.0;
        for (double x : xs) mean += x;
        mean /= static_cast<double>(xs.size());
        EXPECT_EQ(cell.n, xs.size());
        EXPECT_NEAR(cell.mean, mean, 1e-9);
        if (xs.size() >= 2) {
          double ss = 0.0;
          for (double x : xs) ss += (x - mean) * (x - mean);
          const double half = 1.96 * std::sqrt(ss / static_cast<double>(xs.size() - 1)) /
                              std::sqrt(static_cast<double>(xs.size()));
          EXPECT_NEAR(*cell.ci_low, mean - half, 1e-9);
          EXPECT_NEAR(*cell.ci_high, mean + half, 1e-9);
        }
        ++cells;
      }
    }
  }
  EXPECT_GT(cells, 30u);
}

TEST(ToxicSpans, Examples) {
  const auto& v = Vocabulary::standard();
  GenerationRecord rec;
  rec.completion_ids = {v.benign()[0], v.benign()[3], v.counter()[0]};
  EXPECT_TRUE(locate_toxic_spans(rec, v).empty());
  rec.completion_ids = {v.benign()[0], v.toxic()[2], v.benign()[1], v.toxic()[5]};
  const std::vector<ToxicSpan> expected = {{1, v.toxic()[2]}, {3, v.toxic()[5]}};
  EXPECT_EQ(locate_toxic_spans(rec, v), expected);
}

TEST(ToxicSpans, AgreeWithStringScan) {
  const auto& v = Vocabulary::standard();
  std::set<std::string> toxic_words;
  for (TokenId t : v.toxic()) toxic_words.insert(v.word(t));
  Rng rng(17);
  for (int i = 0; i < 1000; ++i) {
    GenerationRecord rec;
    const std::size_t n = rng.below(25);
    for (std::size_t k = 0; k < n; ++k) rec.completion_ids.push_back(static_cast<TokenId>(rng.below(v.size())));
    std::istringstream words(v.decode(rec.completion_ids));
    std::vector<std::size_t> scan;
    std::string word;
    for (std::size_t k = 0; words >> word; ++k)
      if (toxic_words.count(word)) scan.push_back(k);
    std::vector<std::size_t> found;
    for (const auto& s : locate_toxic_spans(rec, v)) found.push_back(s.step);
    EXPECT_EQ(found, scan);
  }
}

TEST(Correlation, ConstantEntropyIsDegenerate) {
  const std::vector<EntropyProfile> ps = {profile("a", ModelTag::IT, {1.0, 1.0, 1.0})};
  const std::vector<std::vector<ToxicSpan>> spans = {{{1, 50}}};
  EXPECT_THROW(entropy_keyword_correlation(ps, spans), DegenerateStatisticsError);
  const std::vector<std::vector<ToxicSpan>> none = {{}};
  const std::vector<EntropyProfile> varied = {profile("a", ModelTag::IT, {1.0, 2.0, 1.5})};
  EXPECT_THROW(entropy_keyword_correlation(varied, none), DegenerateStatisticsError);
}

TEST(Correlation, LowerEntropyAtToxicStepsIsNegative) {
  const std::vector<EntropyProfile> ps = {profile("a", ModelTag::IT, {1.2, 0.3, 1.1, 0.2}),
                                          profile("b", ModelTag::IT, {0.4, 1.5, 1.3})};
  const std::vector<std::vector<ToxicSpan>> spans = {{{1, 60}, {3, 61}}, {{0, 62}}};
  EXPECT_LT(entropy_keyword_correlation(ps, spans), 0.0);
  const std::vector<std::vector<ToxicSpan>> flipped = {{{0, 60}, {2, 61}}, {{1, 62}, {2, 63}}};
  EXPECT_GT(entropy_keyword_correlation(ps, flipped), 0.0);
}

TEST(Correlation, IndicatorWithItselfIsOne) {
  const std::vector<double> x = {0, 1, 1, 0, 0, 1};
  EXPECT_DOUBLE_EQ(pearson_correlation(x, x), 1.0);
  const std::vector<EntropyProfile> ps = {profile("a", ModelTag::IT, {0, 1, 1}), profile("b", ModelTag::IT, {0, 0, 1})};
  const std::vector<std::vector<ToxicSpan>> spans = {{{1, 60}, {2, 60}}, {{2, 60}}};
  EXPECT_DOUBLE_EQ(entropy_keyword_correlation(ps, spans), 1.0);
  EXPECT_THROW(pearson_correlation(std::vector<double>{1}, std::vector<double>{2}), DegenerateStatisticsError);
}
