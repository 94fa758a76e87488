#include "detox/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "detox/errors.hpp"
#include "detox/format.hpp"

namespace detox {

namespace {

// Differentiable log-prob of the sampled token at one step under the record's
// sampling transform (temperature, then top-k restriction).
Tensor step_logprob(Tape& tape, const Tensor& logits, std::size_t row, TokenId token,
                    double temperature, std::optional<std::size_t> top_k) {
  const std::size_t vocab = logits.dim(1);
  const auto row_values = logits.data().subspan(row * vocab, vocab);
  const auto masked = sampling_logprobs(row_values, temperature, top_k);
  std::vector<std::size_t> kept;
  std::size_t token_slot = 0;
  for (std::size_t j = 0; j < vocab; ++j) {
    if (!std::isfinite(masked[j])) continue;
    if (static_cast<TokenId>(j) == token) token_slot = kept.size();
    kept.push_back(j);
  }
  if (!std::isfinite(masked[static_cast<std::size_t>(token)])) {
    throw StalenessError("attribution: sampled token lies outside the top-k set under teacher forcing");
  }
  const std::vector<std::size_t> rows(kept.size(), row);
  Tensor lp = log_softmax(tape, scale(tape, gather(tape, logits, rows, kept), 1.0 / temperature));
  std::vector<double> pick(kept.size(), 0.0);
  pick[token_slot] = 1.0;
  return dot(tape, lp, Tensor::vector(std::move(pick)));
}

struct SaliencyGraph {
  Tape tape;
  Tensor embeddings;
  Tensor logits;
};

void build_graph(SaliencyGraph& g, const TransformerWeights& w, const LoraAdapter* adapter,
                 std::span<const TokenId> inputs) {
  Tape plain(false);
  g.embeddings = embed_tokens(plain, w, inputs).clone();
  g.embeddings.set_requires_grad(true);
  g.logits = forward_embeddings(g.tape, w, adapter, g.embeddings);
}

void check_record(const GenerationRecord& record) {
  if (record.prompt_ids.empty()) throw ValidationError("attribution: empty prompt");
  if (record.completion_ids.empty()) throw ValidationError("attribution: empty completion");
  if (record.step_logprobs.size() != record.completion_ids.size()) {
    throw ValidationError("attribution: step_logprobs and completion_ids differ in length");
  }
}

}  // namespace

void AttributionMatrix::validate(double tol) const {
  if (prompt_len < 1) throw ValidationError("attribution matrix: prompt_len must be >= 1");
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (rows[t].size() != prompt_len + t) {
      throw ValidationError("attribution matrix: row " + std::to_string(t) + " has " +
                            std::to_string(rows[t].size()) + " entries, expected " +
                            std::to_string(prompt_len + t));
    }
    double s = 0.0;
    for (double v : rows[t]) {
      if (!(v >= 0.0)) throw ValidationError("attribution matrix: negative or NaN score");
      s += v;
    }
    if (std::abs(s - 1.0) > tol) {
      throw ValidationError("attribution matrix: row " + std::to_string(t) + " sums to " + format_double(s));
    }
  }
}

Tensor embedding_gradient(const TransformerWeights& w, const LoraAdapter* adapter,
                          const GenerationRecord& record, std::size_t step) {
  check_record(record);
  if (step >= record.completion_ids.size()) throw IndexError("embedding_gradient: step out of range");
  const TransformerWeights frozen = w.clone();
  const std::optional<LoraAdapter> frozen_adapter =
      adapter ? std::optional<LoraAdapter>(adapter->clone()) : std::nullopt;
  const auto seq = record.full_sequence();
  SaliencyGraph g;
  build_graph(g, frozen, frozen_adapter ? &*frozen_adapter : nullptr,
              std::span(seq).first(seq.size() - 1));
  const std::size_t row = record.prompt_ids.size() - 1 + step;
  Tensor lp = step_logprob(g.tape, g.logits, row, record.completion_ids[step], record.temperature,
                           record.top_k);
  backward(lp, g.tape);
  return Tensor(g.embeddings.shape(), std::vector<double>(g.embeddings.grad().begin(), g.embeddings.grad().end()));
}

AttributionMatrix gradient_saliency(const TransformerWeights& w, const LoraAdapter* adapter,
                                    const GenerationRecord& record) {
  check_record(record);
  const TransformerWeights frozen = w.clone();
  const std::optional<LoraAdapter> frozen_adapter =
      adapter ? std::optional<LoraAdapter>(adapter->clone()) : std::nullopt;
  const auto seq = record.full_sequence();
  SaliencyGraph g;
  build_graph(g, frozen, frozen_adapter ? &*frozen_adapter : nullptr,
              std::span(seq).first(seq.size() - 1));

  const std::size_t p = record.prompt_ids.size();
  const std::size_t d = frozen.config.d_model;
  AttributionMatrix attr;
  attr.record_id = record.id;
  attr.model_tag = record.model_tag;
  attr.prompt_len = p;
  for (std::size_t t = 0; t < record.completion_ids.size(); ++t) {
    Tensor lp = step_logprob(g.tape, g.logits, p - 1 + t, record.completion_ids[t], record.temperature,
                             record.top_k);
    if (std::abs(lp.item() - record.step_logprobs[t]) > 1e-6) {
      throw StalenessError("attribution: record " + record.id + " step " + std::to_string(t) +
                           " log-prob " + format_double(record.step_logprobs[t]) +
                           " is not reproduced by teacher forcing (" + format_double(lp.item()) + ")");
    }
    g.embeddings.zero_grad();
    backward(lp, g.tape);
    const auto grad = g.embeddings.grad();
    std::vector<double> raw(p + t, 0.0);
    for (std::size_t i = 0; i < p + t; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += grad[i * d + k] * grad[i * d + k];
      raw[i] = std::sqrt(s);
    }
    bool fell_back = false;
    attr.rows.push_back(normalize_scores(raw, &fell_back));
    if (fell_back) attr.uniform_fallback_rows.push_back(t);
  }
  return attr;
}

std::vector<double> normalize_scores(std::span<const double> scores, bool* fell_back) {
  if (scores.empty()) throw ValidationError("normalize_scores: empty score vector");
  double total = 0.0;
  for (double s : scores) {
    if (!(s >= 0.0) || !std::isfinite(s)) {
      throw ValidationError("normalize_scores: scores must be finite and nonnegative");
    }
    total += s;
  }
  if (fell_back) *fell_back = total == 0.0;
  std::vector<double> out(scores.size());
  if (total == 0.0) {
    std::fill(out.begin(), out.end(), 1.0 / static_cast<double>(scores.size()));
  } else {
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] / total;
  }
  return out;
}

double shannon_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p) {
    if (x < 0.0) throw ValidationError("shannon_entropy: negative probability");
    if (x > 0.0) h -= x * std::log(x);
  }
  return std::max(h, 0.0);
}

EntropyProfile prompt_entropy_profile(const AttributionMatrix& attr, double prompt_toxicity) {
  if (attr.prompt_len < 1) throw ValidationError("prompt_entropy_profile: prompt_len must be >= 1");
  EntropyProfile profile;
  profile.record_id = attr.record_id;
  profile.model_tag = attr.model_tag;
  profile.prompt_len = attr.prompt_len;
  profile.prompt_toxicity = prompt_toxicity;
  for (const auto& row : attr.rows) {
    if (row.size() < attr.prompt_len) {
      throw ValidationError("prompt_entropy_profile: row shorter than the prompt");
    }
    const auto slice = normalize_scores(std::span(row).first(attr.prompt_len));
    profile.entropy.push_back(shannon_entropy(slice));
  }
  return profile;
}

const char* bucket_name(Bucket b) { return b == Bucket::kToxic ? "toxic" : "nontoxic"; }

BucketStep summarize(std::span<const double> values) {
  if (values.empty()) throw ValidationError("summarize: no values");
  BucketStep out;
  out.n = values.size();
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(out.n);
  if (out.n >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    const double sd = std::sqrt(ss / static_cast<double>(out.n - 1));
    const double half = 1.96 * sd / std::sqrt(static_cast<double>(out.n));
    out.ci_low = out.mean - half;
    out.ci_high = out.mean + half;
  }
  return out;
}

BucketedProfiles bucket_and_aggregate(std::span<const EntropyProfile> profiles,
                                      const std::map<std::string, double>& it_toxicity_by_id,
                                      double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) {
    throw ValidationError("bucket_and_aggregate: threshold must lie in [0, 1]");
  }
  std::map<BucketKey, std::vector<std::vector<double>>> samples;
  for (const auto& p : profiles) {
    const auto it = it_toxicity_by_id.find(p.record_id);
    if (it == it_toxicity_by_id.end()) {
      throw MappingError("bucket_and_aggregate: no IT toxicity for record " + p.record_id);
    }
    const Bucket b = it->second >= threshold ? Bucket::kToxic : Bucket::kNontoxic;
    auto& steps = samples[{p.model_tag, b}];
    if (steps.size() < p.entropy.size()) steps.resize(p.entropy.size());
    for (std::size_t t = 0; t < p.entropy.size(); ++t) steps[t].push_back(p.entropy[t]);
  }
  BucketedProfiles out;
  for (const auto& [key, steps] : samples) {
    auto& agg = out[key];
    for (const auto& values : steps) agg.push_back(summarize(values));
  }
  return out;
}

std::vector<ToxicSpan> locate_toxic_spans(const GenerationRecord& record, const Vocabulary& vocab) {
  std::vector<ToxicSpan> out;
  for (std::size_t t = 0; t < record.completion_ids.size(); ++t) {
    if (vocab.is_toxic(record.completion_ids[t])) out.push_back({t, record.completion_ids[t]});
  }
  return out;
}

double pearson_correlation(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ValidationError("pearson_correlation: length mismatch");
  if (x.size() < 2) throw DegenerateStatisticsError("pearson_correlation: need at least two samples");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw DegenerateStatisticsError("pearson_correlation: first variable is constant");
  if (syy == 0.0) throw DegenerateStatisticsError("pearson_correlation: second variable is constant");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double entropy_keyword_correlation(std::span<const EntropyProfile> profiles,
                                   std::span<const std::vector<ToxicSpan>> spans) {
  if (profiles.size() != spans.size()) {
    throw ValidationError("entropy_keyword_correlation: profiles and spans differ in length");
  }
  std::vector<double> indicator, entropy;
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    std::vector<double> toxic(profiles[i].entropy.size(), 0.0);
    for (const auto& s : spans[i]) {
      if (s.step >= toxic.size()) {
        throw ValidationError("entropy_keyword_correlation: span step beyond profile length");
      }
      toxic[s.step] = 1.0;
    }
    indicator.insert(indicator.end(), toxic.begin(), toxic.end());
    entropy.insert(entropy.end(), profiles[i].entropy.begin(), profiles[i].entropy.end());
  }
  return pearson_correlation(indicator, entropy);
}

}  // namespace detox
