#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "detox/corpus.hpp"
#include "detox/model.hpp"

namespace detox {

// Row t holds normalized saliency over the prompt plus the first t generated
// tokens (prompt_len + t entries).
struct AttributionMatrix {
  std::string record_id;
  ModelTag model_tag = ModelTag::IT;
  std::size_t prompt_len = 0;
  std::vector<std::vector<double>> rows;
  // Rows whose raw scores were all zero and fell back to uniform.
  std::vector<std::size_t> uniform_fallback_rows;

  // Throws ValidationError on ragged-shape or normalization violations.
  void validate(double tol = 1e-9) const;
};

// Gradient of log p(sampled token at step t) with respect to the embedding of
// every input position of the teacher-forced sequence, [seq_len - 1, d_model].
// Rows at positions >= prompt_len + t are zero by causality.
Tensor embedding_gradient(const TransformerWeights& w, const LoraAdapter* adapter,
                          const GenerationRecord& record, std::size_t step);

// L2 norm per input token of the embedding gradient, normalized per row.
// Throws StalenessError when teacher forcing does not reproduce the record's
// log-probs within 1e-6.
AttributionMatrix gradient_saliency(const TransformerWeights& w, const LoraAdapter* adapter,
                                    const GenerationRecord& record);

// s / sum(s); uniform when the sum is zero. Scores must be nonnegative.
std::vector<double> normalize_scores(std::span<const double> scores, bool* fell_back = nullptr);

// -sum p ln p in nats, 0 ln 0 = 0.
double shannon_entropy(std::span<const double> p);

struct EntropyProfile {
  std::string record_id;
  ModelTag model_tag = ModelTag::IT;
  std::size_t prompt_len = 0;
  double prompt_toxicity = 0.0;
  std::vector<double> entropy;  // H_t per generated step
};

// Entropy of each row restricted to the prompt tokens and renormalized.
EntropyProfile prompt_entropy_profile(const AttributionMatrix& attr, double prompt_toxicity = 0.0);

enum class Bucket { kToxic, kNontoxic };

const char* bucket_name(Bucket b);

struct BucketStep {
  double mean = 0.0;
  std::optional<double> ci_low, ci_high;  // only when n >= 2
  std::size_t n = 0;
};

using BucketKey = std::pair<ModelTag, Bucket>;
// (tag, bucket) -> per-step aggregates.
using BucketedProfiles = std::map<BucketKey, std::vector<BucketStep>>;

// Buckets by the IT completion toxicity of each profile's record (>= threshold
// is toxic). Throws MappingError for ids missing from the map.
BucketedProfiles bucket_and_aggregate(std::span<const EntropyProfile> profiles,
                                      const std::map<std::string, double>& it_toxicity_by_id,
                                      double threshold = 0.66);

// Mean with normal-approximation 95% interval.
BucketStep summarize(std::span<const double> values);

struct ToxicSpan {
  std::size_t step = 0;
  TokenId token = 0;
  bool operator==(const ToxicSpan&) const = default;
};

std::vector<ToxicSpan> locate_toxic_spans(const GenerationRecord& record, const Vocabulary& vocab);

// Pearson correlation; DegenerateStatisticsError when either side is constant.
double pearson_correlation(std::span<const double> x, std::span<const double> y);

// Point-biserial correlation between "toxic token emitted at step t" and H_t,
// pooled over records. profiles[i] and spans[i] describe the same record.
double entropy_keyword_correlation(std::span<const EntropyProfile> profiles,
                                   std::span<const std::vector<ToxicSpan>> spans);

}  // namespace detox
