#include "detox/oracle.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "detox/errors.hpp"
#include "detox/rng.hpp"

namespace detox {

using nlohmann::json;

const char* oracle_role_name(OracleRole role) {
  return role == OracleRole::kReward ? "reward" : "eval";
}

OracleRole oracle_role_from_name(const std::string& name) {
  if (name == "reward") return OracleRole::kReward;
  if (name == "eval") return OracleRole::kEval;
  throw ValidationError("unknown oracle role '" + name + "'");
}

std::vector<LabeledExample> synthesize_toxicity_dataset(const Vocabulary& vocab, std::uint64_t seed,
                                                        std::size_t n) {
  Rng rng(derive_seed(seed, 4));
  std::vector<TokenId> clean(vocab.benign().begin(), vocab.benign().end());
  clean.insert(clean.end(), vocab.counter().begin(), vocab.counter().end());
  std::vector<LabeledExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double density = rng.uniform();
    const std::size_t len = 4 + rng.below(9);
    LabeledExample ex;
    std::size_t toxic = 0;
    for (std::size_t k = 0; k < len; ++k) {
      if (rng.bernoulli(density)) {
        ex.tokens.push_back(vocab.toxic()[rng.below(vocab.toxic().size())]);
        ++toxic;
      } else {
        ex.tokens.push_back(clean[rng.below(clean.size())]);
      }
    }
    ex.label = 2 * toxic >= len ? 1 : 0;
    out.push_back(std::move(ex));
  }
  return out;
}

namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double logit(const OracleModel& m, std::span<const TokenId> tokens) {
  double s = 0.0;
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= m.weights.size()) {
      throw IndexError("oracle: token id " + std::to_string(t) + " out of range [0, " +
                       std::to_string(m.weights.size()) + ")");
    }
    s += m.weights[static_cast<std::size_t>(t)];
  }
  return m.bias + s / static_cast<double>(tokens.size());
}

}  // namespace

OracleModel train_oracle(std::span<const LabeledExample> dataset, std::size_t vocab_size,
                         OracleRole role, std::uint64_t seed, const OracleTrainOptions& options) {
  bool has_pos = false, has_neg = false;
  for (const auto& ex : dataset) {
    if (ex.tokens.empty()) throw TrainingError("train_oracle: empty example");
    (ex.label == 1 ? has_pos : has_neg) = true;
  }
  if (!has_pos || !has_neg) throw TrainingError("train_oracle: dataset must contain both labels");

  OracleModel m;
  m.role = role;
  m.seed = seed;
  m.weights.assign(vocab_size, 0.0);
  Rng rng(seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t idx : order) {
      const auto& ex = dataset[idx];
      const double g = sigmoid(logit(m, ex.tokens)) - static_cast<double>(ex.label);
      const double step = options.learning_rate * g;
      m.bias -= step;
      const double per_token = step / static_cast<double>(ex.tokens.size());
      for (TokenId t : ex.tokens) m.weights[static_cast<std::size_t>(t)] -= per_token;
    }
  }
  return m;
}

double oracle_accuracy(const OracleModel& oracle, std::span<const LabeledExample> dataset) {
  if (dataset.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& ex : dataset) {
    const int pred = score(oracle, ex.tokens).value >= 0.5 ? 1 : 0;
    if (pred == ex.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

ToxicityScore score(const OracleModel& oracle, std::span<const TokenId> tokens) {
  const ScoreSource src =
      oracle.role == OracleRole::kReward ? ScoreSource::kOracleReward : ScoreSource::kOracleEval;
  if (tokens.empty()) return {0.0, src};
  return {sigmoid(logit(oracle, tokens)), src};
}

double reward(const OracleModel& oracle, std::span<const TokenId> completion) {
  if (oracle.role != OracleRole::kReward) {
    throw RoleMisuseError("reward: the evaluation oracle must not be used as a training reward");
  }
  return 1.0 - 2.0 * score(oracle, completion).value;
}

void save_oracle(const std::filesystem::path& path, const OracleModel& oracle) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("oracle: cannot write " + path.string());
  json j{{"role", oracle_role_name(oracle.role)},
         {"seed", oracle.seed},
         {"bias", oracle.bias},
         {"weights", oracle.weights}};
  out << j.dump() << '\n';
}

OracleModel load_oracle(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("oracle: cannot open " + path.string());
  try {
    json j = json::parse(in);
    OracleModel m;
    m.role = oracle_role_from_name(j.at("role").get<std::string>());
    m.seed = j.at("seed").get<std::uint64_t>();
    m.bias = j.at("bias").get<double>();
    m.weights = j.at("weights").get<std::vector<double>>();
    return m;
  } catch (const json::exception& e) {
    throw ValidationError("oracle: " + path.string() + ": " + e.what());
  }
}

}  // namespace detox
