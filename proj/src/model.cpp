#include "detox/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "detox/errors.hpp"
#include "detox/rng.hpp"

namespace detox {

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_heads == 0 || n_layers == 0 || d_ff == 0) {
    throw ValidationError("model config: sizes must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ValidationError("model config: d_model " + std::to_string(d_model) +
                          " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (max_seq_len < 2) throw ValidationError("model config: max_seq_len must be >= 2");
}

const char* projection_name(Projection p) {
  switch (p) {
    case Projection::kQuery: return "q";
    case Projection::kKey: return "k";
    case Projection::kValue: return "v";
    case Projection::kOutput: return "o";
  }
  return "?";
}

Projection projection_from_name(const std::string& name) {
  if (name == "q") return Projection::kQuery;
  if (name == "k") return Projection::kKey;
  if (name == "v") return Projection::kValue;
  if (name == "o") return Projection::kOutput;
  throw ValidationError("unknown projection '" + name + "'");
}

Tensor& BlockWeights::projection(Projection p) {
  switch (p) {
    case Projection::kQuery: return wq;
    case Projection::kKey: return wk;
    case Projection::kValue: return wv;
    case Projection::kOutput: return wo;
  }
  return wq;
}

const Tensor& BlockWeights::projection(Projection p) const {
  return const_cast<BlockWeights*>(this)->projection(p);
}

namespace {

Tensor normal_tensor(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

Tensor filled(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

}  // namespace

TransformerWeights TransformerWeights::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  constexpr double kStd = 0.02;
  Rng rng(seed);
  const std::size_t d = config.d_model;
  TransformerWeights w;
  w.config = config;
  w.token_embedding = normal_tensor({config.vocab_size, d}, rng, kStd);
  w.position_embedding = normal_tensor({config.max_seq_len, d}, rng, kStd);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    BlockWeights b;
    b.ln1_gamma = filled({d}, 1.0);
    b.ln1_beta = Tensor({d});
    b.wq = normal_tensor({d, d}, rng, kStd);
    b.bq = Tensor({d});
    b.wk = normal_tensor({d, d}, rng, kStd);
    b.bk = Tensor({d});
    b.wv = normal_tensor({d, d}, rng, kStd);
    b.bv = Tensor({d});
    b.wo = normal_tensor({d, d}, rng, kStd);
    b.bo = Tensor({d});
    b.ln2_gamma = filled({d}, 1.0);
    b.ln2_beta = Tensor({d});
    b.ff_in = normal_tensor({config.d_ff, d}, rng, kStd);
    b.ff_in_bias = Tensor({config.d_ff});
    b.ff_out = normal_tensor({d, config.d_ff}, rng, kStd);
    b.ff_out_bias = Tensor({d});
    w.blocks.push_back(std::move(b));
  }
  w.final_gamma = filled({d}, 1.0);
  w.final_beta = Tensor({d});
  w.head = normal_tensor({config.vocab_size, d}, rng, kStd);
  w.head_bias = Tensor({config.vocab_size});
  return w;
}

std::vector<std::pair<std::string, Tensor>> TransformerWeights::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("token_embedding", token_embedding);
  out.emplace_back("position_embedding", position_embedding);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1_gamma", b.ln1_gamma);
    out.emplace_back(p + "ln1_beta", b.ln1_beta);
    out.emplace_back(p + "wq", b.wq);
    out.emplace_back(p + "bq", b.bq);
    out.emplace_back(p + "wk", b.wk);
    out.emplace_back(p + "bk", b.bk);
    out.emplace_back(p + "wv", b.wv);
    out.emplace_back(p + "bv", b.bv);
    out.emplace_back(p + "wo", b.wo);
    out.emplace_back(p + "bo", b.bo);
    out.emplace_back(p + "ln2_gamma", b.ln2_gamma);
    out.emplace_back(p + "ln2_beta", b.ln2_beta);
    out.emplace_back(p + "ff_in", b.ff_in);
    out.emplace_back(p + "ff_in_bias", b.ff_in_bias);
    out.emplace_back(p + "ff_out", b.ff_out);
    out.emplace_back(p + "ff_out_bias", b.ff_out_bias);
  }
  out.emplace_back("final_gamma", final_gamma);
  out.emplace_back("final_beta", final_beta);
  out.emplace_back("head", head);
  out.emplace_back("head_bias", head_bias);
  return out;
}

std::vector<Tensor> TransformerWeights::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

TransformerWeights TransformerWeights::clone() const {
  TransformerWeights c = *this;
  c.token_embedding = token_embedding.clone();
  c.position_embedding = position_embedding.clone();
  for (auto& b : c.blocks) {
    for (Tensor* t : {&b.ln1_gamma, &b.ln1_beta, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo,
                      &b.bo, &b.ln2_gamma, &b.ln2_beta, &b.ff_in, &b.ff_in_bias, &b.ff_out,
                      &b.ff_out_bias}) {
      *t = t->clone();
    }
  }
  c.final_gamma = final_gamma.clone();
  c.final_beta = final_beta.clone();
  c.head = head.clone();
  c.head_bias = head_bias.clone();
  return c;
}

void TransformerWeights::set_requires_grad(bool value) {
  for (auto& t : parameters()) t.set_requires_grad(value);
}

void TransformerWeights::clear_grads() {
  for (auto& t : parameters()) t.clear_grad();
}

void TransformerWeights::validate() const {
  config.validate();
  const std::size_t d = config.d_model, v = config.vocab_size, f = config.d_ff;
  if (blocks.size() != config.n_layers) {
    throw ShapeError("weights: expected " + std::to_string(config.n_layers) + " blocks, found " +
                     std::to_string(blocks.size()));
  }
  auto expect = [](const Tensor& t, const Shape& s, const std::string& name) {
    if (t.shape() != s) {
      throw ShapeError("weights: " + name + " has shape " + shape_str(t.shape()) + ", expected " +
                       shape_str(s));
    }
    for (double x : t.data()) {
      if (!std::isfinite(x)) throw NumericDomainError("weights: " + name + " has non-finite values");
    }
  };
  expect(token_embedding, {v, d}, "token_embedding");
  expect(position_embedding, {config.max_seq_len, d}, "position_embedding");
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    for (auto [t, name] : {std::pair{&b.ln1_gamma, "ln1_gamma"}, {&b.ln1_beta, "ln1_beta"},
                           {&b.bq, "bq"}, {&b.bk, "bk"}, {&b.bv, "bv"}, {&b.bo, "bo"},
                           {&b.ln2_gamma, "ln2_gamma"}, {&b.ln2_beta, "ln2_beta"},
                           {&b.ff_out_bias, "ff_out_bias"}}) {
      expect(*t, {d}, p + name);
    }
    for (auto [t, name] : {std::pair{&b.wq, "wq"}, {&b.wk, "wk"}, {&b.wv, "wv"}, {&b.wo, "wo"}}) {
      expect(*t, {d, d}, p + name);
    }
    expect(b.ff_in, {f, d}, p + "ff_in");
    expect(b.ff_in_bias, {f}, p + "ff_in_bias");
    expect(b.ff_out, {d, f}, p + "ff_out");
  }
  expect(final_gamma, {d}, "final_gamma");
  expect(final_beta, {d}, "final_beta");
  expect(head, {v, d}, "head");
  expect(head_bias, {v}, "head_bias");
}

// ---- LoRA -------------------------------------------------------------------

LoraAdapter LoraAdapter::init(const ModelConfig& config, const LoraOptions& options,
                              std::uint64_t seed) {
  config.validate();
  if (options.rank == 0) throw ValidationError("lora: rank must be positive");
  if (options.targets.empty()) throw ValidationError("lora: no target projections");
  Rng rng(seed);
  LoraAdapter a;
  a.rank = options.rank;
  a.alpha = options.alpha;
  a.targets = options.targets;
  const std::size_t d = config.d_model;
  const double a_std = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (Projection p : options.targets) {
      LoraSlot s;
      s.block = l;
      s.target = p;
      s.a = normal_tensor({options.rank, d}, rng, a_std);
      s.b = Tensor({d, options.rank});
      a.slots.push_back(std::move(s));
    }
  }
  return a;
}

const LoraSlot* LoraAdapter::find(std::size_t block, Projection target) const {
  for (const auto& s : slots) {
    if (s.block == block && s.target == target) return &s;
  }
  return nullptr;
}

LoraAdapter LoraAdapter::clone() const {
  LoraAdapter c = *this;
  for (auto& s : c.slots) {
    s.a = s.a.clone();
    s.b = s.b.clone();
  }
  return c;
}

std::vector<Tensor> LoraAdapter::parameters() const {
  std::vector<Tensor> out;
  for (const auto& s : slots) {
    out.push_back(s.a);
    out.push_back(s.b);
  }
  return out;
}

void LoraAdapter::set_requires_grad(bool value) {
  for (auto& t : parameters()) t.set_requires_grad(value);
}

void LoraAdapter::clear_grads() {
  for (auto& t : parameters()) t.clear_grad();
}

void LoraAdapter::validate_against(const ModelConfig& config) const {
  if (rank == 0) throw ShapeError("lora: rank must be positive");
  const std::size_t d = config.d_model;
  for (const auto& s : slots) {
    if (s.block >= config.n_layers) {
      throw ShapeError("lora: slot targets block " + std::to_string(s.block) + " but model has " +
                       std::to_string(config.n_layers));
    }
    if (s.a.shape() != Shape{rank, d} || s.b.shape() != Shape{d, rank}) {
      throw ShapeError("lora: slot " + std::to_string(s.block) + "." + projection_name(s.target) +
                       " has A " + shape_str(s.a.shape()) + ", B " + shape_str(s.b.shape()) +
                       " incompatible with rank " + std::to_string(rank) + " and width " +
                       std::to_string(d));
    }
  }
}

// ---- forward ----------------------------------------------------------------

Tensor embed_tokens(Tape& tape, const TransformerWeights& w, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw LengthError("forward: empty token sequence");
  if (tokens.size() > w.config.max_seq_len) {
    throw LengthError("forward: sequence length " + std::to_string(tokens.size()) +
                      " exceeds max_seq_len " + std::to_string(w.config.max_seq_len));
  }
  std::vector<TokenId> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), 0);
  Tensor tok = embedding(tape, w.token_embedding, tokens);
  Tensor pos = embedding(tape, w.position_embedding, positions);
  return add(tape, tok, pos);
}

namespace {

Tensor project(Tape& tape, const BlockWeights& b, std::size_t block, Projection p,
               const LoraAdapter* adapter, const Tensor& x) {
  const Tensor* bias = nullptr;
  switch (p) {
    case Projection::kQuery: bias = &b.bq; break;
    case Projection::kKey: bias = &b.bk; break;
    case Projection::kValue: bias = &b.bv; break;
    case Projection::kOutput: bias = &b.bo; break;
  }
  Tensor y = linear(tape, x, b.projection(p), *bias);
  if (adapter) {
    if (const LoraSlot* s = adapter->find(block, p)) {
      Tensor low = linear(tape, x, s->a);
      Tensor delta = linear(tape, low, s->b);
      y = add(tape, y, scale(tape, delta, adapter->scaling()));
    }
  }
  return y;
}

}  // namespace

Tensor forward_embeddings(Tape& tape, const TransformerWeights& w, const LoraAdapter* adapter,
                          const Tensor& embeddings) {
  if (embeddings.rank() != 2 || embeddings.dim(1) != w.config.d_model) {
    throw ShapeError("forward: embeddings must be [T, d_model], got " + shape_str(embeddings.shape()));
  }
  if (embeddings.dim(0) > w.config.max_seq_len) {
    throw LengthError("forward: sequence length exceeds max_seq_len");
  }
  if (adapter) adapter->validate_against(w.config);
  Tensor x = embeddings;
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const BlockWeights& b = w.blocks[l];
    Tensor h = layer_norm(tape, x, b.ln1_gamma, b.ln1_beta);
    Tensor q = project(tape, b, l, Projection::kQuery, adapter, h);
    Tensor k = project(tape, b, l, Projection::kKey, adapter, h);
    Tensor v = project(tape, b, l, Projection::kValue, adapter, h);
    Tensor att = causal_attention(tape, q, k, v, w.config.n_heads);
    x = add(tape, x, project(tape, b, l, Projection::kOutput, adapter, att));
    Tensor h2 = layer_norm(tape, x, b.ln2_gamma, b.ln2_beta);
    Tensor ff = gelu(tape, linear(tape, h2, b.ff_in, b.ff_in_bias));
    x = add(tape, x, linear(tape, ff, b.ff_out, b.ff_out_bias));
  }
  x = layer_norm(tape, x, w.final_gamma, w.final_beta);
  return linear(tape, x, w.head, w.head_bias);
}

Tensor forward(Tape& tape, const TransformerWeights& w, const LoraAdapter* adapter,
               std::span<const TokenId> tokens) {
  return forward_embeddings(tape, w, adapter, embed_tokens(tape, w, tokens));
}

Tensor lm_loss(Tape& tape, const TransformerWeights& w, const LoraAdapter* adapter,
               std::span<const LossSequence> batch) {
  if (batch.empty()) throw ValidationError("lm_loss: empty batch");
  std::optional<Tensor> total;
  std::size_t count = 0;
  for (const auto& seq : batch) {
    const auto& t = seq.tokens;
    if (t.size() < 2) throw ValidationError("lm_loss: sequences need at least 2 tokens");
    std::vector<TokenId> targets(t.size() - 1, -1);
    for (std::size_t j = std::max<std::size_t>(seq.first_target, 1); j < t.size(); ++j) {
      targets[j - 1] = t[j];
      ++count;
    }
    Tensor logits = forward(tape, w, adapter, std::span(t).first(t.size() - 1));
    Tensor nll = cross_entropy_sum(tape, logits, targets);
    total = total ? add(tape, *total, nll) : nll;
  }
  if (count == 0) throw ValidationError("lm_loss: no scored positions in batch");
  return scale(tape, *total, 1.0 / static_cast<double>(count));
}

double lm_loss(const TransformerWeights& w, const LoraAdapter* adapter,
               const std::vector<std::vector<TokenId>>& batch) {
  std::vector<LossSequence> seqs;
  for (const auto& b : batch) seqs.push_back(LossSequence{b, 1});
  Tape tape(false);
  return lm_loss(tape, w, adapter, seqs).item();
}

// ---- generation ---------------------------------------------------------------

const char* model_tag_name(ModelTag tag) {
  switch (tag) {
    case ModelTag::IT: return "IT";
    case ModelTag::FT: return "FT";
    case ModelTag::RL: return "RL";
  }
  return "?";
}

ModelTag model_tag_from_name(const std::string& name) {
  if (name == "IT") return ModelTag::IT;
  if (name == "FT") return ModelTag::FT;
  if (name == "RL") return ModelTag::RL;
  throw ValidationError("unknown model tag '" + name + "'");
}

void GenerationParams::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ValidationError("generation: temperature must be positive");
  }
  if (max_new_tokens < 1) throw ValidationError("generation: max_new_tokens must be >= 1");
  if (top_k && *top_k == 0) throw ValidationError("generation: top_k must be >= 1");
}

std::vector<TokenId> GenerationRecord::full_sequence() const {
  std::vector<TokenId> s = prompt_ids;
  s.insert(s.end(), completion_ids.begin(), completion_ids.end());
  return s;
}

std::vector<double> sampling_logprobs(std::span<const double> logits, double temperature,
                                      std::optional<std::size_t> top_k) {
  std::vector<double> z(logits.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = logits[i] / temperature;
  if (!top_k || *top_k >= z.size()) return log_softmax_values(z);

  std::vector<std::size_t> order(z.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return z[a] > z[b]; });
  std::vector<double> kept;
  for (std::size_t i = 0; i < *top_k; ++i) kept.push_back(z[order[i]]);
  auto lp = log_softmax_values(kept);
  std::vector<double> out(z.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < *top_k; ++i) out[order[i]] = lp[i];
  return out;
}

namespace {

std::size_t argmax(std::span<const double> xs) {
  return static_cast<std::size_t>(std::max_element(xs.begin(), xs.end()) - xs.begin());
}

std::size_t sample_index(std::span<const double> logprobs, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < logprobs.size(); ++i) {
    if (logprobs[i] == -std::numeric_limits<double>::infinity()) continue;
    cum += std::exp(logprobs[i]);
    last = i;
    if (u < cum) return i;
  }
  return last;
}

}  // namespace

GenerationRecord generate(const TransformerWeights& w, const LoraAdapter* adapter,
                          std::span<const TokenId> prompt, const GenerationParams& params,
                          ModelTag tag) {
  params.validate();
  if (prompt.empty()) throw ValidationError("generate: empty prompt");
  if (prompt.size() + params.max_new_tokens > w.config.max_seq_len) {
    throw LengthError("generate: prompt length " + std::to_string(prompt.size()) + " + " +
                      std::to_string(params.max_new_tokens) + " new tokens exceeds max_seq_len " +
                      std::to_string(w.config.max_seq_len));
  }
  GenerationRecord rec;
  rec.prompt_ids.assign(prompt.begin(), prompt.end());
  rec.model_tag = tag;
  rec.temperature = params.temperature;
  rec.top_k = params.top_k;

  Rng rng(params.seed);
  std::vector<TokenId> seq = rec.prompt_ids;
  const std::size_t vocab = w.config.vocab_size;
  for (std::size_t step = 0; step < params.max_new_tokens; ++step) {
    Tape tape(false);
    Tensor logits = forward(tape, w, adapter, seq);
    auto last = logits.data().subspan((seq.size() - 1) * vocab, vocab);
    auto lp = sampling_logprobs(last, params.temperature, params.top_k);
    const std::size_t tok = params.greedy ? argmax(lp) : sample_index(lp, rng);
    rec.completion_ids.push_back(static_cast<TokenId>(tok));
    rec.step_logprobs.push_back(lp[tok]);
    seq.push_back(static_cast<TokenId>(tok));
    if (params.stop_token && static_cast<TokenId>(tok) == *params.stop_token) break;
  }
  return rec;
}

std::vector<double> teacher_forced_logprobs(const TransformerWeights& w, const LoraAdapter* adapter,
                                            const GenerationRecord& record) {
  std::vector<double> out;
  if (record.completion_ids.empty()) return out;
  const auto seq = record.full_sequence();
  Tape tape(false);
  Tensor logits = forward(tape, w, adapter, std::span(seq).first(seq.size() - 1));
  const std::size_t vocab = w.config.vocab_size;
  const std::size_t p = record.prompt_ids.size();
  for (std::size_t t = 0; t < record.completion_ids.size(); ++t) {
    auto row = logits.data().subspan((p - 1 + t) * vocab, vocab);
    auto lp = sampling_logprobs(row, record.temperature, record.top_k);
    out.push_back(lp[static_cast<std::size_t>(record.completion_ids[t])]);
  }
  return out;
}

// ---- merge --------------------------------------------------------------------

TransformerWeights merge_lora(const TransformerWeights& w, const LoraAdapter& adapter,
                              MergePolicy policy) {
  adapter.validate_against(w.config);
  if (w.merged_adapters > 0 && policy == MergePolicy::kRejectMerged) {
    throw ValidationError("merge_lora: weights already contain a merged adapter");
  }
  TransformerWeights out = w.clone();
  const double s = adapter.scaling();
  const std::size_t d = w.config.d_model, r = adapter.rank;
  for (const auto& slot : adapter.slots) {
    auto m = out.blocks[slot.block].projection(slot.target).data();
    auto a = slot.a.data(), b = slot.b.data();
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double delta = 0.0;
        for (std::size_t k = 0; k < r; ++k) delta += b[i * r + k] * a[k * d + j];
        m[i * d + j] += s * delta;
      }
  }
  ++out.merged_adapters;
  return out;
}

}  // namespace detox
