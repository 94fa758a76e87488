#include "detox/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "detox/errors.hpp"
#include "detox/format.hpp"
#include "detox/optim.hpp"
#include "detox/rng.hpp"

namespace detox {

void TrainingLog::add(std::size_t step, std::string metric, double value) {
  if (!entries.empty() && step < entries.back().step) {
    throw ValidationError("training log: step index must be monotone");
  }
  if (!std::isfinite(value)) {
    throw NumericDomainError("training log: non-finite " + metric + " at step " + std::to_string(step));
  }
  entries.push_back({step, std::move(metric), value});
}

std::vector<double> TrainingLog::series(const std::string& metric) const {
  std::vector<double> out;
  for (const auto& e : entries)
    if (e.metric == metric) out.push_back(e.value);
  return out;
}

void TrainingLog::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("training log: cannot write " + path.string());
  out << "step,metric,value\n";
  for (const auto& e : entries) out << e.step << ',' << e.metric << ',' << format_double(e.value) << '\n';
}

namespace {

// Mini-batch epochs over `data` with a seeded shuffle; `train_step` gets each
// batch and returns its loss.
template <typename StepFn>
void run_epochs(std::span<const LossSequence> data, std::size_t epochs, std::size_t batch_size,
                std::uint64_t seed, TrainingLog& log, StepFn train_step) {
  Rng rng(seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      std::vector<LossSequence> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) {
        batch.push_back(data[order[i]]);
      }
      const double loss = train_step(batch, step);
      log.add(step, "loss", loss);
      epoch_loss += loss;
      ++batches;
      ++step;
    }
    log.add(step, "epoch_loss", epoch_loss / static_cast<double>(batches));
  }
}

std::vector<TokenId> framed(const Vocabulary& vocab, std::string_view prompt,
                            std::string_view response, std::size_t& sep_index) {
  std::vector<TokenId> seq = render_prompt(vocab, prompt);
  sep_index = seq.size() - 1;
  auto r = vocab.encode(response);
  seq.insert(seq.end(), r.begin(), r.end());
  seq.push_back(Vocabulary::kEos);
  return seq;
}

}  // namespace

// ---- base model ---------------------------------------------------------------------

std::vector<LossSequence> render_instruction_pairs(const Vocabulary& vocab,
                                                   std::span<const InstructionPair> pairs) {
  std::vector<LossSequence> out;
  for (const auto& p : pairs) {
    std::size_t sep = 0;
    out.push_back({framed(vocab, p.prompt, p.response, sep), 1});
  }
  return out;
}

std::pair<TransformerWeights, TrainingLog> train_base_model(const TransformerWeights& init,
                                                            const Vocabulary& vocab,
                                                            std::span<const InstructionPair> pairs,
                                                            const BaseTrainConfig& cfg) {
  if (pairs.empty()) throw ValidationError("train_base_model: no training pairs");
  TransformerWeights w = init.clone();
  w.set_requires_grad(true);
  Adam opt(w.parameters(), cfg.learning_rate);
  const auto data = render_instruction_pairs(vocab, pairs);
  TrainingLog log;
  run_epochs(data, cfg.epochs, cfg.batch_size, cfg.seed, log,
             [&](std::span<const LossSequence> batch, std::size_t) {
               Tape tape;
               Tensor loss = lm_loss(tape, w, nullptr, batch);
               backward(loss, tape);
               opt.step();
               opt.zero_grad();
               return loss.item();
             });
  w.set_requires_grad(false);
  w.clear_grads();
  return {std::move(w), std::move(log)};
}

// ---- fine-tuning ----------------------------------------------------------------------

void FinetuneConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ValidationError("finetune: learning_rate must be positive");
  if (batch_size == 0) throw ValidationError("finetune: batch_size must be positive");
}

std::vector<LossSequence> render_counter_narrative_pairs(const Vocabulary& vocab,
                                                         std::span<const DialogueRecord> dialogues,
                                                         LossMask mask) {
  std::vector<LossSequence> out;
  for (const auto& d : dialogues) {
    d.validate();
    for (std::size_t i = 0; i + 1 < d.turns.size(); i += 2) {
      std::size_t sep = 0;
      auto seq = framed(vocab, d.turns[i].text, d.turns[i + 1].text, sep);
      out.push_back({std::move(seq), mask == LossMask::kResponseOnly ? sep : 1});
    }
  }
  return out;
}

AdapterResult finetune_counter_narrative(const TransformerWeights& base, const LoraAdapter& adapter,
                                         const Vocabulary& vocab,
                                         std::span<const DialogueRecord> dialogues,
                                         const FinetuneConfig& cfg, const ProbeHook& probe) {
  cfg.validate();
  if (dialogues.empty()) throw ValidationError("finetune: empty dialogue list");
  adapter.validate_against(base.config);
  const TransformerWeights frozen = base.clone();
  LoraAdapter tuned = adapter.clone();
  TrainingLog log;
  if (cfg.epochs == 0) return {std::move(tuned), std::move(log)};

  tuned.set_requires_grad(true);
  Adam opt(tuned.parameters(), cfg.learning_rate);
  const auto data = render_counter_narrative_pairs(vocab, dialogues, cfg.loss_mask);
  run_epochs(data, cfg.epochs, cfg.batch_size, cfg.seed, log,
             [&](std::span<const LossSequence> batch, std::size_t step) {
               Tape tape;
               Tensor loss = lm_loss(tape, frozen, &tuned, batch);
               backward(loss, tape);
               opt.step();
               opt.zero_grad();
               if (probe.evaluate && probe.every > 0 && (step + 1) % probe.every == 0) {
                 log.add(step, "probe_toxicity", probe.evaluate(tuned));
               }
               return loss.item();
             });
  tuned.set_requires_grad(false);
  tuned.clear_grads();
  return {std::move(tuned), std::move(log)};
}

// ---- RL ---------------------------------------------------------------------------------

void RLConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ValidationError("rl: learning_rate must be positive");
  if (!(kl_coefficient >= 0.0)) throw ValidationError("rl: kl_coefficient must be >= 0");
  if (!(baseline_decay >= 0.0 && baseline_decay < 1.0)) {
    throw ValidationError("rl: baseline_decay must lie in [0, 1)");
  }
  if (max_new_tokens < 1) throw ValidationError("rl: max_new_tokens must be >= 1");
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw NumericDomainError("kl_divergence: support size mismatch");
  auto check = [](std::span<const double> d, const char* name) {
    double s = 0.0;
    for (double x : d) {
      if (!(x >= 0.0) || !std::isfinite(x)) {
        throw NumericDomainError(std::string("kl_divergence: ") + name + " has a negative or non-finite entry");
      }
      s += x;
    }
    if (std::abs(s - 1.0) > 1e-9) {
      throw NumericDomainError(std::string("kl_divergence: ") + name + " does not sum to 1");
    }
  };
  check(p, "p");
  check(q, "q");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) throw NumericDomainError("kl_divergence: q is zero where p is positive");
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(kl, 0.0);
}

AdapterResult rl_detoxify(const TransformerWeights& base, const LoraAdapter& adapter,
                          const OracleModel& reward_oracle, const Vocabulary& vocab,
                          std::span<const PromptRecord> prompts, const RLConfig& cfg,
                          const ProbeHook& probe) {
  cfg.validate();
  if (reward_oracle.role != OracleRole::kReward) {
    throw RoleMisuseError("rl_detoxify: the evaluation oracle must not be used as a training reward");
  }
  if (prompts.empty()) throw ValidationError("rl_detoxify: empty prompt list");
  adapter.validate_against(base.config);

  const TransformerWeights frozen = base.clone();
  LoraAdapter policy = adapter.clone();
  policy.set_requires_grad(true);
  Adam opt(policy.parameters(), cfg.learning_rate);
  TrainingLog log;

  std::vector<std::vector<TokenId>> rendered;
  for (const auto& p : prompts) rendered.push_back(render_prompt(vocab, p.prompt));

  Rng rng(derive_seed(cfg.seed, 0));
  std::optional<double> baseline;
  const std::size_t vocab_size = base.config.vocab_size;
  for (std::size_t ep = 0; ep < cfg.episodes; ++ep) {
    const auto& prompt = rendered[rng.below(rendered.size())];
    GenerationParams gp;
    gp.max_new_tokens = cfg.max_new_tokens;
    gp.temperature = 1.0;
    gp.seed = derive_seed(cfg.seed, ep + 1);
    gp.stop_token = Vocabulary::kEos;
    const GenerationRecord rec = generate(frozen, &policy, prompt, gp);

    const auto seq = rec.full_sequence();
    const auto inputs = std::span(seq).first(seq.size() - 1);
    const std::size_t p = prompt.size(), m = rec.completion_ids.size();

    Tape tape;
    Tensor logits = forward(tape, frozen, &policy, inputs);
    Tensor logp = log_softmax(tape, logits);
    std::vector<std::size_t> rows(m), cols(m);
    for (std::size_t t = 0; t < m; ++t) {
      rows[t] = p - 1 + t;
      cols[t] = static_cast<std::size_t>(rec.completion_ids[t]);
    }
    Tensor logp_sum = sum(tape, gather(tape, logp, rows, cols));

    Tape no_grad(false);
    const Tensor ref_logits = forward(no_grad, frozen, nullptr, inputs);
    double kl_sum = 0.0;
    for (std::size_t t = 0; t < m; ++t) {
      const auto pol = softmax_values(logits.data().subspan(rows[t] * vocab_size, vocab_size));
      const auto ref = softmax_values(ref_logits.data().subspan(rows[t] * vocab_size, vocab_size));
      kl_sum += kl_divergence(pol, ref);
    }

    const double r = reward(reward_oracle, content_tokens(vocab, rec.completion_ids));
    const double ret = r - cfg.kl_coefficient * kl_sum;
    if (!baseline) baseline = ret;
    const double advantage = ret - *baseline;
    if (!std::isfinite(advantage)) {
      throw TrainingError("rl_detoxify: non-finite advantage at episode " + std::to_string(ep) +
                          " (reward " + format_double(r) + ", kl " + format_double(kl_sum) + ")");
    }
    *baseline = cfg.baseline_decay * *baseline + (1.0 - cfg.baseline_decay) * ret;

    backward(scale(tape, logp_sum, -advantage), tape);
    const double gnorm = opt.grad_norm();
    opt.step();
    opt.zero_grad();

    log.add(ep, "reward", r);
    log.add(ep, "kl", kl_sum);
    log.add(ep, "advantage", advantage);
    log.add(ep, "grad_norm", gnorm);
    if (probe.evaluate && probe.every > 0 && (ep + 1) % probe.every == 0) {
      log.add(ep, "probe_toxicity", probe.evaluate(policy));
    }
  }
  policy.set_requires_grad(false);
  policy.clear_grads();
  return {std::move(policy), std::move(log)};
}

}  // namespace detox
