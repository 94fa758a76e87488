#pragma once

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "detox/model.hpp"
#include "detox/rng.hpp"
#include "detox/tensor.hpp"

namespace detox::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal(0.0, sd);
  return Tensor(std::move(shape), std::move(v));
}

// Small model for gradient checks.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 11;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 16;
  c.max_seq_len = 16;
  return c;
}

// Addresses of every parameter tensor, in named_parameters() order.
inline std::vector<Tensor*> parameter_slots(TransformerWeights& w) {
  std::vector<Tensor*> out = {&w.token_embedding, &w.position_embedding};
  for (auto& b : w.blocks) {
    for (Tensor* t : {&b.ln1_gamma, &b.ln1_beta, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo,
                      &b.ln2_gamma, &b.ln2_beta, &b.ff_in, &b.ff_in_bias, &b.ff_out, &b.ff_out_bias}) {
      out.push_back(t);
    }
  }
  for (Tensor* t : {&w.final_gamma, &w.final_beta, &w.head, &w.head_bias}) out.push_back(t);
  return out;
}

// Weights with O(0.3) entries everywhere, so gradients are far from round-off.
inline TransformerWeights rough_weights(const ModelConfig& config, std::uint64_t seed) {
  TransformerWeights w = TransformerWeights::init(config, seed);
  Rng rng(seed + 1);
  for (Tensor* t : parameter_slots(w)) {
    for (double& x : t->data()) x += rng.normal(0.0, 0.3);
  }
  return w;
}

// Random adapter with nonzero B.
inline LoraAdapter random_adapter(const ModelConfig& config, std::uint64_t seed, double b_sd = 0.3) {
  LoraAdapter a = LoraAdapter::init(config, {}, seed);
  Rng rng(seed + 7);
  for (auto& slot : a.slots)
    for (double& x : slot.b.data()) x = rng.normal(0.0, b_sd);
  return a;
}

inline std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = static_cast<TokenId>(rng.below(vocab));
  return out;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (std::memcmp(&a.data()[i], &b.data()[i], sizeof(double)) != 0) return false;
  }
  return true;
}

inline bool bit_equal(const TransformerWeights& a, const TransformerWeights& b) {
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i].first != pb[i].first || !bit_equal(pa[i].second, pb[i].second)) return false;
  return true;
}

}  // namespace detox::testing
