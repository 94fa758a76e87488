#pragma once

#include <vector>

#include "detox/tensor.hpp"
#include "support.hpp"

namespace detox::testing {

// Reduces any tensor to a scalar with fixed nonuniform weights so gradients
// are not trivially symmetric.
inline Tensor weighted_sum(Tape& tape, const Tensor& y, std::uint64_t seed = 99) {
  const Tensor r = random_tensor(y.shape(), seed);
  return sum(tape, mul(tape, y, r));
}

// One scalar function per differentiable primitive (and per operand).
struct PrimitiveCase {
  const char* name;
  Shape shape;
  ScalarFunction f;
};

inline std::vector<PrimitiveCase> primitive_cases() {
  const Tensor other = random_tensor({3, 4}, 21);
  const Tensor wmat = random_tensor({5, 4}, 22);
  const Tensor bias = random_tensor({5}, 23);
  const Tensor gamma = random_tensor({4}, 24);
  const Tensor beta = random_tensor({4}, 25);
  const Tensor kmat = random_tensor({5, 8}, 26), vmat = random_tensor({5, 8}, 27);
  const std::vector<TokenId> ids = {3, 0, 3, 5};
  const std::vector<std::size_t> rows = {0, 2, 2, 1}, cols = {1, 3, 0, 3};
  const std::vector<TokenId> targets = {1, 3, -1};
  return {
      {"add", {3, 4}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, add(t, x, other)); }},
      {"add_bias", {4}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, add_bias(t, other, x)); }},
      {"mul", {3, 4}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, mul(t, x, other)); }},
      {"scale", {3, 4}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, scale(t, x, -1.7)); }},
      {"dot", {6}, [=](Tape& t, const Tensor& x) { return dot(t, x, scale(t, x, 0.5)); }},
      {"matmul_left", {3, 4}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, matmul(t, x, random_tensor({4, 2}, 28))); }},
      {"matmul_right", {4, 2}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, matmul(t, other, x)); }},
      {"linear_input", {3, 4}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, linear(t, x, wmat, bias)); }},
      {"linear_weight", {5, 4}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, linear(t, other, x, bias)); }},
      {"linear_bias", {5}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, linear(t, other, wmat, x)); }},
      {"gelu", {3, 4}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, gelu(t, x)); }},
      {"layer_norm_input", {3, 4}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, layer_norm(t, x, gamma, beta)); }},
      {"layer_norm_gamma", {4}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, layer_norm(t, other, x, beta)); }},
      {"layer_norm_beta", {4}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, layer_norm(t, other, gamma, x)); }},
      {"embedding", {6, 4}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, embedding(t, x, ids)); }},
      {"softmax_rows", {3, 4}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, softmax(t, x, 1)); }},
      {"softmax_cols", {3, 4}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, softmax(t, x, 0)); }},
      {"log_softmax", {3, 4}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, log_softmax(t, x)); }},
      {"attention_q", {5, 8}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, causal_attention(t, x, kmat, vmat, 2)); }},
      {"attention_k", {5, 8}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, causal_attention(t, kmat, x, vmat, 2)); }},
      {"attention_v", {5, 8}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, causal_attention(t, kmat, vmat, x, 2)); }},
      {"gather", {3, 4}, [=](Tape& t, const Tensor& x) { return weighted_sum(t, gather(t, x, rows, cols)); }},
      {"cross_entropy", {7}, [=](Tape& t, const Tensor& x) { return cross_entropy(t, x, 4); }},
      {"cross_entropy_sum", {3, 5}, [=](Tape& t, const Tensor& x) { return cross_entropy_sum(t, x, targets); }},
  };
}

}  // namespace detox::testing
