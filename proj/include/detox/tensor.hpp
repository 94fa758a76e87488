#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace detox {

using Shape = std::vector<std::size_t>;
using TokenId = std::int32_t;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of doubles with an optional gradient buffer.
//
// Tensor is a handle: copies share storage, which is what lets the tape refer
// back to its operands. Use clone() for an independent copy.
class Tensor {
 public:
  Tensor();  // scalar zero
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);

  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<double> data();
  std::span<const double> data() const;
  double& operator[](std::size_t i) { return data()[i]; }
  double operator[](std::size_t i) const { return data()[i]; }
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);

  bool has_grad() const;
  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  // Allocates a zero buffer on first use. Const because Tensor is a handle.
  std::span<double> grad_buffer() const;
  void zero_grad();
  void clear_grad();

  Tensor clone() const;  // deep copy of data, detached, no grad
  bool shares_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

// Ordered record of differentiable operations. Entries are appended as ops
// execute, so every entry's inputs precede it. A non-recording tape turns
// every op into plain evaluation.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const { return recording_; }
  std::size_t size() const { return entries_.size(); }

  // True when `out` should be tracked given these operands.
  bool wants_grad(std::initializer_list<const Tensor*> inputs) const;

  void record(std::vector<Tensor> inputs, Tensor output, BackwardFn fn);

  // Drops intermediate gradients so another backward pass can run over the
  // same recorded graph.
  void zero_intermediate_grads();
  void clear() { entries_.clear(); }

 private:
  friend void backward(const Tensor& loss, Tape& tape);

  struct Entry {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  bool recording_;
};

// Reverse sweep from a scalar loss. Gradients accumulate into every
// requires_grad tensor reachable from the loss.
void backward(const Tensor& loss, Tape& tape);

// ---- primitives -------------------------------------------------------------

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias);  // [n,d] + [d]
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);
Tensor sum(Tape& tape, const Tensor& x);
Tensor dot(Tape& tape, const Tensor& a, const Tensor& b);

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);  // [n,k] x [k,m]
// y = x W^T (+ bias); x [n,in], W [out,in], bias [out].
Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight,
              const std::optional<Tensor>& bias = std::nullopt);

Tensor gelu(Tape& tape, const Tensor& x);
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor embedding(Tape& tape, const Tensor& table, std::span<const TokenId> ids);

Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis);
Tensor log_softmax(Tape& tape, const Tensor& x);  // along last axis

// Multi-head causal self-attention over packed [T, d] projections. Position t
// attends to positions 0..t only; masked entries never enter the computation.
Tensor causal_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t n_heads);

// Gathers x[rows[i], cols[i]] from a 2-D tensor into a vector.
Tensor gather(Tape& tape, const Tensor& x, std::span<const std::size_t> rows,
              std::span<const std::size_t> cols);

// -log softmax(logits)[target] for a 1-D logit vector.
Tensor cross_entropy(Tape& tape, const Tensor& logits, TokenId target);

// Sum over rows r with targets[r] >= 0 of -log softmax(logits[r])[targets[r]].
// Rows with a negative target are ignored.
Tensor cross_entropy_sum(Tape& tape, const Tensor& logits, std::span<const TokenId> targets);

// Plain (untaped) helpers.
std::vector<double> softmax_values(std::span<const double> logits);
std::vector<double> log_softmax_values(std::span<const double> logits);

// ---- gradient checking -----------------------------------------------------

using ScalarFunction = std::function<Tensor(Tape&, const Tensor&)>;

// Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-12).
// Throws ValidationError if f is not deterministic for a fixed input.
double finite_diff_check(const ScalarFunction& f, const Tensor& x, double eps);

}  // namespace detox
