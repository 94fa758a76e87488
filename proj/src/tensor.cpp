#include "detox/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "detox/errors.hpp"

namespace detox {

struct Tensor::Impl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : Tensor(Shape{}, false) {}

Tensor::Tensor(Shape shape, bool requires_grad) : impl_(std::make_shared<Impl>()) {
  impl_->data.assign(shape_numel(shape), 0.0);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values), requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) throw ShapeError("tensor: axis out of range");
  return impl_->shape[axis];
}
std::size_t Tensor::numel() const { return impl_->data.size(); }
std::span<double> Tensor::data() { return impl_->data; }
std::span<const double> Tensor::data() const { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
Tensor& Tensor::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }
std::span<double> Tensor::grad_buffer() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}
void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}
void Tensor::clear_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data, false); }

// ---- tape -------------------------------------------------------------------

bool Tape::wants_grad(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

void Tape::record(std::vector<Tensor> inputs, Tensor output, BackwardFn fn) {
  entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(fn)});
}

void Tape::zero_intermediate_grads() {
  for (auto& e : entries_) e.output.clear_grad();
}

void backward(const Tensor& loss, Tape& tape) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  auto on_tape = std::any_of(tape.entries_.begin(), tape.entries_.end(),
                             [&](const Tape::Entry& e) { return e.output.shares_storage(loss); });
  if (!on_tape && !loss.requires_grad()) {
    throw ValidationError("backward: loss is not on the tape");
  }
  tape.zero_intermediate_grads();
  Tensor root = loss;
  root.grad_buffer()[0] += 1.0;
  for (auto it = tape.entries_.rbegin(); it != tape.entries_.rend(); ++it) {
    if (it->output.has_grad()) it->fn();
  }
}

// ---- helpers ----------------------------------------------------------------

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

void require_finite(std::span<const double> xs, const char* op) {
  for (double x : xs) {
    if (!std::isfinite(x)) throw NumericDomainError(std::string(op) + ": non-finite input");
  }
}

// Accumulates g into t's gradient when t is tracked.
void accumulate(const Tensor& t, std::span<const double> g) {
  if (!t.requires_grad()) return;
  auto buf = t.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

Tensor make_output(Tape& tape, Shape shape, std::initializer_list<const Tensor*> inputs) {
  Tensor out(std::move(shape));
  if (tape.wants_grad(inputs)) out.set_requires_grad(true);
  return out;
}

}  // namespace

// ---- elementwise ------------------------------------------------------------

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = make_output(tape, a.shape(), {&a, &b});
  auto x = a.data(), y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (out.requires_grad()) {
    tape.record({a, b}, out, [a, b, out]() mutable {
      accumulate(a, out.grad());
      accumulate(b, out.grad());
    });
  }
  return out;
}

Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_bias");
  require_rank(bias, 1, "add_bias");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (bias.dim(0) != d) throw ShapeError("add_bias: bias length mismatch");
  Tensor out = make_output(tape, x.shape(), {&x, &bias});
  auto xs = x.data(), bs = bias.data();
  auto o = out.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) o[i * d + j] = xs[i * d + j] + bs[j];
  if (out.requires_grad()) {
    tape.record({x, bias}, out, [x, bias, out, n, d]() mutable {
      auto g = out.grad();
      accumulate(x, g);
      if (bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = make_output(tape, a.shape(), {&a, &b});
  auto x = a.data(), y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  if (out.requires_grad()) {
    tape.record({a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      auto x = a.data(), y = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
  Tensor out = make_output(tape, x.shape(), {&x});
  auto xs = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xs[i] * factor;
  if (out.requires_grad()) {
    tape.record({x}, out, [x, out, factor]() mutable {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
  Tensor out = make_output(tape, Shape{}, {&x});
  double s = 0.0;
  for (double v : x.data()) s += v;
  out[0] = s;
  if (out.requires_grad()) {
    tape.record({x}, out, [x, out]() mutable {
      const double g = out.grad()[0];
      auto gx = x.grad_buffer();
      for (double& v : gx) v += g;
    });
  }
  return out;
}

Tensor dot(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  Tensor out = make_output(tape, Shape{}, {&a, &b});
  auto x = a.data(), y = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  out[0] = s;
  if (out.requires_grad()) {
    tape.record({a, b}, out, [a, b, out]() mutable {
      const double g = out.grad()[0];
      auto x = a.data(), y = b.data();
      // a and b may alias (dot(x, x)); accumulate one side at a time.
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * y[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * x[i];
      }
    });
  }
  return out;
}

// ---- dense ------------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor out = make_output(tape, Shape{n, m}, {&a, &b});
  auto x = a.data(), y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      for (std::size_t j = 0; j < m; ++j) o[i * m + j] += xv * y[p * m + j];
    }
  if (out.requires_grad()) {
    tape.record({a, b}, out, [a, b, out, n, k, m]() mutable {
      auto g = out.grad();
      auto x = a.data(), y = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * y[p * m + j];
            ga[i * k + p] += s;
          }
      }
      if (b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double xv = x[i * k + p];
            for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += xv * g[i * m + j];
          }
      }
    });
  }
  return out;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ShapeError("linear: weight " + shape_str(weight.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != out_dim)) {
    throw ShapeError("linear: bias shape mismatch");
  }
  Tensor out = bias ? make_output(tape, Shape{n, out_dim}, {&x, &weight, &*bias})
                    : make_output(tape, Shape{n, out_dim}, {&x, &weight});
  auto xs = x.data(), ws = weight.data();
  auto o = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* xr = xs.data() + i * in;
    for (std::size_t j = 0; j < out_dim; ++j) {
      const double* wr = ws.data() + j * in;
      double s = 0.0;
      for (std::size_t p = 0; p < in; ++p) s += xr[p] * wr[p];
      o[i * out_dim + j] = s;
    }
  }
  if (bias) {
    auto bs = bias->data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < out_dim; ++j) o[i * out_dim + j] += bs[j];
  }
  if (out.requires_grad()) {
    std::vector<Tensor> inputs{x, weight};
    Tensor b = bias ? *bias : Tensor();
    if (bias) inputs.push_back(*bias);
    const bool has_bias = bias.has_value();
    tape.record(std::move(inputs), out, [x, weight, b, has_bias, out, n, in, out_dim]() mutable {
      auto g = out.grad();
      auto xs = x.data(), ws = weight.data();
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < out_dim; ++j) {
            const double gv = g[i * out_dim + j];
            const double* wr = ws.data() + j * in;
            double* gr = gx.data() + i * in;
            for (std::size_t p = 0; p < in; ++p) gr[p] += gv * wr[p];
          }
      }
      if (weight.requires_grad()) {
        auto gw = weight.grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < out_dim; ++j) {
            const double gv = g[i * out_dim + j];
            const double* xr = xs.data() + i * in;
            double* gr = gw.data() + j * in;
            for (std::size_t p = 0; p < in; ++p) gr[p] += gv * xr[p];
          }
      }
      if (has_bias && b.requires_grad()) {
        auto gb = b.grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[i * out_dim + j];
      }
    });
  }
  return out;
}

// ---- nonlinearities ---------------------------------------------------------

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(Tape& tape, const Tensor& x) {
  Tensor out = make_output(tape, x.shape(), {&x});
  auto xs = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double v = xs[i];
    o[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  if (out.requires_grad()) {
    tape.record({x}, out, [x, out]() mutable {
      auto g = out.grad();
      auto xs = x.data();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xs[i];
        const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gamma/beta must have shape [" + std::to_string(d) + "]");
  }
  Tensor out = make_output(tape, x.shape(), {&x, &gamma, &beta});
  auto xs = x.data(), gs = gamma.data(), bs = beta.data();
  auto o = out.data();
  std::vector<double> xhat(n * d), rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xr = xs.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xr[j] - mean) * rstd[i];
      o[i * d + j] = gs[j] * xhat[i * d + j] + bs[j];
    }
  }
  if (out.requires_grad()) {
    tape.record({x, gamma, beta}, out,
                [x, gamma, beta, out, n, d, xhat = std::move(xhat), rstd = std::move(rstd)]() mutable {
                  auto g = out.grad();
                  auto gs = gamma.data();
                  if (gamma.requires_grad()) {
                    auto gg = gamma.grad_buffer();
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
                  }
                  if (beta.requires_grad()) {
                    auto gb = beta.grad_buffer();
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
                  }
                  if (x.requires_grad()) {
                    auto gx = x.grad_buffer();
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (std::size_t i = 0; i < n; ++i) {
                      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = g[i * d + j] * gs[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[i * d + j];
                      }
                      mean_dxhat *= inv_d;
                      mean_dxhat_xhat *= inv_d;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = g[i * d + j] * gs[j];
                        gx[i * d + j] +=
                            rstd[i] * (dxh - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat);
                      }
                    }
                  }
                });
  }
  return out;
}

Tensor embedding(Tape& tape, const Tensor& table, std::span<const TokenId> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1), n = ids.size();
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("embedding: token id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(vocab) + ")");
    }
  }
  Tensor out = make_output(tape, Shape{n, d}, {&table});
  auto ts = table.data();
  auto o = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(ts.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                o.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  if (out.requires_grad()) {
    std::vector<TokenId> idv(ids.begin(), ids.end());
    tape.record({table}, out, [table, out, idv = std::move(idv), d]() mutable {
      auto g = out.grad();
      auto gt = table.grad_buffer();
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[idv[i] * d + j] += g[i * d + j];
    });
  }
  return out;
}

// ---- softmax family -----------------------------------------------------------

std::vector<double> softmax_values(std::span<const double> logits) {
  require_finite(logits, "softmax");
  std::vector<double> p(logits.size());
  if (logits.empty()) return p;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

std::vector<double> log_softmax_values(std::span<const double> logits) {
  require_finite(logits, "log_softmax");
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  const double lse = m + std::log(z);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  require_finite(x.data(), "softmax");
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];

  Tensor out = make_output(tape, s, {&x});
  auto xs = x.data();
  auto o = out.data();
  for (std::size_t a = 0; a < outer; ++a)
    for (std::size_t c = 0; c < inner; ++c) {
      const std::size_t base = a * len * inner + c;
      double m = xs[base];
      for (std::size_t i = 1; i < len; ++i) m = std::max(m, xs[base + i * inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const double e = std::exp(xs[base + i * inner] - m);
        o[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < len; ++i) o[base + i * inner] /= z;
    }
  if (out.requires_grad()) {
    tape.record({x}, out, [x, out, outer, inner, len]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.grad_buffer();
      for (std::size_t a = 0; a < outer; ++a)
        for (std::size_t c = 0; c < inner; ++c) {
          const std::size_t base = a * len * inner + c;
          double gy = 0.0;
          for (std::size_t i = 0; i < len; ++i) gy += g[base + i * inner] * y[base + i * inner];
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t k = base + i * inner;
            gx[k] += y[k] * (g[k] - gy);
          }
        }
    });
  }
  return out;
}

Tensor log_softmax(Tape& tape, const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("log_softmax: scalar input");
  require_finite(x.data(), "log_softmax");
  const std::size_t len = x.shape().back();
  const std::size_t rows = len == 0 ? 0 : x.numel() / len;
  Tensor out = make_output(tape, x.shape(), {&x});
  auto xs = x.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = log_softmax_values(xs.subspan(r * len, len));
    std::copy(row.begin(), row.end(), o.begin() + static_cast<std::ptrdiff_t>(r * len));
  }
  if (out.requires_grad()) {
    tape.record({x}, out, [x, out, rows, len]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        double gs = 0.0;
        for (std::size_t i = 0; i < len; ++i) gs += g[r * len + i];
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t k = r * len + i;
          gx[k] += g[k] - std::exp(y[k]) * gs;
        }
      }
    });
  }
  return out;
}

// ---- attention ----------------------------------------------------------------

Tensor causal_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t n_heads) {
  require_rank(q, 2, "causal_attention");
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  const std::size_t t_len = q.dim(0), d = q.dim(1);
  if (n_heads == 0 || d % n_heads != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(n_heads) + " heads");
  }
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor out = make_output(tape, q.shape(), {&q, &k, &v});
  auto qs = q.data(), ks = k.data(), vs = v.data();
  auto o = out.data();
  // probs[h][t][j] for j <= t, stored densely (upper triangle unused).
  std::vector<double> probs(n_heads * t_len * t_len, 0.0);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t t = 0; t < t_len; ++t) {
      double* p = probs.data() + (h * t_len + t) * t_len;
      const double* qr = qs.data() + t * d + off;
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= t; ++j) {
        const double* kr = ks.data() + j * d + off;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qr[c] * kr[c];
        p[j] = s * inv_sqrt;
        m = std::max(m, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= t; ++j) {
        p[j] = std::exp(p[j] - m);
        z += p[j];
      }
      for (std::size_t j = 0; j <= t; ++j) p[j] /= z;
      double* orow = o.data() + t * d + off;
      for (std::size_t j = 0; j <= t; ++j) {
        const double* vr = vs.data() + j * d + off;
        for (std::size_t c = 0; c < dh; ++c) orow[c] += p[j] * vr[c];
      }
    }
  }
  if (out.requires_grad()) {
    tape.record({q, k, v}, out,
                [q, k, v, out, t_len, d, n_heads, dh, inv_sqrt, probs = std::move(probs)]() mutable {
                  auto g = out.grad();
                  auto qs = q.data(), ks = k.data(), vs = v.data();
                  std::vector<double> gq(t_len * d, 0.0), gk(t_len * d, 0.0), gv(t_len * d, 0.0);
                  std::vector<double> gp(t_len);
                  for (std::size_t h = 0; h < n_heads; ++h) {
                    const std::size_t off = h * dh;
                    for (std::size_t t = 0; t < t_len; ++t) {
                      const double* p = probs.data() + (h * t_len + t) * t_len;
                      const double* go = g.data() + t * d + off;
                      double dotp = 0.0;
                      for (std::size_t j = 0; j <= t; ++j) {
                        const double* vr = vs.data() + j * d + off;
                        double* gvr = gv.data() + j * d + off;
                        double s = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) {
                          s += go[c] * vr[c];
                          gvr[c] += p[j] * go[c];
                        }
                        gp[j] = s;
                        dotp += p[j] * s;
                      }
                      const double* qr = qs.data() + t * d + off;
                      double* gqr = gq.data() + t * d + off;
                      for (std::size_t j = 0; j <= t; ++j) {
                        const double gs = p[j] * (gp[j] - dotp) * inv_sqrt;
                        const double* kr = ks.data() + j * d + off;
                        double* gkr = gk.data() + j * d + off;
                        for (std::size_t c = 0; c < dh; ++c) {
                          gqr[c] += gs * kr[c];
                          gkr[c] += gs * qr[c];
                        }
                      }
                    }
                  }
                  accumulate(q, gq);
                  accumulate(k, gk);
                  accumulate(v, gv);
                });
  }
  return out;
}

// ---- selection & losses ---------------------------------------------------------

Tensor gather(Tape& tape, const Tensor& x, std::span<const std::size_t> rows,
              std::span<const std::size_t> cols) {
  require_rank(x, 2, "gather");
  if (rows.size() != cols.size()) throw ShapeError("gather: rows/cols length mismatch");
  const std::size_t n = x.dim(0), m = x.dim(1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n || cols[i] >= m) throw IndexError("gather: index out of range");
  }
  Tensor out = make_output(tape, Shape{rows.size()}, {&x});
  auto xs = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < rows.size(); ++i) o[i] = xs[rows[i] * m + cols[i]];
  if (out.requires_grad()) {
    std::vector<std::size_t> flat(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) flat[i] = rows[i] * m + cols[i];
    tape.record({x}, out, [x, out, flat = std::move(flat)]() mutable {
      auto g = out.grad();
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < flat.size(); ++i) gx[flat[i]] += g[i];
    });
  }
  return out;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, TokenId target) {
  require_rank(logits, 1, "cross_entropy");
  const std::size_t vocab = logits.dim(0);
  if (target < 0 || static_cast<std::size_t>(target) >= vocab) {
    throw IndexError("cross_entropy: target " + std::to_string(target) + " out of range [0, " +
                     std::to_string(vocab) + ")");
  }
  Tensor out = make_output(tape, Shape{}, {&logits});
  auto lp = log_softmax_values(logits.data());
  out[0] = -lp[static_cast<std::size_t>(target)];
  if (out.requires_grad()) {
    tape.record({logits}, out, [logits, out, target, lp = std::move(lp)]() mutable {
      const double g = out.grad()[0];
      auto gx = logits.grad_buffer();
      for (std::size_t i = 0; i < lp.size(); ++i) gx[i] += g * std::exp(lp[i]);
      gx[static_cast<std::size_t>(target)] -= g;
    });
  }
  return out;
}

Tensor cross_entropy_sum(Tape& tape, const Tensor& logits, std::span<const TokenId> targets) {
  require_rank(logits, 2, "cross_entropy_sum");
  const std::size_t n = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != n) throw ShapeError("cross_entropy_sum: one target per row required");
  for (TokenId t : targets) {
    if (t >= 0 && static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("cross_entropy_sum: target " + std::to_string(t) + " out of range");
    }
  }
  Tensor out = make_output(tape, Shape{}, {&logits});
  auto xs = logits.data();
  std::vector<double> lp(n * vocab, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0) continue;
    auto row = log_softmax_values(xs.subspan(r * vocab, vocab));
    std::copy(row.begin(), row.end(), lp.begin() + static_cast<std::ptrdiff_t>(r * vocab));
    total -= row[static_cast<std::size_t>(targets[r])];
  }
  out[0] = total;
  if (out.requires_grad()) {
    std::vector<TokenId> tv(targets.begin(), targets.end());
    tape.record({logits}, out, [logits, out, n, vocab, tv = std::move(tv), lp = std::move(lp)]() mutable {
      const double g = out.grad()[0];
      auto gx = logits.grad_buffer();
      for (std::size_t r = 0; r < n; ++r) {
        if (tv[r] < 0) continue;
        for (std::size_t i = 0; i < vocab; ++i) gx[r * vocab + i] += g * std::exp(lp[r * vocab + i]);
        gx[r * vocab + static_cast<std::size_t>(tv[r])] -= g;
      }
    });
  }
  return out;
}

// ---- gradient check -------------------------------------------------------------

double finite_diff_check(const ScalarFunction& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw ValidationError("finite_diff_check: eps must be positive");
  const Tensor base = x.clone();

  Tensor probe = base.clone();
  probe.set_requires_grad(true);
  Tape tape;
  const Tensor y = f(tape, probe);
  if (y.numel() != 1) throw ShapeError("finite_diff_check: f must be scalar-valued");
  if (y.requires_grad()) backward(y, tape);

  auto eval = [&](const Tensor& at) {
    Tape off(false);
    return f(off, at).item();
  };
  const double y0 = y.item();
  const double y1 = eval(base.clone());
  if (y0 != y1 && !(std::isnan(y0) && std::isnan(y1))) {
    throw ValidationError("finite_diff_check: f is not deterministic under fixed inputs");
  }

  double worst = 0.0;
  for (std::size_t i = 0; i < base.numel(); ++i) {
    Tensor plus = base.clone(), minus = base.clone();
    plus[i] += eps;
    minus[i] -= eps;
    const double numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
    const double analytic = probe.has_grad() ? probe.grad()[i] : 0.0;
    const double err = std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace detox
