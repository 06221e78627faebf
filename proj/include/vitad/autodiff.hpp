#pragma once

#include <cmath>
#include <deque>
#include <cstddef>
#include <functional>
#include <numbers>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vitad/tensor.hpp"

namespace vitad {

/// Trainable (or frozen) array owned outside any tape. The tape accumulates
/// into `grad` during backward; the optimizer reads it and skips frozen ones.
template <typename T = float>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool is_frozen = false)
      : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::zeros(value.shape())),
        frozen(is_frozen) {}

  void zero_grad() { grad = Tensor<T>::zeros(value.shape()); }
};

template <typename T>
class Tape;

/// Handle to a node recorded on a tape.
template <typename T = float>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
};

/// Per-forward-pass operation record. Nodes are appended in execution order,
/// so the node list is already a topological order and backward walks it in
/// reverse.
template <typename T = float>
class Tape {
 public:
  // Accumulates the node's gradient into its inputs' gradients.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  // With recording disabled no backward closures are kept (inference mode).
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}, "constant"); }

  // Leaf with its own gradient buffer (read back with grad()).
  Var<T> input(Tensor<T> value, bool requires_grad = true) {
    return push(std::move(value), requires_grad && record_, {}, "input");
  }

  // Leaf bound to a parameter; repeated calls return the same node.
  Var<T> param(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    Var<T> v = push(p.value, !p.frozen && record_, {}, "param");
    nodes_[v.id].param = &p;
    param_nodes_.emplace(&p, v.id);
    return v;
  }

  // Records an op result. `backward` runs only when some input needs grad.
  Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward,
                const char* op) {
    bool needs = false;
    if (record_) {
      for (auto i : inputs) needs = needs || nodes_[i].requires_grad;
    }
    Var<T> v = push(std::move(value), needs, {}, op);
    if (needs) {
      nodes_[v.id].inputs = std::move(inputs);
      nodes_[v.id].backward = std::move(backward);
    }
    return v;
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient buffer of a node after backward(); null if none reached it.
  const Tensor<T>* grad(Var<T> v) const {
    const auto& n = nodes_.at(v.id);
    return n.has_grad ? &n.grad : nullptr;
  }

  // Gradient slot of node `id`, zero-allocated on first use. Null when the
  // node does not participate in differentiation.
  Tensor<T>* grad_slot(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (!n.has_grad) {
      n.grad = Tensor<T>::zeros(n.value.shape());
      n.has_grad = true;
    }
    return &n.grad;
  }

  const Tensor<T>& node_value(std::size_t id) const { return nodes_[id].value; }
  const Tensor<T>& node_grad(std::size_t id) const { return nodes_[id].grad; }
  std::size_t input_of(std::size_t id, std::size_t k) const { return nodes_[id].inputs[k]; }
  std::size_t size() const { return nodes_.size(); }

  /// Populates d(seed)/d(leaf) for every reachable leaf. Node gradients are
  /// reset first, so traversing the same tape twice gives identical results;
  /// bound parameters accumulate (call Parameter::zero_grad between steps).
  void backward(Var<T> seed) {
    if (seed.tape != this) throw ContractError("backward: seed belongs to another tape");
    if (value(seed).numel() != 1) {
      throw ContractError("backward: seed must be a scalar, got shape " +
                          shape_str(value(seed).shape()));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor<T>();
    }
    Tensor<T>* g = grad_slot(seed.id);
    if (!g) return;
    (*g)[0] = T{1};
    for (std::size_t i = seed.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.has_grad) continue;
      if (n.backward) n.backward(*this, i);
    }
    for (auto& n : nodes_) {
      if (n.param && n.has_grad) n.param->grad += n.grad;
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, std::vector<std::size_t> inputs,
              const char* op) {
    if (!value.all_finite()) {
      throw NumericalError(detail::concat("non-finite value produced by ", op, " (shape ",
                                          shape_str(value.shape()), ")"));
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.inputs = std::move(inputs);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  bool record_;
  std::deque<Node> nodes_;  // deque keeps value() references valid across pushes
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Inputs must live on the same tape.

namespace detail {

template <typename T>
Tape<T>& same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape || a.tape == nullptr) throw ContractError("operands live on different tapes");
  return *a.tape;
}

template <typename T>
void require_rank2(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(concat(op, ": expected a 2-D tensor, got ", shape_str(t.shape())));
  }
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_rank2(av, "matmul");
  detail::require_rank2(bv, "matmul");
  if (av.dim(1) != bv.dim(0)) {
    throw DimensionError(detail::concat("matmul: inner extents differ, ", shape_str(av.shape()),
                                        " x ", shape_str(bv.shape())));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out({m, n});
  kernels::gemm_nn(av.raw(), bv.raw(), out.raw(), m, k, n);
  return tape.record(
      std::move(out), {a.id, b.id},
      [m, k, n](Tape<T>& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        const auto ia = t.input_of(self, 0), ib = t.input_of(self, 1);
        if (auto* ga = t.grad_slot(ia)) kernels::gemm_nt(g.raw(), t.node_value(ib).raw(), ga->raw(), m, n, k);
        if (auto* gb = t.grad_slot(ib)) kernels::gemm_tn(t.node_value(ia).raw(), g.raw(), gb->raw(), m, k, n);
      },
      "matmul");
}

template <typename T>
Var<T> transpose(Var<T> a) {
  const auto& av = a.value();
  detail::require_rank2(av, "transpose");
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return a.tape->record(
      std::move(out), {a.id},
      [r, c](Tape<T>& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        if (auto* ga = t.grad_slot(t.input_of(self, 0)))
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[j * r + i];
      },
      "transpose");
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.tape->record(
      std::move(out), {a.id},
      [](Tape<T>& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        if (auto* ga = t.grad_slot(t.input_of(self, 0)))
          for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
      },
      "reshape");
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  out += b.value();
  return tape.record(
      std::move(out), {a.id, b.id},
      [](Tape<T>& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        for (std::size_t k = 0; k < 2; ++k)
          if (auto* gi = t.grad_slot(t.input_of(self, k))) *gi += g;
      },
      "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return tape.record(
      std::move(out), {a.id, b.id},
      [](Tape<T>& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        if (auto* ga = t.grad_slot(t.input_of(self, 0))) *ga += g;
        if (auto* gb = t.grad_slot(t.input_of(self, 1)))
          for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] -= g[i];
      },
      "sub");
}

// Elementwise product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return tape.record(
      std::move(out), {a.id, b.id},
      [](Tape<T>& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        const auto ia = t.input_of(self, 0), ib = t.input_of(self, 1);
        if (auto* ga = t.grad_slot(ia))
          for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * t.node_value(ib)[i];
        if (auto* gb = t.grad_slot(ib))
          for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * t.node_value(ia)[i];
      },
      "mul");
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.tape->record(
      std::move(out), {a.id},
      [s](Tape<T>& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        if (auto* ga = t.grad_slot(t.input_of(self, 0)))
          for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += s * g[i];
      },
      "scale");
}

template <typename T>
Var<T> abs(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = std::abs(v);
  return a.tape->record(
      std::move(out), {a.id},
      [](Tape<T>& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        const auto ia = t.input_of(self, 0);
        const auto& x = t.node_value(ia);
        if (auto* ga = t.grad_slot(ia))
          for (std::size_t i = 0; i < g.numel(); ++i)
            (*ga)[i] += x[i] > T{0} ? g[i] : (x[i] < T{0} ? -g[i] : T{0});
      },
      "abs");
}

// x[..., d] + bias[d]
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  auto& tape = detail::same_tape(x, bias);
  const auto& xv = x.value();
  const std::size_t d = bias.value().numel();
  if (xv.last_dim() != d) {
    throw DimensionError(detail::concat("add_bias: last extent of ", shape_str(xv.shape()),
                                        " differs from bias length ", d));
  }
  Tensor<T> out = xv;
  const std::size_t rows = out.numel() / d;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] += bias.value()[j];
  return tape.record(
      std::move(out), {x.id, bias.id},
      [rows, d](Tape<T>& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        if (auto* gx = t.grad_slot(t.input_of(self, 0))) *gx += g;
        if (auto* gb = t.grad_slot(t.input_of(self, 1)))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) (*gb)[j] += g[r * d + j];
      },
      "add_bias");
}

// Normalizes each trailing-dim vector to zero mean / unit variance, then
// scales by gamma and shifts by beta.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-6)) {
  auto& tape = detail::same_tape(x, gamma);
  if (!(eps > T{0})) throw ContractError("layer_norm: eps must be positive");
  const auto& xv = x.value();
  const std::size_t d = xv.last_dim();
  if (gamma.value().numel() != d || beta.value().numel() != d) {
    throw DimensionError(detail::concat("layer_norm: feature extent ", d, " of ",
                                        shape_str(xv.shape()), " does not match gamma/beta (",
                                        gamma.value().numel(), "/", beta.value().numel(), ")"));
  }
  const std::size_t rows = xv.numel() / d;
  Tensor<T> out(xv.shape());
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(rows);
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.raw() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(d);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return tape.record(
      std::move(out), {x.id, gamma.id, beta.id},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t,
                                                                      std::size_t self) {
        const auto& g = t.node_grad(self);
        const auto& gv = t.node_value(t.input_of(self, 1));
        if (auto* gg = t.grad_slot(t.input_of(self, 1)))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += g[r * d + j] * xhat[r * d + j];
        if (auto* gb = t.grad_slot(t.input_of(self, 2)))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) (*gb)[j] += g[r * d + j];
        if (auto* gx = t.grad_slot(t.input_of(self, 0))) {
          std::vector<T> dh(d);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh = 0, mean_dh_h = 0;
            for (std::size_t j = 0; j < d; ++j) {
              dh[j] = g[r * d + j] * gv[j];
              mean_dh += dh[j];
              mean_dh_h += dh[j] * xhat[r * d + j];
            }
            mean_dh /= static_cast<T>(d);
            mean_dh_h /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j)
              (*gx)[r * d + j] += inv_std[r] * (dh[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
          }
        }
      },
      "layer_norm");
}

template <typename T>
Var<T> softmax_lastdim(Var<T> x) {
  const auto& xv = x.value();
  const std::size_t d = xv.last_dim();
  if (d == 0) throw DimensionError("softmax_lastdim: empty last dimension");
  if (!xv.all_finite()) throw NumericalError("softmax_lastdim: non-finite input");
  const std::size_t rows = xv.numel() / d;
  Tensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.raw() + r * d;
    T* yr = out.raw() + r * d;
    const T mx = *std::max_element(xr, xr + d);
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < d; ++j) yr[j] /= s;
  }
  return x.tape->record(
      std::move(out), {x.id},
      [rows, d](Tape<T>& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        const auto& y = t.node_value(self);
        if (auto* gx = t.grad_slot(t.input_of(self, 0)))
          for (std::size_t r = 0; r < rows; ++r) {
            T dot = 0;
            for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
            for (std::size_t j = 0; j < d; ++j)
              (*gx)[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
          }
      },
      "softmax_lastdim");
}

// Exact GELU, x * Phi(x).
template <typename T>
inline constexpr T kInvSqrt2 = T(0.70710678118654752440084436210485);

template <typename T>
Var<T> gelu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = T(0.5) * v * (T{1} + std::erf(v * kInvSqrt2<T>));
  return x.tape->record(
      std::move(out), {x.id},
      [](Tape<T>& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        const auto ix = t.input_of(self, 0);
        const auto& xv = t.node_value(ix);
        if (auto* gx = t.grad_slot(ix))
          for (std::size_t i = 0; i < g.numel(); ++i) {
            const T v = xv[i];
            const T cdf = T(0.5) * (T{1} + std::erf(v * kInvSqrt2<T>));
            const T pdf = std::exp(T(-0.5) * v * v) * std::numbers::inv_sqrtpi_v<T> *
                          kInvSqrt2<T>;
            (*gx)[i] += g[i] * (cdf + v * pdf);
          }
      },
      "gelu");
}

template <typename T>
Var<T> sum(Var<T> x) {
  const T s = x.value().sum();
  return x.tape->record(
      Tensor<T>::scalar(s), {x.id},
      [](Tape<T>& t, std::size_t self) {
        const T g = t.node_grad(self)[0];
        if (auto* gx = t.grad_slot(t.input_of(self, 0)))
          for (auto& v : gx->data()) v += g;
      },
      "sum");
}

template <typename T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().numel()));
}

// Columns [start, start+len) of the last axis.
template <typename T>
Var<T> slice_lastdim(Var<T> x, std::size_t start, std::size_t len) {
  const auto& xv = x.value();
  const std::size_t d = xv.last_dim();
  if (len == 0 || start + len > d) {
    throw DimensionError(detail::concat("slice_lastdim: [", start, ", ", start + len,
                                        ") out of range for ", shape_str(xv.shape())));
  }
  const std::size_t rows = xv.numel() / d;
  Shape shape = xv.shape();
  shape.back() = len;
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xv.raw() + r * d + start, len, out.raw() + r * len);
  return x.tape->record(
      std::move(out), {x.id},
      [rows, d, start, len](Tape<T>& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        if (auto* gx = t.grad_slot(t.input_of(self, 0)))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < len; ++j) (*gx)[r * d + start + j] += g[r * len + j];
      },
      "slice_lastdim");
}

// Concatenation along the last axis; leading extents must agree.
template <typename T>
Var<T> concat_lastdim(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_lastdim: no inputs");
  Tape<T>& tape = *parts.front().tape;
  const Shape lead(parts.front().shape().begin(), parts.front().shape().end() - 1);
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.tape != &tape) throw ContractError("concat_lastdim: operands on different tapes");
    const Shape pl(p.shape().begin(), p.shape().end() - 1);
    if (pl != lead) {
      throw DimensionError(detail::concat("concat_lastdim: leading extents differ, ",
                                          shape_str(parts.front().shape()), " vs ",
                                          shape_str(p.shape())));
    }
    widths.push_back(p.value().last_dim());
    ids.push_back(p.id);
    total += widths.back();
  }
  const std::size_t rows = parts.front().value().numel() / widths.front();
  Shape shape = lead;
  shape.push_back(total);
  Tensor<T> out(shape);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pv.raw() + r * widths[k], widths[k], out.raw() + r * total + off);
    off += widths[k];
  }
  return tape.record(
      std::move(out), ids,
      [rows, total, widths](Tape<T>& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          if (auto* gk = t.grad_slot(t.input_of(self, k)))
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < widths[k]; ++j)
                (*gk)[r * widths[k] + j] += g[r * total + off + j];
          off += widths[k];
        }
      },
      "concat_lastdim");
}

// Rows [start, start+len) of a 2-D tensor.
template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t start, std::size_t len) {
  const auto& xv = x.value();
  detail::require_rank2(xv, "slice_rows");
  const std::size_t n = xv.dim(0), d = xv.dim(1);
  if (len == 0 || start + len > n) {
    throw DimensionError(detail::concat("slice_rows: [", start, ", ", start + len,
                                        ") out of range for ", shape_str(xv.shape())));
  }
  Tensor<T> out({len, d});
  std::copy_n(xv.raw() + start * d, len * d, out.raw());
  return x.tape->record(
      std::move(out), {x.id},
      [start, d](Tape<T>& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        if (auto* gx = t.grad_slot(t.input_of(self, 0)))
          for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[start * d + i] += g[i];
      },
      "slice_rows");
}

// Vertical stack of 2-D tensors with equal column count.
template <typename T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_rank2(av, "concat_rows");
  detail::require_rank2(bv, "concat_rows");
  if (av.dim(1) != bv.dim(1)) {
    throw DimensionError(detail::concat("concat_rows: column counts differ, ",
                                        shape_str(av.shape()), " vs ", shape_str(bv.shape())));
  }
  Tensor<T> out({av.dim(0) + bv.dim(0), av.dim(1)});
  std::copy(av.data().begin(), av.data().end(), out.raw());
  std::copy(bv.data().begin(), bv.data().end(), out.raw() + av.numel());
  const std::size_t na = av.numel();
  return tape.record(
      std::move(out), {a.id, b.id},
      [na](Tape<T>& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        if (auto* ga = t.grad_slot(t.input_of(self, 0)))
          for (std::size_t i = 0; i < na; ++i) (*ga)[i] += g[i];
        if (auto* gb = t.grad_slot(t.input_of(self, 1)))
          for (std::size_t i = 0; i < gb->numel(); ++i) (*gb)[i] += g[na + i];
      },
      "concat_rows");
}

/// Row-wise cosine distance of two [n, d] tensors:
/// out[i] = 1 - <a_i, b_i> / (|a_i| |b_i| + eps).
template <typename T>
Var<T> cosine_distance_rows(Var<T> a, Var<T> b, T eps = T(1e-8)) {
  auto& tape = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  require_same_shape(av, bv, "cosine_distance_rows");
  detail::require_rank2(av, "cosine_distance_rows");
  const std::size_t n = av.dim(0), d = av.dim(1);
  Tensor<T> out({n});
  std::vector<T> dots(n), na(n), nb(n), dens(n);
  for (std::size_t i = 0; i < n; ++i) {
    T dot = 0, sa = 0, sb = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T x = av[i * d + j], y = bv[i * d + j];
      dot += x * y;
      sa += x * x;
      sb += y * y;
    }
    dots[i] = dot;
    na[i] = std::sqrt(sa);
    nb[i] = std::sqrt(sb);
    // sqrt(sa*sb) rather than na*nb: identical rows then give exactly 0.
    dens[i] = std::sqrt(sa * sb) + eps;
    out[i] = T{1} - dot / dens[i];
  }
  return tape.record(
      std::move(out), {a.id, b.id},
      [n, d, dots = std::move(dots), na = std::move(na), nb = std::move(nb), dens = std::move(dens)](
          Tape<T>& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        const auto ia = t.input_of(self, 0), ib = t.input_of(self, 1);
        const auto& av = t.node_value(ia);
        const auto& bv = t.node_value(ib);
        // d out / d a = -( b / den - dot * |b| * a / (|a| den^2) )
        auto accumulate = [&](Tensor<T>* gx, const Tensor<T>& x, const Tensor<T>& y,
                              const std::vector<T>& nx, const std::vector<T>& ny) {
          for (std::size_t i = 0; i < n; ++i) {
            const T den = dens[i];
            const T coef = nx[i] > T{0} ? dots[i] * ny[i] / (nx[i] * den * den) : T{0};
            for (std::size_t j = 0; j < d; ++j)
              (*gx)[i * d + j] += -g[i] * (y[i * d + j] / den - coef * x[i * d + j]);
          }
        };
        if (auto* ga = t.grad_slot(ia)) accumulate(ga, av, bv, na, nb);
        if (auto* gb = t.grad_slot(ib)) accumulate(gb, bv, av, nb, na);
      },
      "cosine_distance_rows");
}

/// 3x3 neighbourhood gather on a token grid: x is [h*w, c] in raster order,
/// result is [h*w, 9c] with zero padding at the borders. Followed by a matmul
/// with a [9c, c_out] weight it is a stride-1 same-padded 3x3 convolution.
template <typename T>
Var<T> im2col3x3(Var<T> x, std::size_t h, std::size_t w) {
  const auto& xv = x.value();
  detail::require_rank2(xv, "im2col3x3");
  if (xv.dim(0) != h * w) {
    throw DimensionError(detail::concat("im2col3x3: ", xv.dim(0), " tokens do not form a ", h,
                                        "x", w, " grid"));
  }
  const std::size_t c = xv.dim(1);
  Tensor<T> out({h * w, 9 * c});
  auto each = [h, w, c](auto&& fn) {
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t k = 0; k < 9; ++k) {
          const long si = static_cast<long>(i) + static_cast<long>(k / 3) - 1;
          const long sj = static_cast<long>(j) + static_cast<long>(k % 3) - 1;
          if (si < 0 || sj < 0 || si >= static_cast<long>(h) || sj >= static_cast<long>(w)) continue;
          const std::size_t src = static_cast<std::size_t>(si) * w + static_cast<std::size_t>(sj);
          fn((i * w + j) * 9 * c + k * c, src * c);
        }
  };
  each([&](std::size_t dst, std::size_t src) { std::copy_n(xv.raw() + src, c, out.raw() + dst); });
  return x.tape->record(
      std::move(out), {x.id},
      [each, c](Tape<T>& t, std::size_t self) {
        const auto& g = t.node_grad(self);
        if (auto* gx = t.grad_slot(t.input_of(self, 0)))
          each([&](std::size_t dst, std::size_t src) {
            for (std::size_t q = 0; q < c; ++q) (*gx)[src + q] += g[dst + q];
          });
      },
      "im2col3x3");
}

}  // namespace vitad
