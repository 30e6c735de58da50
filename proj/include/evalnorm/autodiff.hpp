#pragma once

// Reverse-mode differentiation over a per-forward-pass tape.
//
// Nodes are appended in creation order, so every node's parents precede it and
// a single reverse sweep visits each node once. A tape supports one backward()
// call; build a fresh tape for the next forward pass.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "evalnorm/errors.hpp"
#include "evalnorm/tensor.hpp"

namespace evalnorm {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();

  bool valid() const noexcept { return tape != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// What a node's backward closure sees: its own value and incoming gradient,
/// its parents' values, and writable gradient buffers for parents that need one.
class BackwardContext {
 public:
  const Tensor& grad_out() const;
  const Tensor& output() const;
  const Tensor& input(std::size_t k) const;
  /// nullptr when parent k does not require a gradient.
  Tensor* input_grad(std::size_t k);

 private:
  friend class Tape;
  BackwardContext(Tape& tape, std::uint32_t node) : tape_(tape), node_(node) {}
  Tape& tape_;
  std::uint32_t node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input (parameter or probe point).
  Var leaf(Tensor value) { return push(std::move(value), {}, nullptr, true); }

  /// Non-differentiable input.
  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false); }

  /// Records the output of an operation. The node requires a gradient iff some
  /// parent does; otherwise the backward closure is dropped.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
    std::vector<std::uint32_t> ids;
    ids.reserve(parents.size());
    bool needs = false;
    for (const Var& p : parents) {
      check_owned(p);
      ids.push_back(p.id);
      needs = needs || nodes_[p.id].requires_grad;
    }
    return push(std::move(value), std::move(ids), needs ? std::move(backward) : nullptr, needs);
  }

  const Tensor& value(Var v) const {
    check_owned(v);
    return nodes_[v.id].value;
  }

  bool requires_grad(Var v) const {
    check_owned(v);
    return nodes_[v.id].requires_grad;
  }

  /// Gradient accumulated into `v` by backward(); zeros if nothing reached it.
  Tensor grad(Var v) const {
    check_owned(v);
    const Node& n = nodes_[v.id];
    if (n.grad.empty() && !n.value.empty()) return Tensor::zeros(n.value.shape());
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t parent_count(Var v) const { return nodes_.at(v.id).parents.size(); }

  /// Seeds d(root)/d(root) = 1 and sweeps the tape in reverse.
  void backward(Var root) {
    check_owned(root);
    if (consumed_) throw ConfigError("tape already consumed by backward()");
    if (nodes_[root.id].value.size() != 1) {
      throw ConfigError("backward() needs a scalar root, got shape " + shape_string(root.shape()));
    }
    consumed_ = true;
    if (!nodes_[root.id].requires_grad) return;
    nodes_[root.id].grad = Tensor::ones(nodes_[root.id].value.shape());
    for (std::uint32_t id = root.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || n.grad.empty()) continue;
      BackwardContext ctx(*this, id);
      n.backward(ctx);
    }
  }

 private:
  friend class BackwardContext;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::uint32_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Tensor value, std::vector<std::uint32_t> parents, BackwardFn backward, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.backward = std::move(backward);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  void check_owned(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw ConfigError("variable does not belong to this tape");
  }

  std::deque<Node> nodes_;  // deque: value() references survive later pushes
  bool consumed_ = false;
};

inline const Tensor& Var::value() const {
  if (!tape) throw ConfigError("uninitialized Var");
  return tape->value(*this);
}

inline const Tensor& BackwardContext::grad_out() const { return tape_.nodes_[node_].grad; }
inline const Tensor& BackwardContext::output() const { return tape_.nodes_[node_].value; }
inline const Tensor& BackwardContext::input(std::size_t k) const {
  return tape_.nodes_[tape_.nodes_[node_].parents.at(k)].value;
}
inline Tensor* BackwardContext::input_grad(std::size_t k) {
  auto& parent = tape_.nodes_[tape_.nodes_[node_].parents.at(k)];
  if (!parent.requires_grad) return nullptr;
  if (parent.grad.empty()) parent.grad = Tensor::zeros(parent.value.shape());
  return &parent.grad;
}

namespace detail {
inline Tape& same_tape(Var a, Var b) {
  if (!a.tape || a.tape != b.tape) throw ConfigError("operands live on different tapes");
  return *a.tape;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

/// Identity forward, no parent link: nothing upstream ever receives gradient
/// through this edge.
inline Var stop_gradient(Var x) { return x.tape->constant(x.value()); }

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return t.record(broadcast_map(a.value(), b.value(), [](double x, double y) { return x + y; }), {a, b},
                  [](BackwardContext& c) {
                    if (auto* g = c.input_grad(0)) accumulate_reduced(c.grad_out(), *g);
                    if (auto* g = c.input_grad(1)) accumulate_reduced(c.grad_out(), *g);
                  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return t.record(broadcast_map(a.value(), b.value(), [](double x, double y) { return x - y; }), {a, b},
                  [](BackwardContext& c) {
                    if (auto* g = c.input_grad(0)) accumulate_reduced(c.grad_out(), *g);
                    if (auto* g = c.input_grad(1)) accumulate_reduced(unary_map(c.grad_out(), [](double v) { return -v; }), *g);
                  });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return t.record(broadcast_map(a.value(), b.value(), [](double x, double y) { return x * y; }), {a, b},
                  [](BackwardContext& c) {
                    const Tensor& go = c.grad_out();
                    if (auto* g = c.input_grad(0)) {
                      Tensor full = broadcast_map(go, broadcast_to(c.input(1), go.shape()),
                                                  [](double u, double v) { return u * v; });
                      accumulate_reduced(full, *g);
                    }
                    if (auto* g = c.input_grad(1)) {
                      Tensor full = broadcast_map(go, broadcast_to(c.input(0), go.shape()),
                                                  [](double u, double v) { return u * v; });
                      accumulate_reduced(full, *g);
                    }
                  });
}

inline Var div(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return t.record(broadcast_map(a.value(), b.value(), [](double x, double y) { return x / y; }), {a, b},
                  [](BackwardContext& c) {
                    const Tensor& go = c.grad_out();
                    const Tensor bb = broadcast_to(c.input(1), go.shape());
                    if (auto* g = c.input_grad(0)) {
                      accumulate_reduced(broadcast_map(go, bb, [](double u, double v) { return u / v; }), *g);
                    }
                    if (auto* g = c.input_grad(1)) {
                      // d(a/b)/db = -(a/b)/b
                      Tensor q = broadcast_map(c.output(), bb, [](double y, double v) { return -y / v; });
                      accumulate_reduced(broadcast_map(go, q, [](double u, double v) { return u * v; }), *g);
                    }
                  });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator+(Var a, double s) { return add(a, a.tape->constant(Tensor::scalar(s))); }
inline Var operator-(double s, Var a) { return sub(a.tape->constant(Tensor::scalar(s)), a); }
inline Var operator*(double s, Var a) { return mul(a.tape->constant(Tensor::scalar(s)), a); }

/// [n,k] x [k,m] -> [n,m]
inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    throw ConfigError("matmul shape mismatch: " + shape_string(A.shape()) + " x " + shape_string(B.shape()));
  }
  const std::size_t n = A.dim(0), k = A.dim(1), m = B.dim(1);
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
    }
  }
  return t.record(std::move(out), {a, b}, [n, k, m](BackwardContext& c) {
    const Tensor& go = c.grad_out();
    if (auto* g = c.input_grad(0)) {
      const Tensor& B = c.input(1);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += go[i * m + j] * B[p * m + j];
          (*g)[i * k + p] += s;
        }
    }
    if (auto* g = c.input_grad(1)) {
      const Tensor& A = c.input(0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          for (std::size_t j = 0; j < m; ++j) (*g)[p * m + j] += av * go[i * m + j];
        }
    }
  });
}

/// 3x3 convolution, stride 1, zero padding 1. x: [N,Cin,H,W], w: [Cout,Cin,3,3].
inline Var conv2d_3x3(Var x, Var w) {
  Tape& t = detail::same_tape(x, w);
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  if (X.rank() != 4 || W.rank() != 4 || W.dim(1) != X.dim(1) || W.dim(2) != 3 || W.dim(3) != 3) {
    throw ConfigError("conv2d_3x3 shape mismatch: " + shape_string(X.shape()) + " * " + shape_string(W.shape()));
  }
  const std::size_t N = X.dim(0), Ci = X.dim(1), H = X.dim(2), Wd = X.dim(3), Co = W.dim(0);
  // Visits every (output, input, tap) triple with valid source pixel.
  auto for_each_tap = [=](auto&& f) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < Co; ++o)
        for (std::size_t i = 0; i < Ci; ++i)
          for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const std::size_t widx = ((o * Ci + i) * 3 + ky) * 3 + kx;
              for (std::size_t y = 0; y < H; ++y) {
                const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
                if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t xx = 0; xx < Wd; ++xx) {
                  const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
                  if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(Wd)) continue;
                  const std::size_t oidx = ((n * Co + o) * H + y) * Wd + xx;
                  const std::size_t iidx = ((n * Ci + i) * H + static_cast<std::size_t>(sy)) * Wd +
                                           static_cast<std::size_t>(sx);
                  f(oidx, iidx, widx);
                }
              }
            }
  };
  Tensor out(Shape{N, Co, H, Wd});
  for_each_tap([&](std::size_t o, std::size_t i, std::size_t k) { out[o] += X[i] * W[k]; });
  return t.record(std::move(out), {x, w}, [for_each_tap](BackwardContext& c) {
    const Tensor& go = c.grad_out();
    if (auto* g = c.input_grad(0)) {
      const Tensor& W = c.input(1);
      for_each_tap([&](std::size_t o, std::size_t i, std::size_t k) { (*g)[i] += go[o] * W[k]; });
    }
    if (auto* g = c.input_grad(1)) {
      const Tensor& X = c.input(0);
      for_each_tap([&](std::size_t o, std::size_t i, std::size_t k) { (*g)[k] += go[o] * X[i]; });
    }
  });
}

inline Var relu(Var x) {
  return x.tape->record(unary_map(x.value(), [](double v) { return v > 0.0 ? v : 0.0; }), {x},
                        [](BackwardContext& c) {
                          auto* g = c.input_grad(0);
                          const Tensor& in = c.input(0);
                          for (std::size_t i = 0; i < in.size(); ++i)
                            if (in[i] > 0.0) (*g)[i] += c.grad_out()[i];
                        });
}

inline Var square(Var x) {
  return x.tape->record(unary_map(x.value(), [](double v) { return v * v; }), {x}, [](BackwardContext& c) {
    auto* g = c.input_grad(0);
    const Tensor& in = c.input(0);
    for (std::size_t i = 0; i < in.size(); ++i) (*g)[i] += 2.0 * in[i] * c.grad_out()[i];
  });
}

inline Var sqrt(Var x) {
  for (double v : x.value().values()) {
    if (v < 0.0 || std::isnan(v)) throw NumericDomainError("sqrt of negative value " + std::to_string(v));
  }
  return x.tape->record(unary_map(x.value(), [](double v) { return std::sqrt(v); }), {x},
                        [](BackwardContext& c) {
                          auto* g = c.input_grad(0);
                          const Tensor& y = c.output();
                          for (std::size_t i = 0; i < y.size(); ++i) (*g)[i] += 0.5 * c.grad_out()[i] / y[i];
                        });
}

/// Subgradient 0 at the kink.
inline Var abs(Var x) {
  return x.tape->record(unary_map(x.value(), [](double v) { return std::fabs(v); }), {x},
                        [](BackwardContext& c) {
                          auto* g = c.input_grad(0);
                          const Tensor& in = c.input(0);
                          for (std::size_t i = 0; i < in.size(); ++i) {
                            const double s = in[i] > 0.0 ? 1.0 : (in[i] < 0.0 ? -1.0 : 0.0);
                            (*g)[i] += s * c.grad_out()[i];
                          }
                        });
}

inline Var sum(Var x, std::vector<std::size_t> axes, bool keepdim = false) {
  axes = canonical_axes(std::move(axes), x.value().rank());
  Shape in_shape = x.shape();
  Shape kept = reduced_shape(in_shape, axes);
  return x.tape->record(sum_axes(x.value(), axes, keepdim), {x}, [kept](BackwardContext& c) {
    auto* g = c.input_grad(0);
    const Tensor go = c.grad_out().reshaped(kept);
    accumulate_reduced(broadcast_to(go, g->shape()), *g);
  });
}

inline Var mean(Var x, std::vector<std::size_t> axes, bool keepdim = false) {
  axes = canonical_axes(std::move(axes), x.value().rank());
  std::size_t count = 1;
  for (auto a : axes) count *= x.shape()[a];
  const double scale = 1.0 / static_cast<double>(count);
  Tensor s = sum_axes(x.value(), axes, keepdim);
  for (auto& v : s.values()) v *= scale;
  Shape kept = reduced_shape(x.shape(), axes);
  return x.tape->record(std::move(s), {x}, [kept, scale](BackwardContext& c) {
    auto* g = c.input_grad(0);
    const Tensor go = c.grad_out().reshaped(kept);
    BroadcastIndexer it(kept, g->shape());
    for (std::size_t i = 0; i < g->size(); ++i, it.next()) (*g)[i] += go[it.offset()] * scale;
  });
}

/// Mean over every axis, producing a rank-0 scalar.
inline Var mean_all(Var x) {
  std::vector<std::size_t> axes(x.value().rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  return mean(x, std::move(axes), false);
}

inline Var broadcast(Var x, Shape shape) {
  Tensor out = broadcast_to(x.value(), shape);
  return x.tape->record(std::move(out), {x}, [](BackwardContext& c) { accumulate_reduced(c.grad_out(), *c.input_grad(0)); });
}

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [](BackwardContext& c) {
    auto* g = c.input_grad(0);
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += c.grad_out()[i];
  });
}

/// Elements [begin, end) along `axis`.
inline Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& X = x.value();
  if (axis >= X.rank() || begin > end || end > X.dim(axis)) throw ConfigError("slice out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= X.dim(d);
  for (std::size_t d = axis + 1; d < X.rank(); ++d) inner *= X.dim(d);
  const std::size_t len = end - begin, full = X.dim(axis);
  Shape s = X.shape();
  s[axis] = len;
  Tensor out(s);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < len; ++j)
      for (std::size_t i = 0; i < inner; ++i) out[(o * len + j) * inner + i] = X[(o * full + begin + j) * inner + i];
  return x.tape->record(std::move(out), {x}, [=](BackwardContext& c) {
    auto* g = c.input_grad(0);
    const Tensor& go = c.grad_out();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < len; ++j)
        for (std::size_t i = 0; i < inner; ++i) (*g)[(o * full + begin + j) * inner + i] += go[(o * len + j) * inner + i];
  });
}

}  // namespace evalnorm
