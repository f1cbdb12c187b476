#pragma once

// Define-by-run reverse-mode differentiation over dense vectors and matrices.
//
// A Graph is built fresh for every evaluation: each op computes its forward
// value immediately and appends a node. backward() then walks the nodes in
// reverse insertion order, which is a valid reverse topological order because
// inputs always exist before the node that consumes them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "d2d/tensor.hpp"

namespace d2d {

/// Logistic function in the two-branch form that never overflows exp().
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// sigma'(x) = sigma(x) * sigma(-x); keeps full relative precision in the tails.
inline double sigmoid_prime(double x) { return sigmoid(x) * sigmoid(-x); }

enum class OpKind {
  leaf,
  affine,
  matvec,
  add,
  shift,
  scale,
  mul,
  sigmoid,
  activation,
  sum,
  squared_norm,
  log,
  power,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::affine: return "affine";
    case OpKind::matvec: return "matvec";
    case OpKind::add: return "add";
    case OpKind::shift: return "shift";
    case OpKind::scale: return "scale";
    case OpKind::mul: return "mul";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::activation: return "activation";
    case OpKind::sum: return "sum";
    case OpKind::squared_norm: return "squared_norm";
    case OpKind::log: return "log";
    case OpKind::power: return "power";
  }
  return "?";
}

enum class Activation {
  leaky_relu,             // slope below zero = param
  tanh,
  logit_scaled_sigmoid,   // sigma(param * a) * a
  identity,
};

struct OpAttr {
  double value = 0.0;  // scale factor, shift, sigmoid gain, power exponent
  Activation act = Activation::identity;
  double act_param = 0.0;
};

struct Var {
  std::size_t id = 0;
  bool operator==(const Var&) const = default;
};

class Gradients {
 public:
  explicit Gradients(std::vector<std::optional<Tensor>> adj) : adj_(std::move(adj)) {}

  [[nodiscard]] bool has(Var v) const { return v.id < adj_.size() && adj_[v.id].has_value(); }

  /// Gradient of the output w.r.t. v. Nodes the output does not depend on get zeros.
  [[nodiscard]] const Tensor& wrt(Var v) const {
    if (!has(v)) throw Error("no gradient recorded for node " + std::to_string(v.id));
    return *adj_[v.id];
  }

 private:
  std::vector<std::optional<Tensor>> adj_;
};

class Graph {
 public:
  // Leaves.
  Var input(Tensor t, bool requires_grad = true) { return push_leaf(std::move(t), requires_grad); }
  Var param(Tensor t) { return push_leaf(std::move(t), true); }
  Var constant(Tensor t) { return push_leaf(std::move(t), false); }

  /// Generic entry point; the named helpers below all route through here.
  Var forward_op(OpKind kind, std::span<const Var> in, OpAttr attr = {}) {
    Tensor out = eval(kind, in, attr);
    Node n{kind, {in.begin(), in.end()}, attr, std::move(out), false};
    nodes_.push_back(std::move(n));
    const std::size_t id = nodes_.size() - 1;
    if (!nodes_.back().value.all_finite())
      throw NumericError(std::string("non-finite value produced by ") + op_name(kind) +
                             " at node " + std::to_string(id),
                         id);
    return Var{id};
  }

  Var affine(Var W, Var x, Var b) { return op(OpKind::affine, {W, x, b}); }
  Var matvec(Var W, Var x) { return op(OpKind::matvec, {W, x}); }
  Var add(Var a, Var b) { return op(OpKind::add, {a, b}); }
  Var shift(Var a, double c) { return op(OpKind::shift, {a}, {.value = c}); }
  Var scale(Var a, double s) { return op(OpKind::scale, {a}, {.value = s}); }
  Var mul(Var a, Var b) { return op(OpKind::mul, {a, b}); }
  Var sigmoid(Var a, double gain = 1.0) { return op(OpKind::sigmoid, {a}, {.value = gain}); }
  Var activation(Var a, Activation act, double param = 0.0) {
    return op(OpKind::activation, {a}, {.act = act, .act_param = param});
  }
  Var sum(Var a) { return op(OpKind::sum, {a}); }
  Var squared_norm(Var a) { return op(OpKind::squared_norm, {a}); }
  Var log(Var a) { return op(OpKind::log, {a}); }
  Var power(Var a, double p) { return op(OpKind::power, {a}, {.value = p}); }

  [[nodiscard]] const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  [[nodiscard]] OpKind kind(Var v) const { return nodes_.at(v.id).kind; }

  /// Reverse sweep from a scalar output. Adjoints are kept for every node
  /// reached, so intermediate values (e.g. the mixed latent) can be queried too.
  [[nodiscard]] Gradients backward(Var output, double seed = 1.0) const {
    const Node& out = nodes_.at(output.id);
    if (!out.value.is_scalar())
      throw ShapeError("backward needs a scalar output, got shape " + shape_str(out.value.shape));

    std::vector<std::optional<Tensor>> adj(output.id + 1);
    adj[output.id] = Tensor(out.value.shape, {seed});

    for (std::size_t id = output.id + 1; id-- > 0;) {
      if (!adj[id]) continue;
      const Node& n = nodes_[id];
      const Tensor& g = *adj[id];
      if (!g.all_finite())
        throw NumericError("non-finite gradient at node " + std::to_string(id) + " (" +
                               op_name(n.kind) + ")",
                           id);
      propagate(n, g, adj);
    }
    return Gradients(std::move(adj));
  }

 private:
  struct Node {
    OpKind kind;
    std::vector<Var> inputs;
    OpAttr attr;
    Tensor value;
    bool requires_grad;
  };

  std::vector<Node> nodes_;

  Var op(OpKind kind, std::initializer_list<Var> in, OpAttr attr = {}) {
    return forward_op(kind, std::span<const Var>(in.begin(), in.size()), attr);
  }

  Var push_leaf(Tensor t, bool requires_grad) {
    if (!t.all_finite())
      throw NumericError("non-finite leaf value at node " + std::to_string(nodes_.size()),
                         nodes_.size());
    nodes_.push_back(Node{OpKind::leaf, {}, {}, std::move(t), requires_grad});
    return Var{nodes_.size() - 1};
  }

  [[noreturn]] static void mismatch(OpKind k, const std::vector<const Tensor*>& ts) {
    std::string msg = std::string(op_name(k)) + ": incompatible shapes";
    for (const auto* t : ts) msg += " " + shape_str(t->shape);
    throw ShapeError(msg);
  }

  static double act_fwd(Activation a, double p, double x) {
    switch (a) {
      case Activation::leaky_relu: return x > 0.0 ? x : p * x;
      case Activation::tanh: return std::tanh(x);
      case Activation::logit_scaled_sigmoid: return d2d::sigmoid(p * x) * x;
      case Activation::identity: return x;
    }
    return x;
  }

  static double act_deriv(Activation a, double p, double x, double y) {
    switch (a) {
      case Activation::leaky_relu: return x > 0.0 ? 1.0 : p;
      case Activation::tanh: return 1.0 - y * y;
      case Activation::logit_scaled_sigmoid: return d2d::sigmoid(p * x) + p * sigmoid_prime(p * x) * x;
      case Activation::identity: return 1.0;
    }
    return 1.0;
  }

  Tensor eval(OpKind kind, std::span<const Var> in, const OpAttr& attr) const {
    auto arg = [&](std::size_t i) -> const Tensor& {
      if (i >= in.size() || in[i].id >= nodes_.size())
        throw Error(std::string(op_name(kind)) + ": missing or dangling input");
      return nodes_[in[i].id].value;
    };
    const std::size_t arity = [&] {
      switch (kind) {
        case OpKind::affine: return 3;
        case OpKind::matvec:
        case OpKind::add:
        case OpKind::mul: return 2;
        case OpKind::leaf: return 0;
        default: return 1;
      }
    }();
    if (in.size() != arity)
      throw Error(std::string(op_name(kind)) + ": expected " + std::to_string(arity) + " inputs");

    switch (kind) {
      case OpKind::leaf:
        throw Error("leaf nodes are created with input/param/constant");
      case OpKind::affine:
      case OpKind::matvec: {
        const Tensor& W = arg(0);
        const Tensor& x = arg(1);
        if (W.rank() != 2 || x.rank() != 1 || W.cols() != x.size()) mismatch(kind, {&W, &x});
        const std::size_t r = W.rows(), c = W.cols();
        std::vector<double> y(r, 0.0);
        if (kind == OpKind::affine) {
          const Tensor& b = arg(2);
          if (b.rank() != 1 || b.size() != r) mismatch(kind, {&W, &x, &b});
          y = b.data;
        }
        for (std::size_t i = 0; i < r; ++i) {
          const double* row = W.data.data() + i * c;
          double s = 0.0;
          for (std::size_t k = 0; k < c; ++k) s += row[k] * x.data[k];
          y[i] += s;
        }
        return Tensor::vector(std::move(y));
      }
      case OpKind::add:
      case OpKind::mul: {
        const Tensor& a = arg(0);
        const Tensor& b = arg(1);
        if (a.shape != b.shape) mismatch(kind, {&a, &b});
        Tensor out = a;
        for (std::size_t i = 0; i < out.size(); ++i)
          out.data[i] = kind == OpKind::add ? a.data[i] + b.data[i] : a.data[i] * b.data[i];
        return out;
      }
      case OpKind::shift:
      case OpKind::scale:
      case OpKind::sigmoid:
      case OpKind::activation:
      case OpKind::log:
      case OpKind::power: {
        Tensor out = arg(0);
        for (double& v : out.data) {
          switch (kind) {
            case OpKind::shift: v += attr.value; break;
            case OpKind::scale: v *= attr.value; break;
            case OpKind::sigmoid: v = d2d::sigmoid(attr.value * v); break;
            case OpKind::activation: v = act_fwd(attr.act, attr.act_param, v); break;
            case OpKind::log:
              if (!(v > 0.0)) throw DomainError("log: non-positive argument " + std::to_string(v));
              v = std::log(v);
              break;
            case OpKind::power: v = std::pow(v, attr.value); break;
            default: break;
          }
        }
        return out;
      }
      case OpKind::sum: {
        const Tensor& a = arg(0);
        double s = 0.0;
        for (double v : a.data) s += v;
        return Tensor::scalar(s);
      }
      case OpKind::squared_norm:
        return Tensor::scalar(d2d::squared_norm(arg(0).data));
    }
    throw Error("unknown op");
  }

  void propagate(const Node& n, const Tensor& g, std::vector<std::optional<Tensor>>& adj) const {
    auto acc = [&](Var v) -> Tensor& {
      auto& slot = adj[v.id];
      if (!slot) slot = Tensor::zeros_like(nodes_[v.id].value);
      return *slot;
    };
    auto val = [&](std::size_t i) -> const Tensor& { return nodes_[n.inputs[i].id].value; };

    switch (n.kind) {
      case OpKind::leaf:
        return;
      case OpKind::affine:
      case OpKind::matvec: {
        const Tensor& W = val(0);
        const Tensor& x = val(1);
        const std::size_t r = W.rows(), c = W.cols();
        if (n.kind == OpKind::affine) {
          Tensor& gb = acc(n.inputs[2]);
          for (std::size_t i = 0; i < r; ++i) gb.data[i] += g.data[i];
        }
        Tensor& gx = acc(n.inputs[1]);
        for (std::size_t i = 0; i < r; ++i) {
          const double gi = g.data[i];
          if (gi == 0.0) continue;
          const double* row = W.data.data() + i * c;
          for (std::size_t k = 0; k < c; ++k) gx.data[k] += row[k] * gi;
        }
        if (nodes_[n.inputs[0].id].kind == OpKind::leaf && !nodes_[n.inputs[0].id].requires_grad)
          return;  // frozen weights: skip the outer product
        Tensor& gW = acc(n.inputs[0]);
        for (std::size_t i = 0; i < r; ++i) {
          const double gi = g.data[i];
          if (gi == 0.0) continue;
          double* row = gW.data.data() + i * c;
          for (std::size_t k = 0; k < c; ++k) row[k] += gi * x.data[k];
        }
        return;
      }
      case OpKind::add: {
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
        Tensor& gb = acc(n.inputs[1]);
        for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i];
        return;
      }
      case OpKind::mul: {
        const Tensor& a = val(0);
        const Tensor& b = val(1);
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * b.data[i];
        Tensor& gb = acc(n.inputs[1]);
        for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * a.data[i];
        return;
      }
      case OpKind::sum:
      case OpKind::squared_norm: {
        const Tensor& a = val(0);
        Tensor& ga = acc(n.inputs[0]);
        const double s = g.item();
        for (std::size_t i = 0; i < a.size(); ++i)
          ga.data[i] += n.kind == OpKind::sum ? s : 2.0 * s * a.data[i];
        return;
      }
      default: break;
    }

    // Remaining kinds are elementwise unary.
    const Tensor& a = val(0);
    Tensor& ga = acc(n.inputs[0]);
    const OpAttr& at = n.attr;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double x = a.data[i];
      double d = 1.0;
      switch (n.kind) {
        case OpKind::shift: d = 1.0; break;
        case OpKind::scale: d = at.value; break;
        case OpKind::sigmoid: d = at.value * sigmoid_prime(at.value * x); break;
        case OpKind::activation: d = act_deriv(at.act, at.act_param, x, n.value.data[i]); break;
        case OpKind::log: d = 1.0 / x; break;
        case OpKind::power: d = at.value * std::pow(x, at.value - 1.0); break;
        default: break;
      }
      ga.data[i] += g.data[i] * d;
    }
  }
};

/// Builds a scalar from a single input leaf on a fresh graph.
using ScalarFn = std::function<Var(Graph&, Var)>;

/// Evaluates fn at point and returns (value, gradient).
inline std::pair<double, Tensor> value_and_grad(const ScalarFn& fn, const Tensor& point) {
  Graph g;
  Var x = g.input(point);
  Var y = fn(g, x);
  const double v = g.value(y).item();
  Gradients grads = g.backward(y);
  return {v, grads.has(x) ? grads.wrt(x) : Tensor::zeros_like(point)};
}

/// Central-difference check of the tape gradient. Returns the max over the
/// checked coordinates of |g_analytic - g_fd| / max(1, |g_fd|). An empty
/// coordinate list means every coordinate.
inline double check_gradients(const ScalarFn& fn, const Tensor& point, double step,
                              std::span<const std::size_t> coords = {}) {
  if (!(step > 0.0)) throw DomainError("check_gradients: step must be positive");
  const Tensor analytic = value_and_grad(fn, point).second;

  auto eval_at = [&](const Tensor& p) {
    Graph g;
    Var x = g.input(p, false);
    return g.value(fn(g, x)).item();
  };

  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(point.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    coords = all;
  }

  double worst = 0.0;
  Tensor p = point;
  for (std::size_t k : coords) {
    const double x0 = p.data[k];
    p.data[k] = x0 + step;
    const double fp = eval_at(p);
    p.data[k] = x0 - step;
    const double fm = eval_at(p);
    p.data[k] = x0;
    const double fd = (fp - fm) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic.data[k] - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

/// k distinct coordinates out of n, or all of them when k >= n.
inline std::vector<std::size_t> sample_coordinates(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (k >= n) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace d2d
