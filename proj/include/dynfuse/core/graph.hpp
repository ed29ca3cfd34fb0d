#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dynfuse/core/activation.hpp"
#include "dynfuse/core/conv.hpp"
#include "dynfuse/core/dense.hpp"
#include "dynfuse/core/pooling.hpp"
#include "dynfuse/core/tensor.hpp"
#include "dynfuse/core/tensor_ops.hpp"

namespace dynfuse {

// Record of every discrete branch taken during a forward pass (relu masks,
// argmax picks). Two evaluations with equal signatures lie on the same smooth
// piece of the function, which is what the gradient checker needs to know.
using KinkSignature = std::vector<std::uint64_t>;

// Reverse-mode tape. Nodes are appended in evaluation order, so reverse id
// order is a valid topological order for the backward sweep. Backward closures
// refer to nodes by id only.
template <typename S>
class Graph {
 public:
  struct Var {
    std::size_t id = std::numeric_limits<std::size_t>::max();
  };
  using BackwardFn = std::function<void(Graph&, const Tensor<S>&)>;

  explicit Graph(bool track_kinks = false) : track_kinks_(track_kinks) {}

  Var constant(Tensor<S> v) { return push(std::move(v), false, {}); }
  Var variable(Tensor<S> v) { return push(std::move(v), true, {}); }

  const Tensor<S>& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor<S>& grad(Var v) const { return nodes_.at(v.id).grad; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Appends an op result. The closure is dropped when no parent needs a
  // gradient.
  Var record(Tensor<S> value, std::initializer_list<Var> parents, BackwardFn fn,
             const char* op) {
    check_finite(value, op);
    bool rg = false;
    for (Var p : parents) rg = rg || nodes_.at(p.id).requires_grad;
    return push(std::move(value), rg, rg ? wrap_fault(std::move(fn), op) : BackwardFn{});
  }

  Var record(Tensor<S> value, const std::vector<Var>& parents, BackwardFn fn,
             const char* op) {
    check_finite(value, op);
    bool rg = false;
    for (Var p : parents) rg = rg || nodes_.at(p.id).requires_grad;
    return push(std::move(value), rg, rg ? wrap_fault(std::move(fn), op) : BackwardFn{});
  }

  void accumulate(Var v, const Tensor<S>& g) {
    auto& n = nodes_.at(v.id);
    if (!n.requires_grad) return;
    if (g.shape() != n.value.shape()) {
      throw ShapeError("gradient shape " + to_string(g.shape()) +
                       " does not match value shape " +
                       to_string(n.value.shape()));
    }
    if (n.grad.empty()) {
      n.grad = g;
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }
  }

  void backward(Var out, const Tensor<S>& seed) {
    accumulate(out, seed);
    for (std::size_t id = out.id + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (!n.fn || n.grad.empty()) continue;
      check_finite(n.grad, "backward");
      // closures only touch parents (smaller ids), so n stays valid
      n.fn(*this, n.grad);
    }
  }

  // Test hook: every op recorded under `op` scales its upstream gradient by
  // `factor` before running its backward, i.e. a deliberately wrong backward.
  void inject_fault(std::string op, double factor = 1.01) {
    fault_op_ = std::move(op);
    fault_factor_ = factor;
  }

  bool tracking_kinks() const noexcept { return track_kinks_; }
  const KinkSignature& kinks() const noexcept { return kinks_; }

  void note_mask(const Tensor<S>& x) {
    if (!track_kinks_) return;
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] > S{0}) word |= std::uint64_t{1} << (i % 64);
      if (i % 64 == 63) {
        kinks_.push_back(word);
        word = 0;
      }
    }
    kinks_.push_back(word);
  }

  void note_indices(const std::vector<std::size_t>& idx) {
    if (!track_kinks_) return;
    kinks_.insert(kinks_.end(), idx.begin(), idx.end());
  }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool requires_grad = false;
    BackwardFn fn;
  };

  Var push(Tensor<S> v, bool rg, BackwardFn fn) {
    nodes_.push_back(Node{std::move(v), {}, rg, std::move(fn)});
    return Var{nodes_.size() - 1};
  }

  BackwardFn wrap_fault(BackwardFn fn, const char* op) const {
    if (fault_op_.empty() || fault_op_ != op) return fn;
    const S f = static_cast<S>(fault_factor_);
    return [fn = std::move(fn), f](Graph& g, const Tensor<S>& go) {
      Tensor<S> bent = go;
      for (auto& v : bent.data()) v *= f;
      fn(g, bent);
    };
  }

  std::vector<Node> nodes_;
  bool track_kinks_;
  std::string fault_op_;
  double fault_factor_ = 1.0;
  KinkSignature kinks_;
};

// Graph-recording wrappers around the pure ops.
namespace ag {

template <typename S>
using Var = typename Graph<S>::Var;

template <typename S>
Var<S> conv2d(Graph<S>& g, Var<S> x, Var<S> k, Var<S> b, ConvOptions opt = {}) {
  auto out = dynfuse::conv2d(g.value(x), g.value(k), g.value(b), opt);
  return g.record(std::move(out), {x, k, b},
                  [x, k, b, opt](Graph<S>& gr, const Tensor<S>& go) {
                    auto gd = conv2d_backward(gr.value(x), gr.value(k), go, opt,
                                              gr.requires_grad(x));
                    if (gr.requires_grad(x)) gr.accumulate(x, gd.input);
                    gr.accumulate(k, gd.kernel);
                    gr.accumulate(b, gd.bias);
                  },
                  "conv2d");
}

template <typename S>
Var<S> conv3d(Graph<S>& g, Var<S> x, Var<S> k, Var<S> b, ConvOptions opt = {}) {
  auto out = dynfuse::conv3d(g.value(x), g.value(k), g.value(b), opt);
  return g.record(std::move(out), {x, k, b},
                  [x, k, b, opt](Graph<S>& gr, const Tensor<S>& go) {
                    auto gd = conv3d_backward(gr.value(x), gr.value(k), go, opt,
                                              gr.requires_grad(x));
                    if (gr.requires_grad(x)) gr.accumulate(x, gd.input);
                    gr.accumulate(k, gd.kernel);
                    gr.accumulate(b, gd.bias);
                  },
                  "conv3d");
}

template <typename S>
Var<S> pool(Graph<S>& g, Var<S> x, PoolSpec spec) {
  if (spec.mode == PoolMode::SpatialMax || spec.mode == PoolMode::ChannelMax ||
      spec.mode == PoolMode::WindowMax) {
    if (g.tracking_kinks()) g.note_indices(pool_argmax(g.value(x), spec));
  }
  auto out = dynfuse::pool(g.value(x), spec);
  return g.record(std::move(out), {x},
                  [x, spec](Graph<S>& gr, const Tensor<S>& go) {
                    gr.accumulate(x, pool_backward(gr.value(x), go, spec));
                  },
                  "pooling");
}

template <typename S>
Var<S> dense(Graph<S>& g, Var<S> x, Var<S> w, std::optional<Var<S>> b = {}) {
  auto out = dynfuse::dense(g.value(x), g.value(w),
                            b ? g.value(*b) : Tensor<S>{});
  std::vector<Var<S>> parents{x, w};
  if (b) parents.push_back(*b);
  return g.record(std::move(out), parents,
                  [x, w, b](Graph<S>& gr, const Tensor<S>& go) {
                    auto gd = dense_backward(gr.value(x), gr.value(w), go);
                    gr.accumulate(x, gd.input);
                    gr.accumulate(w, gd.weight);
                    if (b) gr.accumulate(*b, gd.bias);
                  },
                  "dense");
}

template <typename S>
Var<S> activate(Graph<S>& g, Var<S> x, Activation kind) {
  if (kind == Activation::Relu) g.note_mask(g.value(x));
  auto out = dynfuse::activate(g.value(x), kind);
  return g.record(std::move(out), {x},
                  [x, kind](Graph<S>& gr, const Tensor<S>& go) {
                    gr.accumulate(x, activate_backward(gr.value(x), go, kind));
                  },
                  kind == Activation::Relu ? "relu" : "sigmoid");
}

template <typename S>
Var<S> relu(Graph<S>& g, Var<S> x) {
  return activate(g, x, Activation::Relu);
}

template <typename S>
Var<S> sigmoid(Graph<S>& g, Var<S> x) {
  return activate(g, x, Activation::Sigmoid);
}

template <typename S>
Var<S> add(Graph<S>& g, Var<S> a, Var<S> b) {
  auto out = dynfuse::add(g.value(a), g.value(b));
  return g.record(std::move(out), {a, b},
                  [a, b](Graph<S>& gr, const Tensor<S>& go) {
                    auto gd = add_backward(gr.value(a), gr.value(b), go);
                    gr.accumulate(a, gd.a);
                    gr.accumulate(b, gd.b);
                  },
                  "add");
}

template <typename S>
Var<S> mul(Graph<S>& g, Var<S> a, Var<S> b) {
  auto out = dynfuse::mul(g.value(a), g.value(b));
  return g.record(std::move(out), {a, b},
                  [a, b](Graph<S>& gr, const Tensor<S>& go) {
                    auto gd = mul_backward(gr.value(a), gr.value(b), go);
                    gr.accumulate(a, gd.a);
                    gr.accumulate(b, gd.b);
                  },
                  "mul");
}

template <typename S>
Var<S> scale(Graph<S>& g, Var<S> x, S s) {
  auto out = dynfuse::scale(g.value(x), s);
  return g.record(std::move(out), {x},
                  [x, s](Graph<S>& gr, const Tensor<S>& go) {
                    gr.accumulate(x, dynfuse::scale(go, s));
                  },
                  "scale");
}

template <typename S>
Var<S> reshape(Graph<S>& g, Var<S> x, Shape shape) {
  auto out = g.value(x).reshape(std::move(shape));
  return g.record(std::move(out), {x},
                  [x](Graph<S>& gr, const Tensor<S>& go) {
                    gr.accumulate(x, go.reshape(gr.value(x).shape()));
                  },
                  "reshape");
}

template <typename S>
Var<S> slice(Graph<S>& g, Var<S> x, std::size_t axis, std::size_t begin,
             std::size_t end) {
  auto out = dynfuse::slice(g.value(x), axis, begin, end);
  return g.record(std::move(out), {x},
                  [x, axis, begin](Graph<S>& gr, const Tensor<S>& go) {
                    gr.accumulate(x, slice_backward(go, gr.value(x).shape(),
                                                    axis, begin));
                  },
                  "slice");
}

template <typename S>
Var<S> concat(Graph<S>& g, const std::vector<Var<S>>& parts, std::size_t axis) {
  std::vector<Tensor<S>> vals;
  vals.reserve(parts.size());
  for (Var<S> p : parts) vals.push_back(g.value(p));
  auto out = dynfuse::concat(vals, axis);
  return g.record(std::move(out), parts,
                  [parts, axis](Graph<S>& gr, const Tensor<S>& go) {
                    std::size_t begin = 0;
                    for (Var<S> p : parts) {
                      const std::size_t n = gr.value(p).dim(axis);
                      gr.accumulate(p, dynfuse::slice(go, axis, begin, begin + n));
                      begin += n;
                    }
                  },
                  "concat");
}

template <typename S>
Var<S> transpose01(Graph<S>& g, Var<S> x) {
  auto out = dynfuse::transpose01(g.value(x));
  return g.record(std::move(out), {x},
                  [x](Graph<S>& gr, const Tensor<S>& go) {
                    gr.accumulate(x, dynfuse::transpose01(go));
                  },
                  "transpose01");
}

}  // namespace ag
}  // namespace dynfuse
