#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "dynfuse/core/graph.hpp"
#include "dynfuse/core/rng.hpp"
#include "dynfuse/core/tensor.hpp"

namespace dynfuse {

// A perturbation kept crossing a relu/argmax boundary even at the smallest
// step size; the caller should draw a new point.
class KinkError : public Error {
 public:
  using Error::Error;
};

struct GradCheckOptions {
  double eps = 1e-3;
  std::size_t max_coords = 0;  // per input tensor, 0 = every element
  std::uint64_t seed = 0;      // projection vector and coordinate subset
  int eps_shrinks = 3;         // eps/10 retries when a kink is crossed
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
};

using CheckForward = std::function<Tensor<double>(
    const std::vector<Tensor<double>>&, KinkSignature*)>;
// Gradient of <upstream, forward(inputs)> w.r.t. every input. An empty tensor
// marks an input that is not differentiated.
using CheckBackward = std::function<std::vector<Tensor<double>>(
    const std::vector<Tensor<double>>&, const Tensor<double>&)>;

inline double relative_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

// Fourth-order central differences
//   dL/dx ~ (8 (L(x+h) - L(x-h)) - (L(x+2h) - L(x-2h))) / 12h
// of the scalar L(x) = <r, f(x)> with a seeded random projection r, compared
// against the analytic gradient. A coordinate whose probes change the kink
// signature is retried at h/10 up to eps_shrinks times before KinkError is
// thrown.
inline GradCheckResult grad_check(const CheckForward& forward,
                                  const CheckBackward& backward,
                                  std::vector<Tensor<double>> inputs,
                                  const GradCheckOptions& opt = {}) {
  KinkSignature base_sig;
  const Tensor<double> y0 = forward(inputs, &base_sig);
  Rng rng(opt.seed);
  Tensor<double> proj(y0.shape());
  for (auto& v : proj.data()) v = rng.uniform(-1.0, 1.0);

  const auto analytic = backward(inputs, proj);
  if (analytic.size() != inputs.size()) {
    throw ShapeError("grad_check: backward returned " +
                     std::to_string(analytic.size()) + " gradients for " +
                     std::to_string(inputs.size()) + " inputs");
  }

  auto loss = [&](KinkSignature* sig) {
    const Tensor<double> y = forward(inputs, sig);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += proj[i] * y[i];
    return acc;
  };

  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (analytic[k].empty()) continue;
    require_shape(analytic[k], inputs[k].shape(), "grad_check gradient");
    if (!analytic[k].all_finite()) {
      throw NumericError("grad_check: non-finite analytic gradient for input " +
                         std::to_string(k));
    }
    std::vector<std::size_t> coords(inputs[k].size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords && coords.size() > opt.max_coords) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(opt.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t idx : coords) {
      double& x = inputs[k][idx];
      const double saved = x;
      double eps = opt.eps;
      double numeric = 0.0;
      bool smooth = false;
      for (int attempt = 0; attempt <= opt.eps_shrinks; ++attempt) {
        KinkSignature s1, s2, s3, s4;
        x = saved + eps;
        const double lp1 = loss(&s1);
        x = saved - eps;
        const double lm1 = loss(&s2);
        x = saved + 2.0 * eps;
        const double lp2 = loss(&s3);
        x = saved - 2.0 * eps;
        const double lm2 = loss(&s4);
        x = saved;
        if (s1 == base_sig && s2 == base_sig && s3 == base_sig && s4 == base_sig) {
          numeric = (8.0 * (lp1 - lm1) - (lp2 - lm2)) / (12.0 * eps);
          smooth = true;
          break;
        }
        eps /= 10.0;
      }
      if (!smooth) {
        throw KinkError("grad_check: input " + std::to_string(k) + " element " +
                        std::to_string(idx) + " sits on a kink");
      }
      if (!std::isfinite(numeric)) {
        throw NumericError("grad_check: non-finite numeric gradient");
      }
      const double a = analytic[k][idx];
      const double err = relative_error(a, numeric);
      ++res.coords_checked;
      if (res.coords_checked == 1 || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_input = k;
        res.worst_index = idx;
        res.analytic = a;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

// Draws inputs from `sample` and retries with a fresh draw (up to
// max_resamples times) whenever the point lies on a kink.
inline GradCheckResult grad_check_sampled(
    const CheckForward& forward, const CheckBackward& backward,
    const std::function<std::vector<Tensor<double>>(Rng&)>& sample,
    GradCheckOptions opt, int max_resamples = 8) {
  Rng rng(derive_seed(opt.seed, 0x5a));
  for (int attempt = 0;; ++attempt) {
    try {
      return grad_check(forward, backward, sample(rng), opt);
    } catch (const KinkError&) {
      if (attempt >= max_resamples) throw;
      opt.seed = derive_seed(opt.seed, static_cast<std::uint64_t>(attempt) + 1);
    }
  }
}

// Adapts a graph builder to the checker: every input becomes a graph
// variable, the builder returns the output node.
using GraphBuilder = std::function<Graph<double>::Var(
    Graph<double>&, const std::vector<Graph<double>::Var>&)>;

inline CheckForward graph_forward(GraphBuilder build) {
  return [build](const std::vector<Tensor<double>>& inputs, KinkSignature* sig) {
    Graph<double> g(sig != nullptr);
    std::vector<Graph<double>::Var> vars;
    for (const auto& t : inputs) vars.push_back(g.variable(t));
    const auto out = build(g, vars);
    if (sig) *sig = g.kinks();
    return g.value(out);
  };
}

// `fault_op` (test hook) bends the backward of every op recorded under that
// name; see Graph::inject_fault.
inline CheckBackward graph_backward(GraphBuilder build, std::string fault_op = {}) {
  return [build, fault_op](const std::vector<Tensor<double>>& inputs,
                           const Tensor<double>& upstream) {
    Graph<double> g;
    if (!fault_op.empty()) g.inject_fault(fault_op);
    std::vector<Graph<double>::Var> vars;
    for (const auto& t : inputs) vars.push_back(g.variable(t));
    const auto out = build(g, vars);
    g.backward(out, upstream);
    std::vector<Tensor<double>> grads;
    for (std::size_t i = 0; i < vars.size(); ++i) {
      const auto& gr = g.grad(vars[i]);
      grads.push_back(gr.empty() ? Tensor<double>(inputs[i].shape()) : gr);
    }
    return grads;
  };
}

}  // namespace dynfuse
