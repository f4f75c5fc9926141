#pragma once

#include <functional>
#include <vector>

#include "kag/rng.hpp"
#include "kag/tensor.hpp"

namespace kag {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  int coords_checked = 0;
};

// Scalar-valued function of several tensor inputs; must build its graph from
// scratch on every call so finite-difference evaluations see fresh state.
using TensorFn = std::function<Tensor(Tape&, std::vector<Tensor>&)>;

// Compares reverse-mode gradients against central finite differences.
// `max_coords_per_input` of 0 checks every coordinate; otherwise a seeded
// random subset is probed per input (large parameter sets stay affordable).
inline GradCheckReport grad_check(const TensorFn& f, std::vector<Tensor> inputs, double eps,
                                  double tol, int max_coords_per_input = 0,
                                  uint64_t subset_seed = 0) {
  if (eps <= 0 || tol <= 0) throw Error("grad_check: eps and tol must be positive");

  std::vector<Tensor> bound;
  bound.reserve(inputs.size());
  Tape tape;
  for (const Tensor& x : inputs) {
    Tensor t = Tensor::leaf(x.shape, *x.data);
    tape.watch(t);
    bound.push_back(t);
  }
  Tensor loss = f(tape, bound);
  if (loss.size() != 1) throw Error("grad_check: function must be scalar-valued");
  tape.backward(loss);

  auto eval = [&](std::vector<Tensor>& xs) {
    Tape fresh;
    Tensor y = f(fresh, xs);
    if (y.size() != 1) throw Error("grad_check: function must be scalar-valued");
    return (*y.data)[0];
  };

  GradCheckReport report;
  SplitMix64 rng(subset_seed);
  for (size_t which = 0; which < inputs.size(); ++which) {
    Tensor g_ad = tape.grad(bound[which]);
    int n = inputs[which].size();
    std::vector<int> coords;
    if (max_coords_per_input <= 0 || max_coords_per_input >= n) {
      coords.resize(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      for (int i = 0; i < max_coords_per_input; ++i) coords.push_back(rng.uniform_int(0, n - 1));
    }
    for (int ci : coords) {
      std::vector<Tensor> xs;
      xs.reserve(inputs.size());
      for (const Tensor& x : inputs) xs.push_back(Tensor::leaf(x.shape, *x.data));
      auto bump = [&](double delta) {
        auto vals = *inputs[which].data;
        vals[static_cast<size_t>(ci)] += delta;
        xs[which] = Tensor::leaf(inputs[which].shape, vals);
        return eval(xs);
      };
      double fp = bump(eps);
      double fm = bump(-eps);
      double g_fd = (fp - fm) / (2.0 * eps);
      double g = g_ad[ci];
      double rel = std::abs(g - g_fd) / std::max({std::abs(g), std::abs(g_fd), 1e-8});
      report.max_rel_err = std::max(report.max_rel_err, rel);
      ++report.coords_checked;
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

// Single-input convenience overload.
inline GradCheckReport grad_check(const std::function<Tensor(Tape&, Tensor&)>& f, const Tensor& x,
                                  double eps, double tol, int max_coords = 0,
                                  uint64_t subset_seed = 0) {
  return grad_check(
      [&f](Tape& t, std::vector<Tensor>& xs) { return f(t, xs[0]); }, {x}, eps, tol, max_coords,
      subset_seed);
}

}  // namespace kag
