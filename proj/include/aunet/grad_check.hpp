#pragma once

#include "aunet/tensor.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>

namespace aunet {

template <typename Scalar>
struct GradCheckResult {
  Scalar max_rel_error = 0;
  // Location of the worst coordinate (or of the first non-finite one).
  std::size_t input = 0;
  Index coordinate = -1;
  Scalar analytic = 0;
  Scalar numeric = 0;
  bool finite = true;
  // Coordinates whose +-eps evaluations took a different relu/pool branch
  // than the base point; central differences are not valid there.
  Index branch_crossings = 0;
  std::string message;

  bool passed(Scalar tolerance) const { return finite && max_rel_error < tolerance; }
};

// Compares reverse-mode gradients of a scalar closure against central
// differences, coordinate by coordinate:
//   error = |analytic - numeric| / max(1, |numeric|).
// The closure must rebuild its graph from the current values of `inputs` on
// every call.
template <typename Scalar>
GradCheckResult<Scalar> grad_check(const std::function<BasicTensor<Scalar>()>& closure,
                                   std::span<BasicTensor<Scalar>> inputs, Scalar eps) {
  if (!(eps > Scalar(0) && eps <= Scalar(1e-2))) {
    throw std::invalid_argument("grad_check: eps must lie in (0, 1e-2], got " + std::to_string(eps));
  }
  GradCheckResult<Scalar> result;
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  BranchTracer tracer;
  const BasicTensor<Scalar> out = closure();
  const std::uint64_t base_branches = tracer.fingerprint();
  if (out.size() != 1) throw ShapeError("grad_check: closure must return a scalar");
  backward(out);

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& t = inputs[k];
    const typename BasicTensor<Scalar>::Array analytic = t.grad();
    for (Index i = 0; i < t.size(); ++i) {
      const Scalar saved = t.value()[i];
      Scalar plus, minus;
      {
        NoGradGuard guard;
        t.mutable_value()[i] = saved + eps;
        tracer.reset();
        plus = closure().item();
        const bool same_plus = tracer.fingerprint() == base_branches;
        t.mutable_value()[i] = saved - eps;
        tracer.reset();
        minus = closure().item();
        const bool same_minus = tracer.fingerprint() == base_branches;
        t.mutable_value()[i] = saved;
        if (!same_plus || !same_minus) ++result.branch_crossings;
      }
      const Scalar numeric = (plus - minus) / (Scalar(2) * eps);
      const Scalar a = analytic[i];
      if (!std::isfinite(a) || !std::isfinite(numeric)) {
        result.finite = false;
        result.input = k;
        result.coordinate = i;
        result.analytic = a;
        result.numeric = numeric;
        result.max_rel_error = std::numeric_limits<Scalar>::infinity();
        result.message = "non-finite gradient at input " + std::to_string(k) + " coordinate " + std::to_string(i);
        return result;
      }
      const Scalar err = std::abs(a - numeric) / std::max(Scalar(1), std::abs(numeric));
      if (result.coordinate < 0 || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.input = k;
        result.coordinate = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace aunet
