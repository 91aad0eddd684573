#pragma once

#include <functional>
#include <string>
#include <vector>

#include "udhf2/tensor.hpp"

namespace udhf2 {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::int64_t checked = 0;
  bool passed = false;
};

/// Compares tape gradients of a scalar function against fourth-order central
/// finite differences with spacing `step`. Inputs should be float64; each gets requires_grad set.
/// Per-element error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn, std::vector<Tensor> inputs,
                           double step = 1e-4, double tolerance = 1e-4, double floor = 1e-3);

}  // namespace udhf2
