#include "udhf2/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace udhf2 {

GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn, std::vector<Tensor> inputs,
                           double step, double tolerance, double floor) {
  for (auto& t : inputs) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  Tape::active().clear();
  Tensor loss = fn(inputs);
  loss.backward();

  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    Tensor g = t.grad();
    analytic.push_back(g.defined() ? g.to_vector() : std::vector<double>(static_cast<std::size_t>(t.numel()), 0.0));
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& t = inputs[k];
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const double saved = t.at(i);
      auto at = [&](double x) {
        t.set(i, x);
        return fn(inputs).item();
      };
      // Fourth-order central stencil.
      const double numeric = (8.0 * (at(saved + step) - at(saved - step)) - (at(saved + 2 * step) - at(saved - 2 * step))) /
                             (12.0 * step);
      t.set(i, saved);
      const double a = analytic[k][static_cast<std::size_t>(i)];
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      result.max_rel_error = std::max(result.max_rel_error, rel_err);
      ++result.checked;
    }
  }
  for (auto& t : inputs) t.zero_grad();
  result.passed = result.max_rel_error < tolerance;
  return result;
}

}  // namespace udhf2
