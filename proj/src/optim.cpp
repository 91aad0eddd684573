#include "udhf2/optim.hpp"

#include <cmath>
#include <numbers>

namespace udhf2 {

AdamW::AdamW(std::vector<Tensor> params, AdamWOptions options)
    : params_(std::move(params)), m_(params_.size()), v_(params_.size()), options_(options) {}

void AdamW::step() {
  ++step_count_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
  const double lr = options_.lr;
  const double decay = 1.0 - lr * options_.weight_decay;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    const auto n = static_cast<std::size_t>(p.numel());
    if (m_[k].empty()) {
      m_[k].assign(n, 0.0);
      v_[k].assign(n, 0.0);
    }
    Tensor g = p.grad();
    dispatch(p.dtype(), [&](auto tag) {
      using T = decltype(tag);
      T* w = p.data<T>();
      const T* gp = g.defined() ? g.data<T>() : nullptr;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = gp ? static_cast<double>(gp[i]) : 0.0;
        m[i] = b1 * m[i] + (1.0 - b1) * gi;
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        double wi = static_cast<double>(w[i]) * decay;
        wi -= lr * mhat / (std::sqrt(vhat) + options_.eps);
        w[i] = static_cast<T>(wi);
      }
    });
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return base_lr;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * frac));
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double total = 0.0;
  for (const auto& p : params) {
    Tensor g = p.grad();
    if (!g.defined()) continue;
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* d = g.data<T>();
      for (std::int64_t i = 0; i < g.numel(); ++i) total += static_cast<double>(d[i]) * static_cast<double>(d[i]);
    });
  }
  const double norm = std::sqrt(total);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& p : params) {
      Tensor g = p.grad();
      if (!g.defined()) continue;
      dispatch(g.dtype(), [&](auto tag) {
        using T = decltype(tag);
        T* d = g.data<T>();
        for (std::int64_t i = 0; i < g.numel(); ++i) d[i] = static_cast<T>(d[i] * s);
      });
    }
  }
  return norm;
}

}  // namespace udhf2
