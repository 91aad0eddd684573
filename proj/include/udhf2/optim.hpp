#pragma once

#include <cstdint>
#include <vector>

#include "udhf2/tensor.hpp"

namespace udhf2 {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Moment buffers are allocated lazily the
/// first time a parameter is stepped.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWOptions options);

  /// Applies one update from the gradients currently held by the parameters.
  /// Parameters without a gradient are treated as having a zero gradient.
  void step();
  void zero_grad();

  void set_lr(double lr) { options_.lr = lr; }
  double lr() const { return options_.lr; }
  std::int64_t steps() const { return step_count_; }
  const AdamWOptions& options() const { return options_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamWOptions options_;
  std::int64_t step_count_ = 0;
};

/// Cosine decay from `base_lr` at step 0 to 0 at `total_steps`.
double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps);

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

}  // namespace udhf2
