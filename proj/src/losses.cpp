#include "udhf2/losses.hpp"

#include "udhf2/ops.hpp"

namespace udhf2 {
namespace {

Tensor one_minus(const Tensor& x) { return add_scalar(mul_scalar(x, -1.0), 1.0); }

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
}

std::int64_t pixels(const Tensor& x) { return x.numel() / x.dim(1); }

Tensor expand_channels(const Tensor& mask, std::int64_t k) {
  if (k == 1) return mask;
  return concat(std::vector<Tensor>(static_cast<std::size_t>(k), mask), 1);
}

Tensor reduce_to_channels(const Tensor& x) { return sum_axis(sum_axis(sum_axis(x, 3), 2), 0); }

void check_unit(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1], got " + std::to_string(v));
}

}  // namespace

const char* task_name(Task task) { return task == Task::segmentation ? "segmentation" : "change"; }

void LossWeights::validate() const {
  check_unit(gamma, "gamma");
  check_unit(omega, "omega");
  check_unit(g, "g");
  check_unit(lambda_class, "lambda_class");
  check_unit(lambda_cd, "lambda_cd");
}

Tensor one_hot(std::span<const std::int32_t> labels, std::int64_t n, std::int64_t h, std::int64_t w, int classes,
               DType dtype) {
  if (static_cast<std::int64_t>(labels.size()) != n * h * w) throw DimensionError("one_hot: label count mismatch");
  Tensor out = Tensor::zeros({n, classes, h, w}, dtype);
  const auto hw = h * w;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t i = 0; i < hw; ++i) {
      const auto c = labels[static_cast<std::size_t>(b * hw + i)];
      if (c < 0 || c >= classes) throw ParameterError("one_hot: label " + std::to_string(c) + " out of range");
      out.set((b * classes + c) * hw + i, 1.0);
    }
  return out;
}

Tensor ratio_dice_loss(const Tensor& probs, const Tensor& truth) {
  require_same(probs, truth, "ratio_dice_loss");
  Tensor ratio = div(mul(truth, probs), add_scalar(add(truth, probs), kLossEps));
  return one_minus(mul_scalar(sum(ratio), 2.0 / static_cast<double>(pixels(probs))));
}

Tensor seg_hybrid_loss(const Tensor& probs, const Tensor& truth, double gamma) {
  require_same(probs, truth, "seg_hybrid_loss");
  Tensor ce = mul_scalar(sum(mul(truth, log(clamp(probs, kLossEps, 1.0)))), -1.0 / static_cast<double>(pixels(probs)));
  return add(mul_scalar(ce, gamma), mul_scalar(ratio_dice_loss(probs, truth), 1.0 - gamma));
}

Tensor seg_hybrid_loss_from_logits(const Tensor& logits, const Tensor& truth, double gamma) {
  require_same(logits, truth, "seg_hybrid_loss");
  Tensor ce = mul_scalar(sum(mul(truth, log_softmax(logits, 1))), -1.0 / static_cast<double>(pixels(logits)));
  return add(mul_scalar(ce, gamma), mul_scalar(ratio_dice_loss(softmax(logits, 1), truth), 1.0 - gamma));
}

Tensor cd_hybrid_loss(const Tensor& change_prob, const Tensor& truth, double g, double lambda_class) {
  require_same(change_prob, truth, "cd_hybrid_loss");
  Tensor p = clamp(change_prob, kLossEps, 1.0 - kLossEps);
  Tensor pos = mul_scalar(mul(truth, log(p)), lambda_class);
  Tensor neg = mul_scalar(mul(one_minus(truth), log(one_minus(p))), 1.0 - lambda_class);
  Tensor wbce = mul_scalar(add(pos, neg), -1.0);
  Tensor dice = one_minus(mul_scalar(div(mul(truth, p), add(truth, p)), 2.0));
  return mean(add(mul_scalar(wbce, g), mul_scalar(dice, 1.0 - g)));
}

Tensor soft_f1_loss(const Tensor& probs_in, const Tensor& truth_in, const Tensor& mask) {
  require_same(probs_in, truth_in, "soft_f1_loss");
  Tensor probs = probs_in, truth = truth_in;
  if (probs.dim(1) == 1) {
    probs = concat({one_minus(probs_in), probs_in}, 1);
    truth = concat({one_minus(truth_in), truth_in}, 1);
  }
  const auto k = probs.dim(1);
  if (mask.rank() != 4 || mask.dim(1) != 1 || mask.dim(0) != probs.dim(0) || mask.dim(2) != probs.dim(2) ||
      mask.dim(3) != probs.dim(3)) {
    throw DimensionError("soft_f1_loss: mask must be (N, 1, H, W), got " + shape_str(mask.shape()));
  }
  Tensor m = expand_channels(mask.detach(), k);
  Tensor tp = reduce_to_channels(mul(mul(probs, truth), m));
  Tensor psum = reduce_to_channels(mul(probs, m));
  Tensor ysum = reduce_to_channels(mul(truth, m));
  std::vector<std::int64_t> present;
  for (std::int64_t c = 0; c < k; ++c)
    if (ysum.at(c) > 0.0) present.push_back(c);
  if (present.empty()) return Tensor::scalar(0.0, probs.dtype());
  const Shape idx_shape{static_cast<std::int64_t>(present.size())};
  Tensor f1 = div(mul_scalar(gather(tp, 0, present, idx_shape), 2.0),
                  add(gather(psum, 0, present, idx_shape), gather(ysum, 0, present, idx_shape)));
  return one_minus(mean(f1));
}

Tensor masked_mse(const Tensor& pred, const Tensor& target, const Tensor& mask) {
  require_same(pred, target, "masked_mse");
  double count = 0;
  for (double v : mask.to_vector()) count += v;
  if (count == 0.0) return Tensor::scalar(0.0, pred.dtype());
  Tensor m = expand_channels(mask.detach(), pred.dim(1));
  return mul_scalar(sum(mul(square(sub(pred, target)), m)), 1.0 / (count * static_cast<double>(pred.dim(1))));
}

Tensor uncertain_loss(const Tensor& pred_noise, const Tensor& noise, const Tensor& probs, const Tensor& truth,
                      const Tensor& mask, double weight) {
  return add(mul_scalar(masked_mse(pred_noise, noise, mask), weight),
             mul_scalar(soft_f1_loss(probs, truth, mask), 1.0 - weight));
}

}  // namespace udhf2
