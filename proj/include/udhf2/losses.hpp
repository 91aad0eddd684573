#pragma once

#include <cstdint>
#include <span>

#include "udhf2/tensor.hpp"

namespace udhf2 {

inline constexpr double kLossEps = 1e-7;

enum class Task { segmentation, change };

const char* task_name(Task task);

struct LossWeights {
  double gamma = 0.5;         // cross-entropy vs dice, segmentation
  double omega = 0.5;         // diffusion vs edge-uncertainty, segmentation
  double g = 0.5;             // wbce vs dice, change detection
  double lambda_class = 0.5;  // change-class weight inside wbce
  double lambda_cd = 0.5;     // diffusion vs edge-uncertainty, change detection

  void validate() const;
};

/// (N, K, H, W) one-hot encoding of labels laid out as (N, H, W).
Tensor one_hot(std::span<const std::int32_t> labels, std::int64_t n, std::int64_t h, std::int64_t w, int classes,
               DType dtype = default_dtype());

/// Per-pixel ratio dice: 1 - 2 * sum(y * p / (y + p + eps)) / pixels.
Tensor ratio_dice_loss(const Tensor& probs, const Tensor& truth);

/// gamma * CE + (1 - gamma) * dice on (N, C, H, W) class probabilities and
/// one-hot truth. Probabilities are clamped to [eps, 1] inside the log.
Tensor seg_hybrid_loss(const Tensor& probs, const Tensor& truth, double gamma);
/// Same loss from logits; the cross-entropy uses log_softmax.
Tensor seg_hybrid_loss_from_logits(const Tensor& logits, const Tensor& truth, double gamma);

/// Per-pixel weighted binary cross-entropy and ratio dice on change
/// probabilities, g * wbce + (1 - g) * dice, averaged over pixels.
Tensor cd_hybrid_loss(const Tensor& change_prob, const Tensor& truth, double g, double lambda_class);

/// 1 - macro soft F1 over the masked pixels; classes absent from the masked
/// truth are skipped. probs and truth are (N, K, H, W); a single channel K = 1
/// is expanded to the two classes {no change, change}. mask is (N, 1, H, W)
/// with values 0/1. Returns 0 when the mask is empty.
Tensor soft_f1_loss(const Tensor& probs, const Tensor& truth, const Tensor& mask);

/// Mean squared noise error over masked pixels (all channels).
Tensor masked_mse(const Tensor& pred, const Tensor& target, const Tensor& mask);

/// w * masked_mse(pred_noise, noise) + (1 - w) * soft_f1_loss(probs, truth).
Tensor uncertain_loss(const Tensor& pred_noise, const Tensor& noise, const Tensor& probs, const Tensor& truth,
                      const Tensor& mask, double weight);

}  // namespace udhf2
