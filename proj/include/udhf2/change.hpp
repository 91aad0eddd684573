#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "udhf2/decoder.hpp"
#include "udhf2/mudm.hpp"

namespace udhf2 {

struct ChangeConfig {
  EncoderConfig encoder;
  bool plain_decoder = false;
  // Every encoder stage shared by both branches.
  bool fully_shared = false;
  // |P - Q| per stream in place of the learned alignment.
  bool difference_architecture = false;
  DecoderConfig decoder() const;
};

/// R = BN(ReLU(Conv1x1(Cat(P, Q)))), 2C -> C.
class DifferenceAlign {
 public:
  DifferenceAlign() = default;
  DifferenceAlign(const Scope& scope, std::int64_t channels);
  Tensor operator()(const Tensor& p, const Tensor& q) const;
  /// Output before the batch norm.
  Tensor rectified(const Tensor& p, const Tensor& q) const;
  Conv2d conv;
  BatchNorm norm;
};

struct SiameseFeatures {
  EncodedFeatures p;
  EncodedFeatures q;
};

/// Two encoder branches sharing stages 1-2; stages 3-4 are per branch and
/// named stageS_t1 / stageS_t2. Aligned differences feed one decoder that
/// emits 2-class change logits.
class ChangeNet {
 public:
  ChangeNet() = default;
  ChangeNet(const Scope& scope, const ChangeConfig& config);

  SiameseFeatures encode(const Tensor& image1, const Tensor& image2) const;
  FusedStreams align(const SiameseFeatures& features) const;
  Tensor operator()(const Tensor& image1, const Tensor& image2) const;

  const ChangeConfig& config() const { return config_; }
  const Encoder& branch(int b) const { return b == 1 ? branch1_ : branch2_; }
  const Decoder& decoder() const { return decoder_; }

 private:
  ChangeConfig config_;
  Encoder branch1_;
  Encoder branch2_;
  // aligners_[domain][frequency index]
  std::array<std::array<DifferenceAlign, 4>, 2> aligners_;
  Decoder decoder_;
};

/// Change-class probability (N, 1, H, W) from 2-class logits.
Tensor change_probability(const Tensor& logits);
std::vector<std::int32_t> change_labels(const Tensor& logits);

/// Denoiser for binary change states conditioned on both images.
DenoiserConfig change_denoiser_config(const EncoderConfig& encoder, std::int64_t image_channels = 3);

/// MUDM refinement of a binary change label; the two images are stacked as
/// the conditioning input.
RefineResult cd_refine(const Tensor& change_prob, std::span<const std::int32_t> initial_label, const Tensor& image1,
                       const Tensor& image2, const Denoiser* denoiser, const NoiseSchedule& schedule,
                       const RefineConfig& config);

}  // namespace udhf2
