#pragma once

#include <array>
#include <cstdint>

#include "udhf2/encoder.hpp"
#include "udhf2/nn.hpp"

namespace udhf2 {

using FusedStreams = std::array<Tensor, 4>;

/// Channel concatenation per frequency index, non-stationary first.
FusedStreams fuse_domains(const StreamSet& stationary, const StreamSet& non_stationary);
/// fuse_domains on encoder output; a single live domain is fused with itself.
FusedStreams fuse_features(const EncodedFeatures& features);

/// Linear-complexity attention on projected (N, C, H, W) maps of equal size:
/// E = softmax_channels(Q) . (softmax_tokens(K)^T . V).
Tensor efficient_attention(const Tensor& q, const Tensor& k, const Tensor& v);

/// Q from the (already upsampled) aggregate, K and V from a higher-frequency stream.
class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(const Scope& scope, std::int64_t channels);
  /// Efficient attention plus the projected values themselves, so the
  /// high-frequency stream also contributes per pixel.
  Tensor operator()(const Tensor& low, const Tensor& high) const;

  Conv2d query;
  Conv2d key;
  Conv2d value;
};

/// 4x bilinear upsampling followed by a 1x1 conv to class logits.
class SegmentationHead {
 public:
  SegmentationHead() = default;
  SegmentationHead(const Scope& scope, std::int64_t channels, std::int64_t num_classes);
  Tensor operator()(const Tensor& aggregate) const;

  Conv2d classifier;
};

struct DecoderConfig {
  std::array<std::int64_t, 4> fused_channels{32, 64, 128, 256};
  std::int64_t num_classes = 6;
  int ffn_expansion = 2;
  // Sum-and-upsample stand-in instead of the cross-attention aggregation.
  bool plain = false;
};

class Decoder {
 public:
  Decoder() = default;
  Decoder(const Scope& scope, const DecoderConfig& config);

  /// Coarse-to-fine aggregation ending at stream-1 resolution.
  Tensor aggregate(const FusedStreams& fused) const;
  Tensor operator()(const FusedStreams& fused) const { return head(aggregate(fused)); }

  std::int64_t width() const { return width_; }

  std::array<Conv2d, 4> projections;
  std::array<CrossAttention, 3> attention;  // index i fuses stream i+1
  std::array<LayerNorm, 3> norms;
  Conv2d ffn_in;
  Conv2d ffn_out;
  LayerNorm ffn_norm;
  SegmentationHead head;

 private:
  DecoderConfig config_;
  std::int64_t width_ = 0;
};

struct NetConfig {
  EncoderConfig encoder;
  std::int64_t num_classes = 6;
  bool plain_decoder = false;

  DecoderConfig decoder() const;
};

/// Encoder + decoder producing per-pixel logits at input resolution.
class SegmentationNet {
 public:
  SegmentationNet() = default;
  SegmentationNet(const Scope& scope, const NetConfig& config);

  Tensor operator()(const Tensor& image) const;
  Tensor operator()(const EncoderInput& input) const;

  const NetConfig& config() const { return config_; }
  const Encoder& encoder() const { return encoder_; }
  const Decoder& decoder() const { return decoder_; }
  Decoder& decoder() { return decoder_; }

 private:
  NetConfig config_;
  Encoder encoder_;
  Decoder decoder_;
};

}  // namespace udhf2
