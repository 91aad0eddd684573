#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "udhf2/freq.hpp"
#include "udhf2/nn.hpp"

namespace udhf2 {

struct EncoderConfig {
  std::int64_t in_channels = 3;
  std::array<std::int64_t, 4> channel_plan{16, 32, 64, 128};
  int window = 4;
  int heads = 2;
  int groups = 2;
  int points = kDeformPoints;
  int ffn_expansion = 2;
  int blocks_per_stage = 2;
  bool use_stationary = true;
  bool use_non_stationary = true;
  // Replaces the deformable HFTM feed-forward with a plain depthwise-conv FFN.
  bool plain_blocks = false;

  void validate() const;
};

/// Multi-head softmax attention inside non-overlapping window x window tiles.
/// q, k, v: (N, C, H, W) already projected; H and W must be multiples of window.
Tensor window_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, int window);

/// M = Z + proj(window_attention(qkv(LN(Z)))). The window shrinks to the
/// feature size on grids smaller than it.
class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(const Scope& scope, std::int64_t channels, int heads, int window);
  Tensor operator()(const Tensor& z) const;

  LayerNorm norm;
  Conv2d qkv;
  Conv2d proj;
  int heads = 1;
  int window = 1;
};

/// Grouped modulated deformable convolution over a 3x3 sampling grid. Offsets
/// and modulation logits come from zero-initialized 1x1 predictors, so a fresh
/// layer samples the regular grid with uniform weights 1/N.
class DeformableConv {
 public:
  DeformableConv() = default;
  DeformableConv(const Scope& scope, std::int64_t channels, int groups);
  Tensor operator()(const Tensor& m) const;
  /// Modulation logits -> per-group softmax over the sampling points.
  Tensor modulation(const Tensor& logits) const;

  Conv2d offset;
  Conv2d mask;
  Conv2d weight;  // the per-group W_t, stacked along the input axis
  int groups = 1;
};

/// D = (M + LN(DHC(M))) + LN(FFN(M + LN(DHC(M)))).
class HFTMBlock {
 public:
  HFTMBlock() = default;
  HFTMBlock(const Scope& scope, std::int64_t channels, int groups, int expansion);
  Tensor operator()(const Tensor& m) const;

  DeformableConv dhc;
  LayerNorm dhc_norm;
  Conv2d ffn_in;
  Conv2d ffn_out;
  LayerNorm ffn_norm;
};

/// out = M + FFN(LN(M)) with a depthwise 3x3 conv inside the FFN.
class PlainBlock {
 public:
  PlainBlock() = default;
  PlainBlock(const Scope& scope, std::int64_t channels, int expansion);
  Tensor operator()(const Tensor& m) const;

  LayerNorm norm;
  Conv2d ffn_in;
  Conv2d depthwise;
  Conv2d ffn_out;
};

/// Window attention followed by an HFTM (or plain) feed-forward.
class StreamBlock {
 public:
  StreamBlock() = default;
  StreamBlock(const Scope& scope, std::int64_t channels, const EncoderConfig& config);
  Tensor operator()(const Tensor& z) const;

 private:
  AttentionBlock attention_;
  HFTMBlock hftm_;
  PlainBlock plain_;
  bool plain_blocks_ = false;
};

/// Streams of both domains; index 0 is stationary, 1 non-stationary. A
/// disabled domain holds no streams.
using DomainStreams = std::array<std::vector<Tensor>, 2>;

/// Fuses every stream of both domains into the next stage's streams.
/// Output stream k of domain D is the sum over source domains S and streams j
/// of H_jk(S_j): identity for (S = D, j = k), 1x1 conv for (S != D, j = k),
/// (k - j) stride-2 3x3 convs for j < k, 1x1 conv then 2^(j-k) bilinear
/// upsampling for j > k.
class CrossFreqConnect {
 public:
  CrossFreqConnect() = default;
  CrossFreqConnect(const Scope& scope, const EncoderConfig& config, int stage);
  DomainStreams operator()(const DomainStreams& in) const;

  int inputs() const { return inputs_; }
  int outputs() const { return outputs_; }

 private:
  struct Path {
    bool identity = false;
    std::vector<Conv2d> convs;
    int upsample = 1;
  };
  Tensor apply(const Path& path, const Tensor& x) const;

  int inputs_ = 0;
  int outputs_ = 0;
  std::array<bool, 2> enabled_{true, true};
  // paths_[target domain][k][source domain][j]
  std::array<std::vector<std::array<std::vector<Path>, 2>>, 2> paths_;
};

/// Frequency stacks feeding the encoder; a disabled domain is left empty.
struct EncoderInput {
  FrequencyStack stationary;
  FrequencyStack non_stationary;
  bool has_stationary = false;
  bool has_non_stationary = false;
};

EncoderInput decompose_input(const Tensor& image, const EncoderConfig& config);
/// Channel-wise concatenation of two decomposed inputs of the same layout.
EncoderInput concat_inputs(const EncoderInput& a, const EncoderInput& b);

/// One stage: stems for component `stage`, blocks_per_stage stream blocks on
/// each live stream, then the cross-frequency connection.
class EncoderStage {
 public:
  EncoderStage(const Scope& scope, const EncoderConfig& config, int stage);
  DomainStreams operator()(DomainStreams streams, const EncoderInput& input) const;
  int index() const { return stage_; }

 private:
  int stage_;
  EncoderConfig config_;
  std::array<ComponentProjection, 2> stems_;
  // blocks_[domain][stream][block]
  std::array<std::vector<std::vector<StreamBlock>>, 2> blocks_;
  CrossFreqConnect cross_;
};

struct EncodedFeatures {
  StreamSet stationary;
  StreamSet non_stationary;
};

class Encoder {
 public:
  Encoder() = default;
  /// Builds four stages named <scope>.stage1 .. <scope>.stage4.
  Encoder(const Scope& scope, const EncoderConfig& config);
  /// Assembles an encoder from existing stages (used for partial weight sharing).
  Encoder(const EncoderConfig& config, std::array<std::shared_ptr<const EncoderStage>, 4> stages);

  EncodedFeatures encode(const Tensor& image) const;
  EncodedFeatures encode(const EncoderInput& input) const;

  const EncoderConfig& config() const { return config_; }
  const std::shared_ptr<const EncoderStage>& stage(int s) const { return stages_.at(s - 1); }

 private:
  EncoderConfig config_;
  std::array<std::shared_ptr<const EncoderStage>, 4> stages_;
};

}  // namespace udhf2
