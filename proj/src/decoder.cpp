#include "udhf2/decoder.hpp"

namespace udhf2 {

FusedStreams fuse_domains(const StreamSet& stationary, const StreamSet& non_stationary) {
  if (stationary.streams.size() != 4 || non_stationary.streams.size() != 4) {
    throw StructuralError("fuse_domains: both domains need four streams");
  }
  FusedStreams out;
  for (int i = 0; i < 4; ++i) {
    const auto& s = stationary.streams[i];
    const auto& n = non_stationary.streams[i];
    if (s.dim(2) != n.dim(2) || s.dim(3) != n.dim(3)) {
      throw DimensionError("fuse_domains: stream " + std::to_string(i + 1) + " spatial sizes differ: " +
                           shape_str(n.shape()) + " vs " + shape_str(s.shape()));
    }
    out[i] = concat({n, s}, 1);
  }
  return out;
}

FusedStreams fuse_features(const EncodedFeatures& f) {
  if (f.stationary.streams.empty()) return fuse_domains(f.non_stationary, f.non_stationary);
  if (f.non_stationary.streams.empty()) return fuse_domains(f.stationary, f.stationary);
  return fuse_domains(f.stationary, f.non_stationary);
}

Tensor efficient_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 4 || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("efficient_attention: q, k, v must share one NCHW shape");
  }
  const auto n = q.dim(0), c = q.dim(1), h = q.dim(2), w = q.dim(3);
  Tensor qs = softmax(reshape(q, {n, c, h * w}), 1);
  Tensor ks = softmax(reshape(k, {n, c, h * w}), 2);
  Tensor context = bmm(ks, reshape(v, {n, c, h * w}), false, true);  // (n, c_k, c_v)
  return reshape(bmm(context, qs, true, false), {n, c, h, w});
}

CrossAttention::CrossAttention(const Scope& scope, std::int64_t channels)
    : query(scope.sub("query"), channels, channels, 1, 1, 0),
      key(scope.sub("key"), channels, channels, 1, 1, 0),
      value(scope.sub("value"), channels, channels, 1, 1, 0) {}

Tensor CrossAttention::operator()(const Tensor& low, const Tensor& high) const {
  Tensor v = value(high);
  return add(efficient_attention(query(low), key(high), v), v);
}

SegmentationHead::SegmentationHead(const Scope& scope, std::int64_t channels, std::int64_t num_classes)
    : classifier(scope.sub("classifier"), channels, num_classes, 1, 1, 0) {}

Tensor SegmentationHead::operator()(const Tensor& aggregate) const {
  // A 1x1 conv commutes with bilinear upsampling, so classify first.
  return bilinear_resize(classifier(aggregate), 4.0);
}

Decoder::Decoder(const Scope& scope, const DecoderConfig& config)
    : config_(config), width_(config.fused_channels[0]) {
  for (int i = 0; i < 4; ++i) {
    projections[i] = Conv2d(scope.sub("proj" + std::to_string(i + 1)), config.fused_channels[i], width_, 1, 1, 0);
  }
  if (!config.plain) {
    for (int i = 0; i < 3; ++i) {
      attention[i] = CrossAttention(scope.sub("cross" + std::to_string(i + 1)), width_);
      norms[i] = LayerNorm(scope.sub("norm" + std::to_string(i + 1)), width_);
    }
    ffn_in = Conv2d(scope.sub("ffn_in"), width_, config.ffn_expansion * width_, 1, 1, 0);
    ffn_out = Conv2d(scope.sub("ffn_out"), config.ffn_expansion * width_, width_, 1, 1, 0);
    ffn_norm = LayerNorm(scope.sub("ffn_norm"), width_);
  }
  head = SegmentationHead(scope.sub("head"), width_, config.num_classes);
}

Tensor Decoder::aggregate(const FusedStreams& fused) const {
  if (config_.plain) {
    const auto h = fused[0].dim(2), w = fused[0].dim(3);
    Tensor acc = projections[0](fused[0]);
    for (int i = 1; i < 4; ++i) acc = add(acc, resize_to(projections[i](fused[i]), h, w));
    return acc;
  }
  Tensor agg = projections[3](fused[3]);
  for (int i = 2; i >= 0; --i) {
    Tensor up = bilinear_resize(agg, 2.0);
    Tensor high = projections[i](fused[i]);
    if (up.shape() != high.shape()) {
      throw DimensionError("decoder: stream " + std::to_string(i + 1) + " is " + shape_str(high.shape()) +
                           ", aggregate upsampled to " + shape_str(up.shape()));
    }
    agg = norms[i](add(up, attention[i](up, high)));
  }
  return ffn_norm(add(agg, ffn_out(gelu(ffn_in(agg)))));
}

DecoderConfig NetConfig::decoder() const {
  DecoderConfig d;
  for (int i = 0; i < 4; ++i) d.fused_channels[i] = 2 * encoder.channel_plan[i];
  d.num_classes = num_classes;
  d.ffn_expansion = encoder.ffn_expansion;
  d.plain = plain_decoder;
  return d;
}

SegmentationNet::SegmentationNet(const Scope& scope, const NetConfig& config)
    : config_(config), encoder_(scope.sub("encoder"), config.encoder), decoder_(scope.sub("decoder"), config.decoder()) {}

Tensor SegmentationNet::operator()(const Tensor& image) const {
  return (*this)(decompose_input(image, config_.encoder));
}

Tensor SegmentationNet::operator()(const EncoderInput& input) const {
  return decoder_(fuse_features(encoder_.encode(input)));
}

}  // namespace udhf2
