#include "udhf2/change.hpp"

#include "udhf2/errors.hpp"
#include "udhf2/ops.hpp"

namespace udhf2 {

DecoderConfig ChangeConfig::decoder() const {
  NetConfig net;
  net.encoder = encoder;
  net.num_classes = 2;
  net.plain_decoder = plain_decoder;
  return net.decoder();
}

DifferenceAlign::DifferenceAlign(const Scope& scope, std::int64_t channels)
    : conv(scope.sub("conv"), 2 * channels, channels, 1, 1, 0), norm(scope.sub("bn"), channels) {}

Tensor DifferenceAlign::rectified(const Tensor& p, const Tensor& q) const {
  if (p.shape() != q.shape()) throw DimensionError("difference_align: P and Q shapes differ");
  return relu(conv(concat({p, q}, 1)));
}

Tensor DifferenceAlign::operator()(const Tensor& p, const Tensor& q) const { return norm(rectified(p, q)); }

ChangeNet::ChangeNet(const Scope& scope, const ChangeConfig& config) : config_(config) {
  config_.encoder.validate();
  auto es = scope.sub("encoder");
  if (config_.fully_shared) {
    branch1_ = Encoder(es, config_.encoder);
    branch2_ = branch1_;
  } else {
    std::array<std::shared_ptr<const EncoderStage>, 4> s1, s2;
    for (int s = 1; s <= 2; ++s) {
      s1[s - 1] = std::make_shared<EncoderStage>(es.sub("stage" + std::to_string(s)), config_.encoder, s);
      s2[s - 1] = s1[s - 1];
    }
    for (int s = 3; s <= 4; ++s) {
      const auto name = "stage" + std::to_string(s);
      s1[s - 1] = std::make_shared<EncoderStage>(es.sub(name + "_t1"), config_.encoder, s);
      s2[s - 1] = std::make_shared<EncoderStage>(es.sub(name + "_t2"), config_.encoder, s);
    }
    branch1_ = Encoder(config_.encoder, s1);
    branch2_ = Encoder(config_.encoder, s2);
  }
  if (!config_.difference_architecture) {
    const std::array<bool, 2> enabled{config_.encoder.use_stationary, config_.encoder.use_non_stationary};
    const std::array<const char*, 2> names{"stationary", "non_stationary"};
    for (int d = 0; d < 2; ++d) {
      if (!enabled[d]) continue;
      for (int i = 0; i < 4; ++i) {
        aligners_[d][i] = DifferenceAlign(scope.sub("align").sub(names[d]).sub("f" + std::to_string(i + 1)),
                                          config_.encoder.channel_plan[i]);
      }
    }
  }
  decoder_ = Decoder(scope.sub("decoder"), config_.decoder());
}

SiameseFeatures ChangeNet::encode(const Tensor& image1, const Tensor& image2) const {
  if (image1.shape() != image2.shape()) throw DimensionError("siamese_encode: image shapes differ");
  return {branch1_.encode(image1), branch2_.encode(image2)};
}

FusedStreams ChangeNet::align(const SiameseFeatures& f) const {
  auto combine = [&](int d, const StreamSet& p, const StreamSet& q) {
    StreamSet r{p.domain, {}, p.stage};
    for (std::size_t i = 0; i < p.streams.size(); ++i) {
      r.streams.push_back(config_.difference_architecture ? abs(sub(p.streams[i], q.streams[i]))
                                                          : aligners_[d][i](p.streams[i], q.streams[i]));
    }
    return r;
  };
  EncodedFeatures r;
  if (config_.encoder.use_stationary) r.stationary = combine(0, f.p.stationary, f.q.stationary);
  if (config_.encoder.use_non_stationary) r.non_stationary = combine(1, f.p.non_stationary, f.q.non_stationary);
  r.stationary.domain = FrequencyDomain::stationary;
  r.non_stationary.domain = FrequencyDomain::non_stationary;
  return fuse_features(r);
}

Tensor ChangeNet::operator()(const Tensor& image1, const Tensor& image2) const {
  return decoder_(align(encode(image1, image2)));
}

Tensor change_probability(const Tensor& logits) {
  if (logits.rank() != 4 || logits.dim(1) != 2) throw DimensionError("change_probability: expected (N, 2, H, W)");
  return slice(softmax(logits, 1), 1, 1, 1);
}

std::vector<std::int32_t> change_labels(const Tensor& logits) {
  const auto v = logits.to_vector();
  const auto n = logits.dim(0), hw = logits.dim(2) * logits.dim(3);
  std::vector<std::int32_t> out(static_cast<std::size_t>(n * hw));
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t i = 0; i < hw; ++i) out[b * hw + i] = v[(b * 2 + 1) * hw + i] > v[b * 2 * hw + i] ? 1 : 0;
  return out;
}

DenoiserConfig change_denoiser_config(const EncoderConfig& encoder, std::int64_t image_channels) {
  DenoiserConfig c;
  c.encoder = encoder;
  c.image_channels = 2 * image_channels;
  c.state_channels = 1;
  return c;
}

RefineResult cd_refine(const Tensor& change_prob, std::span<const std::int32_t> initial_label, const Tensor& image1,
                       const Tensor& image2, const Denoiser* denoiser, const NoiseSchedule& schedule,
                       const RefineConfig& config) {
  if (image1.shape() != image2.shape()) throw DimensionError("cd_refine: image shapes differ");
  if (change_prob.rank() != 4 || change_prob.dim(1) != 1) throw DimensionError("cd_refine: expected (N, 1, H, W) probabilities");
  return refine(change_prob, initial_label, concat({image1, image2}, 1), denoiser, schedule, config);
}

}  // namespace udhf2
