#include "udhf2/encoder.hpp"

#include <algorithm>
#include <cmath>

namespace udhf2 {
namespace {

constexpr std::array<FrequencyDomain, 2> kDomains{FrequencyDomain::stationary, FrequencyDomain::non_stationary};

}  // namespace

void EncoderConfig::validate() const {
  if (in_channels < 1) throw ConfigError("encoder: in_channels must be >= 1");
  for (auto c : channel_plan) {
    if (c < 1) throw ConfigError("encoder: channel plan entries must be positive");
    if (c % heads != 0) throw ConfigError("encoder: channels " + std::to_string(c) + " not divisible by heads");
    if (c % groups != 0) throw ConfigError("encoder: channels " + std::to_string(c) + " not divisible by groups");
  }
  if (window < 1 || heads < 1 || groups < 1 || ffn_expansion < 1 || blocks_per_stage < 0) {
    throw ConfigError("encoder: window, heads, groups and ffn expansion must be positive");
  }
  if (points != kDeformPoints) throw ConfigError("encoder: only the 3x3 grid of 9 sampling points is supported");
  if (!use_stationary && !use_non_stationary) throw ConfigError("encoder: at least one frequency domain is required");
}

Tensor window_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, int window) {
  if (q.rank() != 4) throw DimensionError("window_attention: expects NCHW, got " + shape_str(q.shape()));
  if (k.shape() != q.shape() || v.shape() != q.shape()) throw DimensionError("window_attention: q, k, v shapes differ");
  const auto n = q.dim(0), c = q.dim(1), h = q.dim(2), w = q.dim(3);
  if (c % heads != 0) throw DimensionError("window_attention: axis 1 (" + std::to_string(c) + ") not divisible by heads");
  if (h % window != 0) throw DimensionError("window_attention: axis 2 (" + std::to_string(h) + ") not divisible by window " + std::to_string(window));
  if (w % window != 0) throw DimensionError("window_attention: axis 3 (" + std::to_string(w) + ") not divisible by window " + std::to_string(window));
  const std::int64_t d = c / heads, L = window, nh = h / L, nw = w / L;
  const std::int64_t batch = n * nh * nw * heads, tokens = L * L;
  auto tiles = [&](const Tensor& x) {
    Tensor t = reshape(x, {n, heads, d, nh, L, nw, L});
    t = permute(t, {0, 3, 5, 1, 4, 6, 2});
    return reshape(t, {batch, tokens, d});
  };
  Tensor scores = mul_scalar(bmm(tiles(q), tiles(k), false, true), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor out = bmm(softmax(scores, 2), tiles(v));
  out = reshape(out, {n, nh, nw, heads, L, L, d});
  out = permute(out, {0, 3, 6, 1, 4, 2, 5});
  return reshape(out, {n, c, h, w});
}

AttentionBlock::AttentionBlock(const Scope& scope, std::int64_t channels, int heads_, int window_)
    : norm(scope.sub("norm"), channels),
      qkv(scope.sub("qkv"), channels, 3 * channels, 1, 1, 0),
      proj(scope.sub("proj"), channels, channels, 1, 1, 0),
      heads(heads_),
      window(window_) {}

Tensor AttentionBlock::operator()(const Tensor& z) const {
  const auto c = z.dim(1);
  const int L = static_cast<int>(std::min<std::int64_t>({window, z.dim(2), z.dim(3)}));
  Tensor t = qkv(norm(z));
  Tensor a = window_attention(slice(t, 1, 0, c), slice(t, 1, c, c), slice(t, 1, 2 * c, c), heads, L);
  return add(z, proj(a));
}

DeformableConv::DeformableConv(const Scope& scope, std::int64_t channels, int groups_)
    : offset(scope.sub("offset"), channels, 2 * groups_ * kDeformPoints, 1, 1, 0, true, 1, Init::zeros),
      mask(scope.sub("modulation"), channels, groups_ * kDeformPoints, 1, 1, 0, true, 1, Init::zeros),
      weight(scope.sub("weight"), channels, channels, 1, 1, 0, false),
      groups(groups_) {}

Tensor DeformableConv::modulation(const Tensor& logits) const {
  const auto n = logits.dim(0), h = logits.dim(2), w = logits.dim(3);
  Tensor u = softmax(reshape(logits, {n, groups, kDeformPoints, h, w}), 2);
  return reshape(u, {n, groups * kDeformPoints, h, w});
}

Tensor DeformableConv::operator()(const Tensor& m) const {
  return weight(deformable_sample(m, offset(m), modulation(mask(m)), groups));
}

HFTMBlock::HFTMBlock(const Scope& scope, std::int64_t channels, int groups, int expansion)
    : dhc(scope.sub("dhc"), channels, groups),
      dhc_norm(scope.sub("dhc_norm"), channels),
      ffn_in(scope.sub("ffn_in"), channels, expansion * channels, 1, 1, 0),
      ffn_out(scope.sub("ffn_out"), expansion * channels, channels, 1, 1, 0),
      ffn_norm(scope.sub("ffn_norm"), channels) {}

Tensor HFTMBlock::operator()(const Tensor& m) const {
  Tensor x = add(m, dhc_norm(dhc(m)));
  return add(x, ffn_norm(ffn_out(gelu(ffn_in(x)))));
}

PlainBlock::PlainBlock(const Scope& scope, std::int64_t channels, int expansion)
    : norm(scope.sub("norm"), channels),
      ffn_in(scope.sub("ffn_in"), channels, expansion * channels, 1, 1, 0),
      depthwise(scope.sub("depthwise"), expansion * channels, expansion * channels, 3, 1, 1, true,
                static_cast<int>(expansion * channels)),
      ffn_out(scope.sub("ffn_out"), expansion * channels, channels, 1, 1, 0) {}

Tensor PlainBlock::operator()(const Tensor& m) const {
  return add(m, ffn_out(gelu(depthwise(gelu(ffn_in(norm(m)))))));
}

StreamBlock::StreamBlock(const Scope& scope, std::int64_t channels, const EncoderConfig& config)
    : attention_(scope.sub("attn"), channels, config.heads, config.window), plain_blocks_(config.plain_blocks) {
  if (plain_blocks_) {
    plain_ = PlainBlock(scope.sub("plain"), channels, config.ffn_expansion);
  } else {
    hftm_ = HFTMBlock(scope.sub("hftm"), channels, config.groups, config.ffn_expansion);
  }
}

Tensor StreamBlock::operator()(const Tensor& z) const {
  Tensor m = attention_(z);
  return plain_blocks_ ? plain_(m) : hftm_(m);
}

CrossFreqConnect::CrossFreqConnect(const Scope& scope, const EncoderConfig& config, int stage)
    : inputs_(stage), outputs_(std::min(stage + 1, 4)), enabled_{config.use_stationary, config.use_non_stationary} {
  const auto& plan = config.channel_plan;
  for (int target = 0; target < 2; ++target) {
    if (!enabled_[target]) continue;
    auto& per_k = paths_[target];
    per_k.resize(static_cast<std::size_t>(outputs_));
    for (int k = 0; k < outputs_; ++k) {
      for (int source = 0; source < 2; ++source) {
        if (!enabled_[source]) continue;
        for (int j = 0; j < inputs_; ++j) {
          Path p;
          auto s = scope.sub(domain_name(kDomains[target]))
                       .sub("out" + std::to_string(k + 1))
                       .sub(std::string(domain_name(kDomains[source])) + "_in" + std::to_string(j + 1));
          if (j == k && source == target) {
            p.identity = true;
          } else if (j == k) {
            p.convs.emplace_back(s, plan[j], plan[k], 1, 1, 0, false);
          } else if (j < k) {
            for (int step = 0; step < k - j; ++step) {
              const auto out = (step + 1 == k - j) ? plan[k] : plan[j];
              p.convs.emplace_back(s.sub("down" + std::to_string(step)), plan[j], out, 3, 2, 1, false);
            }
          } else {
            p.convs.emplace_back(s, plan[j], plan[k], 1, 1, 0, false);
            p.upsample = 1 << (j - k);
          }
          per_k[k][source].push_back(std::move(p));
        }
      }
    }
  }
}

Tensor CrossFreqConnect::apply(const Path& path, const Tensor& x) const {
  if (path.identity) return x;
  Tensor y = x;
  for (std::size_t i = 0; i < path.convs.size(); ++i) {
    y = path.convs[i](y);
    if (i + 1 < path.convs.size()) y = relu(y);
  }
  if (path.upsample > 1) y = bilinear_resize(y, static_cast<double>(path.upsample));
  return y;
}

DomainStreams CrossFreqConnect::operator()(const DomainStreams& in) const {
  for (int d = 0; d < 2; ++d) {
    const auto expected = enabled_[d] ? static_cast<std::size_t>(inputs_) : 0;
    if (in[d].size() != expected) {
      throw StructuralError("cross_freq_connect: " + std::string(domain_name(kDomains[d])) + " domain has " +
                            std::to_string(in[d].size()) + " streams, expected " + std::to_string(expected));
    }
  }
  DomainStreams out;
  for (int target = 0; target < 2; ++target) {
    if (!enabled_[target]) continue;
    for (int k = 0; k < outputs_; ++k) {
      Tensor acc;
      for (int source = 0; source < 2; ++source) {
        if (!enabled_[source]) continue;
        for (int j = 0; j < inputs_; ++j) {
          Tensor t = apply(paths_[target][k][source][j], in[source][j]);
          acc = acc.defined() ? add(acc, t) : t;
        }
      }
      out[target].push_back(acc);
    }
  }
  return out;
}

EncoderInput decompose_input(const Tensor& image, const EncoderConfig& config) {
  if (image.rank() != 4) throw DimensionError("encoder: expects NCHW input, got " + shape_str(image.shape()));
  if (image.dim(1) != config.in_channels) {
    throw DimensionError("encoder: axis 1 has " + std::to_string(image.dim(1)) + " channels, expected " +
                         std::to_string(config.in_channels));
  }
  require_multiple_of_32(image.dim(2), image.dim(3));
  NoGradGuard no_grad;
  EncoderInput in;
  const Tensor x = image.detach();
  if (config.use_stationary) {
    in.stationary = stationary_decompose(x);
    in.has_stationary = true;
  }
  if (config.use_non_stationary) {
    in.non_stationary = dwt_haar_decompose(x);
    in.has_non_stationary = true;
  }
  return in;
}

EncoderInput concat_inputs(const EncoderInput& a, const EncoderInput& b) {
  if (a.has_stationary != b.has_stationary || a.has_non_stationary != b.has_non_stationary) {
    throw StructuralError("concat_inputs: domain layouts differ");
  }
  NoGradGuard no_grad;
  EncoderInput out = a;
  if (a.has_stationary) out.stationary = concat_stacks(a.stationary, b.stationary);
  if (a.has_non_stationary) out.non_stationary = concat_stacks(a.non_stationary, b.non_stationary);
  return out;
}

EncoderStage::EncoderStage(const Scope& scope, const EncoderConfig& config, int stage)
    : stage_(stage), config_(config), cross_(scope.sub("cross"), config, stage) {
  const std::array<bool, 2> enabled{config.use_stationary, config.use_non_stationary};
  for (int d = 0; d < 2; ++d) {
    if (!enabled[d]) continue;
    auto ds = scope.sub(domain_name(kDomains[d]));
    stems_[d] = ComponentProjection(ds.sub("stem"), kDomains[d], config.in_channels, config.channel_plan, stage - 1);
    blocks_[d].resize(static_cast<std::size_t>(stage));
    for (int k = 0; k < stage; ++k) {
      for (int b = 0; b < config.blocks_per_stage; ++b) {
        blocks_[d][k].emplace_back(ds.sub("stream" + std::to_string(k + 1)).sub("block" + std::to_string(b + 1)),
                                   config.channel_plan[k], config);
      }
    }
  }
}

DomainStreams EncoderStage::operator()(DomainStreams streams, const EncoderInput& input) const {
  const std::array<const FrequencyStack*, 2> stacks{input.has_stationary ? &input.stationary : nullptr,
                                                    input.has_non_stationary ? &input.non_stationary : nullptr};
  const std::array<bool, 2> enabled{config_.use_stationary, config_.use_non_stationary};
  for (int d = 0; d < 2; ++d) {
    if (!enabled[d]) continue;
    if (!stacks[d]) throw StructuralError(std::string("encoder: missing ") + domain_name(kDomains[d]) + " stack");
    Tensor stem = stems_[d](stacks[d]->components[stage_ - 1]);
    if (stage_ == 1) {
      streams[d] = {stem};
    } else {
      if (streams[d].size() != static_cast<std::size_t>(stage_)) throw StructuralError("encoder: stream count mismatch");
      streams[d][stage_ - 1] = add(streams[d][stage_ - 1], stem);
    }
    for (int k = 0; k < stage_; ++k) {
      for (const auto& block : blocks_[d][k]) streams[d][k] = block(streams[d][k]);
    }
  }
  return cross_(streams);
}

Encoder::Encoder(const Scope& scope, const EncoderConfig& config) : config_(config) {
  config_.validate();
  for (int s = 1; s <= 4; ++s) {
    stages_[s - 1] = std::make_shared<EncoderStage>(scope.sub("stage" + std::to_string(s)), config_, s);
  }
}

Encoder::Encoder(const EncoderConfig& config, std::array<std::shared_ptr<const EncoderStage>, 4> stages)
    : config_(config), stages_(std::move(stages)) {
  config_.validate();
  for (int s = 1; s <= 4; ++s) {
    if (!stages_[s - 1] || stages_[s - 1]->index() != s) throw StructuralError("encoder: stage list is malformed");
  }
}

EncodedFeatures Encoder::encode(const Tensor& image) const { return encode(decompose_input(image, config_)); }

EncodedFeatures Encoder::encode(const EncoderInput& input) const {
  DomainStreams streams;
  for (const auto& stage : stages_) streams = (*stage)(std::move(streams), input);
  EncodedFeatures out;
  out.stationary.domain = FrequencyDomain::stationary;
  out.non_stationary.domain = FrequencyDomain::non_stationary;
  out.stationary.streams = std::move(streams[0]);
  out.non_stationary.streams = std::move(streams[1]);
  out.stationary.stage = out.non_stationary.stage = 4;
  return out;
}

}  // namespace udhf2
