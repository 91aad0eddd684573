#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "udhf2/decoder.hpp"
#include "udhf2/losses.hpp"

namespace udhf2 {

/// Per-pixel masks over a batch laid out (N, H, W); 1 marks membership.
struct UncertaintyMask {
  std::int64_t n = 0, height = 0, width = 0;
  std::vector<std::uint8_t> u1, u2, u, c;

  std::int64_t uncertain_count() const;
  std::int64_t certain_count() const;
  /// U as an (N, 1, H, W) 0/1 tensor.
  Tensor u_tensor(DType dtype = default_dtype()) const;
};

/// U1: max class probability <= rho. probs is (N, K, H, W); K = 1 holds a
/// change probability p and its max is max(p, 1 - p).
std::vector<std::uint8_t> probability_uncertainty(const Tensor& probs, double rho);

struct ContourSegment {
  int cls;
  double y0, x0, y1, x1;
};

/// Marching-squares iso-contours (level 0.5) of every class indicator, in
/// pixel-center coordinates. One raster of (H, W) labels.
std::vector<ContourSegment> trace_boundaries(std::span<const std::int32_t> label, std::int64_t height,
                                             std::int64_t width);

/// Pixels lying on a cell crossed by a contour (equivalently: pixels with a
/// differently labeled 8-neighbor), dilated by `radius` in Chebyshev distance.
/// `label` is (N, H, W).
std::vector<std::uint8_t> edge_uncertainty(std::span<const std::int32_t> label, std::int64_t n, std::int64_t height,
                                           std::int64_t width, int radius);

/// Chebyshev dilation of a (N, H, W) mask.
std::vector<std::uint8_t> dilate(std::span<const std::uint8_t> mask, std::int64_t n, std::int64_t height,
                                 std::int64_t width, int radius);

UncertaintyMask region_combine(std::vector<std::uint8_t> u1, std::vector<std::uint8_t> u2, std::int64_t n,
                               std::int64_t height, std::int64_t width);

/// alpha * mi + beta * mj + (1 - alpha - beta) * mk per band.
std::vector<double> mixed_pixel(std::span<const double> mi, std::span<const double> mj, std::span<const double> mk,
                                double alpha, double beta);

/// Replaces a fraction of U pixels of every image with a convex blend of
/// three pixels drawn from distinct classes inside that image's U. image is
/// (N, C, H, W), label (N, H, W). Returns the number of pixels replaced.
std::int64_t apply_mixed_pixel_noise(Tensor& image, std::span<const std::int32_t> label, const UncertaintyMask& mask,
                                     double fraction, std::mt19937_64& rng);

struct Occluder {
  Tensor patch;  // (C, h, w)
  std::vector<std::uint8_t> footprint;
  std::int64_t height = 0, width = 0;
};

/// Pastes the occluder's footprint pixels with top-left corner (y, x) into
/// image (C, H, W) or (1, C, H, W). Labels are never touched.
Tensor occlusion_noise(const Tensor& image, const Occluder& occluder, std::int64_t y, std::int64_t x);

/// Pastes `count` occluders from the bank per image, each centered on a random
/// U pixel where it fits. Returns the number pasted.
int apply_occlusions(Tensor& image, const UncertaintyMask& mask, const std::vector<Occluder>& bank, int count,
                     std::mt19937_64& rng);

/// x' = a0 + da0 + (a1 + da1) x + (a2 + da2) y, y' likewise with b.
struct AffineCoeffs {
  std::array<double, 3> a{0.0, 1.0, 0.0};
  std::array<double, 3> b{0.0, 0.0, 1.0};
};

struct AffinePerturbation {
  std::array<double, 3> da{0.0, 0.0, 0.0};
  std::array<double, 3> db{0.0, 0.0, 0.0};

  /// Translations within +-1.5 px; linear terms 0 or of magnitude in [1e-5, 1e-3].
  void validate() const;
};

inline constexpr double kMaxShift = 1.5;
inline constexpr double kMinLinear = 1e-5;
inline constexpr double kMaxLinear = 1e-3;

AffinePerturbation sample_perturbation(std::mt19937_64& rng, double max_shift = kMaxShift);

/// Inverse-mapped bilinear resampling with edge replication. image (C, H, W)
/// or (N, C, H, W).
Tensor registration_warp(const Tensor& image, const AffineCoeffs& coeffs, const AffinePerturbation& delta);

struct NoiseSchedule {
  int steps = 0;
  std::vector<double> mu;  // mu[t-1] for t = 1..T
  std::vector<double> g;   // g[t-1] = 1 - mu_t
  std::vector<double> G;   // G[t] cumulative product, G[0] = 1

  double posterior_variance(int t) const;
};

/// Linear variances from mu_min to mu_max (zero allowed for a noiseless schedule).
NoiseSchedule noise_schedule_build(int steps, double mu_min, double mu_max);

/// h_t = sqrt(G_t) h0 + sqrt(1 - G_t) noise inside U; h0 elsewhere.
Tensor forward_diffuse(const Tensor& h0, int t, const NoiseSchedule& schedule, const Tensor& u, const Tensor& noise);
Tensor gaussian_like(const Tensor& like, std::mt19937_64& rng);

/// Ancestral update from the predicted noise; pixels outside U are reset to h0.
Tensor reverse_step(const Tensor& h_t, int t, const Tensor& predicted_noise, const NoiseSchedule& schedule,
                    const Tensor& u, const Tensor& h0, std::mt19937_64& rng);

/// Labels -> {-1, +1} state. Multi-class: one-hot per channel; binary (K = 1): +1 marks change.
Tensor encode_labels(std::span<const std::int32_t> labels, std::int64_t n, std::int64_t height, std::int64_t width,
                     int channels, DType dtype = default_dtype());
std::vector<std::int32_t> decode_labels(const Tensor& state);
/// Class probabilities implied by a state estimate: softmax(2 h) or sigmoid(2 h).
Tensor state_probabilities(const Tensor& state);

/// Four-channel sinusoidal timestep embedding broadcast to (N, 4, H, W).
Tensor time_embedding(int t, int steps, std::int64_t n, std::int64_t height, std::int64_t width, DType dtype);

struct DenoiserConfig {
  EncoderConfig encoder;  // in_channels is derived
  std::int64_t image_channels = 3;
  std::int64_t state_channels = 6;
  bool plain_decoder = false;
};

/// The encoder-decoder network reused as the noise predictor. It sees the
/// conditioning image, the initial probabilities, h_t and a time embedding.
/// The h0 estimate is 2p - 1 (p the initial probabilities) plus the network
/// output, whose classifier starts at zero; the predicted noise follows in
/// closed form from h_t = sqrt(G_t) h0 + sqrt(1 - G_t) noise.
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const Scope& scope, const DenoiserConfig& config);

  struct Condition {
    EncoderInput input;
    Tensor anchor;  // 2p - 1
  };

  /// Decomposes the static conditioning channels once.
  Condition condition(const Tensor& image, const Tensor& initial_probs) const;
  Tensor predict_state(const Condition& condition, const Tensor& h_t, int t, const NoiseSchedule& schedule) const;
  Tensor noise_from_state(const Tensor& h_t, const Tensor& state, int t, const NoiseSchedule& schedule) const;

  const DenoiserConfig& config() const { return config_; }

 private:
  DenoiserConfig config_;
  SegmentationNet net_;
};

struct RefineConfig {
  double rho = 0.7;
  int buffer_radius = 2;
  std::uint64_t seed = 0;
};

struct RefineResult {
  std::vector<std::int32_t> labels;
  UncertaintyMask mask;
  std::int64_t changed = 0;
};

UncertaintyMask build_mask(const Tensor& initial_probs, std::span<const std::int32_t> initial_label, double rho,
                           int buffer_radius);

/// Runs the masked reverse process from Gaussian noise in U and decodes the
/// final state inside U; C keeps the initial label. image is (N, C, H, W),
/// initial_probs (N, K, H, W) (K = 1 for change), initial_label (N, H, W).
RefineResult refine(const Tensor& initial_probs, std::span<const std::int32_t> initial_label, const Tensor& image,
                    const Denoiser* denoiser, const NoiseSchedule& schedule, const RefineConfig& config);

}  // namespace udhf2
