#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "udhf2/nn.hpp"
#include "udhf2/tensor.hpp"

namespace udhf2 {

enum class FrequencyDomain { stationary, non_stationary };

const char* domain_name(FrequencyDomain domain);

/// One-level Haar analysis filters.
struct FilterPair {
  static constexpr double kInvSqrt2 = 0.70710678118654752440;
  std::array<double, 2> high{kInvSqrt2, -kInvSqrt2};
  std::array<double, 2> low{kInvSqrt2, kInvSqrt2};
};

/// Four frequency components ordered from highest (index 0, i.e. component 1)
/// to lowest. Non-stationary: [HH, LH, HL, LL] at half resolution.
/// Stationary: four radial spectral bands at full resolution.
struct FrequencyStack {
  FrequencyDomain domain = FrequencyDomain::non_stationary;
  std::array<Tensor, 4> components;
  std::int64_t source_height = 0;
  std::int64_t source_width = 0;
};

/// DFT of a real H x W plane with the 1/(WH) factor on the forward transform.
/// Planes are indexed [v][u] (row frequency, column frequency).
struct Spectrum {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<double> real;
  std::vector<double> imag;
};

/// Separable Haar analysis over the last two axes, rows first then columns.
/// Accepts (..., H, W) with H and W even.
FrequencyStack dwt_haar_decompose(const Tensor& image);
Tensor dwt_haar_reconstruct(const FrequencyStack& stack);

Spectrum dft2(std::span<const double> plane, std::int64_t height, std::int64_t width);
Spectrum dft2(const Tensor& plane);
/// Inverse of dft2 (no scaling), real part only.
std::vector<double> idft2_real(const Spectrum& spectrum);

/// Radial band of a spectral bin: 1 = (0.5, 1], 2 = (0.25, 0.5], 3 = (0.125, 0.25],
/// 4 = [0, 0.125]. Radius is measured on the centered spectrum, normalized
/// so the axis Nyquist frequency is 1 and clamped to 1 in the corners.
int radial_band(std::int64_t v, std::int64_t u, std::int64_t height, std::int64_t width);

/// Splits one spectrum into the real parts of four band-limited inverses.
std::array<std::vector<double>, 4> band_split(const Spectrum& spectrum);

/// Stationary stack of (..., H, W): every leading plane is band-split.
FrequencyStack stationary_decompose(const Tensor& image);

/// Per-domain stacks concatenated along the channel axis 1 (NCHW components).
FrequencyStack concat_stacks(const FrequencyStack& a, const FrequencyStack& b);

/// Parallel feature streams of one domain; stream k lives at H / 2^(k+2).
struct StreamSet {
  FrequencyDomain domain = FrequencyDomain::non_stationary;
  std::vector<Tensor> streams;
  int stage = 0;
};

/// Bias-free chain of stride-2 3x3 convs, ReLU between, that brings one
/// component (0-based `index`) to resolution H / 2^(index+2) with
/// channel_plan[index] channels.
class ComponentProjection {
 public:
  ComponentProjection() = default;
  ComponentProjection(const Scope& scope, FrequencyDomain domain, std::int64_t in_channels,
                      const std::array<std::int64_t, 4>& channel_plan, int index);

  Tensor operator()(const Tensor& component) const;
  std::size_t depth() const { return convs_.size(); }

 private:
  std::vector<Conv2d> convs_;
};

/// The four component projections of one domain.
class StreamProjection {
 public:
  StreamProjection() = default;
  StreamProjection(const Scope& scope, FrequencyDomain domain, std::int64_t in_channels,
                   const std::array<std::int64_t, 4>& channel_plan);

  /// Projection of a single component (0-based index).
  Tensor project(const FrequencyStack& stack, int index) const;

  FrequencyDomain domain() const { return domain_; }

 private:
  FrequencyDomain domain_ = FrequencyDomain::non_stationary;
  std::array<ComponentProjection, 4> chains_;
};

/// Projects all four components; the input image size must be a multiple of 32.
StreamSet make_streams(const FrequencyStack& stack, const StreamProjection& projection);

void require_multiple_of_32(std::int64_t height, std::int64_t width);

}  // namespace udhf2
