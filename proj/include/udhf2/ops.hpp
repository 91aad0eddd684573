#pragma once

#include <cstdint>
#include <vector>

#include "udhf2/tensor.hpp"

// Differentiable tensor primitives. Every function records itself on the
// active tape when one of its inputs requires a gradient.
namespace udhf2 {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double value);
Tensor mul_scalar(const Tensor& x, double value);

Tensor relu(const Tensor& x);
// Exact erf form.
Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor square(const Tensor& x);
// Values outside [lo, hi] are pinned; gradient is zero there.
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Reduces `axis` away.
Tensor sum_axis(const Tensor& x, std::int64_t axis);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<std::int64_t>& order);
Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis);
Tensor slice(const Tensor& x, std::int64_t axis, std::int64_t start, std::int64_t length);
/// out[..., i, ...] = x[..., index[..., i, ...], ...] along `axis`; `index_shape`
/// equals x's shape except at `axis`.
Tensor gather(const Tensor& x, std::int64_t axis, const std::vector<std::int64_t>& index,
              const Shape& index_shape);

Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched product of (B, m, k) and (B, k, n) operands, either optionally
/// stored transposed.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);

/// Cross-correlation on NCHW input with OIkk weights (I = C / groups).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding,
              int groups = 1);

/// Bilinear interpolation with align_corners = false. Output size floor(H*scale).
Tensor bilinear_resize(const Tensor& input, double scale);
Tensor resize_to(const Tensor& input, std::int64_t out_h, std::int64_t out_w);

Tensor softmax(const Tensor& x, std::int64_t axis);
Tensor log_softmax(const Tensor& x, std::int64_t axis);

/// Normalizes along `axis` independently at every other position; gamma and
/// beta have length dim(axis).
Tensor layer_norm(const Tensor& x, std::int64_t axis, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

/// Per-channel (axis 1) normalization over batch and spatial positions. In
/// training mode the batch statistics are used and folded into the running
/// buffers; otherwise the running buffers are used.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, double momentum = 0.1, double eps = 1e-5);

/// Modulated deformable sampling over a 3x3 grid of points.
///   input:      (N, E, H, W), E divisible by groups
///   offsets:    (N, 2*groups*9, H, W); channel 2*(t*9+n) is dx, +1 is dy
///   modulation: (N, groups*9, H, W), already normalized
/// out[b, t*E'+e, y, x] = sum_n modulation[b, t*9+n, y, x] *
///                        bilinear(input[b, t*E'+e], y + ky_n + dy, x + kx_n + dx)
/// with zero padding outside the grid.
Tensor deformable_sample(const Tensor& input, const Tensor& offsets, const Tensor& modulation, int groups);

inline constexpr int kDeformPoints = 9;

}  // namespace udhf2
