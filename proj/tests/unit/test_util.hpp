#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "udhf2/tensor.hpp"

namespace udhf2::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            DType dtype = DType::f64) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor::from_values(shape, v, dtype);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  auto va = a.to_vector(), vb = b.to_vector();
  double m = 0;
  for (std::size_t i = 0; i < va.size(); ++i) m = std::max(m, std::abs(va[i] - vb[i]));
  return m;
}

/// Direct nested-loop cross-correlation, NCHW / OIkk, no groups.
inline std::vector<double> conv_oracle(const std::vector<double>& x, const Shape& xs, const std::vector<double>& w,
                                       const Shape& ws, int stride, int pad) {
  const auto n = xs[0], c = xs[1], h = xs[2], wd = xs[3];
  const auto o = ws[0], k = ws[2];
  const auto oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> y(static_cast<std::size_t>(n * o * oh * ow), 0.0);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t oc = 0; oc < o; ++oc)
      for (std::int64_t yy = 0; yy < oh; ++yy)
        for (std::int64_t xx = 0; xx < ow; ++xx) {
          double acc = 0;
          for (std::int64_t ic = 0; ic < c; ++ic)
            for (std::int64_t ky = 0; ky < k; ++ky)
              for (std::int64_t kx = 0; kx < k; ++kx) {
                const auto iy = yy * stride - pad + ky, ix = xx * stride - pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += x[((b * c + ic) * h + iy) * wd + ix] * w[((oc * c + ic) * k + ky) * k + kx];
              }
          y[((b * o + oc) * oh + yy) * ow + xx] = acc;
        }
  return y;
}

}  // namespace udhf2::testing
