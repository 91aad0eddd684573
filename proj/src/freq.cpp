#include "udhf2/freq.hpp"

#include <algorithm>
#include <complex>
#include <numbers>

namespace udhf2 {
namespace {

using cplx = std::complex<double>;

bool is_pow2(std::int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place 1-D transform, sign -1 forward, +1 inverse, unscaled.
void transform1d(std::vector<cplx>& a, int sign) {
  const auto n = static_cast<std::int64_t>(a.size());
  if (n <= 1) return;
  if (is_pow2(n)) {
    for (std::int64_t i = 1, j = 0; i < n; ++i) {
      std::int64_t bit = n >> 1;
      for (; j & bit; bit >>= 1) j ^= bit;
      j ^= bit;
      if (i < j) std::swap(a[i], a[j]);
    }
    for (std::int64_t len = 2; len <= n; len <<= 1) {
      const double ang = sign * 2.0 * std::numbers::pi / static_cast<double>(len);
      for (std::int64_t i = 0; i < n; i += len) {
        for (std::int64_t k = 0; k < len / 2; ++k) {
          const cplx w(std::cos(ang * k), std::sin(ang * k));
          const cplx u = a[i + k];
          const cplx v = a[i + k + len / 2] * w;
          a[i + k] = u + v;
          a[i + k + len / 2] = u - v;
        }
      }
    }
    return;
  }
  std::vector<cplx> out(a.size());
  for (std::int64_t k = 0; k < n; ++k) {
    cplx acc = 0;
    for (std::int64_t x = 0; x < n; ++x) {
      const double ang = sign * 2.0 * std::numbers::pi * static_cast<double>((k * x) % n) / static_cast<double>(n);
      acc += a[x] * cplx(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  a.swap(out);
}

// Separable 2-D transform over an [h][w] complex plane.
void transform2d(std::vector<cplx>& plane, std::int64_t h, std::int64_t w, int sign) {
  std::vector<cplx> line(static_cast<std::size_t>(w));
  for (std::int64_t y = 0; y < h; ++y) {
    std::copy(plane.begin() + y * w, plane.begin() + (y + 1) * w, line.begin());
    transform1d(line, sign);
    std::copy(line.begin(), line.end(), plane.begin() + y * w);
  }
  line.resize(static_cast<std::size_t>(h));
  for (std::int64_t x = 0; x < w; ++x) {
    for (std::int64_t y = 0; y < h; ++y) line[y] = plane[y * w + x];
    transform1d(line, sign);
    for (std::int64_t y = 0; y < h; ++y) plane[y * w + x] = line[y];
  }
}

struct Planes {
  std::int64_t count, h, w;
};

Planes planes_of(const Tensor& t, const char* op) {
  if (t.rank() < 2) throw DimensionError(std::string(op) + ": needs at least two axes");
  const auto h = t.dim(-2), w = t.dim(-1);
  return {t.numel() / std::max<std::int64_t>(1, h * w), h, w};
}

}  // namespace

const char* domain_name(FrequencyDomain domain) {
  return domain == FrequencyDomain::stationary ? "stationary" : "non_stationary";
}

FrequencyStack dwt_haar_decompose(const Tensor& image) {
  const auto p = planes_of(image, "dwt_haar_decompose");
  if (p.h % 2 != 0) throw DimensionError("dwt_haar_decompose: height axis " + std::to_string(image.rank() - 2) + " is odd (" + std::to_string(p.h) + ")");
  if (p.w % 2 != 0) throw DimensionError("dwt_haar_decompose: width axis " + std::to_string(image.rank() - 1) + " is odd (" + std::to_string(p.w) + ")");
  Shape sub = image.shape();
  sub[sub.size() - 2] = p.h / 2;
  sub[sub.size() - 1] = p.w / 2;
  FrequencyStack stack;
  stack.domain = FrequencyDomain::non_stationary;
  stack.source_height = p.h;
  stack.source_width = p.w;
  for (auto& c : stack.components) c = Tensor::zeros(sub, image.dtype());
  const FilterPair f;
  const auto hh = p.h / 2, hw = p.w / 2;
  for (std::int64_t k = 0; k < p.count; ++k) {
    for (std::int64_t y = 0; y < hh; ++y)
      for (std::int64_t x = 0; x < hw; ++x) {
        const auto base = k * p.h * p.w;
        const double a = image.at(base + (2 * y) * p.w + 2 * x);
        const double b = image.at(base + (2 * y) * p.w + 2 * x + 1);
        const double c = image.at(base + (2 * y + 1) * p.w + 2 * x);
        const double d = image.at(base + (2 * y + 1) * p.w + 2 * x + 1);
        // Rows first: filter horizontal neighbours, then vertical.
        const double top_low = f.low[0] * a + f.low[1] * b;
        const double top_high = f.high[0] * a + f.high[1] * b;
        const double bot_low = f.low[0] * c + f.low[1] * d;
        const double bot_high = f.high[0] * c + f.high[1] * d;
        const auto o = k * hh * hw + y * hw + x;
        stack.components[0].set(o, f.high[0] * top_high + f.high[1] * bot_high);  // HH
        stack.components[1].set(o, f.high[0] * top_low + f.high[1] * bot_low);    // LH
        stack.components[2].set(o, f.low[0] * top_high + f.low[1] * bot_high);    // HL
        stack.components[3].set(o, f.low[0] * top_low + f.low[1] * bot_low);      // LL
      }
  }
  return stack;
}

Tensor dwt_haar_reconstruct(const FrequencyStack& stack) {
  const auto& ref = stack.components[3];
  for (const auto& c : stack.components) {
    if (!c.defined() || c.shape() != ref.shape()) {
      throw DimensionError("dwt_haar_reconstruct: component shapes differ");
    }
  }
  const auto p = planes_of(ref, "dwt_haar_reconstruct");
  Shape full = ref.shape();
  full[full.size() - 2] = p.h * 2;
  full[full.size() - 1] = p.w * 2;
  Tensor out = Tensor::zeros(full, ref.dtype());
  const FilterPair f;
  const auto W = p.w * 2;
  for (std::int64_t k = 0; k < p.count; ++k)
    for (std::int64_t y = 0; y < p.h; ++y)
      for (std::int64_t x = 0; x < p.w; ++x) {
        const auto i = k * p.h * p.w + y * p.w + x;
        const double hh = stack.components[0].at(i), lh = stack.components[1].at(i);
        const double hl = stack.components[2].at(i), ll = stack.components[3].at(i);
        // Synthesis is the transpose of the orthonormal analysis.
        const double top_low = f.low[0] * ll + f.high[0] * lh;
        const double bot_low = f.low[1] * ll + f.high[1] * lh;
        const double top_high = f.low[0] * hl + f.high[0] * hh;
        const double bot_high = f.low[1] * hl + f.high[1] * hh;
        const auto base = k * 4 * p.h * p.w;
        out.set(base + (2 * y) * W + 2 * x, f.low[0] * top_low + f.high[0] * top_high);
        out.set(base + (2 * y) * W + 2 * x + 1, f.low[1] * top_low + f.high[1] * top_high);
        out.set(base + (2 * y + 1) * W + 2 * x, f.low[0] * bot_low + f.high[0] * bot_high);
        out.set(base + (2 * y + 1) * W + 2 * x + 1, f.low[1] * bot_low + f.high[1] * bot_high);
      }
  return out;
}

Spectrum dft2(std::span<const double> plane, std::int64_t height, std::int64_t width) {
  if (static_cast<std::int64_t>(plane.size()) != height * width) {
    throw DimensionError("dft2: plane size does not match " + std::to_string(height) + "x" + std::to_string(width));
  }
  std::vector<cplx> buf(plane.begin(), plane.end());
  transform2d(buf, height, width, -1);
  Spectrum s;
  s.height = height;
  s.width = width;
  s.real.resize(buf.size());
  s.imag.resize(buf.size());
  const double scale = 1.0 / static_cast<double>(height * width);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    s.real[i] = buf[i].real() * scale;
    s.imag[i] = buf[i].imag() * scale;
  }
  return s;
}

Spectrum dft2(const Tensor& plane) {
  if (plane.rank() != 2) throw DimensionError("dft2: expects an H x W plane, got " + shape_str(plane.shape()));
  auto v = plane.to_vector();
  return dft2(v, plane.dim(0), plane.dim(1));
}

std::vector<double> idft2_real(const Spectrum& spectrum) {
  std::vector<cplx> buf(spectrum.real.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = cplx(spectrum.real[i], spectrum.imag[i]);
  transform2d(buf, spectrum.height, spectrum.width, +1);
  std::vector<double> out(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) out[i] = buf[i].real();
  return out;
}

int radial_band(std::int64_t v, std::int64_t u, std::int64_t height, std::int64_t width) {
  const double fu = width > 1 ? static_cast<double>(std::min(u, width - u)) / (static_cast<double>(width) / 2.0) : 0.0;
  const double fv = height > 1 ? static_cast<double>(std::min(v, height - v)) / (static_cast<double>(height) / 2.0) : 0.0;
  const double r = std::min(1.0, std::sqrt(fu * fu + fv * fv));
  if (r > 0.5) return 1;
  if (r > 0.25) return 2;
  if (r > 0.125) return 3;
  return 4;
}

std::array<std::vector<double>, 4> band_split(const Spectrum& spectrum) {
  std::array<std::vector<double>, 4> out;
  std::array<Spectrum, 4> parts;
  for (auto& p : parts) {
    p.height = spectrum.height;
    p.width = spectrum.width;
    p.real.assign(spectrum.real.size(), 0.0);
    p.imag.assign(spectrum.imag.size(), 0.0);
  }
  for (std::int64_t v = 0; v < spectrum.height; ++v)
    for (std::int64_t u = 0; u < spectrum.width; ++u) {
      const auto i = static_cast<std::size_t>(v * spectrum.width + u);
      auto& p = parts[radial_band(v, u, spectrum.height, spectrum.width) - 1];
      p.real[i] = spectrum.real[i];
      p.imag[i] = spectrum.imag[i];
    }
  for (int b = 0; b < 4; ++b) out[b] = idft2_real(parts[b]);
  return out;
}

FrequencyStack stationary_decompose(const Tensor& image) {
  const auto p = planes_of(image, "stationary_decompose");
  FrequencyStack stack;
  stack.domain = FrequencyDomain::stationary;
  stack.source_height = p.h;
  stack.source_width = p.w;
  for (auto& c : stack.components) c = Tensor::zeros(image.shape(), image.dtype());
  const auto values = image.to_vector();
  const auto area = p.h * p.w;
  for (std::int64_t k = 0; k < p.count; ++k) {
    std::span<const double> plane(values.data() + k * area, static_cast<std::size_t>(area));
    auto bands = band_split(dft2(plane, p.h, p.w));
    for (int b = 0; b < 4; ++b)
      for (std::int64_t i = 0; i < area; ++i) stack.components[b].set(k * area + i, bands[b][i]);
  }
  return stack;
}

FrequencyStack concat_stacks(const FrequencyStack& a, const FrequencyStack& b) {
  if (a.domain != b.domain) throw StructuralError("concat_stacks: domains differ");
  FrequencyStack out = a;
  for (int i = 0; i < 4; ++i) out.components[i] = concat({a.components[i], b.components[i]}, 1);
  return out;
}

void require_multiple_of_32(std::int64_t height, std::int64_t width) {
  if (height % 32 != 0 || width % 32 != 0 || height <= 0 || width <= 0) {
    throw DimensionError("input size " + std::to_string(height) + "x" + std::to_string(width) +
                         " must be a positive multiple of 32");
  }
}

ComponentProjection::ComponentProjection(const Scope& scope, FrequencyDomain domain, std::int64_t in_channels,
                                         const std::array<std::int64_t, 4>& plan, int index) {
  // Non-stationary components start at H/2, stationary ones at H.
  const int steps = (domain == FrequencyDomain::non_stationary) ? index + 1 : index + 2;
  std::int64_t ch = in_channels;
  for (int k = 0; k < steps; ++k) {
    const std::int64_t out = (k + 1 == steps) ? plan[index] : plan[0];
    convs_.emplace_back(scope.sub("conv" + std::to_string(k)), ch, out, 3, 2, 1, false);
    ch = out;
  }
}

Tensor ComponentProjection::operator()(const Tensor& component) const {
  Tensor x = component;
  if (x.rank() == 3) x = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  for (std::size_t k = 0; k < convs_.size(); ++k) {
    x = convs_[k](x);
    if (k + 1 < convs_.size()) x = relu(x);
  }
  return x;
}

StreamProjection::StreamProjection(const Scope& scope, FrequencyDomain domain, std::int64_t in_channels,
                                   const std::array<std::int64_t, 4>& plan)
    : domain_(domain) {
  for (int i = 0; i < 4; ++i) {
    chains_[i] = ComponentProjection(scope.sub("component" + std::to_string(i + 1)), domain, in_channels, plan, i);
  }
}

Tensor StreamProjection::project(const FrequencyStack& stack, int index) const {
  return chains_[index](stack.components[index]);
}

StreamSet make_streams(const FrequencyStack& stack, const StreamProjection& projection) {
  require_multiple_of_32(stack.source_height, stack.source_width);
  if (stack.domain != projection.domain()) throw StructuralError("make_streams: projection built for the other domain");
  StreamSet set;
  set.domain = stack.domain;
  for (int i = 0; i < 4; ++i) set.streams.push_back(projection.project(stack, i));
  return set;
}

}  // namespace udhf2
