#include "udhf2/mudm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "udhf2/ops.hpp"

namespace udhf2 {
namespace {

void require_size(std::size_t got, std::int64_t want, const char* what) {
  if (static_cast<std::int64_t>(got) != want) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(want) + " pixels, got " + std::to_string(got));
  }
}

// Image as (N, C, H, W) regardless of a missing batch axis.
Shape batched(const Tensor& image, const char* op) {
  if (image.rank() == 3) return {1, image.dim(0), image.dim(1), image.dim(2)};
  if (image.rank() == 4) return image.shape();
  throw DimensionError(std::string(op) + ": expects (C, H, W) or (N, C, H, W), got " + shape_str(image.shape()));
}

}  // namespace

std::int64_t UncertaintyMask::uncertain_count() const { return std::count(u.begin(), u.end(), std::uint8_t{1}); }
std::int64_t UncertaintyMask::certain_count() const { return std::count(c.begin(), c.end(), std::uint8_t{1}); }

Tensor UncertaintyMask::u_tensor(DType dtype) const {
  Tensor t = Tensor::zeros({n, 1, height, width}, dtype);
  for (std::size_t i = 0; i < u.size(); ++i)
    if (u[i]) t.set(static_cast<std::int64_t>(i), 1.0);
  return t;
}

std::vector<std::uint8_t> probability_uncertainty(const Tensor& probs, double rho) {
  if (probs.rank() != 4) throw DimensionError("probability_uncertainty: expects (N, K, H, W), got " + shape_str(probs.shape()));
  if (!(rho >= 0.0 && rho <= 1.0)) throw ParameterError("rho must lie in [0, 1]");
  const auto n = probs.dim(0), k = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  const auto v = probs.to_vector();
  std::vector<std::uint8_t> out(static_cast<std::size_t>(n * hw), 0);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t i = 0; i < hw; ++i) {
      double best;
      if (k == 1) {
        const double p = v[b * hw + i];
        best = std::max(p, 1.0 - p);
      } else {
        best = 0.0;
        for (std::int64_t c = 0; c < k; ++c) best = std::max(best, v[(b * k + c) * hw + i]);
      }
      out[b * hw + i] = best <= rho ? 1 : 0;
    }
  return out;
}

std::vector<ContourSegment> trace_boundaries(std::span<const std::int32_t> label, std::int64_t h, std::int64_t w) {
  require_size(label.size(), h * w, "trace_boundaries");
  std::vector<ContourSegment> out;
  for (std::int64_t y = 0; y + 1 < h; ++y)
    for (std::int64_t x = 0; x + 1 < w; ++x) {
      // Corners clockwise from top-left.
      const std::array<std::int32_t, 4> v{label[y * w + x], label[y * w + x + 1], label[(y + 1) * w + x + 1],
                                          label[(y + 1) * w + x]};
      if (v[0] == v[1] && v[1] == v[2] && v[2] == v[3]) continue;
      const double fy = static_cast<double>(y), fx = static_cast<double>(x);
      // Edge midpoints: top, right, bottom, left.
      const std::array<std::array<double, 2>, 4> mid{{{fy, fx + 0.5}, {fy + 0.5, fx + 1}, {fy + 1, fx + 0.5}, {fy + 0.5, fx}}};
      std::array<std::int32_t, 4> seen{};
      int distinct = 0;
      for (auto c : v) {
        if (std::find(seen.begin(), seen.begin() + distinct, c) == seen.begin() + distinct) seen[distinct++] = c;
      }
      for (int d = 0; d < distinct; ++d) {
        const auto cls = seen[d];
        int code = 0;
        for (int i = 0; i < 4; ++i) code |= (v[i] == cls ? 1 : 0) << i;
        // Edge e joins corner e and corner e+1.
        std::array<int, 4> crossed{};
        int m = 0;
        for (int e = 0; e < 4; ++e)
          if (((code >> e) & 1) != ((code >> ((e + 1) % 4)) & 1)) crossed[m++] = e;
        auto seg = [&](int e0, int e1) {
          out.push_back({cls, mid[e0][0], mid[e0][1], mid[e1][0], mid[e1][1]});
        };
        if (m == 2) {
          seg(crossed[0], crossed[1]);
        } else if (m == 4) {
          // Saddle: keep the class's corners apart.
          if (code == 0b0101) {
            seg(3, 0);
            seg(1, 2);
          } else {
            seg(0, 1);
            seg(2, 3);
          }
        }
      }
    }
  return out;
}

std::vector<std::uint8_t> dilate(std::span<const std::uint8_t> mask, std::int64_t n, std::int64_t h, std::int64_t w,
                                 int radius) {
  require_size(mask.size(), n * h * w, "dilate");
  std::vector<std::uint8_t> rows(mask.size(), 0), out(mask.size(), 0);
  if (radius <= 0) return {mask.begin(), mask.end()};
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        if (!mask[(b * h + y) * w + x]) continue;
        for (std::int64_t xx = std::max<std::int64_t>(0, x - radius); xx <= std::min(w - 1, x + radius); ++xx)
          rows[(b * h + y) * w + xx] = 1;
      }
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        if (!rows[(b * h + y) * w + x]) continue;
        for (std::int64_t yy = std::max<std::int64_t>(0, y - radius); yy <= std::min(h - 1, y + radius); ++yy)
          out[(b * h + yy) * w + x] = 1;
      }
  return out;
}

std::vector<std::uint8_t> edge_uncertainty(std::span<const std::int32_t> label, std::int64_t n, std::int64_t h,
                                           std::int64_t w, int radius) {
  require_size(label.size(), n * h * w, "edge_uncertainty");
  if (radius < 0) throw ParameterError("buffer_radius must be >= 0");
  std::vector<std::uint8_t> boundary(label.size(), 0);
  for (std::int64_t b = 0; b < n; ++b) {
    auto plane = label.subspan(static_cast<std::size_t>(b * h * w), static_cast<std::size_t>(h * w));
    for (const auto& s : trace_boundaries(plane, h, w)) {
      // The segment's cell is the one whose top-left corner is (floor(min y), floor(min x)).
      const auto cy = static_cast<std::int64_t>(std::floor(std::min(s.y0, s.y1)));
      const auto cx = static_cast<std::int64_t>(std::floor(std::min(s.x0, s.x1)));
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) boundary[(b * h + cy + dy) * w + cx + dx] = 1;
    }
  }
  return dilate(boundary, n, h, w, radius);
}

UncertaintyMask region_combine(std::vector<std::uint8_t> u1, std::vector<std::uint8_t> u2, std::int64_t n,
                               std::int64_t h, std::int64_t w) {
  require_size(u1.size(), n * h * w, "region_combine");
  require_size(u2.size(), n * h * w, "region_combine");
  UncertaintyMask m;
  m.n = n;
  m.height = h;
  m.width = w;
  m.u.resize(u1.size());
  m.c.resize(u1.size());
  for (std::size_t i = 0; i < u1.size(); ++i) {
    m.u[i] = (u1[i] || u2[i]) ? 1 : 0;
    m.c[i] = 1 - m.u[i];
  }
  m.u1 = std::move(u1);
  m.u2 = std::move(u2);
  return m;
}

std::vector<double> mixed_pixel(std::span<const double> mi, std::span<const double> mj, std::span<const double> mk,
                                double alpha, double beta) {
  if (alpha < 0 || beta < 0 || alpha + beta > 1.0 + 1e-12) {
    throw ParameterError("mixed_pixel: need alpha, beta >= 0 and alpha + beta <= 1, got " + std::to_string(alpha) +
                         ", " + std::to_string(beta));
  }
  if (mj.size() != mi.size() || mk.size() != mi.size()) throw DimensionError("mixed_pixel: band counts differ");
  std::vector<double> out(mi.size());
  for (std::size_t i = 0; i < mi.size(); ++i) out[i] = alpha * mi[i] + beta * mj[i] + (1.0 - alpha - beta) * mk[i];
  return out;
}

std::int64_t apply_mixed_pixel_noise(Tensor& image, std::span<const std::int32_t> label, const UncertaintyMask& mask,
                                     double fraction, std::mt19937_64& rng) {
  const auto n = image.dim(0), ch = image.dim(1), h = image.dim(2), w = image.dim(3), hw = h * w;
  require_size(label.size(), n * hw, "apply_mixed_pixel_noise");
  require_size(mask.u.size(), n * hw, "apply_mixed_pixel_noise");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto src = image.to_vector();
  std::int64_t replaced = 0;
  for (std::int64_t b = 0; b < n; ++b) {
    std::vector<std::int32_t> classes;
    std::vector<std::vector<std::int64_t>> members;
    for (std::int64_t i = 0; i < hw; ++i) {
      if (!mask.u[b * hw + i]) continue;
      const auto c = label[b * hw + i];
      auto it = std::find(classes.begin(), classes.end(), c);
      if (it == classes.end()) {
        classes.push_back(c);
        members.emplace_back();
        it = classes.end() - 1;
      }
      members[static_cast<std::size_t>(it - classes.begin())].push_back(i);
    }
    if (classes.size() < 2) continue;
    auto pick = [&](std::size_t cls) {
      const auto& m = members[cls];
      return m[static_cast<std::size_t>(rng() % m.size())];
    };
    for (std::int64_t i = 0; i < hw; ++i) {
      if (!mask.u[b * hw + i] || unit(rng) >= fraction) continue;
      std::vector<std::size_t> order(classes.size());
      for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
      std::shuffle(order.begin(), order.end(), rng);
      double alpha, beta;
      const std::int64_t pi = pick(order[0]), pj = pick(order[1]);
      std::int64_t pk;
      if (classes.size() >= 3) {
        double r1 = unit(rng), r2 = unit(rng);
        if (r1 > r2) std::swap(r1, r2);
        alpha = r1;
        beta = r2 - r1;
        pk = pick(order[2]);
      } else {
        alpha = unit(rng);
        beta = 0.0;
        pk = pj;
      }
      std::vector<double> a(ch), bb(ch), c(ch);
      for (std::int64_t k = 0; k < ch; ++k) {
        a[k] = src[(b * ch + k) * hw + pi];
        bb[k] = src[(b * ch + k) * hw + pj];
        c[k] = src[(b * ch + k) * hw + pk];
      }
      const auto mixed = mixed_pixel(a, bb, c, alpha, beta);
      for (std::int64_t k = 0; k < ch; ++k) image.set((b * ch + k) * hw + i, mixed[k]);
      ++replaced;
    }
  }
  return replaced;
}

Tensor occlusion_noise(const Tensor& image, const Occluder& occ, std::int64_t y, std::int64_t x) {
  const auto s = batched(image, "occlusion_noise");
  if (s[0] != 1) throw DimensionError("occlusion_noise: expects a single image");
  const auto ch = s[1], h = s[2], w = s[3];
  Tensor out = image.clone();
  if (occ.height == 0 || occ.width == 0) return out;
  if (y < 0 || x < 0 || y + occ.height > h || x + occ.width > w) {
    throw ParameterError("occlusion placement (" + std::to_string(y) + ", " + std::to_string(x) + ") with size " +
                         std::to_string(occ.height) + "x" + std::to_string(occ.width) + " falls outside the " +
                         std::to_string(h) + "x" + std::to_string(w) + " image");
  }
  if (occ.patch.dim(0) != ch) throw DimensionError("occlusion_noise: occluder band count differs from the image");
  for (std::int64_t k = 0; k < ch; ++k)
    for (std::int64_t r = 0; r < occ.height; ++r)
      for (std::int64_t c = 0; c < occ.width; ++c) {
        if (!occ.footprint[r * occ.width + c]) continue;
        out.set((k * h + y + r) * w + x + c, occ.patch.at((k * occ.height + r) * occ.width + c));
      }
  return out;
}

int apply_occlusions(Tensor& image, const UncertaintyMask& mask, const std::vector<Occluder>& bank, int count,
                     std::mt19937_64& rng) {
  if (bank.empty() || count <= 0) return 0;
  const auto n = image.dim(0), ch = image.dim(1), h = image.dim(2), w = image.dim(3), hw = h * w;
  int pasted = 0;
  for (std::int64_t b = 0; b < n; ++b) {
    std::vector<std::int64_t> sites;
    for (std::int64_t i = 0; i < hw; ++i)
      if (mask.u[b * hw + i]) sites.push_back(i);
    if (sites.empty()) continue;
    Tensor one = slice(image, 0, b, 1);
    for (int k = 0; k < count; ++k) {
      const auto& occ = bank[static_cast<std::size_t>(rng() % bank.size())];
      if (occ.height > h || occ.width > w) continue;
      const auto site = sites[static_cast<std::size_t>(rng() % sites.size())];
      const auto y = std::clamp(site / w - occ.height / 2, std::int64_t{0}, h - occ.height);
      const auto x = std::clamp(site % w - occ.width / 2, std::int64_t{0}, w - occ.width);
      one = occlusion_noise(one, occ, y, x);
      ++pasted;
    }
    for (std::int64_t i = 0; i < ch * hw; ++i) image.set(b * ch * hw + i, one.at(i));
  }
  return pasted;
}

void AffinePerturbation::validate() const {
  for (double t : {da[0], db[0]}) {
    if (!(std::abs(t) <= kMaxShift)) {
      throw ParameterError("registration: translation perturbation " + std::to_string(t) +
                           " outside [-1.5, 1.5]");
    }
  }
  for (double v : {da[1], da[2], db[1], db[2]}) {
    const double m = std::abs(v);
    if (m != 0.0 && !(m >= kMinLinear && m <= kMaxLinear)) {
      throw ParameterError("registration: linear perturbation " + std::to_string(v) +
                           " must have magnitude in [1e-5, 1e-3] (or be 0)");
    }
  }
}

AffinePerturbation sample_perturbation(std::mt19937_64& rng, double max_shift) {
  if (!(max_shift >= 0 && max_shift <= kMaxShift)) throw ParameterError("registration: max shift must lie in [0, 1.5]");
  std::uniform_real_distribution<double> shift(-max_shift, max_shift);
  std::uniform_real_distribution<double> expo(std::log(kMinLinear), std::log(kMaxLinear));
  std::bernoulli_distribution sign(0.5);
  AffinePerturbation p;
  p.da[0] = shift(rng);
  p.db[0] = shift(rng);
  for (auto* v : {&p.da[1], &p.da[2], &p.db[1], &p.db[2]}) *v = (sign(rng) ? 1.0 : -1.0) * std::exp(expo(rng));
  return p;
}

Tensor registration_warp(const Tensor& image, const AffineCoeffs& k, const AffinePerturbation& d) {
  d.validate();
  const auto s = batched(image, "registration_warp");
  const auto planes = s[0] * s[1], h = s[2], w = s[3];
  const auto src = image.to_vector();
  std::vector<double> out(src.size());
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      double sx = k.a[0] + d.da[0] + (k.a[1] + d.da[1]) * fx + (k.a[2] + d.da[2]) * fy;
      double sy = k.b[0] + d.db[0] + (k.b[1] + d.db[1]) * fx + (k.b[2] + d.db[2]) * fy;
      sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
      sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
      const auto x0 = static_cast<std::int64_t>(std::floor(sx)), y0 = static_cast<std::int64_t>(std::floor(sy));
      const auto x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double lx = sx - static_cast<double>(x0), ly = sy - static_cast<double>(y0);
      for (std::int64_t p = 0; p < planes; ++p) {
        const double* q = src.data() + p * h * w;
        double v = q[y0 * w + x0];
        if (lx != 0.0 || ly != 0.0) {
          v = (1 - ly) * ((1 - lx) * q[y0 * w + x0] + lx * q[y0 * w + x1]) +
              ly * ((1 - lx) * q[y1 * w + x0] + lx * q[y1 * w + x1]);
        }
        out[p * h * w + y * w + x] = v;
      }
    }
  return Tensor::from_values(image.shape(), out, image.dtype());
}

double NoiseSchedule::posterior_variance(int t) const {
  if (t <= 1) return 0.0;
  const double denom = 1.0 - G[t];
  return denom > 0 ? mu[t - 1] * (1.0 - G[t - 1]) / denom : 0.0;
}

NoiseSchedule noise_schedule_build(int steps, double mu_min, double mu_max) {
  if (steps < 1) throw ParameterError("noise schedule needs T >= 1");
  if (!(mu_min >= 0.0 && mu_min <= mu_max && mu_max < 1.0)) {
    throw ParameterError("noise schedule needs 0 <= mu_min <= mu_max < 1, got " + std::to_string(mu_min) + ", " +
                         std::to_string(mu_max));
  }
  NoiseSchedule s;
  s.steps = steps;
  s.G.push_back(1.0);
  for (int t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    const double mu = mu_min + (mu_max - mu_min) * frac;
    s.mu.push_back(mu);
    s.g.push_back(1.0 - mu);
    s.G.push_back(s.G.back() * (1.0 - mu));
  }
  return s;
}

Tensor gaussian_like(const Tensor& like, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(like.numel()));
  for (auto& x : v) x = normal(rng);
  return Tensor::from_values(like.shape(), v, like.dtype());
}

namespace {

// u is (N, 1, H, W); returns whether pixel (b, i) is uncertain.
struct MaskView {
  std::vector<double> u;
  std::int64_t hw;
  bool at(std::int64_t b, std::int64_t i) const { return u[b * hw + i] != 0.0; }
};

MaskView view(const Tensor& u, const Tensor& state) {
  if (u.rank() != 4 || u.dim(1) != 1 || u.dim(0) != state.dim(0) || u.dim(2) != state.dim(2) || u.dim(3) != state.dim(3)) {
    throw DimensionError("uncertainty mask " + shape_str(u.shape()) + " does not match state " + shape_str(state.shape()));
  }
  return {u.to_vector(), state.dim(2) * state.dim(3)};
}

}  // namespace

Tensor forward_diffuse(const Tensor& h0, int t, const NoiseSchedule& schedule, const Tensor& u, const Tensor& noise) {
  if (t < 0 || t > schedule.steps) throw ParameterError("forward_diffuse: t out of range");
  if (noise.shape() != h0.shape()) throw DimensionError("forward_diffuse: noise shape differs from h0");
  const auto m = view(u, h0);
  const auto n = h0.dim(0), k = h0.dim(1);
  const double a = std::sqrt(schedule.G[t]), s = std::sqrt(1.0 - schedule.G[t]);
  auto x = h0.to_vector();
  const auto z = noise.to_vector();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t c = 0; c < k; ++c)
      for (std::int64_t i = 0; i < m.hw; ++i) {
        if (!m.at(b, i)) continue;
        const auto idx = (b * k + c) * m.hw + i;
        x[idx] = a * x[idx] + s * z[idx];
      }
  return Tensor::from_values(h0.shape(), x, h0.dtype());
}

Tensor reverse_step(const Tensor& h_t, int t, const Tensor& predicted_noise, const NoiseSchedule& schedule,
                    const Tensor& u, const Tensor& h0, std::mt19937_64& rng) {
  if (t < 1 || t > schedule.steps) throw ParameterError("reverse_step: t must lie in [1, T]");
  if (predicted_noise.shape() != h_t.shape() || h0.shape() != h_t.shape()) {
    throw DimensionError("reverse_step: state, noise and h0 shapes differ");
  }
  const auto m = view(u, h_t);
  const auto n = h_t.dim(0), k = h_t.dim(1);
  const double mu = schedule.mu[t - 1], one_minus_G = 1.0 - schedule.G[t];
  const double coef = mu > 0 ? mu / std::sqrt(one_minus_G) : 0.0;
  const double inv_sqrt_g = 1.0 / std::sqrt(schedule.g[t - 1]);
  const double sigma = std::sqrt(schedule.posterior_variance(t));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto x = h_t.to_vector();
  const auto eps = predicted_noise.to_vector();
  const auto base = h0.to_vector();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t c = 0; c < k; ++c)
      for (std::int64_t i = 0; i < m.hw; ++i) {
        const auto idx = (b * k + c) * m.hw + i;
        if (!m.at(b, i)) {
          x[idx] = base[idx];
          continue;
        }
        double v = (x[idx] - coef * eps[idx]) * inv_sqrt_g;
        if (t > 1) v += sigma * normal(rng);
        x[idx] = v;
      }
  return Tensor::from_values(h_t.shape(), x, h_t.dtype());
}

Tensor encode_labels(std::span<const std::int32_t> labels, std::int64_t n, std::int64_t h, std::int64_t w, int channels,
                     DType dtype) {
  require_size(labels.size(), n * h * w, "encode_labels");
  if (channels == 1) {
    std::vector<double> v(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != 0 && labels[i] != 1) throw ParameterError("encode_labels: binary labels must be 0 or 1");
      v[i] = labels[i] ? 1.0 : -1.0;
    }
    return Tensor::from_values({n, 1, h, w}, v, dtype);
  }
  Tensor oh = one_hot(labels, n, h, w, channels, DType::f64);
  auto v = oh.to_vector();
  for (auto& x : v) x = 2.0 * x - 1.0;
  return Tensor::from_values(oh.shape(), v, dtype);
}

std::vector<std::int32_t> decode_labels(const Tensor& state) {
  const auto n = state.dim(0), k = state.dim(1), hw = state.dim(2) * state.dim(3);
  const auto v = state.to_vector();
  std::vector<std::int32_t> out(static_cast<std::size_t>(n * hw));
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t i = 0; i < hw; ++i) {
      if (k == 1) {
        out[b * hw + i] = v[b * hw + i] > 0.0 ? 1 : 0;
        continue;
      }
      std::int32_t best = 0;
      for (std::int64_t c = 1; c < k; ++c)
        if (v[(b * k + c) * hw + i] > v[(b * k + best) * hw + i]) best = static_cast<std::int32_t>(c);
      out[b * hw + i] = best;
    }
  return out;
}

Tensor state_probabilities(const Tensor& state) {
  return state.dim(1) == 1 ? sigmoid(mul_scalar(state, 2.0)) : softmax(mul_scalar(state, 2.0), 1);
}

Tensor time_embedding(int t, int steps, std::int64_t n, std::int64_t h, std::int64_t w, DType dtype) {
  const double base = std::numbers::pi / (2.0 * steps);
  const std::array<double, 4> e{std::sin(base * t), std::cos(base * t), std::sin(4 * base * t), std::cos(4 * base * t)};
  Tensor out = Tensor::zeros({n, 4, h, w}, dtype);
  const auto hw = h * w;
  for (std::int64_t b = 0; b < n; ++b)
    for (int c = 0; c < 4; ++c)
      for (std::int64_t i = 0; i < hw; ++i) out.set((b * 4 + c) * hw + i, e[c]);
  return out;
}

namespace {

NetConfig denoiser_net(const DenoiserConfig& c) {
  NetConfig net;
  net.encoder = c.encoder;
  net.encoder.in_channels = c.image_channels + 2 * c.state_channels + 4;
  net.num_classes = c.state_channels;
  net.plain_decoder = c.plain_decoder;
  return net;
}

}  // namespace

Denoiser::Denoiser(const Scope& scope, const DenoiserConfig& config)
    : config_(config), net_(scope, denoiser_net(config)) {
  net_.decoder().head.classifier.weight.fill(0.0);
  net_.decoder().head.classifier.bias.fill(0.0);
}

Denoiser::Condition Denoiser::condition(const Tensor& image, const Tensor& initial_probs) const {
  EncoderConfig cfg = config_.encoder;
  cfg.in_channels = config_.image_channels + config_.state_channels;
  NoGradGuard no_grad;
  Tensor p = initial_probs.detach().to(image.dtype());
  return {decompose_input(concat({image.detach(), p}, 1), cfg), add_scalar(mul_scalar(p, 2.0), -1.0)};
}

Tensor Denoiser::predict_state(const Condition& condition, const Tensor& h_t, int t,
                               const NoiseSchedule& schedule) const {
  EncoderConfig cfg = config_.encoder;
  cfg.in_channels = config_.state_channels + 4;
  const auto n = h_t.dim(0), h = h_t.dim(2), w = h_t.dim(3);
  EncoderInput dynamic;
  {
    NoGradGuard no_grad;
    dynamic = decompose_input(concat({h_t.detach(), time_embedding(t, schedule.steps, n, h, w, h_t.dtype())}, 1), cfg);
  }
  return add(condition.anchor, net_(concat_inputs(condition.input, dynamic)));
}

Tensor Denoiser::noise_from_state(const Tensor& h_t, const Tensor& state, int t, const NoiseSchedule& schedule) const {
  const double one_minus_G = 1.0 - schedule.G[t];
  if (one_minus_G <= 0.0) return mul_scalar(state, 0.0);
  const double s = 1.0 / std::sqrt(one_minus_G);
  return mul_scalar(sub(h_t, mul_scalar(state, std::sqrt(schedule.G[t]))), s);
}

UncertaintyMask build_mask(const Tensor& initial_probs, std::span<const std::int32_t> initial_label, double rho,
                           int buffer_radius) {
  const auto n = initial_probs.dim(0), h = initial_probs.dim(2), w = initial_probs.dim(3);
  return region_combine(probability_uncertainty(initial_probs, rho),
                        edge_uncertainty(initial_label, n, h, w, buffer_radius), n, h, w);
}

RefineResult refine(const Tensor& initial_probs, std::span<const std::int32_t> initial_label, const Tensor& image,
                    const Denoiser* denoiser, const NoiseSchedule& schedule, const RefineConfig& config) {
  if (!denoiser) throw ConfigError("refine: no trained denoiser weights were provided");
  const auto n = initial_probs.dim(0), k = initial_probs.dim(1), h = initial_probs.dim(2), w = initial_probs.dim(3);
  if (k != denoiser->config().state_channels) {
    throw DimensionError("refine: probabilities have " + std::to_string(k) + " channels, denoiser expects " +
                         std::to_string(denoiser->config().state_channels));
  }
  const int classes = k == 1 ? 1 : static_cast<int>(k);
  RefineResult out;
  out.mask = build_mask(initial_probs, initial_label, config.rho, config.buffer_radius);
  out.labels.assign(initial_label.begin(), initial_label.end());
  if (out.mask.uncertain_count() == 0) return out;

  NoGradGuard no_grad;
  const DType dtype = image.dtype();
  Tensor h0 = encode_labels(initial_label, n, h, w, classes, dtype);
  Tensor u = out.mask.u_tensor(dtype);
  std::mt19937_64 rng(config.seed);
  // Pure noise inside U, h0 outside.
  Tensor state;
  {
    auto x = h0.to_vector();
    const auto z = gaussian_like(h0, rng).to_vector();
    const auto hw = h * w;
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t c = 0; c < k; ++c)
        for (std::int64_t i = 0; i < hw; ++i)
          if (out.mask.u[b * hw + i]) x[(b * k + c) * hw + i] = z[(b * k + c) * hw + i];
    state = Tensor::from_values(h0.shape(), x, dtype);
  }
  const auto cond = denoiser->condition(image, initial_probs);
  for (int t = schedule.steps; t >= 1; --t) {
    Tensor est = denoiser->predict_state(cond, state, t, schedule);
    Tensor eps = denoiser->noise_from_state(state, est, t, schedule);
    state = reverse_step(state, t, eps, schedule, u, h0, rng);
    Tape::active().clear();
  }
  const auto decoded = decode_labels(state);
  for (std::size_t i = 0; i < decoded.size(); ++i) {
    if (!out.mask.u[i]) continue;
    if (decoded[i] != out.labels[i]) ++out.changed;
    out.labels[i] = decoded[i];
  }
  return out;
}

}  // namespace udhf2
