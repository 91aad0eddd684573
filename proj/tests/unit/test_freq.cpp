#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "udhf2/freq.hpp"
#include "udhf2/ops.hpp"

using namespace udhf2;
using udhf2::testing::random_tensor;

namespace {

double sum_sq(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return s;
}

// Direct filter bank on one 2x2 block, rows first.
std::array<double, 4> haar_block(double a, double b, double c, double d) {
  const double r = 1.0 / std::sqrt(2.0);
  const double tl = r * (a + b), th = r * (a - b), bl = r * (c + d), bh = r * (c - d);
  return {r * (th - bh), r * (tl - bl), r * (th + bh), r * (tl + bl)};
}

}  // namespace

TEST_CASE("filter pair is orthonormal") {
  FilterPair f;
  CHECK(f.high[0] * f.high[0] + f.high[1] * f.high[1] == doctest::Approx(1.0));
  CHECK(f.low[0] * f.low[0] + f.low[1] * f.low[1] == doctest::Approx(1.0));
  CHECK(f.high[0] * f.low[0] + f.high[1] * f.low[1] == doctest::Approx(0.0));
}

TEST_CASE("haar of a constant image") {
  Tensor x = Tensor::full({1, 4, 6}, 2.0, DType::f64);
  auto s = dwt_haar_decompose(x);
  CHECK(s.domain == FrequencyDomain::non_stationary);
  CHECK(s.components[3].shape() == Shape{1, 2, 3});
  for (double v : s.components[3].to_vector()) CHECK(v == doctest::Approx(4.0));
  for (int i = 0; i < 3; ++i)
    for (double v : s.components[i].to_vector()) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("haar of a checkerboard puts everything in HH") {
  std::vector<double> v(16);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) v[y * 4 + x] = ((x + y) % 2 == 0) ? 1.0 : -1.0;
  auto s = dwt_haar_decompose(Tensor::from_values({1, 4, 4}, v, DType::f64));
  for (double h : s.components[0].to_vector()) CHECK(std::abs(h) == doctest::Approx(2.0));
  for (int i = 1; i < 4; ++i)
    for (double c : s.components[i].to_vector()) CHECK(std::abs(c) < 1e-12);
}

TEST_CASE("haar of one block matches the filter bank oracle") {
  auto s = dwt_haar_decompose(Tensor::from_values({2, 2}, std::vector<double>{1, 2, 3, 4}, DType::f64));
  CHECK(s.components[3].item() == doctest::Approx(5.0));
  auto o = haar_block(1, 2, 3, 4);
  for (int i = 0; i < 4; ++i) CHECK(s.components[i].item() == doctest::Approx(o[i]));
  // LH is low along rows, high along columns.
  CHECK(s.components[1].item() == doctest::Approx(-2.0));
  CHECK(s.components[2].item() == doctest::Approx(-1.0));
  CHECK(s.components[0].item() == doctest::Approx(0.0));
}

TEST_CASE("haar matches the oracle on a random multi-channel image") {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({2, 3, 6, 8}, rng);
  auto s = dwt_haar_decompose(x);
  auto v = x.to_vector();
  for (std::int64_t p = 0; p < 6; ++p)
    for (int y = 0; y < 3; ++y)
      for (int xx = 0; xx < 4; ++xx) {
        const auto b = p * 48 + (2 * y) * 8 + 2 * xx;
        auto o = haar_block(v[b], v[b + 1], v[b + 8], v[b + 9]);
        for (int i = 0; i < 4; ++i) CHECK(s.components[i].at(p * 12 + y * 4 + xx) == doctest::Approx(o[i]).epsilon(1e-12));
      }
}

TEST_CASE("haar rejects odd sizes") {
  CHECK_THROWS_AS(dwt_haar_decompose(Tensor::zeros({1, 5, 4}, DType::f64)), DimensionError);
  CHECK_THROWS_AS(dwt_haar_decompose(Tensor::zeros({1, 4, 3}, DType::f64)), DimensionError);
}

TEST_CASE("haar round trip and energy") {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({64, 64}, rng);
  auto s = dwt_haar_decompose(x);
  CHECK(testing::max_abs_diff(dwt_haar_reconstruct(s), x) < 1e-10);
  double e = 0;
  for (auto& c : s.components) e += sum_sq(c.to_vector());
  const double ex = sum_sq(x.to_vector());
  CHECK(std::abs(e - ex) / ex < 1e-8);

  FrequencyStack zero;
  for (auto& c : zero.components) c = Tensor::zeros({3, 3}, DType::f64);
  for (double v : dwt_haar_reconstruct(zero).to_vector()) CHECK(v == 0.0);

  Tensor k = Tensor::full({8, 8}, 1.5, DType::f64);
  CHECK(testing::max_abs_diff(dwt_haar_reconstruct(dwt_haar_decompose(k)), k) < 1e-12);

  s.components[1] = Tensor::zeros({16, 16}, DType::f64);
  CHECK_THROWS_AS(dwt_haar_reconstruct(s), DimensionError);
}

TEST_CASE("dft2 of a constant is DC only") {
  auto sp = dft2(Tensor::full({6, 10}, 3.25, DType::f64));
  CHECK(sp.real[0] == doctest::Approx(3.25));
  for (std::size_t i = 1; i < sp.real.size(); ++i) {
    CHECK(std::abs(sp.real[i]) < 1e-10);
    CHECK(std::abs(sp.imag[i]) < 1e-10);
  }
  CHECK(std::abs(sp.imag[0]) < 1e-10);
}

TEST_CASE("dft2 of a cosine row signal") {
  for (std::int64_t w : {16, 12}) {
    const std::int64_t h = 4, k = 3;
    std::vector<double> v(static_cast<std::size_t>(h * w));
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) v[y * w + x] = std::cos(2 * std::numbers::pi * x * k / w);
    auto sp = dft2(v, h, w);
    for (std::int64_t vv = 0; vv < h; ++vv)
      for (std::int64_t u = 0; u < w; ++u) {
        const double mag = std::hypot(sp.real[vv * w + u], sp.imag[vv * w + u]);
        const bool peak = vv == 0 && (u == k || u == w - k);
        CHECK(mag == doctest::Approx(peak ? 0.5 : 0.0).epsilon(1e-10));
      }
  }
}

TEST_CASE("dft2 Parseval, mean and conjugate symmetry") {
  std::mt19937_64 rng(5);
  for (auto [h, w] : {std::pair<std::int64_t, std::int64_t>{32, 32}, {6, 10}}) {
    Tensor x = random_tensor({h, w}, rng);
    auto v = x.to_vector();
    auto sp = dft2(x);
    double mean = 0;
    for (double a : v) mean += a;
    mean /= static_cast<double>(v.size());
    CHECK(sp.real[0] == doctest::Approx(mean).epsilon(1e-12));
    double ef = 0;
    for (std::size_t i = 0; i < sp.real.size(); ++i) ef += sp.real[i] * sp.real[i] + sp.imag[i] * sp.imag[i];
    const double ex = sum_sq(v);
    CHECK(std::abs(ex - static_cast<double>(h * w) * ef) / ex < 1e-8);
    for (std::int64_t vv = 0; vv < h; ++vv)
      for (std::int64_t u = 0; u < w; ++u) {
        const auto i = vv * w + u, j = ((h - vv) % h) * w + (w - u) % w;
        CHECK(std::abs(sp.real[i] - sp.real[j]) < 1e-10);
        CHECK(std::abs(sp.imag[i] + sp.imag[j]) < 1e-10);
      }
    auto back = idft2_real(sp);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(back[i] == doctest::Approx(v[i]).epsilon(1e-10));
  }
}

TEST_CASE("radial bands partition the spectrum") {
  const std::int64_t h = 32, w = 32;
  std::array<int, 4> counts{};
  for (std::int64_t v = 0; v < h; ++v)
    for (std::int64_t u = 0; u < w; ++u) {
      const int b = radial_band(v, u, h, w);
      REQUIRE(b >= 1);
      REQUIRE(b <= 4);
      ++counts[b - 1];
    }
  CHECK(counts[0] + counts[1] + counts[2] + counts[3] == h * w);
  for (int c : counts) CHECK(c > 0);
  CHECK(radial_band(0, 0, h, w) == 4);
  CHECK(radial_band(0, 16, h, w) == 1);
  CHECK(radial_band(16, 16, h, w) == 1);
}

TEST_CASE("band split examples") {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({32, 32}, rng);
  auto bands = band_split(dft2(x));
  auto v = x.to_vector();
  double err = 0;
  for (std::size_t i = 0; i < v.size(); ++i) err = std::max(err, std::abs(bands[0][i] + bands[1][i] + bands[2][i] + bands[3][i] - v[i]));
  CHECK(err < 1e-8);

  auto c = band_split(dft2(Tensor::full({16, 16}, 0.7, DType::f64)));
  for (double a : c[3]) CHECK(a == doctest::Approx(0.7));
  for (int b = 0; b < 3; ++b)
    for (double a : c[b]) CHECK(std::abs(a) < 1e-10);

  std::vector<double> stripe(16 * 16);
  for (int y = 0; y < 16; ++y)
    for (int xx = 0; xx < 16; ++xx) stripe[y * 16 + xx] = (xx % 2 == 0) ? 1.0 : -1.0;
  auto s = band_split(dft2(stripe, 16, 16));
  for (std::size_t i = 0; i < stripe.size(); ++i) CHECK(s[0][i] == doctest::Approx(stripe[i]));
  for (int b = 1; b < 4; ++b) CHECK(sum_sq(s[b]) < 1e-16);
}

TEST_CASE("stationary stack keeps full resolution and sums to the image") {
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({1, 2, 32, 32}, rng);
  auto s = stationary_decompose(x);
  CHECK(s.domain == FrequencyDomain::stationary);
  Tensor total = s.components[0];
  for (int i = 1; i < 4; ++i) {
    CHECK(s.components[i].shape() == x.shape());
    total = add(total, s.components[i]);
  }
  CHECK(testing::max_abs_diff(total, x) < 1e-8);
}

TEST_CASE("make_streams resolutions, channels and linearity") {
  ParameterRegistry reg(11, DType::f64);
  const std::array<std::int64_t, 4> plan{16, 32, 64, 128};
  StreamProjection ns(Scope(reg, "ns"), FrequencyDomain::non_stationary, 3, plan);
  StreamProjection st(Scope(reg, "st"), FrequencyDomain::stationary, 3, plan);
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({1, 3, 64, 64}, rng);
  for (auto* proj : {&ns, &st}) {
    auto stack = proj == &ns ? dwt_haar_decompose(x) : stationary_decompose(x);
    auto set = make_streams(stack, *proj);
    REQUIRE(set.streams.size() == 4);
    for (int i = 0; i < 4; ++i) {
      CHECK(set.streams[i].shape() == Shape{1, plan[i], 16 >> i, 16 >> i});
    }
  }
  auto zero = dwt_haar_decompose(Tensor::zeros({1, 3, 64, 64}, DType::f64));
  for (auto& s : make_streams(zero, ns).streams)
    for (double v : s.to_vector()) CHECK(v == 0.0);

  auto bad = dwt_haar_decompose(Tensor::zeros({1, 3, 48, 64}, DType::f64));
  CHECK_THROWS_WITH_AS(make_streams(bad, ns), doctest::Contains("32"), DimensionError);
  CHECK_THROWS_AS(make_streams(zero, st), StructuralError);
}
