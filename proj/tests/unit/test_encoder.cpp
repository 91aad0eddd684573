#include <cmath>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "udhf2/encoder.hpp"
#include "udhf2/gradcheck.hpp"

using namespace udhf2;
using udhf2::testing::random_tensor;

namespace {

// Naive per-head softmax attention over all H*W tokens.
std::vector<double> full_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  const auto n = q.dim(0), c = q.dim(1), hw = q.dim(2) * q.dim(3), d = c / heads;
  auto Q = q.to_vector(), K = k.to_vector(), V = v.to_vector();
  std::vector<double> out(Q.size(), 0.0);
  for (std::int64_t b = 0; b < n; ++b)
    for (int h = 0; h < heads; ++h)
      for (std::int64_t i = 0; i < hw; ++i) {
        std::vector<double> s(hw);
        double mx = -1e300;
        for (std::int64_t j = 0; j < hw; ++j) {
          double acc = 0;
          for (std::int64_t e = 0; e < d; ++e) acc += Q[(b * c + h * d + e) * hw + i] * K[(b * c + h * d + e) * hw + j];
          s[j] = acc / std::sqrt(static_cast<double>(d));
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (auto& x : s) z += (x = std::exp(x - mx));
        for (std::int64_t e = 0; e < d; ++e) {
          double acc = 0;
          for (std::int64_t j = 0; j < hw; ++j) acc += s[j] / z * V[(b * c + h * d + e) * hw + j];
          out[(b * c + h * d + e) * hw + i] = acc;
        }
      }
  return out;
}

// (1/N) sum_t sum_n W_t M_t(r0 + r_n), zero padding.
std::vector<double> deform_oracle(const Tensor& m, const Tensor& w, int groups) {
  const auto n = m.dim(0), c = m.dim(1), h = m.dim(2), wd = m.dim(3), cg = c / groups;
  auto M = m.to_vector(), W = w.to_vector();
  std::vector<double> sampled(M.size(), 0.0), out(M.size(), 0.0);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < wd; ++x) {
          double acc = 0;
          for (int p = 0; p < 9; ++p) {
            const auto yy = y + p / 3 - 1, xx = x + p % 3 - 1;
            if (yy < 0 || yy >= h || xx < 0 || xx >= wd) continue;
            acc += M[((b * c + ch) * h + yy) * wd + xx];
          }
          sampled[((b * c + ch) * h + y) * wd + x] = acc / 9.0;
        }
  // W_t maps group t's E' channels to E outputs; summing over t is one full matrix.
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t o = 0; o < c; ++o)
      for (int t = 0; t < groups; ++t)
        for (std::int64_t e = 0; e < cg; ++e)
          for (std::int64_t i = 0; i < h * wd; ++i)
            out[(b * c + o) * h * wd + i] += W[o * c + t * cg + e] * sampled[(b * c + t * cg + e) * h * wd + i];
  return out;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void randomize(ParameterRegistry& reg, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (auto& e : reg.entries()) {
    if (!e.trainable) continue;
    Tensor t = e.tensor;
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, dist(rng));
  }
}

}  // namespace

TEST_CASE("single window equals full self-attention") {
  std::mt19937_64 rng(1);
  Tensor q = random_tensor({2, 4, 4, 4}, rng), k = random_tensor({2, 4, 4, 4}, rng), v = random_tensor({2, 4, 4, 4}, rng);
  auto ours = window_attention(q, k, v, 2, 4).to_vector();
  CHECK(max_diff(ours, full_attention(q, k, v, 2)) < 1e-12);
}

TEST_CASE("windows are independent") {
  std::mt19937_64 rng(2);
  Tensor q = random_tensor({1, 4, 8, 8}, rng), k = random_tensor({1, 4, 8, 8}, rng), v = random_tensor({1, 4, 8, 8}, rng);
  auto base = window_attention(q, k, v, 2, 4).to_vector();
  // Zero the top-left window of every input.
  for (auto* t : {&q, &k, &v})
    for (int c = 0; c < 4; ++c)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) t->set((c * 8 + y) * 8 + x, 0.0);
  auto after = window_attention(q, k, v, 2, 4).to_vector();
  for (int c = 0; c < 4; ++c)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        if (y < 4 && x < 4) continue;
        CHECK(after[(c * 8 + y) * 8 + x] == base[(c * 8 + y) * 8 + x]);
      }

  // Swapping two windows of the input swaps them in the output.
  Tensor q2 = q.clone(), k2 = k.clone(), v2 = v.clone();
  for (auto [src, dst] : {std::pair<Tensor*, Tensor*>{&q, &q2}, {&k, &k2}, {&v, &v2}})
    for (int c = 0; c < 4; ++c)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
          dst->set((c * 8 + y) * 8 + x, src->at((c * 8 + y + 4) * 8 + x + 4));
          dst->set((c * 8 + y + 4) * 8 + x + 4, src->at((c * 8 + y) * 8 + x));
        }
  auto a = window_attention(q, k, v, 2, 4).to_vector();
  auto b = window_attention(q2, k2, v2, 2, 4).to_vector();
  for (int c = 0; c < 4; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) CHECK(b[(c * 8 + y) * 8 + x] == doctest::Approx(a[(c * 8 + y + 4) * 8 + x + 4]));
}

TEST_CASE("constant tokens give constant attention output") {
  Tensor x = Tensor::full({1, 4, 8, 8}, 0.3, DType::f64);
  std::mt19937_64 rng(3);
  Tensor q = random_tensor({1, 4, 8, 8}, rng);
  for (double v : window_attention(q, x, x, 2, 4).to_vector()) CHECK(v == doctest::Approx(0.3));
  CHECK_THROWS_AS(window_attention(x, x, x, 2, 3), DimensionError);
}

TEST_CASE("deformable conv with zero offsets matches the loop oracle") {
  std::mt19937_64 rng(4);
  for (int groups : {1, 2}) {
    ParameterRegistry reg(5, DType::f64);
    DeformableConv dc(Scope(reg, "dc"), 4, groups);
    Tensor m = random_tensor({2, 4, 5, 6}, rng);
    auto y = dc(m).to_vector();
    CHECK(max_diff(y, deform_oracle(m, dc.weight.weight, groups)) < 1e-10);
    // Uniform modulation.
    Tensor u = dc.modulation(dc.mask(m));
    for (double v : u.to_vector()) CHECK(v == doctest::Approx(1.0 / 9.0));
    for (double v : dc(Tensor::zeros({1, 4, 5, 6}, DType::f64)).to_vector()) CHECK(v == 0.0);
  }
}

TEST_CASE("deformable conv with +1 x offsets samples the left-shifted image") {
  std::mt19937_64 rng(6);
  ParameterRegistry reg(7, DType::f64);
  DeformableConv dc(Scope(reg, "dc"), 2, 1);
  // Even channels of the offset predictor are dx: set their bias to 1.
  for (int p = 0; p < 9; ++p) dc.offset.bias.set(2 * p, 1.0);
  Tensor m = random_tensor({1, 2, 8, 8}, rng);
  auto shifted = m.clone();
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) shifted.set((c * 8 + y) * 8 + x, x + 1 < 8 ? m.at((c * 8 + y) * 8 + x + 1) : 0.0);
  auto a = dc(m).to_vector();
  ParameterRegistry reg0(7, DType::f64);
  DeformableConv plain(Scope(reg0, "dc"), 2, 1);
  auto b = plain(shifted).to_vector();
  for (int c = 0; c < 2; ++c)
    for (int y = 1; y < 7; ++y)
      for (int x = 1; x < 6; ++x) CHECK(a[(c * 8 + y) * 8 + x] == doctest::Approx(b[(c * 8 + y) * 8 + x]));
}

TEST_CASE("hftm with zeroed weights is the identity") {
  ParameterRegistry reg(8, DType::f64);
  HFTMBlock block(Scope(reg, "b"), 4, 2, 2);
  block.dhc.weight.weight.fill(0.0);
  block.ffn_out.weight.fill(0.0);
  block.ffn_out.bias.fill(0.0);
  std::mt19937_64 rng(9);
  Tensor m = random_tensor({1, 4, 8, 8}, rng);
  Tensor d = block(m);
  CHECK(d.shape() == m.shape());
  CHECK(testing::max_abs_diff(d, m) < 1e-12);
}

TEST_CASE("hftm and attention gradients match finite differences") {
  ParameterRegistry reg(10, DType::f64);
  std::mt19937_64 rng(11);
  HFTMBlock block(Scope(reg, "b"), 4, 2, 2);
  AttentionBlock attn(Scope(reg, "a"), 4, 2, 4);
  randomize(reg, rng, 0.4);
  // Fractional offsets keep every sample away from bilinear kinks.
  block.dhc.offset.bias.copy_from(random_tensor({36}, rng, 0.2, 0.8));
  Tensor m = random_tensor({1, 4, 8, 8}, rng);
  Tensor mix = random_tensor({1, 4, 8, 8}, rng);
  auto params = reg.trainable();
  std::vector<Tensor> inputs{m};
  inputs.insert(inputs.end(), params.begin(), params.end());
  auto r = grad_check([&](const std::vector<Tensor>& in) { return sum(mul(block(attn(in[0])), mix)); }, inputs);
  CHECK(r.max_rel_error < 1e-4);
  CHECK(r.checked > 500);
}

TEST_CASE("cross-frequency connection identity and shapes") {
  ParameterRegistry reg(12, DType::f64);
  EncoderConfig cfg;
  CrossFreqConnect c1(Scope(reg, "c1"), cfg, 1);
  std::mt19937_64 rng(13);
  DomainStreams in;
  in[0] = {random_tensor({1, 16, 16, 16}, rng)};
  in[1] = {random_tensor({1, 16, 16, 16}, rng)};
  // Zero every conv weight whose name marks a non-stationary source.
  for (auto& e : reg.entries())
    if (e.name.find("non_stationary_in") != std::string::npos) reg.get(e.name).fill(0.0);
  auto out = c1(in);
  REQUIRE(out[0].size() == 2);
  CHECK(testing::max_abs_diff(out[0][0], in[0][0]) == 0.0);
  CHECK(out[0][1].shape() == Shape{1, 32, 8, 8});

  CrossFreqConnect c2(Scope(reg, "c2"), cfg, 2);
  in[0].push_back(random_tensor({1, 32, 8, 8}, rng));
  in[1].push_back(random_tensor({1, 32, 8, 8}, rng));
  auto out2 = c2(in);
  for (int d = 0; d < 2; ++d) {
    REQUIRE(out2[d].size() == 3);
    CHECK(out2[d][0].dim(2) == 16);
    CHECK(out2[d][1].dim(2) == 8);
    CHECK(out2[d][2].dim(2) == 4);
  }
  // j = 1 -> k = 3 uses exactly two stride-2 convs.
  int down = 0;
  for (auto& e : reg.entries())
    if (e.name.rfind("c2.stationary.out3.stationary_in1.", 0) == 0) ++down;
  CHECK(down == 2);

  in[1].pop_back();
  CHECK_THROWS_AS(c2(in), StructuralError);
}

TEST_CASE("encoder shape contract, ablation and determinism") {
  EncoderConfig cfg;
  std::mt19937_64 rng(14);
  Tensor image = random_tensor({1, 3, 64, 64}, rng, 0.0, 1.0, DType::f32);
  ParameterRegistry reg(15, DType::f32);
  Encoder enc(Scope(reg, "encoder"), cfg);
  auto f = enc.encode(image);
  for (auto* set : {&f.stationary, &f.non_stationary}) {
    REQUIRE(set->streams.size() == 4);
    for (int i = 0; i < 4; ++i) {
      CHECK(set->streams[i].shape() == Shape{1, cfg.channel_plan[i], 16 >> i, 16 >> i});
      for (double v : set->streams[i].to_vector()) CHECK(std::isfinite(v));
    }
  }
  ParameterRegistry reg2(15, DType::f32);
  Encoder enc2(Scope(reg2, "encoder"), cfg);
  auto g = enc2.encode(image);
  for (int i = 0; i < 4; ++i) {
    CHECK(f.stationary.streams[i].to_vector() == g.stationary.streams[i].to_vector());
    CHECK(f.non_stationary.streams[i].to_vector() == g.non_stationary.streams[i].to_vector());
  }

  EncoderConfig ns = cfg;
  ns.use_stationary = false;
  ParameterRegistry reg3(15, DType::f32);
  Encoder enc3(Scope(reg3, "encoder"), ns);
  auto h = enc3.encode(image);
  CHECK(h.stationary.streams.empty());
  CHECK(h.non_stationary.streams.size() == 4);
  CHECK(reg3.parameter_count() < reg.parameter_count());

  CHECK_THROWS_AS(enc.encode(random_tensor({1, 3, 48, 64}, rng)), DimensionError);
}

TEST_CASE("every encoder parameter receives gradient") {
  EncoderConfig cfg;
  cfg.channel_plan = {4, 8, 8, 8};
  ParameterRegistry reg(16, DType::f64);
  Encoder enc(Scope(reg, "encoder"), cfg);
  std::mt19937_64 rng(17);
  Tensor image = random_tensor({1, 3, 32, 32}, rng, 0.0, 1.0);
  Tape::active().clear();
  auto f = enc.encode(image);
  Tensor loss;
  for (auto* set : {&f.stationary, &f.non_stationary})
    for (auto& s : set->streams) {
      Tensor t = sum(mul(s, random_tensor(s.shape(), rng)));
      loss = loss.defined() ? add(loss, t) : t;
    }
  loss.backward();
  int dead = 0;
  for (auto& e : reg.entries()) {
    if (!e.trainable) continue;
    Tensor g = e.tensor.grad();
    double m = 0;
    if (g.defined())
      for (double v : g.to_vector()) m = std::max(m, std::abs(v));
    if (m == 0.0) {
      ++dead;
      MESSAGE("no gradient: " << e.name);
    }
  }
  CHECK(dead == 0);
  Tape::active().clear();
}
