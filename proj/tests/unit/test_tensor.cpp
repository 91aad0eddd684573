#include <cmath>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "udhf2/gradcheck.hpp"
#include "udhf2/nn.hpp"
#include "udhf2/ops.hpp"
#include "udhf2/optim.hpp"

using namespace udhf2;
using udhf2::testing::random_tensor;

namespace {

Tensor t64(const Shape& s, std::vector<double> v) { return Tensor::from_values(s, v, DType::f64); }

}  // namespace

TEST_CASE("conv2d all-ones 3x3 with padding matches the nested-loop oracle") {
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0, DType::f64);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0, DType::f64);
  Tensor y = conv2d(x, w, Tensor(), 1, 1);
  auto oracle = testing::conv_oracle(x.to_vector(), x.shape(), w.to_vector(), w.shape(), 1, 1);
  CHECK(y.to_vector() == oracle);
  CHECK(y.at(4) == 9.0);
  CHECK(y.at(1) == 6.0);
  CHECK(y.at(3) == 6.0);
  CHECK(y.at(0) == 4.0);
  CHECK(y.at(8) == 4.0);
}

TEST_CASE("conv2d identity kernel and output size") {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({1, 1, 4, 4}, rng);
  Tensor w = Tensor::full({1, 1, 1, 1}, 1.0, DType::f64);
  CHECK(conv2d(x, w, Tensor(), 1, 0).to_vector() == x.to_vector());

  Tensor k3 = random_tensor({1, 1, 3, 3}, rng);
  Tensor y = conv2d(x, k3, Tensor(), 2, 1);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
}

TEST_CASE("conv2d agrees with the oracle on random strided instances") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const int stride = 1 + trial % 2, pad = trial % 3 == 0 ? 0 : 1;
    Tensor x = random_tensor({2, 3, 7, 6}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    Tensor y = conv2d(x, w, Tensor(), stride, pad);
    auto oracle = testing::conv_oracle(x.to_vector(), x.shape(), w.to_vector(), w.shape(), stride, pad);
    auto got = y.to_vector();
    REQUIRE(got.size() == oracle.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(oracle[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d shape errors name the offending axis") {
  Tensor x = Tensor::zeros({1, 2, 4, 4}, DType::f64);
  Tensor w = Tensor::zeros({1, 3, 3, 3}, DType::f64);
  try {
    conv2d(x, w, Tensor(), 1, 1);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("axis 1") != std::string::npos);
  }
  Tensor big = Tensor::zeros({1, 2, 5, 5}, DType::f64);
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 2, 2}, DType::f64), Tensor::zeros({1, 2, 5, 5}, DType::f64), Tensor(), 1, 0),
                  DimensionError);
  (void)big;
}

TEST_CASE("bilinear_resize") {
  Tensor c = Tensor::full({1, 2, 3, 5}, 5.0, DType::f64);
  Tensor up = bilinear_resize(c, 2.0);
  CHECK(up.shape() == Shape{1, 2, 6, 10});
  for (double v : up.to_vector()) CHECK(v == doctest::Approx(5.0).epsilon(1e-14));

  Tensor x = t64({1, 1, 2, 2}, {0, 2, 0, 2});
  Tensor y = bilinear_resize(x, 2.0);
  // Reference formula: src = (dst + 0.5) / 2 - 0.5, clamped to [0, 1].
  for (int col = 0; col < 4; ++col) {
    double src = std::clamp((col + 0.5) / 2.0 - 0.5, 0.0, 1.0);
    const double expected = 2.0 * src;
    for (int row = 0; row < 4; ++row) CHECK(y.at(row * 4 + col) == doctest::Approx(expected));
  }
  for (int row = 0; row < 4; ++row)
    for (int col = 1; col < 4; ++col) CHECK(y.at(row * 4 + col) >= y.at(row * 4 + col - 1));

  std::mt19937_64 rng(3);
  Tensor r = random_tensor({1, 2, 4, 4}, rng);
  CHECK(bilinear_resize(r, 1.0).to_vector() == r.to_vector());
  CHECK_THROWS_AS(bilinear_resize(r, 0.0), ParameterError);
  CHECK_THROWS_AS(bilinear_resize(r, -2.0), ParameterError);
}

TEST_CASE("softmax values and stability") {
  auto a = softmax(t64({2}, {0, 0}), 0).to_vector();
  CHECK(a[0] == doctest::Approx(0.5));
  CHECK(a[1] == doctest::Approx(0.5));
  auto b = softmax(t64({2}, {std::log(2.0), 0}), 0).to_vector();
  CHECK(b[0] == doctest::Approx(2.0 / 3.0));
  CHECK(b[1] == doctest::Approx(1.0 / 3.0));
  auto c = softmax(t64({2}, {1000, 0}), 0).to_vector();
  CHECK(std::isfinite(c[0]));
  CHECK(c[0] == doctest::Approx(1.0));
  CHECK(c[1] == doctest::Approx(0.0));

  std::mt19937_64 rng(5);
  Tensor x = random_tensor({3, 4, 5}, rng, -5, 5);
  Tensor s = softmax(x, 1);
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 5; ++i) {
      double total = 0;
      for (int a2 = 0; a2 < 4; ++a2) {
        const double v = s.at((o * 4 + a2) * 5 + i);
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        total += v;
      }
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
}

TEST_CASE("normalize") {
  Tensor ones = Tensor::full({2}, 1.0, DType::f64);
  Tensor zeros = Tensor::zeros({2}, DType::f64);
  Tensor constant = Tensor::full({1, 2, 3, 3}, 4.0, DType::f64);
  for (double v : normalize(constant, NormKind::layer, ones, zeros).to_vector()) CHECK(v == 0.0);

  Tensor x = t64({1, 2}, {1, 3});
  auto y = normalize(x, NormKind::layer, ones, zeros).to_vector();
  CHECK(std::abs(y[0] + 1.0) < 1e-3);
  CHECK(std::abs(y[1] - 1.0) < 1e-3);

  std::mt19937_64 rng(9);
  Tensor r = random_tensor({2, 2, 3, 3}, rng, -4, 4);
  for (double v : normalize(r, NormKind::layer, zeros, zeros).to_vector()) CHECK(v == 0.0);
  for (double v : normalize(r, NormKind::batch, zeros, zeros).to_vector()) CHECK(v == 0.0);

  // Per-group mean before affine.
  Tensor bn = normalize(r, NormKind::batch, ones, zeros);
  for (int ch = 0; ch < 2; ++ch) {
    double m = 0;
    for (int b = 0; b < 2; ++b)
      for (int i = 0; i < 9; ++i) m += bn.at((b * 2 + ch) * 9 + i);
    CHECK(std::abs(m / 18.0) < 1e-4);
  }
}

TEST_CASE("backward: analytic examples") {
  Tensor x = t64({}, {3.0}).set_requires_grad(true);
  Tensor f = mul(x, x);
  f.backward();
  CHECK(x.grad().item() == doctest::Approx(6.0));

  Tensor v = t64({2}, {0.0, 0.0}).set_requires_grad(true);
  Tensor sel = t64({2}, {1.0, 0.0});
  sum(mul(softmax(v, 0), sel)).backward();
  auto g = v.grad().to_vector();
  // Central finite-difference oracle.
  auto fd = [&](int i) {
    NoGradGuard ng;
    auto eval = [&](double d) {
      std::vector<double> p{0.0, 0.0};
      p[i] += d;
      return softmax(t64({2}, p), 0).at(0);
    };
    return (eval(1e-5) - eval(-1e-5)) / 2e-5;
  };
  CHECK(g[0] == doctest::Approx(fd(0)).epsilon(1e-8));
  CHECK(g[1] == doctest::Approx(fd(1)).epsilon(1e-8));
  CHECK(g[0] == doctest::Approx(0.25));
  CHECK(g[1] == doctest::Approx(-0.25));

  Tensor p = t64({}, {1.5}).set_requires_grad(true);
  Tensor q = t64({}, {2.0}).set_requires_grad(true);
  Tensor loss = mul(q, q);
  loss.backward();
  CHECK(!p.grad().defined());
}

TEST_CASE("backward on a detached tensor is a usage error") {
  Tensor x = t64({}, {1.0});
  CHECK_THROWS_AS(x.backward(), UsageError);
  Tensor y = t64({}, {1.0}).set_requires_grad(true);
  Tensor z = mul(y, y);
  CHECK_THROWS_AS(z.detach().backward(), UsageError);
  Tape::active().clear();
}

TEST_CASE("gradient fidelity of primitives") {
  std::mt19937_64 rng(11);
  auto check = [](const char* name, auto fn, std::vector<Tensor> in) {
    auto r = grad_check(fn, std::move(in));
    INFO(name << " rel=" << r.max_rel_error);
    CHECK(r.passed);
  };
  check("add/mul/sub/div", [](const std::vector<Tensor>& v) {
    return sum(div(mul(add(v[0], v[1]), sub(v[0], v[1])), add_scalar(square(v[1]), 1.0)));
  }, {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  check("unary", [](const std::vector<Tensor>& v) {
    return sum(add(add(gelu(v[0]), sigmoid(v[0])), add(exp(v[0]), log(add_scalar(square(v[0]), 0.5)))));
  }, {random_tensor({2, 5}, rng)});
  check("relu/abs", [](const std::vector<Tensor>& v) { return sum(mul(relu(v[0]), abs(v[1]))); },
        {random_tensor({6}, rng), random_tensor({6}, rng)});
  check("sum_axis/permute/reshape", [](const std::vector<Tensor>& v) {
    auto p = permute(v[0], {2, 0, 1});
    return sum(square(sum_axis(reshape(p, {4, -1}), 1)));
  }, {random_tensor({2, 3, 4}, rng)});
  check("concat/slice", [](const std::vector<Tensor>& v) {
    auto c = concat({v[0], v[1]}, 1);
    return sum(square(slice(c, 1, 1, 3)));
  }, {random_tensor({2, 2, 3}, rng), random_tensor({2, 3, 3}, rng)});
  check("gather", [](const std::vector<Tensor>& v) {
    return sum(square(gather(v[0], 1, {2, 0, 1, 1, 0, 2}, {2, 3})));
  }, {random_tensor({2, 3}, rng)});
  check("bmm", [](const std::vector<Tensor>& v) {
    return sum(square(add(bmm(v[0], v[1]), bmm(v[0], v[2], false, true))));
  }, {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 5}, rng), random_tensor({2, 5, 4}, rng)});
  check("bmm transposed a", [](const std::vector<Tensor>& v) {
    return sum(square(bmm(v[0], v[1], true, true)));
  }, {random_tensor({2, 4, 3}, rng), random_tensor({2, 5, 4}, rng)});
  check("matmul", [](const std::vector<Tensor>& v) { return sum(square(matmul(v[0], v[1]))); },
        {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
  check("conv2d", [](const std::vector<Tensor>& v) { return sum(square(conv2d(v[0], v[1], v[2], 2, 1))); },
        {random_tensor({2, 3, 5, 6}, rng), random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng)});
  check("conv2d grouped", [](const std::vector<Tensor>& v) { return sum(square(conv2d(v[0], v[1], Tensor(), 1, 1, 2))); },
        {random_tensor({1, 4, 4, 4}, rng), random_tensor({4, 2, 3, 3}, rng)});
  check("conv2d pointwise", [](const std::vector<Tensor>& v) { return sum(square(conv2d(v[0], v[1], Tensor(), 1, 0))); },
        {random_tensor({2, 3, 3, 2}, rng), random_tensor({5, 3, 1, 1}, rng)});
  check("resize", [](const std::vector<Tensor>& v) {
    return sum(square(add(resize_to(v[0], 6, 5), resize_to(resize_to(v[0], 2, 1), 6, 5))));
  }, {random_tensor({1, 2, 3, 4}, rng)});
  check("softmax", [](const std::vector<Tensor>& v) { return sum(mul(softmax(v[0], 1), v[1])); },
        {random_tensor({2, 4, 3}, rng), random_tensor({2, 4, 3}, rng)});
  check("log_softmax", [](const std::vector<Tensor>& v) { return sum(mul(log_softmax(v[0], -1), v[1])); },
        {random_tensor({3, 5}, rng), random_tensor({3, 5}, rng)});
  check("layer_norm", [](const std::vector<Tensor>& v) {
    return sum(mul(layer_norm(v[0], 1, v[1], v[2]), v[3]));
  }, {random_tensor({2, 4, 2, 3}, rng), random_tensor({4}, rng), random_tensor({4}, rng), random_tensor({2, 4, 2, 3}, rng)});
  check("batch_norm", [](const std::vector<Tensor>& v) {
    return sum(mul(normalize(v[0], NormKind::batch, v[1], v[2]), v[3]));
  }, {random_tensor({2, 3, 2, 2}, rng), random_tensor({3}, rng), random_tensor({3}, rng), random_tensor({2, 3, 2, 2}, rng)});
}

TEST_CASE("AdamW") {
  Tensor p = t64({3}, {1.0, -2.0, 0.5}).set_requires_grad(true);
  {
    AdamW opt({p}, {.lr = 0.1, .weight_decay = 0.0});
    opt.step();
    CHECK(p.to_vector() == std::vector<double>{1.0, -2.0, 0.5});
  }
  {
    AdamW opt({p}, {.lr = 0.1, .weight_decay = 0.1});
    opt.step();
    auto v = p.to_vector();
    CHECK(v[0] == doctest::Approx(0.99));
    CHECK(v[1] == doctest::Approx(-1.98));
    CHECK(v[2] == doctest::Approx(0.495));
  }
  auto run = [] {
    Tensor w = t64({4}, {0.1, 0.2, -0.3, 0.4}).set_requires_grad(true);
    AdamW opt({w}, {.lr = 0.05});
    for (int i = 0; i < 5; ++i) {
      opt.zero_grad();
      sum(square(add_scalar(w, 1.0))).backward();
      opt.step();
    }
    return w.to_vector();
  };
  CHECK(run() == run());
}

TEST_CASE("registry init is deterministic and names are unique") {
  auto build = [] {
    ParameterRegistry reg(42, DType::f32);
    Scope s(reg, "net");
    Conv2d a(s.sub("a"), 3, 4, 3, 1, 1);
    LayerNorm ln(s.sub("ln"), 4);
    return reg.entries().front().tensor.to_vector();
  };
  CHECK(build() == build());
  ParameterRegistry reg(1);
  Scope s(reg, "m");
  Conv2d a(s.sub("c"), 2, 2, 1, 1, 0);
  CHECK_THROWS_AS(Conv2d(s.sub("c"), 2, 2, 1, 1, 0), UsageError);
}
