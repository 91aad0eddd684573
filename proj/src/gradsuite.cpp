#include "udhf2/gradsuite.hpp"

#include <functional>
#include <random>

#include "udhf2/change.hpp"
#include "udhf2/decoder.hpp"
#include "udhf2/encoder.hpp"
#include "udhf2/gradcheck.hpp"
#include "udhf2/losses.hpp"
#include "udhf2/ops.hpp"

namespace udhf2 {

namespace {

Tensor uniform_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = d(rng);
  return Tensor::from_values(shape, v, DType::f64);
}

int pick(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Tensor onehot_tensor(std::mt19937_64& rng, std::int64_t n, std::int64_t k, std::int64_t h, std::int64_t w) {
  std::vector<std::int32_t> labels(static_cast<std::size_t>(n * h * w));
  for (auto& l : labels) l = pick(rng, 0, static_cast<int>(k) - 1);
  return one_hot(labels, n, h, w, static_cast<int>(k), DType::f64);
}

/// Contracts an output with a fixed random tensor so every element matters.
Tensor project(const Tensor& y, const Tensor& mix) { return sum(mul(y, mix)); }

std::vector<Tensor> with_params(std::vector<Tensor> inputs, const ParameterRegistry& reg) {
  for (const auto& p : reg.trainable()) inputs.push_back(p);
  return inputs;
}

using Case = std::function<GradCheckResult(std::mt19937_64&)>;

std::vector<std::pair<std::string, Case>> cases() {
  std::vector<std::pair<std::string, Case>> out;

  out.emplace_back("conv2d", [](std::mt19937_64& rng) {
    const int groups = pick(rng, 1, 2), k = pick(rng, 0, 1) ? 3 : 1, stride = pick(rng, 1, 2);
    const int pad = k == 3 ? pick(rng, 0, 1) : 0;
    const std::int64_t c = 2 * pick(rng, 1, 2), o = groups * pick(rng, 1, 2), h = pick(rng, 3, 6), w = pick(rng, 3, 6);
    Tensor x = uniform_tensor({pick(rng, 1, 2), c, h, w}, rng, -1, 1);
    Tensor wt = uniform_tensor({o, c / groups, k, k}, rng, -1, 1), b = uniform_tensor({o}, rng, -1, 1);
    Tensor probe = conv2d(x, wt, b, stride, pad, groups);
    Tensor mix = uniform_tensor(probe.shape(), rng, -1, 1);
    return grad_check([&](const std::vector<Tensor>& in) { return project(conv2d(in[0], in[1], in[2], stride, pad, groups), mix); },
                      {x, wt, b});
  });

  out.emplace_back("window_attention", [](std::mt19937_64& rng) {
    const int heads = pick(rng, 1, 2), window = pick(rng, 1, 2) * 2;
    const std::int64_t c = heads * pick(rng, 1, 2), h = window * pick(rng, 1, 2), w = window;
    Shape s{1, c, h, w};
    Tensor q = uniform_tensor(s, rng, -1, 1), k = uniform_tensor(s, rng, -1, 1), v = uniform_tensor(s, rng, -1, 1);
    Tensor mix = uniform_tensor(s, rng, -1, 1);
    return grad_check([&](const std::vector<Tensor>& in) { return project(window_attention(in[0], in[1], in[2], heads, window), mix); },
                      {q, k, v});
  });

  out.emplace_back("attention_block", [](std::mt19937_64& rng) {
    ParameterRegistry reg(rng(), DType::f64);
    const int heads = pick(rng, 1, 2);
    AttentionBlock block(Scope(reg, "a"), 2 * heads, heads, 2);
    for (auto& p : reg.trainable()) p.copy_from(uniform_tensor(p.shape(), rng, -0.8, 0.8));
    Tensor z = uniform_tensor({1, 2 * heads, 4, 4}, rng, -1, 1);
    Tensor mix = uniform_tensor(z.shape(), rng, -1, 1);
    return grad_check([&](const std::vector<Tensor>& in) { return project(block(in[0]), mix); }, with_params({z}, reg));
  });

  out.emplace_back("efficient_cross_attention", [](std::mt19937_64& rng) {
    ParameterRegistry reg(rng(), DType::f64);
    const std::int64_t c = pick(rng, 2, 4), h = pick(rng, 2, 4), w = pick(rng, 2, 4);
    CrossAttention att(Scope(reg, "x"), c);
    for (auto& p : reg.trainable()) p.copy_from(uniform_tensor(p.shape(), rng, -0.8, 0.8));
    Tensor lo = uniform_tensor({1, c, h, w}, rng, -1, 1), hi = uniform_tensor({1, c, h, w}, rng, -1, 1);
    Tensor mix = uniform_tensor(lo.shape(), rng, -1, 1);
    return grad_check([&](const std::vector<Tensor>& in) { return project(att(in[0], in[1]), mix); }, with_params({lo, hi}, reg));
  });

  out.emplace_back("deformable_sample", [](std::mt19937_64& rng) {
    const int groups = pick(rng, 1, 2);
    const std::int64_t e = groups * pick(rng, 1, 2), h = pick(rng, 3, 5), w = pick(rng, 3, 5);
    Tensor x = uniform_tensor({1, e, h, w}, rng, -1, 1);
    // Fractional offsets keep every sample off the bilinear kinks.
    std::vector<double> off(static_cast<std::size_t>(2 * groups * kDeformPoints * h * w));
    std::uniform_real_distribution<double> frac(0.15, 0.85);
    for (auto& v : off) v = (pick(rng, 0, 1) ? 1 : -1) * (pick(rng, 0, 1) + frac(rng));
    Tensor offsets = Tensor::from_values({1, 2 * groups * kDeformPoints, h, w}, off, DType::f64);
    Tensor mod = uniform_tensor({1, groups * kDeformPoints, h, w}, rng, 0, 1);
    Tensor mix = uniform_tensor(x.shape(), rng, -1, 1);
    return grad_check([&](const std::vector<Tensor>& in) { return project(deformable_sample(in[0], in[1], in[2], groups), mix); },
                      {x, offsets, mod});
  });

  out.emplace_back("deformable_conv", [](std::mt19937_64& rng) {
    ParameterRegistry reg(rng(), DType::f64);
    const int groups = pick(rng, 1, 2);
    DeformableConv dc(Scope(reg, "d"), 2 * groups, groups);
    for (auto& p : reg.trainable()) p.copy_from(uniform_tensor(p.shape(), rng, -0.3, 0.3));
    // Offset biases push samples to fractional positions.
    reg.get("d.offset.bias").copy_from(uniform_tensor(reg.get("d.offset.bias").shape(), rng, 0.3, 0.7));
    Tensor m = uniform_tensor({1, 2 * groups, 4, 4}, rng, -0.2, 0.2);
    Tensor mix = uniform_tensor(m.shape(), rng, -1, 1);
    return grad_check([&](const std::vector<Tensor>& in) { return project(dc(in[0]), mix); }, with_params({m}, reg));
  });

  out.emplace_back("hftm_block", [](std::mt19937_64& rng) {
    ParameterRegistry reg(rng(), DType::f64);
    HFTMBlock block(Scope(reg, "h"), 2, 1, 2);
    for (auto& p : reg.trainable()) p.copy_from(uniform_tensor(p.shape(), rng, -0.3, 0.3));
    reg.get("h.dhc.offset.bias").copy_from(uniform_tensor(reg.get("h.dhc.offset.bias").shape(), rng, 0.3, 0.7));
    Tensor m = uniform_tensor({1, 2, 4, 4}, rng, -0.2, 0.2);
    Tensor mix = uniform_tensor(m.shape(), rng, -1, 1);
    return grad_check([&](const std::vector<Tensor>& in) { return project(block(in[0]), mix); }, with_params({m}, reg));
  });

  out.emplace_back("layer_norm", [](std::mt19937_64& rng) {
    const std::int64_t c = pick(rng, 2, 5);
    Tensor x = uniform_tensor({pick(rng, 1, 2), c, pick(rng, 1, 4), pick(rng, 1, 4)}, rng, -2, 2);
    Tensor g = uniform_tensor({c}, rng, 0.5, 1.5), b = uniform_tensor({c}, rng, -1, 1);
    Tensor mix = uniform_tensor(x.shape(), rng, -1, 1);
    return grad_check([&](const std::vector<Tensor>& in) { return project(layer_norm(in[0], 1, in[1], in[2]), mix); }, {x, g, b});
  });

  out.emplace_back("batch_norm", [](std::mt19937_64& rng) {
    const std::int64_t c = pick(rng, 1, 4);
    Tensor x = uniform_tensor({pick(rng, 2, 3), c, pick(rng, 1, 3), pick(rng, 1, 3)}, rng, -2, 2);
    Tensor g = uniform_tensor({c}, rng, 0.5, 1.5), b = uniform_tensor({c}, rng, -1, 1);
    Tensor mix = uniform_tensor(x.shape(), rng, -1, 1);
    return grad_check(
        [&](const std::vector<Tensor>& in) {
          Tensor rm = Tensor::zeros({c}, DType::f64), rv = Tensor::full({c}, 1.0, DType::f64);
          return project(batch_norm(in[0], in[1], in[2], rm, rv, true), mix);
        },
        {x, g, b});
  });

  out.emplace_back("bilinear_resize", [](std::mt19937_64& rng) {
    const double scale = pick(rng, 0, 1) ? 2.0 : 4.0;
    Tensor x = uniform_tensor({1, pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)}, rng, -1, 1);
    Tensor mix = uniform_tensor(bilinear_resize(x, scale).shape(), rng, -1, 1);
    return grad_check([&](const std::vector<Tensor>& in) { return project(bilinear_resize(in[0], scale), mix); }, {x});
  });

  out.emplace_back("difference_align", [](std::mt19937_64& rng) {
    ParameterRegistry reg(rng(), DType::f64);
    const std::int64_t c = pick(rng, 1, 3);
    DifferenceAlign al(Scope(reg, "al"), c);
    for (auto& p : reg.trainable()) p.copy_from(uniform_tensor(p.shape(), rng, -1, 1));
    // Positive conv bias keeps the ReLU away from its kink.
    reg.get("al.conv.bias").copy_from(uniform_tensor({c}, rng, 3, 4));
    Tensor p = uniform_tensor({2, c, 3, 3}, rng, -0.5, 0.5), q = uniform_tensor({2, c, 3, 3}, rng, -0.5, 0.5);
    Tensor mix = uniform_tensor(p.shape(), rng, -1, 1);
    return grad_check([&](const std::vector<Tensor>& in) { return project(al(in[0], in[1]), mix); }, with_params({p, q}, reg));
  });

  out.emplace_back("seg_hybrid_loss", [](std::mt19937_64& rng) {
    const std::int64_t k = pick(rng, 2, 5), h = pick(rng, 1, 4), w = pick(rng, 1, 4);
    Tensor truth = onehot_tensor(rng, 1, k, h, w);
    const double gamma = std::uniform_real_distribution<double>(0, 1)(rng);
    return grad_check([&](const std::vector<Tensor>& in) { return seg_hybrid_loss(softmax(in[0], 1), truth, gamma); },
                      {uniform_tensor({1, k, h, w}, rng, -2, 2)});
  });

  out.emplace_back("uncertain_loss", [](std::mt19937_64& rng) {
    const std::int64_t k = pick(rng, 1, 4), h = pick(rng, 2, 4), w = pick(rng, 2, 4);
    Tensor truth = k == 1 ? uniform_tensor({1, 1, h, w}, rng, 0, 1) : onehot_tensor(rng, 1, k, h, w);
    if (k == 1) truth = Tensor::from_values(truth.shape(), [&] {
      auto v = truth.to_vector();
      for (auto& x : v) x = x > 0.5 ? 1.0 : 0.0;
      return v;
    }(), DType::f64);
    std::vector<double> m(static_cast<std::size_t>(h * w));
    for (auto& x : m) x = pick(rng, 0, 3) ? 1.0 : 0.0;
    m[0] = 1.0;
    Tensor mask = Tensor::from_values({1, 1, h, w}, m, DType::f64);
    Tensor noise = uniform_tensor({1, k, h, w}, rng, -1, 1);
    const double weight = std::uniform_real_distribution<double>(0, 1)(rng);
    return grad_check(
        [&](const std::vector<Tensor>& in) {
          Tensor probs = k == 1 ? sigmoid(in[1]) : softmax(in[1], 1);
          return uncertain_loss(in[0], noise, probs, truth, mask, weight);
        },
        {uniform_tensor({1, k, h, w}, rng, -1, 1), uniform_tensor({1, k, h, w}, rng, -2, 2)});
  });

  out.emplace_back("cd_hybrid_loss", [](std::mt19937_64& rng) {
    const std::int64_t h = pick(rng, 1, 4), w = pick(rng, 1, 4);
    std::vector<double> t(static_cast<std::size_t>(h * w));
    for (auto& x : t) x = pick(rng, 0, 1);
    Tensor truth = Tensor::from_values({1, 1, h, w}, t, DType::f64);
    const double g = std::uniform_real_distribution<double>(0, 1)(rng);
    const double lambda = std::uniform_real_distribution<double>(0, 1)(rng);
    return grad_check([&](const std::vector<Tensor>& in) { return cd_hybrid_loss(in[0], truth, g, lambda); },
                      {uniform_tensor({1, 1, h, w}, rng, 0.05, 0.95)});
  });

  return out;
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed, int instances) {
  std::vector<GradSuiteEntry> report;
  std::mt19937_64 rng(seed);
  for (auto& [name, fn] : cases()) {
    GradSuiteEntry e;
    e.name = name;
    for (int i = 0; i < instances; ++i) {
      const auto r = fn(rng);
      ++e.instances;
      e.passed += r.passed ? 1 : 0;
      e.worst_rel_error = std::max(e.worst_rel_error, r.max_rel_error);
      e.checked += r.checked;
    }
    report.push_back(e);
  }
  return report;
}

}  // namespace udhf2
