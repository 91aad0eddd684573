#include <cmath>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "udhf2/gradcheck.hpp"
#include "udhf2/losses.hpp"
#include "udhf2/metrics.hpp"
#include "udhf2/ops.hpp"

using namespace udhf2;
using udhf2::testing::random_tensor;

namespace {

Tensor random_probs(const Shape& s, std::mt19937_64& rng) { return softmax(random_tensor(s, rng, -2, 2), 1); }

Tensor random_onehot(std::int64_t n, int k, std::int64_t h, std::int64_t w, std::mt19937_64& rng) {
  std::vector<std::int32_t> labels(static_cast<std::size_t>(n * h * w));
  for (auto& l : labels) l = static_cast<std::int32_t>(rng() % k);
  return one_hot(labels, n, h, w, k, DType::f64);
}

Tensor mask_from(const std::vector<double>& v, const Shape& s) { return Tensor::from_values(s, v, DType::f64); }

}  // namespace

TEST_CASE("seg hybrid loss examples") {
  std::vector<std::int32_t> labels{0, 3, 5, 2};
  Tensor y = one_hot(labels, 1, 2, 2, 6, DType::f64);
  CHECK(seg_hybrid_loss(y, y, 1.0).item() == doctest::Approx(0.0));
  CHECK(seg_hybrid_loss(y, y, 0.0).item() == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(seg_hybrid_loss(y, y, 0.5).item() < 1e-6);
  Tensor uniform = Tensor::full({1, 6, 2, 2}, 1.0 / 6.0, DType::f64);
  CHECK(seg_hybrid_loss(uniform, y, 1.0).item() == doctest::Approx(std::log(6.0)));
  const double dice = ratio_dice_loss(uniform, y).item();
  CHECK(seg_hybrid_loss(uniform, y, 0.0).item() == doctest::Approx(dice));
  CHECK(seg_hybrid_loss(uniform, y, 0.3).item() == doctest::Approx(0.3 * std::log(6.0) + 0.7 * dice));
  CHECK_THROWS_AS(seg_hybrid_loss(uniform, Tensor::zeros({1, 5, 2, 2}, DType::f64), 0.5), DimensionError);

  // From logits agrees with the probability form.
  std::mt19937_64 rng(1);
  Tensor logits = random_tensor({2, 6, 3, 3}, rng, -2, 2);
  Tensor t = random_onehot(2, 6, 3, 3, rng);
  CHECK(seg_hybrid_loss_from_logits(logits, t, 0.5).item() ==
        doctest::Approx(seg_hybrid_loss(softmax(logits, 1), t, 0.5).item()).epsilon(1e-10));
}

TEST_CASE("seg hybrid loss decreases as mass moves to the true class") {
  Tensor y = one_hot(std::vector<std::int32_t>{1}, 1, 1, 1, 3, DType::f64);
  double prev = 1e9;
  for (double p = 0.1; p < 0.95; p += 0.1) {
    const double rest = (1.0 - p) / 2.0;
    Tensor probs = Tensor::from_values({1, 3, 1, 1}, std::vector<double>{rest, p, rest}, DType::f64);
    const double l = seg_hybrid_loss(probs, y, 0.5).item();
    CHECK(l < prev);
    CHECK(l >= 0.0);
    prev = l;
  }
}

TEST_CASE("cd hybrid loss examples") {
  Tensor one = Tensor::full({1, 1, 2, 2}, 1.0, DType::f64);
  CHECK(cd_hybrid_loss(one, one, 0.0, 0.5).item() == doctest::Approx(0.0).epsilon(1e-6));
  Tensor half = Tensor::full({1, 1, 2, 2}, 0.5, DType::f64);
  CHECK(cd_hybrid_loss(half, one, 1.0, 0.5).item() == doctest::Approx(-0.5 * std::log(0.5)));
  Tensor zero = Tensor::zeros({1, 1, 2, 2}, DType::f64);
  // lambda = 1: only change pixels contribute to wbce.
  CHECK(cd_hybrid_loss(half, zero, 1.0, 1.0).item() == doctest::Approx(0.0));
  CHECK(cd_hybrid_loss(half, one, 1.0, 1.0).item() == doctest::Approx(std::log(2.0)));
  // eps clamp keeps p = 0 finite.
  CHECK(std::isfinite(cd_hybrid_loss(zero, one, 1.0, 0.5).item()));
}

TEST_CASE("uncertain loss examples") {
  std::mt19937_64 rng(2);
  Tensor noise = random_tensor({1, 2, 4, 4}, rng);
  Tensor mask = Tensor::full({1, 1, 4, 4}, 1.0, DType::f64);
  CHECK(masked_mse(noise, noise, mask).item() == 0.0);
  Tensor y = random_onehot(1, 2, 4, 4, rng);
  CHECK(soft_f1_loss(y, y, mask).item() == doctest::Approx(0.0));
  CHECK(uncertain_loss(noise, noise, y, y, mask, 0.5).item() == doctest::Approx(0.0));

  // Binary change: TP = 3, FP = 1, FN = 1 inside U -> F1 = 0.75.
  std::vector<double> pred{1, 1, 1, 1, 0, 0, 0, 0}, truth{1, 1, 1, 0, 1, 0, 0, 0};
  Tensor p = mask_from(pred, {1, 1, 2, 4}), t = mask_from(truth, {1, 1, 2, 4});
  Tensor u = Tensor::full({1, 1, 2, 4}, 1.0, DType::f64);
  CHECK(soft_f1_loss(p, t, u).item() == doctest::Approx(0.25));
  // Pixels outside U are ignored.
  std::vector<double> pred2 = pred, truth2 = truth, umask(8, 1.0);
  pred2.insert(pred2.end(), {1, 0}), truth2.insert(truth2.end(), {0, 1}), umask.insert(umask.end(), {0, 0});
  CHECK(soft_f1_loss(mask_from(pred2, {1, 1, 1, 10}), mask_from(truth2, {1, 1, 1, 10}), mask_from(umask, {1, 1, 1, 10}))
            .item() == doctest::Approx(0.25));
  // Empty U: the term vanishes.
  Tensor empty = Tensor::zeros({1, 1, 2, 4}, DType::f64);
  CHECK(soft_f1_loss(p, t, empty).item() == 0.0);
  CHECK(masked_mse(p, t, empty).item() == 0.0);
}

TEST_CASE("losses pass finite-difference checks") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor t = random_onehot(1, 3, 3, 3, rng);
    Tensor logits = random_tensor({1, 3, 3, 3}, rng, -2, 2);
    auto r1 = grad_check([&](const std::vector<Tensor>& in) { return seg_hybrid_loss(softmax(in[0], 1), t, 0.4); }, {logits});
    CHECK(r1.max_rel_error < 1e-4);
    Tensor cp = random_tensor({1, 1, 3, 3}, rng, 0.05, 0.95);
    Tensor ct = Tensor::from_values({1, 1, 3, 3}, std::vector<double>{1, 0, 1, 0, 0, 1, 1, 1, 0}, DType::f64);
    auto r2 = grad_check([&](const std::vector<Tensor>& in) { return cd_hybrid_loss(in[0], ct, 0.6, 0.7); }, {cp});
    CHECK(r2.max_rel_error < 1e-4);
    Tensor mask = Tensor::from_values({1, 1, 3, 3}, std::vector<double>{1, 1, 0, 1, 1, 1, 0, 1, 1}, DType::f64);
    Tensor noise = random_tensor({1, 3, 3, 3}, rng);
    auto r3 = grad_check(
        [&](const std::vector<Tensor>& in) { return uncertain_loss(in[0], noise, softmax(in[1], 1), t, mask, 0.3); },
        {random_tensor({1, 3, 3, 3}, rng), logits});
    CHECK(r3.max_rel_error < 1e-4);
  }
}

TEST_CASE("metrics examples") {
  std::vector<std::int32_t> a{0, 1, 2, 2, 1, 0};
  auto r = metrics_report(a, a, Task::segmentation, 6);
  CHECK(r.oa == 1.0);
  CHECK(r.mean_f1 == 1.0);
  CHECK(r.miou == 1.0);
  CHECK(std::isnan(r.class_f1[5]));

  // Per class TP = 3, FP = 1, FN = 1.
  std::vector<std::int32_t> truth{0, 0, 0, 0, 1, 1, 1, 1}, pred{0, 0, 0, 1, 1, 1, 1, 0};
  auto s = metrics_report(pred, truth, Task::segmentation, 2);
  CHECK(s.class_iou[0] == doctest::Approx(0.6));
  CHECK(s.miou == doctest::Approx(0.6));
  CHECK(s.oa == doctest::Approx(0.75));

  std::vector<std::int32_t> bt{1, 0, 1, 0}, bp{0, 1, 0, 1};
  auto c = metrics_report(bp, bt, Task::change, 2);
  CHECK(c.iou == 0.0);
  CHECK(c.oa == 0.0);
  std::vector<std::int32_t> none{0, 0, 0};
  auto e = metrics_report(none, none, Task::change, 2);
  CHECK(e.iou == 1.0);
  CHECK(e.f1 == 1.0);
  CHECK(c.to_text().find("iou=0") != std::string::npos);
}

TEST_CASE("metrics agree with a brute-force counting oracle") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + static_cast<int>(rng() % 5);
    std::vector<std::int32_t> p(256), t(256);
    for (int i = 0; i < 256; ++i) {
      t[i] = static_cast<std::int32_t>(rng() % k);
      p[i] = (rng() % 3 == 0) ? static_cast<std::int32_t>(rng() % k) : t[i];
    }
    auto r = metrics_report(p, t, Task::segmentation, k + 1);
    double f1s = 0, ious = 0, correct = 0;
    int present = 0;
    for (int c = 0; c <= k; ++c) {
      double tp = 0, fp = 0, fn = 0;
      for (int i = 0; i < 256; ++i) {
        tp += (p[i] == c && t[i] == c);
        fp += (p[i] == c && t[i] != c);
        fn += (p[i] != c && t[i] == c);
      }
      if (tp + fp + fn == 0) continue;
      ++present;
      const double pr = tp + fp > 0 ? tp / (tp + fp) : 0, rc = tp + fn > 0 ? tp / (tp + fn) : 0;
      f1s += pr + rc > 0 ? 2 * pr * rc / (pr + rc) : 0;
      ious += tp / (tp + fp + fn);
    }
    for (int i = 0; i < 256; ++i) correct += p[i] == t[i];
    CHECK(r.oa == correct / 256.0);
    CHECK(r.miou == doctest::Approx(ious / present).epsilon(1e-15));
    CHECK(r.mean_f1 == doctest::Approx(f1s / present).epsilon(1e-15));
  }
}
