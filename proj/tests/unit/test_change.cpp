#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "udhf2/change.hpp"
#include "udhf2/ops.hpp"

using namespace udhf2;
using udhf2::testing::max_abs_diff;
using udhf2::testing::random_tensor;

namespace {

ChangeConfig tiny(bool fully_shared = false) {
  ChangeConfig c;
  c.encoder.channel_plan = {4, 4, 8, 8};
  c.encoder.blocks_per_stage = 1;
  c.fully_shared = fully_shared;
  return c;
}

std::int64_t count_prefix(const ParameterRegistry& reg, const std::string& needle) {
  std::int64_t n = 0;
  for (const auto& e : reg.entries())
    if (e.trainable && e.name.find(needle) != std::string::npos) n += e.tensor.numel();
  return n;
}

void perturb(ParameterRegistry& reg, const std::string& name, double delta) {
  Tensor t = reg.get(name);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, t.at(i) + delta);
}

std::string first_param(const ParameterRegistry& reg, const std::string& needle) {
  for (const auto& e : reg.entries())
    if (e.trainable && e.name.find(needle) != std::string::npos && e.name.find("weight") != std::string::npos)
      return e.name;
  return {};
}

}  // namespace

TEST_CASE("siamese branches share early stages") {
  ParameterRegistry reg(1, DType::f64);
  reg.set_training(false);
  ChangeNet net(Scope(reg, "cd"), tiny());
  CHECK(net.branch(1).stage(1) == net.branch(2).stage(1));
  CHECK(net.branch(1).stage(2) == net.branch(2).stage(2));
  CHECK(net.branch(1).stage(3) != net.branch(2).stage(3));
  CHECK(reg.contains(first_param(reg, "stage3_t1.")));
  CHECK(!first_param(reg, "stage4_t2.non_stationary.stem").empty());

  // Count oracle: shared + 2 x independent.
  ParameterRegistry solo(1, DType::f64);
  Encoder one(Scope(solo, "e"), tiny().encoder);
  auto census = solo.census(2);
  const auto shared = census["e.stage1"] + census["e.stage2"];
  const auto independent = census["e.stage3"] + census["e.stage4"];
  CHECK(count_prefix(reg, "cd.encoder.") == shared + 2 * independent);
  CHECK(count_prefix(reg, "_t1.") == independent);
  CHECK(count_prefix(reg, "_t2.") == independent);
}

TEST_CASE("identical inputs and weights give identical branch features") {
  std::mt19937_64 rng(2);
  ParameterRegistry reg(2, DType::f64);
  reg.set_training(false);
  ChangeNet net(Scope(reg, "cd"), tiny());
  for (const auto& e : reg.entries()) {
    const auto pos = e.name.find("_t2.");
    if (pos == std::string::npos) continue;
    auto twin = e.name;
    twin.replace(pos, 4, "_t1.");
    reg.get(e.name).copy_from(reg.get(twin));
  }
  Tensor x = random_tensor({1, 3, 32, 32}, rng, 0, 1);
  auto f = net.encode(x, x);
  for (int k = 0; k < 4; ++k) {
    CHECK(f.p.stationary.streams[k].to_vector() == f.q.stationary.streams[k].to_vector());
    CHECK(f.p.non_stationary.streams[k].to_vector() == f.q.non_stationary.streams[k].to_vector());
  }
  Tensor y = random_tensor({1, 3, 16, 32}, rng);
  CHECK_THROWS_AS(net.encode(x, y), DimensionError);
}

TEST_CASE("shared and independent parameters reach the right branches") {
  std::mt19937_64 rng(3);
  ParameterRegistry reg(3, DType::f64);
  reg.set_training(false);
  ChangeNet net(Scope(reg, "cd"), tiny());
  Tensor x1 = random_tensor({1, 3, 32, 32}, rng, 0, 1), x2 = random_tensor({1, 3, 32, 32}, rng, 0, 1);
  auto base = net.encode(x1, x2);
  auto last = [](const EncodedFeatures& f) { return f.non_stationary.streams[3]; };

  perturb(reg, first_param(reg, "encoder.stage1."), 0.05);
  auto shared = net.encode(x1, x2);
  CHECK(max_abs_diff(last(shared.p), last(base.p)) > 0);
  CHECK(max_abs_diff(last(shared.q), last(base.q)) > 0);
  perturb(reg, first_param(reg, "encoder.stage1."), -0.05);

  base = net.encode(x1, x2);
  perturb(reg, first_param(reg, "stage4_t2.non_stationary.stem"), 0.05);
  auto own = net.encode(x1, x2);
  CHECK(last(own.p).to_vector() == last(base.p).to_vector());
  CHECK(max_abs_diff(last(own.q), last(base.q)) > 0);
}

TEST_CASE("fully shared ablation reuses every stage") {
  ParameterRegistry a(4, DType::f64), b(4, DType::f64);
  ChangeNet full(Scope(a, "cd"), tiny(true));
  ChangeNet semi(Scope(b, "cd"), tiny(false));
  for (int s = 1; s <= 4; ++s) CHECK(full.branch(1).stage(s) == full.branch(2).stage(s));
  CHECK(a.parameter_count() < b.parameter_count());
}

TEST_CASE("difference alignment contract") {
  std::mt19937_64 rng(5);
  ParameterRegistry reg(5, DType::f64);
  DifferenceAlign al(Scope(reg, "al"), 6);
  Tensor p = random_tensor({2, 6, 4, 4}, rng), q = random_tensor({2, 6, 4, 4}, rng);
  Tensor r = al(p, q);
  CHECK(r.shape() == Shape{2, 6, 4, 4});
  for (double v : al.rectified(p, q).to_vector()) CHECK(v >= 0.0);
  double mag = 0;
  for (double v : al.rectified(p, p).to_vector()) mag += v;
  CHECK(mag > 0);
  CHECK_THROWS_AS(al(p, random_tensor({2, 6, 2, 4}, rng)), DimensionError);
}

TEST_CASE("change forward shape and zero head") {
  std::mt19937_64 rng(6);
  ParameterRegistry reg(6, DType::f32);
  reg.set_training(false);
  ChangeNet net(Scope(reg, "cd"), tiny(true));
  Tensor x1 = random_tensor({1, 3, 64, 64}, rng, 0, 1, DType::f32), x2 = random_tensor({1, 3, 64, 64}, rng, 0, 1, DType::f32);
  Tensor logits = net(x1, x2);
  CHECK(logits.shape() == Shape{1, 2, 64, 64});
  CHECK(net(x2, x1).shape() == logits.shape());
  reg.get("cd.decoder.head.classifier.weight").fill(0.0);
  reg.get("cd.decoder.head.classifier.bias").fill(0.0);
  for (double p : change_probability(net(x1, x1)).to_vector()) CHECK(p == doctest::Approx(0.5));
}

TEST_CASE("difference architecture has no alignment parameters") {
  auto c = tiny(true);
  c.difference_architecture = true;
  ParameterRegistry a(7, DType::f64), b(7, DType::f64);
  ChangeNet diff(Scope(a, "cd"), c);
  ChangeNet learned(Scope(b, "cd"), tiny(true));
  CHECK(count_prefix(a, ".align.") == 0);
  CHECK(count_prefix(b, ".align.") > 0);
  CHECK(b.parameter_count() - a.parameter_count() == count_prefix(b, ".align."));
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({1, 3, 32, 32}, rng, 0, 1);
  // |P - P| = 0 everywhere.
  auto fused = diff.align(diff.encode(x, x));
  CHECK(fused[0].shape()[1] == 8);
  for (const auto& f : fused)
    for (double v : f.to_vector()) CHECK(v == 0.0);
}

TEST_CASE("change gradients reach both branches") {
  std::mt19937_64 rng(8);
  ParameterRegistry reg(8, DType::f64);
  ChangeNet net(Scope(reg, "cd"), tiny());
  Tensor x1 = random_tensor({2, 3, 32, 32}, rng, 0, 1), x2 = random_tensor({2, 3, 32, 32}, rng, 0, 1);
  Tape::active().clear();
  sum(square(net(x1, x2))).backward();
  int dead = 0;
  for (const auto& e : reg.entries()) {
    if (!e.trainable) continue;
    Tensor g = e.tensor.grad();
    double m = 0;
    if (g.defined())
      for (double v : g.to_vector()) m = std::max(m, std::abs(v));
    if (m == 0) {
      ++dead;
      MESSAGE("no gradient: " << e.name);
    }
  }
  CHECK(dead == 0);
  Tape::active().clear();
  reg.zero_grad();
}

TEST_CASE("change refinement keeps certain pixels") {
  std::mt19937_64 rng(9);
  ParameterRegistry reg(9, DType::f32);
  EncoderConfig enc;
  enc.channel_plan = {4, 4, 4, 4};
  enc.blocks_per_stage = 1;
  Denoiser den(Scope(reg, "den"), change_denoiser_config(enc));
  auto sched = noise_schedule_build(3, 1e-4, 0.02);
  Tensor x1 = random_tensor({1, 3, 32, 32}, rng, 0, 1, DType::f32), x2 = random_tensor({1, 3, 32, 32}, rng, 0, 1, DType::f32);
  Tensor prob = sigmoid(random_tensor({1, 1, 32, 32}, rng, -3, 3, DType::f32));
  std::vector<std::int32_t> init(32 * 32);
  for (std::size_t i = 0; i < init.size(); ++i) init[i] = (i % 32) > 16 ? 1 : 0;
  auto r = cd_refine(prob, init, x1, x2, &den, sched, RefineConfig{});
  CHECK(r.mask.uncertain_count() > 0);
  for (std::size_t i = 0; i < init.size(); ++i) {
    if (r.mask.c[i]) CHECK(r.labels[i] == init[i]);
    CHECK((r.labels[i] == 0 || r.labels[i] == 1));
  }
  CHECK_THROWS_AS(cd_refine(prob, init, x1, x2, nullptr, sched, RefineConfig{}), ConfigError);
}
