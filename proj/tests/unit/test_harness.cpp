#include <filesystem>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "udhf2/config.hpp"
#include "udhf2/io.hpp"
#include "udhf2/scene.hpp"
#include "udhf2/train.hpp"

using namespace udhf2;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("udhf2_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig tiny_run() {
  RunConfig c;
  c.channel_plan = {4, 4, 8, 8};
  c.blocks_per_stage = 1;
  c.num_samples = 2;
  c.image_size = 32;
  c.batch_size = 2;
  c.steps = 2;
  c.stage2_steps = 2;
  c.diffusion_steps = 3;
  return c;
}

}  // namespace

TEST_CASE("scenes are deterministic and in range") {
  auto a = generate_scene(11, 64, 64, 6), b = generate_scene(11, 64, 64, 6);
  CHECK(a.image.to_vector() == b.image.to_vector());
  CHECK(a.label == b.label);
  for (double v : a.image.to_vector()) CHECK((v >= 0.0 && v <= 1.0));
  for (auto v : a.label) CHECK((v >= 0 && v < 6));
  CHECK(generate_scene(12, 64, 64, 6).label != a.label);

  auto two = generate_scene(5, 64, 64, 2);
  bool building_seen = false;
  for (auto v : two.label) {
    CHECK((v == clutter || v == building));
    building_seen |= v == building;
  }
  CHECK(building_seen);
  CHECK_THROWS_AS(generate_scene(1, 48, 64, 6), ParameterError);
  CHECK_THROWS_AS(generate_scene(1, 64, 64, 1), ParameterError);
}

TEST_CASE("anti-aliasing produces mixed boundary pixels") {
  SceneOptions hard;
  hard.anti_alias = false;
  auto soft = generate_scene(3, 64, 64, 6), crisp = generate_scene(3, 64, 64, 6, hard);
  CHECK(soft.label == crisp.label);
  CHECK(soft.image.to_vector() != crisp.image.to_vector());
}

TEST_CASE("trees over roofs keep the building label") {
  bool found = false;
  for (std::uint64_t seed = 0; seed < 5 && !found; ++seed) {
    auto s = generate_scene(seed, 64, 64, 6);
    for (const auto& sh : s.shapes) {
      if (sh.cls != tree || sh.covers_label) continue;
      found = true;
      const auto cy = static_cast<std::int64_t>((sh.y0 + sh.y1) / 2), cx = static_cast<std::int64_t>((sh.x0 + sh.x1) / 2);
      CHECK(s.label[cy * 64 + cx] == building);
    }
  }
  CHECK(found);
}

TEST_CASE("change pair examples") {
  ChangeOptions none;
  none.added = 0;
  none.removed = 0;
  none.warp = false;
  auto p = generate_change_pair(4, 64, 64, none);
  for (auto v : p.change_mask) CHECK(v == 0);
  none.jitter = 0;
  auto same = generate_change_pair(4, 64, 64, none);
  CHECK(same.image1.to_vector() == same.image2.to_vector());
  CHECK(p.image1.to_vector() == same.image1.to_vector());

  ChangeOptions one = none;
  one.added = 1;
  int sum = 0;
  auto q = generate_change_pair(9, 64, 64, one);
  for (auto v : q.change_mask) sum += v;
  REQUIRE(q.added.size() == 1);
  const auto& b = q.added[0];
  CHECK(sum == static_cast<int>((b.y1 - b.y0) * (b.x1 - b.x0)));

  for (std::uint64_t s = 0; s < 30; ++s) CHECK_NOTHROW(generate_change_pair(s, 32, 32).registration.validate());
}

TEST_CASE("occluder bank") {
  auto bank = make_occluder_bank(1, 4);
  REQUIRE(bank.size() == 4);
  for (const auto& o : bank) {
    CHECK(o.patch.shape() == Shape{3, o.height, o.width});
    CHECK(static_cast<std::int64_t>(o.footprint.size()) == o.height * o.width);
  }
}

TEST_CASE("netpbm round trip") {
  auto dir = scratch("pnm");
  auto s = generate_scene(2, 32, 32, 6);
  write_ppm(dir / "a.ppm", s.image);
  CHECK(read_ppm(dir / "a.ppm").to_vector() == s.image.to_vector());
  write_pgm(dir / "a.pgm", s.label, 32, 32);
  auto g = read_pgm(dir / "a.pgm");
  CHECK(g.values == s.label);
  write_file(dir / "bad.ppm", "P3\n1 1\n255\n000");
  CHECK_THROWS_AS(read_ppm(dir / "bad.ppm"), FormatError);
}

TEST_CASE("checkpoint format") {
  auto dir = scratch("ckpt");
  ParameterRegistry reg(3, DType::f32);
  SegmentationNet net(Scope(reg, "seg"), tiny_run().net());
  save_registry(dir / "a.ckpt", reg);
  ParameterRegistry other(4, DType::f32);
  SegmentationNet twin(Scope(other, "seg"), tiny_run().net());
  load_registry(dir / "a.ckpt", other);
  save_registry(dir / "b.ckpt", other);
  CHECK(read_file(dir / "a.ckpt") == read_file(dir / "b.ckpt"));
  for (std::size_t i = 0; i < reg.entries().size(); ++i)
    CHECK(reg.entries()[i].tensor.to_vector() == other.entries()[i].tensor.to_vector());

  auto bytes = read_file(dir / "a.ckpt");
  auto bad = bytes;
  bad[0] = 'X';
  try {
    parse_checkpoint(bad);
    FAIL("corrupt magic accepted");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("\"UDHF\"") != std::string::npos);
  }
  try {
    parse_checkpoint(std::string_view(bytes).substr(0, bytes.size() - 3));
    FAIL("truncated file accepted");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
  }
  auto old = bytes;
  old[4] = 2;
  CHECK_THROWS_AS(parse_checkpoint(old), FormatError);

  ParameterRegistry bigger(3, DType::f32);
  SegmentationNet more(Scope(bigger, "seg"), tiny_run().net());
  bigger.create("seg.extra.weight", {2}, Init::zeros);
  try {
    load_registry(dir / "a.ckpt", bigger);
    FAIL("missing parameter accepted");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("seg.extra.weight") != std::string::npos);
  }

  Tensor p = Tensor::from_values({1, 2, 1, 1}, std::vector<double>{0.25, 0.75}, DType::f64);
  save_probabilities(dir / "p.ckpt", p);
  CHECK(load_probabilities(dir / "p.ckpt").to_vector() == p.to_vector());
  CHECK(load_probabilities(dir / "p.ckpt").dtype() == DType::f64);
}

TEST_CASE("config parsing") {
  auto c = parse_config("rho=0.7\nwindow=4\n");
  CHECK(c.rho == 0.7);
  CHECK(c.window == 4);
  CHECK(c.steps == RunConfig{}.steps);
  auto d = parse_config("# comment\n\n  lr = 0.002  # trailing\nchannel_plan=8,16,32,64\nstationary_only=true\n");
  CHECK(d.lr == 0.002);
  CHECK(d.channel_plan == std::array<std::int64_t, 4>{8, 16, 32, 64});
  CHECK(!d.encoder().use_non_stationary);
  CHECK_THROWS_AS(parse_config("rho=1.5"), ConfigError);
  try {
    parse_config("rho=0.5\nwindw=4\n");
    FAIL("unknown key accepted");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("rho"), ConfigError);
  CHECK_THROWS_AS(parse_config("steps=abc"), ConfigError);
  CHECK_THROWS_AS(parse_config("stationary_only=1\nnon_stationary_only=1"), ConfigError);
  CHECK(parse_config(config_to_text(d)).lr == d.lr);
  CHECK(config_to_text(parse_config(config_to_text(d))) == config_to_text(d));
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  auto cfg = tiny_run();
  cfg.lr = 0;
  cfg.steps = 1;
  auto data = make_seg_dataset(cfg);
  ParameterRegistry reg(cfg.seed, cfg.value_dtype());
  SegmentationNet net(Scope(reg, "seg"), cfg.net());
  const auto before = serialize_checkpoint([&] {
    std::vector<CheckpointEntry> e;
    for (const auto& x : reg.entries()) e.push_back({x.name, x.tensor.clone()});
    return e;
  }());
  TrainLog log;
  train_segmentation(cfg, reg, net, data, log);
  std::vector<CheckpointEntry> after;
  for (const auto& x : reg.entries()) after.push_back({x.name, x.tensor});
  CHECK(serialize_checkpoint(after) == before);
}

TEST_CASE("training is deterministic and descends") {
  auto cfg = tiny_run();
  cfg.steps = 6;
  auto run = [&] {
    auto data = make_seg_dataset(cfg);
    ParameterRegistry reg(cfg.seed, cfg.value_dtype());
    SegmentationNet net(Scope(reg, "seg"), cfg.net());
    TrainLog log;
    train_segmentation(cfg, reg, net, data, log);
    return log;
  };
  auto a = run(), b = run();
  CHECK(a.csv() == b.csv());
  CHECK(a.losses().back() < a.losses().front());
}

TEST_CASE("stage two and refinement run end to end") {
  auto cfg = tiny_run();
  auto data = make_seg_dataset(cfg);
  ParameterRegistry reg(cfg.seed, cfg.value_dtype());
  SegmentationNet net(Scope(reg, "seg"), cfg.net());
  Tensor probs = predict_segmentation(net, reg, data.images, 2);
  CHECK(probs.shape() == Shape{2, 6, 32, 32});
  ParameterRegistry dreg(cfg.seed + 1, cfg.value_dtype());
  Denoiser den(Scope(dreg, "denoiser"), cfg.seg_denoiser());
  TrainLog log;
  auto r = train_seg_denoiser(cfg, dreg, den, data, probs, log);
  CHECK(r.steps == 2);
  auto ref = refine_segmentation(cfg, den, dreg, data.images, probs);
  auto init = labels_from_probs(probs);
  for (std::size_t i = 0; i < init.size(); ++i)
    if (ref.mask.c[i]) CHECK(ref.labels[i] == init[i]);
}

TEST_CASE("change training and dataset files") {
  auto cfg = tiny_run();
  auto data = make_change_dataset(cfg);
  auto dir = scratch("cd");
  write_change_dataset(dir, data);
  auto back = load_change_dataset(dir / "pairs.tsv", cfg.value_dtype());
  CHECK(back.images1.to_vector() == data.images1.to_vector());
  CHECK(back.labels == data.labels);

  ParameterRegistry reg(cfg.seed, cfg.value_dtype());
  ChangeNet net(Scope(reg, "cd"), cfg.change());
  TrainLog log;
  auto r = train_change(cfg, reg, net, data, log);
  CHECK(r.steps == 2);
  Tensor probs = predict_change(net, reg, data.images1, data.images2, 2);
  CHECK(probs.shape() == Shape{2, 1, 32, 32});
  ParameterRegistry dreg(1, cfg.value_dtype());
  Denoiser den(Scope(dreg, "denoiser"), cfg.cd_denoiser());
  train_change_denoiser(cfg, dreg, den, data, probs, log);
  auto ref = refine_change(cfg, den, dreg, data.images1, data.images2, probs);
  CHECK(ref.labels.size() == data.labels.size());
}
