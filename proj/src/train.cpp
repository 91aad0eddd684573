#include "udhf2/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "udhf2/errors.hpp"
#include "udhf2/io.hpp"
#include "udhf2/losses.hpp"
#include "udhf2/ops.hpp"
#include "udhf2/optim.hpp"
#include "udhf2/scene.hpp"

namespace udhf2 {

namespace {

Tensor stack_images(const std::vector<Tensor>& images, DType dtype) {
  std::vector<double> v;
  for (const auto& im : images) {
    const auto x = im.to_vector();
    v.insert(v.end(), x.begin(), x.end());
  }
  Shape s = images.front().shape();
  s.insert(s.begin(), static_cast<std::int64_t>(images.size()));
  return Tensor::from_values(s, v, dtype);
}

Tensor image_at(const Tensor& x, std::int64_t i) {
  Tensor row = take_rows(x, {i});
  Shape s(row.shape().begin() + 1, row.shape().end());
  return reshape(row, s);
}

std::string pad3(std::int64_t i) {
  std::ostringstream ss;
  ss.width(3);
  ss.fill('0');
  ss << i;
  return ss.str();
}

std::vector<std::vector<std::string>> read_manifest(const std::filesystem::path& manifest, std::size_t fields) {
  std::ifstream in(manifest);
  if (!in) throw ConfigError("cannot open manifest " + manifest.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() != fields)
      throw FormatError(manifest.string() + " line " + std::to_string(number) + ": expected " + std::to_string(fields) +
                        " tab-separated paths");
    for (auto& c : cols) c = (manifest.parent_path() / c).string();
    rows.push_back(cols);
  }
  if (rows.empty()) throw FormatError(manifest.string() + ": no samples");
  return rows;
}

/// Shuffled mini-batches, reshuffled every epoch.
class Batcher {
 public:
  Batcher(std::int64_t n, int batch, std::uint64_t seed) : n_(n), batch_(std::min<std::int64_t>(batch, n)), rng_(seed) {
    order_.resize(static_cast<std::size_t>(n));
    std::iota(order_.begin(), order_.end(), 0);
    pos_ = n_;
  }
  std::vector<std::int64_t> next() {
    if (pos_ + batch_ > n_) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    std::vector<std::int64_t> out(order_.begin() + pos_, order_.begin() + pos_ + batch_);
    pos_ += batch_;
    return out;
  }
  std::mt19937_64& rng() { return rng_; }

 private:
  std::int64_t n_;
  std::int64_t batch_;
  std::mt19937_64 rng_;
  std::vector<std::int64_t> order_;
  std::int64_t pos_;
};

void flip_horizontal(Tensor& images, std::vector<std::int32_t>& labels, std::int64_t h, std::int64_t w) {
  auto v = images.to_vector();
  const auto planes = images.numel() / (h * w);
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t y = 0; y < h; ++y) std::reverse(v.begin() + (p * h + y) * w, v.begin() + (p * h + y + 1) * w);
  images = Tensor::from_values(images.shape(), v, images.dtype());
  const auto n = static_cast<std::int64_t>(labels.size()) / (h * w);
  for (std::int64_t p = 0; p < n; ++p)
    for (std::int64_t y = 0; y < h; ++y)
      std::reverse(labels.begin() + (p * h + y) * w, labels.begin() + (p * h + y + 1) * w);
}

double learning_rate(const RunConfig& config, int step, int steps) {
  double lr = config.lr;
  if (config.warmup_steps > 0) lr *= std::min(1.0, static_cast<double>(step) / config.warmup_steps);
  if (config.lr_schedule == "cosine") lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * (step - 1) / steps));
  return lr;
}

/// Generic stage loop: step_fn returns the loss (or an undefined tensor to skip an update).
TrainResult run_loop(const RunConfig& config, ParameterRegistry& registry, int steps, TrainLog& log,
                     const std::function<Tensor(int)>& step_fn, const std::function<double()>& evaluate) {
  AdamW opt(registry.trainable(), config.optimizer());
  TrainResult result;
  const bool early = config.target_metric > 0 && evaluate;
  for (int step = 1; step <= steps; ++step) {
    registry.set_training(true);
    Tape::active().clear();
    opt.zero_grad();
    opt.set_lr(learning_rate(config, step, steps));
    Tensor loss = step_fn(step);
    double value = 0;
    if (loss.defined()) {
      value = loss.item();
      loss.backward();
      if (config.grad_clip > 0) clip_grad_norm(registry.trainable(), config.grad_clip);
      opt.step();
    }
    Tape::active().clear();
    log.add(step, value, opt.lr());
    if (step == 1) result.first_loss = value;
    result.last_loss = value;
    result.steps = step;
    if (early && step % config.eval_every == 0) {
      result.metric = evaluate();
      log.note("eval step=" + std::to_string(step) + " metric=" + std::to_string(result.metric));
      if (result.metric >= config.target_metric) {
        result.reached_target = true;
        break;
      }
    }
  }
  registry.set_training(false);
  opt.zero_grad();
  if (evaluate && !result.reached_target) {
    result.metric = evaluate();
    result.reached_target = config.target_metric > 0 && result.metric >= config.target_metric;
  }
  return result;
}

RefineResult merge(std::vector<RefineResult> parts) {
  RefineResult out;
  for (auto& p : parts) {
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    out.mask.height = p.mask.height;
    out.mask.width = p.mask.width;
    out.mask.n += p.mask.n;
    out.mask.u1.insert(out.mask.u1.end(), p.mask.u1.begin(), p.mask.u1.end());
    out.mask.u2.insert(out.mask.u2.end(), p.mask.u2.begin(), p.mask.u2.end());
    out.mask.u.insert(out.mask.u.end(), p.mask.u.begin(), p.mask.u.end());
    out.mask.c.insert(out.mask.c.end(), p.mask.c.begin(), p.mask.c.end());
    out.changed += p.changed;
  }
  return out;
}

/// Weight of the noise-space error at step t: min(1, cap / snr_t).
double snr_weight(const NoiseSchedule& s, int t, double cap) {
  const double one_minus = 1.0 - s.G[t];
  if (one_minus <= 0) return 0.0;
  const double snr = s.G[t] / one_minus;
  return std::min(1.0, cap / snr);
}

}  // namespace

SegDataset make_seg_dataset(const RunConfig& config) {
  SegDataset d;
  d.n = config.num_samples;
  d.height = d.width = config.image_size;
  d.classes = config.num_classes;
  std::vector<Tensor> images;
  for (int i = 0; i < config.num_samples; ++i) {
    auto s = generate_scene(config.data_seed + static_cast<std::uint64_t>(i), d.height, d.width, d.classes);
    images.push_back(s.image);
    d.labels.insert(d.labels.end(), s.label.begin(), s.label.end());
  }
  d.images = stack_images(images, config.value_dtype());
  return d;
}

ChangeDataset make_change_dataset(const RunConfig& config) {
  ChangeDataset d;
  d.n = config.num_samples;
  d.height = d.width = config.image_size;
  std::vector<Tensor> a, b;
  ChangeOptions opt;
  opt.warp = config.registration_noise;
  opt.max_shift = config.max_shift;
  opt.num_classes = config.num_classes;
  for (int i = 0; i < config.num_samples; ++i) {
    auto p = generate_change_pair(config.data_seed + static_cast<std::uint64_t>(i), d.height, d.width, opt);
    a.push_back(p.image1);
    b.push_back(p.image2);
    d.labels.insert(d.labels.end(), p.change_mask.begin(), p.change_mask.end());
    d.registration.push_back(p.registration);
  }
  d.images1 = stack_images(a, config.value_dtype());
  d.images2 = stack_images(b, config.value_dtype());
  return d;
}

void write_seg_dataset(const std::filesystem::path& dir, const SegDataset& data) {
  std::string manifest;
  const auto plane = data.height * data.width;
  for (std::int64_t i = 0; i < data.n; ++i) {
    const auto stem = "scene_" + pad3(i);
    write_ppm(dir / (stem + ".ppm"), image_at(data.images, i));
    write_pgm(dir / (stem + "_label.pgm"), std::span(data.labels).subspan(static_cast<std::size_t>(i * plane), static_cast<std::size_t>(plane)),
              data.height, data.width);
    manifest += stem + ".ppm\t" + stem + "_label.pgm\n";
  }
  write_file(dir / "manifest.tsv", manifest);
}

void write_change_dataset(const std::filesystem::path& dir, const ChangeDataset& data) {
  std::string manifest, meta = "index,da0,da1,da2,db0,db1,db2\n";
  const auto plane = data.height * data.width;
  for (std::int64_t i = 0; i < data.n; ++i) {
    const auto stem = "pair_" + pad3(i);
    write_ppm(dir / (stem + "_1.ppm"), image_at(data.images1, i));
    write_ppm(dir / (stem + "_2.ppm"), image_at(data.images2, i));
    write_pgm(dir / (stem + "_mask.pgm"), std::span(data.labels).subspan(static_cast<std::size_t>(i * plane), static_cast<std::size_t>(plane)),
              data.height, data.width);
    manifest += stem + "_1.ppm\t" + stem + "_2.ppm\t" + stem + "_mask.pgm\n";
    if (i < static_cast<std::int64_t>(data.registration.size())) {
      const auto& r = data.registration[static_cast<std::size_t>(i)];
      std::ostringstream ss;
      ss.precision(17);
      ss << i << ',' << r.da[0] << ',' << r.da[1] << ',' << r.da[2] << ',' << r.db[0] << ',' << r.db[1] << ',' << r.db[2] << '\n';
      meta += ss.str();
    }
  }
  write_file(dir / "pairs.tsv", manifest);
  write_file(dir / "registration.csv", meta);
}

SegDataset load_seg_dataset(const std::filesystem::path& manifest, int classes, DType dtype) {
  SegDataset d;
  d.classes = classes;
  std::vector<Tensor> images;
  for (const auto& row : read_manifest(manifest, 2)) {
    images.push_back(read_ppm(row[0]));
    auto g = read_pgm(row[1]);
    if (g.height != images.back().dim(1) || g.width != images.back().dim(2))
      throw DimensionError(row[1] + ": label size differs from its image");
    for (auto v : g.values)
      if (v >= classes) throw ParameterError(row[1] + ": label " + std::to_string(v) + " >= num_classes");
    d.labels.insert(d.labels.end(), g.values.begin(), g.values.end());
  }
  for (const auto& im : images)
    if (im.shape() != images.front().shape()) throw DimensionError(manifest.string() + ": images differ in size");
  d.n = static_cast<std::int64_t>(images.size());
  d.height = images.front().dim(1);
  d.width = images.front().dim(2);
  d.images = stack_images(images, dtype);
  return d;
}

ChangeDataset load_change_dataset(const std::filesystem::path& manifest, DType dtype) {
  ChangeDataset d;
  std::vector<Tensor> a, b;
  for (const auto& row : read_manifest(manifest, 3)) {
    a.push_back(read_ppm(row[0]));
    b.push_back(read_ppm(row[1]));
    if (a.back().shape() != b.back().shape() || a.back().shape() != a.front().shape())
      throw DimensionError(manifest.string() + ": image shapes differ");
    auto g = read_pgm(row[2]);
    if (g.height != a.back().dim(1) || g.width != a.back().dim(2)) throw DimensionError(row[2] + ": mask size differs");
    for (auto v : g.values) d.labels.push_back(v ? 1 : 0);
  }
  d.n = static_cast<std::int64_t>(a.size());
  d.height = a.front().dim(1);
  d.width = a.front().dim(2);
  d.images1 = stack_images(a, dtype);
  d.images2 = stack_images(b, dtype);
  return d;
}

Tensor take_rows(const Tensor& x, const std::vector<std::int64_t>& rows) {
  const auto row = x.numel() / x.dim(0);
  const auto v = x.to_vector();
  std::vector<double> out;
  out.reserve(rows.size() * static_cast<std::size_t>(row));
  for (auto r : rows) {
    if (r < 0 || r >= x.dim(0)) throw DimensionError("take_rows: row " + std::to_string(r) + " out of range");
    out.insert(out.end(), v.begin() + r * row, v.begin() + (r + 1) * row);
  }
  Shape s = x.shape();
  s[0] = static_cast<std::int64_t>(rows.size());
  return Tensor::from_values(s, out, x.dtype());
}

std::vector<std::int32_t> take_rasters(const std::vector<std::int32_t>& x, std::int64_t plane,
                                       const std::vector<std::int64_t>& rows) {
  std::vector<std::int32_t> out;
  for (auto r : rows) out.insert(out.end(), x.begin() + r * plane, x.begin() + (r + 1) * plane);
  return out;
}

TrainLog::TrainLog(std::string header) : header_(std::move(header)) {}

void TrainLog::add(int step, double loss, double lr) {
  std::ostringstream ss;
  ss.precision(9);
  ss << step << ',' << loss << ',' << lr;
  rows_.push_back(ss.str());
  losses_.push_back(loss);
}

void TrainLog::note(const std::string& line) {
  notes_.push_back(line);
  if (on_note) on_note(line);
}

std::string TrainLog::csv() const {
  std::string out = header_ + "\n";
  for (const auto& r : rows_) out += r + "\n";
  return out;
}

Tensor predict_segmentation(const SegmentationNet& net, ParameterRegistry& registry, const Tensor& images, int batch) {
  NoGradGuard no_grad;
  registry.set_training(false);
  std::vector<double> out;
  Shape shape;
  for (std::int64_t s = 0; s < images.dim(0); s += batch) {
    const auto len = std::min<std::int64_t>(batch, images.dim(0) - s);
    Tensor p = softmax(net(slice(images, 0, s, len)), 1);
    const auto v = p.to_vector();
    out.insert(out.end(), v.begin(), v.end());
    shape = p.shape();
  }
  shape[0] = images.dim(0);
  return Tensor::from_values(shape, out, images.dtype());
}

Tensor predict_change(const ChangeNet& net, ParameterRegistry& registry, const Tensor& images1, const Tensor& images2,
                      int batch) {
  NoGradGuard no_grad;
  registry.set_training(false);
  std::vector<double> out;
  Shape shape;
  for (std::int64_t s = 0; s < images1.dim(0); s += batch) {
    const auto len = std::min<std::int64_t>(batch, images1.dim(0) - s);
    Tensor p = change_probability(net(slice(images1, 0, s, len), slice(images2, 0, s, len)));
    const auto v = p.to_vector();
    out.insert(out.end(), v.begin(), v.end());
    shape = p.shape();
  }
  shape[0] = images1.dim(0);
  return Tensor::from_values(shape, out, images1.dtype());
}

std::vector<std::int32_t> labels_from_probs(const Tensor& probs) {
  const auto n = probs.dim(0), k = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  const auto v = probs.to_vector();
  std::vector<std::int32_t> out(static_cast<std::size_t>(n * hw));
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t i = 0; i < hw; ++i) {
      if (k == 1) {
        out[b * hw + i] = v[b * hw + i] > 0.5 ? 1 : 0;
        continue;
      }
      std::int64_t best = 0;
      for (std::int64_t c = 1; c < k; ++c)
        if (v[(b * k + c) * hw + i] > v[(b * k + best) * hw + i]) best = c;
      out[b * hw + i] = static_cast<std::int32_t>(best);
    }
  return out;
}

TrainResult train_segmentation(const RunConfig& config, ParameterRegistry& registry, const SegmentationNet& net,
                               const SegDataset& data, TrainLog& log) {
  Batcher batches(data.n, config.batch_size, config.seed);
  const auto plane = data.height * data.width;
  auto step = [&](int) {
    const auto rows = batches.next();
    Tensor x = take_rows(data.images, rows);
    auto y = take_rasters(data.labels, plane, rows);
    if (config.augment_flips && std::uniform_int_distribution<int>(0, 1)(batches.rng())) flip_horizontal(x, y, data.height, data.width);
    Tensor truth = one_hot(y, static_cast<std::int64_t>(rows.size()), data.height, data.width, data.classes, x.dtype());
    return seg_hybrid_loss_from_logits(net(x), truth, config.loss.gamma);
  };
  auto evaluate = [&] {
    auto pred = labels_from_probs(predict_segmentation(net, registry, data.images, config.batch_size));
    return metrics_report(pred, data.labels, Task::segmentation, data.classes).miou;
  };
  return run_loop(config, registry, config.steps, log, step, evaluate);
}

TrainResult train_change(const RunConfig& config, ParameterRegistry& registry, const ChangeNet& net,
                         const ChangeDataset& data, TrainLog& log) {
  Batcher batches(data.n, config.batch_size, config.seed);
  const auto plane = data.height * data.width;
  auto step = [&](int) {
    const auto rows = batches.next();
    Tensor a = take_rows(data.images1, rows), b = take_rows(data.images2, rows);
    auto y = take_rasters(data.labels, plane, rows);
    if (config.augment_flips && std::uniform_int_distribution<int>(0, 1)(batches.rng())) {
      auto copy = y;
      flip_horizontal(a, y, data.height, data.width);
      flip_horizontal(b, copy, data.height, data.width);
    }
    std::vector<double> t(y.begin(), y.end());
    Tensor truth = Tensor::from_values({static_cast<std::int64_t>(rows.size()), 1, data.height, data.width}, t, a.dtype());
    return cd_hybrid_loss(change_probability(net(a, b)), truth, config.loss.g, config.loss.lambda_class);
  };
  auto evaluate = [&] {
    auto pred = labels_from_probs(predict_change(net, registry, data.images1, data.images2, config.batch_size));
    return metrics_report(pred, data.labels, Task::change, 2).iou;
  };
  return run_loop(config, registry, config.steps, log, step, evaluate);
}

TrainResult train_seg_denoiser(const RunConfig& config, ParameterRegistry& registry, const Denoiser& denoiser,
                               const SegDataset& data, const Tensor& initial_probs, TrainLog& log) {
  if (initial_probs.dim(0) != data.n || initial_probs.dim(1) != data.classes)
    throw ConfigError("stage 2 needs stage-1 probabilities for every training image");
  Batcher batches(data.n, config.batch_size, config.seed + 1);
  const auto sched = config.schedule();
  const auto bank = make_occluder_bank(config.seed + 2, 8);
  const auto plane = data.height * data.width;
  const auto initial_labels = labels_from_probs(initial_probs);
  auto step = [&](int) -> Tensor {
    const auto rows = batches.next();
    auto& rng = batches.rng();
    const auto n = static_cast<std::int64_t>(rows.size());
    Tensor probs = take_rows(initial_probs, rows);
    auto init = take_rasters(initial_labels, plane, rows);
    auto truth = take_rasters(data.labels, plane, rows);
    auto mask = build_mask(probs, init, config.rho, config.buffer_radius);
    if (mask.uncertain_count() == 0) return {};
    Tensor image = take_rows(data.images, rows);
    apply_mixed_pixel_noise(image, truth, mask, config.mixed_pixel_fraction, rng);
    if (config.occlusions > 0) apply_occlusions(image, mask, bank, config.occlusions, rng);
    const DType dt = image.dtype();
    Tensor u = mask.u_tensor(dt);
    Tensor h0 = encode_labels(truth, n, data.height, data.width, data.classes, dt);
    const int t = std::uniform_int_distribution<int>(1, sched.steps)(rng);
    Tensor noise = gaussian_like(h0, rng);
    Tensor h_t = forward_diffuse(h0, t, sched, u, noise);
    Tensor state = denoiser.predict_state(denoiser.condition(image, probs), h_t, t, sched);
    Tensor diff = mul_scalar(masked_mse(denoiser.noise_from_state(h_t, state, t, sched), noise, u),
                             snr_weight(sched, t, config.snr_cap));
    Tensor onehot = one_hot(truth, n, data.height, data.width, data.classes, dt);
    Tensor edge = soft_f1_loss(state_probabilities(state), onehot, u);
    return add(mul_scalar(diff, config.loss.omega), mul_scalar(edge, 1.0 - config.loss.omega));
  };
  return run_loop(config, registry, config.stage2_steps, log, step, {});
}

TrainResult train_change_denoiser(const RunConfig& config, ParameterRegistry& registry, const Denoiser& denoiser,
                                  const ChangeDataset& data, const Tensor& initial_probs, TrainLog& log) {
  if (initial_probs.dim(0) != data.n || initial_probs.dim(1) != 1)
    throw ConfigError("stage 2 needs stage-1 change probabilities for every training pair");
  Batcher batches(data.n, config.batch_size, config.seed + 1);
  const auto sched = config.schedule();
  const auto plane = data.height * data.width;
  const auto initial_labels = labels_from_probs(initial_probs);
  auto step = [&](int) -> Tensor {
    const auto rows = batches.next();
    auto& rng = batches.rng();
    const auto n = static_cast<std::int64_t>(rows.size());
    Tensor probs = take_rows(initial_probs, rows);
    auto init = take_rasters(initial_labels, plane, rows);
    auto truth = take_rasters(data.labels, plane, rows);
    auto mask = build_mask(probs, init, config.rho, config.buffer_radius);
    if (mask.uncertain_count() == 0) return {};
    Tensor a = take_rows(data.images1, rows), b = take_rows(data.images2, rows);
    if (config.registration_noise) b = registration_warp(b, AffineCoeffs{}, sample_perturbation(rng, config.max_shift));
    const DType dt = a.dtype();
    Tensor u = mask.u_tensor(dt);
    Tensor h0 = encode_labels(truth, n, data.height, data.width, 1, dt);
    const int t = std::uniform_int_distribution<int>(1, sched.steps)(rng);
    Tensor noise = gaussian_like(h0, rng);
    Tensor h_t = forward_diffuse(h0, t, sched, u, noise);
    Tensor state = denoiser.predict_state(denoiser.condition(concat({a, b}, 1), probs), h_t, t, sched);
    Tensor diff = mul_scalar(masked_mse(denoiser.noise_from_state(h_t, state, t, sched), noise, u),
                             snr_weight(sched, t, config.snr_cap));
    std::vector<double> tv(truth.begin(), truth.end());
    Tensor target = Tensor::from_values({n, 1, data.height, data.width}, tv, dt);
    Tensor edge = soft_f1_loss(state_probabilities(state), target, u);
    return add(mul_scalar(diff, config.loss.lambda_cd), mul_scalar(edge, 1.0 - config.loss.lambda_cd));
  };
  return run_loop(config, registry, config.stage2_steps, log, step, {});
}

RefineResult refine_segmentation(const RunConfig& config, const Denoiser& denoiser, ParameterRegistry& registry,
                                 const Tensor& images, const Tensor& probs) {
  registry.set_training(false);
  const auto sched = config.schedule();
  const auto labels = labels_from_probs(probs);
  const auto plane = probs.dim(2) * probs.dim(3);
  std::vector<RefineResult> parts;
  for (std::int64_t i = 0; i < images.dim(0); ++i) {
    auto rc = config.refine();
    rc.seed = config.seed + static_cast<std::uint64_t>(i);
    parts.push_back(refine(slice(probs, 0, i, 1), std::span(labels).subspan(static_cast<std::size_t>(i * plane), static_cast<std::size_t>(plane)),
                           slice(images, 0, i, 1), &denoiser, sched, rc));
  }
  return merge(std::move(parts));
}

RefineResult refine_change(const RunConfig& config, const Denoiser& denoiser, ParameterRegistry& registry,
                           const Tensor& images1, const Tensor& images2, const Tensor& probs) {
  registry.set_training(false);
  const auto sched = config.schedule();
  const auto labels = labels_from_probs(probs);
  const auto plane = probs.dim(2) * probs.dim(3);
  std::vector<RefineResult> parts;
  for (std::int64_t i = 0; i < images1.dim(0); ++i) {
    auto rc = config.refine();
    rc.seed = config.seed + static_cast<std::uint64_t>(i);
    parts.push_back(cd_refine(slice(probs, 0, i, 1), std::span(labels).subspan(static_cast<std::size_t>(i * plane), static_cast<std::size_t>(plane)),
                              slice(images1, 0, i, 1), slice(images2, 0, i, 1), &denoiser, sched, rc));
  }
  return merge(std::move(parts));
}

}  // namespace udhf2
