#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "udhf2/config.hpp"
#include "udhf2/freq.hpp"
#include "udhf2/gradsuite.hpp"
#include "udhf2/io.hpp"
#include "udhf2/scene.hpp"
#include "udhf2/train.hpp"

using namespace udhf2;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key=value run configuration");
  cmd->add_option("--seed", c.seed, "seed override");
  cmd->add_option("--out", c.out, "output directory")->required();
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  fs::create_directories(c.out);
  write_file(fs::path(c.out) / "config.txt", config_to_text(cfg));
  return cfg;
}

std::string stem(std::int64_t i) {
  std::ostringstream ss;
  ss << "img_";
  ss.width(3);
  ss.fill('0');
  ss << i;
  return ss.str();
}

void write_rasters(const fs::path& dir, const std::vector<std::int32_t>& labels, std::int64_t n, std::int64_t h,
                   std::int64_t w, int scale = 1) {
  const auto plane = h * w;
  for (std::int64_t i = 0; i < n; ++i) {
    std::vector<std::int32_t> r(labels.begin() + i * plane, labels.begin() + (i + 1) * plane);
    for (auto& v : r) v *= scale;
    write_pgm(dir / (stem(i) + ".pgm"), r, h, w);
  }
}

std::vector<std::int32_t> mask_values(const std::vector<std::uint8_t>& m) { return {m.begin(), m.end()}; }

SegDataset seg_data(const RunConfig& cfg, const std::string& manifest) {
  return manifest.empty() ? make_seg_dataset(cfg) : load_seg_dataset(manifest, cfg.num_classes, cfg.value_dtype());
}

ChangeDataset cd_data(const RunConfig& cfg, const std::string& manifest) {
  return manifest.empty() ? make_change_dataset(cfg) : load_change_dataset(manifest, cfg.value_dtype());
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string(what) + " is required");
  if (!fs::exists(path)) throw ConfigError(std::string(what) + " not found: " + path);
}

void write_summary(const fs::path& out, const TrainResult& r, double seconds) {
  std::ostringstream ss;
  ss.precision(9);
  ss << "steps=" << r.steps << "\nfirst_loss=" << r.first_loss << "\nlast_loss=" << r.last_loss << "\nmetric=" << r.metric
     << "\nreached_target=" << (r.reached_target ? "true" : "false") << "\n";
  write_file(out / "summary.txt", ss.str());
  std::cout << ss.str() << "seconds=" << seconds << "\n";
}

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"udhf2: frequency-decomposed segmentation and change detection with uncertainty diffusion refinement"};
  app.require_subcommand(1);

  Common gen_c, dec_c, tseg_c, tcd_c, iseg_c, icd_c, ref_c, eval_c, grad_c;
  std::string task = "all", image_path, data, checkpoint, denoiser_path;
  int stage = 1, instances = 20;
  bool do_refine = false;

  auto* gen = app.add_subcommand("gen-data", "write synthetic scenes and change pairs");
  add_common(gen, gen_c);
  gen->add_option("--task", task, "seg, cd or all")->check(CLI::IsMember({"seg", "cd", "all"}));

  auto* dec = app.add_subcommand("decompose", "write the wavelet and spectral-band components of an image");
  add_common(dec, dec_c);
  dec->add_option("--image", image_path, "PPM image (default: a generated scene)");

  auto* tseg = app.add_subcommand("train-seg", "train the segmentation network (stage 1) or its denoiser (stage 2)");
  add_common(tseg, tseg_c);
  auto* tcd = app.add_subcommand("train-cd", "train the change network (stage 1) or its denoiser (stage 2)");
  add_common(tcd, tcd_c);
  for (auto* cmd : {tseg, tcd}) {
    cmd->add_option("--data", data, "dataset manifest (default: generated from the config)");
    cmd->add_option("--stage", stage, "1 or 2")->check(CLI::IsMember({1, 2}));
    cmd->add_option("--checkpoint", checkpoint, "stage-1 checkpoint (stage 2)");
  }

  auto* iseg = app.add_subcommand("infer-seg", "predict class probabilities and labels");
  add_common(iseg, iseg_c);
  auto* icd = app.add_subcommand("infer-cd", "predict change probabilities and labels");
  add_common(icd, icd_c);
  for (auto* cmd : {iseg, icd}) {
    cmd->add_option("--data", data, "dataset manifest");
    cmd->add_option("--checkpoint", checkpoint, "stage-1 checkpoint")->required();
  }

  auto* ref = app.add_subcommand("refine", "refine uncertain pixels with the trained denoiser");
  add_common(ref, ref_c);
  auto* ev = app.add_subcommand("eval", "metrics on a dataset, optionally after refinement");
  add_common(ev, eval_c);
  for (auto* cmd : {ref, ev}) {
    cmd->add_option("--task", task, "seg or cd")->check(CLI::IsMember({"seg", "cd"}))->required();
    cmd->add_option("--data", data, "dataset manifest");
    cmd->add_option("--checkpoint", checkpoint, "stage-1 checkpoint")->required();
    cmd->add_option("--denoiser", denoiser_path, "stage-2 checkpoint");
  }
  ev->add_flag("--refine", do_refine, "also evaluate refined labels");

  auto* grad = app.add_subcommand("grad-check", "finite-difference check of every learnable operation");
  add_common(grad, grad_c);
  grad->add_option("--instances", instances, "random instances per operation");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto t0 = std::chrono::steady_clock::now();
    if (*gen) {
      RunConfig cfg = gen_c.config.empty() ? RunConfig{} : load_config(gen_c.config);
      if (gen_c.seed) cfg.data_seed = *gen_c.seed;
      const fs::path out = gen_c.out;
      fs::create_directories(out);
      write_file(out / "config.txt", config_to_text(cfg));
      if (task != "cd") write_seg_dataset(out / "seg", make_seg_dataset(cfg));
      if (task != "seg") write_change_dataset(out / "cd", make_change_dataset(cfg));
      std::cout << "wrote " << cfg.num_samples << " samples to " << out << "\n";
    } else if (*dec) {
      RunConfig cfg = resolve(dec_c);
      const fs::path out = dec_c.out;
      Tensor image = image_path.empty() ? generate_scene(cfg.seed, cfg.image_size, cfg.image_size, cfg.num_classes).image
                                        : read_ppm(image_path);
      Tensor x = image.to(DType::f64);
      auto dwt = dwt_haar_decompose(x);
      auto bands = stationary_decompose(x);
      std::vector<CheckpointEntry> entries;
      static constexpr const char* dwt_names[4] = {"hh", "lh", "hl", "ll"};
      for (int k = 0; k < 4; ++k) {
        entries.push_back({std::string("non_stationary.") + dwt_names[k], dwt.components[k]});
        entries.push_back({"stationary.band" + std::to_string(k + 1), bands.components[k]});
      }
      save_checkpoint(out / "components.ckpt", entries);
      // Per-component grayscale previews, min-max stretched over the channel mean.
      for (const auto& e : entries) {
        const auto& t = e.tensor;
        const auto c = t.dim(0), h = t.dim(1), w = t.dim(2);
        const auto v = t.to_vector();
        std::vector<double> m(static_cast<std::size_t>(h * w), 0.0);
        for (std::int64_t ch = 0; ch < c; ++ch)
          for (std::int64_t i = 0; i < h * w; ++i) m[i] += v[ch * h * w + i] / c;
        const auto [lo, hi] = std::minmax_element(m.begin(), m.end());
        const double span = std::max(*hi - *lo, 1e-12);
        std::vector<std::int32_t> g(m.size());
        for (std::size_t i = 0; i < m.size(); ++i) g[i] = static_cast<std::int32_t>(std::lround((m[i] - *lo) / span * 255.0));
        write_pgm(out / (e.name + ".pgm"), g, h, w);
      }
      write_ppm(out / "input.ppm", image);
      std::cout << "wrote 8 components to " << out << "\n";
    } else if (*tseg || *tcd) {
      const bool seg = static_cast<bool>(*tseg);
      RunConfig cfg = resolve(seg ? tseg_c : tcd_c);
      const fs::path out = seg ? tseg_c.out : tcd_c.out;
      TrainLog log;
      if (stage == 1) {
        ParameterRegistry reg(cfg.seed, cfg.value_dtype());
        TrainResult r;
        Tensor probs;
        if (seg) {
          auto d = seg_data(cfg, data);
          SegmentationNet net(Scope(reg, "seg"), cfg.net());
          r = train_segmentation(cfg, reg, net, d, log);
          probs = predict_segmentation(net, reg, d.images, cfg.batch_size);
        } else {
          auto d = cd_data(cfg, data);
          ChangeNet net(Scope(reg, "cd"), cfg.change());
          r = train_change(cfg, reg, net, d, log);
          probs = predict_change(net, reg, d.images1, d.images2, cfg.batch_size);
        }
        save_registry(out / "model.ckpt", reg);
        save_probabilities(out / "probs.ckpt", probs);
        write_file(out / "train_log.csv", log.csv());
        write_summary(out, r, since(t0));
      } else {
        if (cfg.disable_mudm) {
          std::cout << "disable_mudm is set: stage 2 skipped\n";
          return 0;
        }
        require_file(checkpoint, "--checkpoint (stage-1 model)");
        ParameterRegistry base(cfg.seed, cfg.value_dtype());
        ParameterRegistry dreg(cfg.seed + 1, cfg.value_dtype());
        TrainResult r;
        if (seg) {
          auto d = seg_data(cfg, data);
          SegmentationNet net(Scope(base, "seg"), cfg.net());
          load_registry(checkpoint, base);
          Tensor probs = predict_segmentation(net, base, d.images, cfg.batch_size);
          Denoiser den(Scope(dreg, "denoiser"), cfg.seg_denoiser());
          r = train_seg_denoiser(cfg, dreg, den, d, probs, log);
        } else {
          auto d = cd_data(cfg, data);
          ChangeNet net(Scope(base, "cd"), cfg.change());
          load_registry(checkpoint, base);
          Tensor probs = predict_change(net, base, d.images1, d.images2, cfg.batch_size);
          Denoiser den(Scope(dreg, "denoiser"), cfg.cd_denoiser());
          r = train_change_denoiser(cfg, dreg, den, d, probs, log);
        }
        save_registry(out / "denoiser.ckpt", dreg);
        write_file(out / "train_log.csv", log.csv());
        write_summary(out, r, since(t0));
      }
    } else if (*iseg || *icd) {
      const bool seg = static_cast<bool>(*iseg);
      RunConfig cfg = resolve(seg ? iseg_c : icd_c);
      const fs::path out = seg ? iseg_c.out : icd_c.out;
      ParameterRegistry reg(cfg.seed, cfg.value_dtype());
      Tensor probs;
      if (seg) {
        auto d = seg_data(cfg, data);
        SegmentationNet net(Scope(reg, "seg"), cfg.net());
        load_registry(checkpoint, reg);
        probs = predict_segmentation(net, reg, d.images, cfg.batch_size);
      } else {
        auto d = cd_data(cfg, data);
        ChangeNet net(Scope(reg, "cd"), cfg.change());
        load_registry(checkpoint, reg);
        probs = predict_change(net, reg, d.images1, d.images2, cfg.batch_size);
      }
      save_probabilities(out / "probs.ckpt", probs);
      write_rasters(out / "labels", labels_from_probs(probs), probs.dim(0), probs.dim(2), probs.dim(3));
      std::cout << "wrote " << probs.dim(0) << " predictions to " << out << "\n";
    } else if (*ref || *ev) {
      const bool refine_cmd = static_cast<bool>(*ref);
      RunConfig cfg = resolve(refine_cmd ? ref_c : eval_c);
      const fs::path out = refine_cmd ? ref_c.out : eval_c.out;
      const bool seg = task == "seg";
      const bool want_refine = refine_cmd || do_refine;
      if (want_refine) require_file(denoiser_path, "--denoiser");
      ParameterRegistry reg(cfg.seed, cfg.value_dtype()), dreg(cfg.seed + 1, cfg.value_dtype());
      Tensor probs;
      std::vector<std::int32_t> truth;
      std::optional<RefineResult> refined;
      if (seg) {
        auto d = seg_data(cfg, data);
        SegmentationNet net(Scope(reg, "seg"), cfg.net());
        load_registry(checkpoint, reg);
        probs = predict_segmentation(net, reg, d.images, cfg.batch_size);
        truth = d.labels;
        if (want_refine) {
          Denoiser den(Scope(dreg, "denoiser"), cfg.seg_denoiser());
          load_registry(denoiser_path, dreg);
          refined = refine_segmentation(cfg, den, dreg, d.images, probs);
        }
      } else {
        auto d = cd_data(cfg, data);
        ChangeNet net(Scope(reg, "cd"), cfg.change());
        load_registry(checkpoint, reg);
        probs = predict_change(net, reg, d.images1, d.images2, cfg.batch_size);
        truth = d.labels;
        if (want_refine) {
          Denoiser den(Scope(dreg, "denoiser"), cfg.cd_denoiser());
          load_registry(denoiser_path, dreg);
          refined = refine_change(cfg, den, dreg, d.images1, d.images2, probs);
        }
      }
      const auto n = probs.dim(0), h = probs.dim(2), w = probs.dim(3);
      const auto initial = labels_from_probs(probs);
      const Task t = seg ? Task::segmentation : Task::change;
      const int classes = seg ? cfg.num_classes : 2;
      if (!refine_cmd) {
        write_file(out / "metrics.txt", metrics_report(initial, truth, t, classes).to_text());
        write_rasters(out / "pred", initial, n, h, w);
      }
      if (refined) {
        write_rasters(out / "refined", refined->labels, n, h, w);
        write_rasters(out / "uncertain", mask_values(refined->mask.u), n, h, w, 255);
        if (!refine_cmd) write_file(out / "metrics_refined.txt", metrics_report(refined->labels, truth, t, classes).to_text());
        std::cout << "uncertain=" << refined->mask.uncertain_count() << " changed=" << refined->changed << "\n";
      }
      std::cout << "wrote results to " << out << "\n";
    } else if (*grad) {
      RunConfig cfg = resolve(grad_c);
      auto report = run_gradient_suite(cfg.seed, instances);
      std::ostringstream ss;
      ss << "operation,instances,passed,worst_rel_error,checked\n";
      bool ok = true;
      for (const auto& e : report) {
        ss << e.name << ',' << e.instances << ',' << e.passed << ',' << e.worst_rel_error << ',' << e.checked << '\n';
        ok &= e.passed == e.instances;
      }
      write_file(fs::path(grad_c.out) / "gradcheck.csv", ss.str());
      std::cout << ss.str();
      return ok ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
