#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "udhf2/change.hpp"
#include "udhf2/losses.hpp"
#include "udhf2/mudm.hpp"
#include "udhf2/optim.hpp"

namespace udhf2 {

struct RunConfig {
  // model
  std::array<std::int64_t, 4> channel_plan{16, 32, 64, 128};
  int window = 4;
  int heads = 2;
  int groups = 2;
  int points = kDeformPoints;
  int ffn_expansion = 2;
  int blocks_per_stage = 2;
  std::string dtype = "f32";

  // data
  int num_classes = 6;
  std::int64_t image_size = 64;
  int num_samples = 8;
  std::uint64_t data_seed = 1000;
  bool augment_flips = false;

  // uncertainty diffusion
  double rho = 0.7;
  int buffer_radius = 2;
  int diffusion_steps = 50;
  double mu_min = 1e-4;
  double mu_max = 0.02;
  double mixed_pixel_fraction = 0.1;
  int occlusions = 1;
  bool registration_noise = true;
  double max_shift = kMaxShift;
  double snr_cap = 5.0;

  LossWeights loss;

  // ablations
  bool stationary_only = false;
  bool non_stationary_only = false;
  bool disable_mudm = false;
  bool hftm_vs_plain = false;
  bool difference_architecture = false;
  bool fully_shared_siamese = false;
  bool plain_decoder = false;

  // optimization
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int warmup_steps = 0;
  std::string lr_schedule = "cosine";  // cosine | constant
  double grad_clip = 0.0;  // global gradient norm cap; 0 disables
  int batch_size = 4;
  int steps = 2000;
  int stage2_steps = 600;
  int eval_every = 50;
  double target_metric = 0.0;  // early stop once reached; 0 disables
  std::uint64_t seed = 0;

  void validate() const;
  DType value_dtype() const;
  EncoderConfig encoder() const;
  NetConfig net() const;
  ChangeConfig change() const;
  DenoiserConfig seg_denoiser() const;
  DenoiserConfig cd_denoiser() const;
  NoiseSchedule schedule() const;
  RefineConfig refine() const;
  AdamWOptions optimizer() const;
};

/// key=value lines, '#' comments; unknown keys and bad values name the line.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
/// Every key with its effective value, one per line, in a fixed order.
std::string config_to_text(const RunConfig& config);

}  // namespace udhf2
