#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "udhf2/change.hpp"
#include "udhf2/config.hpp"
#include "udhf2/metrics.hpp"
#include "udhf2/mudm.hpp"

namespace udhf2 {

struct SegDataset {
  Tensor images;  // (N, 3, H, W)
  std::vector<std::int32_t> labels;
  std::int64_t n = 0, height = 0, width = 0;
  int classes = 0;
};

struct ChangeDataset {
  Tensor images1;
  Tensor images2;
  std::vector<std::int32_t> labels;  // 0/1
  std::vector<AffinePerturbation> registration;
  std::int64_t n = 0, height = 0, width = 0;
};

/// num_samples scenes / pairs seeded data_seed, data_seed + 1, ...
SegDataset make_seg_dataset(const RunConfig& config);
ChangeDataset make_change_dataset(const RunConfig& config);

/// Writes images, rasters and a tab-separated manifest under `dir`.
void write_seg_dataset(const std::filesystem::path& dir, const SegDataset& data);
void write_change_dataset(const std::filesystem::path& dir, const ChangeDataset& data);
/// Manifest lines: image<TAB>label, or image1<TAB>image2<TAB>mask. Paths are
/// relative to the manifest.
SegDataset load_seg_dataset(const std::filesystem::path& manifest, int classes, DType dtype);
ChangeDataset load_change_dataset(const std::filesystem::path& manifest, DType dtype);

/// Rows of a (N, ...) tensor.
Tensor take_rows(const Tensor& x, const std::vector<std::int64_t>& rows);
std::vector<std::int32_t> take_rasters(const std::vector<std::int32_t>& x, std::int64_t plane,
                                       const std::vector<std::int64_t>& rows);

/// Append-only "step,loss,lr" CSV.
class TrainLog {
 public:
  explicit TrainLog(std::string header = "step,loss,lr");
  void add(int step, double loss, double lr);
  void note(const std::string& line);
  /// Called with every note as it is recorded.
  std::function<void(const std::string&)> on_note;
  const std::vector<double>& losses() const { return losses_; }
  std::string csv() const;
  const std::vector<std::string>& notes() const { return notes_; }

 private:
  std::string header_;
  std::vector<std::string> rows_;
  std::vector<double> losses_;
  std::vector<std::string> notes_;
};

struct TrainResult {
  int steps = 0;
  double first_loss = 0;
  double last_loss = 0;
  double metric = 0;  // mIoU (segmentation) or change IoU at the end
  bool reached_target = false;
};

TrainResult train_segmentation(const RunConfig& config, ParameterRegistry& registry, const SegmentationNet& net,
                               const SegDataset& data, TrainLog& log);
TrainResult train_change(const RunConfig& config, ParameterRegistry& registry, const ChangeNet& net,
                         const ChangeDataset& data, TrainLog& log);

/// Softmax probabilities (N, K, H, W), inference mode, batched.
Tensor predict_segmentation(const SegmentationNet& net, ParameterRegistry& registry, const Tensor& images, int batch);
/// Change probabilities (N, 1, H, W).
Tensor predict_change(const ChangeNet& net, ParameterRegistry& registry, const Tensor& images1, const Tensor& images2,
                      int batch);
/// argmax over axis 1; K = 1 thresholds at 0.5.
std::vector<std::int32_t> labels_from_probs(const Tensor& probs);

/// Stage 2: trains the denoiser against ground truth inside U, with U built
/// from the frozen stage-1 probabilities.
TrainResult train_seg_denoiser(const RunConfig& config, ParameterRegistry& registry, const Denoiser& denoiser,
                               const SegDataset& data, const Tensor& initial_probs, TrainLog& log);
TrainResult train_change_denoiser(const RunConfig& config, ParameterRegistry& registry, const Denoiser& denoiser,
                                  const ChangeDataset& data, const Tensor& initial_probs, TrainLog& log);

/// Per-image refinement, seeded by config.seed + image index.
RefineResult refine_segmentation(const RunConfig& config, const Denoiser& denoiser, ParameterRegistry& registry,
                                 const Tensor& images, const Tensor& probs);
RefineResult refine_change(const RunConfig& config, const Denoiser& denoiser, ParameterRegistry& registry,
                           const Tensor& images1, const Tensor& images2, const Tensor& probs);

}  // namespace udhf2
