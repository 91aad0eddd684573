#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "udhf2/losses.hpp"

namespace udhf2 {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  void add(std::span<const std::int32_t> prediction, std::span<const std::int32_t> truth);
  std::int64_t at(int truth, int prediction) const { return counts_[truth * classes_ + prediction]; }
  std::int64_t total() const { return total_; }
  int classes() const { return classes_; }

 private:
  int classes_;
  std::vector<std::int64_t> counts_;
  std::int64_t total_ = 0;
};

struct MetricReport {
  Task task = Task::segmentation;
  // Segmentation; per-class entries are NaN for classes absent from both rasters.
  std::vector<double> class_f1;
  std::vector<double> class_iou;
  double mean_f1 = 0;
  double oa = 0;
  double miou = 0;
  // Change detection (class 1 = change).
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  double iou = 0;

  /// Flat key=value lines.
  std::string to_text() const;
};

MetricReport segmentation_report(const ConfusionMatrix& cm);
MetricReport change_report(const ConfusionMatrix& cm);

MetricReport metrics_report(std::span<const std::int32_t> prediction, std::span<const std::int32_t> truth, Task task,
                            int num_classes);

}  // namespace udhf2
