#include "udhf2/metrics.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace udhf2 {
namespace {

double ratio(double num, double den) { return den > 0 ? num / den : 0.0; }

}  // namespace

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : classes_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
  if (num_classes < 2) throw ParameterError("confusion matrix needs at least two classes");
}

void ConfusionMatrix::add(std::span<const std::int32_t> prediction, std::span<const std::int32_t> truth) {
  if (prediction.size() != truth.size()) {
    throw DimensionError("metrics: prediction has " + std::to_string(prediction.size()) + " pixels, truth " +
                         std::to_string(truth.size()));
  }
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto t = truth[i], p = prediction[i];
    if (t < 0 || t >= classes_ || p < 0 || p >= classes_) {
      throw ParameterError("metrics: label out of range at pixel " + std::to_string(i));
    }
    ++counts_[static_cast<std::size_t>(t * classes_ + p)];
  }
  total_ += static_cast<std::int64_t>(truth.size());
}

MetricReport segmentation_report(const ConfusionMatrix& cm) {
  MetricReport r;
  r.task = Task::segmentation;
  const int k = cm.classes();
  double trace = 0, f1_sum = 0, iou_sum = 0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    double tp = static_cast<double>(cm.at(c, c)), fp = 0, fn = 0;
    for (int o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += static_cast<double>(cm.at(o, c));
      fn += static_cast<double>(cm.at(c, o));
    }
    trace += tp;
    if (tp + fp + fn == 0) {
      r.class_f1.push_back(std::numeric_limits<double>::quiet_NaN());
      r.class_iou.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double p = ratio(tp, tp + fp), rc = ratio(tp, tp + fn);
    const double f1 = ratio(2 * p * rc, p + rc);
    const double iou = tp / (tp + fp + fn);
    r.class_f1.push_back(f1);
    r.class_iou.push_back(iou);
    f1_sum += f1;
    iou_sum += iou;
    ++present;
  }
  r.oa = ratio(trace, static_cast<double>(cm.total()));
  r.mean_f1 = present ? f1_sum / present : 0.0;
  r.miou = present ? iou_sum / present : 0.0;
  return r;
}

MetricReport change_report(const ConfusionMatrix& cm) {
  if (cm.classes() != 2) throw ParameterError("change metrics need a binary confusion matrix");
  MetricReport r;
  r.task = Task::change;
  const double tp = static_cast<double>(cm.at(1, 1)), fp = static_cast<double>(cm.at(0, 1));
  const double fn = static_cast<double>(cm.at(1, 0)), tn = static_cast<double>(cm.at(0, 0));
  r.oa = ratio(tp + tn, static_cast<double>(cm.total()));
  if (tp + fp + fn == 0) {
    r.precision = r.recall = r.f1 = r.iou = 1.0;
    return r;
  }
  r.precision = ratio(tp, tp + fp);
  r.recall = ratio(tp, tp + fn);
  r.f1 = ratio(2 * r.precision * r.recall, r.precision + r.recall);
  r.iou = tp / (tp + fp + fn);
  return r;
}

MetricReport metrics_report(std::span<const std::int32_t> prediction, std::span<const std::int32_t> truth, Task task,
                            int num_classes) {
  ConfusionMatrix cm(task == Task::change ? 2 : num_classes);
  cm.add(prediction, truth);
  return task == Task::change ? change_report(cm) : segmentation_report(cm);
}

std::string MetricReport::to_text() const {
  std::ostringstream os;
  os.precision(10);
  os << "task=" << task_name(task) << "\n";
  if (task == Task::segmentation) {
    os << "oa=" << oa << "\nmean_f1=" << mean_f1 << "\nmiou=" << miou << "\n";
    for (std::size_t c = 0; c < class_f1.size(); ++c) {
      if (std::isnan(class_f1[c])) {
        os << "f1_class" << c << "=absent\niou_class" << c << "=absent\n";
      } else {
        os << "f1_class" << c << "=" << class_f1[c] << "\niou_class" << c << "=" << class_iou[c] << "\n";
      }
    }
  } else {
    os << "precision=" << precision << "\nrecall=" << recall << "\nf1=" << f1 << "\niou=" << iou << "\noa=" << oa
       << "\n";
  }
  return os.str();
}

}  // namespace udhf2
