#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>

#include "udhf2/change.hpp"
#include "udhf2/config.hpp"
#include "udhf2/errors.hpp"
#include "udhf2/freq.hpp"
#include "udhf2/gradsuite.hpp"
#include "udhf2/io.hpp"
#include "udhf2/metrics.hpp"
#include "udhf2/mudm.hpp"
#include "udhf2/scene.hpp"
#include "udhf2/train.hpp"

namespace py = pybind11;
using namespace udhf2;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using I32Array = py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const F64Array& a, DType dtype = DType::f64) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from_values(shape, std::span<const double>(a.data(), static_cast<std::size_t>(a.size())), dtype);
}

py::array_t<double> to_array(const Tensor& t) {
  py::array_t<double> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  const auto v = t.to_vector();
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

std::vector<std::int32_t> to_labels(const I32Array& a) { return {a.data(), a.data() + a.size()}; }

py::array_t<std::int32_t> labels_array(const std::vector<std::int32_t>& v, std::vector<py::ssize_t> shape) {
  py::array_t<std::int32_t> out(shape);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::list stack_list(const FrequencyStack& s) {
  py::list out;
  for (const auto& c : s.components) out.append(to_array(c));
  return out;
}

py::dict report_dict(const MetricReport& r) {
  py::dict d;
  d["oa"] = r.oa;
  if (r.task == Task::change) {
    d["precision"] = r.precision;
    d["recall"] = r.recall;
    d["f1"] = r.f1;
    d["iou"] = r.iou;
  } else {
    d["miou"] = r.miou;
    d["mean_f1"] = r.mean_f1;
    d["class_iou"] = r.class_iou;
    d["class_f1"] = r.class_f1;
  }
  return d;
}

py::dict result_dict(const TrainResult& r) {
  py::dict d;
  d["steps"] = r.steps;
  d["first_loss"] = r.first_loss;
  d["last_loss"] = r.last_loss;
  d["metric"] = r.metric;
  d["reached_target"] = r.reached_target;
  return d;
}

SegDataset seg_dataset(const F64Array& images, const I32Array& labels, int classes, DType dtype) {
  if (images.ndim() != 4 || labels.ndim() != 3) throw DimensionError("expected images (N, 3, H, W) and labels (N, H, W)");
  SegDataset d;
  d.images = to_tensor(images, dtype);
  d.labels = to_labels(labels);
  d.n = images.shape(0);
  d.height = images.shape(2);
  d.width = images.shape(3);
  d.classes = classes;
  return d;
}

class Segmenter {
 public:
  explicit Segmenter(const std::string& config_text)
      : config_(parse_config(config_text)),
        registry_(std::make_unique<ParameterRegistry>(config_.seed, config_.value_dtype())),
        net_(Scope(*registry_, "seg"), config_.net()) {}

  py::dict fit(const F64Array& images, const I32Array& labels) {
    TrainLog log;
    return result_dict(
        train_segmentation(config_, *registry_, net_, seg_dataset(images, labels, config_.num_classes, config_.value_dtype()), log));
  }

  py::array_t<double> predict(const F64Array& images) {
    return to_array(predict_segmentation(net_, *registry_, to_tensor(images, config_.value_dtype()), config_.batch_size));
  }

  std::int64_t parameter_count() const { return registry_->parameter_count(); }
  void save(const std::string& path) const { save_registry(path, *registry_); }
  void load(const std::string& path) { load_registry(path, *registry_); }

 private:
  RunConfig config_;
  std::unique_ptr<ParameterRegistry> registry_;
  SegmentationNet net_;
};

class ChangeDetector {
 public:
  explicit ChangeDetector(const std::string& config_text)
      : config_(parse_config(config_text)),
        registry_(std::make_unique<ParameterRegistry>(config_.seed, config_.value_dtype())),
        net_(Scope(*registry_, "cd"), config_.change()) {}

  py::dict fit(const F64Array& images1, const F64Array& images2, const I32Array& labels) {
    ChangeDataset d;
    d.images1 = to_tensor(images1, config_.value_dtype());
    d.images2 = to_tensor(images2, config_.value_dtype());
    d.labels = to_labels(labels);
    d.n = images1.shape(0);
    d.height = images1.shape(2);
    d.width = images1.shape(3);
    d.registration.resize(static_cast<std::size_t>(d.n));
    TrainLog log;
    return result_dict(train_change(config_, *registry_, net_, d, log));
  }

  py::array_t<double> predict(const F64Array& images1, const F64Array& images2) {
    return to_array(predict_change(net_, *registry_, to_tensor(images1, config_.value_dtype()),
                                   to_tensor(images2, config_.value_dtype()), config_.batch_size));
  }

  std::int64_t parameter_count() const { return registry_->parameter_count(); }
  void save(const std::string& path) const { save_registry(path, *registry_); }
  void load(const std::string& path) { load_registry(path, *registry_); }

 private:
  RunConfig config_;
  std::unique_ptr<ParameterRegistry> registry_;
  ChangeNet net_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Frequency-decomposed segmentation and change detection with uncertainty diffusion refinement";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ParameterError>(m, "ParameterError", PyExc_ValueError);

  m.def("dwt_decompose", [](const F64Array& x) { return stack_list(dwt_haar_decompose(to_tensor(x))); }, py::arg("image"),
        "Haar subbands [HH, LH, HL, LL] over the last two axes.");
  m.def(
      "dwt_reconstruct",
      [](const std::vector<F64Array>& parts) {
        if (parts.size() != 4) throw DimensionError("dwt_reconstruct: expects four subbands");
        FrequencyStack s;
        for (int i = 0; i < 4; ++i) s.components[i] = to_tensor(parts[i]);
        return to_array(dwt_haar_reconstruct(s));
      },
      py::arg("subbands"));
  m.def("stationary_decompose", [](const F64Array& x) { return stack_list(stationary_decompose(to_tensor(x))); },
        py::arg("image"), "Four radial DFT bands, highest first; they sum to the input.");

  m.def(
      "generate_scene",
      [](std::uint64_t seed, std::int64_t size, int classes) {
        auto s = generate_scene(seed, size, size, classes);
        return py::make_tuple(to_array(s.image), labels_array(s.label, {size, size}));
      },
      py::arg("seed"), py::arg("size") = 64, py::arg("classes") = 6);
  m.def(
      "generate_change_pair",
      [](std::uint64_t seed, std::int64_t size) {
        auto p = generate_change_pair(seed, size, size);
        return py::make_tuple(to_array(p.image1), to_array(p.image2), labels_array(p.change_mask, {size, size}));
      },
      py::arg("seed"), py::arg("size") = 64);

  m.def(
      "metrics",
      [](const I32Array& pred, const I32Array& truth, const std::string& task, int classes) {
        if (task != "seg" && task != "cd") throw ConfigError("task must be 'seg' or 'cd'");
        return report_dict(metrics_report(to_labels(pred), to_labels(truth), task == "cd" ? Task::change : Task::segmentation,
                                          classes));
      },
      py::arg("prediction"), py::arg("truth"), py::arg("task") = "seg", py::arg("classes") = 6);

  m.def(
      "uncertainty_mask",
      [](const F64Array& probs, const I32Array& labels, double rho, int radius) {
        auto mask = build_mask(to_tensor(probs), to_labels(labels), rho, radius);
        std::vector<std::int32_t> u(mask.u.begin(), mask.u.end());
        return labels_array(u, {probs.shape(0), probs.shape(2), probs.shape(3)});
      },
      py::arg("probs"), py::arg("labels"), py::arg("rho") = 0.7, py::arg("buffer_radius") = 2);

  m.def("config_text", [](const std::string& text) { return config_to_text(parse_config(text)); }, py::arg("text") = "",
        "Effective configuration after defaults.");

  m.def(
      "gradient_suite",
      [](std::uint64_t seed, int instances) {
        py::list out;
        for (const auto& e : run_gradient_suite(seed, instances)) {
          py::dict d;
          d["name"] = e.name;
          d["instances"] = e.instances;
          d["passed"] = e.passed;
          d["worst_rel_error"] = e.worst_rel_error;
          out.append(d);
        }
        return out;
      },
      py::arg("seed") = 0, py::arg("instances") = 2);

  py::class_<Segmenter>(m, "Segmenter")
      .def(py::init<const std::string&>(), py::arg("config") = "")
      .def("fit", &Segmenter::fit, py::arg("images"), py::arg("labels"))
      .def("predict", &Segmenter::predict, py::arg("images"))
      .def_property_readonly("parameter_count", &Segmenter::parameter_count)
      .def("save", &Segmenter::save)
      .def("load", &Segmenter::load);

  py::class_<ChangeDetector>(m, "ChangeDetector")
      .def(py::init<const std::string&>(), py::arg("config") = "")
      .def("fit", &ChangeDetector::fit, py::arg("images1"), py::arg("images2"), py::arg("labels"))
      .def("predict", &ChangeDetector::predict, py::arg("images1"), py::arg("images2"))
      .def_property_readonly("parameter_count", &ChangeDetector::parameter_count)
      .def("save", &ChangeDetector::save)
      .def("load", &ChangeDetector::load);
}
