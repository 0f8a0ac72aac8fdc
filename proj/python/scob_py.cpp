// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "scob/cam.hpp"
#include "scob/contrastive.hpp"
#include "scob/error.hpp"
#include "scob/ipt.hpp"
#include "scob/metrics.hpp"
#include "scob/report.hpp"
#include "scob/trainer.hpp"

namespace py = pybind11;
using namespace scob;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

ScoreTable to_table(const Array& scores, const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& labels) {
  if (scores.ndim() != 2 || labels.ndim() != 2 || scores.shape(0) != labels.shape(0) ||
      scores.shape(1) != labels.shape(1)) {
    throw DimensionError("scores and labels must be matching N x L arrays");
  }
  ScoreTable t{static_cast<int>(scores.shape(0)), static_cast<int>(scores.shape(1)), {}, {}};
  t.scores.assign(scores.data(), scores.data() + scores.size());
  t.labels.assign(labels.data(), labels.data() + labels.size());
  return t;
}

py::dict metric_dict(const MetricRow& m) {
  py::dict d;
  d["mAP"] = m.map;
  d["OP"] = m.op;
  d["OR"] = m.orec;
  d["OF1"] = m.of1;
  d["CP"] = m.cp;
  d["CR"] = m.cr;
  d["CF1"] = m.cf1;
  d["threshold"] = m.threshold;
  return d;
}

py::dict row_dict(const EpochRow& r) {
  py::dict d = metric_dict(r.val);
  d["epoch"] = r.epoch;
  d["t"] = r.t;
  d["loss_class"] = r.loss_class;
  d["loss_cont"] = r.loss_cont;
  d["mean_unknown_neg_prob"] = r.mean_unknown_neg;
  d["val_k_hat"] = r.val_k_hat;
  d["wall_seconds"] = r.wall_seconds;
  return d;
}

py::array_t<float> sample_pixels(const ImageSample& s) {
  py::array_t<float> a({3, s.image_size, s.image_size});
  std::copy(s.pixels.begin(), s.pixels.end(), a.mutable_data());
  return a;
}

}  // namespace

PYBIND11_MODULE(pyscob, m) {
  m.doc() = "Single-positive multi-label bootstrapping: data, training and metrics";

  // translators run newest first, so the base goes in first
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

  py::class_<DatasetSpec>(m, "DatasetSpec")
      .def(py::init<>())
      .def_readwrite("num_classes", &DatasetSpec::num_classes)
      .def_readwrite("image_size", &DatasetSpec::image_size)
      .def_readwrite("num_train", &DatasetSpec::num_train)
      .def_readwrite("num_val", &DatasetSpec::num_val)
      .def_readwrite("min_positives", &DatasetSpec::min_positives)
      .def_readwrite("max_positives", &DatasetSpec::max_positives)
      .def_readwrite("noise_sigma", &DatasetSpec::noise_sigma)
      .def_readwrite("seed", &DatasetSpec::seed)
      .def("expected_positives", &DatasetSpec::expected_positives);

  py::class_<ImageSample>(m, "ImageSample")
      .def_readonly("id", &ImageSample::id)
      .def_readonly("y", &ImageSample::y)
      .def_readonly("z", &ImageSample::z)
      .def_property_readonly("pixels", &sample_pixels);

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("spec", &Dataset::spec)
      .def_readonly("train", &Dataset::train)
      .def_readonly("val", &Dataset::val)
      .def_readonly("single_positive", &Dataset::single_positive);

  m.def("generate_dataset", &generate_dataset, py::arg("spec"));
  m.def(
      "drop_to_single_positive", [](Dataset& d, std::uint64_t seed) { drop_to_single_positive(d, seed); },
      py::arg("dataset"), py::arg("seed"));
  m.def("save_dataset", &save_dataset);
  m.def("load_dataset", &load_dataset);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def("set", &TrainConfig::set)
      .def("validate", &TrainConfig::validate)
      .def("to_text", &TrainConfig::to_text)
      .def_static("keys", &TrainConfig::keys)
      .def_static("from_text",
                  [](const std::string& text) {
                    TrainConfig c;
                    std::istringstream in(text);
                    c.merge_text(in);
                    return c;
                  })
      .def_static("variant", &with_variant);

  py::class_<TrainState>(m, "TrainState")
      .def_readonly("epoch", &TrainState::epoch)
      .def_readonly("t", &TrainState::t)
      .def_readonly("config", &TrainState::config)
      .def_property_readonly("rows",
                             [](const TrainState& s) {
                               py::list out;
                               for (const auto& r : s.rows) out.append(row_dict(r));
                               return out;
                             })
      .def("metrics_csv",
           [](const TrainState& s) {
             std::ostringstream os;
             write_metrics_csv(os, s.rows);
             return os.str();
           })
      .def("online_checksum", [](const TrainState& s) { return s.nets.online.parameters().checksum(); })
      .def(
          "predict",
          [](const TrainState& s, const Dataset& d, const std::string& split) {
            const auto t = predict(s.nets.online, split == "train" ? d.train : d.val, s.config);
            Array a({t.rows, t.cols});
            std::copy(t.scores.begin(), t.scores.end(), a.mutable_data());
            return a;
          },
          py::arg("dataset"), py::arg("split") = "val")
      .def("cam_f1", [](const TrainState& s, const Dataset& d) {
        return cam_quality(s.nets.online, d.val, s.config).combined.f1;
      });

  m.def(
      "run_bootstrap",
      [](const TrainConfig& c, const Dataset& d, int stop_after_epoch) {
        RunOptions opt;
        opt.stop_after_epoch = stop_after_epoch;
        py::gil_scoped_release release;
        return run_bootstrap(c, d, opt);
      },
      py::arg("config"), py::arg("dataset"), py::arg("stop_after_epoch") = -1);
  m.def(
      "resume",
      [](TrainState& s, const Dataset& d) {
        py::gil_scoped_release release;
        run_bootstrap(s, d);
      },
      py::arg("state"), py::arg("dataset"));
  m.def("save_checkpoint", py::overload_cast<const TrainState&, const std::string&>(&save_checkpoint));
  m.def("load_checkpoint", py::overload_cast<const std::string&>(&load_checkpoint));

  m.def(
      "mean_average_precision",
      [](const Array& s, const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& y) {
        const auto r = mean_average_precision(to_table(s, y));
        return py::make_tuple(r.map, r.per_class);
      },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "prf_metrics",
      [](const Array& s, const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& y, double thr) {
        return metric_dict(prf_metrics(to_table(s, y), thr));
      },
      py::arg("scores"), py::arg("labels"), py::arg("threshold") = 0.5);

  m.def(
      "threshold_cam",
      [](const Array& map, double gamma, int window) {
        if (map.ndim() != 2) throw DimensionError("map must be 2-D");
        ActivationMap a;
        a.height = static_cast<int>(map.shape(0));
        a.width = static_cast<int>(map.shape(1));
        a.values.assign(map.data(), map.data() + map.size());
        const auto mask = threshold_cam(a, gamma, window);
        py::array_t<std::uint8_t> out({mask.grid.height, mask.grid.width});
        std::copy(mask.grid.cells.begin(), mask.grid.cells.end(), out.mutable_data());
        return out;
      },
      py::arg("map"), py::arg("gamma") = 0.5, py::arg("window") = 3);

  m.def("momentum_complement", &momentum_complement);

  py::class_<InstancePriorityTree>(m, "InstancePriorityTree")
      .def(py::init<int, std::size_t>(), py::arg("class_id") = 0, py::arg("capacity") = 80)
      .def(
          "insert",
          [](InstancePriorityTree& t, double confidence, int sample_id, std::vector<Real> feature) {
            auto evicted = t.insert({std::move(feature), confidence, sample_id, t.class_id()});
            return evicted ? py::cast(evicted->sample_id) : py::none();
          },
          py::arg("confidence"), py::arg("sample_id"), py::arg("feature") = std::vector<Real>{0.0})
      .def("pop", [](InstancePriorityTree& t) {
        const auto n = t.pop();
        return py::make_tuple(n.confidence, n.sample_id);
      })
      .def("__len__", &InstancePriorityTree::size)
      .def("heap_ok", &InstancePriorityTree::heap_ok);
}
