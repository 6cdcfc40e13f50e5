#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "apaseg/errors.hpp"
#include "apaseg/gradcheck_suite.hpp"
#include "apaseg/train.hpp"

namespace py = pybind11;
using namespace apaseg;
using json = nlohmann::json;

namespace {

json to_cpp(const py::handle& obj) {
  if (obj.is_none()) return json::object();
  return json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

template <typename T>
Tensor<T> tensor_from(const py::array_t<T, py::array::c_style | py::array::forcecast>& a, std::size_t rank,
                      const char* what) {
  if (static_cast<std::size_t>(a.ndim()) != rank) {
    throw py::value_error(std::string(what) + " must have " + std::to_string(rank) + " dimensions");
  }
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<T>(std::move(shape), std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> array_from(const Tensor<T>& t) {
  py::array_t<T> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using LabelArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

AxisId parse_axis(const std::string& s) {
  for (auto a : kAllAxes) {
    if (axis_name(a) == s) return a;
  }
  throw py::value_error("axis must be one of sagittal, axial, coronal; got '" + s + "'");
}

py::dict record_to_dict(const VolumeRecord& r) {
  py::dict d;
  d["image"] = array_from(r.image);
  d["label"] = array_from(r.label);
  d["spacing"] = py::make_tuple(r.spacing[0], r.spacing[1], r.spacing[2]);
  d["case_id"] = r.case_id;
  d["meta"] = to_py(r.meta);
  return d;
}

py::list axis_weights(const Network<float>& net) {
  py::list rows;
  for (const auto& r : axis_weight_table(net)) {
    py::dict row;
    row["stage"] = r.stage;
    row["sagittal"] = r.weights[0];
    row["axial"] = r.weights[1];
    row["coronal"] = r.weights[2];
    rows.append(row);
  }
  return rows;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "3D segmentation network with axis-projected attention blocks";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);

  m.def(
      "synthesize_case",
      [](const py::object& spec, std::uint64_t seed, const std::string& case_id) {
        return record_to_dict(synthesize_case(synthetic_spec_from_json(to_cpp(spec)), seed, case_id));
      },
      py::arg("spec") = py::none(), py::arg("seed") = 0, py::arg("case_id") = "",
      "Phantom volume as a dict with image (float32), label (uint8), spacing, case_id and meta.");

  m.def(
      "synthesize_dataset",
      [](const std::filesystem::path& out_dir, int count, std::uint64_t seed, int val_count,
         const py::object& spec) {
        return synthesize_dataset(synthetic_spec_from_json(to_cpp(spec)), count, seed, out_dir, val_count);
      },
      py::arg("out_dir"), py::arg("count"), py::arg("seed") = 0, py::arg("val_count") = 0,
      py::arg("spec") = py::none(), "Writes .vol files and dataset.json; returns the index path.");

  m.def(
      "load_volume", [](const std::filesystem::path& p) { return record_to_dict(load_volume(p)); },
      py::arg("path"));

  m.def(
      "dice_score",
      [](const LabelArray& pred, const LabelArray& gt, int class_id) {
        return dice_score(tensor_from(pred, 3, "pred"), tensor_from(gt, 3, "gt"), class_id);
      },
      py::arg("pred"), py::arg("gt"), py::arg("class_id"));

  m.def(
      "hd95",
      [](const LabelArray& pred, const LabelArray& gt, int class_id, const Spacing& spacing) {
        return hd95(tensor_from(pred, 3, "pred"), tensor_from(gt, 3, "gt"), class_id, spacing);
      },
      py::arg("pred"), py::arg("gt"), py::arg("class_id"), py::arg("spacing") = Spacing{1.0, 1.0, 1.0},
      "95th-percentile boundary distance in mm, or None when either mask lacks the class.");

  m.def(
      "project",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x, const std::string& axis,
         const std::string& op) {
        NoGradGuard no_grad;
        return array_from(
            project(Var<double>(tensor_from(x, 5, "x")), parse_axis(axis), parse_projection_op(op)).value());
      },
      py::arg("x"), py::arg("axis"), py::arg("op") = "AvgPlusMax",
      "Projects (N, C, H, W, D) onto the plane orthogonal to `axis`.");

  m.def(
      "cosine_lr",
      [](double epoch, const py::object& cfg) { return cosine_lr(epoch, train_config_from_json(to_cpp(cfg))); },
      py::arg("epoch"), py::arg("config") = py::none());

  m.def(
      "window_origins",
      [](const Extent3& volume, const Extent3& patch, double overlap) {
        return window_origins(volume, patch, overlap);
      },
      py::arg("volume"), py::arg("patch"), py::arg("overlap") = 0.5);

  py::class_<Network<float>>(m, "Network")
      .def(py::init([](const py::object& cfg) { return Network<float>::build(network_config_from_json(to_cpp(cfg))); }),
           py::arg("config") = py::none())
      .def_static(
          "load", [](const std::filesystem::path& p) { return load_network(p); }, py::arg("path"))
      .def(
          "save", [](const Network<float>& n, const std::filesystem::path& p) { save_network(p, n); },
          py::arg("path"))
      .def_property_readonly("config", [](const Network<float>& n) { return to_py(to_json(n.config())); })
      .def_property_readonly("param_count", &Network<float>::param_count)
      .def(
          "forward",
          [](const Network<float>& n, const FloatArray& x) {
            Tensor<float> in = tensor_from(x, 5, "x");
            Tensor<float> out;
            {
              py::gil_scoped_release release;
              NoGradGuard no_grad;
              out = n.forward(Var<float>(std::move(in), false)).value();
            }
            return array_from(out);
          },
          py::arg("x"), "Logits (N, classes, H, W, D) for input (N, in_channels, H, W, D).")
      .def("axis_weights", &axis_weights, "Learned axis importance per fused stage.")
      .def(
          "segment",
          [](const Network<float>& n, const FloatArray& image, std::optional<Extent3> patch, double overlap) {
            VolumeRecord rec;
            rec.image = tensor_from(image, 3, "image");
            rec.label = LabelVolume(rec.image.shape(), 0);
            LabelVolume out;
            {
              py::gil_scoped_release release;
              out = sliding_window_infer(n, rec, patch.value_or(n.config().patch_shape), overlap);
            }
            return array_from(out);
          },
          py::arg("image"), py::arg("patch") = py::none(), py::arg("overlap") = 0.5,
          "Sliding-window label map for an (H, W, D) image.");

  m.def(
      "train",
      [](const py::object& cfg, const std::filesystem::path& dataset, const std::filesystem::path& out_dir,
         const std::string& split) {
        const TrainConfig tc = train_config_from_json(to_cpp(cfg));
        auto data = load_dataset(dataset, split);
        std::optional<Trainer> t;
        {
          py::gil_scoped_release release;
          t.emplace(train(tc, std::move(data), {out_dir, std::nullopt, std::nullopt}));
        }
        py::list log;
        for (const auto& r : t->log()) log.append(to_py(to_json(r)));
        return log;
      },
      py::arg("config"), py::arg("dataset"), py::arg("out_dir"), py::arg("split") = "train",
      "Trains into out_dir (final.ckpt, logs, axis weights) and returns the per-epoch log.");

  m.def(
      "gradcheck",
      [](double tolerance) {
        GradCheckReport r;
        {
          py::gil_scoped_release release;
          r = run_gradcheck_suite(tolerance);
        }
        py::dict out;
        for (const auto& c : r.cases) out[py::str(c.name)] = c.result.max_rel_error;
        return py::make_tuple(r.passed(), out);
      },
      py::arg("tolerance") = 1e-4, "Returns (passed, {case name: max relative error}).");
}
