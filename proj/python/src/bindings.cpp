#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mhaff/attention.hpp"
#include "mhaff/fusion.hpp"
#include "mhaff/gradcheck.hpp"
#include "mhaff/ops.hpp"
#include "mhaff/saliency.hpp"
#include "mhaff/train.hpp"

namespace py = pybind11;
using namespace mhaff;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  if (shape.empty()) shape = {1};
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::dict metrics_dict(const EpochMetrics& m) {
  py::dict d;
  d["epoch"] = m.epoch;
  d["train_loss"] = m.train_loss;
  d["val_loss"] = m.val_loss;
  d["val_acc"] = m.val_accuracy;
  d["lr"] = m.lr;
  return d;
}

py::list arms_list(const std::vector<ArmResult>& rows) {
  py::list out;
  for (const ArmResult& r : rows) {
    py::dict d;
    d["arm"] = r.name;
    d["seed"] = r.seed;
    d["failed"] = r.failed;
    d["error"] = r.error;
    d["val_accuracy"] = r.val_accuracy;
    d["val_loss"] = r.val_loss;
    d["best_epoch"] = r.best_epoch;
    d["epochs_run"] = r.epochs_run;
    out.append(d);
  }
  return out;
}

TrainConfig parse_config(const std::string& json) { return json.empty() ? TrainConfig{} : config_from_json(json); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Dual-branch CNN/ViT classifier with multi-head attention feature fusion";

  static PyObject* error_type = nullptr;
  error_type = py::exception<Error>(m, "MhaffError", PyExc_RuntimeError).inc_ref().ptr();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = py::handle(error_type)(std::string(to_string(e.kind())) + ": " + e.what());
      exc.attr("kind") = to_string(e.kind());
      PyErr_SetObject(error_type, exc.ptr());
    }
  });

  m.def("attention_weights", [](const Array& q, const Array& k) {
    return to_array(attention_weights(to_tensor(q), to_tensor(k)));
  }, py::arg("query"), py::arg("key"));
  m.def("attention", [](const Array& q, const Array& k, const Array& v) {
    return to_array(attention(to_tensor(q), to_tensor(k), to_tensor(v)));
  }, py::arg("query"), py::arg("key"), py::arg("value"));
  m.def("multi_head_attention", [](const Array& q, const Array& k, const Array& v, std::size_t heads, const Array& w_out) {
    return to_array(multi_head_attention(to_tensor(q), to_tensor(k), to_tensor(v), heads, to_tensor(w_out)));
  }, py::arg("query"), py::arg("key"), py::arg("value"), py::arg("heads"), py::arg("w_out"));

  m.def("make_qkv", [](const Array& x, const Array& y, const std::string& wiring, const Array& wq, const Array& wk,
                       const Array& wv) {
    MhaFusionParams p;
    p.w_query = to_tensor(wq);
    p.w_key = to_tensor(wk);
    p.w_value = to_tensor(wv);
    p.w_out = Tensor::identity(p.w_query.dim(0));
    const Qkv qkv = make_qkv({to_tensor(x), TokenSource::vit}, {to_tensor(y), TokenSource::cnn},
                             QkvWiring::parse(wiring), p);
    return py::make_tuple(to_array(qkv.query), to_array(qkv.key), to_array(qkv.value));
  }, py::arg("x"), py::arg("y"), py::arg("wiring"), py::arg("w_query"), py::arg("w_key"), py::arg("w_value"));

  m.def("cross_entropy_loss", [](const Array& probs, const std::vector<std::size_t>& targets) {
    return ops::cross_entropy_loss(to_tensor(probs), targets).item();
  }, py::arg("probs"), py::arg("targets"));
  m.def("accuracy", [](const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& labels) {
    return accuracy(predicted, labels);
  }, py::arg("predicted"), py::arg("labels"));

  m.def("default_config", [] { return config_to_json(TrainConfig{}); });
  m.def("normalize_config", [](const std::string& json) { return config_to_json(config_from_json(json)); },
        py::arg("config_json"));

  m.def("train", [](const std::string& config_json, std::optional<std::filesystem::path> out_dir) {
    TrainReport report;
    {
      py::gil_scoped_release release;
      Trainer trainer(parse_config(config_json));
      report = trainer.run(out_dir);
    }
    py::dict d;
    py::list history;
    for (const EpochMetrics& e : report.history) history.append(metrics_dict(e));
    d["history"] = history;
    d["best_epoch"] = report.best_epoch;
    d["best_val_loss"] = report.best_val_loss;
    d["best_val_accuracy"] = report.best_val_accuracy;
    d["stopped_early"] = report.stopped_early;
    d["final_lr"] = report.final_lr;
    d["checkpoint"] = report.checkpoint ? py::cast(report.checkpoint->string()) : py::none();
    return d;
  }, py::arg("config_json") = "", py::arg("out_dir") = py::none());

  m.def("evaluate", [](const std::filesystem::path& checkpoint, const std::string& split,
                       std::optional<std::string> data) {
    Split s = split == "train" ? Split::train : split == "test" ? Split::test : Split::val;
    if (split != "train" && split != "val" && split != "test") throw UsageError("split must be train, val or test");
    const EvalResult r = evaluate_checkpoint(checkpoint, s, data);
    py::dict d;
    d["accuracy"] = r.accuracy;
    d["loss"] = r.loss;
    d["predictions"] = r.predictions;
    d["labels"] = r.labels;
    return d;
  }, py::arg("checkpoint"), py::arg("split") = "val", py::arg("data") = py::none());

  m.def("ablate_qkv", [](const std::string& config_json) {
    std::vector<ArmResult> rows;
    {
      py::gil_scoped_release release;
      rows = ablate_qkv(parse_config(config_json), std::nullopt);
    }
    return arms_list(rows);
  }, py::arg("config_json") = "");
  m.def("compare_fusions", [](const std::string& config_json) {
    std::vector<ArmResult> rows;
    {
      py::gil_scoped_release release;
      rows = compare_fusions(parse_config(config_json), std::nullopt);
    }
    return arms_list(rows);
  }, py::arg("config_json") = "");

  m.def("gradcheck", [](std::uint64_t seed) {
    py::list out;
    for (const GradCheckCase& c : run_gradcheck_suite(seed)) {
      py::dict d;
      d["name"] = c.name;
      d["max_relative_error"] = c.result.max_relative_error;
      d["passed"] = c.result.passed;
      out.append(d);
    }
    return out;
  }, py::arg("seed") = 1);

  m.def("synth_image", [](const std::string& spec, std::size_t label, std::size_t instance) {
    const ImageBuffer img = synth_image(SynthSpec::parse(spec), label, instance);
    py::array_t<std::uint8_t> out({img.channels, img.height, img.width});
    std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
    return out;
  }, py::arg("spec"), py::arg("label"), py::arg("instance"));

  m.def("grad_cam", [](const std::filesystem::path& checkpoint, const std::string& image, std::optional<std::size_t> cls,
                       const std::string& layer) {
    Checkpoint ckpt = load_checkpoint(checkpoint);
    const Heatmap h = grad_cam_image(ckpt.model, ckpt.config.preprocess, load_image(image), cls, parse_layer_tag(layer));
    Array out({h.height, h.width});
    std::copy(h.values.begin(), h.values.end(), out.mutable_data());
    return py::make_tuple(out, h.target_class);
  }, py::arg("checkpoint"), py::arg("image"), py::arg("target") = py::none(), py::arg("layer") = "fusion");

  m.def("export_heatmap", [](const Array& map, const std::string& image, const std::filesystem::path& dir,
                             const std::string& stem) {
    if (map.ndim() != 2) throw DimensionError("heatmap must be 2-D");
    Heatmap h{static_cast<std::size_t>(map.shape(0)), static_cast<std::size_t>(map.shape(1)),
              std::vector<double>(map.data(), map.data() + map.size())};
    export_heatmap(h, load_image(image), dir, stem);
  }, py::arg("map"), py::arg("image"), py::arg("out_dir"), py::arg("stem"));
}
