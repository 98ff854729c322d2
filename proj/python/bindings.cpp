#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mmml/errors.hpp"
#include "mmml/experiment.hpp"

namespace py = pybind11;
using namespace mmml;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-d array, got " + std::to_string(a.ndim()) + " dimensions");
  std::vector<double> v(a.data(), a.data() + a.size());
  return Tensor::from_data({static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))},
                           std::move(v));
}

py::dict report_dict(const MetricsReport& r) {
  py::dict d;
  for (const auto& [name, value] : r.fields) {
    d[py::str(name)] = value ? py::object(py::float_(*value)) : py::object(py::none());
  }
  return d;
}

py::list history_list(const TrainHistory& h) {
  py::list out;
  for (const auto& e : h.epochs) {
    py::dict d;
    d["epoch"] = e.epoch;
    d["train_loss"] = e.train_loss;
    d["val_loss"] = e.val_loss;
    d["val_mae"] = e.val_mae;
    out.append(d);
  }
  return out;
}

ExperimentConfig parse_config(const std::string& json) { return json.empty() ? ExperimentConfig{} : experiment_from_json(json); }

}  // namespace

PYBIND11_MODULE(_mmml, m) {
  m.doc() = "Multimodal sentiment fusion network: data generation, training and evaluation.";

  auto error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", error.ptr());
  py::register_exception<ContractError>(m, "ContractError", error.ptr());
  py::register_exception<NumericError>(m, "NumericError", error.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", error.ptr());
  py::register_exception<FormatError>(m, "FormatError", error.ptr());
  py::register_exception<ParseError>(m, "ParseError", error.ptr());
  py::register_exception<UndefinedMetricError>(m, "UndefinedMetricError", error.ptr());
  py::register_exception<FileError>(m, "FileError", error.ptr());

  py::class_<UtteranceSample>(m, "Sample")
      .def(py::init([](py::array_t<double> text, py::array_t<double> audio, double label_f,
                       std::optional<double> label_t, std::optional<double> label_a, const std::string& style,
                       const std::string& id, const std::string& dialogue_id, std::size_t turn_index) {
             UtteranceSample s;
             s.text_seq = from_numpy(text);
             s.audio_seq = from_numpy(audio);
             s.label_f = label_f;
             s.label_t = label_t;
             s.label_a = label_a;
             s.style = parse_task_style(style);
             s.id = id;
             s.dialogue_id = dialogue_id.empty() ? id : dialogue_id;
             s.turn_index = turn_index;
             return s;
           }),
           py::arg("text"), py::arg("audio"), py::arg("label_f"), py::arg("label_t") = py::none(),
           py::arg("label_a") = py::none(), py::arg("style") = "mosi", py::arg("id") = "u0",
           py::arg("dialogue_id") = "", py::arg("turn_index") = 0)
      .def_readonly("id", &UtteranceSample::id)
      .def_readonly("dialogue_id", &UtteranceSample::dialogue_id)
      .def_readonly("turn_index", &UtteranceSample::turn_index)
      .def_readonly("label_f", &UtteranceSample::label_f)
      .def_readonly("label_t", &UtteranceSample::label_t)
      .def_readonly("label_a", &UtteranceSample::label_a)
      .def_property_readonly("style", [](const UtteranceSample& s) { return to_string(s.style); })
      .def_property_readonly("text", [](const UtteranceSample& s) { return to_numpy(s.text_seq); })
      .def_property_readonly("audio", [](const UtteranceSample& s) { return to_numpy(s.audio_seq); })
      .def("__repr__", [](const UtteranceSample& s) {
        return "<Sample " + s.id + " L_t=" + std::to_string(s.text_seq.dim(0)) +
               " L_a=" + std::to_string(s.audio_seq.dim(0)) + " label_f=" + std::to_string(s.label_f) + ">";
      });

  m.def(
      "generate",
      [](const std::string& config_json, std::uint64_t run_seed) {
        auto c = parse_config(config_json);
        c.data_path.reset();
        return load_or_generate(c, run_seed);
      },
      py::arg("config_json") = "", py::arg("run_seed") = 0,
      "Synthetic samples from the \"data\" section of a JSON config; run_seed offsets the generator seed.");
  m.def("load_jsonl", [](const std::filesystem::path& p) { return load_jsonl(p); }, py::arg("path"));
  m.def("save_jsonl", &save_jsonl, py::arg("samples"), py::arg("path"));

  py::class_<MmmlModel>(m, "Model")
      .def_property_readonly("parameter_count", &MmmlModel::parameter_count)
      .def_property_readonly("config_json", [](const MmmlModel& model) { return config_to_json(model.config); })
      .def(
          "predict",
          [](const MmmlModel& model, const std::vector<UtteranceSample>& samples) {
            const auto preds = predict(model, samples);
            py::array_t<double> out({static_cast<py::ssize_t>(preds.size()), py::ssize_t{3}});
            auto r = out.mutable_unchecked<2>();
            for (std::size_t i = 0; i < preds.size(); ++i) {
              r(i, 0) = preds[i].y_text;
              r(i, 1) = preds[i].y_audio;
              r(i, 2) = preds[i].y_fused;
            }
            return out;
          },
          py::arg("samples"), "Array of shape (n, 3): y_text, y_audio, y_fused.")
      .def(
          "predict_text_only",
          [](const MmmlModel& model, const UtteranceSample& s) {
            SampleInput in = sample_input(s);
            in.audio.reset();
            return *predict_available(model, in).y_text;
          },
          py::arg("sample"))
      .def(
          "evaluate",
          [](const MmmlModel& model, const std::vector<UtteranceSample>& samples, const std::string& head) {
            return report_dict(full_report(head_pairs(model, samples, parse_head(head))));
          },
          py::arg("samples"), py::arg("head") = "fused")
      .def("save", [](const MmmlModel& model, const std::filesystem::path& p) { save_model(model, p); },
           py::arg("path"))
      .def("to_bytes", [](const MmmlModel& model) {
        const auto bytes = serialize_model(model);
        return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
      });

  m.def(
      "init_model",
      [](const std::string& config_json, const std::vector<UtteranceSample>& samples, std::uint64_t seed) {
        auto c = parse_config(config_json);
        if (!samples.empty()) adopt_input_widths(c.model, samples);
        return init_model(c.model, seed);
      },
      py::arg("config_json") = "", py::arg("samples") = std::vector<UtteranceSample>{}, py::arg("seed") = 0);
  m.def("load_model", [](const std::filesystem::path& p) { return load_model(p); }, py::arg("path"));

  m.def(
      "train",
      [](const std::vector<UtteranceSample>& samples, const std::string& config_json, std::uint64_t seed) {
        RunResult run = run_training(parse_config(config_json), samples, seed);
        py::dict splits;
        splits["train"] = run.data.train;
        splits["val"] = run.data.val;
        splits["test"] = run.data.test;
        return py::make_tuple(std::move(run.model), history_list(run.history), run.history.best_epoch,
                              run.history.stop_reason, splits);
      },
      py::arg("samples"), py::arg("config_json") = "", py::arg("seed") = 0,
      "Returns (model, history, best_epoch, stop_reason, splits).");

  m.def(
      "full_report",
      [](std::vector<double> predictions, std::vector<double> labels, const std::string& style) {
        return report_dict(full_report({std::move(predictions), std::move(labels), parse_task_style(style)}));
      },
      py::arg("predictions"), py::arg("labels"), py::arg("style") = "mosi");

  m.def(
      "gradcheck",
      [](std::uint64_t seed) {
        py::list out;
        for (const auto& e : run_gradcheck(seed)) out.append(py::make_tuple(e.component, e.max_rel_error));
        return out;
      },
      py::arg("seed") = 0);
  m.attr("GRADCHECK_TOLERANCE") = kGradcheckTolerance;
}
