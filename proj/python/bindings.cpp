#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "wavg/averaging.hpp"
#include "wavg/config.hpp"
#include "wavg/errors.hpp"
#include "wavg/metrics.hpp"
#include "wavg/optim.hpp"
#include "wavg/record_io.hpp"
#include "wavg/train.hpp"

namespace py = pybind11;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

wavg::Tensor2 to_tensor(const Array& a) {
  if (a.ndim() != 2) throw wavg::InputError("expected a 2-d array");
  const auto rows = static_cast<std::size_t>(a.shape(0));
  const auto cols = static_cast<std::size_t>(a.shape(1));
  return wavg::Tensor2(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols));
}

Array to_array(const wavg::Tensor2& t) {
  Array out({t.rows, t.cols});
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

wavg::PredictionSet from_logits(const Array& logits, std::vector<int> labels) {
  return wavg::PredictionSet::from_logits(to_tensor(logits), std::move(labels));
}

wavg::PredictionSet from_probs(const Array& probs, std::vector<int> labels) {
  wavg::PredictionSet p;
  p.probs = to_tensor(probs);
  p.labels = std::move(labels);
  p.validate();
  return p;
}

wavg::ExperimentConfig parse(const std::string& config_json) {
  return wavg::parse_config(nlohmann::json::parse(config_json));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Weight averaging for SGD: EMA/SWA training, calibration and consistency metrics";

  py::register_exception<wavg::InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<wavg::ContractError>(m, "ContractError", PyExc_RuntimeError);
  py::register_exception<wavg::ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("effective_decay", &wavg::effective_decay, py::arg("alpha"), py::arg("from_period"), py::arg("to_period"));
  m.def("warmup_decay", &wavg::warmup_decay, py::arg("alpha"), py::arg("update_count"));
  py::class_<wavg::EmaState>(m, "Ema")
      .def(py::init([](double decay, const std::vector<double>& initial, bool warmup) {
             auto layout = std::make_shared<wavg::ParamLayout>();
             layout->segments.push_back({0, "weight", 0, initial.size()});
             layout->total = initial.size();
             return wavg::EmaState::start(decay, 1, wavg::ParamVector(layout, initial), {}, warmup);
           }),
           py::arg("decay"), py::arg("initial"), py::arg("warmup") = true)
      .def(
          "update",
          [](wavg::EmaState& s, const std::vector<double>& current) {
            wavg::ema_update(s, wavg::ParamVector(s.averaged_params.layout_ptr(), current), s.averaged_bn);
          },
          py::arg("current"))
      .def_property_readonly(
          "value",
          [](const wavg::EmaState& s) {
            const auto v = s.averaged_params.values();
            return std::vector<double>(v.begin(), v.end());
          })
      .def_property_readonly("update_count", [](const wavg::EmaState& s) { return s.update_count; })
      .def("next_decay", &wavg::EmaState::next_decay);

  m.def(
      "lr_at",
      [](const std::string& kind, double base_lr, std::size_t warmup_epochs, std::size_t total_epochs,
         std::size_t steps_per_epoch, std::size_t step) {
        wavg::Schedule s;
        s.kind = wavg::parse_schedule_kind(kind);
        s.base_lr = base_lr;
        s.warmup_epochs = warmup_epochs;
        s.total_epochs = total_epochs;
        s.steps_per_epoch = steps_per_epoch;
        return wavg::lr_at(s, step);
      },
      py::arg("kind"), py::arg("base_lr"), py::arg("warmup_epochs"), py::arg("total_epochs"),
      py::arg("steps_per_epoch"), py::arg("step"));

  m.def("softmax", [](const Array& logits) { return to_array(wavg::softmax(to_tensor(logits))); });
  m.def(
      "churn", [](const Array& a, const Array& b) {
        const std::size_t n = static_cast<std::size_t>(a.shape(0));
        return wavg::churn(from_probs(a, std::vector<int>(n, 0)), from_probs(b, std::vector<int>(n, 0)));
      },
      py::arg("probs_a"), py::arg("probs_b"));
  m.def(
      "js_divergence", [](const Array& a, const Array& b) {
        const std::size_t n = static_cast<std::size_t>(a.shape(0));
        return wavg::js_divergence(from_probs(a, std::vector<int>(n, 0)), from_probs(b, std::vector<int>(n, 0)));
      },
      py::arg("probs_a"), py::arg("probs_b"));
  m.def(
      "ece", [](const Array& probs, std::vector<int> labels, std::size_t n_bins) {
        return wavg::ece_equal_mass(from_probs(probs, std::move(labels)), {n_bins});
      },
      py::arg("probs"), py::arg("labels"), py::arg("n_bins") = 100);
  m.def(
      "accuracy_nll", [](const Array& probs, std::vector<int> labels) {
        const auto r = wavg::accuracy_nll(from_probs(probs, std::move(labels)));
        return py::make_tuple(r.accuracy, r.nll);
      },
      py::arg("probs"), py::arg("labels"));
  m.def(
      "temperature_scale",
      [](const Array& holdout_logits, std::vector<int> holdout_labels, const Array& eval_logits,
         std::vector<int> eval_labels, std::size_t n_bins) {
        const auto fit = wavg::temperature_scale(from_logits(holdout_logits, std::move(holdout_labels)),
                                                 from_logits(eval_logits, std::move(eval_labels)), {n_bins});
        py::dict d;
        d["temperature"] = fit.temperature;
        d["scaled_ece"] = fit.scaled_ece;
        d["holdout_nll_at_one"] = fit.holdout_nll_at_one;
        d["holdout_nll"] = fit.holdout_nll;
        return d;
      },
      py::arg("holdout_logits"), py::arg("holdout_labels"), py::arg("eval_logits"), py::arg("eval_labels"),
      py::arg("n_bins") = 100);

  m.def("builtin_config", [](const std::string& name) { return wavg::builtin_config(name).dump(); }, py::arg("name"));
  m.def(
      "resolve_config", [](const std::string& config_json) { return wavg::to_json(parse(config_json)).dump(); },
      py::arg("config_json"));
  m.def(
      "train_run",
      [](const std::string& config_json, std::uint64_t seed) {
        const auto cfg = parse(config_json);
        wavg::TrainResult res;
        {
          py::gil_scoped_release release;
          res = wavg::train_run(cfg.run, seed);
        }
        py::dict logits;
        for (const auto& [name, t] : res.val_logits) logits[py::str(name)] = to_array(t);
        py::dict out;
        out["record"] = wavg::format_record(res.record);
        out["val_logits"] = logits;
        out["val_labels"] = res.val_labels;
        return out;
      },
      py::arg("config_json"), py::arg("seed"));
}
