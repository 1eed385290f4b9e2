#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cola/accounting.hpp"
#include "cola/config.hpp"
#include "cola/random.hpp"

namespace py = pybind11;
using namespace cola;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

AdapterConfig adapter_config(const std::string& mode, std::size_t rank, std::size_t gamma, double alpha,
                             double lambda_init) {
  AdapterConfig c;
  c.mode = adapter_mode_from_string(mode);
  c.rank = rank;
  c.gamma = gamma;
  c.alpha = alpha;
  c.lambda_init = lambda_init;
  return c;
}

class PyDualModel {
 public:
  PyDualModel(std::size_t d_m, std::size_t d_c, std::size_t n_layers, const std::string& mode, std::size_t rank,
              std::size_t gamma, double alpha, double lambda_init, const std::string& strategy, std::uint64_t seed) {
    const AdapterConfig a = adapter_config(mode, rank, gamma, alpha, lambda_init);
    model_ = init_dual_encoder(EncoderConfig::square(d_m, n_layers), EncoderConfig::square(d_c, n_layers), a, a,
                               strategy_from_string(strategy), seed);
  }

  py::tuple forward(const Array& x_m, const Array& x_c) const {
    NoGradGuard no_grad;
    const auto [ym, yc] = dual_forward(model_, to_tensor(x_m), to_tensor(x_c));
    return py::make_tuple(to_array(ym), to_array(yc));
  }

  py::tuple backbone_forward(const Array& x_m, const Array& x_c) const {
    NoGradGuard no_grad;
    const auto [ym, yc] = dual_forward(model_.frozen_backbone(), to_tensor(x_m), to_tensor(x_c));
    return py::make_tuple(to_array(ym), to_array(yc));
  }

  void randomize(std::uint64_t seed, double stddev) { randomize_adapters(model_, seed, stddev); }
  void set_lambda(double v) { model_.set_all_lambda(v); }
  void set_strategy(const std::string& s) { model_.strategy = strategy_from_string(s); }
  std::size_t adapter_parameters() const { return model_.adapter_parameter_count(); }

 private:
  DualEncoderModel model_;
};

std::string count_json(const std::string& preset, const std::string& mode, std::size_t rank, std::size_t gamma,
                       double alpha) {
  const AdapterConfig c = adapter_config(mode, rank, gamma, alpha, 0.5);
  return count_params(ArchSpec::preset(preset), c, c.mode).to_json().dump();
}

std::string flops_json(const std::string& preset, const std::string& mode, std::size_t rank, std::size_t gamma,
                       std::size_t n_m, std::size_t n_c, const std::string& strategy) {
  const AdapterConfig c = adapter_config(mode, rank, gamma, 8.0, 0.5);
  return flops_forward(ArchSpec::preset(preset), c, n_m, n_c, c.mode, strategy_from_string(strategy))
      .to_json()
      .dump();
}

std::size_t matched_rank(const std::string& preset, std::size_t rank, std::size_t gamma) {
  return parameter_matched_lora_rank(ArchSpec::preset(preset), adapter_config("cola", rank, gamma, 8.0, 0.5));
}

std::string resolve_config(const std::string& text) { return to_json(parse_config(text, "<python>")).dump(); }

py::tuple train_json(const std::string& text) {
  const ExperimentConfig c = parse_config(text, "<python>");
  const Dataset data = gen_dataset(c.task, c.n_train, c.n_val, c.n_test, derive_seed(c.seed, "data"));
  CrossModalClassifier model = init_classifier(c.encoder_m, c.encoder_c, c.adapter, c.strategy, c.task, c.seed);
  TrainResult r;
  {
    py::gil_scoped_release release;
    r = train(model, data, c.train);
  }
  return py::make_tuple(r.metrics.to_json().dump(), export_lambda(r.lambdas));
}

std::vector<py::dict> gradcheck_entries(const std::string& text) {
  const ExperimentConfig c = parse_config(text, "<python>");
  CrossModalClassifier model = init_classifier(c.encoder_m, c.encoder_c, c.adapter, c.strategy, c.task, c.seed);
  randomize_adapters(model.dual, derive_seed(c.seed, "gradcheck"));
  const Dataset data = gen_dataset(c.task, c.gradcheck.batch, 1, 1, derive_seed(c.seed, "gradcheck-data"));
  GradcheckOptions opt;
  opt.step = c.gradcheck.step;
  opt.tolerance = c.gradcheck.tolerance;
  opt.max_coords = c.gradcheck.max_coords;
  opt.seed = c.seed;
  std::vector<py::dict> out;
  for (const auto& e : gradcheck_suite(model, data.train, opt).entries) {
    py::dict d;
    d["cls"] = e.cls;
    d["coords"] = e.coords;
    d["max_rel_error"] = e.max_rel_error;
    d["worst"] = e.worst;
    out.push_back(d);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Cross-modal low-rank adapters for dual-encoder transformers";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_RuntimeError);

  m.def("count_json", &count_json, py::arg("preset"), py::arg("mode"), py::arg("rank"), py::arg("gamma") = 16,
        py::arg("alpha") = 8.0);
  m.def("flops_json", &flops_json, py::arg("preset"), py::arg("mode"), py::arg("rank"), py::arg("gamma") = 16,
        py::arg("tokens_m") = 197, py::arg("tokens_c") = 40, py::arg("strategy") = "progressive");
  m.def("parameter_matched_lora_rank", &matched_rank, py::arg("preset"), py::arg("rank") = 16,
        py::arg("gamma") = 16);
  m.def("resolve_config", &resolve_config, py::arg("text"));
  m.def("train_json", &train_json, py::arg("text"));
  m.def("gradcheck", &gradcheck_entries, py::arg("text"));

  py::class_<PyDualModel>(m, "DualModel")
      .def(py::init<std::size_t, std::size_t, std::size_t, const std::string&, std::size_t, std::size_t, double,
                    double, const std::string&, std::uint64_t>(),
           py::arg("d_m") = 32, py::arg("d_c") = 32, py::arg("n_layers") = 2, py::arg("mode") = "cola",
           py::arg("rank") = 4, py::arg("gamma") = 4, py::arg("alpha") = 8.0, py::arg("lambda_init") = 0.5,
           py::arg("strategy") = "progressive", py::arg("seed") = 0)
      .def("forward", &PyDualModel::forward, py::arg("x_m"), py::arg("x_c"))
      .def("backbone_forward", &PyDualModel::backbone_forward, py::arg("x_m"), py::arg("x_c"))
      .def("randomize", &PyDualModel::randomize, py::arg("seed"), py::arg("stddev") = 0.5)
      .def("set_lambda", &PyDualModel::set_lambda, py::arg("value"))
      .def("set_strategy", &PyDualModel::set_strategy, py::arg("strategy"))
      .def_property_readonly("adapter_parameters", &PyDualModel::adapter_parameters);
}
