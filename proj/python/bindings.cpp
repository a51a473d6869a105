#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "avss/error.hpp"
#include "avss/report.hpp"
#include "avss/scoring.hpp"
#include "avss/stats.hpp"
#include "avss/toy_model.hpp"
#include "avss/trace.hpp"

namespace py = pybind11;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

// Each array is one layer, shaped (samples, width).
avss::TraceSet make_trace_set(const std::vector<py::array>& layers, const std::string& model_id,
                              const std::string& point, const std::string& dtype,
                              const std::string& creator, const std::string& created) {
  avss::TraceSet set;
  set.model_id = model_id;
  set.activation_point = avss::parse_activation_point(point);
  set.dtype = avss::parse_dtype(dtype);
  set.creator = creator;
  set.created = created;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const py::array& a = layers[i];
    if (a.ndim() != 2) throw avss::InputError("layer arrays must be 2-D (samples, width)");
    avss::LayerTrace layer;
    layer.layer_index = i;
    layer.samples = static_cast<std::size_t>(a.shape(0));
    layer.width = static_cast<std::size_t>(a.shape(1));
    if (set.dtype == avss::DType::f32) {
      auto buf = F32Array::ensure(a);
      layer.values = std::vector<float>(buf.data(), buf.data() + buf.size());
    } else {
      auto buf = F64Array::ensure(a);
      layer.values = std::vector<double>(buf.data(), buf.data() + buf.size());
    }
    set.layers.push_back(std::move(layer));
  }
  return set;
}

py::array layer_array(const avss::LayerTrace& layer) {
  return std::visit(
      [&](const auto& v) -> py::array {
        using T = typename std::decay_t<decltype(v)>::value_type;
        py::array_t<T> out({layer.samples, layer.width});
        std::copy(v.begin(), v.end(), out.mutable_data());
        return out;
      },
      layer.values);
}

std::vector<avss::Token> tokens_of(const py::object& text) {
  if (py::isinstance<py::bytes>(text)) return avss::bytes_to_tokens(text.cast<std::string>());
  return avss::bytes_to_tokens(py::str(text).cast<std::string>());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Layer scoring by activation variance and sparsity";
  m.attr("__version__") = std::string(avss::kToolVersion);

  auto error = py::register_exception<avss::Error>(m, "AvssError", PyExc_RuntimeError);
  auto data_error = py::register_exception<avss::DataError>(m, "DataError", error.ptr());
  py::register_exception<avss::UsageError>(m, "UsageError", error.ptr());
  py::register_exception<avss::FormatError>(m, "FormatError", data_error.ptr());
  py::register_exception<avss::CorruptionError>(m, "CorruptionError", data_error.ptr());
  py::register_exception<avss::ValidationError>(m, "ValidationError", data_error.ptr());
  py::register_exception<avss::DomainError>(m, "DomainError", data_error.ptr());

  py::class_<avss::TraceSet>(m, "TraceSet")
      .def(py::init(&make_trace_set), py::arg("layers"), py::arg("model_id") = "",
           py::arg("activation_point") = "block_output", py::arg("dtype") = "f64",
           py::arg("creator") = "", py::arg("created") = "")
      .def_readwrite("model_id", &avss::TraceSet::model_id)
      .def_readwrite("creator", &avss::TraceSet::creator)
      .def_readwrite("created", &avss::TraceSet::created)
      .def_property_readonly("activation_point",
                             [](const avss::TraceSet& s) {
                               return std::string(avss::to_string(s.activation_point));
                             })
      .def_property_readonly(
          "dtype", [](const avss::TraceSet& s) { return std::string(avss::to_string(s.dtype)); })
      .def_property_readonly("layer_count", &avss::TraceSet::layer_count)
      .def("layer", [](const avss::TraceSet& s, std::size_t i) { return layer_array(s.layers.at(i)); })
      .def("__eq__", &avss::bit_equal);

  m.def("read_trace", &avss::read_trace_file, py::arg("path"));
  m.def("write_trace", &avss::write_trace_file, py::arg("trace"), py::arg("path"));
  m.def("validate_trace", [](const avss::TraceSet& s) {
    std::vector<std::string> out;
    for (const auto& v : avss::validate_trace(s)) out.push_back(avss::format_violation(v));
    return out;
  });
  m.def("validate_file", [](const std::filesystem::path& path) {
    std::vector<std::string> out;
    for (const auto& v : avss::validate_trace(avss::read_trace_unvalidated_file(path))) {
      out.push_back(avss::format_violation(v));
    }
    return out;
  });

  m.def("mean_variance", [](F64Array a) {
    const auto mv = avss::mean_variance(std::span<const double>(a.data(), a.size()));
    return py::make_tuple(mv.mean, mv.variance);
  });
  m.def("sparsity", [](F64Array a, double epsilon) {
    return avss::sparsity(std::span<const double>(a.data(), a.size()), epsilon);
  }, py::arg("values"), py::arg("epsilon") = 0.01);
  m.def("normalize", [](const std::vector<double>& v) { return avss::normalize_across_layers(v); });

  // Returns the canonical report JSON text.
  m.def(
      "analyze",
      [](const avss::TraceSet& s, double epsilon, double sparsity_floor, const std::string& policy,
         double parameter) {
        avss::StatsConfig config{epsilon, sparsity_floor};
        config.validate();
        const auto violations = avss::validate_trace(s);
        if (!violations.empty()) {
          throw avss::ValidationError("invalid trace: " + avss::format_violation(violations.front()));
        }
        return avss::serialize_report(
            avss::analyze(s, config, avss::parse_prune_policy(policy), parameter));
      },
      py::arg("trace"), py::arg("epsilon") = 0.01, py::arg("sparsity_floor") = 1e-6,
      py::arg("policy") = "lowest-fraction", py::arg("parameter") = 0.25);
  m.def("report_csv", [](const std::string& report_json) {
    return avss::report_csv(avss::parse_report(report_json));
  });
  m.def(
      "plan",
      [](const std::string& report_json, const std::string& policy, double parameter) {
        const auto report = avss::parse_report(report_json);
        const auto p = avss::parse_prune_policy(policy) == avss::PrunePolicy::lowest_fraction
                           ? avss::make_pruning_plan(report.entries, parameter)
                           : avss::make_pruning_plan_by_mass(report.entries, parameter);
        return avss::serialize_plan(p, report.model_id);
      },
      py::arg("report"), py::arg("policy") = "lowest-fraction", py::arg("parameter") = 0.25);

  py::class_<avss::ToyCheckpoint>(m, "ToyCheckpoint")
      .def_property_readonly("n_layers", [](const avss::ToyCheckpoint& c) { return c.config.n_layers; })
      .def_property_readonly("model_id", [](const avss::ToyCheckpoint& c) { return avss::model_id(c.config); })
      .def_readonly("train_loss_history", &avss::ToyCheckpoint::train_loss_history)
      .def("__eq__", [](const avss::ToyCheckpoint& a, const avss::ToyCheckpoint& b) { return a == b; });

  m.def(
      "train",
      [](const py::object& corpus, const std::map<std::string, std::string>& overrides) {
        avss::ToyModelConfig config;
        for (const auto& [k, v] : overrides) config.set(k, v);
        const auto tokens = tokens_of(corpus);
        py::gil_scoped_release release;
        return avss::train(config, tokens);
      },
      py::arg("corpus"), py::arg("config") = std::map<std::string, std::string>{});
  m.def("initialize", [](const std::map<std::string, std::string>& overrides) {
    avss::ToyModelConfig config;
    for (const auto& [k, v] : overrides) config.set(k, v);
    return avss::initialize(config);
  }, py::arg("config") = std::map<std::string, std::string>{});
  m.def("read_checkpoint", &avss::read_checkpoint_file);
  m.def("write_checkpoint", &avss::write_checkpoint_file);
  m.def(
      "perplexity",
      [](const avss::ToyCheckpoint& c, const py::object& text, const std::set<std::size_t>& skip) {
        const auto tokens = tokens_of(text);
        py::gil_scoped_release release;
        return avss::perplexity(c, tokens, skip);
      },
      py::arg("checkpoint"), py::arg("text"), py::arg("skip") = std::set<std::size_t>{});
  m.def(
      "capture",
      [](const avss::ToyCheckpoint& c, const py::object& text, const std::string& point) {
        return avss::capture_traceset(c, tokens_of(text), avss::parse_activation_point(point));
      },
      py::arg("checkpoint"), py::arg("text"), py::arg("point") = "block_output");
}
