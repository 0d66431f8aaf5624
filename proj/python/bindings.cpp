#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <filesystem>
#include <fstream>

#include "tsi/cti.hpp"
#include "tsi/gradcheck_suites.hpp"
#include "tsi/net.hpp"
#include "tsi/profiler.hpp"
#include "tsi/sme.hpp"
#include "tsi/synth.hpp"
#include "tsi/tensor_io.hpp"
#include "tsi/train.hpp"

namespace py = pybind11;
using json = nlohmann::json;
using namespace tsi;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Tensor<T> to_tensor(const Array<T>& a) {
  Shape s(a.shape(), a.shape() + a.ndim());
  return Tensor<T>(s, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
Array<T> to_array(const Tensor<T>& t) {
  Array<T> a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy_n(t.raw(), t.numel(), a.mutable_data());
  return a;
}

using D = Tape<double>;

std::vector<Var<double>> constants(D& tape, const std::vector<Array<double>>& xs) {
  std::vector<Var<double>> out;
  for (const auto& x : xs) out.push_back(tape.constant(to_tensor(x)));
  return out;
}

py::tuple py_saliency_align(const Array<double>& x_t, const Array<double>& x_next, const std::string& op) {
  D tape;
  auto r = saliency_align(tape.constant(to_tensor(x_t)), tape.constant(to_tensor(x_next)), parse_alignment(op));
  return py::make_tuple(to_array(r.aligned.value()), to_array(r.attention.value()));
}

Array<double> py_pyramidal_motion(const Array<double>& x_t, const Array<double>& aligned,
                                  const std::vector<Array<double>>& kernels) {
  D tape;
  return to_array(pyramidal_motion(tape.constant(to_tensor(x_t)), tape.constant(to_tensor(aligned)),
                                   constants(tape, kernels))
                      .value());
}

py::tuple py_integrate(const Array<double>& t_prev, const Array<double>& x_g, const Array<double>& fc_weight,
                       const Array<double>& fc_bias) {
  D tape;
  auto r = cross_perception_integrate(tape.constant(to_tensor(t_prev)), tape.constant(to_tensor(x_g)),
                                      tape.constant(to_tensor(fc_weight)), tape.constant(to_tensor(fc_bias)));
  return py::make_tuple(to_array(r.out.value()), to_array(r.alpha.value()), to_array(r.beta.value()));
}

Array<double> py_cti_forward(const Array<double>& x, std::int64_t frames, std::int64_t groups,
                             const std::vector<Array<double>>& temporal_kernels,
                             const std::vector<Array<double>>& integration_fc,
                             const std::vector<Array<double>>& integration_bias, const std::string& integration) {
  CtiConfig cfg;
  cfg.channels = x.ndim() > 1 ? x.shape(1) : 0;
  cfg.groups = groups;
  cfg.temporal_kernel_size = temporal_kernels.empty() ? 3 : temporal_kernels.front().shape(1);
  cfg.integration = parse_integration(integration);
  cfg.validate();
  D tape;
  CtiVars<double> w{constants(tape, temporal_kernels), constants(tape, integration_fc),
                    constants(tape, integration_bias)};
  return to_array(cti_forward(tape.constant(to_tensor(x)), frames, w, cfg).value());
}

Array<double> py_sme_forward(const Array<double>& x, std::int64_t frames, const Array<double>& reduce_proj,
                             const std::vector<Array<double>>& pyramid_kernels, const Array<double>& recover_proj,
                             const Array<double>& recover_bias, const std::string& alignment, const std::string& motion) {
  SmeConfig cfg;
  cfg.channels = x.ndim() > 1 ? x.shape(1) : 0;
  cfg.reduction = reduce_proj.ndim() > 0 && reduce_proj.shape(0) > 0 ? cfg.channels / reduce_proj.shape(0) : 1;
  cfg.pyramid_depth = static_cast<std::int64_t>(pyramid_kernels.size());
  cfg.motion_kernel_size = pyramid_kernels.empty() ? 3 : pyramid_kernels.front().shape(2);
  cfg.alignment = parse_alignment(alignment);
  cfg.motion = parse_motion(motion);
  cfg.validate();
  D tape;
  SmeVars<double> w;
  w.reduce_proj = tape.constant(to_tensor(reduce_proj));
  w.pyramid_kernels = constants(tape, pyramid_kernels);
  w.recover_proj = tape.constant(to_tensor(recover_proj));
  w.recover_bias = tape.constant(to_tensor(recover_bias));
  return to_array(sme_forward(tape.constant(to_tensor(x)), frames, w, cfg).value());
}

std::string py_profile(const std::string& spec_json, std::int64_t frames, std::int64_t height, std::int64_t width) {
  const ModelSpec spec = model_spec_from_json(json::parse(spec_json));
  return profile::render_json(profile::count_model(spec, frames, height, width));
}

Array<float> py_generate_clip(const std::string& spec_json, std::uint64_t seed) {
  return to_array(synth::generate_clip(synth::ClipSpec::from_json(json::parse(spec_json)), seed));
}

std::string py_build_dataset(const std::string& config_json, const std::string& out_dir) {
  const auto built = synth::build_dataset(synth::DatasetConfig::from_json(json::parse(config_json)), out_dir);
  return json{{"train", built.train.entries.size()}, {"val", built.val.entries.size()}}.dump();
}

std::string py_gradcheck(const std::string& module, std::uint64_t seed) {
  GradCheckOptions o;
  o.seed = seed;
  json out = json::array();
  for (const auto& r : run_gradcheck_suite(module, o)) {
    out.push_back({{"name", r.name}, {"passed", r.report.passed()}, {"max_rel_error", r.report.max_rel_error()}});
  }
  return out.dump();
}

std::string py_train(const std::string& config_json, const std::string& base_dir, const std::string& data_dir,
                     const std::string& out_dir) {
  TrainConfig cfg = TrainConfig::from_json(json::parse(config_json), base_dir);
  if (!data_dir.empty()) cfg.data_dir = data_dir;
  const auto train_set = synth::load_split(cfg.data_dir, "train");
  const auto val_set = synth::load_split(cfg.data_dir, "val");
  TrainResult r;
  {
    py::gil_scoped_release release;
    r = train(cfg, train_set, val_set, {out_dir, {}});
  }
  return json{{"best_val_top1", r.best_val_top1},
              {"best_epoch", r.best_epoch},
              {"epochs_run", r.epochs_run},
              {"final_train_loss", r.final_train_loss},
              {"metrics", r.metrics}}
      .dump();
}

std::string py_evaluate(const std::string& checkpoint, const std::string& data_dir, const std::string& split) {
  Model<float> model = load_checkpoint(checkpoint);
  const auto set = synth::load_split(data_dir, split);
  const EvalResult r = evaluate(model, set);
  return json{{"split", split}, {"count", r.count}, {"top1", r.top1}, {"top5", r.top5}, {"loss", r.loss}}.dump();
}

Array<float> py_predict(const std::string& checkpoint, const Array<float>& clips) {
  Model<float> model = load_checkpoint(checkpoint);
  Tape<float> tape;
  return to_array(model_forward(tape.constant(to_tensor(clips)), model, ops::NormMode::kEval).value());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of tsinet";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("saliency_align", &py_saliency_align, py::arg("x_t"), py::arg("x_next"), py::arg("op") = "multiply");
  m.def("pyramidal_motion", &py_pyramidal_motion, py::arg("x_t"), py::arg("aligned"), py::arg("kernels"));
  m.def("cross_perception_integrate", &py_integrate, py::arg("t_prev"), py::arg("x_g"), py::arg("fc_weight"),
        py::arg("fc_bias"));
  m.def("cti_forward", &py_cti_forward, py::arg("x"), py::arg("frames"), py::arg("groups"),
        py::arg("temporal_kernels"), py::arg("integration_fc"), py::arg("integration_bias"),
        py::arg("integration") = "cross_attention");
  m.def("sme_forward", &py_sme_forward, py::arg("x"), py::arg("frames"), py::arg("reduce_proj"),
        py::arg("pyramid_kernels"), py::arg("recover_proj"), py::arg("recover_bias"),
        py::arg("alignment") = "multiply", py::arg("motion") = "pyramidal");
  m.def("profile", &py_profile, py::arg("spec_json"), py::arg("frames"), py::arg("height"), py::arg("width"));
  m.def("generate_clip", &py_generate_clip, py::arg("spec_json"), py::arg("seed") = 0);
  m.def("build_dataset", &py_build_dataset, py::arg("config_json"), py::arg("out_dir"));
  m.def("gradcheck", &py_gradcheck, py::arg("module") = "all", py::arg("seed") = 0);
  m.def("train", &py_train, py::arg("config_json"), py::arg("base_dir") = "", py::arg("data_dir") = "",
        py::arg("out_dir") = "");
  m.def("evaluate", &py_evaluate, py::arg("checkpoint"), py::arg("data_dir"), py::arg("split") = "val");
  m.def("predict", &py_predict, py::arg("checkpoint"), py::arg("clips"));
  m.def("save_tensor", [](const std::string& path, const Array<double>& a) { save_tensor(path, to_tensor(a)); });
  m.def("save_tensor_f32", [](const std::string& path, const Array<float>& a) { save_tensor(path, to_tensor(a)); });
  m.def("load_tensor", [](const std::string& path) -> py::object {
    const AnyTensor t = [&] {
      std::ifstream in(path, std::ios::binary);
      if (!in) throw IoError("cannot open " + path);
      return read_any_tensor(in);
    }();
    if (const auto* f = std::get_if<Tensor<float>>(&t)) return to_array(*f);
    return to_array(std::get<Tensor<double>>(t));
  });
}
