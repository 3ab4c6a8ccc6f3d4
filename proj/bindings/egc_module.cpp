#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>

#include "egc/dataset.hpp"
#include "egc/eval.hpp"
#include "egc/model.hpp"
#include "egc/random.hpp"
#include "egc/sample.hpp"
#include "egc/schedule.hpp"
#include "egc/train.hpp"

namespace py = pybind11;
using namespace egc;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style |
                                                       py::array::forcecast>& arr) {
  Shape shape(arr.ndim());
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) {
    shape[static_cast<std::size_t>(i)] = static_cast<std::size_t>(arr.shape(i));
  }
  std::vector<double> data(arr.data(), arr.data() + arr.size());
  return Tensor::from_data(std::move(shape), std::move(data));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape;
  for (auto d : t.shape()) shape.push_back(static_cast<py::ssize_t>(d));
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

NoiseSchedule make_schedule(const std::string& kind, std::size_t T) {
  return NoiseSchedule::make(NoiseSchedule::parse_kind(kind), T);
}

ModelConfig config_from_kwargs(const std::string& arch, std::size_t num_classes,
                               std::size_t input_dim, std::size_t hidden,
                               std::size_t t_max, std::size_t in_channels,
                               std::size_t image_size) {
  ModelConfig mc;
  mc.arch = arch == "conv" ? ModelConfig::Arch::conv : ModelConfig::Arch::mlp;
  mc.num_classes = num_classes;
  mc.input_dim = input_dim;
  mc.hidden = hidden;
  mc.t_max = t_max;
  mc.in_channels = in_channels;
  mc.image_size = image_size;
  return mc;
}

Dataset dataset_from_arrays(const py::array_t<double>& xs,
                            const std::optional<std::vector<std::size_t>>& labels,
                            std::size_t num_classes) {
  Dataset d;
  d.xs = tensor_from_array(xs);
  if (labels.has_value()) d.labels = *labels;
  d.num_classes = num_classes;
  return d;
}

}  // namespace

PYBIND11_MODULE(_egc, m) {
  m.doc() = "Energy-based classifier/denoiser core";

  py::class_<NoiseSchedule>(m, "NoiseSchedule")
      .def_static("linear", &NoiseSchedule::linear, py::arg("T"))
      .def_static("cosine", &NoiseSchedule::cosine, py::arg("T"))
      .def_readonly("T", &NoiseSchedule::T)
      .def_property_readonly("kind",
                             [](const NoiseSchedule& ns) {
                               return NoiseSchedule::kind_name(ns.kind);
                             })
      .def_property_readonly("beta",
                             [](const NoiseSchedule& ns) {
                               return py::array_t<double>(
                                   static_cast<py::ssize_t>(ns.beta.size()),
                                   ns.beta.data());
                             })
      .def_property_readonly("alpha_bar",
                             [](const NoiseSchedule& ns) {
                               return py::array_t<double>(
                                   static_cast<py::ssize_t>(ns.alpha_bar.size()),
                                   ns.alpha_bar.data());
                             })
      .def("beta_tilde_t", &NoiseSchedule::beta_tilde_t, py::arg("t"));

  m.def("make_schedule", &make_schedule, py::arg("kind"), py::arg("T"));

  m.def(
      "q_sample",
      [](const NoiseSchedule& ns, const py::array_t<double>& x0, std::size_t t,
         const py::array_t<double>& eps) {
        return array_from_tensor(q_sample(ns, tensor_from_array(x0), t,
                                          tensor_from_array(eps)));
      },
      py::arg("schedule"), py::arg("x0"), py::arg("t"), py::arg("eps"));
  m.def(
      "score_target",
      [](const NoiseSchedule& ns, const py::array_t<double>& eps, std::size_t t) {
        return array_from_tensor(score_target(ns, tensor_from_array(eps), t));
      },
      py::arg("schedule"), py::arg("eps"), py::arg("t"));
  m.def(
      "tweedie_x0",
      [](const NoiseSchedule& ns, const py::array_t<double>& xt,
         const py::array_t<double>& score, std::size_t t) {
        return array_from_tensor(
            tweedie_x0(ns, tensor_from_array(xt), tensor_from_array(score), t));
      },
      py::arg("schedule"), py::arg("xt"), py::arg("score"), py::arg("t"));
  m.def(
      "posterior_params",
      [](const NoiseSchedule& ns, const py::array_t<double>& x0,
         const py::array_t<double>& xt, std::size_t t) {
        auto p = posterior_params(ns, tensor_from_array(x0), tensor_from_array(xt), t);
        return py::make_tuple(array_from_tensor(p.mean), p.var);
      },
      py::arg("schedule"), py::arg("x0"), py::arg("xt"), py::arg("t"));

  py::class_<EGCModel>(m, "Model")
      .def(py::init([](const std::string& arch, std::size_t num_classes,
                       std::size_t input_dim, std::size_t hidden, std::size_t t_max,
                       std::size_t in_channels, std::size_t image_size,
                       std::uint64_t seed) {
             return EGCModel(config_from_kwargs(arch, num_classes, input_dim, hidden,
                                                t_max, in_channels, image_size),
                             seed);
           }),
           py::arg("arch") = "mlp", py::arg("num_classes") = 2,
           py::arg("input_dim") = 2, py::arg("hidden") = 128,
           py::arg("t_max") = 100, py::arg("in_channels") = 1,
           py::arg("image_size") = 28, py::arg("seed") = 0)
      .def_property_readonly("num_classes", &EGCModel::num_classes)
      .def("logits",
           [](const EGCModel& model, const py::array_t<double>& x, std::size_t t) {
             NoGradGuard ng;
             return array_from_tensor(model.logits(tensor_from_array(x), t));
           })
      .def("class_prob",
           [](const EGCModel& model, const py::array_t<double>& x, std::size_t t) {
             NoGradGuard ng;
             return array_from_tensor(model.class_prob(tensor_from_array(x), t));
           })
      .def("free_energy",
           [](const EGCModel& model, const py::array_t<double>& x, std::size_t t) {
             NoGradGuard ng;
             return array_from_tensor(model.free_energy(tensor_from_array(x), t));
           })
      .def("unconditional_score",
           [](const EGCModel& model, const py::array_t<double>& x, std::size_t t) {
             Tensor xt = tensor_from_array(x);
             Tensor leaf = Tensor::from_data(xt.shape(), xt.data(), true);
             return array_from_tensor(model.unconditional_score(leaf, t));
           })
      .def("conditional_score",
           [](const EGCModel& model, const py::array_t<double>& x, std::size_t t,
              std::size_t label, double guidance) {
             Tensor xt = tensor_from_array(x);
             Tensor leaf = Tensor::from_data(xt.shape(), xt.data(), true);
             return array_from_tensor(
                 model.conditional_score(leaf, t, label, guidance));
           },
           py::arg("x"), py::arg("t"), py::arg("label"),
           py::arg("guidance") = 1.0);

  py::class_<Checkpoint>(m, "Checkpoint")
      .def_static("load", &Checkpoint::load, py::arg("path"))
      .def("save", &Checkpoint::save, py::arg("path"))
      .def_readonly("iteration", &Checkpoint::iteration)
      .def_property_readonly("schedule",
                             [](const Checkpoint& ck) { return ck.schedule; })
      .def("model", &Checkpoint::model)
      .def("ema_model", &Checkpoint::ema_model);

  m.def(
      "gen_dataset",
      [](const std::string& kind, std::size_t size, double noise,
         std::uint64_t seed) {
        DatasetSpec spec;
        spec.kind = DatasetSpec::parse_kind(kind);
        spec.size = size;
        spec.noise = noise;
        Dataset d = gen_dataset(spec, seed);
        return py::make_tuple(array_from_tensor(d.xs), d.labels, d.num_classes);
      },
      py::arg("kind"), py::arg("size"), py::arg("noise") = 0.1, py::arg("seed") = 0);

  m.def(
      "train",
      [](const py::array_t<double>& xs,
         const std::optional<std::vector<std::size_t>>& labels,
         std::size_t num_classes, const std::string& mode, double gamma, double lr,
         std::size_t batch_size, std::size_t iterations, std::uint64_t seed,
         const std::string& schedule_kind, std::size_t T, std::size_t hidden) {
        Dataset data = dataset_from_arrays(xs, labels, num_classes);
        ModelConfig mc;
        mc.arch = data.sample_shape().size() == 1 ? ModelConfig::Arch::mlp
                                                  : ModelConfig::Arch::conv;
        if (mc.arch == ModelConfig::Arch::mlp) {
          mc.input_dim = data.sample_shape()[0];
        } else {
          mc.in_channels = data.sample_shape()[0];
          mc.image_size = data.sample_shape()[1];
        }
        mc.num_classes = num_classes;
        mc.hidden = hidden;
        TrainConfig tc;
        tc.mode = TrainConfig::parse_mode(mode);
        tc.gamma = gamma;
        tc.learning_rate = lr;
        tc.batch_size = batch_size;
        tc.total_iterations = iterations;
        tc.seed = seed;
        tc.schedule_kind = NoiseSchedule::parse_kind(schedule_kind);
        tc.T = T;
        TrainResult result = train_loop(mc, tc, data);
        py::list metric_rows;
        for (const auto& r : result.metrics) {
          metric_rows.append(py::make_tuple(r.iter, r.recon, r.ce, r.loss,
                                            r.batch_acc));
        }
        return py::make_tuple(result.checkpoint, metric_rows);
      },
      py::arg("xs"), py::arg("labels"), py::arg("num_classes"),
      py::arg("mode") = "supervised", py::arg("gamma") = 1e-3,
      py::arg("lr") = 1e-4, py::arg("batch_size") = 128,
      py::arg("iterations") = 1000, py::arg("seed") = 0,
      py::arg("schedule_kind") = "linear", py::arg("T") = 100,
      py::arg("hidden") = 128);

  m.def(
      "generate",
      [](const EGCModel& model, const NoiseSchedule& ns, std::size_t n,
         std::optional<std::size_t> label, double guidance, std::uint64_t seed) {
        SampleConfig sc;
        sc.num_samples = n;
        sc.label = label;
        sc.guidance_scale = guidance;
        sc.seed = seed;
        return array_from_tensor(generate(model, ns, sc));
      },
      py::arg("model"), py::arg("schedule"), py::arg("n"),
      py::arg("label") = std::nullopt, py::arg("guidance") = 1.0,
      py::arg("seed") = 0);

  m.def(
      "inpaint",
      [](const EGCModel& model, const NoiseSchedule& ns,
         const py::array_t<double>& known, const py::array_t<double>& mask,
         std::size_t n, std::uint64_t seed) {
        SampleConfig sc;
        sc.num_samples = n;
        sc.seed = seed;
        return array_from_tensor(inpaint(model, ns, tensor_from_array(known),
                                         tensor_from_array(mask), sc));
      },
      py::arg("model"), py::arg("schedule"), py::arg("known"), py::arg("mask"),
      py::arg("n"), py::arg("seed") = 0);

  m.def(
      "accuracy",
      [](const EGCModel& model, const py::array_t<double>& xs,
         const std::vector<std::size_t>& labels, std::size_t num_classes,
         std::size_t t) {
        Dataset d = dataset_from_arrays(xs, labels, num_classes);
        return accuracy(model, d, t);
      },
      py::arg("model"), py::arg("xs"), py::arg("labels"), py::arg("num_classes"),
      py::arg("t") = 0);

  m.def(
      "fgsm",
      [](const EGCModel& model, const py::array_t<double>& xs,
         const std::vector<std::size_t>& labels, double epsilon) {
        return array_from_tensor(fgsm(model, tensor_from_array(xs), labels, epsilon));
      },
      py::arg("model"), py::arg("xs"), py::arg("labels"), py::arg("epsilon"));

  m.def(
      "pgd",
      [](const EGCModel& model, const py::array_t<double>& xs,
         const std::vector<std::size_t>& labels, double epsilon, std::size_t steps,
         double step_size) {
        AttackConfig cfg;
        cfg.epsilon = epsilon;
        cfg.steps = steps;
        cfg.step_size = step_size;
        return array_from_tensor(pgd(model, tensor_from_array(xs), labels, cfg));
      },
      py::arg("model"), py::arg("xs"), py::arg("labels"), py::arg("epsilon"),
      py::arg("steps") = 20, py::arg("step_size") = 0.0);

  m.def(
      "sliced_wasserstein",
      [](const py::array_t<double>& a, const py::array_t<double>& b,
         std::size_t projections, std::uint64_t seed) {
        RandomEngine rng = RandomEngine::from_stream(seed, 0x57);
        return sliced_wasserstein(tensor_from_array(a), tensor_from_array(b),
                                  projections, rng);
      },
      py::arg("a"), py::arg("b"), py::arg("projections") = 64, py::arg("seed") = 0);

  m.attr("__version__") = "0.1.0";
}
