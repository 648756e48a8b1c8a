#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "piecewise/cli.hpp"
#include "piecewise/confidence.hpp"
#include "piecewise/data.hpp"
#include "piecewise/eval.hpp"
#include "piecewise/smoothness.hpp"
#include "piecewise/trainer.hpp"
#include "piecewise/transmission.hpp"

namespace py = pybind11;
using namespace piecewise;

namespace {

Dataset unlabeled(const Matrix& x) {
  Dataset ds;
  ds.x = x;
  return ds;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Piecewise-constant unsupervised discriminative learning";

  py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<TrainingAborted>(m, "TrainingAborted", PyExc_RuntimeError);

  m.def(
      "gen_two_circles",
      [](Index n_per_class, double r_inner, double r_outer, double noise_sigma, std::uint64_t seed) {
        Dataset ds = gen_two_circles(n_per_class, r_inner, r_outer, noise_sigma, seed);
        return py::make_tuple(ds.x, *ds.labels);
      },
      py::arg("n_per_class") = 300, py::arg("r_inner") = 1.0, py::arg("r_outer") = 2.0,
      py::arg("noise_sigma") = 0.1, py::arg("seed") = 0, "Returns (X, labels).");

  m.def("batch_size_bound", &batch_size_bound, py::arg("prior_min"), py::arg("num_batches"), py::arg("num_classes"),
        py::arg("epsilon"));
  m.def(
      "self_consistent_batch_size",
      [](Index classes, Index dataset_size, double sweeps, double epsilon) {
        const auto r = self_consistent_batch_size(classes, dataset_size, sweeps, epsilon);
        return py::make_tuple(r.batch_size, r.fixed_point);
      },
      py::arg("num_classes"), py::arg("dataset_size"), py::arg("sweeps"), py::arg("epsilon"),
      "Returns (batch_size, fixed_point).");

  m.def("label_transition", py::overload_cast<const Matrix&>(&label_transition), py::arg("q"));
  m.def("instance_transition", &instance_transition, py::arg("q"));
  m.def("is_diagonal", &is_diagonal, py::arg("t"), py::arg("tol") = 1e-6);
  m.def("recurrent_class_count", &recurrent_class_count, py::arg("s"), py::arg("tol") = 1e-9);
  m.def(
      "confidence_loss",
      [](const Matrix& q, const std::string& divergence) {
        return confidence_loss(q, parse_divergence(divergence));
      },
      py::arg("q"), py::arg("divergence") = "kl");
  m.def(
      "clustering_accuracy",
      [](const std::vector<int>& pred, const std::vector<int>& truth) {
        const auto r = clustering_accuracy(pred, truth);
        return py::make_tuple(r.accuracy, r.permutation);
      },
      py::arg("pred"), py::arg("truth"), "Returns (accuracy, permutation).");

  py::class_<ModelParams>(m, "Model")
      .def(py::init([](Index input_dim, std::vector<Index> hidden_dims, Index num_classes, bool batchnorm,
                       std::uint64_t seed) {
             MlpSpec spec{input_dim, std::move(hidden_dims), num_classes, {}};
             spec.batchnorm.assign(spec.hidden_dims.size(), batchnorm);
             spec.validate();
             return init_params(spec, seed);
           }),
           py::arg("input_dim"), py::arg("hidden_dims"), py::arg("num_classes"), py::arg("batchnorm") = true,
           py::arg("seed") = 0)
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def("save", [](const ModelParams& p, const std::string& path) { save_checkpoint(p, path); }, py::arg("path"))
      .def("predict", [](const ModelParams& p, const Matrix& x) { return predict(p, x); }, py::arg("x"))
      .def("predict_labels", [](const ModelParams& p, const Matrix& x) { return predict_labels(p, x); },
           py::arg("x"))
      .def(
          "score_matrix",
          [](const ModelParams& p, const std::vector<double>& x) { return score_matrix(p, x).a; }, py::arg("x"))
      .def_property_readonly("parameter_count", &ModelParams::trainable_count)
      .def("__eq__", [](const ModelParams& a, const ModelParams& b) { return a == b; });

  m.def(
      "train",
      [](const ModelParams& initial, const Matrix& x, double lambda, double rho, Index batch_size, int epochs,
         double learning_rate, std::uint64_t seed, const std::function<bool(int, double, double)>& on_epoch) {
        TrainConfig cfg;
        cfg.lambda = lambda;
        cfg.rho = rho;
        cfg.batch_size = batch_size;
        cfg.epochs = epochs;
        cfg.learning_rate = learning_rate;
        cfg.seed = seed;
        EpochCallback cb;
        if (on_epoch) {
          cb = [&](const EpochRecord& e, const ModelParams&) {
            py::gil_scoped_acquire gil;
            return on_epoch(e.epoch, e.mean_confidence, e.mean_smoothness);
          };
        }
        TrainResult r = [&] {
          py::gil_scoped_release release;
          return train(initial, unlabeled(x), cfg, cb);
        }();
        py::list history;
        for (const auto& e : r.history.epochs) {
          history.append(py::dict(py::arg("epoch") = e.epoch, py::arg("confidence") = e.mean_confidence,
                                  py::arg("smoothness") = e.mean_smoothness, py::arg("total") = e.mean_total));
        }
        return py::make_tuple(std::move(r.params), history);
      },
      py::arg("model"), py::arg("x"), py::arg("lam") = 1.0, py::arg("rho") = 0.04, py::arg("batch_size") = 16,
      py::arg("epochs") = 1, py::arg("learning_rate") = 1e-3, py::arg("seed") = 0,
      py::arg("on_epoch") = std::function<bool(int, double, double)>{},
      "Trains a copy of `model` on the rows of `x`. Returns (model, per-epoch history).");

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli::run(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs one command line. Returns (exit_code, stdout, stderr).");
  m.attr("__version__") = cli::version();
}
