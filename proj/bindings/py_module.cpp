#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "taskvec/bench.hpp"
#include "taskvec/checkpoint.hpp"
#include "taskvec/rng.hpp"
#include "taskvec/suite.hpp"
#include "taskvec/task_vectors.hpp"
#include "taskvec/tensor.hpp"
#include "taskvec/variational.hpp"

namespace py = pybind11;
using namespace taskvec;

namespace {

using CArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.vec().begin(), t.vec().end(), out.mutable_data());
  return out;
}

Tensor to_tensor(const CArray& a) {
  if (a.ndim() < 1 || a.ndim() > 2)
    throw std::invalid_argument("expected a 1-D or 2-D array");
  Shape shape(a.ndim());
  for (int i = 0; i < static_cast<int>(a.ndim()); ++i) shape[i] = a.shape(i);
  std::vector<double> data(a.data(), a.data() + a.size());
  return Tensor(std::move(shape), std::move(data));
}

std::string prior_kind_name(PriorSpec::Kind kind) {
  return kind == PriorSpec::Kind::kGaussian ? "gaussian" : "spike_slab";
}

PriorSpec::Kind parse_prior_kind(const std::string& name) {
  if (name == "gaussian") return PriorSpec::Kind::kGaussian;
  if (name == "spike_slab") return PriorSpec::Kind::kSpikeSlab;
  throw std::invalid_argument("unknown prior: " + name);
}

const TaskData& task_at(const TaskSuite& suite, std::size_t t) {
  if (t >= suite.tasks.size()) throw py::index_error("task index out of range");
  return suite.tasks[t];
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "sample-specific task vector composition";
  m.attr("__version__") = "0.1.0";

  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::class_<SuiteSpec>(m, "SuiteSpec")
      .def(py::init<>())
      .def_readwrite("seed", &SuiteSpec::seed)
      .def_readwrite("n_tasks", &SuiteSpec::n_tasks)
      .def_readwrite("dim", &SuiteSpec::dim)
      .def_readwrite("classes", &SuiteSpec::classes)
      .def_readwrite("heterogeneity", &SuiteSpec::heterogeneity)
      .def_readwrite("rank", &SuiteSpec::rank)
      .def_readwrite("train_per_task", &SuiteSpec::train_per_task)
      .def_readwrite("test_per_task", &SuiteSpec::test_per_task)
      .def_readwrite("mean_scale", &SuiteSpec::mean_scale)
      .def_readwrite("noise", &SuiteSpec::noise)
      .def_readwrite("max_angle", &SuiteSpec::max_angle)
      .def("validate", &SuiteSpec::validate);

  py::class_<TaskSuite>(m, "TaskSuite")
      .def_readonly("dim", &TaskSuite::dim)
      .def_readonly("classes", &TaskSuite::classes)
      .def_readonly("heterogeneity", &TaskSuite::heterogeneity)
      .def_readonly("rank", &TaskSuite::rank)
      .def_readonly("seed", &TaskSuite::seed)
      .def_property_readonly(
          "n_tasks", [](const TaskSuite& s) { return s.tasks.size(); })
      .def("train_x", [](const TaskSuite& s, std::size_t t) {
        return to_array(task_at(s, t).train_x);
      })
      .def("train_y", [](const TaskSuite& s, std::size_t t) {
        return task_at(s, t).train_y;
      })
      .def("test_x", [](const TaskSuite& s, std::size_t t) {
        return to_array(task_at(s, t).test_x);
      })
      .def("test_y", [](const TaskSuite& s, std::size_t t) {
        return task_at(s, t).test_y;
      });

  m.def("generate_task_suite", &generate_task_suite, py::arg("spec"));
  m.def("save_suite", &save_suite, py::arg("suite"), py::arg("dir"));
  m.def("load_suite", &load_suite, py::arg("dir"));

  py::class_<ParamSet>(m, "ParamSet")
      .def(py::init<>())
      .def("names",
           [](const ParamSet& p) {
             std::vector<std::string> out(p.size());
             for (std::size_t k = 0; k < p.size(); ++k) out[k] = p.name(k);
             return out;
           })
      .def("get",
           [](const ParamSet& p, const std::string& name) {
             return to_array(p.tensor(name));
           },
           py::arg("name"))
      .def("set",
           [](ParamSet& p, const std::string& name, const CArray& value) {
             Tensor t = to_tensor(value);
             Tensor& dst = p.tensor(name);
             if (!dst.same_shape(t))
               throw std::invalid_argument("shape mismatch for " + name);
             dst = std::move(t);
           },
           py::arg("name"), py::arg("value"))
      .def("add",
           [](ParamSet& p, const std::string& name, const CArray& value) {
             p.add(name, to_tensor(value));
           },
           py::arg("name"), py::arg("value"))
      .def("__contains__",
           [](const ParamSet& p, const std::string& name) { return p.has(name); })
      .def("__len__", &ParamSet::size)
      .def("total_numel", &ParamSet::total_numel)
      .def("all_finite", &ParamSet::all_finite)
      .def("same_layout", &ParamSet::same_layout)
      .def("zeros_like", &ParamSet::zeros_like);

  m.def("save_checkpoint", &save_checkpoint, py::arg("path"), py::arg("params"));
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

  m.def(
      "init_base_model",
      [](int dim, int classes, std::uint64_t seed, int hidden) {
        RngStream rng(seed);
        return init_base_model(dim, classes, rng, hidden);
      },
      py::arg("dim"), py::arg("classes"), py::arg("seed"),
      py::arg("hidden") = 32);

  m.def(
      "mlp_logits",
      [](const CArray& x, const ParamSet& theta) {
        return to_array(mlp_logits(to_tensor(x), theta));
      },
      py::arg("x"), py::arg("theta"));

  m.def(
      "finetune_base",
      [](const ParamSet& theta_0, const TaskSuite& suite, std::size_t task,
         int steps, double lr) {
        return finetune_base(theta_0, task_at(suite, task), steps, lr);
      },
      py::arg("theta_0"), py::arg("suite"), py::arg("task"), py::arg("steps"),
      py::arg("lr"));

  py::class_<TaskVectorPool>(m, "TaskVectorPool")
      .def_property_readonly("task_count", &TaskVectorPool::task_count)
      .def_property_readonly("block_count", &TaskVectorPool::block_count)
      .def_property_readonly(
          "block_names",
          [](const TaskVectorPool& p) { return p.partition().block_names; })
      .def("tau",
           [](const TaskVectorPool& p, std::size_t i) {
             if (i >= p.task_count())
               throw py::index_error("task index out of range");
             return p.vec(i).blocks;
           },
           py::arg("i"));

  m.def("build_pool",
        [](const ParamSet& theta_0, const TaskSuite& suite, int steps,
           double lr) { return build_pool(theta_0, suite, steps, lr); },
        py::arg("theta_0"), py::arg("suite"), py::arg("steps"), py::arg("lr"));

  m.def(
      "pool_from_deltas",
      [](const std::vector<ParamSet>& deltas) {
        std::vector<TaskVector> vecs;
        vecs.reserve(deltas.size());
        for (std::size_t t = 0; t < deltas.size(); ++t)
          vecs.push_back(
              derive_task_vector(deltas[t], deltas[t].zeros_like(),
                                 static_cast<int>(t)));
        return TaskVectorPool(std::move(vecs));
      },
      py::arg("deltas"));

  m.def("svd_energy", &svd_energy, py::arg("pool"));

  m.def(
      "compose",
      [](const ParamSet& theta_0, const TaskVectorPool& pool,
         const CArray& lam) {
        return compose(theta_0, pool, CoefficientMatrix(to_tensor(lam)));
      },
      py::arg("theta_0"), py::arg("pool"), py::arg("lam"));

  m.def("task_addition", &task_addition, py::arg("theta_0"), py::arg("pool"),
        py::arg("lambda_scalar"));

  m.def(
      "composed_logits",
      [](const CArray& x, const CArray& z, const ParamSet& theta_0,
         const TaskVectorPool& pool) {
        return to_array(composed_logits(to_tensor(x), to_tensor(z), theta_0, pool));
      },
      py::arg("x"), py::arg("z"), py::arg("theta_0"), py::arg("pool"));

  py::class_<PriorSpec>(m, "PriorSpec")
      .def(py::init<>())
      .def_property(
          "kind",
          [](const PriorSpec& p) { return prior_kind_name(p.kind); },
          [](PriorSpec& p, const std::string& name) {
            p.kind = parse_prior_kind(name);
          })
      .def_readwrite("slab_var", &PriorSpec::slab_var)
      .def_readwrite("pi_prior", &PriorSpec::pi_prior);

  py::class_<GateParams>(m, "GateParams")
      .def(py::init<>())
      .def_readwrite("psi1", &GateParams::psi1)
      .def_readwrite("psi2", &GateParams::psi2)
      .def_readwrite("rho", &GateParams::rho)
      .def_readwrite("eta", &GateParams::eta)
      .def_readwrite("psi1_0", &GateParams::psi1_0)
      .def_readwrite("psi2_0", &GateParams::psi2_0);

  py::class_<RegWeights>(m, "RegWeights")
      .def(py::init<>())
      .def_readwrite("lambda_b", &RegWeights::lambda_b)
      .def_readwrite("lambda_e", &RegWeights::lambda_e)
      .def_readwrite("lambda_u", &RegWeights::lambda_u)
      .def_readwrite("margin", &RegWeights::margin)
      .def_readwrite("eps", &RegWeights::eps);

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def(py::init<>())
      .def_readwrite("seed", &ExperimentConfig::seed)
      .def_property(
          "regime",
          [](const ExperimentConfig& c) {
            return std::string(regime_name(c.regime));
          },
          [](ExperimentConfig& c, const std::string& name) {
            c.regime = parse_regime(name);
          })
      .def_readwrite("prior", &ExperimentConfig::prior)
      .def_readwrite("gating", &ExperimentConfig::gating)
      .def_readwrite("batch", &ExperimentConfig::batch)
      .def_readwrite("lr", &ExperimentConfig::lr)
      .def_readwrite("weight_decay", &ExperimentConfig::weight_decay)
      .def_readwrite("epochs", &ExperimentConfig::epochs)
      .def_readwrite("lambda_reg", &ExperimentConfig::lambda_reg)
      .def_readwrite("k_train", &ExperimentConfig::k_train)
      .def_readwrite("k_report", &ExperimentConfig::k_report)
      .def_readwrite("gate", &ExperimentConfig::gate)
      .def_readwrite("reg", &ExperimentConfig::reg)
      .def("validate", &ExperimentConfig::validate);

  py::class_<MetricsRecord>(m, "MetricsRecord")
      .def_readonly("regime", &MetricsRecord::regime)
      .def_readonly("seed", &MetricsRecord::seed)
      .def_readonly("prior", &MetricsRecord::prior)
      .def_readonly("gating", &MetricsRecord::gating)
      .def_readonly("task_accuracy", &MetricsRecord::task_accuracy)
      .def_readonly("avg_accuracy", &MetricsRecord::avg_accuracy)
      .def_readonly("gated_ratio", &MetricsRecord::gated_ratio)
      .def_readonly("elbo_trace", &MetricsRecord::elbo_trace)
      .def("as_dict", [](const MetricsRecord& r) {
        py::dict d;
        d["regime"] = r.regime;
        d["seed"] = r.seed;
        d["prior"] = r.prior;
        d["gating"] = r.gating;
        d["task_accuracy"] = r.task_accuracy;
        d["avg_accuracy"] = r.avg_accuracy;
        d["gated_ratio"] = r.gated_ratio;
        d["elbo_trace"] = r.elbo_trace;
        return d;
      });

  py::class_<TrainedState>(m, "TrainedState")
      .def_property_readonly(
          "regime",
          [](const TrainedState& s) { return std::string(regime_name(s.regime)); })
      .def_readonly("psi1", &TrainedState::psi1)
      .def_readonly("psi2", &TrainedState::psi2);

  m.def("train_regime",
        [](const ExperimentConfig& config, const TaskSuite& suite,
           const TaskVectorPool& pool, const ParamSet& theta_0) {
          return train_regime(config, suite, pool, theta_0);
        },
        py::arg("config"), py::arg("suite"), py::arg("pool"),
        py::arg("theta_0"),
        py::call_guard<py::gil_scoped_release>());

  m.def("evaluate", &evaluate, py::arg("state"), py::arg("suite"),
        py::arg("pool"), py::arg("theta_0"), py::arg("hard_gate_eval") = false,
        py::call_guard<py::gil_scoped_release>());

  m.def("gate_filter_baseline", &gate_filter_baseline, py::arg("config"),
        py::arg("suite"), py::arg("pool"), py::arg("theta_0"),
        py::call_guard<py::gil_scoped_release>());

  m.def("gate_filter_apply", &gate_filter_apply, py::arg("state"),
        py::arg("suite"), py::arg("pool"), py::arg("theta_0"),
        py::call_guard<py::gil_scoped_release>());

  m.def("state_to_params", &state_to_params, py::arg("state"));

  m.def("metrics_csv", &metrics_csv, py::arg("records"));
  m.def("write_metrics_csv", &write_metrics_csv, py::arg("records"),
        py::arg("path"));
  m.def("read_metrics_csv", &read_metrics_csv, py::arg("path"));
}
