#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdio>
#include <string>
#include <vector>

#include "fscil/config.hpp"
#include "fscil/data.hpp"
#include "fscil/errors.hpp"
#include "fscil/metrics.hpp"
#include "fscil/protocol.hpp"
#include "fscil/rectification.hpp"
#include "fscil/task_inference.hpp"

namespace py = pybind11;
using namespace fscil;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() != 2) throw ArgumentError("expected a 2-d array");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return Tensor(Shape{r, c}, std::vector<double>(a.data(), a.data() + r * c));
}

std::vector<double> to_vector(const Array& a) {
  if (a.ndim() != 1) throw ArgumentError("expected a 1-d array");
  return std::vector<double>(a.data(), a.data() + a.shape(0));
}

py::array_t<double> to_numpy(const Tensor& t) {
  if (t.rank() == 1) return py::array_t<double>(static_cast<py::ssize_t>(t.size()), t.storage().data());
  return py::array_t<double>({static_cast<py::ssize_t>(t.rows()), static_cast<py::ssize_t>(t.cols())},
                             t.storage().data());
}

py::array_t<double> to_numpy(const std::vector<double>& v) {
  return py::array_t<double>(static_cast<py::ssize_t>(v.size()), v.data());
}

py::dict dataset_dict(const Dataset& d) {
  py::dict out;
  out["features"] = to_numpy(d.features);
  out["labels"] = d.labels;
  out["classes"] = d.classes;
  out["image_size"] = d.image_size;
  return out;
}

std::string hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Few-shot class-incremental learning core";

  auto base = py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_RuntimeError);
  py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  (void)base;

  // ---- data ----------------------------------------------------------------

  m.def(
      "generate_blobs",
      [](std::size_t classes, std::size_t dim, std::size_t train_per_class, std::size_t test_per_class,
         double separation, double std, std::uint64_t seed) {
        const Blobs b = generate_blobs(BlobSpec{classes, dim, train_per_class, test_per_class, separation, std, seed});
        py::dict out;
        out["train"] = dataset_dict(b.train);
        out["test"] = dataset_dict(b.test);
        out["means"] = to_numpy(b.means);
        out["bayes_accuracy"] = b.bayes_accuracy;
        return out;
      },
      py::arg("classes") = 18, py::arg("dim") = 16, py::arg("train_per_class") = 40, py::arg("test_per_class") = 40,
      py::arg("separation") = 8.0, py::arg("std") = 1.0, py::arg("seed") = 0);

  m.def(
      "build_splits",
      [](std::size_t classes, std::vector<std::size_t> train_labels, std::vector<std::size_t> test_labels,
         std::size_t base_classes, std::size_t ways, std::size_t shots, std::uint64_t seed, std::size_t sessions) {
        const auto specs = build_fscil_splits(DatasetMeta{classes, std::move(train_labels), std::move(test_labels)},
                                              base_classes, ways, shots, seed, sessions);
        py::list out;
        for (const auto& s : specs) {
          py::dict d;
          d["index"] = s.index;
          d["classes"] = s.classes;
          d["train"] = s.train;
          d["test"] = s.test;
          out.append(d);
        }
        return out;
      },
      py::arg("classes"), py::arg("train_labels"), py::arg("test_labels"), py::arg("base_classes"), py::arg("ways"),
      py::arg("shots"), py::arg("seed"), py::arg("sessions") = 0);

  // ---- task inference --------------------------------------------------------

  py::class_<SessionStats>(m, "SessionStats")
      .def_readonly("session", &SessionStats::session)
      .def_readonly("samples", &SessionStats::samples)
      .def_property_readonly("classes",
                             [](const SessionStats& s) {
                               std::vector<std::size_t> c;
                               for (const auto& g : s.classes) c.push_back(g.cls);
                               return c;
                             })
      .def_property_readonly("means",
                             [](const SessionStats& s) {
                               const std::size_t d = s.scatter.rows();
                               Tensor t(Shape{s.classes.size(), d});
                               for (std::size_t i = 0; i < s.classes.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j) t.at(i, j) = s.classes[i].mean[j];
                               return to_numpy(t);
                             })
      .def_property_readonly("scatter", [](const SessionStats& s) { return to_numpy(s.scatter); });

  m.def(
      "fit_class_stats",
      [](const Array& embeddings, const std::vector<std::size_t>& labels, std::size_t session) {
        return fit_class_stats(to_tensor(embeddings), labels, session);
      },
      py::arg("embeddings"), py::arg("labels"), py::arg("session") = 0);

  m.def(
      "mahalanobis",
      [](const Array& x, const Array& mean, const Array& covariance, double reg) {
        return MahalanobisMetric(to_tensor(covariance), reg).distance(to_vector(x), to_vector(mean));
      },
      py::arg("x"), py::arg("mean"), py::arg("covariance"), py::arg("reg") = 1e-6);

  py::class_<TaskRouter>(m, "TaskRouter")
      .def(py::init<std::size_t, double>(), py::arg("dim"), py::arg("reg") = 1e-6)
      .def("add_session", &TaskRouter::add_session, py::arg("stats"))
      .def_property_readonly("covariance", [](const TaskRouter& r) { return to_numpy(r.covariance()); })
      .def_property_readonly("sessions", &TaskRouter::sessions)
      .def(
          "route",
          [](const TaskRouter& r, const Array& h, const std::string& metric) {
            const auto sel = r.select_all(to_tensor(h), parse_metric(metric));
            std::vector<std::size_t> cls, session;
            std::vector<double> dist;
            for (const auto& s : sel) {
              cls.push_back(s.cls);
              session.push_back(s.session);
              dist.push_back(s.distance);
            }
            py::dict out;
            out["classes"] = cls;
            out["sessions"] = session;
            out["distances"] = to_numpy(dist);
            return out;
          },
          py::arg("embeddings"), py::arg("metric") = "mahalanobis");

  // ---- rectification ---------------------------------------------------------

  py::class_<PredictionNet>(m, "PredictionNet")
      .def_static(
          "create",
          [](std::size_t dim, bool linear, std::uint64_t seed) {
            SeededRng rng(seed);
            return PredictionNet::create(dim, linear, rng);
          },
          py::arg("dim"), py::arg("linear") = false, py::arg("seed") = 0)
      .def_static("identity", [](std::size_t dim) { return PredictionNet::identity(dim); }, py::arg("dim"))
      .def_readonly("dim", &PredictionNet::dim)
      .def_readonly("linear", &PredictionNet::linear)
      .def(
          "fit",
          [](PredictionNet& net, const Array& inputs, const Array& targets, std::size_t epochs, double lr,
             std::uint64_t seed) {
            OutlierPairs p;
            p.inputs = to_tensor(inputs);
            p.targets = to_tensor(targets);
            p.source.resize(p.inputs.rows());
            RectificationConfig cfg;
            cfg.epochs = epochs;
            cfg.lr = lr;
            SeededRng rng(seed);
            return train_prediction_net(net, p, cfg, rng);
          },
          py::arg("inputs"), py::arg("targets"), py::arg("epochs") = 100, py::arg("lr") = 1e-3, py::arg("seed") = 0)
      .def("apply", [](const PredictionNet& net, const Array& x) { return to_numpy(net.apply(to_tensor(x))); })
      .def("rectify",
           [](const PredictionNet& net, const Array& mu) { return to_numpy(rectify_prototype(net, to_vector(mu))); });

  // ---- metrics and runs ------------------------------------------------------

  m.def(
      "compute_metrics_json",
      [](const std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>>& evals,
         const std::vector<std::vector<std::size_t>>& session_classes) {
        std::vector<SessionPredictions> e;
        for (const auto& [labels, predictions] : evals) e.push_back({labels, predictions});
        return to_json(compute_metrics(e, session_classes)).dump();
      },
      py::arg("evals"), py::arg("session_classes"));

  m.def(
      "profile_json", [](const std::string& name) { return to_json(profile_by_name(name)).dump(); },
      py::arg("name") = "desk");

  m.def(
      "without_json",
      [](const std::string& config, const std::string& toggle) {
        return to_json(without(config_from_json(nlohmann::json::parse(config)), toggle)).dump();
      },
      py::arg("config"), py::arg("toggle"));

  m.def(
      "run_json",
      [](const std::string& config, std::uint64_t seed) {
        const RunConfig cfg = config_from_json(nlohmann::json::parse(config));
        RunRecord r;
        {
          py::gil_scoped_release release;
          r = run_config(cfg, seed);
        }
        nlohmann::json j = r.to_json();
        j["record_hash"] = hex(r.hash());
        return j.dump();
      },
      py::arg("config"), py::arg("seed") = 0);
}
