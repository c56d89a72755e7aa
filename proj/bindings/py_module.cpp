// Python surface over the training engine: the loss algebra, pair-set
// construction, data utilities, a thin model wrapper and the Monte-Carlo
// decomposition used by the verify suites. Training itself stays behind the
// command-line tool; these bindings are for inspection and parity checks.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <optional>

#include "dks/checkpoint.hpp"
#include "dks/data.hpp"
#include "dks/loss.hpp"
#include "dks/model.hpp"
#include "dks/optim.hpp"
#include "dks/verifier.hpp"

namespace py = pybind11;
using namespace dks;

namespace {

using DArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using FArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor<double> tensor2d(const DArray& a, const char* what) {
  if (a.ndim() != 2) throw ConfigError(std::string(what) + " must be a 2-d [N,K] array");
  std::vector<double> v(a.data(), a.data() + a.size());
  return Tensor<double>::from_data({a.shape(0), a.shape(1)}, std::move(v));
}

py::array_t<double> array2d(const Tensor<double>& t) {
  // the shape+pointer form copies the data and owns the result
  return py::array_t<double>({t.dim(0), t.dim(1)}, t.data().data());
}

std::vector<int32_t> label_vec(const std::vector<int64_t>& labels) {
  std::vector<int32_t> y;
  y.reserve(labels.size());
  for (int64_t l : labels) y.push_back(static_cast<int32_t>(l));
  return y;
}

py::dict report_dict(const LossReport& r) {
  py::dict d;
  d["total"] = r.total;
  d["classification"] = r.classification;
  d["auxiliary"] = r.auxiliary;
  d["synergy"] = r.synergy;
  py::dict heads, pairs;
  for (const auto& [id, v] : r.per_head_ce) heads[py::str(id)] = v;
  for (const auto& [id, v] : r.per_pair) pairs[py::str(id)] = v;
  d["per_head_ce"] = heads;
  d["per_pair"] = pairs;
  return d;
}

/// Deployment-dtype (float32) model handle, mirroring checkpoint contents.
class PyModel {
 public:
  PyModel(const std::string& preset, int64_t num_classes, uint64_t seed,
          std::optional<std::vector<std::string>> aux) {
    ModelSpec spec = make_model_spec(preset, num_classes);
    if (aux) spec = select_aux_heads(spec, *aux);
    model_ = std::make_unique<MultiHeadModel<float>>(spec, seed);
  }
  explicit PyModel(const Checkpoint& ck) {
    model_ = std::make_unique<MultiHeadModel<float>>(ck.spec, 0);
    load_into_model(ck, *model_);
  }

  static PyModel from_checkpoint(const std::string& path) {
    return PyModel(load_checkpoint(path));
  }

  std::vector<std::string> head_ids() const { return model_->head_ids(); }

  int64_t param_count() {
    int64_t n = 0;
    for (auto& p : model_->params()) n += p.tensor.numel();
    return n;
  }

  std::vector<py::array_t<float>> forward(const FArray& x, bool train) {
    if (x.ndim() != 4) throw ConfigError("forward expects a [N,C,H,W] array");
    std::vector<float> v(x.data(), x.data() + x.size());
    Tensor<float> t =
        Tensor<float>::from_data({x.shape(0), x.shape(1), x.shape(2), x.shape(3)}, std::move(v));
    auto logits = model_->forward_all(t, train ? Mode::train : Mode::eval);
    std::vector<py::array_t<float>> out;
    for (auto& lg : logits)
      out.push_back(py::array_t<float>({lg.dim(0), lg.dim(1)}, lg.data().data()));
    return out;
  }

  PyModel strip() const { return PyModel(strip_checkpoint(checkpoint_from_model(*model_))); }

  void save(const std::string& path) { save_checkpoint(path, checkpoint_from_model(*model_)); }

 private:
  std::unique_ptr<MultiHeadModel<float>> model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "deeply-supervised knowledge synergy training engine";

  m.def(
      "softmax",
      [](const DArray& logits) { return array2d(softmax(tensor2d(logits, "logits"))); },
      py::arg("logits"), "Row-wise softmax of a [N,K] logit array.");

  m.def(
      "cross_entropy",
      [](const std::vector<int64_t>& labels, const DArray& logits, double floor) {
        return static_cast<double>(
            cross_entropy_hard(label_vec(labels), tensor2d(logits, "logits"), floor).item());
      },
      py::arg("labels"), py::arg("logits"), py::arg("floor") = 1e-12,
      "Batch-mean hard-label cross entropy.");

  m.def(
      "knowledge_match",
      [](const DArray& teacher, const DArray& student, double beta, double floor) {
        return static_cast<double>(knowledge_match(tensor2d(teacher, "teacher logits"),
                                                   tensor2d(student, "student logits"), beta, floor)
                                       .item());
      },
      py::arg("teacher_logits"), py::arg("student_logits"), py::arg("beta") = 1.0,
      py::arg("floor") = 1e-12,
      "Soft-target cross entropy with the teacher distribution treated as constant.");

  m.def(
      "total_loss",
      [](const std::vector<int64_t>& labels, const std::vector<std::string>& head_ids,
         const std::vector<DArray>& logits,
         const std::vector<std::pair<std::string, std::string>>& pairs,
         const std::map<std::string, double>& alpha, const std::map<std::string, double>& beta) {
        std::vector<Tensor<double>> ts;
        for (const auto& a : logits) ts.push_back(tensor2d(a, "logits"));
        std::vector<HeadPair> ps;
        for (const auto& [t, s] : pairs) ps.push_back({t, s});
        LossWeights w;
        w.alpha = alpha;
        w.beta = beta;
        auto [loss, rep] = total_loss<double>(label_vec(labels), head_ids, ts, ps, w);
        return report_dict(rep);
      },
      py::arg("labels"), py::arg("head_ids"), py::arg("logits"), py::arg("pairs"),
      py::arg("alpha") = std::map<std::string, double>{},
      py::arg("beta") = std::map<std::string, double>{},
      "Composed objective: returns every term of the classification + auxiliary + synergy "
      "split as a dict.");

  m.def(
      "build_pair_set",
      [](const std::vector<std::string>& heads_by_depth, const std::string& strategy) {
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& p : build_pair_set(heads_by_depth, parse_pair_strategy(strategy)))
          out.push_back({p.teacher, p.student});
        return out;
      },
      py::arg("heads_by_depth"), py::arg("strategy"),
      "(teacher, student) pairs for 'top_down', 'bottom_up' or 'bi' over heads listed "
      "deepest first.");

  m.def(
      "lr_at",
      [](int64_t epoch, double lr0, double factor, const std::vector<int64_t>& milestones,
         int64_t period) {
        LrSchedule s;
        s.lr0 = lr0;
        s.factor = factor;
        s.milestones = milestones;
        s.period = period;
        return lr_at(s, epoch);
      },
      py::arg("epoch"), py::arg("lr0") = 0.1, py::arg("factor") = 10.0,
      py::arg("milestones") = std::vector<int64_t>{}, py::arg("period") = 0,
      "Step-decay learning rate at a given epoch.");

  m.def(
      "corrupt_labels",
      [](std::vector<int32_t> labels, int64_t num_classes, double ratio, uint64_t seed) {
        corrupt_labels(labels, num_classes, ratio, seed);
        return labels;
      },
      py::arg("labels"), py::arg("num_classes"), py::arg("ratio"), py::arg("seed"),
      "Returns a copy with round(ratio*N) labels reassigned to different classes.");

  m.def(
      "generate_synthetic",
      [](int64_t classes, int64_t per_class, int64_t test_per_class, double noise_std,
         uint64_t seed) {
        SyntheticSpec spec;
        spec.classes = classes;
        spec.per_class = per_class;
        spec.test_per_class = test_per_class;
        spec.noise_std = noise_std;
        auto [tr, te] = generate_synthetic(spec, seed);
        auto pack = [](const Dataset& ds) {
          py::dict d;
          d["images"] = py::array_t<uint8_t>({ds.size(), ds.channels, ds.height, ds.width},
                                             ds.images.data());
          d["labels"] = py::array_t<int32_t>({ds.size()}, ds.labels.data());
          d["mean"] = ds.mean;
          d["std"] = ds.stdev;
          d["num_classes"] = ds.num_classes;
          return d;
        };
        py::dict out;
        out["train"] = pack(tr);
        out["test"] = pack(te);
        return out;
      },
      py::arg("classes") = 4, py::arg("per_class") = 256, py::arg("test_per_class") = 0,
      py::arg("noise_std") = 0.25, py::arg("seed") = 1,
      "Deterministic synthetic image task; both splits share class templates.");

  m.def(
      "synergy_decomposition",
      [](const std::string& fixture, double sigma, int64_t n_samples, uint64_t seed) {
        auto shelf = standard_fixtures();
        PerturbationSpec spec;
        spec.sigma = sigma;
        spec.n_samples = n_samples;
        spec.seed = seed;
        auto r = verify_synergy_decomposition(fixture_by_name(shelf, fixture), spec);
        py::dict d;
        d["fixture"] = r.fixture;
        d["sigma"] = r.sigma;
        d["lhs"] = r.lhs;
        d["consistency_term"] = r.consistency_term;
        d["mismatch_term"] = r.mismatch_term;
        d["residual"] = r.residual;
        d["mc_ci"] = r.mc_ci;
        d["band"] = r.band;
        d["pass"] = r.pass;
        return d;
      },
      py::arg("fixture"), py::arg("sigma") = 0.1, py::arg("n_samples") = 1'000'000,
      py::arg("seed") = 1,
      "Monte-Carlo check of the value-gap + Jacobian-gap decomposition on a named fixture.");

  m.def("fixture_names", []() {
    std::vector<std::string> names;
    for (const auto& f : standard_fixtures()) names.push_back(f.name);
    return names;
  });

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&, int64_t, uint64_t,
                    std::optional<std::vector<std::string>>>(),
           py::arg("preset"), py::arg("num_classes"), py::arg("seed") = 1,
           py::arg("aux") = std::nullopt,
           "Backbone plus aux heads. aux=None keeps the preset's heads; aux=[] is the "
           "plain baseline.")
      .def_static("from_checkpoint", &PyModel::from_checkpoint, py::arg("path"))
      .def("head_ids", &PyModel::head_ids)
      .def("param_count", &PyModel::param_count)
      .def("forward", &PyModel::forward, py::arg("x"), py::arg("train") = false,
           "Logits per head for a [N,C,H,W] float batch; train=True uses batch statistics "
           "and updates the running ones.")
      .def("strip", &PyModel::strip, "Backbone-only copy, aux branches removed.")
      .def("save", &PyModel::save, py::arg("path"));
}
