// Python bindings for the main streamloc operations.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "streamloc/config.hpp"
#include "streamloc/engine.hpp"
#include "streamloc/errors.hpp"
#include "streamloc/event_memory.hpp"
#include "streamloc/metrics.hpp"
#include "streamloc/model.hpp"
#include "streamloc/proposal_tree.hpp"
#include "streamloc/synth.hpp"
#include "streamloc/trainer.hpp"

namespace py = pybind11;
using namespace streamloc;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor tensor_from_array(const DoubleArray& arr, const char* name) {
    const auto info = arr.request();
    if (info.ndim != 2) throw py::value_error(std::string(name) + " must be a 2-D array");
    Shape shape{static_cast<std::size_t>(info.shape[0]), static_cast<std::size_t>(info.shape[1])};
    const double* ptr = static_cast<const double*>(info.ptr);
    return Tensor::from_data(shape, std::vector<double>(ptr, ptr + info.shape[0] * info.shape[1]));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    py::array_t<double> out({t.rows(), t.cols()});
    std::copy(t.data().begin(), t.data().end(), static_cast<double*>(out.request().ptr));
    return out;
}

py::dict prediction_to_dict(const Prediction& p) {
    py::dict d;
    d["query_id"] = p.query_id;
    d["mode"] = std::string(1, p.mode);
    d["start"] = p.start;
    d["end"] = p.end;
    d["score"] = p.score;
    d["start_emit"] = p.start_emit;
    d["end_emit"] = p.end_emit;
    return d;
}

// Engine façade owning the model so Python sees one object.
class PyEngine {
public:
    PyEngine(const std::string& checkpoint, const std::vector<std::string>& overrides) {
        model_ = GroundingModel::load_checkpoint(checkpoint);
        RunConfig cfg = default_run_config(overrides);
        MemoryStackConfig mem = cfg.train.memory;
        mem.resolve(model_->config().num_scales, nullptr);
        engine_ = std::make_unique<StreamingEngine>(*model_, cfg.engine, mem);
    }

    void add_query(const std::string& id, const std::vector<int>& tokens) {
        engine_->add_query(QueryTask{id, tokens, Interval{0.0, 0.0}});
    }

    std::vector<py::dict> step(std::int64_t frame_index, const std::vector<double>& features) {
        std::vector<py::dict> out;
        for (const auto& p : engine_->step(frame_index, features)) out.push_back(prediction_to_dict(p));
        return out;
    }

    std::vector<py::dict> finish() {
        std::vector<py::dict> out;
        for (const auto& p : engine_->finish()) out.push_back(prediction_to_dict(p));
        return out;
    }

    std::vector<py::dict> emissions() const {
        std::vector<py::dict> out;
        for (const auto& p : engine_->emissions()) out.push_back(prediction_to_dict(p));
        return out;
    }

    std::int64_t windows_closed() const { return engine_->windows_closed(); }

private:
    std::unique_ptr<GroundingModel> model_;
    std::unique_ptr<StreamingEngine> engine_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "streamloc core: streaming temporal localization";

    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<CheckpointError>(m, "CheckpointError");
    py::register_exception<InputError>(m, "InputError");

    m.def("span_of",
          [](int scale, std::int64_t index) {
              auto [s, e] = span_of(scale, index);
              return py::make_tuple(s, e);
          },
          py::arg("scale"), py::arg("index"),
          "Frame span (start, end) of the aligned proposal at a scale/index.");
    m.def("max_reach", &max_reach, py::arg("num_scales"),
          "Longest constructible proposal duration given per-scale history.");

    m.def("allocate_sizes",
          [](int total, const std::vector<double>& weights) {
              return allocate_sizes(total, ScaleWeights{weights});
          },
          py::arg("total"), py::arg("weights"),
          "Split a total memory capacity across scales by weight.");
    m.def("estimate_scale_weights",
          [](const std::vector<std::pair<double, double>>& intervals, double iou_threshold,
             int num_scales) {
              std::vector<Interval> gts;
              for (auto [s, e] : intervals) gts.push_back(Interval{s, e});
              return estimate_scale_weights(gts, iou_threshold, num_scales).values;
          },
          py::arg("intervals"), py::arg("iou_threshold"), py::arg("num_scales"));

    m.def("iou",
          [](std::pair<double, double> a, std::pair<double, double> b) {
              return iou(Interval{a.first, a.second}, Interval{b.first, b.second});
          },
          "Temporal intersection-over-union of two intervals.");
    m.def("focal_loss", &focal_loss_value, py::arg("prob"), py::arg("label"),
          py::arg("alpha") = 0.25, py::arg("gamma") = 2.0);
    m.def("diou_loss_1d",
          [](std::pair<double, double> pred, std::pair<double, double> gt) {
              return diou_loss_1d(Interval{pred.first, pred.second}, Interval{gt.first, gt.second});
          },
          py::arg("pred"), py::arg("gt"));

    m.def("attention",
          [](const DoubleArray& q, const DoubleArray& k, const DoubleArray& v) {
              NoGradGuard no_grad;
              return array_from_tensor(attention(tensor_from_array(q, "queries"),
                                                 tensor_from_array(k, "keys"),
                                                 tensor_from_array(v, "values")));
          },
          py::arg("queries"), py::arg("keys"), py::arg("values"),
          "softmax(q k^T / sqrt(d)) v over 2-D arrays.");

    m.def("generate_corpus",
          [](const std::string& out_dir, const std::vector<std::string>& overrides) {
              RunConfig cfg = default_run_config(overrides);
              write_corpus(generate_corpus(cfg.data), out_dir);
          },
          py::arg("out_dir"), py::arg("overrides") = std::vector<std::string>{},
          "Generate the synthetic corpus into a directory.");

    m.def("init_checkpoint",
          [](const std::string& path, const std::vector<std::string>& overrides) {
              RunConfig cfg = default_run_config(overrides);
              GroundingModel model(cfg.model, cfg.train.seed);
              model.save_checkpoint(path);
          },
          py::arg("path"), py::arg("overrides") = std::vector<std::string>{},
          "Write a freshly initialized model checkpoint.");

    m.def("train",
          [](const std::string& corpus_dir, const std::string& out_dir,
             const std::vector<std::string>& overrides) {
              RunConfig cfg = default_run_config(overrides);
              Corpus corpus = load_corpus(corpus_dir);
              cfg.data = corpus.spec;
              cfg.finalize();
              GroundingModel model(cfg.model, cfg.train.seed);
              Trainer trainer(model, cfg.train);
              auto history = trainer.run(corpus, out_dir);
              return history.empty() ? 0.0 : history.back().total;
          },
          py::arg("corpus_dir"), py::arg("out_dir"),
          py::arg("overrides") = std::vector<std::string>{},
          "Train on a corpus directory; returns the final epoch loss.");

    py::class_<PyEngine>(m, "Engine")
        .def(py::init<const std::string&, const std::vector<std::string>&>(), py::arg("checkpoint"),
             py::arg("overrides") = std::vector<std::string>{})
        .def("add_query", &PyEngine::add_query, py::arg("query_id"), py::arg("tokens"))
        .def("step", &PyEngine::step, py::arg("frame_index"), py::arg("features"))
        .def("finish", &PyEngine::finish)
        .def("emissions", &PyEngine::emissions)
        .def("windows_closed", &PyEngine::windows_closed);
}
