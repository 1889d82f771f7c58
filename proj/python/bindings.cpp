#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "hierdoc/cli.hpp"
#include "hierdoc/document_models.hpp"
#include "hierdoc/encoder.hpp"
#include "hierdoc/segmenter.hpp"
#include "hierdoc/storage.hpp"
#include "hierdoc/synthetic.hpp"
#include "hierdoc/training.hpp"

namespace py = pybind11;
using namespace hierdoc;

namespace {

Array<double> to_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D array");
  const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
  return Array<double>({rows, cols}, std::vector<double>(a.data(), a.data() + rows * cols));
}

py::dict flops_dict(const FlopEstimate& f) {
  py::dict d;
  d["attention"] = f.attention;
  d["projections"] = f.projections;
  d["feed_forward"] = f.feed_forward;
  d["total"] = f.total;
  d["segments"] = f.segments;
  d["positions_per_segment"] = f.positions_per_segment;
  return d;
}

}  // namespace

PYBIND11_MODULE(_hierdoc, m) {
  m.doc() = "Hierarchical long-document classification core";

  m.def("segment_count", &segment_count, py::arg("doc_length"), py::arg("segment_size") = 200,
        py::arg("stride") = 50);
  m.def(
      "plan_segments",
      [](std::size_t L, std::size_t s, std::size_t t) {
        const SegmentPlan p = plan_segments(L, s, t);
        std::vector<std::pair<std::size_t, std::size_t>> out;
        for (std::size_t i = 0; i < p.count(); ++i) out.emplace_back(p.starts[i], p.window_length(i));
        return out;
      },
      py::arg("doc_length"), py::arg("segment_size") = 200, py::arg("stride") = 50,
      "(start, length) of every window");

  m.def(
      "count_flops",
      [](std::size_t L, std::size_t s, std::size_t t, const std::string& mode) {
        AttentionMode am;
        if (mode == "segmented") {
          am = AttentionMode::segmented;
        } else if (mode == "full_attention") {
          am = AttentionMode::full_attention;
        } else {
          throw std::invalid_argument("mode must be segmented or full_attention");
        }
        return flops_dict(count_flops(L, s, t, EncoderConfig{}, am));
      },
      py::arg("doc_length"), py::arg("segment_size") = 200, py::arg("stride") = 50,
      py::arg("mode") = "segmented");

  m.def("aggregate_average", [](const py::array_t<double, py::array::c_style | py::array::forcecast>& p) {
    return aggregate_average(to_array(p));
  });
  m.def("aggregate_most_frequent",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& p) {
          return aggregate_most_frequent(to_array(p));
        });
  m.def("evaluate_accuracy", [](const std::vector<int>& pred, const std::vector<int>& labels) {
    return evaluate_accuracy(pred, labels);
  });

  py::class_<PlateauSchedule>(m, "PlateauSchedule")
      .def(py::init<double, double, int>(), py::arg("learning_rate"), py::arg("factor") = 0.95,
           py::arg("patience") = 3)
      .def("update", &PlateauSchedule::update)
      .def_property_readonly("learning_rate", &PlateauSchedule::learning_rate)
      .def_property_readonly("reductions", &PlateauSchedule::reductions);

  m.def(
      "generate_task",
      [](const std::string& spec_json) {
        const SyntheticDataset ds = generate_task(task_spec_from_json(nlohmann::json::parse(spec_json)));
        py::list docs;
        for (const auto& d : ds.documents) {
          py::dict item;
          item["id"] = d.id;
          item["tokens"] = d.tokens;
          item["label"] = d.label;
          item["split"] = std::string(split_name(d.split));
          docs.append(item);
        }
        return py::make_tuple(docs, ds.labels.names);
      },
      py::arg("spec_json"), "documents and label names for a task spec given as JSON");

  m.def("git_blob_hash", [](const py::bytes& b) { return git_blob_hash(std::string(b)); });

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "run one command in-process; returns (exit_code, stdout, stderr)");
}
