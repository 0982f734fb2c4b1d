#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <map>

#include "disco3d/eval/pipeline.hpp"
#include "disco3d/oracle.hpp"

namespace py = pybind11;
using namespace disco3d;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

worldgen::Complexity complexity_of(const std::string& s) {
  if (s == "small") return worldgen::Complexity::Small;
  if (s == "medium") return worldgen::Complexity::Medium;
  throw std::invalid_argument("complexity must be small or medium");
}

eval::Stage stage_of(const std::string& s) {
  static const std::map<std::string, eval::Stage> stages = {{"worldgen", eval::Stage::Worldgen},
                                                            {"stage1", eval::Stage::Stage1},
                                                            {"distill", eval::Stage::Distill},
                                                            {"eval", eval::Stage::Eval},
                                                            {"stage3", eval::Stage::Stage3},
                                                            {"all", eval::Stage::All}};
  const auto it = stages.find(s);
  if (it == stages.end()) throw std::invalid_argument("unknown stage: " + s);
  return it->second;
}

py::dict row_dict(const eval::MetricRow& r) {
  py::dict d;
  d["condition"] = r.condition;
  d["reproj"] = r.reproj;
  d["reproj_skipped"] = r.reproj_skipped;
  d["embed_sim"] = r.embed_sim;
  d["embed_dir_sim"] = r.embed_dir_sim;
  d["embed_dir_consistency"] = r.embed_dir_consistency;
  d["embed_skipped"] = r.embed_skipped;
  d["psnr_oracle"] = r.psnr_oracle;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "disco3d core bindings";
  m.attr("CONFIG_VERSION") = eval::kConfigVersion;

  m.def("canonical_config", [](const std::string& text) { return eval::config_to_json(eval::config_from_json(text)); },
        py::arg("text"), "Validate a JSON config and return it with every field written out.");
  m.def("config_hash", [](const std::string& text) { return eval::config_hash(eval::config_from_json(text)); },
        py::arg("text"));

  m.def(
      "render_scene",
      [](uint64_t seed, const std::string& complexity, int height, int width, int views, int clip) {
        const auto scene = worldgen::generate_scene(seed, complexity_of(complexity));
        const auto vs =
            worldgen::render_views(scene, worldgen::default_trajectory(scene, views), height, width, clip);
        return to_numpy(vs.images);
      },
      py::arg("seed"), py::arg("complexity") = "small", py::arg("height") = 16, py::arg("width") = 16,
      py::arg("views") = 9, py::arg("clip") = 5, "Ground-truth renders [N, H, W, 3] of a procedural scene.");

  m.def(
      "schedule",
      [](const std::string& kind) {
        const NoiseSchedule s = kind == "ddpm" ? NoiseSchedule::ddpm_linear()
                                : kind == "edm" ? NoiseSchedule::edm()
                                                : throw std::invalid_argument("schedule must be ddpm or edm");
        std::vector<double> alpha, sigma;
        for (int t = 0; t <= s.steps(); ++t) {
          alpha.push_back(s.alpha(t));
          sigma.push_back(s.sigma(t));
        }
        return py::make_tuple(alpha, sigma);
      },
      py::arg("kind"), "(alpha_t, sigma_t) for t = 0..T.");

  m.def(
      "oracle_sweep",
      [](int D, int n, const std::vector<int>& ts, uint64_t seed) {
        py::list out;
        for (const auto& r : oracle::oracle_sweep(D, n, ts, seed)) {
          py::dict d;
          d["D"] = r.D;
          d["k"] = r.k;
          d["n"] = r.n;
          d["t"] = r.t;
          d["cosine"] = r.cosine;
          d["rel_err"] = r.rel_err;
          d["SE"] = r.se;
          out.append(d);
        }
        return out;
      },
      py::arg("D") = 2, py::arg("n") = 10000, py::arg("ts") = std::vector<int>{0, 100, 500, 900},
      py::arg("seed") = 0);

  m.def(
      "run_pipeline",
      [](const std::string& config_text, const std::string& out, const std::string& until) {
        const eval::ExperimentConfig cfg = eval::config_from_json(config_text);
        eval::RunResult res;
        {
          py::gil_scoped_release release;
          res = eval::run_pipeline(cfg, out, stage_of(until));
        }
        py::list rows;
        for (const auto& r : res.rows) rows.append(row_dict(r));
        return rows;
      },
      py::arg("config"), py::arg("out"), py::arg("until") = "all",
      "Run the pipeline and return the metric rows written to metrics.csv.");
}
