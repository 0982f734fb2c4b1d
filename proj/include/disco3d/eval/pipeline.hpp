#pragma once

// Experiment orchestration: scene generation, base-model pretraining (cached),
// Stage-1 adaptation (cached per scene), Stage-2 distillation or its
// ablations, Stage-3 splat update, metrics and the results directory.

#include <optional>
#include <string>
#include <vector>

#include "disco3d/eval/config.hpp"
#include "disco3d/eval/embedder.hpp"

namespace disco3d::eval {

enum class Stage { Worldgen, Stage1, Distill, Eval, Stage3, All };

struct SourceScene {
  worldgen::Scene scene;
  worldgen::EditOracle oracle;
  worldgen::ViewSet views;
  /// Ground-truth edited renders under the same cameras.
  worldgen::ViewSet oracle_views;
};

SourceScene make_source(const ExperimentConfig& cfg);

struct BaseModels {
  nvs::Teacher teacher;
  editor::Editor editor;
};

/// Cache directory from the config, else $DISCO3D_CACHE, else ".disco3d_cache".
std::string cache_root(const ExperimentConfig& cfg);
/// Loads pretrained base models from the cache or trains and stores them.
BaseModels base_models(const ExperimentConfig& cfg);
/// Stage-1 fine-tuned teacher, shared by every edit of the same scene.
nvs::Teacher stage1_teacher(const ExperimentConfig& cfg, const nvs::Teacher& base, const worldgen::ViewSet& views,
                            std::vector<double>* losses = nullptr);

/// Views edited by direct teacher sampling from the edited reference view.
Tensor nvs_direct_views(const nvs::Teacher& teacher, const editor::Editor& editor, const worldgen::ViewSet& views,
                        int code, const ExperimentConfig& cfg, uint64_t seed);
/// Full-sampling edit of every view, averaged metrics use `samples` seeds.
Tensor edit_views(const editor::Editor& editor, const worldgen::ViewSet& views, int code,
                  const editor::SamplerConfig& sampler, uint64_t seed);

/// Truncated-gradient sampler outputs (the x0 prediction at a step drawn
/// from the ReFL range), with the same initial noise as edit_views.
Tensor refl_views(const editor::Editor& editor, const worldgen::ViewSet& views, int code,
                  const editor::SamplerConfig& sampler, uint64_t seed);

struct MetricRow {
  std::string condition;
  double reproj = 0.0;
  int reproj_skipped = 0;
  double embed_sim = 0.0;
  double embed_dir_sim = 0.0;
  double embed_dir_consistency = 0.0;
  int embed_skipped = 0;
  double psnr_oracle = 0.0;
};

MetricRow evaluate(const std::string& condition, const Tensor& edited, const SourceScene& src,
                   const Embedder& embedder, bool all_pairs);

/// The shipped embedder, or the one named in the config.
ToyEmbedder load_embedder(const ExperimentConfig& cfg);
/// Path of the embedder checkpoint that ships with the repository.
std::string default_embedder_path();

struct RunResult {
  std::vector<MetricRow> rows;
  std::vector<distill::IterLog> distill_log;

  const MetricRow* find(const std::string& condition) const;
};

/// Runs every stage up to `until` and writes config.json, checkpoints/,
/// metrics.csv, grids/*.png and curves/*.csv under `out`. On failure a FAILED
/// marker holding the message is written and the exception rethrown.
RunResult run_pipeline(const ExperimentConfig& cfg, const std::string& out, Stage until = Stage::All);

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);

}  // namespace disco3d::eval
