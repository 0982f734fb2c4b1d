#pragma once

// Experiment configuration: every stage's hyperparameters in one JSON file
// with a required "version" field. Unknown keys are rejected at every level.

#include <cstdint>
#include <string>

#include "disco3d/distill.hpp"
#include "disco3d/editor.hpp"
#include "disco3d/nvs.hpp"
#include "disco3d/splat.hpp"

namespace disco3d::eval {

inline constexpr int kConfigVersion = 1;

struct SceneConfig {
  uint64_t seed = 0;
  worldgen::Complexity complexity = worldgen::Complexity::Small;
  int height = 64;
  int width = 64;
  int views = 49;
  int clip_length = 25;
};

struct EditConfig {
  int code = static_cast<int>(worldgen::EditCode::Red);
  int variant = 0;
};

/// Base-model pretraining on procedural scenes, standing in for the
/// off-the-shelf generators.
struct PretrainSpec {
  int scenes = 16;
  uint64_t scene_seed_base = 1000;
  int teacher_steps = 1500;
  int editor_steps = 20000;
  double lr = 2e-3;
};

struct Stage3Config {
  int gaussians = 500;
  int fit_iters = 2000;
  int iters = 300;
  bool gt_mask = false;
  splat::ReconLoss loss;
  splat::OptimConfig optim;
};

struct AblationConfig {
  bool skip_stage1 = false;
  bool nvs_direct = false;
  bool alpha_sweep = false;
};

struct ExperimentConfig {
  int version = kConfigVersion;
  uint64_t seed = 0;
  SceneConfig scene;
  EditConfig edit;
  PretrainSpec pretrain;
  nvs::Stage1Config stage1;
  distill::DistillConfig distill;
  Stage3Config stage3;
  AblationConfig ablation;
  bool all_pairs = false;
  int eval_samples = 1;
  std::string embedder_path;
  std::string cache_dir;
  bool deterministic = true;

  /// Throws std::invalid_argument on any out-of-range field.
  void validate() const;
};

/// Parses and validates; missing fields keep their defaults.
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::string& path);
/// Canonical JSON with every field written out.
std::string config_to_json(const ExperimentConfig& cfg);
uint64_t config_hash(const ExperimentConfig& cfg);

/// True when DISCO3D_DETERMINISTIC is set to 1.
bool deterministic_env();

}  // namespace disco3d::eval
