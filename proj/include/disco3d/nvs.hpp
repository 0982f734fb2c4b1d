#pragma once

// Multi-view novel-view-synthesis denoiser (the teacher): denoises a clip of
// views conditioned on render maps warped from a reference image, a pooled
// reference embedding and per-view camera tags.

#include <vector>

#include "disco3d/nets.hpp"
#include "disco3d/schedule.hpp"
#include "disco3d/worldgen.hpp"

namespace disco3d::nvs {

/// Conditioning for one clip. Built from the source reference in Stage 1 and
/// from the edited reference in Stage 2.
struct ConditionSignal {
  Tensor render_maps;  // [V, H, W, 4]: warped RGB (latent range) + validity
  Tensor ref_image;    // [H, W, 3]
  Tensor camera_tags;  // [V, 6]

  int views() const { return static_cast<int>(render_maps.dim(0)); }
};

/// Render maps of `ref_image` warped along the geometry of `views`, restricted to `clip`.
ConditionSignal make_condition(const worldgen::ViewSet& views, const Tensor& ref_image, const std::vector<int>& clip);
ConditionSignal make_condition(const worldgen::ViewSet& views, const worldgen::RenderMap& maps,
                               const Tensor& ref_image, const std::vector<int>& clip);

nets::DenoiserConfig default_teacher_net();

/// Teacher parameters plus its DDPM schedule. After Stage 1 only the
/// temporal-attention adapters differ from the pretrained snapshot.
class Teacher {
 public:
  Teacher() = default;
  Teacher(nets::Denoiser net, NoiseSchedule schedule) : net_(std::move(net)), schedule_(std::move(schedule)) {}

  /// Noise prediction for a latent clip [V, H, W, 3]. The unconditional branch
  /// drops render maps and the reference token but keeps the camera tags.
  ag::Var eps(const ag::Var& z_t, int t, const ConditionSignal& cond, bool unconditional = false) const;
  /// Classifier-free guided noise prediction (no graph).
  Tensor eps_cfg(const Tensor& z_t, int t, const ConditionSignal& cond, double guidance) const;

  nets::Denoiser& net() { return net_; }
  const nets::Denoiser& net() const { return net_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  Teacher clone() const { return Teacher(net_.clone(), schedule_); }

 private:
  nets::Denoiser net_;
  NoiseSchedule schedule_ = NoiseSchedule::ddpm_linear();
};

/// Mean squared noise-prediction error for one clip of images at step t.
ag::Var diffusion_loss(const Teacher& teacher, const Tensor& clip_images, const ConditionSignal& cond, int t,
                       const Tensor& eps, bool unconditional = false);

struct PretrainConfig {
  int steps = 1500;
  double lr = 2e-3;
  int views = 9;
  int clip_length = 5;
  int height = 16;
  int width = 16;
  int trajectories_per_scene = 3;
  double cond_dropout = 0.1;
  uint64_t seed = 0;
};

struct TrainLog {
  std::vector<double> losses;
};

/// Trains a fresh teacher on a family of scenes. Requires at least 8 scenes;
/// throws NumericalError if the loss becomes non-finite.
Teacher pretrain_base(const std::vector<worldgen::Scene>& worlds, const PretrainConfig& cfg, TrainLog* log = nullptr);

/// Temporal adapter rank of the full-size teacher. The desk-scale default keeps
/// the 2:1 ratio to the editor rank with r < min(d, k) on 16-wide layers.
inline constexpr int kFullScaleTemporalRank = 64;

struct Stage1Config {
  int iters = 200;
  double lr = 5e-4;
  int rank = 8;
  uint64_t seed = 0;
};

/// Attaches temporal-attention adapters (when absent) and fits them on the
/// scene's clips with the noise-prediction loss. Returns per-iteration losses.
TrainLog finetune_stage1(Teacher& teacher, const worldgen::ViewSet& views, const Stage1Config& cfg);

/// Noise-prediction loss on the scene's clips averaged over a fixed, seeded
/// set of (clip, t, eps) draws, so values before and after training compare.
double clip_loss(const Teacher& teacher, const worldgen::ViewSet& views, uint64_t seed, int samples = 16);

/// Ancestral sampling from pure noise over an evenly strided subset of
/// `steps` timesteps. Deterministic in the rng state.
Tensor sample_clip(const Teacher& teacher, const ConditionSignal& cond, Rng& rng, int steps = 50,
                   double guidance = 1.0);

}  // namespace disco3d::nvs
