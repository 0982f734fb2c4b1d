#pragma once

// Instruction-conditioned per-view editor (the student): EDM-preconditioned
// denoiser conditioned on the source image and an edit code, with dual
// classifier-free guidance, few-step sampling and truncated-gradient sampling.

#include <vector>

#include "disco3d/nets.hpp"
#include "disco3d/nvs.hpp"
#include "disco3d/schedule.hpp"
#include "disco3d/worldgen.hpp"

namespace disco3d::editor {

inline constexpr double kSigmaData = 0.5;
/// Self-attention adapter rank of the full-size editor.
inline constexpr int kFullScaleEditorRank = 32;
inline constexpr int kDefaultEditorRank = 4;

struct SamplerConfig {
  double s_T = 7.5;
  double s_I = 1.5;
  int steps = 20;
  int refl_lo = 15;
  int refl_hi = 20;

  /// Throws std::invalid_argument unless 1 <= refl_lo <= refl_hi <= steps and both scales >= 1.
  void validate() const;
};

nets::DenoiserConfig default_editor_net();

class Editor {
 public:
  Editor() = default;
  Editor(nets::Denoiser net, NoiseSchedule schedule);

  /// Preconditioned x0 estimate (latent range) for a batch of views.
  /// `source` holds the source images [V, H, W, 3] in [0, 1]; `codes` one
  /// edit code per view, -1 for the null code; `drop_image` zeroes the source.
  ag::Var denoise(const ag::Var& z_t, int t, const Tensor& source, const std::vector<int>& codes,
                  bool drop_image) const;
  ag::Var eps(const ag::Var& z_t, int t, const Tensor& source, const std::vector<int>& codes, bool drop_image) const;
  /// eps(0,0) + s_I (eps(src,0) - eps(0,0)) + s_T (eps(src,code) - eps(src,0)).
  ag::Var cfg_eps(const ag::Var& z_t, int t, const Tensor& source, int code, const SamplerConfig& cfg) const;

  /// Raw network output F and its regression target for the EDM training
  /// loss, with one step per view.
  ag::Var raw_output(const Tensor& z_t, const std::vector<int>& t, const Tensor& source, const std::vector<int>& codes,
                     const std::vector<bool>& drop_image) const;
  Tensor raw_target(const Tensor& z_t, const Tensor& x0, const std::vector<int>& t) const;

  nets::Denoiser& net() { return net_; }
  const nets::Denoiser& net() const { return net_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  Editor clone() const { return Editor(net_.clone(), schedule_); }

 private:
  struct Precond {
    double c_skip, c_out, c_in, c_noise;
  };
  Precond precond(int t) const;
  ag::Var forward_raw(const ag::Var& z_t, const std::vector<int>& t, const Tensor& cond_image,
                      const std::vector<int>& codes) const;

  nets::Denoiser net_;
  NoiseSchedule schedule_ = NoiseSchedule::edm();
};

/// Editor outputs for one clip. `images` keeps the graph to the editor
/// parameters through the tracked step only.
struct EditBatch {
  ag::Var images;  // [V, H, W, 3], image range, unclamped
  Tensor source;   // [V, H, W, 3]
  int code = 0;
  int grad_step = 0;
  Tensor z_T;
};

/// Initial latent z_T = sigma_T * noise for `views` views.
Tensor initial_latent(const Editor& editor, int64_t views, int64_t height, int64_t width, Rng& rng);

/// Samples t in [refl_lo, refl_hi], then runs refl_sample_at.
EditBatch refl_sample(const Editor& editor, const Tensor& source, int code, const SamplerConfig& cfg, Rng& rng);
/// Steps T..t+1 without gradient tracking, one tracked step at t, then the
/// x0 prediction decoded to images. t = 1 is full sampling.
EditBatch refl_sample_at(const Editor& editor, const Tensor& source, int code, const SamplerConfig& cfg,
                         const Tensor& z_T, int t);
/// Full T-step edit with gradients tracked through every step; unclamped.
ag::Var sample_tracked(const Editor& editor, const Tensor& source, int code, const SamplerConfig& cfg,
                       const Tensor& z_T);
/// Full T-step edit of a batch of views, clamped for export.
Tensor sample(const Editor& editor, const Tensor& source, int code, const SamplerConfig& cfg, Rng& rng);
/// Full T-step edit of a single reference view [H, W, 3], clamped for export.
Tensor edit_reference(const Editor& editor, const Tensor& source_ref, int code, const SamplerConfig& cfg, Rng& rng);

struct EditorPretrainConfig {
  int steps = 6000;
  double lr = 2e-3;
  int batch = 8;
  int views = 9;
  int height = 16;
  int width = 16;
  double cond_dropout = 0.1;
  uint64_t seed = 0;
};

/// Paired (source render, edited render, code) triples of the given worlds.
struct EditPairs {
  Tensor source;  // [P, H, W, 3]
  Tensor target;  // [P, H, W, 3]
  std::vector<int> codes;
  int size() const { return static_cast<int>(codes.size()); }
};
EditPairs make_edit_pairs(const std::vector<worldgen::Scene>& worlds, int views, int height, int width);

/// Trains a fresh editor on every registered edit code and variant of the
/// given worlds. Throws std::runtime_error on a non-finite loss.
Editor pretrain_editor(const std::vector<worldgen::Scene>& worlds, const EditorPretrainConfig& cfg,
                       nvs::TrainLog* log = nullptr);

}  // namespace disco3d::editor
