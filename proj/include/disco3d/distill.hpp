#pragma once

// Consistency distillation from the fine-tuned multi-view teacher into the
// per-view editor: alternating updates of an edited-score replica (phi) and
// the editor's self-attention adapters (theta).

#include <optional>
#include <string>
#include <vector>

#include "disco3d/editor.hpp"
#include "disco3d/nvs.hpp"

namespace disco3d::distill {

enum class OmegaKind { Constant, SigmaSq };
std::string to_string(OmegaKind k);
/// Accepts "const" and "sigma_sq".
OmegaKind omega_kind_from_string(const std::string& s);

/// Weight of the score difference at step t: 1, or sigma_t^2 / alpha_t.
double omega(OmegaKind kind, const NoiseSchedule& schedule, int t);

/// How the score-difference surrogate is reduced over latent elements.
enum class Reduction { Sum, Mean };
std::string to_string(Reduction r);
Reduction reduction_from_string(const std::string& s);

struct DistillConfig {
  double alpha = 1e2;
  double lr = 4e-4;
  int iters = 100;
  OmegaKind omega = OmegaKind::SigmaSq;
  Reduction reduction = Reduction::Mean;
  double t_lo = 0.02;
  double t_hi = 0.98;
  int phi_steps = 1;
  double cfg_teacher = 3.0;
  int rank = editor::kDefaultEditorRank;
  uint64_t seed = 0;
  editor::SamplerConfig sampler;

  /// Throws std::invalid_argument on alpha < 0, iters < 1 or a bad t range.
  void validate() const;
};

struct IterLog {
  int iter = 0;
  double l_distill = 0.0;
  double l_reg = 0.0;
  double l_total = 0.0;
  double consistency = 0.0;
  double l_phi = 0.0;
  int t_refl = 0;
};

/// Everything distillation mutates, plus the frozen teacher.
struct DistillState {
  editor::Editor editor;
  nvs::Teacher teacher;
  nvs::Teacher phi;
  Tensor ref_noise;   // [1, H, W, 3] initial latent of the cached reference edit
  Tensor cached_ref;  // [1, H, W, 3] unclamped reference edit at theta^(0)
  std::vector<nvs::ConditionSignal> cond_e;  // one per clip, built from the cached reference edit
  int code = 0;
  int iteration = 0;
  std::vector<IterLog> history;
  std::optional<Adam> theta_opt;
  std::optional<Adam> phi_opt;
};

/// Attaches self-attention adapters to a copy of the editor, duplicates the
/// teacher into phi and caches the reference edit with a seeded noise draw.
DistillState init_state(const editor::Editor& editor, const nvs::Teacher& teacher, const worldgen::ViewSet& source,
                        int code, const DistillConfig& cfg);

/// Full T-step re-edit of the reference view from the cached noise, with the
/// gradient tracked through every step. Shape [1, H, W, 3], image range.
ag::Var reedit_reference(const DistillState& state, const worldgen::ViewSet& source, const DistillConfig& cfg);

/// Mean squared pixel difference; throws on a shape mismatch.
ag::Var reg_loss(const ag::Var& current, const Tensor& cached);

/// Surrogate whose theta-gradient is omega (eps_teacher - eps_phi) dz/dtheta,
/// summed over the clip. `images` are editor outputs in image range.
ag::Var distill_surrogate(const DistillState& state, const ag::Var& images, const nvs::ConditionSignal& cond_e, int t,
                          const Tensor& eps, const DistillConfig& cfg);

/// Edited-clip batch detached from theta, used for the phi update.
struct PhiBatch {
  Tensor images;
  const nvs::ConditionSignal* cond = nullptr;
};

/// phi_steps gradient steps of the noise-prediction loss of phi on the
/// batches with t drawn over the full schedule. Returns the mean loss.
double phi_update(DistillState& state, const std::vector<PhiBatch>& batches, const DistillConfig& cfg, Rng& rng);

/// One iteration: truncated-gradient sampling, distillation and
/// regularization gradients applied to theta, then the phi update.
/// Throws std::runtime_error on a non-finite loss.
IterLog train_step(DistillState& state, const worldgen::ViewSet& source, const DistillConfig& cfg, Rng& rng);

/// Runs cfg.iters iterations from a fresh rng stream derived from cfg.seed.
void train(DistillState& state, const worldgen::ViewSet& source, const DistillConfig& cfg);

/// Writes iter, L_distill_surrogate, L_reg, L_total, consistency_metric.
void write_log_csv(const std::string& path, const std::vector<IterLog>& history);

}  // namespace disco3d::distill
