#pragma once

// Small denoiser building blocks shared by the multi-view teacher and the
// per-view editor, plus low-rank adapters on named weight matrices.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "disco3d/core/params.hpp"
#include "disco3d/core/rng.hpp"

namespace disco3d::nets {

struct DenoiserConfig {
  int channels = 16;
  int depth = 1;
  int heads = 2;
  int latent_downscale = 2;
  int image_channels = 3;
  /// Channels concatenated to the noisy input (render map + validity, or source image).
  int cond_image_channels = 4;
  int cond_dim = 16;
  int time_frequencies = 8;
  /// Edit-code vocabulary; zero disables the code embedding table.
  int num_codes = 0;
  /// Cross-view attention over the clip axis.
  bool temporal = true;
  /// Pooled reference-image embedding as the cross-attention token.
  bool ref_encoder = true;
  int camera_tag_dim = 6;

  /// Throws std::invalid_argument when a field is non-positive or the
  /// downscale does not divide the image size.
  void validate(int64_t height, int64_t width) const;
};

enum class LayerFilter { Temporal, SelfAttention };

/// Everything a denoiser pass consumes besides the noisy latent.
struct DenoiserInputs {
  /// [V, H, W, cond_image_channels]; zeros when the image condition is dropped.
  Tensor cond_image;
  /// Per-view scalar time input (already normalised by the caller).
  std::vector<double> time;
  /// Reference image [H, W, 3] for the pooled cross-attention token (teacher).
  std::optional<Tensor> ref_image;
  /// Per-view edit codes, -1 for the null token (editor).
  std::vector<int> codes;
  /// [V, camera_tag_dim]; required when the network is temporal.
  Tensor camera_tags;
};

/// Low-rank delta on a linear layer: effective weight W0 + scale * B * A with
/// W0 [d, k], B [d, r], A [r, k].
struct LoRAAdapter {
  std::string target;
  int64_t d = 0;
  int64_t k = 0;
  int rank = 0;
  double scale = 1.0;

  int64_t parameter_count() const { return static_cast<int64_t>(rank) * (d + k); }
};

/// Conv encoder -> per-view self-attention -> cross-attention to a
/// conditioning token -> optional cross-view attention -> conv decoder.
/// Images are channels-last [V, H, W, C]; the network output has the same
/// shape as the noisy latent.
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(DenoiserConfig cfg, Rng& rng);

  ag::Var forward(const ag::Var& z_t, const DenoiserInputs& in) const;

  /// Wraps every linear layer selected by the filter with a zero-initialised
  /// adapter of the given rank, freezes all other parameters and returns the
  /// adapters created. Throws when nothing matches or r >= min(d, k).
  std::vector<LoRAAdapter> attach_lora(LayerFilter filter, int rank, Rng& rng);
  bool has_lora() const { return !adapters_.empty(); }
  const std::map<std::string, LoRAAdapter>& adapters() const { return adapters_; }
  /// Names of the adapter parameters (".lora_A" / ".lora_B").
  std::vector<std::string> lora_param_names() const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const DenoiserConfig& config() const { return cfg_; }

  /// Deep copy with independent parameter storage.
  Denoiser clone() const;

  /// Zeroes the cross-view attention residual (diagnostic switch).
  void set_temporal_enabled(bool on) { temporal_enabled_ = on; }

  /// Names of linear layers ("blocks.0.self_attn.q") matching a filter.
  std::vector<std::string> layers_matching(LayerFilter filter) const;

 private:
  ag::Var linear(const std::string& prefix, const ag::Var& x, bool bias = true) const;
  ag::Var conv3x3(const std::string& prefix, const ag::Var& x) const;
  void add_linear(const std::string& prefix, int64_t in, int64_t out, Rng& rng, bool bias = true,
                  double gain = 1.0);
  ag::Var time_embedding(const std::vector<double>& time) const;
  ag::Var cond_tokens(const DenoiserInputs& in, int64_t views) const;

  DenoiserConfig cfg_;
  ParamStore params_;
  std::map<std::string, LoRAAdapter> adapters_;
  bool temporal_enabled_ = true;
};

/// Sinusoidal features [V, 2F] of scalar time inputs.
Tensor time_features(const std::vector<double>& time, int frequencies);

/// Affine map between images in [0, 1] and the denoisers' latent range [-1, 1].
Tensor to_latent(const Tensor& image);
Tensor to_image(const Tensor& latent);
ag::Var to_image(const ag::Var& latent);

}  // namespace disco3d::nets
