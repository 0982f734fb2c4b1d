#pragma once

// Explicit Gaussian-splat scenes: exact per-pixel rasterizer with an analytic
// backward pass, random-feature perceptual loss, initial fitting from posed
// views and the reconstruction update from edited views.

#include <optional>
#include <string>
#include <vector>

#include "disco3d/worldgen.hpp"

namespace disco3d::splat {

inline constexpr double kMaxAlpha = 0.99;
inline constexpr double kDilation = 0.3;
/// Exponent below which a Gaussian's contribution to a pixel is dropped.
inline constexpr double kPowerCutoff = -23.0;

struct GaussianCloud {
  Tensor positions;    // [M, 3]
  Tensor log_scales;   // [M, 3]
  Tensor rotations;    // [M, 4] unit quaternions (w, x, y, z)
  Tensor opacity_logits;  // [M]
  Tensor colors;       // [M, 3] in [0, 1]
  std::vector<uint8_t> frozen;  // [M]

  static GaussianCloud empty();
  /// M Gaussians with zero positions, unit scales, identity rotations.
  static GaussianCloud zeros(int64_t m);

  int64_t size() const { return positions.ndim() ? positions.dim(0) : 0; }
  double opacity(int64_t i) const;
  void normalize_rotations();
  /// Throws std::invalid_argument on inconsistent attribute shapes.
  void validate() const;
};

/// Gradient of a scalar loss with respect to every attribute.
struct CloudGrad {
  Tensor positions, log_scales, rotations, opacity_logits, colors;

  static CloudGrad zeros_like(const GaussianCloud& c);
  void add(const CloudGrad& other);
};

struct Camera {
  worldgen::Pose pose;
  worldgen::Intrinsics intrinsics;
  int height = 0;
  int width = 0;
};

Camera camera_of(const worldgen::ViewSet& views, int v);

struct RenderOutput {
  Tensor image;  // [H, W, 3]
  Tensor alpha;  // [H, W]
};

/// Depth-sorted front-to-back compositing of projected Gaussians over the
/// background: C = sum_i c_i a_i T_i + T_final bg, a_i = min(0.99, o_i g_i).
RenderOutput rasterize(const GaussianCloud& cloud, const Camera& cam, const worldgen::Vec3& background);

/// Analytic gradient given dL/dimage and optionally dL/dalpha.
CloudGrad rasterize_backward(const GaussianCloud& cloud, const Camera& cam, const worldgen::Vec3& background,
                             const Tensor& grad_image, const Tensor* grad_alpha = nullptr);

/// Mean squared distance over the raw image and two layers of fixed random
/// ReLU convolution features. Writes dL/da when `grad_a` is given.
double perceptual_loss(const Tensor& a, const Tensor& b, Tensor* grad_a = nullptr);

struct ReconLoss {
  double l1_weight = 1.0;
  double perceptual_weight = 0.2;

  void validate() const;
  /// l1 * mean|render - target| + perceptual * perceptual_loss; writes dL/drender.
  double operator()(const Tensor& render, const Tensor& target, Tensor* grad) const;
};

struct OptimConfig {
  int iters = 2000;
  double lr_position = 0.01;
  double lr_scale = 0.02;
  double lr_rotation = 0.02;
  double lr_opacity = 0.05;
  double lr_color = 0.02;
  uint64_t seed = 0;
};

/// Back-projects M ground-truth surface pixels into Gaussians, then optimizes
/// every attribute for `opt.iters` single-view steps. Logs a warning when the
/// final training PSNR stays below 25 dB.
GaussianCloud fit_initial(const worldgen::ViewSet& views, int64_t m, const OptimConfig& opt,
                          const ReconLoss& loss = {});

/// Gaussians whose projected 2-sigma ellipse touches a mask pixel in any view.
std::vector<uint8_t> lift_mask(const GaussianCloud& cloud, const worldgen::ViewSet& geometry, const Tensor& mask);

/// Refits unfrozen attributes to edited views posed like `geometry`. With a
/// mask [N, H, W], Gaussians outside it in every view are frozen first.
GaussianCloud update_with_edits(const GaussianCloud& cloud, const worldgen::ViewSet& geometry, const Tensor& edited,
                                const ReconLoss& loss, const std::optional<Tensor>& mask, const OptimConfig& opt);

/// Renders every view of `geometry` into [N, H, W, 3].
Tensor render_all(const GaussianCloud& cloud, const worldgen::ViewSet& geometry);

/// "DC3G", u32 version, u32 M, then float64 positions, log_scales,
/// rotations, opacity_logits, colors and u8 frozen flags.
void save_cloud(const std::string& path, const GaussianCloud& cloud);
GaussianCloud load_cloud(const std::string& path);

}  // namespace disco3d::splat
