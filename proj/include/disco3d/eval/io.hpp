#pragma once

// On-disk formats: PNG frames, DC3D depth maps, scene JSON, view-set
// manifests and image grids.

#include <string>
#include <vector>

#include "disco3d/worldgen.hpp"

namespace disco3d::eval {

/// 8-bit RGB; values are clamped to [0, 1] and rounded.
void write_png(const std::string& path, const Tensor& image);
/// [H, W, 3] in [0, 1]. Grey and alpha inputs are converted to RGB.
Tensor read_png(const std::string& path);

/// "DC3D", u32 version, u32 H, u32 W, then H*W float32 values.
void write_depth(const std::string& path, const Tensor& depth);
Tensor read_depth(const std::string& path);

/// Scene JSON: version, seed, primitives[], background, poses[], intrinsics.
void write_scene_json(const std::string& path, const worldgen::Scene& scene, const worldgen::CameraTrajectory& traj);
struct SceneFile {
  worldgen::Scene scene;
  worldgen::CameraTrajectory traj;
};
/// Throws std::invalid_argument on a missing version, unknown keys or bad values.
SceneFile read_scene_json(const std::string& path);

/// frames/NNN.png, depth/NNN.dc3d and manifest.json under `dir`.
void write_viewset(const std::string& dir, const worldgen::ViewSet& views);

/// Rows of [N, H, W, 3] image stacks tiled into one PNG with 1-pixel gutters.
void write_grid(const std::string& path, const std::vector<Tensor>& rows);

void write_text(const std::string& path, const std::string& content);
std::string read_text(const std::string& path);

}  // namespace disco3d::eval
