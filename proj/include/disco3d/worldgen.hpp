#pragma once

// Procedural scenes, camera trajectories, ground-truth multi-view renders,
// geometry-warped render maps, edit operators and region masks.

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "disco3d/core/tensor.hpp"

namespace disco3d::worldgen {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

enum class PrimitiveKind { Sphere, Box, Plane };
std::string to_string(PrimitiveKind k);
PrimitiveKind primitive_kind_from_string(const std::string& s);

struct Material {
  Vec3 color{0.5, 0.5, 0.5};
  Vec3 color2{1.0, 1.0, 1.0};
  /// Smooth sinusoidal stripes along world y; 0 means a solid colour.
  double stripe_frequency = 0.0;
};

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::Sphere;
  Vec3 center = Vec3::Zero();
  /// Sphere: radius in x. Box: half extents. Plane: half extents in x and z (horizontal at center.y).
  Vec3 size{0.5, 0.5, 0.5};
  /// Box rotation about world +y, radians.
  double yaw = 0.0;
  Material material;
  /// Non-zero for primitives inserted by an edit operator.
  int tag = 0;
};

struct Scene {
  std::vector<Primitive> primitives;
  Vec3 background{0.2, 0.2, 0.2};
  uint64_t seed = 0;
};

enum class Complexity { Small, Medium };

/// Deterministic in the seed. Small scenes hold exactly one object, medium
/// scenes two or three objects plus a ground plane. Objects come first so
/// primitive 0 is always an object (the default edit target).
Scene generate_scene(uint64_t seed, Complexity complexity);

/// Surface colour at a world point, before shading.
Vec3 albedo(const Primitive& p, const Vec3& x);

/// Pinhole intrinsics in units of the image size: pixel fx = fx * width, cx = cx * width.
struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.5;
  double cy = 0.5;
};

/// World-to-camera extrinsics, x_cam = R x_world + t. Camera looks along +z,
/// x right, y down.
struct Pose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Vec3 center() const { return -R.transpose() * t; }
};

Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3(0, 1, 0));

struct CameraTrajectory {
  std::vector<Pose> poses;
  Intrinsics intrinsics;

  int size() const { return static_cast<int>(poses.size()); }
  /// Throws unless N >= 2 and every rotation is orthonormal with det +1.
  void validate() const;
};

/// Arc of n poses around a target; pose 0 is the reference and consecutive
/// indices are neighbouring viewpoints.
CameraTrajectory orbit_trajectory(int n, const Vec3& target, double radius, double elevation_deg = 20.0,
                                  double arc_deg = 60.0, double start_azimuth_deg = 0.0, double fov_deg = 50.0);
/// The trajectory a scene is rendered with by default; the offset rotates the
/// arc's starting azimuth.
CameraTrajectory default_trajectory(const Scene& scene, int n, double azimuth_offset_deg = 0.0);

/// Reference view 0 first in every clip, remaining views split by index parity.
std::vector<std::vector<int>> interleaved_clips(int n, int clip_length);

struct ViewSet {
  Tensor images;  // [N, H, W, 3] in [0, 1]
  Tensor depths;  // [N, H, W], camera z; 0 where no surface is hit
  std::vector<int32_t> ids;  // [N * H * W] primitive index, -1 for background
  CameraTrajectory traj;
  int ref_index = 0;
  std::vector<std::vector<int>> clips;
  Vec3 background = Vec3::Zero();

  int views() const { return static_cast<int>(images.dim(0)); }
  int height() const { return static_cast<int>(images.dim(1)); }
  int width() const { return static_cast<int>(images.dim(2)); }
  /// Copy of one view as [H, W, 3].
  Tensor image(int v) const;
  /// Gathers views into [len, H, W, 3].
  Tensor gather(const std::vector<int>& idx) const;
};

/// Ray-traced Lambertian renders with depth and primitive ids. Throws
/// std::invalid_argument for tiny resolutions or an invalid trajectory and
/// std::runtime_error when every primitive lies behind some camera.
ViewSet render_views(const Scene& scene, const CameraTrajectory& traj, int height, int width, int clip_length = 25);

struct RenderMap {
  Tensor warped;    // [N, H, W, 3]
  Tensor validity;  // [N, H, W] of 0/1
};

/// Forward-warps the reference image (its depth and pose from `views`) into
/// every view with a z-buffer. Pixels not hit keep the background colour.
RenderMap make_render_maps(const ViewSet& views);
/// Same warp for an arbitrary image standing in for the reference view.
RenderMap make_render_maps(const Tensor& ref_image, const ViewSet& geometry);

/// Projects a camera-space point to continuous pixel coordinates.
Eigen::Vector2d project(const Intrinsics& K, int height, int width, const Vec3& x_cam);
/// Back-projects pixel centre (x + 0.5, y + 0.5) at the given depth to world space.
Vec3 unproject(const Intrinsics& K, const Pose& pose, int height, int width, int x, int y, double depth);

enum class EditCode : int { Identity = 0, Red = 1, Green = 2, AddPrimitive = 3, Stripes = 4 };
inline constexpr int kNumEditCodes = 5;

struct EditInfo {
  std::string name;
  bool geometry = false;
  int variants = 1;
  /// Declared behaviour under repeated application.
  bool idempotent = true;
};

/// Metadata for a registered edit code; throws std::invalid_argument otherwise.
const EditInfo& edit_info(int code);

struct EditOracle {
  int code = 0;
  /// Primitive the edit acts on.
  int target = 0;
  /// Selects one of the operator's ground-truth variants (mod variants).
  uint64_t variant = 0;
};

Scene apply_edit(const Scene& scene, const EditOracle& oracle);
/// Indices (in the edited scene) of the primitives an edit changes.
std::vector<int> edit_targets(const Scene& edited, const EditOracle& oracle);
/// [N, H, W] 0/1 mask of pixels whose first visible surface is an edited primitive.
Tensor gt_mask(const Scene& scene, const EditOracle& oracle, const CameraTrajectory& traj, int height, int width);

/// Camera-space pose encoding of view v relative to the reference pose:
/// relative translation followed by the axis-angle of the relative rotation.
std::array<double, 6> camera_tag(const CameraTrajectory& traj, int view, int ref = 0);

}  // namespace disco3d::worldgen
