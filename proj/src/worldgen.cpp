#include "disco3d/worldgen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "disco3d/core/rng.hpp"

namespace disco3d::worldgen {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kPi = 3.14159265358979323846;

const Vec3 kLightDir = Vec3(0.35, 1.0, -0.45).normalized();

struct Hit {
  double t = kInf;
  int id = -1;
  Vec3 normal = Vec3::Zero();
};

Vec3 hsv(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

Mat3 yaw_matrix(double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  Mat3 m;
  m << c, 0, s, 0, 1, 0, -s, 0, c;
  return m;
}

bool intersect(const Primitive& p, const Vec3& o, const Vec3& d, double& t_out, Vec3& n_out) {
  switch (p.kind) {
    case PrimitiveKind::Sphere: {
      const double r = p.size.x();
      const Vec3 oc = o - p.center;
      const double a = d.dot(d), b = oc.dot(d), c = oc.dot(oc) - r * r;
      const double disc = b * b - a * c;
      if (disc < 0) return false;
      const double sq = std::sqrt(disc);
      double t = (-b - sq) / a;
      if (t <= 1e-9) t = (-b + sq) / a;
      if (t <= 1e-9) return false;
      t_out = t;
      n_out = (o + t * d - p.center).normalized();
      return true;
    }
    case PrimitiveKind::Box: {
      const Mat3 rot = yaw_matrix(p.yaw);
      const Vec3 lo = rot.transpose() * (o - p.center);
      const Vec3 ld = rot.transpose() * d;
      double tmin = -kInf, tmax = kInf;
      int axis_min = -1, axis_max = -1;
      for (int k = 0; k < 3; ++k) {
        if (std::abs(ld[k]) < 1e-15) {
          if (lo[k] < -p.size[k] || lo[k] > p.size[k]) return false;
          continue;
        }
        double t1 = (-p.size[k] - lo[k]) / ld[k];
        double t2 = (p.size[k] - lo[k]) / ld[k];
        if (t1 > t2) std::swap(t1, t2);
        if (t1 > tmin) {
          tmin = t1;
          axis_min = k;
        }
        if (t2 < tmax) {
          tmax = t2;
          axis_max = k;
        }
      }
      if (tmax < tmin || tmax <= 1e-9) return false;
      double t = tmin;
      int axis = axis_min;
      if (t <= 1e-9) {
        t = tmax;
        axis = axis_max;
      }
      if (axis < 0) return false;
      Vec3 nl = Vec3::Zero();
      nl[axis] = (lo[axis] + t * ld[axis]) > 0 ? 1.0 : -1.0;
      t_out = t;
      n_out = rot * nl;
      return true;
    }
    case PrimitiveKind::Plane: {
      if (std::abs(d.y()) < 1e-15) return false;
      const double t = (p.center.y() - o.y()) / d.y();
      if (t <= 1e-9) return false;
      const Vec3 x = o + t * d;
      if (std::abs(x.x() - p.center.x()) > p.size.x() || std::abs(x.z() - p.center.z()) > p.size.z()) return false;
      t_out = t;
      n_out = Vec3(0, 1, 0);
      return true;
    }
  }
  return false;
}

Hit trace(const Scene& scene, const Vec3& o, const Vec3& d) {
  Hit best;
  for (size_t i = 0; i < scene.primitives.size(); ++i) {
    double t;
    Vec3 n;
    if (intersect(scene.primitives[i], o, d, t, n) && t < best.t) {
      best.t = t;
      best.id = static_cast<int>(i);
      best.normal = n;
    }
  }
  return best;
}

Vec3 shade(const Primitive& p, const Vec3& x, const Vec3& n) {
  const double lambert = std::max(0.0, n.dot(kLightDir));
  return albedo(p, x) * (0.35 + 0.65 * lambert);
}

Primitive make_object(Rng& rng, PrimitiveKind kind, const Vec3& base, double scale) {
  Primitive p;
  p.kind = kind;
  if (kind == PrimitiveKind::Sphere) {
    const double r = scale * rng.uniform(0.45, 0.7);
    p.size = Vec3(r, r, r);
    p.center = base + Vec3(0, r, 0);
  } else {
    p.size = scale * Vec3(rng.uniform(0.35, 0.55), rng.uniform(0.35, 0.6), rng.uniform(0.35, 0.55));
    p.center = base + Vec3(0, p.size.y(), 0);
    p.yaw = rng.uniform(-0.6, 0.6);
  }
  return p;
}

}  // namespace

std::string to_string(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::Sphere: return "sphere";
    case PrimitiveKind::Box: return "box";
    case PrimitiveKind::Plane: return "plane";
  }
  return "sphere";
}

PrimitiveKind primitive_kind_from_string(const std::string& s) {
  if (s == "sphere") return PrimitiveKind::Sphere;
  if (s == "box") return PrimitiveKind::Box;
  if (s == "plane") return PrimitiveKind::Plane;
  throw std::invalid_argument("unknown primitive kind: " + s);
}

Vec3 albedo(const Primitive& p, const Vec3& x) {
  if (p.material.stripe_frequency <= 0.0) return p.material.color;
  const double w = 0.5 + 0.5 * std::sin(p.material.stripe_frequency * (x.y() - p.center.y()));
  return (1.0 - w) * p.material.color + w * p.material.color2;
}

Scene generate_scene(uint64_t seed, Complexity complexity) {
  Rng rng(seed);
  Scene s;
  s.seed = seed;
  s.background = hsv(rng.uniform(), rng.uniform(0.05, 0.25), rng.uniform(0.15, 0.35));
  // The designated target object avoids red and green hues so both recolour edits are visible.
  const double target_hues[] = {0.58, 0.66, 0.75, 0.14, 0.5};
  auto target_color = [&] {
    const double h = target_hues[rng.uniform_int(0, 4)] + rng.uniform(-0.03, 0.03);
    return hsv(h, rng.uniform(0.55, 0.85), rng.uniform(0.7, 0.95));
  };
  if (complexity == Complexity::Small) {
    const auto kind = rng.bernoulli(0.7) ? PrimitiveKind::Sphere : PrimitiveKind::Box;
    Primitive p = make_object(rng, kind, Vec3(0, -0.55, 0), 1.4);
    p.material.color = target_color();
    s.primitives.push_back(p);
    return s;
  }
  const int objects = static_cast<int>(rng.uniform_int(2, 3));
  const double ring = rng.uniform(0.0, 2 * kPi);
  for (int i = 0; i < objects; ++i) {
    const double ang = ring + 2 * kPi * i / objects + rng.uniform(-0.3, 0.3);
    const double rad = i == 0 ? rng.uniform(0.0, 0.35) : rng.uniform(1.05, 1.3);
    const Vec3 base(rad * std::cos(ang), 0.0, rad * std::sin(ang));
    const auto kind = rng.bernoulli(0.55) ? PrimitiveKind::Sphere : PrimitiveKind::Box;
    Primitive p = make_object(rng, kind, base, i == 0 ? 1.15 : 0.8);
    p.material.color = i == 0 ? target_color() : hsv(rng.uniform(), rng.uniform(0.3, 0.8), rng.uniform(0.5, 0.95));
    s.primitives.push_back(p);
  }
  Primitive ground;
  ground.kind = PrimitiveKind::Plane;
  ground.center = Vec3(0, 0, 0);
  ground.size = Vec3(3.0, 0.0, 3.0);
  ground.material.color = hsv(rng.uniform(), rng.uniform(0.05, 0.3), rng.uniform(0.45, 0.7));
  s.primitives.push_back(ground);
  return s;
}

Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 fwd = (target - eye).normalized();
  Vec3 right = fwd.cross(up);
  if (right.norm() < 1e-12) right = fwd.cross(Vec3(1, 0, 0));
  right.normalize();
  const Vec3 down = fwd.cross(right);
  Pose p;
  p.R.row(0) = right.transpose();
  p.R.row(1) = down.transpose();
  p.R.row(2) = fwd.transpose();
  p.t = -p.R * eye;
  return p;
}

void CameraTrajectory::validate() const {
  if (poses.size() < 2) throw std::invalid_argument("CameraTrajectory: need at least 2 poses");
  for (const auto& p : poses) {
    if (!((p.R * p.R.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() <= 1e-6) ||
        std::abs(p.R.determinant() - 1.0) > 1e-6 || !p.t.allFinite()) {
      throw std::invalid_argument("CameraTrajectory: rotation is not orthonormal with det +1");
    }
  }
  if (!(intrinsics.fx > 0 && intrinsics.fy > 0)) throw std::invalid_argument("CameraTrajectory: bad intrinsics");
}

CameraTrajectory orbit_trajectory(int n, const Vec3& target, double radius, double elevation_deg, double arc_deg,
                                  double start_azimuth_deg, double fov_deg) {
  if (n < 2) throw std::invalid_argument("orbit_trajectory: n must be >= 2");
  CameraTrajectory traj;
  const double f = 0.5 / std::tan(0.5 * fov_deg * kPi / 180.0);
  traj.intrinsics = Intrinsics{f, f, 0.5, 0.5};
  const double el = elevation_deg * kPi / 180.0;
  for (int i = 0; i < n; ++i) {
    const double az = (start_azimuth_deg + arc_deg * i / static_cast<double>(n - 1)) * kPi / 180.0;
    const Vec3 eye = target + radius * Vec3(std::cos(el) * std::sin(az), std::sin(el), -std::cos(el) * std::cos(az));
    traj.poses.push_back(look_at(eye, target));
  }
  return traj;
}

CameraTrajectory default_trajectory(const Scene& scene, int n, double azimuth_offset_deg) {
  Vec3 target = Vec3::Zero();
  int count = 0;
  for (const auto& p : scene.primitives) {
    if (p.kind == PrimitiveKind::Plane) continue;
    target += p.center;
    ++count;
  }
  if (count) target /= count;
  const bool small = count == 1 && scene.primitives.size() == 1;
  return orbit_trajectory(n, target, small ? 3.2 : 4.6, small ? 10.0 : 24.0, 60.0,
                          static_cast<double>(scene.seed % 7) * 10.0 - 30.0 + azimuth_offset_deg);
}

std::vector<std::vector<int>> interleaved_clips(int n, int clip_length) {
  if (n < 1 || clip_length < 2) throw std::invalid_argument("interleaved_clips: need n >= 1 and clip_length >= 2");
  const int rest = n - 1;
  const int per_clip = clip_length - 1;
  const int nclips = std::max(1, (rest + per_clip - 1) / per_clip);
  std::vector<std::vector<int>> clips(static_cast<size_t>(nclips), std::vector<int>{0});
  for (int v = 1; v < n; ++v) clips[static_cast<size_t>((v - 1) % nclips)].push_back(v);
  return clips;
}

Tensor ViewSet::image(int v) const {
  const int64_t H = images.dim(1), W = images.dim(2);
  Tensor out({H, W, 3});
  std::copy_n(images.data() + static_cast<int64_t>(v) * H * W * 3, H * W * 3, out.data());
  return out;
}

Tensor ViewSet::gather(const std::vector<int>& idx) const {
  const int64_t H = images.dim(1), W = images.dim(2);
  Tensor out({static_cast<int64_t>(idx.size()), H, W, 3});
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(images.data() + static_cast<int64_t>(idx[i]) * H * W * 3, H * W * 3,
                out.data() + static_cast<int64_t>(i) * H * W * 3);
  return out;
}

Eigen::Vector2d project(const Intrinsics& K, int height, int width, const Vec3& x_cam) {
  return {K.fx * width * x_cam.x() / x_cam.z() + K.cx * width, K.fy * height * x_cam.y() / x_cam.z() + K.cy * height};
}

Vec3 unproject(const Intrinsics& K, const Pose& pose, int height, int width, int x, int y, double depth) {
  const double u = x + 0.5, v = y + 0.5;
  const Vec3 cam((u - K.cx * width) / (K.fx * width) * depth, (v - K.cy * height) / (K.fy * height) * depth, depth);
  return pose.R.transpose() * (cam - pose.t);
}

ViewSet render_views(const Scene& scene, const CameraTrajectory& traj, int height, int width, int clip_length) {
  if (height < 16 || width < 16) throw std::invalid_argument("render_views: resolution must be at least 16x16");
  if (scene.primitives.empty()) throw std::invalid_argument("render_views: scene has no primitives");
  traj.validate();
  for (const auto& pose : traj.poses) {
    bool any_front = false;
    for (const auto& p : scene.primitives) {
      const double extent = p.kind == PrimitiveKind::Plane ? p.size.norm() : p.size.norm();
      if ((pose.R * p.center + pose.t).z() + extent > 1e-6) any_front = true;
    }
    if (!any_front) throw std::runtime_error("render_views: every primitive is behind the camera");
  }
  const int N = traj.size();
  ViewSet vs;
  vs.images = Tensor({N, height, width, 3});
  vs.depths = Tensor({N, height, width});
  vs.ids.assign(static_cast<size_t>(N) * height * width, -1);
  vs.traj = traj;
  vs.ref_index = 0;
  vs.clips = interleaved_clips(N, clip_length);
  vs.background = scene.background;
  const auto& K = traj.intrinsics;
  for (int v = 0; v < N; ++v) {
    const Pose& pose = traj.poses[static_cast<size_t>(v)];
    const Vec3 origin = pose.center();
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const Vec3 dcam((x + 0.5 - K.cx * width) / (K.fx * width), (y + 0.5 - K.cy * height) / (K.fy * height), 1.0);
        const Vec3 dir = pose.R.transpose() * dcam;
        const Hit hit = trace(scene, origin, dir);
        const int64_t pix = (static_cast<int64_t>(v) * height + y) * width + x;
        Vec3 c = scene.background;
        if (hit.id >= 0) {
          const Primitive& p = scene.primitives[static_cast<size_t>(hit.id)];
          c = shade(p, origin + hit.t * dir, hit.normal);
          // dir has unit camera z, so the ray parameter is the camera depth.
          vs.depths[pix] = hit.t;
          vs.ids[static_cast<size_t>(pix)] = hit.id;
        }
        for (int ch = 0; ch < 3; ++ch) vs.images[pix * 3 + ch] = std::clamp(c[ch], 0.0, 1.0);
      }
  }
  return vs;
}

RenderMap make_render_maps(const ViewSet& views) { return make_render_maps(views.image(views.ref_index), views); }

RenderMap make_render_maps(const Tensor& ref_image, const ViewSet& geometry) {
  const int N = geometry.views(), H = geometry.height(), W = geometry.width();
  if (ref_image.shape() != std::vector<int64_t>{H, W, 3}) {
    throw std::invalid_argument("make_render_maps: reference image must be [H, W, 3]");
  }
  const int ref = geometry.ref_index;
  const auto& K = geometry.traj.intrinsics;
  const Pose& ref_pose = geometry.traj.poses[static_cast<size_t>(ref)];
  RenderMap rm;
  rm.warped = Tensor({N, H, W, 3});
  rm.validity = Tensor({N, H, W});
  for (int64_t i = 0; i < rm.warped.numel(); ++i) rm.warped[i] = geometry.background[i % 3];
  std::vector<double> zbuf(static_cast<size_t>(H) * W);
  for (int v = 0; v < N; ++v) {
    std::fill(zbuf.begin(), zbuf.end(), kInf);
    const Pose& pose = geometry.traj.poses[static_cast<size_t>(v)];
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double depth = geometry.depths[(static_cast<int64_t>(ref) * H + y) * W + x];
        if (depth <= 0.0) continue;
        const Vec3 X = unproject(K, ref_pose, H, W, x, y, depth);
        const Vec3 cam = pose.R * X + pose.t;
        if (cam.z() <= 1e-6) continue;
        const Eigen::Vector2d uv = project(K, H, W, cam);
        const int px = static_cast<int>(std::floor(uv.x())), py = static_cast<int>(std::floor(uv.y()));
        if (px < 0 || px >= W || py < 0 || py >= H) continue;
        const size_t zi = static_cast<size_t>(py) * W + px;
        if (cam.z() >= zbuf[zi]) continue;
        zbuf[zi] = cam.z();
        const int64_t dst = (static_cast<int64_t>(v) * H + py) * W + px;
        for (int c = 0; c < 3; ++c) rm.warped[dst * 3 + c] = ref_image[(static_cast<int64_t>(y) * W + x) * 3 + c];
        rm.validity[dst] = 1.0;
      }
  }
  return rm;
}

const EditInfo& edit_info(int code) {
  static const EditInfo infos[kNumEditCodes] = {
      {"identity", false, 1, true},
      {"make the object red", false, 3, true},
      {"make the object green", false, 3, true},
      {"add a small ball", true, 1, true},
      {"paint stripes on the object", false, 1, true},
  };
  if (code < 0 || code >= kNumEditCodes) throw std::invalid_argument("unknown edit code " + std::to_string(code));
  return infos[code];
}

Scene apply_edit(const Scene& scene, const EditOracle& oracle) {
  const EditInfo& info = edit_info(oracle.code);
  Scene out = scene;
  if (oracle.code == static_cast<int>(EditCode::Identity)) return out;
  if (oracle.target < 0 || oracle.target >= static_cast<int>(scene.primitives.size())) {
    throw std::invalid_argument("apply_edit: target primitive out of range");
  }
  Primitive& target = out.primitives[static_cast<size_t>(oracle.target)];
  const int variant = static_cast<int>(oracle.variant % static_cast<uint64_t>(info.variants));
  switch (static_cast<EditCode>(oracle.code)) {
    case EditCode::Red: {
      static const Vec3 reds[] = {{0.92, 0.12, 0.10}, {0.95, 0.42, 0.12}, {0.85, 0.10, 0.38}};
      target.material.color = reds[variant];
      target.material.stripe_frequency = 0.0;
      break;
    }
    case EditCode::Green: {
      static const Vec3 greens[] = {{0.15, 0.85, 0.20}, {0.45, 0.90, 0.10}, {0.10, 0.75, 0.52}};
      target.material.color = greens[variant];
      target.material.stripe_frequency = 0.0;
      break;
    }
    case EditCode::Stripes:
      target.material.color2 = Vec3(0.95, 0.95, 0.92);
      target.material.stripe_frequency = 9.0;
      break;
    case EditCode::AddPrimitive: {
      for (const auto& p : out.primitives)
        if (p.tag == oracle.code) return out;
      Primitive ball;
      ball.kind = PrimitiveKind::Sphere;
      const double r = 0.28;
      const Vec3 side = target.kind == PrimitiveKind::Sphere ? Vec3(target.size.x() + r + 0.05, 0, 0)
                                                             : Vec3(target.size.norm() + r, 0, 0);
      ball.size = Vec3(r, r, r);
      ball.center = target.center + side + Vec3(0, r - target.size.y() * 0.5, -0.2);
      ball.material.color = Vec3(0.95, 0.9, 0.35);
      ball.tag = oracle.code;
      out.primitives.push_back(ball);
      break;
    }
    case EditCode::Identity: break;
  }
  return out;
}

std::vector<int> edit_targets(const Scene& edited, const EditOracle& oracle) {
  edit_info(oracle.code);
  if (oracle.code == static_cast<int>(EditCode::Identity)) return {};
  if (oracle.code == static_cast<int>(EditCode::AddPrimitive)) {
    std::vector<int> out;
    for (size_t i = 0; i < edited.primitives.size(); ++i)
      if (edited.primitives[i].tag == oracle.code) out.push_back(static_cast<int>(i));
    return out;
  }
  return {oracle.target};
}

Tensor gt_mask(const Scene& scene, const EditOracle& oracle, const CameraTrajectory& traj, int height, int width) {
  const Scene edited = apply_edit(scene, oracle);
  const auto targets = edit_targets(edited, oracle);
  const ViewSet vs = render_views(edited, traj, height, width, std::max(2, traj.size()));
  Tensor mask({traj.size(), height, width});
  for (size_t i = 0; i < vs.ids.size(); ++i)
    if (std::find(targets.begin(), targets.end(), vs.ids[i]) != targets.end()) mask[static_cast<int64_t>(i)] = 1.0;
  return mask;
}

std::array<double, 6> camera_tag(const CameraTrajectory& traj, int view, int ref) {
  const Pose& a = traj.poses.at(static_cast<size_t>(ref));
  const Pose& b = traj.poses.at(static_cast<size_t>(view));
  // Relative transform mapping reference camera coordinates into view coordinates.
  const Mat3 R = b.R * a.R.transpose();
  const Vec3 t = b.t - R * a.t;
  const Eigen::AngleAxisd aa(R);
  const Vec3 rv = aa.angle() * aa.axis();
  return {t.x(), t.y(), t.z(), rv.x(), rv.y(), rv.z()};
}

}  // namespace disco3d::worldgen
