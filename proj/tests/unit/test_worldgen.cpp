#include <doctest.h>

#include <set>

#include "disco3d/worldgen.hpp"

using namespace disco3d;
using namespace disco3d::worldgen;

namespace {

ViewSet small_views(uint64_t seed, int n = 9, int size = 16) {
  const Scene s = generate_scene(seed, Complexity::Small);
  return render_views(s, default_trajectory(s, n), size, size, 5);
}

}  // namespace

TEST_CASE("scene generation is deterministic and respects the complexity") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const Scene a = generate_scene(seed, Complexity::Small);
    const Scene b = generate_scene(seed, Complexity::Small);
    REQUIRE(a.primitives.size() == b.primitives.size());
    CHECK(a.primitives.size() == 1);
    for (size_t i = 0; i < a.primitives.size(); ++i) {
      CHECK(a.primitives[i].center == b.primitives[i].center);
      CHECK(a.primitives[i].material.color == b.primitives[i].material.color);
    }
    const Scene m = generate_scene(seed, Complexity::Medium);
    int objects = 0, planes = 0;
    for (const auto& p : m.primitives) (p.kind == PrimitiveKind::Plane ? planes : objects)++;
    CHECK(planes == 1);
    CHECK(objects >= 2);
    CHECK(objects <= 3);
    CHECK(m.primitives[0].kind != PrimitiveKind::Plane);
  }
}

TEST_CASE("trajectories are valid rotations with the reference first") {
  const Scene s = generate_scene(3, Complexity::Medium);
  const auto traj = default_trajectory(s, 49);
  CHECK_NOTHROW(traj.validate());
  CHECK(traj.size() == 49);
  const auto tag = camera_tag(traj, 0);
  for (double v : tag) CHECK(std::abs(v) < 1e-12);
  CameraTrajectory bad = traj;
  bad.poses[1].R(0, 0) = 3.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("interleaved clips share the reference and cover every view once") {
  for (auto [n, len] : std::vector<std::pair<int, int>>{{49, 25}, {9, 5}, {7, 3}}) {
    const auto clips = interleaved_clips(n, len);
    std::multiset<int> seen;
    for (const auto& c : clips) {
      CHECK(c.front() == 0);
      CHECK(static_cast<int>(c.size()) <= len);
      for (size_t i = 1; i < c.size(); ++i) seen.insert(c[i]);
    }
    CHECK(static_cast<int>(seen.size()) == n - 1);
    for (int v = 1; v < n; ++v) CHECK(seen.count(v) == 1);
  }
  const auto c49 = interleaved_clips(49, 25);
  REQUIRE(c49.size() == 2);
  CHECK(c49[0][1] == 1);
  CHECK(c49[1][1] == 2);
}

TEST_CASE("depth maps reproject consistently between views") {
  const ViewSet vs = small_views(4);
  const auto& K = vs.traj.intrinsics;
  const int H = vs.height(), W = vs.width();
  int hits = 0, agree = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double d = vs.depths[y * W + x];
      if (d <= 0) continue;
      const Vec3 X = unproject(K, vs.traj.poses[0], H, W, x, y, d);
      const Vec3 c0 = vs.traj.poses[0].R * X + vs.traj.poses[0].t;
      CHECK(c0.z() == doctest::Approx(d).epsilon(1e-9));
      const Eigen::Vector2d uv0 = project(K, H, W, c0);
      CHECK(uv0.x() == doctest::Approx(x + 0.5));
      CHECK(uv0.y() == doctest::Approx(y + 0.5));
      const Vec3 c1 = vs.traj.poses[1].R * X + vs.traj.poses[1].t;
      const Eigen::Vector2d uv = project(K, H, W, c1);
      const int px = static_cast<int>(uv.x()), py = static_cast<int>(uv.y());
      if (px < 0 || py < 0 || px >= W || py >= H) continue;
      const double d1 = vs.depths[(H + py) * W + px];
      ++hits;
      if (d1 > 0 && std::abs(d1 - c1.z()) < 0.1 * c1.z()) ++agree;
    }
  REQUIRE(hits > 20);
  CHECK(static_cast<double>(agree) / hits > 0.8);
}

TEST_CASE("render maps reproduce the reference view on itself") {
  const ViewSet vs = small_views(5);
  const RenderMap rm = make_render_maps(vs);
  const int H = vs.height(), W = vs.width();
  int valid = 0;
  for (int64_t p = 0; p < H * W; ++p) {
    if (rm.validity[p] == 0.0) continue;
    ++valid;
    for (int c = 0; c < 3; ++c) CHECK(rm.warped[p * 3 + c] == doctest::Approx(vs.images[p * 3 + c]));
  }
  CHECK(valid > 0);
  for (int64_t p = 0; p < H * W; ++p) CHECK(rm.validity[p] == (vs.depths[p] > 0 ? 1.0 : 0.0));
  CHECK_THROWS_AS(make_render_maps(Tensor({3, 3, 3}), vs), std::invalid_argument);
}

TEST_CASE("appearance edits change only the target's pixels") {
  const Scene s = generate_scene(8, Complexity::Medium);
  const auto traj = default_trajectory(s, 5);
  const ViewSet src = render_views(s, traj, 16, 16, 5);
  for (int code : {1, 2, 4}) {
    const EditOracle o{code, 0, 0};
    const ViewSet ed = render_views(apply_edit(s, o), traj, 16, 16, 5);
    const Tensor mask = gt_mask(s, o, traj, 16, 16);
    double inside = 0.0;
    for (int64_t p = 0; p < mask.numel(); ++p) {
      double diff = 0.0;
      for (int c = 0; c < 3; ++c) diff += std::abs(ed.images[p * 3 + c] - src.images[p * 3 + c]);
      if (mask[p] == 0.0) {
        CHECK(diff < 1e-12);
      } else {
        inside += diff;
      }
    }
    CHECK(inside > 0.0);
  }
}

TEST_CASE("identity is a no-op and idempotence follows the registry") {
  const Scene s = generate_scene(2, Complexity::Medium);
  for (int code = 0; code < kNumEditCodes; ++code) {
    const EditOracle o{code, 0, 1};
    const Scene once = apply_edit(s, o);
    const Scene twice = apply_edit(once, o);
    if (edit_info(code).idempotent) {
      REQUIRE(once.primitives.size() == twice.primitives.size());
      for (size_t i = 0; i < once.primitives.size(); ++i)
        CHECK(once.primitives[i].material.color == twice.primitives[i].material.color);
    }
  }
  const Scene id = apply_edit(s, {0, 0, 0});
  CHECK(id.primitives.size() == s.primitives.size());
  CHECK(edit_targets(apply_edit(s, {3, 0, 0}), {3, 0, 0}).size() == 1);
  CHECK_THROWS_AS(edit_info(99), std::invalid_argument);
  CHECK_THROWS_AS(apply_edit(s, {1, 17, 0}), std::invalid_argument);
}

TEST_CASE("renders are in range with background where nothing is hit") {
  const ViewSet vs = small_views(6);
  for (double v : vs.images.vec()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  for (int64_t p = 0; p < vs.depths.numel(); ++p) {
    if (vs.ids[static_cast<size_t>(p)] >= 0) continue;
    CHECK(vs.depths[p] == 0.0);
    for (int c = 0; c < 3; ++c) CHECK(vs.images[p * 3 + c] == doctest::Approx(vs.background[c]));
  }
  CHECK_THROWS_AS(render_views(generate_scene(0, Complexity::Small), default_trajectory(generate_scene(0, Complexity::Small), 3), 2, 2),
                  std::invalid_argument);
}
