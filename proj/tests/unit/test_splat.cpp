#include <doctest.h>

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>

#include "disco3d/core/rng.hpp"
#include "disco3d/splat.hpp"
#include "unit/fd_oracle.hpp"

using namespace disco3d;
using namespace disco3d::splat;
using disco3d::testing::central_difference;
using disco3d::testing::relative_error;
using worldgen::Vec3;

namespace {

Camera front_camera(int size = 12) {
  Camera cam;
  cam.pose.t = Vec3(0.0, 0.0, 3.0);
  cam.height = cam.width = size;
  return cam;
}

// Three overlapping, anisotropic, rotated Gaussians in front of the camera.
GaussianCloud three_gaussians() {
  GaussianCloud c = GaussianCloud::zeros(3);
  const double pos[3][3] = {{0.0, 0.05, 0.0}, {0.12, -0.06, 0.3}, {-0.1, 0.02, -0.25}};
  const double ls[3][3] = {{-1.6, -1.9, -1.7}, {-1.8, -1.5, -2.0}, {-1.7, -1.7, -1.4}};
  const double q[3][4] = {{0.9, 0.1, -0.2, 0.3}, {0.7, -0.3, 0.4, 0.1}, {1.0, 0.0, 0.2, -0.1}};
  const double op[3] = {0.3, -0.2, 0.8};
  const double col[3][3] = {{0.9, 0.2, 0.1}, {0.1, 0.7, 0.3}, {0.2, 0.3, 0.8}};
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 3; ++k) {
      c.positions[3 * i + k] = pos[i][k];
      c.log_scales[3 * i + k] = ls[i][k];
      c.colors[3 * i + k] = col[i][k];
    }
    for (int k = 0; k < 4; ++k) c.rotations[4 * i + k] = q[i][k];
    c.opacity_logits[i] = op[i];
  }
  c.normalize_rotations();
  return c;
}

// Brute-force compositing written independently of the rasterizer.
Tensor brute_force(const GaussianCloud& c, const Camera& cam, const Vec3& bg) {
  const double fx = cam.intrinsics.fx * cam.width, fy = cam.intrinsics.fy * cam.height;
  const double cx = cam.intrinsics.cx * cam.width, cy = cam.intrinsics.cy * cam.height;
  struct P {
    double depth;
    Eigen::Vector2d mean;
    Eigen::Matrix2d inv;
    double opacity;
    Vec3 color;
  };
  std::vector<P> ps;
  for (int64_t i = 0; i < c.size(); ++i) {
    const Vec3 x = cam.pose.R * Vec3(c.positions[3 * i], c.positions[3 * i + 1], c.positions[3 * i + 2]) + cam.pose.t;
    const Eigen::Quaterniond q(c.rotations[4 * i], c.rotations[4 * i + 1], c.rotations[4 * i + 2], c.rotations[4 * i + 3]);
    const Eigen::Matrix3d S = Vec3(std::exp(c.log_scales[3 * i]), std::exp(c.log_scales[3 * i + 1]),
                                   std::exp(c.log_scales[3 * i + 2]))
                                  .asDiagonal();
    const Eigen::Matrix3d RS = q.normalized().toRotationMatrix() * S;
    const Eigen::Matrix3d cov = cam.pose.R * RS * RS.transpose() * cam.pose.R.transpose();
    Eigen::Matrix<double, 2, 3> J;
    J << fx / x.z(), 0, -fx * x.x() / (x.z() * x.z()), 0, fy / x.z(), -fy * x.y() / (x.z() * x.z());
    const Eigen::Matrix2d cov2 = J * cov * J.transpose() + kDilation * Eigen::Matrix2d::Identity();
    ps.push_back({x.z(), {fx * x.x() / x.z() + cx, fy * x.y() / x.z() + cy}, cov2.inverse(),
                  1.0 / (1.0 + std::exp(-c.opacity_logits[i])), Vec3(c.colors[3 * i], c.colors[3 * i + 1], c.colors[3 * i + 2])});
  }
  std::sort(ps.begin(), ps.end(), [](const P& a, const P& b) { return a.depth < b.depth; });
  Tensor img({cam.height, cam.width, 3});
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      Vec3 C = Vec3::Zero();
      double T = 1.0;
      for (const P& p : ps) {
        const Eigen::Vector2d d = Eigen::Vector2d(x + 0.5, y + 0.5) - p.mean;
        const double a = std::min(kMaxAlpha, p.opacity * std::exp(-0.5 * d.dot(p.inv * d)));
        C += T * a * p.color;
        T *= 1.0 - a;
      }
      C += T * bg;
      for (int k = 0; k < 3; ++k) img[(y * cam.width + x) * 3 + k] = C[k];
    }
  return img;
}

worldgen::ViewSet sphere_views(int n = 9) {
  worldgen::Scene s;
  worldgen::Primitive p;
  p.kind = worldgen::PrimitiveKind::Sphere;
  p.size = Vec3(0.5, 0.5, 0.5);
  p.material.color = Vec3(0.8, 0.3, 0.2);
  s.primitives.push_back(p);
  return worldgen::render_views(s, worldgen::default_trajectory(s, n), 16, 16, 5);
}

double mean_psnr(const Tensor& a, const Tensor& b) {
  const int64_t n = a.dim(0), per = a.numel() / n;
  double total = 0.0;
  for (int64_t v = 0; v < n; ++v) {
    double se = 0.0;
    for (int64_t k = v * per; k < (v + 1) * per; ++k) se += (a[k] - b[k]) * (a[k] - b[k]);
    total += 10.0 * std::log10(per / std::max(se, 1e-30));
  }
  return total / n;
}

bool same_cloud(const GaussianCloud& a, const GaussianCloud& b, int64_t i) {
  auto eq = [&](const Tensor& x, const Tensor& y, int64_t w) {
    for (int64_t k = i * w; k < (i + 1) * w; ++k)
      if (x[k] != y[k]) return false;
    return true;
  };
  return eq(a.positions, b.positions, 3) && eq(a.log_scales, b.log_scales, 3) && eq(a.rotations, b.rotations, 4) &&
         eq(a.opacity_logits, b.opacity_logits, 1) && eq(a.colors, b.colors, 3);
}

}  // namespace

TEST_CASE("empty cloud renders the background") {
  const Vec3 bg(0.1, 0.4, 0.7);
  const RenderOutput r = rasterize(GaussianCloud::empty(), front_camera(), bg);
  for (int64_t p = 0; p < r.alpha.numel(); ++p) {
    CHECK(r.alpha[p] == 0.0);
    for (int k = 0; k < 3; ++k) CHECK(r.image[p * 3 + k] == bg[k]);
  }
}

TEST_CASE("a single centred Gaussian peaks at the centre and falls off radially") {
  GaussianCloud c = GaussianCloud::zeros(1);
  for (int k = 0; k < 3; ++k) c.log_scales[k] = std::log(0.3);
  c.opacity_logits[0] = 3.0;
  const Camera cam = front_camera(11);
  const RenderOutput r = rasterize(c, cam, Vec3::Zero());
  auto a = [&](int y, int x) { return r.alpha[y * 11 + x]; };
  // Pixel centres are at half-integers; with an odd size the principal point falls inside pixel 5.
  for (int y = 0; y < 11; ++y)
    for (int x = 0; x < 11; ++x) CHECK(a(y, x) <= a(5, 5));
  for (int d = 0; d < 4; ++d) {
    CHECK(a(5, 5 + d) > a(5, 6 + d));
    CHECK(a(5 + d, 5) > a(6 + d, 5));
  }
}

TEST_CASE("compositing matches a brute-force per-pixel oracle") {
  const GaussianCloud c = three_gaussians();
  const Vec3 bg(0.3, 0.5, 0.2);
  for (const Camera& cam : {front_camera(12), [] {
                              Camera k = front_camera(12);
                              k.pose.R = Eigen::AngleAxisd(0.3, Vec3::UnitY()).toRotationMatrix();
                              return k;
                            }()}) {
    const Tensor ref = brute_force(c, cam, bg);
    const RenderOutput r = rasterize(c, cam, bg);
    double worst = 0.0;
    for (int64_t k = 0; k < ref.numel(); ++k) worst = std::max(worst, std::abs(ref[k] - r.image[k]));
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("compositing is alpha-weighted over the background") {
  const GaussianCloud c = three_gaussians();
  const Camera cam = front_camera();
  const Vec3 b1(0.0, 0.0, 0.0), b2(1.0, 0.5, 0.25);
  const RenderOutput r1 = rasterize(c, cam, b1), r2 = rasterize(c, cam, b2);
  for (int64_t p = 0; p < r1.alpha.numel(); ++p) {
    CHECK(r1.alpha[p] >= 0.0);
    CHECK(r1.alpha[p] <= 1.0);
    for (int k = 0; k < 3; ++k)
      CHECK(r2.image[p * 3 + k] - r1.image[p * 3 + k] == doctest::Approx((1.0 - r1.alpha[p]) * (b2[k] - b1[k])));
  }
}

TEST_CASE("rasterizer gradients match finite differences") {
  GaussianCloud c = three_gaussians();
  const Camera cam = front_camera(12);
  const Vec3 bg(0.3, 0.5, 0.2);
  Rng rng(3);
  const Tensor w = rng.normal_tensor({12, 12, 3});
  const Tensor wa = rng.normal_tensor({12, 12});
  auto f = [&] {
    const RenderOutput r = rasterize(c, cam, bg);
    double s = 0.0;
    for (int64_t k = 0; k < w.numel(); ++k) s += w[k] * r.image[k];
    for (int64_t k = 0; k < wa.numel(); ++k) s += wa[k] * r.alpha[k];
    return s;
  };
  const CloudGrad g = rasterize_backward(c, cam, bg, w, &wa);
  double worst = 0.0;
  const std::pair<Tensor*, const Tensor*> pairs[] = {{&c.positions, &g.positions},
                                                     {&c.log_scales, &g.log_scales},
                                                     {&c.rotations, &g.rotations},
                                                     {&c.opacity_logits, &g.opacity_logits},
                                                     {&c.colors, &g.colors}};
  for (const auto& [param, grad] : pairs)
    for (int64_t k = 0; k < param->numel(); ++k) {
      const double fd = central_difference(*param, k, f, 1e-6);
      worst = std::max(worst, relative_error((*grad)[k], fd, 1e-6));
    }
  CHECK(worst <= 1e-3);
  CHECK_THROWS_AS(rasterize_backward(c, cam, bg, Tensor({3, 3, 3})), std::invalid_argument);
}

TEST_CASE("perceptual loss: zero, symmetry, gradient and blur ranking") {
  Rng rng(5);
  Tensor a({12, 12, 3}), b({12, 12, 3});
  for (auto& v : a.vec()) v = rng.uniform();
  for (auto& v : b.vec()) v = rng.uniform();
  CHECK(perceptual_loss(a, a) == 0.0);
  CHECK(perceptual_loss(a, b) == perceptual_loss(b, a));
  CHECK(perceptual_loss(a, b) > 0.0);

  Tensor g;
  perceptual_loss(a, b, &g);
  double worst = 0.0;
  for (int64_t k = 0; k < a.numel(); k += 7) {
    const double fd = central_difference(a, k, [&] { return perceptual_loss(a, b); }, 1e-6);
    worst = std::max(worst, relative_error(g[k], fd, 1e-8));
  }
  CHECK(worst <= 1e-4);

  const ReconLoss rl{1.0, 0.2};
  Tensor gr;
  rl(a, b, &gr);
  const double fd = central_difference(a, 10, [&] { return rl(a, b, nullptr); }, 1e-7);
  CHECK(relative_error(gr[10], fd, 1e-8) <= 1e-4);
  CHECK_THROWS_AS((ReconLoss{0.0, 0.0}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((ReconLoss{-1.0, 0.5}.validate()), std::invalid_argument);

  int closer = 0, total = 0;
  for (uint64_t s = 0; s < 100; ++s) {
    const auto sa = worldgen::generate_scene(s, worldgen::Complexity::Medium);
    const auto sb = worldgen::generate_scene(s + 1000, worldgen::Complexity::Medium);
    const Tensor ia = worldgen::render_views(sa, worldgen::default_trajectory(sa, 2), 16, 16, 2).image(0);
    const Tensor ib = worldgen::render_views(sb, worldgen::default_trajectory(sb, 2), 16, 16, 2).image(0);
    for (const Tensor* img : {&ia, &ib}) {
      const Tensor& src = *img;
      const Tensor& other = img == &ia ? ib : ia;
      Tensor blur = src;
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
          for (int c = 0; c < 3; ++c) {
            double acc = 0.0;
            int cnt = 0;
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const int yy = y + dy, xx = x + dx;
                if (yy < 0 || xx < 0 || yy >= 16 || xx >= 16) continue;
                acc += src[(yy * 16 + xx) * 3 + c];
                ++cnt;
              }
            blur[(y * 16 + x) * 3 + c] = acc / cnt;
          }
      ++total;
      if (perceptual_loss(src, blur) < perceptual_loss(src, other)) ++closer;
    }
  }
  CHECK(total == 200);
  CHECK(closer >= 190);
}

TEST_CASE("initial fitting reaches 25 dB on the single-sphere fixture") {
  const auto vs = sphere_views();
  OptimConfig opt;
  const GaussianCloud c = fit_initial(vs, 500, opt);
  CHECK(c.size() == 500);
  CHECK(mean_psnr(render_all(c, vs), vs.images) >= 25.0);
  for (int64_t i = 0; i < c.size(); ++i) {
    const double* q = c.rotations.data() + 4 * i;
    CHECK(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3] == doctest::Approx(1.0).epsilon(1e-12));
  }
  OptimConfig zero = opt;
  zero.iters = 0;
  const GaussianCloud a = fit_initial(vs, 50, zero), b = fit_initial(vs, 50, zero);
  CHECK(a.positions.vec() == b.positions.vec());
  CHECK_THROWS_AS(fit_initial(vs, 0, opt), std::invalid_argument);
}

TEST_CASE("masked updates never touch frozen Gaussians and full masks are neutral") {
  const auto vs = sphere_views(5);
  OptimConfig opt;
  opt.iters = 200;
  const GaussianCloud base = fit_initial(vs, 120, opt);
  Tensor edited = vs.images;
  for (int64_t p = 0; p < edited.numel() / 3; ++p)
    if (vs.depths[p] > 0) edited[p * 3 + 1] = std::min(1.0, edited[p * 3 + 1] + 0.4);

  Tensor mask({5, 16, 16});
  for (int v = 0; v < 5; ++v)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 16; ++x) mask[(v * 16 + y) * 16 + x] = 1.0;
  opt.iters = 60;
  const auto inside = lift_mask(base, vs, mask);
  const GaussianCloud upd = update_with_edits(base, vs, edited, {}, mask, opt);
  int frozen = 0;
  for (int64_t i = 0; i < base.size(); ++i) {
    CHECK(upd.frozen[i] == !inside[i]);
    if (!inside[i]) {
      ++frozen;
      CHECK(same_cloud(base, upd, i));
    }
  }
  CHECK(frozen > 0);
  CHECK(frozen < base.size());

  const Tensor full({5, 16, 16}, 1.0);
  const auto all = lift_mask(base, vs, full);
  REQUIRE(std::count(all.begin(), all.end(), 0) == 0);
  const GaussianCloud masked = update_with_edits(base, vs, edited, {}, full, opt);
  const GaussianCloud plain = update_with_edits(base, vs, edited, {}, std::nullopt, opt);
  CHECK(masked.positions.vec() == plain.positions.vec());
  CHECK(masked.colors.vec() == plain.colors.vec());
  CHECK_THROWS_AS(lift_mask(base, vs, Tensor({2, 16, 16})), std::invalid_argument);
}

TEST_CASE("refitting to the cloud's own renders is a fixed point") {
  const auto vs = sphere_views(5);
  OptimConfig opt;
  opt.iters = 300;
  const GaussianCloud base = fit_initial(vs, 120, opt);
  const Tensor own = render_all(base, vs);
  const ReconLoss loss;
  worldgen::ViewSet own_views = vs;
  own_views.images = own;
  Tensor g;
  CHECK(loss(own_views.image(0), own_views.image(0), &g) == 0.0);
  OptimConfig small = opt;
  small.iters = 100;
  for (double* lr : {&small.lr_position, &small.lr_scale, &small.lr_rotation, &small.lr_opacity, &small.lr_color})
    *lr = 1e-5;
  const GaussianCloud upd = update_with_edits(base, vs, own, loss, std::nullopt, small);
  double ss = 0.0;
  for (int64_t k = 0; k < base.positions.numel(); ++k)
    ss += (upd.positions[k] - base.positions[k]) * (upd.positions[k] - base.positions[k]);
  CHECK(std::sqrt(ss / base.positions.numel()) < 1e-3);
}

TEST_CASE("recolouring moves masked renders toward the edit") {
  const auto vs = sphere_views(5);
  OptimConfig opt;
  opt.iters = 400;
  const GaussianCloud base = fit_initial(vs, 150, opt);
  Tensor edited = vs.images;
  Tensor mask({5, 16, 16});
  for (int64_t p = 0; p < mask.numel(); ++p)
    if (vs.depths[p] > 0) {
      mask[p] = 1.0;
      edited[p * 3] = 0.2;
      edited[p * 3 + 1] = 0.3;
      edited[p * 3 + 2] = 0.9;
    }
  auto gap = [&](const Tensor& r) {
    double d = 0.0;
    int n = 0;
    for (int64_t p = 0; p < mask.numel(); ++p)
      if (mask[p] > 0.5) {
        d += std::abs(r[p * 3 + 2] - edited[p * 3 + 2]);
        ++n;
      }
    return d / n;
  };
  const double g0 = gap(render_all(base, vs));
  opt.iters = 300;
  const GaussianCloud upd = update_with_edits(base, vs, edited, {}, mask, opt);
  CHECK(gap(render_all(upd, vs)) <= 0.25 * g0);
}

TEST_CASE("clouds round-trip through DC3G") {
  GaussianCloud c = three_gaussians();
  c.frozen = {1, 0, 1};
  save_cloud("test_cloud.dc3g", c);
  const GaussianCloud back = load_cloud("test_cloud.dc3g");
  CHECK(back.size() == 3);
  for (int64_t i = 0; i < 3; ++i) CHECK(same_cloud(c, back, i));
  CHECK(back.frozen == c.frozen);
  CHECK_THROWS_AS(load_cloud("does_not_exist.dc3g"), std::runtime_error);
  GaussianCloud bad = c;
  bad.colors = Tensor({2, 3});
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
