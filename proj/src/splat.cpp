#include "disco3d/splat.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "disco3d/core/autograd.hpp"
#include "disco3d/core/rng.hpp"
#include "disco3d/core/errors.hpp"

namespace disco3d::splat {

using worldgen::Mat3;
using worldgen::Vec3;
using Mat2 = Eigen::Matrix2d;
using Mat23 = Eigen::Matrix<double, 2, 3>;

namespace {

constexpr double kNear = 0.05;

void add_into(Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "splat");
  for (int64_t k = 0; k < a.numel(); ++k) a[k] += b[k];
}

void scale_in_place(Tensor& a, double s) {
  for (auto& v : a.vec()) v *= s;
}

Eigen::Vector4d quat(const GaussianCloud& c, int64_t i) {
  const double* q = c.rotations.data() + 4 * i;
  return {q[0], q[1], q[2], q[3]};
}

Mat3 quat_to_matrix(const Eigen::Vector4d& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return R;
}

// dL/dq for a unit quaternion given dL/dR.
Eigen::Vector4d quat_grad(const Eigen::Vector4d& q, const Mat3& G) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 dw, dx, dy, dz;
  dw << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
  dx << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
  dy << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
  dz << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
  return {G.cwiseProduct(dw).sum(), G.cwiseProduct(dx).sum(), G.cwiseProduct(dy).sum(), G.cwiseProduct(dz).sum()};
}

struct Projected {
  bool visible = false;
  double depth = 0.0;
  double u = 0.0, v = 0.0;
  Vec3 p_cam;
  Vec3 scale;
  Mat3 rot;       // from the quaternion
  Mat3 M;         // rot * diag(scale)
  Mat3 cov_cam;
  Mat23 J;
  Mat2 cov2;
  Mat2 conic;
  double opacity = 0.0;
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;
};

struct Intr {
  double fx, fy, cx, cy;
};

Intr pixel_intrinsics(const Camera& cam) {
  const auto& K = cam.intrinsics;
  return {K.fx * cam.width, K.fy * cam.height, K.cx * cam.width, K.cy * cam.height};
}

Projected project_one(const GaussianCloud& c, int64_t i, const Camera& cam, const Intr& K) {
  Projected p;
  const double* pos = c.positions.data() + 3 * i;
  p.p_cam = cam.pose.R * Vec3(pos[0], pos[1], pos[2]) + cam.pose.t;
  p.depth = p.p_cam.z();
  if (p.depth <= kNear) return p;
  const double x = p.p_cam.x(), y = p.p_cam.y(), z = p.depth;
  p.u = K.fx * x / z + K.cx;
  p.v = K.fy * y / z + K.cy;
  const double* ls = c.log_scales.data() + 3 * i;
  p.scale = Vec3(std::exp(ls[0]), std::exp(ls[1]), std::exp(ls[2]));
  p.rot = quat_to_matrix(quat(c, i));
  p.M = p.rot * p.scale.asDiagonal();
  p.cov_cam = cam.pose.R * (p.M * p.M.transpose()) * cam.pose.R.transpose();
  p.J << K.fx / z, 0, -K.fx * x / (z * z), 0, K.fy / z, -K.fy * y / (z * z);
  p.cov2 = p.J * p.cov_cam * p.J.transpose() + kDilation * Mat2::Identity();
  const double det = p.cov2.determinant();
  if (!(det > 0.0) || !std::isfinite(det)) return p;
  p.conic = p.cov2.inverse();
  const double mid = 0.5 * (p.cov2(0, 0) + p.cov2(1, 1));
  const double lmax = mid + std::sqrt(std::max(0.0, mid * mid - det));
  const double r = std::sqrt(-2.0 * kPowerCutoff * lmax);
  p.x0 = std::max(0, static_cast<int>(std::ceil(p.u - r - 0.5)));
  p.x1 = std::min(cam.width - 1, static_cast<int>(std::floor(p.u + r - 0.5)));
  p.y0 = std::max(0, static_cast<int>(std::ceil(p.v - r - 0.5)));
  p.y1 = std::min(cam.height - 1, static_cast<int>(std::floor(p.v + r - 0.5)));
  p.opacity = c.opacity(i);
  p.visible = p.x0 <= p.x1 && p.y0 <= p.y1;
  return p;
}

struct Hit {
  int64_t gaussian;
  double g;      // Gaussian falloff at the pixel
  double alpha;  // min(kMaxAlpha, o g)
  double dx, dy;
};

struct Layout {
  std::vector<Projected> proj;
  std::vector<std::vector<Hit>> pixels;  // front-to-back per pixel
};

Layout build(const GaussianCloud& cloud, const Camera& cam) {
  cloud.validate();
  if (cam.height <= 0 || cam.width <= 0) throw std::invalid_argument("splat: camera has no pixels");
  const Intr K = pixel_intrinsics(cam);
  const int64_t m = cloud.size();
  Layout L;
  L.proj.resize(static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i) L.proj[i] = project_one(cloud, i, cam, K);
  std::vector<int64_t> order(static_cast<size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t a, int64_t b) { return L.proj[a].depth < L.proj[b].depth; });
  L.pixels.resize(static_cast<size_t>(cam.height) * cam.width);
  for (int64_t i : order) {
    const Projected& p = L.proj[i];
    if (!p.visible) continue;
    for (int py = p.y0; py <= p.y1; ++py) {
      for (int px = p.x0; px <= p.x1; ++px) {
        const double dx = px + 0.5 - p.u, dy = py + 0.5 - p.v;
        const double power =
            -0.5 * (p.conic(0, 0) * dx * dx + 2.0 * p.conic(0, 1) * dx * dy + p.conic(1, 1) * dy * dy);
        if (power > 0.0 || power < kPowerCutoff) continue;
        const double g = std::exp(power);
        L.pixels[static_cast<size_t>(py) * cam.width + px].push_back(
            {i, g, std::min(kMaxAlpha, p.opacity * g), dx, dy});
      }
    }
  }
  return L;
}

}  // namespace

GaussianCloud GaussianCloud::empty() { return zeros(0); }

GaussianCloud GaussianCloud::zeros(int64_t m) {
  if (m < 0) throw std::invalid_argument("splat: negative Gaussian count");
  GaussianCloud c;
  c.positions = Tensor({m, 3});
  c.log_scales = Tensor({m, 3});
  c.rotations = Tensor({m, 4});
  for (int64_t i = 0; i < m; ++i) c.rotations[4 * i] = 1.0;
  c.opacity_logits = Tensor({m});
  c.colors = Tensor({m, 3});
  c.frozen.assign(static_cast<size_t>(m), 0);
  return c;
}

double GaussianCloud::opacity(int64_t i) const { return 1.0 / (1.0 + std::exp(-opacity_logits[i])); }

void GaussianCloud::normalize_rotations() {
  for (int64_t i = 0; i < size(); ++i) {
    if (frozen[i]) continue;
    double* q = rotations.data() + 4 * i;
    const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    if (n < 1e-12) {
      q[0] = 1.0;
      q[1] = q[2] = q[3] = 0.0;
      continue;
    }
    for (int k = 0; k < 4; ++k) q[k] /= n;
  }
}

void GaussianCloud::validate() const {
  const int64_t m = size();
  auto check = [&](const Tensor& t, std::vector<int64_t> shape, const char* name) {
    if (t.shape() != shape) throw std::invalid_argument(std::string("splat: bad shape for ") + name);
  };
  check(positions, {m, 3}, "positions");
  check(log_scales, {m, 3}, "log_scales");
  check(rotations, {m, 4}, "rotations");
  check(opacity_logits, {m}, "opacity_logits");
  check(colors, {m, 3}, "colors");
  if (static_cast<int64_t>(frozen.size()) != m) throw std::invalid_argument("splat: bad frozen mask size");
}

CloudGrad CloudGrad::zeros_like(const GaussianCloud& c) {
  return {Tensor::zeros_like(c.positions), Tensor::zeros_like(c.log_scales), Tensor::zeros_like(c.rotations),
          Tensor::zeros_like(c.opacity_logits), Tensor::zeros_like(c.colors)};
}

void CloudGrad::add(const CloudGrad& o) {
  add_into(positions, o.positions);
  add_into(log_scales, o.log_scales);
  add_into(rotations, o.rotations);
  add_into(opacity_logits, o.opacity_logits);
  add_into(colors, o.colors);
}

Camera camera_of(const worldgen::ViewSet& views, int v) {
  if (v < 0 || v >= views.views()) throw std::out_of_range("splat: view index out of range");
  return {views.traj.poses[v], views.traj.intrinsics, views.height(), views.width()};
}

RenderOutput rasterize(const GaussianCloud& cloud, const Camera& cam, const Vec3& background) {
  const Layout L = build(cloud, cam);
  RenderOutput out{Tensor({cam.height, cam.width, 3}), Tensor({cam.height, cam.width})};
  for (size_t pix = 0; pix < L.pixels.size(); ++pix) {
    double T = 1.0;
    Vec3 C = Vec3::Zero();
    for (const Hit& h : L.pixels[pix]) {
      const double* col = cloud.colors.data() + 3 * h.gaussian;
      const double w = h.alpha * T;
      C += w * Vec3(col[0], col[1], col[2]);
      T *= 1.0 - h.alpha;
    }
    C += T * background;
    for (int k = 0; k < 3; ++k) out.image[3 * pix + k] = C[k];
    out.alpha[pix] = 1.0 - T;
  }
  return out;
}

CloudGrad rasterize_backward(const GaussianCloud& cloud, const Camera& cam, const Vec3& background,
                             const Tensor& grad_image, const Tensor* grad_alpha) {
  if (grad_image.shape() != std::vector<int64_t>{cam.height, cam.width, 3})
    throw std::invalid_argument("splat: grad_image must be [H, W, 3]");
  if (grad_alpha && grad_alpha->shape() != std::vector<int64_t>{cam.height, cam.width})
    throw std::invalid_argument("splat: grad_alpha must be [H, W]");
  const Layout L = build(cloud, cam);
  const Intr K = pixel_intrinsics(cam);
  const int64_t m = cloud.size();
  CloudGrad G = CloudGrad::zeros_like(cloud);
  std::vector<Eigen::Vector2d> g_mean2(static_cast<size_t>(m), Eigen::Vector2d::Zero());
  std::vector<Mat2> g_conic(static_cast<size_t>(m), Mat2::Zero());

  std::vector<double> trans;
  for (size_t pix = 0; pix < L.pixels.size(); ++pix) {
    const auto& hits = L.pixels[pix];
    if (hits.empty()) continue;
    const Vec3 gC(grad_image[3 * pix], grad_image[3 * pix + 1], grad_image[3 * pix + 2]);
    const double gA = grad_alpha ? (*grad_alpha)[pix] : 0.0;
    trans.resize(hits.size());
    double T = 1.0;
    for (size_t k = 0; k < hits.size(); ++k) {
      trans[k] = T;
      T *= 1.0 - hits[k].alpha;
    }
    // S accumulates the colour contributed behind the current Gaussian.
    Vec3 S = T * background;
    const double T_final = T;
    for (size_t k = hits.size(); k-- > 0;) {
      const Hit& h = hits[k];
      const double* col = cloud.colors.data() + 3 * h.gaussian;
      const Vec3 c(col[0], col[1], col[2]);
      const double inv = 1.0 / (1.0 - h.alpha);
      for (int ch = 0; ch < 3; ++ch) G.colors[3 * h.gaussian + ch] += gC[ch] * h.alpha * trans[k];
      const double g_alpha = gC.dot(c * trans[k] - S * inv) + gA * T_final * inv;
      S += c * h.alpha * trans[k];
      const Projected& p = L.proj[h.gaussian];
      if (p.opacity * h.g >= kMaxAlpha) continue;
      const double o = p.opacity;
      G.opacity_logits[h.gaussian] += g_alpha * h.g * o * (1.0 - o);
      const double g_power = g_alpha * o * h.g;
      const double dx = h.dx, dy = h.dy;
      g_mean2[h.gaussian] += g_power * Eigen::Vector2d(p.conic(0, 0) * dx + p.conic(0, 1) * dy,
                                                       p.conic(0, 1) * dx + p.conic(1, 1) * dy);
      Mat2 gc;
      gc << -0.5 * dx * dx, -0.5 * dx * dy, -0.5 * dx * dy, -0.5 * dy * dy;
      g_conic[h.gaussian] += g_power * gc;
    }
  }

  const Mat3& Rv = cam.pose.R;
  for (int64_t i = 0; i < m; ++i) {
    const Projected& p = L.proj[i];
    if (!p.visible) continue;
    const Mat2& A = p.conic;
    const Mat2 g_cov2 = -A * g_conic[i] * A;
    const Mat3 g_cov_cam = p.J.transpose() * g_cov2 * p.J;
    const Mat23 g_J = 2.0 * g_cov2 * p.J * p.cov_cam;
    const Mat3 g_cov3 = Rv.transpose() * g_cov_cam * Rv;
    const Mat3 g_M = 2.0 * g_cov3 * p.M;
    const Mat3 g_rot = g_M * p.scale.asDiagonal();
    for (int j = 0; j < 3; ++j) G.log_scales[3 * i + j] += g_M.col(j).dot(p.rot.col(j)) * p.scale[j];
    const Eigen::Vector4d gq = quat_grad(quat(cloud, i), g_rot);
    for (int k = 0; k < 4; ++k) G.rotations[4 * i + k] += gq[k];

    const double x = p.p_cam.x(), y = p.p_cam.y(), z = p.depth;
    const double z2 = z * z, z3 = z2 * z;
    Vec3 g_cam = Vec3::Zero();
    const double gu = g_mean2[i][0], gv = g_mean2[i][1];
    g_cam.x() += gu * K.fx / z - g_J(0, 2) * K.fx / z2;
    g_cam.y() += gv * K.fy / z - g_J(1, 2) * K.fy / z2;
    g_cam.z() += -gu * K.fx * x / z2 - gv * K.fy * y / z2 - g_J(0, 0) * K.fx / z2 - g_J(1, 1) * K.fy / z2 +
                 g_J(0, 2) * 2.0 * K.fx * x / z3 + g_J(1, 2) * 2.0 * K.fy * y / z3;
    const Vec3 g_pos = Rv.transpose() * g_cam;
    for (int k = 0; k < 3; ++k) G.positions[3 * i + k] += g_pos[k];
  }
  return G;
}

double perceptual_loss(const Tensor& a, const Tensor& b, Tensor* grad_a) {
  if (a.shape() != b.shape() || a.ndim() != 3 || a.dim(2) != 3)
    throw std::invalid_argument("perceptual_loss: expected matching [H, W, 3] images");
  static const std::pair<Tensor, Tensor> weights = [] {
    Rng rng(0x9e3c0);
    Tensor w1 = rng.normal_tensor({8, 27});
    Tensor w2 = rng.normal_tensor({8, 72});
    scale_in_place(w1, std::sqrt(2.0 / 27.0));
    scale_in_place(w2, std::sqrt(2.0 / 72.0));
    return std::make_pair(w1, w2);
  }();
  const int64_t H = a.dim(0), W = a.dim(1);
  const bool deep = H % 2 == 0 && W % 2 == 0;
  auto features = [&](const ag::Var& img) {
    std::vector<ag::Var> f{img};
    f.push_back(ag::relu(ag::matmul_nt(ag::im2col3x3(img), ag::constant(weights.first))));
    if (deep) f.push_back(ag::relu(ag::matmul_nt(ag::im2col3x3(ag::avgpool2(f[1])), ag::constant(weights.second))));
    return f;
  };
  ag::Var va = grad_a ? ag::parameter(a.reshaped({1, H, W, 3})) : ag::constant(a.reshaped({1, H, W, 3}));
  const auto fa = features(va);
  std::vector<ag::Var> fb;
  {
    ag::NoGradGuard ng;
    fb = features(ag::constant(b.reshaped({1, H, W, 3})));
  }
  std::vector<ag::Var> terms;
  for (size_t k = 0; k < fa.size(); ++k) terms.push_back(ag::mse(fa[k], fb[k]));
  const ag::Var loss = ag::linear_combination(terms, std::vector<double>(terms.size(), 1.0 / terms.size()));
  if (grad_a) {
    ag::backward(loss);
    *grad_a = va.grad().reshaped({H, W, 3});
  }
  return loss.value()[0];
}

void ReconLoss::validate() const {
  if (!(l1_weight >= 0.0) || !(perceptual_weight >= 0.0) || l1_weight + perceptual_weight <= 0.0)
    throw std::invalid_argument("recon loss: weights must be non-negative and not both zero");
}

double ReconLoss::operator()(const Tensor& render, const Tensor& target, Tensor* grad) const {
  if (render.shape() != target.shape()) throw std::invalid_argument("recon loss: shape mismatch");
  const double n = static_cast<double>(render.numel());
  double l1 = 0.0;
  if (grad) *grad = Tensor::zeros_like(render);
  for (int64_t k = 0; k < render.numel(); ++k) {
    const double d = render[k] - target[k];
    l1 += std::abs(d);
    if (grad && d != 0.0) (*grad)[k] = l1_weight * (d > 0.0 ? 1.0 : -1.0) / n;
  }
  double total = l1_weight * l1 / n;
  if (perceptual_weight > 0.0) {
    Tensor gp;
    total += perceptual_weight * perceptual_loss(render, target, grad ? &gp : nullptr);
    if (grad) {
      scale_in_place(gp, perceptual_weight);
      add_into(*grad, gp);
    }
  }
  return total;
}

namespace {

struct Moments {
  Tensor m, v;
};

class CloudAdam {
 public:
  CloudAdam(const GaussianCloud& c, const OptimConfig& opt) : opt_(opt) {
    for (const Tensor* t : {&c.positions, &c.log_scales, &c.rotations, &c.opacity_logits, &c.colors})
      state_.push_back({Tensor::zeros_like(*t), Tensor::zeros_like(*t)});
  }

  void step(GaussianCloud& c, const CloudGrad& g) {
    ++t_;
    update(c.positions, g.positions, state_[0], opt_.lr_position, c.frozen);
    update(c.log_scales, g.log_scales, state_[1], opt_.lr_scale, c.frozen);
    update(c.rotations, g.rotations, state_[2], opt_.lr_rotation, c.frozen);
    update(c.opacity_logits, g.opacity_logits, state_[3], opt_.lr_opacity, c.frozen);
    update(c.colors, g.colors, state_[4], opt_.lr_color, c.frozen);
    c.normalize_rotations();
    for (int64_t i = 0; i < c.size(); ++i) {
      if (c.frozen[i]) continue;
      for (int k = 0; k < 3; ++k) c.colors[3 * i + k] = std::clamp(c.colors[3 * i + k], 0.0, 1.0);
    }
  }

 private:
  void update(Tensor& p, const Tensor& g, Moments& s, double lr, const std::vector<uint8_t>& frozen) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, t_), c2 = 1.0 - std::pow(b2, t_);
    const int64_t m = static_cast<int64_t>(frozen.size());
    const int64_t row = m ? p.numel() / m : 0;
    for (int64_t i = 0; i < m; ++i) {
      if (frozen[i]) continue;
      for (int64_t k = i * row; k < (i + 1) * row; ++k) {
        s.m[k] = b1 * s.m[k] + (1 - b1) * g[k];
        s.v[k] = b2 * s.v[k] + (1 - b2) * g[k] * g[k];
        p[k] -= lr * (s.m[k] / c1) / (std::sqrt(s.v[k] / c2) + eps);
      }
    }
  }

  OptimConfig opt_;
  std::vector<Moments> state_;
  int t_ = 0;
};

void check_optim(const OptimConfig& opt) {
  if (opt.iters < 0) throw std::invalid_argument("splat: iters must be non-negative");
  for (double lr : {opt.lr_position, opt.lr_scale, opt.lr_rotation, opt.lr_opacity, opt.lr_color})
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("splat: learning rates must be finite and >= 0");
}

// Single-view steps; views are visited in a fresh seeded permutation each epoch.
void optimize(GaussianCloud& cloud, const worldgen::ViewSet& geometry, const Tensor& targets, const ReconLoss& loss,
              const OptimConfig& opt) {
  const int n = geometry.views();
  Rng rng = Rng::derive(opt.seed, 11);
  CloudAdam adam(cloud, opt);
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  size_t pos = order.size();
  for (int it = 0; it < opt.iters; ++it) {
    if (pos == order.size()) {
      std::shuffle(order.begin(), order.end(), rng.engine());
      pos = 0;
    }
    const int v = order[pos++];
    const Camera cam = camera_of(geometry, v);
    const RenderOutput r = rasterize(cloud, cam, geometry.background);
    Tensor target = Tensor({cam.height, cam.width, 3});
    std::memcpy(target.data(), targets.data() + static_cast<int64_t>(v) * target.numel(),
                sizeof(double) * target.numel());
    Tensor g;
    const double l = loss(r.image, target, &g);
    if (!std::isfinite(l)) throw NumericalError("splat: non-finite reconstruction loss");
    adam.step(cloud, rasterize_backward(cloud, cam, geometry.background, g));
  }
}

double mean_psnr(const Tensor& a, const Tensor& b) {
  const int64_t n = a.dim(0), per = a.numel() / n;
  double total = 0.0;
  for (int64_t v = 0; v < n; ++v) {
    double se = 0.0;
    for (int64_t k = v * per; k < (v + 1) * per; ++k) se += (a[k] - b[k]) * (a[k] - b[k]);
    total += 10.0 * std::log10(1.0 / std::max(se / per, 1e-12));
  }
  return total / n;
}

}  // namespace

GaussianCloud fit_initial(const worldgen::ViewSet& views, int64_t m, const OptimConfig& opt, const ReconLoss& loss) {
  if (m <= 0) throw std::invalid_argument("fit_initial: need at least one Gaussian");
  check_optim(opt);
  loss.validate();
  const int n = views.views(), H = views.height(), W = views.width();
  std::vector<std::array<int, 3>> surface;
  for (int v = 0; v < n; ++v)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        if (views.depths[(static_cast<int64_t>(v) * H + y) * W + x] > 0.0) surface.push_back({v, y, x});
  if (surface.empty()) throw std::invalid_argument("fit_initial: no surface pixels to initialise from");

  Rng rng = Rng::derive(opt.seed, 10);
  GaussianCloud cloud = GaussianCloud::zeros(m);
  const double fpx = views.traj.intrinsics.fx * W;
  const double spread = std::max(1.0, std::sqrt(static_cast<double>(surface.size()) / n / std::max<int64_t>(1, m / n)));
  for (int64_t i = 0; i < m; ++i) {
    const auto [v, y, x] =
        surface[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(surface.size()) - 1))];
    const int64_t pix = (static_cast<int64_t>(v) * H + y) * W + x;
    const double depth = views.depths[pix];
    const Vec3 p = worldgen::unproject(views.traj.intrinsics, views.traj.poses[v], H, W, x, y, depth);
    for (int k = 0; k < 3; ++k) {
      cloud.positions[3 * i + k] = p[k];
      cloud.log_scales[3 * i + k] = std::log(0.5 * spread * depth / fpx);
      cloud.colors[3 * i + k] = views.images[3 * pix + k];
    }
    cloud.opacity_logits[i] = std::log(0.8 / 0.2);
  }
  optimize(cloud, views, views.images, loss, opt);
  const double psnr = mean_psnr(render_all(cloud, views), views.images);
  if (psnr < 25.0) spdlog::warn("fit_initial: training PSNR {:.2f} dB is below 25 dB", psnr);
  return cloud;
}

std::vector<uint8_t> lift_mask(const GaussianCloud& cloud, const worldgen::ViewSet& geometry, const Tensor& mask) {
  const int n = geometry.views(), H = geometry.height(), W = geometry.width();
  if (mask.shape() != std::vector<int64_t>{n, H, W}) throw std::invalid_argument("lift_mask: mask must be [N, H, W]");
  cloud.validate();
  std::vector<uint8_t> inside(static_cast<size_t>(cloud.size()), 0);
  for (int v = 0; v < n; ++v) {
    const Camera cam = camera_of(geometry, v);
    const Intr K = pixel_intrinsics(cam);
    for (int64_t i = 0; i < cloud.size(); ++i) {
      if (inside[i]) continue;
      const Projected p = project_one(cloud, i, cam, K);
      if (!p.visible) continue;
      for (int y = p.y0; y <= p.y1 && !inside[i]; ++y) {
        for (int x = p.x0; x <= p.x1; ++x) {
          const double dx = x + 0.5 - p.u, dy = y + 0.5 - p.v;
          const double d2 = p.conic(0, 0) * dx * dx + 2.0 * p.conic(0, 1) * dx * dy + p.conic(1, 1) * dy * dy;
          if (d2 <= 4.0 && mask[(static_cast<int64_t>(v) * H + y) * W + x] > 0.5) {
            inside[i] = 1;
            break;
          }
        }
      }
    }
  }
  return inside;
}

GaussianCloud update_with_edits(const GaussianCloud& cloud, const worldgen::ViewSet& geometry, const Tensor& edited,
                                const ReconLoss& loss, const std::optional<Tensor>& mask, const OptimConfig& opt) {
  check_optim(opt);
  loss.validate();
  if (edited.shape() != geometry.images.shape())
    throw std::invalid_argument("update_with_edits: edited views must match the geometry [N, H, W, 3]");
  GaussianCloud out = cloud;
  if (mask) {
    const auto inside = lift_mask(cloud, geometry, *mask);
    for (int64_t i = 0; i < out.size(); ++i)
      if (!inside[i]) out.frozen[i] = 1;
  }
  optimize(out, geometry, edited, loss, opt);
  return out;
}

Tensor render_all(const GaussianCloud& cloud, const worldgen::ViewSet& geometry) {
  const int n = geometry.views(), H = geometry.height(), W = geometry.width();
  Tensor out({n, H, W, 3});
  const int64_t per = static_cast<int64_t>(H) * W * 3;
  for (int v = 0; v < n; ++v) {
    const RenderOutput r = rasterize(cloud, camera_of(geometry, v), geometry.background);
    std::memcpy(out.data() + v * per, r.image.data(), sizeof(double) * per);
  }
  return out;
}

namespace {
constexpr char kMagic[4] = {'D', 'C', '3', 'G'};
constexpr uint32_t kVersion = 1;
}  // namespace

void save_cloud(const std::string& path, const GaussianCloud& cloud) {
  cloud.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_cloud: cannot write " + path);
  const uint32_t m = static_cast<uint32_t>(cloud.size());
  out.write(kMagic, 4);
  out.write(reinterpret_cast<const char*>(&kVersion), 4);
  out.write(reinterpret_cast<const char*>(&m), 4);
  for (const Tensor* t : {&cloud.positions, &cloud.log_scales, &cloud.rotations, &cloud.opacity_logits, &cloud.colors})
    out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(sizeof(double) * t->numel()));
  out.write(reinterpret_cast<const char*>(cloud.frozen.data()), static_cast<std::streamsize>(cloud.frozen.size()));
  if (!out) throw std::runtime_error("save_cloud: write failed for " + path);
}

GaussianCloud load_cloud(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_cloud: cannot open " + path);
  char magic[4];
  uint32_t version = 0, m = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&m), 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("load_cloud: bad magic in " + path);
  if (version != kVersion) throw std::runtime_error("load_cloud: unsupported version " + std::to_string(version));
  if (m > (1u << 24)) throw std::runtime_error("load_cloud: implausible Gaussian count");
  GaussianCloud c = GaussianCloud::zeros(m);
  for (Tensor* t : {&c.positions, &c.log_scales, &c.rotations, &c.opacity_logits, &c.colors})
    in.read(reinterpret_cast<char*>(t->data()), static_cast<std::streamsize>(sizeof(double) * t->numel()));
  in.read(reinterpret_cast<char*>(c.frozen.data()), m);
  if (!in) throw std::runtime_error("load_cloud: truncated file " + path);
  return c;
}

}  // namespace disco3d::splat
