#include "disco3d/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace disco3d::eval {

namespace {

constexpr double kDepthTol = 0.05;

void require_views(const Tensor& images, const worldgen::ViewSet& g) {
  const std::vector<int64_t> want{g.views(), g.height(), g.width(), 3};
  if (images.shape() != want) {
    throw std::invalid_argument("metrics: images " + shape_str(images.shape()) + " do not match geometry " +
                                shape_str(want));
  }
}

double norm(const std::vector<double>& a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

std::vector<double> diff(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out(a.size());
  for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

std::vector<std::pair<int, int>> view_pairs(int n, bool all_pairs) {
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (all_pairs || j == i + 1) out.emplace_back(i, j);
  return out;
}

double reprojection_error(const Tensor& images, const worldgen::ViewSet& g, int i, int j) {
  require_views(images, g);
  const int H = g.height(), W = g.width();
  const auto& K = g.traj.intrinsics;
  const worldgen::Pose& pj = g.traj.poses[static_cast<size_t>(j)];
  const worldgen::Pose& pi = g.traj.poses[static_cast<size_t>(i)];
  auto at = [&](int v, int y, int x) { return (static_cast<int64_t>(v) * H + y) * W + x; };
  double total = 0.0;
  int64_t count = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const int64_t q = at(j, y, x);
      const double dq = g.depths[q];
      const int id = g.ids[static_cast<size_t>(q)];
      if (dq <= 0.0 || id < 0) continue;
      const worldgen::Vec3 X = worldgen::unproject(K, pj, H, W, x, y, dq);
      const worldgen::Vec3 cam = pi.R * X + pi.t;
      if (cam.z() <= 1e-6) continue;
      const Eigen::Vector2d uv = worldgen::project(K, H, W, cam);
      const double fx = uv.x() - 0.5, fy = uv.y() - 0.5;
      const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
      if (x0 < 0 || y0 < 0 || x0 + 1 >= W || y0 + 1 >= H) continue;
      const double wx = fx - x0, wy = fy - y0;
      bool ok = true;
      double sample[3] = {0.0, 0.0, 0.0};
      for (int dy = 0; dy < 2 && ok; ++dy)
        for (int dx = 0; dx < 2 && ok; ++dx) {
          const int64_t p = at(i, y0 + dy, x0 + dx);
          const double dp = g.depths[p];
          if (g.ids[static_cast<size_t>(p)] != id || std::abs(dp - cam.z()) > kDepthTol * cam.z()) {
            ok = false;
            break;
          }
          const double w = (dx ? wx : 1.0 - wx) * (dy ? wy : 1.0 - wy);
          for (int c = 0; c < 3; ++c) sample[c] += w * images[p * 3 + c];
        }
      if (!ok) continue;
      for (int c = 0; c < 3; ++c) total += std::abs(images[q * 3 + c] - sample[c]);
      count += 3;
    }
  return count ? total / static_cast<double>(count) : -1.0;
}

PairScore reproj_inconsistency(const Tensor& images, const worldgen::ViewSet& g, bool all_pairs) {
  PairScore s;
  double total = 0.0;
  for (const auto& [i, j] : view_pairs(g.views(), all_pairs)) {
    const double e = reprojection_error(images, g, i, j);
    if (e < 0.0) {
      ++s.skipped;
      continue;
    }
    total += e;
    ++s.used;
  }
  s.value = s.used ? total / s.used : std::numeric_limits<double>::quiet_NaN();
  return s;
}

double psnr(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "psnr");
  double mse = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
  mse /= static_cast<double>(a.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: size mismatch");
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  double d = 0.0;
  for (size_t i = 0; i < a.size(); ++i) d += a[i] * b[i];
  return std::clamp(d / (na * nb), -1.0, 1.0);
}

EmbedReport embed_metrics(const Tensor& edited, const Tensor& source, const std::vector<int>& src_desc,
                          const std::vector<int>& tgt_desc, const Embedder& embedder, bool all_pairs) {
  require_same_shape(edited, source, "embed_metrics");
  if (edited.ndim() != 4) throw std::invalid_argument("embed_metrics: expects [N,H,W,3] images");
  const int N = static_cast<int>(edited.dim(0));
  const std::vector<int64_t> one{edited.dim(1), edited.dim(2), edited.dim(3)};
  const int64_t row = edited.numel() / std::max(N, 1);
  auto view = [&](const Tensor& t, int v) {
    Tensor out(one);
    std::copy(t.data() + v * row, t.data() + (v + 1) * row, out.data());
    return out;
  };
  const auto e_src = embedder.text(src_desc), e_tgt = embedder.text(tgt_desc);
  const auto d_text = diff(e_tgt, e_src);
  EmbedReport r;
  std::vector<std::vector<double>> deltas(static_cast<size_t>(N));
  for (int v = 0; v < N; ++v) {
    const auto ie = embedder.image(view(edited, v));
    const auto is = embedder.image(view(source, v));
    r.sim.push_back(cosine(ie, e_tgt));
    deltas[static_cast<size_t>(v)] = diff(ie, is);
    const double ds = cosine(deltas[static_cast<size_t>(v)], d_text);
    r.dir_sim.push_back(std::isnan(ds) ? 0.0 : ds);
  }
  for (const auto& [i, j] : view_pairs(N, all_pairs)) {
    const double c = cosine(deltas[static_cast<size_t>(i)], deltas[static_cast<size_t>(j)]);
    if (std::isnan(c)) {
      ++r.pairs_skipped;
      continue;
    }
    r.dir_consistency.push_back(c);
    ++r.pairs_used;
  }
  r.sim_mean = mean(r.sim);
  r.dir_sim_mean = mean(r.dir_sim);
  r.dir_consistency_mean = mean(r.dir_consistency);
  return r;
}

}  // namespace disco3d::eval
