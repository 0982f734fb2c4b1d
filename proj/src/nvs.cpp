#include "disco3d/nvs.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "disco3d/core/errors.hpp"

namespace disco3d::nvs {

namespace {

Tensor zeros_cond(const ConditionSignal& cond) { return Tensor(cond.render_maps.shape(), 0.0); }

nets::DenoiserInputs teacher_inputs(const Teacher& teacher, const ConditionSignal& cond, int t, bool unconditional) {
  nets::DenoiserInputs in;
  const int V = cond.views();
  in.cond_image = unconditional ? zeros_cond(cond) : cond.render_maps;
  in.time.assign(static_cast<size_t>(V), static_cast<double>(t) / teacher.schedule().steps());
  if (!unconditional) in.ref_image = nets::to_latent(cond.ref_image);
  in.camera_tags = cond.camera_tags;
  return in;
}

void check_finite(double v, const char* what, int step) {
  if (!std::isfinite(v)) {
    throw NumericalError(std::string(what) + ": loss became non-finite at step " + std::to_string(step));
  }
}

// Random appearance edits widen the pretraining family beyond the source palette.
worldgen::Scene augment(const worldgen::Scene& scene, Rng& rng) {
  static const int codes[] = {0, 1, 2, 4};
  worldgen::EditOracle oracle;
  oracle.code = codes[rng.uniform_int(0, 3)];
  oracle.variant = static_cast<uint64_t>(rng.uniform_int(0, 2));
  return worldgen::apply_edit(scene, oracle);
}

}  // namespace

ConditionSignal make_condition(const worldgen::ViewSet& views, const Tensor& ref_image, const std::vector<int>& clip) {
  return make_condition(views, worldgen::make_render_maps(ref_image, views), ref_image, clip);
}

ConditionSignal make_condition(const worldgen::ViewSet& views, const worldgen::RenderMap& maps,
                               const Tensor& ref_image, const std::vector<int>& clip) {
  const int64_t H = views.height(), W = views.width(), V = static_cast<int64_t>(clip.size());
  if (V == 0) throw std::invalid_argument("make_condition: empty clip");
  ConditionSignal c;
  c.render_maps = Tensor({V, H, W, 4});
  c.camera_tags = Tensor({V, 6});
  c.ref_image = ref_image;
  for (int64_t i = 0; i < V; ++i) {
    const int v = clip[static_cast<size_t>(i)];
    if (v < 0 || v >= views.views()) throw std::invalid_argument("make_condition: view index out of range");
    for (int64_t p = 0; p < H * W; ++p) {
      const int64_t src = static_cast<int64_t>(v) * H * W + p;
      double* dst = c.render_maps.data() + (i * H * W + p) * 4;
      for (int ch = 0; ch < 3; ++ch) dst[ch] = 2.0 * maps.warped[src * 3 + ch] - 1.0;
      dst[3] = maps.validity[src];
    }
    const auto tag = worldgen::camera_tag(views.traj, v, views.ref_index);
    for (int k = 0; k < 6; ++k) c.camera_tags[i * 6 + k] = tag[static_cast<size_t>(k)];
  }
  return c;
}

nets::DenoiserConfig default_teacher_net() {
  nets::DenoiserConfig cfg;
  cfg.cond_image_channels = 4;
  cfg.temporal = true;
  cfg.ref_encoder = true;
  cfg.num_codes = 0;
  return cfg;
}

ag::Var Teacher::eps(const ag::Var& z_t, int t, const ConditionSignal& cond, bool unconditional) const {
  if (z_t.value().ndim() != 4 || z_t.value().dim(0) != cond.views()) {
    throw std::invalid_argument("teacher: latent clip and condition disagree on the view count");
  }
  return net_.forward(z_t, teacher_inputs(*this, cond, t, unconditional));
}

Tensor Teacher::eps_cfg(const Tensor& z_t, int t, const ConditionSignal& cond, double guidance) const {
  ag::NoGradGuard ng;
  const ag::Var z = ag::constant(z_t);
  Tensor c = eps(z, t, cond).value();
  if (guidance == 1.0) return c;
  const Tensor u = eps(z, t, cond, true).value();
  for (int64_t i = 0; i < c.numel(); ++i) c[i] = u[i] + guidance * (c[i] - u[i]);
  return c;
}

ag::Var diffusion_loss(const Teacher& teacher, const Tensor& clip_images, const ConditionSignal& cond, int t,
                       const Tensor& eps, bool unconditional) {
  const Tensor z_t = teacher.schedule().forward_with(nets::to_latent(clip_images), t, eps);
  return ag::mse(teacher.eps(ag::constant(z_t), t, cond, unconditional), ag::constant(eps));
}

Teacher pretrain_base(const std::vector<worldgen::Scene>& worlds, const PretrainConfig& cfg, TrainLog* log) {
  if (worlds.size() < 8) throw std::invalid_argument("pretrain_base: needs at least 8 scenes");
  if (cfg.steps < 0 || cfg.trajectories_per_scene < 1) throw std::invalid_argument("pretrain_base: bad config");
  Rng rng(cfg.seed);
  Rng data_rng = rng.split();

  struct Sample {
    worldgen::ViewSet views;
    worldgen::RenderMap maps;
  };
  std::vector<Sample> data;
  for (const auto& scene : worlds) {
    for (int j = 0; j < cfg.trajectories_per_scene; ++j) {
      const worldgen::Scene s = j == 0 ? scene : augment(scene, data_rng);
      const auto traj = worldgen::default_trajectory(s, cfg.views, 360.0 * j / cfg.trajectories_per_scene);
      Sample smp{worldgen::render_views(s, traj, cfg.height, cfg.width, cfg.clip_length), {}};
      smp.maps = worldgen::make_render_maps(smp.views);
      data.push_back(std::move(smp));
    }
  }

  Teacher teacher(nets::Denoiser(default_teacher_net(), rng), NoiseSchedule::ddpm_linear());
  Adam opt(teacher.net().params().trainable(), AdamConfig{cfg.lr});
  const int T = teacher.schedule().steps();
  for (int step = 0; step < cfg.steps; ++step) {
    const Sample& smp = data[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(data.size()) - 1))];
    const auto& clips = smp.views.clips;
    const auto& clip = clips[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(clips.size()) - 1))];
    const ConditionSignal cond = make_condition(smp.views, smp.maps, smp.views.image(smp.views.ref_index), clip);
    const int t = static_cast<int>(rng.uniform_int(1, T));
    const bool drop = rng.bernoulli(cfg.cond_dropout);
    const Tensor images = smp.views.gather(clip);
    const Tensor eps = rng.normal_tensor(images.shape());
    ag::Var loss = diffusion_loss(teacher, images, cond, t, eps, drop);
    check_finite(loss.value()[0], "pretrain_base", step);
    if (log) log->losses.push_back(loss.value()[0]);
    ag::backward(loss);
    opt.step();
  }
  return teacher;
}

TrainLog finetune_stage1(Teacher& teacher, const worldgen::ViewSet& views, const Stage1Config& cfg) {
  if (cfg.iters < 0) throw std::invalid_argument("finetune_stage1: iters must be >= 0");
  Rng rng(cfg.seed);
  if (!teacher.net().has_lora()) teacher.net().attach_lora(nets::LayerFilter::Temporal, cfg.rank, rng);
  std::vector<ag::Var> adapters;
  for (const auto& name : teacher.net().lora_param_names()) adapters.push_back(teacher.net().params().at(name));
  Adam opt(adapters, AdamConfig{cfg.lr});

  const worldgen::RenderMap maps = worldgen::make_render_maps(views);
  const Tensor ref = views.image(views.ref_index);
  std::vector<ConditionSignal> conds;
  std::vector<Tensor> images;
  for (const auto& clip : views.clips) {
    conds.push_back(make_condition(views, maps, ref, clip));
    images.push_back(views.gather(clip));
  }
  const int T = teacher.schedule().steps();
  TrainLog log;
  for (int it = 0; it < cfg.iters; ++it) {
    const size_t c = static_cast<size_t>(it) % conds.size();
    const int t = static_cast<int>(rng.uniform_int(1, T));
    const Tensor eps = rng.normal_tensor(images[c].shape());
    ag::Var loss = diffusion_loss(teacher, images[c], conds[c], t, eps);
    check_finite(loss.value()[0], "finetune_stage1", it);
    log.losses.push_back(loss.value()[0]);
    ag::backward(loss);
    opt.step();
  }
  return log;
}

double clip_loss(const Teacher& teacher, const worldgen::ViewSet& views, uint64_t seed, int samples) {
  ag::NoGradGuard ng;
  Rng rng(seed);
  const worldgen::RenderMap maps = worldgen::make_render_maps(views);
  const Tensor ref = views.image(views.ref_index);
  const int T = teacher.schedule().steps();
  double total = 0.0;
  for (int s = 0; s < samples; ++s) {
    const auto& clip = views.clips[static_cast<size_t>(s) % views.clips.size()];
    const int t = static_cast<int>(rng.uniform_int(1, T));
    const Tensor images = views.gather(clip);
    const Tensor eps = rng.normal_tensor(images.shape());
    total += diffusion_loss(teacher, images, make_condition(views, maps, ref, clip), t, eps).value()[0];
  }
  return total / samples;
}

Tensor sample_clip(const Teacher& teacher, const ConditionSignal& cond, Rng& rng, int steps, double guidance) {
  const NoiseSchedule& sch = teacher.schedule();
  const int T = sch.steps();
  steps = std::clamp(steps, 1, T);
  std::vector<int> ts;
  for (int i = 0; i < steps; ++i) {
    const int t = static_cast<int>(std::lround(T - static_cast<double>(i) * (T - 1) / std::max(1, steps - 1)));
    if (ts.empty() || t < ts.back()) ts.push_back(t);
  }
  ts.push_back(0);
  const int64_t V = cond.views(), H = cond.render_maps.dim(1), W = cond.render_maps.dim(2);
  Tensor z = rng.normal_tensor({V, H, W, 3});
  for (size_t i = 0; i + 1 < ts.size(); ++i) {
    const int t = ts[i], s = ts[i + 1];
    const Tensor eps_hat = teacher.eps_cfg(z, t, cond, guidance);
    Tensor x0 = sch.eps_to_x0(z, eps_hat, t);
    for (auto& v : x0.vec()) v = std::clamp(v, -1.0, 1.0);
    const double at = sch.alpha(t), st = sch.sigma(t), as = sch.alpha(s), ss = sch.sigma(s);
    const double var = s == 0 ? 0.0 : (ss * ss) / (st * st) * (1.0 - (at * at) / (as * as));
    const double dir = std::sqrt(std::max(ss * ss - var, 0.0));
    const double sd = std::sqrt(std::max(var, 0.0));
    for (int64_t k = 0; k < z.numel(); ++k) {
      const double e = (z[k] - at * x0[k]) / st;
      z[k] = as * x0[k] + dir * e + (sd > 0.0 ? sd * rng.normal() : 0.0);
    }
  }
  Tensor img = nets::to_image(z);
  for (auto& v : img.vec()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

}  // namespace disco3d::nvs
