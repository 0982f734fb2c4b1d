#include "disco3d/editor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "disco3d/core/errors.hpp"

namespace disco3d::editor {

namespace {

Tensor stack_rows(const std::vector<const Tensor*>& parts) {
  std::vector<int64_t> shape = parts.front()->shape();
  int64_t rows = 0;
  for (const Tensor* p : parts) rows += p->dim(0);
  shape[0] = rows;
  Tensor out(shape);
  int64_t off = 0;
  for (const Tensor* p : parts) {
    std::copy(p->data(), p->data() + p->numel(), out.data() + off);
    off += p->numel();
  }
  return out;
}

void require_images(const Tensor& source, const char* what) {
  if (source.ndim() != 4 || source.dim(3) != 3) {
    throw std::invalid_argument(std::string(what) + ": source must be [V,H,W,3], got " + shape_str(source.shape()));
  }
}

}  // namespace

void SamplerConfig::validate() const {
  if (steps < 1 || refl_lo < 1 || refl_lo > refl_hi || refl_hi > steps) {
    throw std::invalid_argument("SamplerConfig: need 1 <= refl_lo <= refl_hi <= steps");
  }
  if (s_T < 1.0 || s_I < 1.0) throw std::invalid_argument("SamplerConfig: guidance scales must be >= 1");
}

nets::DenoiserConfig default_editor_net() {
  nets::DenoiserConfig cfg;
  cfg.cond_image_channels = 3;
  cfg.temporal = false;
  cfg.ref_encoder = false;
  cfg.num_codes = worldgen::kNumEditCodes;
  return cfg;
}

Editor::Editor(nets::Denoiser net, NoiseSchedule schedule) : net_(std::move(net)), schedule_(std::move(schedule)) {
  if (net_.config().temporal) throw std::invalid_argument("Editor: the editor network must be per-view");
}

Editor::Precond Editor::precond(int t) const {
  if (t < 1) throw std::out_of_range("editor: denoising step must be >= 1");
  const double se = schedule_.noise_ratio(t);
  const double sd = kSigmaData;
  const double n2 = se * se + sd * sd;
  return {sd * sd / n2, se * sd / std::sqrt(n2), 1.0 / std::sqrt(n2), std::log(se) / 4.0};
}

ag::Var Editor::forward_raw(const ag::Var& z_t, const std::vector<int>& t, const Tensor& cond_image,
                            const std::vector<int>& codes) const {
  const int64_t V = z_t.value().dim(0);
  if (static_cast<int64_t>(t.size()) != V) throw std::invalid_argument("editor: one step per view");
  std::vector<double> in_scale(static_cast<size_t>(V));
  nets::DenoiserInputs in;
  in.cond_image = cond_image;
  in.codes = codes;
  in.time.resize(static_cast<size_t>(V));
  for (int64_t v = 0; v < V; ++v) {
    const Precond p = precond(t[static_cast<size_t>(v)]);
    in_scale[static_cast<size_t>(v)] = p.c_in / schedule_.alpha(t[static_cast<size_t>(v)]);
    in.time[static_cast<size_t>(v)] = p.c_noise;
  }
  return net_.forward(ag::scale_groups(z_t, in_scale), in);
}

ag::Var Editor::denoise(const ag::Var& z_t, int t, const Tensor& source, const std::vector<int>& codes,
                        bool drop_image) const {
  require_images(source, "editor");
  const int64_t V = z_t.value().dim(0);
  const Tensor cond = drop_image ? Tensor(source.shape(), 0.0) : nets::to_latent(source);
  ag::Var F = forward_raw(z_t, std::vector<int>(static_cast<size_t>(V), t), cond, codes);
  const Precond p = precond(t);
  return ag::linear_combination({z_t, F}, {p.c_skip / schedule_.alpha(t), p.c_out});
}

ag::Var Editor::eps(const ag::Var& z_t, int t, const Tensor& source, const std::vector<int>& codes,
                    bool drop_image) const {
  ag::Var d = denoise(z_t, t, source, codes, drop_image);
  const double a = schedule_.alpha(t), s = schedule_.sigma(t);
  return ag::linear_combination({z_t, d}, {1.0 / s, -a / s});
}

ag::Var Editor::cfg_eps(const ag::Var& z_t, int t, const Tensor& source, int code, const SamplerConfig& cfg) const {
  require_images(source, "cfg_eps");
  const auto shape = z_t.shape();
  const int64_t V = shape[0], row = z_t.numel() / V;
  // The three branches run as one batch: (src, code), (src, null), (null, null).
  ag::Var flat = ag::reshape(z_t, {V, row});
  ag::Var z3 = ag::reshape(ag::concat_rows({flat, flat, flat}), {3 * V, shape[1], shape[2], shape[3]});
  const Tensor src = nets::to_latent(source);
  const Tensor none(source.shape(), 0.0);
  const Tensor cond = stack_rows({&src, &src, &none});
  std::vector<int> codes(static_cast<size_t>(3 * V), -1);
  std::fill(codes.begin(), codes.begin() + V, code);

  ag::Var F = forward_raw(z3, std::vector<int>(static_cast<size_t>(3 * V), t), cond, codes);
  const Precond p = precond(t);
  const double a = schedule_.alpha(t), s = schedule_.sigma(t);
  // eps = (z - a D) / s with D = c_skip z / a + c_out F.
  ag::Var e = ag::linear_combination({z3, F}, {(1.0 - p.c_skip) / s, -a * p.c_out / s});
  ag::Var rows = ag::reshape(e, {3 * V, row});
  std::vector<int64_t> idx(static_cast<size_t>(V));
  auto branch = [&](int64_t k) {
    for (int64_t v = 0; v < V; ++v) idx[static_cast<size_t>(v)] = k * V + v;
    return ag::take_rows(rows, idx);
  };
  ag::Var e_full = branch(0), e_src = branch(1), e_null = branch(2);
  ag::Var out = ag::linear_combination({e_full, e_src, e_null}, {cfg.s_T, cfg.s_I - cfg.s_T, 1.0 - cfg.s_I});
  return ag::reshape(out, shape);
}

ag::Var Editor::raw_output(const Tensor& z_t, const std::vector<int>& t, const Tensor& source,
                           const std::vector<int>& codes, const std::vector<bool>& drop_image) const {
  require_images(source, "editor");
  Tensor cond = nets::to_latent(source);
  const int64_t V = source.dim(0), row = source.numel() / std::max<int64_t>(V, 1);
  if (static_cast<int64_t>(drop_image.size()) != V) throw std::invalid_argument("editor: one drop flag per view");
  for (int64_t v = 0; v < V; ++v)
    if (drop_image[static_cast<size_t>(v)]) std::fill(cond.data() + v * row, cond.data() + (v + 1) * row, 0.0);
  return forward_raw(ag::constant(z_t), t, cond, codes);
}

Tensor Editor::raw_target(const Tensor& z_t, const Tensor& x0, const std::vector<int>& t) const {
  require_same_shape(z_t, x0, "raw_target");
  const int64_t V = z_t.dim(0), row = z_t.numel() / V;
  Tensor out(z_t.shape());
  for (int64_t v = 0; v < V; ++v) {
    const int tv = t[static_cast<size_t>(v)];
    const Precond p = precond(tv);
    const double a = schedule_.alpha(tv);
    for (int64_t i = v * row; i < (v + 1) * row; ++i) out[i] = (x0[i] - p.c_skip * z_t[i] / a) / p.c_out;
  }
  return out;
}

Tensor initial_latent(const Editor& editor, int64_t views, int64_t height, int64_t width, Rng& rng) {
  Tensor z = rng.normal_tensor({views, height, width, 3});
  const double s = editor.schedule().sigma(editor.schedule().steps());
  for (auto& v : z.vec()) v *= s;
  return z;
}

EditBatch refl_sample(const Editor& editor, const Tensor& source, int code, const SamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  const int t = static_cast<int>(rng.uniform_int(cfg.refl_lo, cfg.refl_hi));
  const Tensor z_T = initial_latent(editor, source.dim(0), source.dim(1), source.dim(2), rng);
  return refl_sample_at(editor, source, code, cfg, z_T, t);
}

EditBatch refl_sample_at(const Editor& editor, const Tensor& source, int code, const SamplerConfig& cfg,
                         const Tensor& z_T, int t) {
  require_images(source, "refl_sample");
  require_same_shape(z_T, source, "refl_sample");
  const NoiseSchedule& sch = editor.schedule();
  const int T = sch.steps();
  if (cfg.steps != T) throw std::invalid_argument("refl_sample: sampler steps differ from the editor schedule");
  if (t < 1 || t > T) throw std::out_of_range("refl_sample: tracked step outside [1, T]");
  Tensor z = z_T;
  {
    ag::NoGradGuard ng;
    for (int j = T; j > t; --j) {
      const Tensor e = editor.cfg_eps(ag::constant(z), j, source, code, cfg).value();
      z = sch.step_from_x0(z, sch.eps_to_x0(z, e, j), j);
    }
  }
  const ag::Var zt = ag::constant(z);
  ag::Var x0 = sch.eps_to_x0(zt, editor.cfg_eps(zt, t, source, code, cfg), t);
  return EditBatch{nets::to_image(x0), source, code, t, z_T};
}

ag::Var sample_tracked(const Editor& editor, const Tensor& source, int code, const SamplerConfig& cfg,
                       const Tensor& z_T) {
  require_images(source, "sample_tracked");
  require_same_shape(z_T, source, "sample_tracked");
  const NoiseSchedule& sch = editor.schedule();
  const int T = sch.steps();
  if (cfg.steps != T) throw std::invalid_argument("sample_tracked: sampler steps differ from the editor schedule");
  ag::Var z = ag::constant(z_T);
  for (int j = T; j > 1; --j) {
    const ag::Var x0 = sch.eps_to_x0(z, editor.cfg_eps(z, j, source, code, cfg), j);
    const double a = sch.alpha(j), s = sch.sigma(j), ap = sch.alpha(j - 1), sp = sch.sigma(j - 1);
    z = ag::linear_combination({z, x0}, {sp / s, ap - sp * a / s});
  }
  return nets::to_image(sch.eps_to_x0(z, editor.cfg_eps(z, 1, source, code, cfg), 1));
}

Tensor sample(const Editor& editor, const Tensor& source, int code, const SamplerConfig& cfg, Rng& rng) {
  ag::NoGradGuard ng;
  const Tensor z_T = initial_latent(editor, source.dim(0), source.dim(1), source.dim(2), rng);
  Tensor img = refl_sample_at(editor, source, code, cfg, z_T, 1).images.value();
  for (auto& v : img.vec()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

Tensor edit_reference(const Editor& editor, const Tensor& source_ref, int code, const SamplerConfig& cfg, Rng& rng) {
  if (source_ref.ndim() != 3) throw std::invalid_argument("edit_reference: expects one [H,W,3] image");
  const Tensor out = sample(editor, source_ref.reshaped({1, source_ref.dim(0), source_ref.dim(1), 3}), code, cfg, rng);
  return out.reshaped(source_ref.shape());
}

EditPairs make_edit_pairs(const std::vector<worldgen::Scene>& worlds, int views, int height, int width) {
  std::vector<Tensor> src, tgt;
  EditPairs pairs;
  for (const auto& scene : worlds) {
    const auto traj = worldgen::default_trajectory(scene, views);
    const worldgen::ViewSet source = worldgen::render_views(scene, traj, height, width, views);
    for (int code = 0; code < worldgen::kNumEditCodes; ++code) {
      for (int var = 0; var < worldgen::edit_info(code).variants; ++var) {
        const worldgen::Scene edited = worldgen::apply_edit(scene, {code, 0, static_cast<uint64_t>(var)});
        const worldgen::ViewSet target = worldgen::render_views(edited, traj, height, width, views);
        src.push_back(source.images);
        tgt.push_back(target.images);
        pairs.codes.insert(pairs.codes.end(), static_cast<size_t>(views), code);
      }
    }
  }
  std::vector<const Tensor*> sp, tp;
  for (size_t i = 0; i < src.size(); ++i) {
    sp.push_back(&src[i]);
    tp.push_back(&tgt[i]);
  }
  pairs.source = stack_rows(sp);
  pairs.target = stack_rows(tp);
  return pairs;
}

Editor pretrain_editor(const std::vector<worldgen::Scene>& worlds, const EditorPretrainConfig& cfg,
                       nvs::TrainLog* log) {
  if (worlds.empty()) throw std::invalid_argument("pretrain_editor: no worlds");
  if (cfg.batch < 1 || cfg.steps < 0) throw std::invalid_argument("pretrain_editor: bad config");
  Rng rng(cfg.seed);
  const EditPairs pairs = make_edit_pairs(worlds, cfg.views, cfg.height, cfg.width);
  Editor editor(nets::Denoiser(default_editor_net(), rng), NoiseSchedule::edm());
  Adam opt(editor.net().params().trainable(), AdamConfig{cfg.lr});
  const int T = editor.schedule().steps();
  const int64_t B = cfg.batch, H = cfg.height, W = cfg.width, row = H * W * 3;
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor source({B, H, W, 3}), x0({B, H, W, 3});
    std::vector<int> codes(static_cast<size_t>(B)), ts(static_cast<size_t>(B));
    std::vector<bool> drop(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b) {
      const int64_t k = rng.uniform_int(0, pairs.size() - 1);
      std::copy(pairs.source.data() + k * row, pairs.source.data() + (k + 1) * row, source.data() + b * row);
      std::copy(pairs.target.data() + k * row, pairs.target.data() + (k + 1) * row, x0.data() + b * row);
      codes[static_cast<size_t>(b)] = rng.bernoulli(cfg.cond_dropout) ? -1 : pairs.codes[static_cast<size_t>(k)];
      drop[static_cast<size_t>(b)] = rng.bernoulli(cfg.cond_dropout);
      ts[static_cast<size_t>(b)] = static_cast<int>(rng.uniform_int(1, T));
    }
    x0 = nets::to_latent(x0);
    Tensor z_t(x0.shape());
    for (int64_t b = 0; b < B; ++b) {
      const double a = editor.schedule().alpha(ts[static_cast<size_t>(b)]);
      const double s = editor.schedule().sigma(ts[static_cast<size_t>(b)]);
      for (int64_t i = b * row; i < (b + 1) * row; ++i) z_t[i] = a * x0[i] + s * rng.normal();
    }
    ag::Var loss = ag::mse(editor.raw_output(z_t, ts, source, codes, drop),
                           ag::constant(editor.raw_target(z_t, x0, ts)));
    if (!std::isfinite(loss.value()[0])) {
      throw NumericalError("pretrain_editor: loss became non-finite at step " + std::to_string(step));
    }
    if (log) log->losses.push_back(loss.value()[0]);
    ag::backward(loss);
    opt.step();
  }
  return editor;
}

}  // namespace disco3d::editor
