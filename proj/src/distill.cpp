#include "disco3d/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <stdexcept>

#include "disco3d/eval/metrics.hpp"
#include "disco3d/core/errors.hpp"

namespace disco3d::distill {

namespace {

Tensor clamp01(Tensor t) {
  for (auto& v : t.vec()) v = std::clamp(v, 0.0, 1.0);
  return t;
}

void check_finite(double v, const char* what, int iter) {
  if (!std::isfinite(v)) {
    throw NumericalError(std::string("distill: ") + what + " became non-finite at iteration " +
                             std::to_string(iter));
  }
}

}  // namespace

std::string to_string(OmegaKind k) { return k == OmegaKind::Constant ? "const" : "sigma_sq"; }

OmegaKind omega_kind_from_string(const std::string& s) {
  if (s == "const" || s == "constant") return OmegaKind::Constant;
  if (s == "sigma_sq") return OmegaKind::SigmaSq;
  throw std::invalid_argument("unknown omega kind: " + s);
}

std::string to_string(Reduction r) { return r == Reduction::Sum ? "sum" : "mean"; }

Reduction reduction_from_string(const std::string& s) {
  if (s == "sum") return Reduction::Sum;
  if (s == "mean") return Reduction::Mean;
  throw std::invalid_argument("unknown surrogate reduction: " + s);
}

double omega(OmegaKind kind, const NoiseSchedule& schedule, int t) {
  if (kind == OmegaKind::Constant) return 1.0;
  const double s = schedule.sigma(t);
  return s * s / schedule.alpha(t);
}

void DistillConfig::validate() const {
  if (!(alpha >= 0.0)) throw std::invalid_argument("distill: alpha must be >= 0");
  if (iters < 1) throw std::invalid_argument("distill: iters must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("distill: lr must be positive");
  if (!(t_lo >= 0.0 && t_lo < t_hi && t_hi <= 1.0)) throw std::invalid_argument("distill: need 0 <= t_lo < t_hi <= 1");
  if (phi_steps < 0) throw std::invalid_argument("distill: phi_steps must be >= 0");
  if (cfg_teacher < 1.0) throw std::invalid_argument("distill: teacher guidance must be >= 1");
  sampler.validate();
}

ag::Var reedit_reference(const DistillState& state, const worldgen::ViewSet& source, const DistillConfig& cfg) {
  const Tensor ref = source.image(source.ref_index);
  const Tensor src = ref.reshaped({1, ref.dim(0), ref.dim(1), ref.dim(2)});
  return editor::sample_tracked(state.editor, src, state.code, cfg.sampler, state.ref_noise);
}

DistillState init_state(const editor::Editor& ed, const nvs::Teacher& teacher, const worldgen::ViewSet& source,
                        int code, const DistillConfig& cfg) {
  cfg.validate();
  worldgen::edit_info(code);
  DistillState st;
  st.code = code;
  st.editor = ed.clone();
  Rng lora_rng = Rng::derive(cfg.seed, 1);
  st.editor.net().attach_lora(nets::LayerFilter::SelfAttention, cfg.rank, lora_rng);

  st.teacher = teacher.clone();
  st.teacher.net().params().freeze_all();
  st.phi = teacher.clone();
  for (const auto& name : st.phi.net().params().names()) st.phi.net().params().set_trainable(name, true);

  Rng noise_rng = Rng::derive(cfg.seed, 2);
  st.ref_noise = editor::initial_latent(st.editor, 1, source.height(), source.width(), noise_rng);
  {
    ag::NoGradGuard ng;
    st.cached_ref = reedit_reference(st, source, cfg).value();
  }
  const Tensor ref_edit = clamp01(st.cached_ref).reshaped({source.height(), source.width(), 3});
  const worldgen::RenderMap maps = worldgen::make_render_maps(ref_edit, source);
  for (const auto& clip : source.clips) st.cond_e.push_back(nvs::make_condition(source, maps, ref_edit, clip));

  std::vector<ag::Var> theta;
  for (const auto& name : st.editor.net().lora_param_names()) theta.push_back(st.editor.net().params().at(name));
  st.theta_opt.emplace(theta, AdamConfig{cfg.lr});
  st.phi_opt.emplace(st.phi.net().params().trainable(), AdamConfig{cfg.lr});
  return st;
}

ag::Var reg_loss(const ag::Var& current, const Tensor& cached) {
  require_same_shape(current.value(), cached, "reg_loss");
  return ag::mse(current, ag::constant(cached));
}

ag::Var distill_surrogate(const DistillState& state, const ag::Var& images, const nvs::ConditionSignal& cond_e, int t,
                          const Tensor& eps, const DistillConfig& cfg) {
  const NoiseSchedule& sch = state.teacher.schedule();
  ag::Var z0 = ag::add(ag::scale(images, 2.0), ag::constant(Tensor(images.shape(), -1.0)));
  const Tensor z_t = sch.forward_with(z0.value(), t, eps);
  const Tensor e_teacher = state.teacher.eps_cfg(z_t, t, cond_e, cfg.cfg_teacher);
  Tensor e_phi;
  {
    ag::NoGradGuard ng;
    e_phi = state.phi.eps(ag::constant(z_t), t, cond_e).value();
  }
  double w = omega(cfg.omega, sch, t);
  if (cfg.reduction == Reduction::Mean) w /= static_cast<double>(z_t.numel());
  Tensor g(z_t.shape());
  for (int64_t i = 0; i < g.numel(); ++i) g[i] = w * (e_teacher[i] - e_phi[i]);
  return ag::dot_const(z0, g);
}

double phi_update(DistillState& state, const std::vector<PhiBatch>& batches, const DistillConfig& cfg, Rng& rng) {
  if (batches.empty() || cfg.phi_steps == 0) return 0.0;
  const int T = state.phi.schedule().steps();
  double mean_loss = 0.0;
  for (int s = 0; s < cfg.phi_steps; ++s) {
    std::vector<ag::Var> losses;
    for (const auto& b : batches) {
      const int t = static_cast<int>(rng.uniform_int(1, T));
      const Tensor eps = rng.normal_tensor(b.images.shape());
      losses.push_back(nvs::diffusion_loss(state.phi, b.images, *b.cond, t, eps));
    }
    std::vector<double> w(losses.size(), 1.0 / static_cast<double>(losses.size()));
    ag::Var loss = ag::linear_combination(losses, w);
    mean_loss += loss.value()[0] / cfg.phi_steps;
    ag::backward(loss);
    state.phi_opt->step();
  }
  return mean_loss;
}

IterLog train_step(DistillState& state, const worldgen::ViewSet& source, const DistillConfig& cfg, Rng& rng) {
  const int N = source.views(), H = source.height(), W = source.width();
  const int64_t row = static_cast<int64_t>(H) * W * 3;
  const int ref = source.ref_index;
  IterLog log;
  log.iter = state.iteration;

  std::vector<int> others;
  for (int v = 0; v < N; ++v)
    if (v != ref) others.push_back(v);
  std::vector<int64_t> slot(static_cast<size_t>(N), 0);
  for (size_t k = 0; k < others.size(); ++k) slot[static_cast<size_t>(others[k])] = static_cast<int64_t>(k) + 1;

  log.t_refl = static_cast<int>(rng.uniform_int(cfg.sampler.refl_lo, cfg.sampler.refl_hi));
  const Tensor z_T = editor::initial_latent(state.editor, static_cast<int64_t>(others.size()), H, W, rng);
  const editor::EditBatch batch =
      editor::refl_sample_at(state.editor, source.gather(others), state.code, cfg.sampler, z_T, log.t_refl);
  const ag::Var ref_out = reedit_reference(state, source, cfg);
  const ag::Var all = ag::concat_rows({ag::reshape(ref_out.detach(), {1, row}),
                                       ag::reshape(batch.images, {static_cast<int64_t>(others.size()), row})});

  ag::Var surrogate;
  std::vector<Tensor> clip_images;
  const NoiseSchedule& sch = state.teacher.schedule();
  for (size_t c = 0; c < source.clips.size(); ++c) {
    const auto& clip = source.clips[c];
    std::vector<int64_t> rows;
    for (int v : clip) rows.push_back(slot[static_cast<size_t>(v)]);
    ag::Var images = ag::reshape(ag::take_rows(all, rows), {static_cast<int64_t>(clip.size()), H, W, 3});
    const int t = sch.sample_t_uniform(cfg.t_lo, cfg.t_hi, rng);
    const Tensor eps = rng.normal_tensor(images.shape());
    ag::Var s = distill_surrogate(state, images, state.cond_e[c], t, eps, cfg);
    surrogate = surrogate.defined() ? ag::add(surrogate, s) : s;
    clip_images.push_back(images.value());
  }
  ag::Var reg = reg_loss(ref_out, state.cached_ref);
  ag::Var total = ag::add(surrogate, ag::scale(reg, cfg.alpha));
  log.l_distill = surrogate.value()[0];
  log.l_reg = reg.value()[0];
  log.l_total = total.value()[0];
  check_finite(log.l_total, "L_total", state.iteration);

  Tensor outputs({N, H, W, 3});
  for (int v = 0; v < N; ++v)
    std::copy(all.value().data() + slot[static_cast<size_t>(v)] * row,
              all.value().data() + (slot[static_cast<size_t>(v)] + 1) * row, outputs.data() + v * row);
  log.consistency = eval::reproj_inconsistency(clamp01(outputs), source).value;

  ag::backward(total);
  state.theta_opt->step();

  std::vector<PhiBatch> phi_batches;
  for (size_t c = 0; c < clip_images.size(); ++c) phi_batches.push_back({clip_images[c], &state.cond_e[c]});
  log.l_phi = phi_update(state, phi_batches, cfg, rng);
  check_finite(log.l_phi, "phi loss", state.iteration);

  state.history.push_back(log);
  ++state.iteration;
  return log;
}

void train(DistillState& state, const worldgen::ViewSet& source, const DistillConfig& cfg) {
  cfg.validate();
  Rng rng = Rng::derive(cfg.seed, 3);
  for (int i = 0; i < cfg.iters; ++i) train_step(state, source, cfg, rng);
}

void write_log_csv(const std::string& path, const std::vector<IterLog>& history) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "iter,L_distill_surrogate,L_reg,L_total,consistency_metric\n";
  out << std::setprecision(17);
  for (const auto& h : history)
    out << h.iter << ',' << h.l_distill << ',' << h.l_reg << ',' << h.l_total << ',' << h.consistency << '\n';
}

}  // namespace disco3d::distill
