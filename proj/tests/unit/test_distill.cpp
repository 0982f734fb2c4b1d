#include <doctest.h>

#include <fstream>

#include "disco3d/distill.hpp"
#include "unit/fd_oracle.hpp"

using namespace disco3d;

namespace {

struct Models {
  worldgen::ViewSet views;
  nvs::Teacher teacher;
  editor::Editor editor;
};

Models make_models(uint64_t seed) {
  Rng rng(seed);
  const auto scene = worldgen::generate_scene(seed, worldgen::Complexity::Small);
  Models m{worldgen::render_views(scene, worldgen::default_trajectory(scene, 5), 16, 16, 3),
           nvs::Teacher(nets::Denoiser(nvs::default_teacher_net(), rng), NoiseSchedule::ddpm_linear()),
           editor::Editor(nets::Denoiser(editor::default_editor_net(), rng), NoiseSchedule::edm())};
  return m;
}

std::map<std::string, Tensor> snapshot(const ParamStore& p) { return p.snapshot(); }

bool same(const std::map<std::string, Tensor>& a, const std::map<std::string, Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [k, v] : a) {
    const auto it = b.find(k);
    if (it == b.end() || it->second.vec() != v.vec()) return false;
  }
  return true;
}

// Perturbs every adapter so theta reaches the output.
void perturb_theta(distill::DistillState& st, double scale, uint64_t seed) {
  Rng rng(seed);
  for (const auto& name : st.editor.net().lora_param_names())
    for (auto& v : st.editor.net().params().at(name).mutable_value().vec()) v += scale * rng.normal();
}

}  // namespace

TEST_CASE("omega and config parsing") {
  const auto sch = NoiseSchedule::ddpm_linear();
  CHECK(distill::omega(distill::OmegaKind::Constant, sch, 500) == 1.0);
  const double s = sch.sigma(500);
  CHECK(distill::omega(distill::OmegaKind::SigmaSq, sch, 500) == doctest::Approx(s * s / sch.alpha(500)));
  CHECK(distill::omega_kind_from_string("sigma_sq") == distill::OmegaKind::SigmaSq);
  CHECK_THROWS_AS(distill::omega_kind_from_string("cubic"), std::invalid_argument);
  CHECK(distill::reduction_from_string(distill::to_string(distill::Reduction::Sum)) == distill::Reduction::Sum);

  distill::DistillConfig c;
  CHECK(c.alpha == 1e2);
  CHECK(c.lr == 4e-4);
  CHECK(c.iters == 100);
  CHECK(c.t_lo == 0.02);
  CHECK(c.t_hi == 0.98);
  c.alpha = -1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.iters = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("regularizer is exactly zero at theta zero with the cached noise") {
  Models m = make_models(1);
  distill::DistillConfig cfg;
  cfg.seed = 4;
  const distill::DistillState st = distill::init_state(m.editor, m.teacher, m.views, 1, cfg);
  const ag::Var cur = distill::reedit_reference(st, m.views, cfg);
  CHECK(distill::reg_loss(cur, st.cached_ref).value()[0] == 0.0);
  CHECK(st.cond_e.size() == m.views.clips.size());
  CHECK_THROWS_AS(distill::reg_loss(cur, Tensor({2, 2})), std::invalid_argument);
}

TEST_CASE("identical scores give a zero distillation gradient") {
  Models m = make_models(2);
  distill::DistillConfig cfg;
  cfg.cfg_teacher = 1.0;
  distill::DistillState st = distill::init_state(m.editor, m.teacher, m.views, 1, cfg);
  perturb_theta(st, 0.3, 9);
  Rng rng(5);
  const auto batch = editor::refl_sample_at(st.editor, m.views.gather(m.views.clips[0]), 1, cfg.sampler,
                                            editor::initial_latent(st.editor, 3, 16, 16, rng), 18);
  const Tensor eps = rng.normal_tensor(batch.images.shape());
  st.editor.net().params().zero_grad();
  ag::backward(distill::distill_surrogate(st, batch.images, st.cond_e[0], 400, eps, cfg));
  for (const auto& name : st.editor.net().lora_param_names()) {
    const Tensor g = st.editor.net().params().at(name).grad();
    for (int64_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 0.0);
  }
}

TEST_CASE("surrogate gradient is the weighted score difference and linear in omega") {
  Models m = make_models(3);
  distill::DistillConfig cfg;
  distill::DistillState st = distill::init_state(m.editor, m.teacher, m.views, 2, cfg);
  Rng prng(4);
  for (const auto& name : st.phi.net().params().names())
    for (auto& v : st.phi.net().params().at(name).mutable_value().vec()) v += 0.05 * prng.normal();

  Rng rng(8);
  Tensor img({3, 16, 16, 3});
  for (auto& v : img.vec()) v = rng.uniform();
  const Tensor eps = rng.normal_tensor(img.shape());
  const int t = 300;
  auto grad_for = [&](distill::OmegaKind k, distill::Reduction r) {
    distill::DistillConfig c = cfg;
    c.omega = k;
    c.reduction = r;
    ag::Var x = ag::parameter(img);
    ag::backward(distill::distill_surrogate(st, x, st.cond_e[0], t, eps, c));
    return x.grad();
  };
  const Tensor g_const = grad_for(distill::OmegaKind::Constant, distill::Reduction::Sum);
  const Tensor g_sig = grad_for(distill::OmegaKind::SigmaSq, distill::Reduction::Sum);
  const Tensor g_mean = grad_for(distill::OmegaKind::Constant, distill::Reduction::Mean);

  const auto& sch = st.teacher.schedule();
  const Tensor z_t = sch.forward_with(nets::to_latent(img), t, eps);
  const Tensor et = st.teacher.eps_cfg(z_t, t, st.cond_e[0], cfg.cfg_teacher);
  const Tensor ep = st.phi.eps_cfg(z_t, t, st.cond_e[0], 1.0);
  const double w = distill::omega(distill::OmegaKind::SigmaSq, sch, t);
  double norm = 0.0;
  for (int64_t i = 0; i < img.numel(); ++i) {
    CHECK(g_const[i] == doctest::Approx(2.0 * (et[i] - ep[i])).epsilon(1e-9));
    CHECK(g_sig[i] == doctest::Approx(w * g_const[i]).epsilon(1e-9));
    CHECK(g_mean[i] == doctest::Approx(g_const[i] / static_cast<double>(img.numel())).epsilon(1e-9));
    norm += g_const[i] * g_const[i];
  }
  CHECK(norm > 0.0);
}

TEST_CASE("alternation: theta updates leave phi alone and phi updates leave theta alone") {
  Models m = make_models(4);
  distill::DistillConfig cfg;
  cfg.phi_steps = 1;
  distill::DistillState st = distill::init_state(m.editor, m.teacher, m.views, 1, cfg);
  const auto teacher0 = snapshot(st.teacher.net().params());
  const auto phi0 = snapshot(st.phi.net().params());
  const auto editor0 = snapshot(st.editor.net().params());

  Rng rng(2);
  std::vector<distill::PhiBatch> batches{{m.views.gather(m.views.clips[0]), &st.cond_e[0]}};
  distill::phi_update(st, batches, cfg, rng);
  CHECK(same(snapshot(st.editor.net().params()), editor0));
  CHECK(same(snapshot(st.teacher.net().params()), teacher0));
  CHECK_FALSE(same(snapshot(st.phi.net().params()), phi0));

  const auto phi1 = snapshot(st.phi.net().params());
  const auto batch = editor::refl_sample_at(st.editor, m.views.gather(m.views.clips[0]), 1, cfg.sampler,
                                            editor::initial_latent(st.editor, 3, 16, 16, rng), 16);
  const Tensor eps = rng.normal_tensor(batch.images.shape());
  ag::Var loss = ag::add(distill::distill_surrogate(st, batch.images, st.cond_e[0], 500, eps, cfg),
                         ag::scale(distill::reg_loss(distill::reedit_reference(st, m.views, cfg), st.cached_ref), cfg.alpha));
  ag::backward(loss);
  for (const auto& [name, p] : st.phi.net().params().all()) CHECK_FALSE(p.has_grad());
  st.theta_opt->step();
  CHECK(same(snapshot(st.phi.net().params()), phi1));
  CHECK(same(snapshot(st.teacher.net().params()), teacher0));
}

TEST_CASE("a full iteration changes only adapters and phi, and logs finite values") {
  Models m = make_models(5);
  distill::DistillConfig cfg;
  cfg.iters = 2;
  distill::DistillState st = distill::init_state(m.editor, m.teacher, m.views, 1, cfg);
  const auto teacher0 = snapshot(st.teacher.net().params());
  const auto editor0 = snapshot(st.editor.net().params());
  distill::train(st, m.views, cfg);
  REQUIRE(st.history.size() == 2);
  CHECK(st.iteration == 2);
  CHECK(same(snapshot(st.teacher.net().params()), teacher0));
  const auto editor1 = snapshot(st.editor.net().params());
  const auto lora = st.editor.net().lora_param_names();
  for (const auto& [name, v] : editor0) {
    const bool adapter = std::find(lora.begin(), lora.end(), name) != lora.end();
    if (!adapter) CHECK(editor1.at(name).vec() == v.vec());
  }
  for (const auto& h : st.history) {
    CHECK(std::isfinite(h.l_total));
    CHECK(h.l_total == doctest::Approx(h.l_distill + cfg.alpha * h.l_reg));
    CHECK(h.t_refl >= 15);
    CHECK(h.t_refl <= 20);
  }
  CHECK(st.history[0].l_reg == 0.0);

  distill::write_log_csv("test_distill_log.csv", st.history);
  std::ifstream in("test_distill_log.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "iter,L_distill_surrogate,L_reg,L_total,consistency_metric");
}

TEST_CASE("training is a pure function of the seed") {
  Models m = make_models(6);
  distill::DistillConfig cfg;
  cfg.iters = 1;
  cfg.seed = 12;
  distill::DistillState a = distill::init_state(m.editor, m.teacher, m.views, 2, cfg);
  distill::DistillState b = distill::init_state(m.editor, m.teacher, m.views, 2, cfg);
  distill::train(a, m.views, cfg);
  distill::train(b, m.views, cfg);
  CHECK(a.history[0].l_total == b.history[0].l_total);
  CHECK(same(snapshot(a.editor.net().params()), snapshot(b.editor.net().params())));
}
