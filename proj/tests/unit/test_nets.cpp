#include <doctest.h>

#include "disco3d/editor.hpp"
#include "disco3d/nets.hpp"
#include "disco3d/nvs.hpp"
#include "unit/fd_oracle.hpp"

using namespace disco3d;
using disco3d::testing::central_difference;
using disco3d::testing::relative_error;

namespace {

nets::DenoiserInputs teacher_inputs(Rng& rng, int64_t v, int64_t h, int64_t w) {
  nets::DenoiserInputs in;
  in.cond_image = rng.normal_tensor({v, h, w, 4});
  for (int64_t i = 0; i < v; ++i) in.time.push_back(0.1 + 0.2 * static_cast<double>(i));
  in.ref_image = rng.normal_tensor({h, w, 3});
  in.camera_tags = rng.normal_tensor({v, 6});
  return in;
}

nets::DenoiserInputs editor_inputs(Rng& rng, int64_t v, int64_t h, int64_t w) {
  nets::DenoiserInputs in;
  in.cond_image = rng.normal_tensor({v, h, w, 3});
  for (int64_t i = 0; i < v; ++i) {
    in.time.push_back(0.3 * static_cast<double>(i));
    in.codes.push_back(static_cast<int>(i) % 2 ? -1 : 1);
  }
  return in;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("zero-initialised adapters leave the output bit-exact") {
  Rng rng(11);
  nets::Denoiser teacher(nvs::default_teacher_net(), rng);
  const auto in = teacher_inputs(rng, 3, 8, 8);
  const ag::Var z = ag::constant(rng.normal_tensor({3, 8, 8, 3}));
  const Tensor before = teacher.forward(z, in).value();
  teacher.attach_lora(nets::LayerFilter::Temporal, 4, rng);
  CHECK(bit_equal(before, teacher.forward(z, in).value()));

  nets::Denoiser editor(editor::default_editor_net(), rng);
  const auto ein = editor_inputs(rng, 2, 8, 8);
  const ag::Var ze = ag::constant(rng.normal_tensor({2, 8, 8, 3}));
  const Tensor ebefore = editor.forward(ze, ein).value();
  editor.attach_lora(nets::LayerFilter::SelfAttention, 4, rng);
  CHECK(bit_equal(ebefore, editor.forward(ze, ein).value()));
}

TEST_CASE("adapter placement audit and parameter count") {
  Rng rng(2);
  nets::Denoiser teacher(nvs::default_teacher_net(), rng);
  const auto created = teacher.attach_lora(nets::LayerFilter::Temporal, 4, rng);
  REQUIRE_FALSE(created.empty());
  int64_t expected = 0;
  for (const auto& ad : created) {
    CHECK(ad.target.find(".temporal_attn.") != std::string::npos);
    const Tensor& w = teacher.params().at(ad.target + ".weight").value();
    CHECK(ad.parameter_count() == 4 * (w.dim(0) + w.dim(1)));
    expected += ad.parameter_count();
  }
  for (const auto& name : teacher.params().trainable_names()) {
    CHECK(name.find(".temporal_attn.") != std::string::npos);
    CHECK((name.find(".lora_A") != std::string::npos || name.find(".lora_B") != std::string::npos));
  }
  CHECK(teacher.params().count(true) == expected);

  nets::Denoiser editor(editor::default_editor_net(), rng);
  const auto ecreated = editor.attach_lora(nets::LayerFilter::SelfAttention, 4, rng);
  REQUIRE_FALSE(ecreated.empty());
  int64_t eexpected = 0;
  for (const auto& ad : ecreated) eexpected += ad.parameter_count();
  for (const auto& name : editor.params().trainable_names()) {
    CHECK(name.find(".self_attn.") != std::string::npos);
    CHECK(name.find("cross") == std::string::npos);
  }
  CHECK(editor.params().count(true) == eexpected);
  CHECK(editor.layers_matching(nets::LayerFilter::Temporal).empty());
  CHECK_THROWS_AS(editor.attach_lora(nets::LayerFilter::Temporal, 4, rng), std::invalid_argument);
}

TEST_CASE("adapter rank must stay below the layer dimensions") {
  Rng rng(3);
  nets::Denoiser editor(editor::default_editor_net(), rng);
  CHECK_THROWS_AS(editor.attach_lora(nets::LayerFilter::SelfAttention, 0, rng), std::invalid_argument);
  CHECK_THROWS_AS(editor.attach_lora(nets::LayerFilter::SelfAttention, 1000, rng), std::invalid_argument);
}

TEST_CASE("denoiser parameter gradients match central differences") {
  Rng rng(5);
  nets::DenoiserConfig cfg = nvs::default_teacher_net();
  cfg.channels = 8;
  nets::Denoiser net(cfg, rng);
  net.attach_lora(nets::LayerFilter::Temporal, 2, rng);
  for (const auto& name : net.lora_param_names()) {
    auto& v = net.params().at(name).mutable_value();
    for (auto& x : v.vec()) x = 0.3 * rng.normal();
  }
  for (const auto& name : net.params().names()) net.params().set_trainable(name, true);
  const auto in = teacher_inputs(rng, 2, 4, 4);
  const Tensor z = rng.normal_tensor({2, 4, 4, 3});
  const Tensor target = rng.normal_tensor({2, 4, 4, 3});
  auto loss_fn = [&] {
    ag::Var out = net.forward(ag::constant(z), in);
    return ag::mse(out, ag::constant(target));
  };
  net.params().zero_grad();
  ag::backward(loss_fn());
  double worst = 0.0;
  int checked = 0;
  for (const auto& name : net.params().names()) {
    ag::Var& p = net.params().at(name);
    const Tensor g = p.grad();
    const int64_t stride = std::max<int64_t>(1, p.numel() / 3);
    for (int64_t i = 0; i < p.numel(); i += stride) {
      const double fd = central_difference(p.mutable_value(), i, [&] {
        ag::NoGradGuard ng;
        return loss_fn().value()[0];
      }, 1e-5);
      worst = std::max(worst, relative_error(g[i], fd, 1e-6));
      ++checked;
    }
  }
  CHECK(checked > 50);
  CHECK(worst <= 1e-3);
}

TEST_CASE("clones own independent parameters") {
  Rng rng(9);
  nets::Denoiser a(editor::default_editor_net(), rng);
  nets::Denoiser b = a.clone();
  const std::string name = a.params().names().front();
  b.params().at(name).mutable_value()[0] += 1.0;
  CHECK(a.params().at(name).value()[0] != b.params().at(name).value()[0]);
}

TEST_CASE("image and latent ranges are affine inverses") {
  Rng rng(1);
  Tensor img({2, 3});
  for (auto& v : img.vec()) v = rng.uniform();
  const Tensor lat = nets::to_latent(img);
  const Tensor back = nets::to_image(lat);
  for (int64_t i = 0; i < img.numel(); ++i) {
    CHECK(lat[i] == doctest::Approx(2.0 * img[i] - 1.0));
    CHECK(back[i] == doctest::Approx(img[i]));
  }
}

TEST_CASE("config validation") {
  nets::DenoiserConfig cfg;
  CHECK_NOTHROW(cfg.validate(16, 16));
  CHECK_THROWS_AS(cfg.validate(15, 16), std::invalid_argument);
  cfg.channels = 0;
  CHECK_THROWS_AS(cfg.validate(16, 16), std::invalid_argument);
}
