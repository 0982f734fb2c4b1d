#include <doctest.h>

#include <cmath>

#include "disco3d/core/rng.hpp"
#include "disco3d/eval/embedder.hpp"
#include "disco3d/eval/metrics.hpp"

using namespace disco3d;
using namespace disco3d::eval;

namespace {

worldgen::ViewSet views_of(uint64_t seed, worldgen::Complexity c) {
  const auto s = worldgen::generate_scene(seed, c);
  return worldgen::render_views(s, worldgen::default_trajectory(s, 9), 16, 16, 5);
}

}  // namespace

TEST_CASE("view pairs") {
  CHECK(view_pairs(5).size() == 4);
  CHECK(view_pairs(5, true).size() == 10);
  CHECK(view_pairs(5).front() == std::pair<int, int>{0, 1});
}

TEST_CASE("ground-truth renders are nearly consistent and noise is not") {
  for (uint64_t seed = 0; seed < 4; ++seed) {
    const auto vs = views_of(seed, seed % 2 ? worldgen::Complexity::Medium : worldgen::Complexity::Small);
    const PairScore clean = reproj_inconsistency(vs.images, vs);
    CHECK(clean.used > 0);
    CHECK(clean.value < 0.01);
    Rng rng(seed);
    Tensor noisy = vs.images;
    for (auto& v : noisy.vec()) v = std::clamp(v + 0.1 * rng.normal(), 0.0, 1.0);
    CHECK(reproj_inconsistency(noisy, vs).value > 5.0 * clean.value + 0.02);
  }
}

TEST_CASE("uniform colour shifts outside co-visible pixels do not count") {
  const auto vs = views_of(1, worldgen::Complexity::Small);
  Tensor shifted = vs.images;
  const int64_t hw = vs.height() * vs.width();
  for (int v = 0; v < vs.views(); ++v)
    for (int64_t p = 0; p < hw; ++p)
      if (vs.ids[static_cast<size_t>(v * hw + p)] < 0)
        for (int c = 0; c < 3; ++c) shifted[(v * hw + p) * 3 + c] = 0.1 * v;
  CHECK(reproj_inconsistency(shifted, vs).value == doctest::Approx(reproj_inconsistency(vs.images, vs).value));
}

TEST_CASE("psnr") {
  Tensor a({4, 4, 3}, 0.5);
  Tensor b = a;
  for (auto& v : b.vec()) v += 0.1;
  CHECK(psnr(a, b) == doctest::Approx(20.0));
  CHECK(std::isinf(psnr(a, a)));
}

TEST_CASE("descriptions cover the vocabulary and follow the scene") {
  const auto all = all_descriptions();
  CHECK(all.size() == static_cast<size_t>(kHueClasses * 2 * 2 * kMaxCount));
  CHECK(hue_class({0.92, 0.12, 0.10}) == 0);
  CHECK(hue_class({0.15, 0.85, 0.20}) == 2);
  CHECK(hue_class({0.1, 0.2, 0.9}) == 4);
  const auto s = worldgen::generate_scene(5, worldgen::Complexity::Small);
  const auto red = describe(worldgen::apply_edit(s, {1, 0, 0}));
  CHECK(red[0] == 0);
  const auto striped = describe(worldgen::apply_edit(s, {4, 0, 0}));
  CHECK(striped[2] != describe(s)[2]);
  CHECK(describe(worldgen::apply_edit(s, {3, 0, 0}))[3] != describe(s)[3]);
  CHECK_FALSE(describe_text(red).empty());
}

TEST_CASE("embedder outputs unit vectors and embed metrics are bounded") {
  const ToyEmbedder emb(3);
  const auto vs = views_of(2, worldgen::Complexity::Small);
  const auto e = emb.image(vs.image(0));
  double n2 = 0.0;
  for (double v : e) n2 += v * v;
  CHECK(n2 == doctest::Approx(1.0));
  const auto s = worldgen::generate_scene(2, worldgen::Complexity::Small);
  const EmbedReport r =
      embed_metrics(vs.images, vs.images, describe(s), describe(worldgen::apply_edit(s, {1, 0, 0})), emb.as_embedder());
  CHECK(r.sim.size() == 9);
  CHECK(std::abs(r.sim_mean) <= 1.0);
  CHECK(r.pairs_used + r.pairs_skipped == 8);
}

TEST_CASE("embedder checkpoints round-trip") {
  const ToyEmbedder emb(4);
  emb.save("test_embedder.dc3k");
  const ToyEmbedder back = ToyEmbedder::load("test_embedder.dc3k");
  const auto vs = views_of(3, worldgen::Complexity::Small);
  CHECK(emb.image(vs.image(1)) == back.image(vs.image(1)));
  CHECK(emb.text({0, 1, 0, 0}) == back.text({0, 1, 0, 0}));
}
