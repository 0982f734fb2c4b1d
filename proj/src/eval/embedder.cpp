#include "disco3d/eval/embedder.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "disco3d/core/rng.hpp"
#include "disco3d/eval/checkpoint.hpp"
#include "json.hpp"

namespace disco3d::eval {

namespace {

constexpr int kInChannels = 5;
constexpr int kWidth = 16;

const char* const kHueNames[kHueClasses] = {"red", "yellow", "green", "cyan", "blue", "purple"};

void add_linear(ParamStore& p, const std::string& name, int in, int out, Rng& rng) {
  Tensor w = rng.normal_tensor({out, in});
  const double s = std::sqrt(2.0 / in);
  for (auto& v : w.vec()) v *= s;
  p.add(name + ".weight", std::move(w));
  p.add(name + ".bias", Tensor({out}));
}

ag::Var linear(const ParamStore& p, const std::string& name, const ag::Var& x) {
  return ag::add_bias(ag::matmul_nt(x, p.at(name + ".weight")), p.at(name + ".bias"));
}

// Normalised pixel coordinates so pooled features can tell the centre from the rim.
Tensor coords(int64_t B, int64_t H, int64_t W) {
  Tensor out({B, H, W, 2});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const int64_t pix = (b * H + y) * W + x;
        out[pix * 2] = 2.0 * (x + 0.5) / W - 1.0;
        out[pix * 2 + 1] = 2.0 * (y + 0.5) / H - 1.0;
      }
  return out;
}

int description_index(const std::vector<int>& d) {
  const int hue = d[0], shape = d[1] - kHueClasses, stripes = d[2] - kHueClasses - 2,
            count = d[3] - kHueClasses - 4;
  return ((hue * 2 + shape) * 2 + stripes) * kMaxCount + count;
}

}  // namespace

int hue_class(const worldgen::Vec3& rgb) {
  const double mx = rgb.maxCoeff(), mn = rgb.minCoeff(), d = mx - mn;
  double h = 0.0;
  if (d > 1e-12) {
    if (mx == rgb.x()) h = std::fmod((rgb.y() - rgb.z()) / d + 6.0, 6.0);
    else if (mx == rgb.y()) h = (rgb.z() - rgb.x()) / d + 2.0;
    else h = (rgb.x() - rgb.y()) / d + 4.0;
    h /= 6.0;
  }
  if (h >= 0.88 || h < 0.1) return 0;
  if (h < 0.2) return 1;
  if (h < 0.46) return 2;
  if (h < 0.62) return 3;
  if (h < 0.71) return 4;
  return 5;
}

std::vector<int> describe(const worldgen::Scene& scene) {
  if (scene.primitives.empty()) throw std::invalid_argument("describe: empty scene");
  const auto& target = scene.primitives.front();
  int count = 0;
  for (const auto& p : scene.primitives)
    if (p.kind != worldgen::PrimitiveKind::Plane) ++count;
  count = std::clamp(count, 1, kMaxCount);
  return {hue_class(target.material.color),
          kHueClasses + (target.kind == worldgen::PrimitiveKind::Box ? 1 : 0),
          kHueClasses + 2 + (target.material.stripe_frequency > 0.0 ? 1 : 0), kHueClasses + 4 + count - 1};
}

std::string describe_text(const std::vector<int>& t) {
  if (t.size() != 4) throw std::invalid_argument("describe_text: expected four tokens");
  const int count = t[3] - kHueClasses - 4 + 1;
  return std::string(kHueNames[t[0]]) + (t[2] == kHueClasses + 3 ? " striped " : " ") +
         (t[1] == kHueClasses + 1 ? "box" : "sphere") + ", " + std::to_string(count) +
         (count == 1 ? " object" : " objects");
}

std::vector<std::vector<int>> all_descriptions() {
  std::vector<std::vector<int>> out;
  for (int h = 0; h < kHueClasses; ++h)
    for (int s = 0; s < 2; ++s)
      for (int st = 0; st < 2; ++st)
        for (int c = 0; c < kMaxCount; ++c) out.push_back({h, kHueClasses + s, kHueClasses + 2 + st, kHueClasses + 4 + c});
  return out;
}

ToyEmbedder::ToyEmbedder(uint64_t seed) {
  Rng rng = Rng::derive(seed, 40);
  add_linear(params_, "conv1", 9 * kInChannels, kWidth, rng);
  add_linear(params_, "conv2", 9 * kWidth, kWidth, rng);
  add_linear(params_, "head", 2 * kWidth, kDim, rng);
  params_.add("tokens", rng.normal_tensor({kVocabSize, kDim}));
}

ag::Var ToyEmbedder::encode_images(const ag::Var& images) const {
  const auto& s = images.shape();
  if (s.size() != 4 || s[3] != 3 || s[1] % 2 || s[2] % 2)
    throw std::invalid_argument("ToyEmbedder: expected [B, H, W, 3] with even H and W");
  const int64_t B = s[0];
  ag::Var x = ag::concat_last(images, ag::constant(coords(B, s[1], s[2])));
  ag::Var h1 = ag::relu(linear(params_, "conv1", ag::im2col3x3(x)));
  ag::Var h2 = ag::relu(linear(params_, "conv2", ag::im2col3x3(ag::avgpool2(h1))));
  const int64_t n1 = s[1] * s[2], n2 = n1 / 4;
  ag::Var pooled = ag::concat_last(ag::mean_middle(ag::reshape(h1, {B, n1, kWidth})),
                                   ag::mean_middle(ag::reshape(h2, {B, n2, kWidth})));
  return ag::normalize_last(linear(params_, "head", pooled));
}

ag::Var ToyEmbedder::encode_text(const std::vector<std::vector<int>>& descriptions) const {
  std::vector<int64_t> rows;
  size_t len = 0;
  for (const auto& d : descriptions) {
    if (d.empty() || (len && d.size() != len)) throw std::invalid_argument("ToyEmbedder: descriptions need equal non-zero length");
    len = d.size();
    for (int t : d) {
      if (t < 0 || t >= kVocabSize) throw std::out_of_range("ToyEmbedder: token out of range");
      rows.push_back(t);
    }
  }
  const int64_t n = static_cast<int64_t>(descriptions.size());
  ag::Var e = ag::take_rows(params_.at("tokens"), rows);
  return ag::normalize_last(ag::mean_middle(ag::reshape(e, {n, static_cast<int64_t>(len), kDim})));
}

std::vector<double> ToyEmbedder::image(const Tensor& img) const {
  ag::NoGradGuard ng;
  const ag::Var e = encode_images(ag::constant(img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)})));
  return e.value().vec();
}

std::vector<double> ToyEmbedder::text(const std::vector<int>& description) const {
  ag::NoGradGuard ng;
  return encode_text({description}).value().vec();
}

Embedder ToyEmbedder::as_embedder() const {
  auto self = std::make_shared<ToyEmbedder>(ToyEmbedder(0));
  self->params_.load(params_.snapshot());
  return {[self](const Tensor& img) { return self->image(img); },
          [self](const std::vector<int>& d) { return self->text(d); }};
}

int ToyEmbedder::classify(const Tensor& img) const {
  ag::NoGradGuard ng;
  const auto e = image(img);
  const Tensor t = encode_text(all_descriptions()).value();
  int best = 0;
  double best_score = -2.0;
  for (int64_t r = 0; r < t.dim(0); ++r) {
    double s = 0.0;
    for (int k = 0; k < kDim; ++k) s += e[k] * t[r * kDim + k];
    if (s > best_score) {
      best_score = s;
      best = static_cast<int>(r);
    }
  }
  return best;
}

void ToyEmbedder::save(const std::string& path) const {
  Checkpoint ck;
  ck.kind = "embedder";
  ck.model = nlohmann::json{{"dim", kDim}, {"width", kWidth}, {"vocab", kVocabSize}}.dump();
  ck.arrays = params_.snapshot();
  for (const auto& [name, var] : params_.all()) ck.trainable[name] = var.requires_grad();
  save_checkpoint(path, ck);
}

ToyEmbedder ToyEmbedder::load(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.kind != "embedder") throw std::runtime_error("checkpoint: expected an embedder, found " + ck.kind);
  const auto model = nlohmann::json::parse(ck.model);
  if (model.at("dim") != kDim || model.at("width") != kWidth || model.at("vocab") != kVocabSize)
    throw std::runtime_error("checkpoint: embedder architecture mismatch");
  ToyEmbedder e(0);
  e.params_.load(ck.arrays, true);
  return e;
}

ToyEmbedder train_embedder(const EmbedderTrainConfig& cfg, double* accuracy) {
  if (cfg.steps < 0 || cfg.batch < 1 || cfg.scenes < 1 || cfg.height % 2 || cfg.width % 2)
    throw std::invalid_argument("train_embedder: invalid configuration");
  const int views = 6;
  std::vector<Tensor> images;
  std::vector<int> labels;
  for (int s = 0; s < cfg.scenes; ++s) {
    const uint64_t seed = 50000 + cfg.seed * 1000 + static_cast<uint64_t>(s);
    const auto scene =
        worldgen::generate_scene(seed, s % 2 ? worldgen::Complexity::Medium : worldgen::Complexity::Small);
    for (int code = 0; code < worldgen::kNumEditCodes; ++code) {
      for (int variant = 0; variant < worldgen::edit_info(code).variants; ++variant) {
        const auto edited = worldgen::apply_edit(scene, {code, 0, static_cast<uint64_t>(variant)});
        const auto traj = worldgen::default_trajectory(edited, views, 17.0 * s);
        const auto vs = worldgen::render_views(edited, traj, cfg.height, cfg.width, 2);
        const int label = description_index(describe(edited));
        for (int v = 0; v < views; ++v) {
          images.push_back(vs.image(v));
          labels.push_back(label);
        }
      }
    }
  }
  ToyEmbedder emb(cfg.seed);
  Adam opt(emb.params().trainable(), {cfg.lr});
  Rng rng = Rng::derive(cfg.seed, 41);
  const auto descs = all_descriptions();
  const int64_t H = cfg.height, W = cfg.width;
  double acc = 0.0;
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor batch({cfg.batch, H, W, 3});
    std::vector<int> y;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto k = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(images.size()) - 1));
      std::copy(images[k].vec().begin(), images[k].vec().end(), batch.vec().begin() + b * H * W * 3);
      y.push_back(labels[k]);
    }
    ag::Var logits = ag::scale(ag::matmul_nt(emb.encode_images(ag::constant(batch)), emb.encode_text(descs)),
                               cfg.temperature);
    ag::Var loss = ag::cross_entropy(logits, y);
    ag::backward(loss);
    opt.step();
    int hits = 0;
    const int64_t K = static_cast<int64_t>(descs.size());
    for (int b = 0; b < cfg.batch; ++b) {
      const double* row = logits.value().data() + b * K;
      if (std::max_element(row, row + K) - row == y[static_cast<size_t>(b)]) ++hits;
    }
    acc = static_cast<double>(hits) / cfg.batch;
    if (step % 250 == 0) spdlog::info("embedder step {} loss {:.4f} batch acc {:.2f}", step, loss.value()[0], acc);
  }
  if (accuracy) *accuracy = acc;
  return emb;
}

}  // namespace disco3d::eval
