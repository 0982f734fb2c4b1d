#pragma once

// Toy image/description embedder trained contrastively on worldgen renders.
// Descriptions are token lists over the target object's hue class, its shape,
// whether it is striped and the number of objects in the scene.

#include <string>
#include <vector>

#include "disco3d/core/params.hpp"
#include "disco3d/eval/metrics.hpp"

namespace disco3d::eval {

inline constexpr int kHueClasses = 6;  // red, yellow, green, cyan, blue, purple
inline constexpr int kMaxCount = 4;
inline constexpr int kVocabSize = kHueClasses + 2 + 2 + kMaxCount;

int hue_class(const worldgen::Vec3& rgb);
/// Four tokens: hue, shape, stripes, object count.
std::vector<int> describe(const worldgen::Scene& scene);
std::string describe_text(const std::vector<int>& tokens);
/// Every well-formed description, in a fixed order.
std::vector<std::vector<int>> all_descriptions();

struct EmbedderTrainConfig {
  int steps = 1500;
  int batch = 32;
  double lr = 3e-3;
  int height = 16;
  int width = 16;
  int scenes = 96;
  double temperature = 10.0;
  uint64_t seed = 0;
};

class ToyEmbedder {
 public:
  static constexpr int kDim = 16;

  explicit ToyEmbedder(uint64_t seed = 0);

  /// [B, H, W, 3] in [0, 1] -> [B, kDim] unit rows. H and W must be even.
  ag::Var encode_images(const ag::Var& images) const;
  /// One unit row per description.
  ag::Var encode_text(const std::vector<std::vector<int>>& descriptions) const;

  std::vector<double> image(const Tensor& image) const;
  std::vector<double> text(const std::vector<int>& description) const;
  /// Closures holding a copy of this embedder.
  Embedder as_embedder() const;

  /// Index into all_descriptions() of the best-matching description.
  int classify(const Tensor& image) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  void save(const std::string& path) const;
  static ToyEmbedder load(const std::string& path);

 private:
  ParamStore params_;
};

/// Renders random worldgen scenes under random edits and views, then trains
/// with a softmax over all descriptions. Returns the final batch accuracy in `accuracy`.
ToyEmbedder train_embedder(const EmbedderTrainConfig& cfg, double* accuracy = nullptr);

}  // namespace disco3d::eval
