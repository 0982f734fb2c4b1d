#pragma once

// Geometry-grounded and embedding-based edit metrics.

#include <functional>
#include <utility>
#include <vector>

#include "disco3d/worldgen.hpp"

namespace disco3d::eval {

struct PairScore {
  double value = 0.0;
  int used = 0;
  int skipped = 0;
};

/// Consecutive trajectory pairs (i, i + 1), or every unordered pair.
std::vector<std::pair<int, int>> view_pairs(int n, bool all_pairs = false);

/// Mean absolute photometric error (per channel) of edited view i sampled at
/// the reprojection of view j's visible surface points, over pixels whose
/// bilinear footprint in view i sees the same primitive at a consistent depth.
/// Returns -1 for an empty co-visible set.
double reprojection_error(const Tensor& images, const worldgen::ViewSet& geometry, int i, int j);

/// Average of reprojection_error over pairs; empty pairs are skipped and counted.
PairScore reproj_inconsistency(const Tensor& images, const worldgen::ViewSet& geometry, bool all_pairs = false);

/// Peak signal-to-noise ratio in dB for images in [0, 1].
double psnr(const Tensor& a, const Tensor& b);

/// Image and description encoders returning unit vectors.
struct Embedder {
  std::function<std::vector<double>(const Tensor& image)> image;
  std::function<std::vector<double>(const std::vector<int>& description)> text;
};

double cosine(const std::vector<double>& a, const std::vector<double>& b);

struct EmbedReport {
  std::vector<double> sim;      // per view
  std::vector<double> dir_sim;  // per view
  std::vector<double> dir_consistency;  // per used pair
  double sim_mean = 0.0;
  double dir_sim_mean = 0.0;
  /// Undefined (NaN) when every pair was skipped.
  double dir_consistency_mean = 0.0;
  int pairs_used = 0;
  int pairs_skipped = 0;
};

/// Similarity to the target description, directional similarity of image
/// and description deltas, and directional consistency across view pairs.
EmbedReport embed_metrics(const Tensor& edited, const Tensor& source, const std::vector<int>& src_desc,
                          const std::vector<int>& tgt_desc, const Embedder& embedder, bool all_pairs = false);

}  // namespace disco3d::eval
