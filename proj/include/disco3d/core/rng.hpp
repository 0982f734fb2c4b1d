#pragma once

#include <cstdint>
#include <random>

#include "disco3d/core/tensor.hpp"

namespace disco3d {

/// Seeded random stream. All randomness in the pipeline flows through
/// explicitly passed Rng instances so runs are pure functions of their seeds.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(mix(seed)) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  /// Integer uniform on the closed range [lo, hi].
  int64_t uniform_int(int64_t lo, int64_t hi) { return std::uniform_int_distribution<int64_t>(lo, hi)(engine_); }
  double normal() { return normal_(engine_); }
  bool bernoulli(double p) { return uniform() < p; }

  Tensor normal_tensor(std::vector<int64_t> shape) {
    Tensor t(std::move(shape));
    for (auto& v : t.vec()) v = normal();
    return t;
  }

  /// Independent child stream; the parent advances by one draw.
  Rng split() { return Rng(engine_()); }

  /// Derived stream that does not disturb this one.
  static Rng derive(uint64_t seed, uint64_t stream) { return Rng(mix(seed) ^ mix(stream + 0x9e3779b97f4a7c15ULL)); }

  std::mt19937_64& engine() { return engine_; }

 private:
  static uint64_t mix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace disco3d
