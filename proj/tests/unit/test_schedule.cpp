#include <doctest.h>

#include <cmath>

#include "disco3d/schedule.hpp"

using namespace disco3d;

TEST_CASE("both schedules are variance preserving and monotone") {
  for (const auto& s : {NoiseSchedule::ddpm_linear(), NoiseSchedule::edm()}) {
    CHECK(s.alpha(0) == 1.0);
    CHECK(s.sigma(0) == 0.0);
    for (int t = 1; t <= s.steps(); ++t) {
      CHECK(s.alpha(t) * s.alpha(t) + s.sigma(t) * s.sigma(t) == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(s.alpha(t) < s.alpha(t - 1));
    }
  }
  const auto edm = NoiseSchedule::edm();
  CHECK(edm.noise_ratio(edm.steps()) == doctest::Approx(80.0));
  CHECK(edm.noise_ratio(1) == doctest::Approx(0.002));
}

TEST_CASE("ddpm alphas follow the cumulative product of 1 - beta") {
  const auto s = NoiseSchedule::ddpm_linear(1000, 1e-4, 0.02);
  double prod = 1.0;
  for (int t = 1; t <= 1000; ++t) {
    const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0;
    prod *= 1.0 - beta;
    CHECK(s.alpha(t) == doctest::Approx(std::sqrt(prod)).epsilon(1e-10));
  }
}

TEST_CASE("forward process statistics at three steps") {
  const auto s = NoiseSchedule::ddpm_linear();
  Tensor z0({4});
  z0[0] = 0.8;
  z0[1] = -0.3;
  z0[2] = 0.0;
  z0[3] = 1.5;
  Rng rng(7);
  const int n = 10000;
  for (int t : {10, 500, 990}) {
    for (int64_t i = 0; i < z0.numel(); ++i) {
      double sum = 0.0, sq = 0.0;
      std::vector<double> draws;
      for (int k = 0; k < n; ++k) {
        const double v = s.forward(z0, t, rng).z_t[i];
        sum += v;
        sq += v * v;
      }
      const double mean = sum / n;
      const double var = sq / n - mean * mean;
      const double sig2 = s.sigma(t) * s.sigma(t);
      CHECK(std::abs(mean - s.alpha(t) * z0[i]) < 4.0 * std::sqrt(sig2 / n));
      CHECK(std::abs(var - sig2) < 4.0 * sig2 * std::sqrt(2.0 / (n - 1)));
    }
  }
}

TEST_CASE("x0 recovery and deterministic step agree with the forward process") {
  Rng rng(3);
  const Tensor z0 = rng.normal_tensor({2, 3});
  for (const auto& s : {NoiseSchedule::ddpm_linear(), NoiseSchedule::edm()}) {
    for (int t : {1, s.steps() / 2, s.steps()}) {
      const Tensor eps = rng.normal_tensor({2, 3});
      const Tensor zt = s.forward_with(z0, t, eps);
      const Tensor x0 = s.eps_to_x0(zt, eps, t);
      const Tensor prev = s.step_from_x0(zt, z0, t);
      const Tensor expect = s.forward_with(z0, t - 1, eps);
      for (int64_t i = 0; i < z0.numel(); ++i) {
        CHECK(x0[i] == doctest::Approx(z0[i]).epsilon(1e-6));
        CHECK(prev[i] == doctest::Approx(expect[i]).epsilon(1e-8));
      }
    }
  }
}

TEST_CASE("uniform step sampling stays in the fractional range") {
  const auto s = NoiseSchedule::ddpm_linear();
  Rng rng(1);
  int lo = 1000, hi = 0;
  for (int k = 0; k < 20000; ++k) {
    const int t = s.sample_t_uniform(0.02, 0.98, rng);
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  CHECK(lo == 20);
  CHECK(hi == 980);
  CHECK_THROWS(s.alpha(1001));
}

TEST_CASE("schedules rebuild from their parameters") {
  for (const auto& s : {NoiseSchedule::ddpm_linear(), NoiseSchedule::edm(12)}) {
    const auto r = NoiseSchedule::from_params(s.kind(), s.steps(), s.params());
    CHECK(r.alphas() == s.alphas());
    CHECK(r.sigmas() == s.sigmas());
  }
  CHECK(schedule_kind_from_string(to_string(ScheduleKind::Edm)) == ScheduleKind::Edm);
  CHECK_THROWS_AS(schedule_kind_from_string("cosine"), std::invalid_argument);
}
