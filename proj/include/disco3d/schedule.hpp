#pragma once

#include <string>
#include <vector>

#include "disco3d/core/autograd.hpp"
#include "disco3d/core/rng.hpp"

namespace disco3d {

enum class ScheduleKind { DdpmLinear, Edm };

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& s);

/// A forward-process sample together with the noise that produced it.
struct NoisedLatent {
  Tensor z_t;
  int t = 0;
  Tensor eps;
};

/// Discrete-time coefficients (alpha_t, sigma_t) for t = 0..T with t = 0 noise free.
///
/// Both kinds are variance preserving. The EDM kind stores the Karras sigma
/// ladder sigma_edm(t) in normalised form alpha = 1/sqrt(1+s^2),
/// sigma = s/sqrt(1+s^2), so a single forward process z_t = alpha z0 + sigma eps
/// serves every denoiser.
class NoiseSchedule {
 public:
  static NoiseSchedule ddpm_linear(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);
  static NoiseSchedule edm(int steps = 20, double sigma_min = 0.002, double sigma_max = 80.0, double rho = 7.0);
  /// Rebuilds a schedule from its serialized parameters.
  static NoiseSchedule from_params(ScheduleKind kind, int steps, const std::vector<double>& params);

  ScheduleKind kind() const { return kind_; }
  int steps() const { return steps_; }
  double alpha(int t) const;
  double sigma(int t) const;
  /// Noise-to-signal ratio sigma_t / alpha_t (the EDM sigma for the EDM kind).
  double noise_ratio(int t) const { return sigma(t) / alpha(t); }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& sigmas() const { return sigmas_; }
  /// Constructor arguments, enough to rebuild via from_params.
  const std::vector<double>& params() const { return params_; }

  NoisedLatent forward(const Tensor& z0, int t, Rng& rng) const;
  Tensor forward_with(const Tensor& z0, int t, const Tensor& eps) const;
  ag::Var forward_with(const ag::Var& z0, int t, const Tensor& eps) const;

  /// Integer step uniform on [ceil(lo_frac T), floor(hi_frac T)].
  int sample_t_uniform(double lo_frac, double hi_frac, Rng& rng) const;

  /// (z_t - sigma_t eps_hat) / alpha_t.
  Tensor eps_to_x0(const Tensor& z_t, const Tensor& eps_hat, int t) const;
  ag::Var eps_to_x0(const ag::Var& z_t, const ag::Var& eps_hat, int t) const;
  /// Deterministic (DDIM / EDM-Euler) transition from step t to step t-1 given an x0 estimate.
  Tensor step_from_x0(const Tensor& z_t, const Tensor& x0_hat, int t) const;

 private:
  void check_t(int t) const;

  ScheduleKind kind_ = ScheduleKind::DdpmLinear;
  int steps_ = 0;
  std::vector<double> alphas_;
  std::vector<double> sigmas_;
  std::vector<double> params_;
};

}  // namespace disco3d
