#include "disco3d/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace disco3d {

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::Edm ? "edm" : "ddpm-linear"; }

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "edm") return ScheduleKind::Edm;
  if (s == "ddpm-linear") return ScheduleKind::DdpmLinear;
  throw std::invalid_argument("unknown schedule kind: " + s);
}

NoiseSchedule NoiseSchedule::ddpm_linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("ddpm_linear: steps must be >= 1");
  NoiseSchedule s;
  s.kind_ = ScheduleKind::DdpmLinear;
  s.steps_ = steps;
  s.params_ = {beta_start, beta_end};
  s.alphas_.assign(static_cast<size_t>(steps) + 1, 1.0);
  s.sigmas_.assign(static_cast<size_t>(steps) + 1, 0.0);
  double alpha_bar = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const double beta =
        steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / static_cast<double>(steps - 1);
    alpha_bar *= 1.0 - beta;
    s.alphas_[t] = std::sqrt(alpha_bar);
    s.sigmas_[t] = std::sqrt(1.0 - alpha_bar);
  }
  return s;
}

NoiseSchedule NoiseSchedule::edm(int steps, double sigma_min, double sigma_max, double rho) {
  if (steps < 1) throw std::invalid_argument("edm: steps must be >= 1");
  if (!(sigma_min > 0.0 && sigma_max > sigma_min)) throw std::invalid_argument("edm: need 0 < sigma_min < sigma_max");
  NoiseSchedule s;
  s.kind_ = ScheduleKind::Edm;
  s.steps_ = steps;
  s.params_ = {sigma_min, sigma_max, rho};
  s.alphas_.assign(static_cast<size_t>(steps) + 1, 1.0);
  s.sigmas_.assign(static_cast<size_t>(steps) + 1, 0.0);
  const double a = std::pow(sigma_max, 1.0 / rho);
  const double b = std::pow(sigma_min, 1.0 / rho);
  for (int t = 1; t <= steps; ++t) {
    // t = steps maps to sigma_max, t = 1 to sigma_min.
    const double frac = steps == 1 ? 0.0 : static_cast<double>(steps - t) / (steps - 1);
    const double se = std::pow(a + frac * (b - a), rho);
    const double norm = std::sqrt(1.0 + se * se);
    s.alphas_[t] = 1.0 / norm;
    s.sigmas_[t] = se / norm;
  }
  return s;
}

NoiseSchedule NoiseSchedule::from_params(ScheduleKind kind, int steps, const std::vector<double>& params) {
  if (kind == ScheduleKind::DdpmLinear) {
    if (params.size() != 2) throw std::invalid_argument("ddpm-linear schedule expects 2 params");
    return ddpm_linear(steps, params[0], params[1]);
  }
  if (params.size() != 3) throw std::invalid_argument("edm schedule expects 3 params");
  return edm(steps, params[0], params[1], params[2]);
}

void NoiseSchedule::check_t(int t) const {
  if (t < 0 || t > steps_) {
    throw std::out_of_range("noise schedule: step " + std::to_string(t) + " outside [0, " + std::to_string(steps_) +
                            "]");
  }
}

double NoiseSchedule::alpha(int t) const {
  check_t(t);
  return alphas_[static_cast<size_t>(t)];
}

double NoiseSchedule::sigma(int t) const {
  check_t(t);
  return sigmas_[static_cast<size_t>(t)];
}

NoisedLatent NoiseSchedule::forward(const Tensor& z0, int t, Rng& rng) const {
  check_t(t);
  NoisedLatent out;
  out.t = t;
  out.eps = rng.normal_tensor(z0.shape());
  out.z_t = forward_with(z0, t, out.eps);
  return out;
}

Tensor NoiseSchedule::forward_with(const Tensor& z0, int t, const Tensor& eps) const {
  require_same_shape(z0, eps, "forward_with");
  const double a = alpha(t), s = sigma(t);
  Tensor out(z0.shape());
  for (int64_t i = 0; i < z0.numel(); ++i) out[i] = a * z0[i] + s * eps[i];
  return out;
}

ag::Var NoiseSchedule::forward_with(const ag::Var& z0, int t, const Tensor& eps) const {
  return ag::linear_combination({z0, ag::constant(eps)}, {alpha(t), sigma(t)});
}

int NoiseSchedule::sample_t_uniform(double lo_frac, double hi_frac, Rng& rng) const {
  if (!(lo_frac >= 0.0 && hi_frac <= 1.0 && lo_frac <= hi_frac)) {
    throw std::invalid_argument("sample_t_uniform: need 0 <= lo_frac <= hi_frac <= 1");
  }
  // 1e-9 absorbs rounding in frac * steps.
  const int lo = static_cast<int>(std::ceil(lo_frac * steps_ - 1e-9));
  const int hi = static_cast<int>(std::floor(hi_frac * steps_ + 1e-9));
  if (lo > hi) throw std::invalid_argument("sample_t_uniform: empty step range");
  return static_cast<int>(rng.uniform_int(lo, hi));
}

Tensor NoiseSchedule::eps_to_x0(const Tensor& z_t, const Tensor& eps_hat, int t) const {
  require_same_shape(z_t, eps_hat, "eps_to_x0");
  const double a = alpha(t), s = sigma(t);
  if (a == 0.0) throw std::domain_error("eps_to_x0: alpha_t is zero");
  if (t == 0) return z_t;
  Tensor out(z_t.shape());
  for (int64_t i = 0; i < z_t.numel(); ++i) out[i] = (z_t[i] - s * eps_hat[i]) / a;
  return out;
}

ag::Var NoiseSchedule::eps_to_x0(const ag::Var& z_t, const ag::Var& eps_hat, int t) const {
  const double a = alpha(t), s = sigma(t);
  if (a == 0.0) throw std::domain_error("eps_to_x0: alpha_t is zero");
  if (t == 0) return z_t;
  return ag::linear_combination({z_t, eps_hat}, {1.0 / a, -s / a});
}

Tensor NoiseSchedule::step_from_x0(const Tensor& z_t, const Tensor& x0_hat, int t) const {
  require_same_shape(z_t, x0_hat, "step_from_x0");
  if (t < 1) throw std::out_of_range("step_from_x0: t must be >= 1");
  const double a = alpha(t), s = sigma(t);
  const double ap = alpha(t - 1), sp = sigma(t - 1);
  Tensor out(z_t.shape());
  for (int64_t i = 0; i < z_t.numel(); ++i) {
    const double eps = (z_t[i] - a * x0_hat[i]) / s;
    out[i] = ap * x0_hat[i] + sp * eps;
  }
  return out;
}

}  // namespace disco3d
