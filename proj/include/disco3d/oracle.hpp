#pragma once

// Analytic Gaussian-world checks of the KL gradient and its score-difference
// estimator: diagonal Gaussian mixtures with closed-form (noised) scores and
// a linear Gaussian generator x = W z + b.

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "disco3d/core/rng.hpp"
#include "disco3d/schedule.hpp"

namespace disco3d::oracle {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct MixtureModel {
  std::vector<double> weights;
  Mat means;      // [k, D]
  Mat variances;  // [k, D], diagonal covariances

  int components() const { return static_cast<int>(weights.size()); }
  int dim() const { return static_cast<int>(means.cols()); }
  /// Throws std::invalid_argument unless weights form a simplex (1e-12) and variances are positive.
  void validate() const;

  static MixtureModel gaussian(const Vec& mean, const Vec& variance);

  double log_density(const Vec& x) const;
  Vec score(const Vec& x) const;
  /// Law of alpha x + sigma eps: component means alpha mu, variances alpha^2 v + sigma^2.
  MixtureModel noised(double alpha, double sigma) const;
  Vec sample(Rng& rng) const;
};

struct LinearGenerator {
  Mat W;
  Vec b;

  int dim() const { return static_cast<int>(b.size()); }
  Vec operator()(const Vec& z) const { return W * z + b; }
  /// Covariance W W^T.
  Mat covariance() const { return W * W.transpose(); }
};

/// Gradient with respect to (W, b).
struct KLGrad {
  Mat dW;
  Vec db;

  /// Row-major W entries followed by b.
  Vec flat() const;
};

/// Exact gradient of KL(N(b, W W^T) || N(mu, diag v)). The target must have
/// one component; throws std::domain_error when W W^T is singular.
KLGrad analytic_kl_grad(const LinearGenerator& gen, const MixtureModel& target);

/// Reference gradient for a mixture target: Gauss-Hermite quadrature of
/// E[-s_p(W z + b) z^T] plus the exact entropy term -W^{-T}. Practical for D <= 3.
KLGrad quadrature_kl_grad(const LinearGenerator& gen, const MixtureModel& target, int points = 48);

struct GradEstimate {
  KLGrad mean;
  KLGrad se;  // per-entry standard errors
  int n = 0;
};

/// Plain reparameterised Monte Carlo reference of the KL gradient.
GradEstimate mc_kl_grad(const LinearGenerator& gen, const MixtureModel& target, int n, Rng& rng);

/// Score-difference estimator: samples x = W z + b, perturbs it to
/// x_t = alpha_t x + sigma_t eps and averages -(s_target,t - s_gen,t)(x_t) alpha_t dx/dtheta,
/// with both noised scores in closed form. t = 0 is the unperturbed estimator.
GradEstimate estimate_vsd_grad(const LinearGenerator& gen, const MixtureModel& target, int n, int t,
                               const NoiseSchedule& schedule, Rng& rng);

double cosine(const Vec& a, const Vec& b);
double relative_error(const Vec& estimate, const Vec& reference);

struct OracleRow {
  int D = 0;
  int k = 0;
  int n = 0;
  int t = 0;
  double cosine = 0.0;
  double rel_err = 0.0;
  double se = 0.0;
};

/// Fixed 2-component mixture fixture in D dimensions and a non-trivial generator.
MixtureModel mixture_fixture(int D);
LinearGenerator generator_fixture(int D);

/// Runs the estimator against the reference for each t and returns CSV rows.
std::vector<OracleRow> oracle_sweep(int D, int n, const std::vector<int>& ts, uint64_t seed);
void write_oracle_csv(const std::string& path, const std::vector<OracleRow>& rows);

}  // namespace disco3d::oracle
