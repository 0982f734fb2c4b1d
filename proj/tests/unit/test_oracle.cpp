#include <doctest.h>

#include <fstream>

#include "disco3d/oracle.hpp"

using namespace disco3d;
using namespace disco3d::oracle;

namespace {

// Closed-form KL(N(b, W W^T) || N(mu, diag v)), independent of analytic_kl_grad.
double gaussian_kl(const LinearGenerator& g, const Vec& mu, const Vec& v) {
  const int D = g.dim();
  const Mat S = g.covariance();
  const Vec vinv = v.cwiseInverse();
  double tr = 0.0;
  for (int d = 0; d < D; ++d) tr += vinv[d] * S(d, d);
  const Vec diff = mu - g.b;
  const double quad = diff.dot(vinv.cwiseProduct(diff));
  const double logdet_p = v.array().log().sum();
  const double logdet_q = std::log(S.determinant());
  return 0.5 * (tr + quad - D + logdet_p - logdet_q);
}

Vec fd_kl(LinearGenerator g, const Vec& mu, const Vec& v, double h = 1e-5) {
  const int D = g.dim();
  Vec out(D * D + D);
  for (int r = 0; r < D; ++r)
    for (int c = 0; c < D; ++c) {
      const double s = g.W(r, c);
      g.W(r, c) = s + h;
      const double fp = gaussian_kl(g, mu, v);
      g.W(r, c) = s - h;
      const double fm = gaussian_kl(g, mu, v);
      g.W(r, c) = s;
      out[r * D + c] = (fp - fm) / (2 * h);
    }
  for (int d = 0; d < D; ++d) {
    const double s = g.b[d];
    g.b[d] = s + h;
    const double fp = gaussian_kl(g, mu, v);
    g.b[d] = s - h;
    const double fm = gaussian_kl(g, mu, v);
    g.b[d] = s;
    out[D * D + d] = (fp - fm) / (2 * h);
  }
  return out;
}

Vec fd_log_density(const MixtureModel& m, Vec x, double h = 1e-5) {
  Vec out(x.size());
  for (int d = 0; d < x.size(); ++d) {
    const double s = x[d];
    x[d] = s + h;
    const double fp = m.log_density(x);
    x[d] = s - h;
    const double fm = m.log_density(x);
    x[d] = s;
    out[d] = (fp - fm) / (2 * h);
  }
  return out;
}

}  // namespace

TEST_CASE("scores: closed forms, symmetry and finite differences") {
  const MixtureModel g = MixtureModel::gaussian(Vec::Constant(2, 0.7), Vec::Ones(2));
  const Vec x = (Vec(2) << -0.3, 1.9).finished();
  CHECK((g.score(x) - (Vec::Constant(2, 0.7) - x)).norm() < 1e-14);

  MixtureModel sym;
  sym.weights = {0.5, 0.5};
  sym.means = (Mat(2, 2) << 1.0, -2.0, -1.0, 2.0).finished();
  sym.variances = Mat::Constant(2, 2, 0.8);
  CHECK(sym.score(Vec::Zero(2)).norm() < 1e-14);

  const MixtureModel m = mixture_fixture(3);
  Rng rng(11);
  for (int i = 0; i < 20; ++i) {
    const Vec p = m.sample(rng);
    const Vec s = m.score(p), fd = fd_log_density(m, p);
    CHECK((s - fd).norm() / std::max(s.norm(), 1e-6) <= 1e-6);
    const MixtureModel n = m.noised(0.6, 0.8);
    const Vec sn = n.score(p), fdn = fd_log_density(n, p);
    CHECK((sn - fdn).norm() / std::max(sn.norm(), 1e-6) <= 1e-6);
  }
}

TEST_CASE("noised mixtures have the alpha/sigma substituted moments") {
  const MixtureModel m = mixture_fixture(2);
  const MixtureModel n = m.noised(0.5, 0.3);
  for (int k = 0; k < 2; ++k)
    for (int d = 0; d < 2; ++d) {
      CHECK(n.means(k, d) == doctest::Approx(0.5 * m.means(k, d)));
      CHECK(n.variances(k, d) == doctest::Approx(0.25 * m.variances(k, d) + 0.09));
    }
}

TEST_CASE("model validation") {
  MixtureModel m = mixture_fixture(2);
  m.weights = {0.5, 0.6};
  CHECK_THROWS_AS(m.validate(), std::invalid_argument);
  m = mixture_fixture(2);
  m.variances(0, 0) = 0.0;
  CHECK_THROWS_AS(m.validate(), std::invalid_argument);
  LinearGenerator g = generator_fixture(2);
  g.W.setZero();
  CHECK_THROWS_AS(analytic_kl_grad(g, MixtureModel::gaussian(Vec::Zero(2), Vec::Ones(2))), std::domain_error);
  CHECK_THROWS_AS(analytic_kl_grad(generator_fixture(2), mixture_fixture(2)), std::invalid_argument);
}

TEST_CASE("analytic KL gradient: closed form, optimum and finite differences") {
  const Vec mu = (Vec(2) << 0.4, -1.1).finished();
  const MixtureModel unit = MixtureModel::gaussian(mu, Vec::Ones(2));
  LinearGenerator g{Mat::Identity(2, 2), (Vec(2) << 1.0, 0.5).finished()};
  const KLGrad a = analytic_kl_grad(g, unit);
  CHECK((a.db - (g.b - mu)).norm() < 1e-14);
  CHECK(a.dW.norm() < 1e-14);
  g.b = mu;
  CHECK(analytic_kl_grad(g, unit).flat().norm() < 1e-14);

  for (int D : {1, 2, 3}) {
    const LinearGenerator gen = generator_fixture(D);
    Vec m(D), v(D);
    for (int d = 0; d < D; ++d) {
      m[d] = 0.3 * d - 0.2;
      v[d] = 0.5 + 0.4 * d;
    }
    const Vec an = analytic_kl_grad(gen, MixtureModel::gaussian(m, v)).flat();
    const Vec fd = fd_kl(gen, m, v);
    CHECK((an - fd).norm() / an.norm() <= 1e-6);
  }
}

TEST_CASE("quadrature reference agrees with the closed form and with plain Monte Carlo") {
  const LinearGenerator gen = generator_fixture(2);
  const MixtureModel single = MixtureModel::gaussian((Vec(2) << 0.2, -0.6).finished(), (Vec(2) << 0.7, 1.3).finished());
  CHECK((quadrature_kl_grad(gen, single).flat() - analytic_kl_grad(gen, single).flat()).norm() < 1e-10);

  const MixtureModel mix = mixture_fixture(2);
  const Vec ref = quadrature_kl_grad(gen, mix).flat();
  Rng rng(3);
  const GradEstimate mc = mc_kl_grad(gen, mix, 200000, rng);
  const Vec est = mc.mean.flat(), se = mc.se.flat();
  for (int i = 0; i < ref.size(); ++i) CHECK(std::abs(est[i] - ref[i]) <= 4.0 * se[i]);
}

TEST_CASE("unperturbed score-difference estimator is unbiased for a Gaussian target") {
  const Vec mu = (Vec(2) << 0.5, -0.3).finished();
  const Vec var = (Vec(2) << 0.8, 1.5).finished();
  const MixtureModel target = MixtureModel::gaussian(mu, var);
  const LinearGenerator gen = generator_fixture(2);
  const auto sch = NoiseSchedule::ddpm_linear();
  Rng rng(7);
  const GradEstimate est = estimate_vsd_grad(gen, target, 10000, 0, sch, rng);
  const KLGrad exact = analytic_kl_grad(gen, target);
  for (int d = 0; d < 2; ++d) CHECK(std::abs(est.mean.db[d] - exact.db[d]) <= 3.0 * est.se.db[d]);

  const MixtureModel unit = MixtureModel::gaussian(mu, Vec::Ones(2));
  const LinearGenerator shifted{Mat::Identity(2, 2), (Vec(2) << -0.4, 1.0).finished()};
  Rng rng2(8);
  const GradEstimate e2 = estimate_vsd_grad(shifted, unit, 10000, 0, sch, rng2);
  for (int d = 0; d < 2; ++d) CHECK(std::abs(e2.mean.db[d] - (shifted.b[d] - mu[d])) <= 3.0 * e2.se.db[d]);
}

TEST_CASE("matched distributions give a zero estimate") {
  const LinearGenerator gen{(Mat(2, 2) << 0.8, 0.0, 0.0, 1.3).finished(), (Vec(2) << 0.1, 0.2).finished()};
  const MixtureModel target = MixtureModel::gaussian(gen.b, (Vec(2) << 0.64, 1.69).finished());
  const auto sch = NoiseSchedule::ddpm_linear();
  for (int t : {0, 100, 500}) {
    Rng rng(t + 1);
    const GradEstimate est = estimate_vsd_grad(gen, target, 2000, t, sch, rng);
    const Vec m = est.mean.flat(), se = est.se.flat();
    for (int i = 0; i < m.size(); ++i) CHECK(std::abs(m[i]) <= 3.0 * se[i] + 1e-12);
  }
}

TEST_CASE("mixture target: estimator direction matches the reference") {
  const LinearGenerator gen = generator_fixture(2);
  const MixtureModel mix = mixture_fixture(2);
  const Vec ref = quadrature_kl_grad(gen, mix).flat();
  Rng rng(19);
  const GradEstimate est = estimate_vsd_grad(gen, mix, 10000, 0, NoiseSchedule::ddpm_linear(), rng);
  CHECK(cosine(est.mean.flat(), ref) >= 0.95);
}

TEST_CASE("standard error shrinks as n^-1/2") {
  const LinearGenerator gen = generator_fixture(2);
  const MixtureModel mix = mixture_fixture(2);
  const auto sch = NoiseSchedule::ddpm_linear();
  Rng a(1), b(2);
  const double se1 = estimate_vsd_grad(gen, mix, 20000, 0, sch, a).se.flat().norm();
  const double se2 = estimate_vsd_grad(gen, mix, 40000, 0, sch, b).se.flat().norm();
  CHECK(se2 / se1 == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(0.05));
}

TEST_CASE("sweep rows and CSV") {
  const auto rows = oracle_sweep(2, 2000, {0, 100, 500, 900}, 5);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].k == 2);
  CHECK(rows[0].cosine >= 0.9);
  for (const auto& r : rows) {
    CHECK(std::isfinite(r.cosine));
    CHECK(r.se > 0.0);
  }
  write_oracle_csv("test_oracle.csv", rows);
  std::ifstream in("test_oracle.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "D,k,n,t,cosine,rel_err,SE");
}
