#include "disco3d/oracle.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <stdexcept>

namespace disco3d::oracle {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

struct Accumulator {
  Vec sum, sumsq;
  int n = 0;
  explicit Accumulator(int size) : sum(Vec::Zero(size)), sumsq(Vec::Zero(size)) {}
  void add(const Vec& g) {
    sum += g;
    sumsq += g.cwiseProduct(g);
    ++n;
  }
};

KLGrad unflatten(const Vec& v, int D) {
  KLGrad g;
  g.dW.resize(D, D);
  for (int r = 0; r < D; ++r)
    for (int c = 0; c < D; ++c) g.dW(r, c) = v[r * D + c];
  g.db = v.tail(D);
  return g;
}

Vec flat_outer(const Vec& a, const Vec& z) {
  const int D = static_cast<int>(a.size());
  Vec out(D * D + D);
  for (int r = 0; r < D; ++r)
    for (int c = 0; c < D; ++c) out[r * D + c] = a[r] * z[c];
  out.tail(D) = a;
  return out;
}

GradEstimate finish(const Accumulator& acc, int D) {
  const double n = acc.n;
  const Vec mean = acc.sum / n;
  Vec var = acc.sumsq / n - mean.cwiseProduct(mean);
  var = var.cwiseMax(0.0) * (n / std::max(n - 1.0, 1.0));
  const Vec se = (var / n).cwiseSqrt();
  return {unflatten(mean, D), unflatten(se, D), acc.n};
}

Mat inverse_checked(const Mat& m, const char* what) {
  Eigen::FullPivLU<Mat> lu(m);
  if (!lu.isInvertible() || std::abs(lu.determinant()) < 1e-300) {
    throw std::domain_error(std::string(what) + ": singular matrix");
  }
  return lu.inverse();
}

// Physicists' Gauss-Hermite rule by Golub-Welsch, rescaled to the standard normal.
void gauss_hermite(int n, std::vector<double>& nodes, std::vector<double>& weights) {
  Mat J = Mat::Zero(n, n);
  for (int i = 1; i < n; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(i / 2.0);
  Eigen::SelfAdjointEigenSolver<Mat> es(J);
  nodes.resize(static_cast<size_t>(n));
  weights.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    nodes[static_cast<size_t>(i)] = std::sqrt(2.0) * es.eigenvalues()[i];
    const double v0 = es.eigenvectors()(0, i);
    weights[static_cast<size_t>(i)] = v0 * v0;
  }
}

}  // namespace

void MixtureModel::validate() const {
  const int k = components();
  if (k < 1) throw std::invalid_argument("MixtureModel: needs at least one component");
  if (means.rows() != k || variances.rows() != k || variances.cols() != means.cols() || means.cols() < 1) {
    throw std::invalid_argument("MixtureModel: inconsistent shapes");
  }
  double s = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("MixtureModel: negative weight");
    s += w;
  }
  if (std::abs(s - 1.0) > 1e-12) throw std::invalid_argument("MixtureModel: weights must sum to 1");
  if (!(variances.array() > 0.0).all()) throw std::invalid_argument("MixtureModel: variances must be positive");
}

MixtureModel MixtureModel::gaussian(const Vec& mean, const Vec& variance) {
  MixtureModel m;
  m.weights = {1.0};
  m.means = mean.transpose();
  m.variances = variance.transpose();
  m.validate();
  return m;
}

double MixtureModel::log_density(const Vec& x) const {
  const int k = components();
  std::vector<double> l(static_cast<size_t>(k));
  double mx = -INFINITY;
  for (int c = 0; c < k; ++c) {
    const Vec v = variances.row(c).transpose();
    const Vec d = x - means.row(c).transpose();
    const double q = (d.array().square() / v.array()).sum();
    l[static_cast<size_t>(c)] =
        std::log(weights[static_cast<size_t>(c)]) - 0.5 * (q + v.array().log().sum() + dim() * kLog2Pi);
    mx = std::max(mx, l[static_cast<size_t>(c)]);
  }
  double s = 0.0;
  for (double v : l) s += std::exp(v - mx);
  return mx + std::log(s);
}

Vec MixtureModel::score(const Vec& x) const {
  const int k = components();
  std::vector<double> l(static_cast<size_t>(k));
  double mx = -INFINITY;
  for (int c = 0; c < k; ++c) {
    const Vec v = variances.row(c).transpose();
    const Vec d = x - means.row(c).transpose();
    l[static_cast<size_t>(c)] = std::log(weights[static_cast<size_t>(c)]) -
                                0.5 * ((d.array().square() / v.array()).sum() + v.array().log().sum());
    mx = std::max(mx, l[static_cast<size_t>(c)]);
  }
  double z = 0.0;
  for (double& v : l) z += (v = std::exp(v - mx));
  Vec s = Vec::Zero(dim());
  for (int c = 0; c < k; ++c) {
    const Vec v = variances.row(c).transpose();
    const Vec d = x - means.row(c).transpose();
    s -= (l[static_cast<size_t>(c)] / z) * (d.array() / v.array()).matrix();
  }
  return s;
}

MixtureModel MixtureModel::noised(double alpha, double sigma) const {
  MixtureModel m = *this;
  m.means = alpha * means;
  m.variances = (alpha * alpha) * variances.array() + sigma * sigma;
  return m;
}

Vec MixtureModel::sample(Rng& rng) const {
  const double u = rng.uniform();
  int c = 0;
  double acc = weights[0];
  while (u > acc && c + 1 < components()) acc += weights[static_cast<size_t>(++c)];
  Vec x(dim());
  for (int d = 0; d < dim(); ++d) x[d] = means(c, d) + std::sqrt(variances(c, d)) * rng.normal();
  return x;
}

Vec KLGrad::flat() const {
  const int D = static_cast<int>(db.size());
  Vec out(D * D + D);
  for (int r = 0; r < D; ++r)
    for (int c = 0; c < D; ++c) out[r * D + c] = dW(r, c);
  out.tail(D) = db;
  return out;
}

KLGrad analytic_kl_grad(const LinearGenerator& gen, const MixtureModel& target) {
  target.validate();
  if (target.components() != 1) throw std::invalid_argument("analytic_kl_grad: closed form needs a single Gaussian");
  if (target.dim() != gen.dim()) throw std::invalid_argument("analytic_kl_grad: dimension mismatch");
  inverse_checked(gen.covariance(), "analytic_kl_grad");
  const Vec vinv = target.variances.row(0).transpose().cwiseInverse();
  const Vec mu = target.means.row(0).transpose();
  KLGrad g;
  g.db = vinv.cwiseProduct(gen.b - mu);
  g.dW = vinv.asDiagonal() * gen.W - inverse_checked(gen.W, "analytic_kl_grad").transpose();
  return g;
}

KLGrad quadrature_kl_grad(const LinearGenerator& gen, const MixtureModel& target, int points) {
  target.validate();
  const int D = gen.dim();
  if (D > 3) throw std::invalid_argument("quadrature_kl_grad: only D <= 3 is supported");
  if (target.dim() != D) throw std::invalid_argument("quadrature_kl_grad: dimension mismatch");
  std::vector<double> nodes, weights;
  gauss_hermite(points, nodes, weights);
  Vec acc = Vec::Zero(D * D + D);
  std::vector<int> idx(static_cast<size_t>(D), 0);
  while (true) {
    Vec z(D);
    double w = 1.0;
    for (int d = 0; d < D; ++d) {
      z[d] = nodes[static_cast<size_t>(idx[static_cast<size_t>(d)])];
      w *= weights[static_cast<size_t>(idx[static_cast<size_t>(d)])];
    }
    acc += w * flat_outer(-target.score(gen(z)), z);
    int d = 0;
    while (d < D && ++idx[static_cast<size_t>(d)] == points) idx[static_cast<size_t>(d++)] = 0;
    if (d == D) break;
  }
  KLGrad g = unflatten(acc, D);
  g.dW -= inverse_checked(gen.W, "quadrature_kl_grad").transpose();
  return g;
}

GradEstimate mc_kl_grad(const LinearGenerator& gen, const MixtureModel& target, int n, Rng& rng) {
  target.validate();
  const int D = gen.dim();
  const Mat sinv = inverse_checked(gen.covariance(), "mc_kl_grad");
  Accumulator acc(D * D + D);
  Vec z(D);
  for (int i = 0; i < n; ++i) {
    for (int d = 0; d < D; ++d) z[d] = rng.normal();
    const Vec x = gen(z);
    const Vec s_q = -sinv * (x - gen.b);
    acc.add(flat_outer(-(target.score(x) - s_q), z));
  }
  return finish(acc, D);
}

GradEstimate estimate_vsd_grad(const LinearGenerator& gen, const MixtureModel& target, int n, int t,
                               const NoiseSchedule& schedule, Rng& rng) {
  target.validate();
  const int D = gen.dim();
  if (target.dim() != D) throw std::invalid_argument("estimate_vsd_grad: dimension mismatch");
  const double a = schedule.alpha(t), s = schedule.sigma(t);
  const MixtureModel p_t = target.noised(a, s);
  const Mat q_cov = a * a * gen.covariance() + s * s * Mat::Identity(D, D);
  const Mat q_inv = inverse_checked(q_cov, "estimate_vsd_grad");
  Accumulator acc(D * D + D);
  Vec z(D), e(D);
  for (int i = 0; i < n; ++i) {
    for (int d = 0; d < D; ++d) z[d] = rng.normal();
    for (int d = 0; d < D; ++d) e[d] = rng.normal();
    const Vec x_t = a * gen(z) + s * e;
    const Vec s_q = -q_inv * (x_t - a * gen.b);
    acc.add(flat_outer(-a * (p_t.score(x_t) - s_q), z));
  }
  return finish(acc, D);
}

double cosine(const Vec& a, const Vec& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

double relative_error(const Vec& estimate, const Vec& reference) {
  const double r = reference.norm();
  return (estimate - reference).norm() / (r > 0.0 ? r : 1.0);
}

MixtureModel mixture_fixture(int D) {
  MixtureModel m;
  m.weights = {0.4, 0.6};
  m.means.resize(2, D);
  m.variances.resize(2, D);
  for (int d = 0; d < D; ++d) {
    m.means(0, d) = d % 2 ? 0.5 : 1.5;
    m.means(1, d) = d % 2 ? -0.8 : -1.0;
    m.variances(0, d) = d % 2 ? 1.2 : 0.6;
    m.variances(1, d) = d % 2 ? 0.5 : 0.9;
  }
  m.validate();
  return m;
}

LinearGenerator generator_fixture(int D) {
  LinearGenerator g;
  g.W = 0.9 * Mat::Identity(D, D);
  for (int r = 0; r < D; ++r)
    for (int c = 0; c < D; ++c)
      if (r != c) g.W(r, c) = (r < c ? 0.3 : -0.2) / D;
  g.b = Vec::Zero(D);
  for (int d = 0; d < D; ++d) g.b[d] = d % 2 ? -0.4 : 0.3;
  return g;
}

std::vector<OracleRow> oracle_sweep(int D, int n, const std::vector<int>& ts, uint64_t seed) {
  const MixtureModel target = mixture_fixture(D);
  const LinearGenerator gen = generator_fixture(D);
  const NoiseSchedule sch = NoiseSchedule::ddpm_linear();
  Vec reference;
  if (D <= 3) {
    reference = quadrature_kl_grad(gen, target).flat();
  } else {
    Rng ref_rng = Rng::derive(seed, 0);
    reference = mc_kl_grad(gen, target, 1000000, ref_rng).mean.flat();
  }
  std::vector<OracleRow> rows;
  for (size_t i = 0; i < ts.size(); ++i) {
    Rng rng = Rng::derive(seed, i + 1);
    const GradEstimate est = estimate_vsd_grad(gen, target, n, ts[i], sch, rng);
    rows.push_back({D, target.components(), n, ts[i], cosine(est.mean.flat(), reference),
                    relative_error(est.mean.flat(), reference), est.se.flat().norm()});
  }
  return rows;
}

void write_oracle_csv(const std::string& path, const std::vector<OracleRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "D,k,n,t,cosine,rel_err,SE\n" << std::setprecision(10);
  for (const auto& r : rows)
    out << r.D << ',' << r.k << ',' << r.n << ',' << r.t << ',' << r.cosine << ',' << r.rel_err << ',' << r.se
        << '\n';
}

}  // namespace disco3d::oracle
