#include "bse/injection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "bse/error.hpp"

namespace bse {
namespace {

double log_normal_pdf(double x, double mean, double variance) {
  const double d = x - mean;
  return -0.5 * (std::log(2.0 * std::numbers::pi * variance) + d * d / variance);
}

double log_sum_exp(std::span<const double> v) {
  const double hi = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(hi)) return hi;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - hi);
  return hi + std::log(acc);
}

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};

Moments moments(std::span<const double> x) {
  Moments m;
  m.mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  for (double v : x) m.variance += (v - m.mean) * (v - m.mean);
  m.variance /= static_cast<double>(x.size());
  return m;
}

// Lloyd iterations from the given centres; returns a mixture with hard-assignment moments.
GaussianMixture kmeans_seed(std::span<const double> x, std::vector<double> centres, double floor,
                            double fallback_variance) {
  const std::size_t k = centres.size();
  std::vector<std::size_t> label(x.size(), 0);
  for (int it = 0; it < 20; ++it) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c)
        if (std::abs(x[i] - centres[c]) < std::abs(x[i] - centres[best])) best = c;
      label[i] = best;
    }
    std::vector<double> sum(k, 0.0);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
      sum[label[i]] += x[i];
      ++count[label[i]];
    }
    for (std::size_t c = 0; c < k; ++c)
      if (count[c] > 0) centres[c] = sum[c] / static_cast<double>(count[c]);
  }
  GaussianMixture g;
  std::vector<double> ss(k, 0.0);
  std::vector<std::size_t> count(k, 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - centres[label[i]];
    ss[label[i]] += d * d;
    ++count[label[i]];
  }
  for (std::size_t c = 0; c < k; ++c) {
    const double n = static_cast<double>(count[c]);
    g.weights.push_back(count[c] > 0 ? n / static_cast<double>(x.size()) : 1.0 / static_cast<double>(x.size()));
    g.means.push_back(centres[c]);
    g.variances.push_back(count[c] > 1 ? std::max(ss[c] / n, floor) : std::max(fallback_variance, floor));
  }
  const double total = std::accumulate(g.weights.begin(), g.weights.end(), 0.0);
  for (double& w : g.weights) w /= total;
  return g;
}

struct EmRun {
  GaussianMixture mixture;
  std::vector<double> trace;
  bool floored = false;
};

EmRun run_em(std::span<const double> x, GaussianMixture g, const EmOptions& opt) {
  const std::size_t n = x.size();
  const std::size_t k = g.size();
  const double dn = static_cast<double>(n);
  Eigen::MatrixXd resp(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
  std::vector<double> row(k);
  EmRun run;

  auto e_step = [&]() {
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < k; ++c)
        row[c] = std::log(g.weights[c]) + log_normal_pdf(x[i], g.means[c], g.variances[c]);
      const double lse = log_sum_exp(row);
      ll += lse;
      for (std::size_t c = 0; c < k; ++c)
        resp(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = std::exp(row[c] - lse);
    }
    return ll;
  };

  double ll = e_step();
  for (int it = 0; it < opt.max_iter; ++it) {
    run.floored = false;
    for (std::size_t c = 0; c < k; ++c) {
      const auto col = resp.col(static_cast<Eigen::Index>(c));
      const double nk = col.sum();
      if (!(nk > std::numeric_limits<double>::min())) {
        // Component lost all support; keep its moments and give it negligible weight.
        g.weights[c] = std::numeric_limits<double>::min();
        continue;
      }
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += col[static_cast<Eigen::Index>(i)] * x[i];
      mean /= nk;
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = x[i] - mean;
        var += col[static_cast<Eigen::Index>(i)] * d * d;
      }
      var /= nk;
      if (var <= opt.variance_floor) {
        var = opt.variance_floor;
        run.floored = true;
      }
      g.weights[c] = nk / dn;
      g.means[c] = mean;
      g.variances[c] = var;
    }
    const double total = std::accumulate(g.weights.begin(), g.weights.end(), 0.0);
    for (double& w : g.weights) w /= total;

    const double next = e_step();
    run.trace.push_back(next);
    const double gain = (next - ll) / dn;
    ll = next;
    if (gain < opt.tol) break;
  }
  run.mixture = std::move(g);
  return run;
}

}  // namespace

double GaussianMixture::mean() const {
  double m = 0.0;
  for (std::size_t c = 0; c < size(); ++c) m += weights[c] * means[c];
  return m;
}

double GaussianMixture::variance() const {
  const double mu = mean();
  double second = 0.0;
  for (std::size_t c = 0; c < size(); ++c)
    second += weights[c] * (variances[c] + means[c] * means[c]);
  return second - mu * mu;
}

GaussianMixture GaussianMixture::scaled(double factor) const {
  GaussianMixture out = *this;
  for (double& m : out.means) m *= factor;
  for (double& v : out.variances) v *= factor * factor;
  return out;
}

void GaussianMixture::validate() const {
  if (weights.empty() || means.size() != weights.size() || variances.size() != weights.size())
    throw InvalidArgument("mixture must have matching, non-empty weight/mean/variance lists");
  double total = 0.0;
  for (std::size_t c = 0; c < size(); ++c) {
    if (!(weights[c] > 0.0)) throw InvalidArgument("mixture weights must be positive");
    if (!(variances[c] > 0.0)) throw InvalidArgument("mixture variances must be positive");
    if (!std::isfinite(means[c])) throw InvalidArgument("mixture means must be finite");
    total += weights[c];
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("mixture weights must sum to one");
}

double log_likelihood(const GaussianMixture& gmm, std::span<const double> samples) {
  std::vector<double> row(gmm.size());
  double ll = 0.0;
  for (double x : samples) {
    for (std::size_t c = 0; c < gmm.size(); ++c)
      row[c] = std::log(gmm.weights[c]) + log_normal_pdf(x, gmm.means[c], gmm.variances[c]);
    ll += log_sum_exp(row);
  }
  return ll;
}

GmmFit fit_gmm_em(std::span<const double> samples, int components, const EmOptions& options) {
  if (components < 1) throw InvalidArgument("mixture needs at least one component");
  const auto k = static_cast<std::size_t>(components);
  if (samples.size() < k) throw InvalidArgument("fewer samples than mixture components");

  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const Moments all = moments(samples);
  const double spread = std::sqrt(all.variance);

  std::vector<double> quantile_centres(k);
  for (std::size_t c = 0; c < k; ++c) {
    const double q = (static_cast<double>(c) + 0.5) / static_cast<double>(k);
    quantile_centres[c] = sorted[std::min(sorted.size() - 1,
                                          static_cast<std::size_t>(q * static_cast<double>(sorted.size())))];
  }

  Rng rng(options.seed);
  GmmFit best;
  best.log_likelihood = -std::numeric_limits<double>::infinity();
  const int attempts = std::max(1, options.restarts);
  for (int r = 0; r < attempts; ++r) {
    std::vector<double> centres = quantile_centres;
    if (r > 0)
      for (double& c : centres) c += 0.5 * spread * rng.normal();
    GaussianMixture init =
        kmeans_seed(samples, std::move(centres), options.variance_floor, all.variance / static_cast<double>(k));
    EmRun run = run_em(samples, std::move(init), options);
    const double ll = run.trace.empty() ? log_likelihood(run.mixture, samples) : run.trace.back();
    if (ll > best.log_likelihood || r == 0) {
      best.mixture = std::move(run.mixture);
      best.log_likelihood = ll;
      best.iterations = static_cast<int>(run.trace.size());
      best.trace = std::move(run.trace);
      best.degenerate = run.floored;
    }
  }

  // Present components in ascending mean order.
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return best.mixture.means[a] < best.mixture.means[b]; });
  GaussianMixture sorted_mix;
  for (std::size_t c : order) {
    sorted_mix.weights.push_back(best.mixture.weights[c]);
    sorted_mix.means.push_back(best.mixture.means[c]);
    sorted_mix.variances.push_back(best.mixture.variances[c]);
  }
  best.mixture = std::move(sorted_mix);
  return best;
}

// ---------------------------------------------------------------------------

double ARModel::spectral_radius() const {
  const auto p = static_cast<Eigen::Index>(coefficients.size());
  if (p == 0) return 0.0;
  Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(p, p);
  for (Eigen::Index k = 0; k < p; ++k) companion(0, k) = coefficients[static_cast<std::size_t>(k)];
  for (Eigen::Index k = 1; k < p; ++k) companion(k, k - 1) = 1.0;
  Eigen::EigenSolver<Eigen::MatrixXd> eig(companion, false);
  return eig.eigenvalues().cwiseAbs().maxCoeff();
}

ARModel fit_ar_ls(std::span<const double> trace, int order) {
  if (order < 0) throw InvalidArgument("AR order must be non-negative");
  const auto n = trace.size();
  if (n < 2 || n <= static_cast<std::size_t>(10 * order))
    throw InvalidArgument("AR fit needs more than 10*order samples");

  ARModel ar;
  if (order == 0) {
    const Moments m = moments(trace);
    ar.innovation_mean = m.mean;
    ar.innovation_variance = m.variance;
    return ar;
  }

  const auto p = static_cast<std::size_t>(order);
  const auto rows = static_cast<Eigen::Index>(n - p);
  const auto cols = static_cast<Eigen::Index>(p + 1);
  Eigen::MatrixXd design(rows, cols);
  Eigen::VectorXd target(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const std::size_t t = static_cast<std::size_t>(r) + p;
    for (std::size_t k = 1; k <= p; ++k) design(r, static_cast<Eigen::Index>(k - 1)) = trace[t - k];
    design(r, cols - 1) = 1.0;
    target[r] = trace[t];
  }
  const Eigen::MatrixXd normal = design.transpose() * design;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> spectrum(normal, Eigen::EigenvaluesOnly);
  const double lo = spectrum.eigenvalues().minCoeff();
  const double hi = spectrum.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > 1e12) throw FitError("AR normal equations are ill-conditioned");

  const Eigen::VectorXd beta = normal.ldlt().solve(design.transpose() * target);
  const Eigen::VectorXd resid = target - design * beta;
  ar.coefficients.assign(beta.data(), beta.data() + p);
  ar.innovation_mean = beta[cols - 1];
  ar.innovation_variance = resid.squaredNorm() / static_cast<double>(rows);
  if (!ar.is_stationary())
    throw FitError("fitted AR model is not stationary (spectral radius " +
                   std::to_string(ar.spectral_radius()) + ")");
  return ar;
}

Eigen::MatrixXd build_autocovariance_system(const ARModel& ar, int aggregation) {
  if (aggregation < 1) throw InvalidArgument("aggregation factor must be at least 1");
  if (ar.order() >= aggregation)
    throw InvalidArgument("AR order must be smaller than the aggregation factor");
  const Eigen::Index t = aggregation;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(t, t);
  for (Eigen::Index m = 0; m < t; ++m)
    for (int k = 1; k <= ar.order(); ++k)
      a(m, std::abs(m - k)) += ar.coefficients[static_cast<std::size_t>(k - 1)];
  return a;
}

double downscale_variance(const ARModel& ar, int aggregation, double slow_variance) {
  if (!(slow_variance > 0.0)) throw InvalidArgument("slow-timescale variance must be positive");
  const Eigen::MatrixXd a = build_autocovariance_system(ar, aggregation);
  const Eigen::Index t = aggregation;
  const Eigen::MatrixXd system = Eigen::MatrixXd::Identity(t, t) - a;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(system);
  if (!lu.isInvertible()) throw FitError("I - A is singular; AR model has a unit root");
  const Eigen::VectorXd c = lu.solve(Eigen::VectorXd::Unit(t, 0));

  double aggregate = static_cast<double>(aggregation) * c[0];
  for (Eigen::Index m = 1; m < t; ++m) aggregate += 2.0 * static_cast<double>(aggregation - m) * c[m];
  const double sigma2 = slow_variance * c[0] / aggregate;
  if (!(sigma2 > 0.0) || !std::isfinite(sigma2))
    throw FitError("downscaled variance is not positive");
  return sigma2;
}

GaussianMixture downscale_mixture(const GaussianMixture& slow, std::span<const ARModel> models,
                                  int aggregation) {
  if (models.size() != 1 && models.size() != slow.size())
    throw InvalidArgument("need one AR model per component or a single shared model");
  GaussianMixture fast;
  fast.weights = slow.weights;
  for (std::size_t c = 0; c < slow.size(); ++c) {
    const ARModel& ar = models.size() == 1 ? models[0] : models[c];
    fast.means.push_back(slow.means[c] / static_cast<double>(aggregation));
    try {
      fast.variances.push_back(downscale_variance(ar, aggregation, slow.variances[c]));
    } catch (const Error& e) {
      throw FitError("mixture component " + std::to_string(c) + ": " + e.what());
    }
  }
  return fast;
}

double sample_mixture(const GaussianMixture& gmm, Rng& rng) {
  const double u = rng.uniform();
  std::size_t c = 0;
  double acc = gmm.weights[0];
  while (u >= acc && c + 1 < gmm.size()) acc += gmm.weights[++c];
  return rng.normal(gmm.means[c], std::sqrt(gmm.variances[c]));
}

}  // namespace bse
