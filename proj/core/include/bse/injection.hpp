#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bse/rng.hpp"

namespace bse {

/// One-dimensional Gaussian mixture. Used for both the slow (meter-interval)
/// and the fast (estimation-interval) timescale; only the interpretation of
/// the moments differs.
struct GaussianMixture {
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> variances;

  std::size_t size() const noexcept { return weights.size(); }
  double mean() const;
  double variance() const;
  /// Affine rescaling of the random variable by `factor` (> 0).
  GaussianMixture scaled(double factor) const;
  /// Throws InvalidArgument unless weights are positive and sum to one and variances are positive.
  void validate() const;

  static GaussianMixture point(double value, double variance = 1e-9) {
    return {{1.0}, {value}, {variance}};
  }
  bool operator==(const GaussianMixture&) const = default;
};

double log_likelihood(const GaussianMixture& gmm, std::span<const double> samples);

struct EmOptions {
  double tol = 1e-10;  ///< stop when the per-sample log-likelihood gain falls below this
  int max_iter = 1000;
  int restarts = 5;
  std::uint64_t seed = 0;
  double variance_floor = 1e-9;
};

struct GmmFit {
  GaussianMixture mixture;
  double log_likelihood = 0.0;
  int iterations = 0;
  /// Total log-likelihood after every EM iteration of the returned restart.
  std::vector<double> trace;
  /// Set when a component variance hit the floor (e.g. constant input).
  bool degenerate = false;
};

/// Maximum-likelihood mixture fit by EM; best of `restarts` initialisations.
GmmFit fit_gmm_em(std::span<const double> samples, int components, const EmOptions& options = {});

/// X_n = sum_k alpha_k X_{n-k} + eps_n, eps_n ~ N(mu_eps, sigma_eps^2).
struct ARModel {
  std::vector<double> coefficients;
  double innovation_variance = 1.0;
  double innovation_mean = 0.0;

  int order() const noexcept { return static_cast<int>(coefficients.size()); }
  /// Largest eigenvalue modulus of the companion matrix (0 for order 0).
  double spectral_radius() const;
  bool is_stationary() const { return spectral_radius() < 1.0; }
};

/// Least-squares AR fit with intercept. Rejects non-stationary or
/// ill-conditioned fits with FitError.
ARModel fit_ar_ls(std::span<const double> trace, int order);

/// Matrix A with c = A c + sigma_eps^2 e_1, c = [C(0), .., C(T-1)]:
/// row m accumulates alpha_k at column |m - k|.
Eigen::MatrixXd build_autocovariance_system(const ARModel& ar, int aggregation);

/// Fast-timescale marginal variance whose T-fold aggregate has variance `slow_variance`.
double downscale_variance(const ARModel& ar, int aggregation, double slow_variance);

/// Component-wise conversion of a slow mixture to the fast timescale.
/// `models` holds one AR model per component, or a single shared model.
GaussianMixture downscale_mixture(const GaussianMixture& slow, std::span<const ARModel> models,
                                  int aggregation);

double sample_mixture(const GaussianMixture& gmm, Rng& rng);

/// Accumulated readings of one meter; each reading sums `aggregation` fast intervals.
struct MeterSeries {
  std::string meter_id;
  int aggregation = 1;
  std::vector<double> readings;
};

}  // namespace bse
