#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bse/powerflow.hpp"
#include "bse/sampling.hpp"

namespace bse {

/// Per-channel mean and standard deviation of the measurement under H0 (no bad data).
struct H0Stats {
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;
};

struct WaldConfig {
  double alpha = 0.05;  ///< false-alarm level
};

/// Needs at least 100 samples; zero-variance channels are rejected.
H0Stats estimate_h0_stats(std::span<const MeasurementVector> samples);
H0Stats estimate_h0_stats(const TrainingSet& train);

/// Phi^{-1}(1 - alpha/2).
double wald_threshold(double alpha);

/// Channel flagged iff |z_i - mu_i| > wald_threshold(alpha) * sigma_i, or missing.
std::vector<bool> wald_detect(const MeasurementVector& z, const H0Stats& stats, const WaldConfig& cfg);

/// Flagged and missing channels replaced by the H0 mean; validity fully restored.
MeasurementVector filter_bad(const MeasurementVector& z, const std::vector<bool>& flags,
                             const H0Stats& stats);

/// Detection probability of the Wald test when bad data have sigma_1 = ratio * sigma_0:
/// 2 (1 - Phi(Phi^{-1}(1 - alpha/2) / ratio)).
double detection_probability(double alpha, double ratio);

/// Upper-alpha quantile of chi-square with `dof` degrees of freedom.
double chi_square_threshold(int dof, double alpha);

/// True iff sum_i w_i r_i^2 exceeds chi_square_threshold(dof, alpha).
bool jx_test(const Eigen::VectorXd& residual, const Eigen::VectorXd& weights, int dof, double alpha);

/// channel,value,mean,stddev,flagged,truth
std::string detection_csv(const MeasurementSpec& spec, const MeasurementVector& z, const H0Stats& stats,
                          const std::vector<bool>& flags, const std::vector<bool>* truth = nullptr);

}  // namespace bse
