#include "bse/bad_data.hpp"

#include <cmath>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include "bse/error.hpp"
#include "bse/io.hpp"

namespace bse {

H0Stats estimate_h0_stats(std::span<const MeasurementVector> samples) {
  if (samples.size() < 100) throw InvalidArgument("H0 statistics need at least 100 samples");
  const Eigen::Index m = samples.front().values.size();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(m);
  for (const auto& z : samples) {
    if (z.values.size() != m) throw DimensionError("samples differ in channel count");
    sum += z.values;
  }
  const double n = static_cast<double>(samples.size());
  H0Stats s{sum / n, Eigen::VectorXd::Zero(m)};
  for (const auto& z : samples) s.stddev += (z.values - s.mean).cwiseAbs2();
  s.stddev = (s.stddev / (n - 1.0)).cwiseSqrt();
  for (Eigen::Index c = 0; c < m; ++c)
    if (!(s.stddev[c] > 0.0))
      throw InvalidArgument("measurement channel " + std::to_string(c) + " has zero variance under H0");
  return s;
}

H0Stats estimate_h0_stats(const TrainingSet& train) { return estimate_h0_stats(train.measurements); }

double wald_threshold(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidArgument("false-alarm level must lie in (0, 1)");
  return boost::math::quantile(boost::math::normal(), 1.0 - alpha / 2.0);
}

std::vector<bool> wald_detect(const MeasurementVector& z, const H0Stats& stats, const WaldConfig& cfg) {
  if (z.values.size() != stats.mean.size()) throw DimensionError("H0 stats do not match z");
  const double k = wald_threshold(cfg.alpha);
  std::vector<bool> flags(z.size());
  for (std::size_t c = 0; c < z.size(); ++c) {
    const auto i = static_cast<Eigen::Index>(c);
    flags[c] = !z.is_valid(c) || std::abs(z.values[i] - stats.mean[i]) > k * stats.stddev[i];
  }
  return flags;
}

MeasurementVector filter_bad(const MeasurementVector& z, const std::vector<bool>& flags,
                             const H0Stats& stats) {
  if (flags.size() != z.size() || stats.mean.size() != z.values.size())
    throw DimensionError("filter: mask / stats do not match z");
  MeasurementVector out{z.values, {}};
  for (std::size_t c = 0; c < z.size(); ++c)
    if (flags[c] || !z.is_valid(c)) out.values[static_cast<Eigen::Index>(c)] = stats.mean[static_cast<Eigen::Index>(c)];
  return out;
}

double detection_probability(double alpha, double ratio) {
  if (!(ratio > 0.0)) throw InvalidArgument("ratio sigma_1/sigma_0 must be positive");
  const boost::math::normal std_normal;
  return 2.0 * boost::math::cdf(boost::math::complement(std_normal, wald_threshold(alpha) / ratio));
}

double chi_square_threshold(int dof, double alpha) {
  if (dof <= 0) throw InvalidArgument("chi-square test needs positive degrees of freedom");
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidArgument("false-alarm level must lie in (0, 1)");
  return boost::math::quantile(boost::math::complement(boost::math::chi_squared(dof), alpha));
}

bool jx_test(const Eigen::VectorXd& residual, const Eigen::VectorXd& weights, int dof, double alpha) {
  if (residual.size() != weights.size()) throw DimensionError("residual and weights differ in length");
  const double threshold = chi_square_threshold(dof, alpha);
  return weights.dot(residual.cwiseAbs2()) > threshold;
}

std::string detection_csv(const MeasurementSpec& spec, const MeasurementVector& z, const H0Stats& stats,
                          const std::vector<bool>& flags, const std::vector<bool>* truth) {
  std::string out = "channel,value,mean,stddev,flagged,truth\n";
  for (std::size_t c = 0; c < z.size(); ++c) {
    const auto i = static_cast<Eigen::Index>(c);
    const Channel& ch = spec.channels[c];
    out += std::string(to_string(ch.kind)) + "_" + std::to_string(ch.element) + "_" + std::to_string(ch.phase);
    out += "," + (z.is_valid(c) ? format_double(z.values[i]) : std::string()) + "," +
           format_double(stats.mean[i]) + "," + format_double(stats.stddev[i]) + "," +
           (flags[c] ? "1" : "0") + "," + (truth ? ((*truth)[c] ? "1" : "0") : "") + "\n";
  }
  return out;
}

}  // namespace bse
