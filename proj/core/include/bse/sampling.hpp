#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bse/grid.hpp"
#include "bse/injection.hpp"
#include "bse/powerflow.hpp"
#include "bse/rng.hpp"

namespace bse {

/// Injection law of one non-slack node (fast timescale, per unit).
struct NodeDistribution {
  GaussianMixture load;                       ///< consumption, drawn as a positive quantity
  std::optional<GaussianMixture> generation;  ///< e.g. rooftop solar; unity power factor
  double power_factor = 0.95;                 ///< of the load part
};

/// One NodeDistribution per entry of Network::free_nodes(), same order.
struct ScenarioDistributions {
  std::vector<NodeDistribution> nodes;

  void validate(const Network& network) const;
  /// Copy with every load mixture scaled by `load_scale` and every generation mixture by `gen_scale`.
  ScenarioDistributions scaled(double load_scale, double gen_scale) const;
  /// Mean net active injection per node.
  Eigen::VectorXd mean_injection() const;
};

/// sigma_0 = fraction * mean_i |E[P_i]|; the default fraction is 1 %.
double default_noise_sigma(const ScenarioDistributions& dists, double fraction = 0.01);

struct NoiseModel {
  Eigen::VectorXd sigma;  ///< per channel

  static NoiseModel uniform(std::size_t channels, double sigma) {
    return {Eigen::VectorXd::Constant(static_cast<Eigen::Index>(channels), sigma)};
  }
};

struct BadDataConfig {
  double probability = 0.0;   ///< eta, per channel
  double ratio = 10.0;        ///< sigma_1 / sigma_0
  double missing_rate = 0.0;
};

/// Monte Carlo (state, measurement) pairs drawn through the power-flow model.
struct TrainingSet {
  std::vector<StateVector> states;
  std::vector<MeasurementVector> measurements;
  std::uint64_t seed = 0;
  MeasurementSpec spec;
  std::size_t attempted = 0;
  std::size_t failures = 0;

  std::size_t size() const noexcept { return states.size(); }
};

InjectionVector sample_injections(const ScenarioDistributions& dists, Rng& rng);

struct GenerationOptions {
  unsigned threads = 1;
  double max_failure_fraction = 0.10;
  PowerFlowOptions powerflow{};
};

/// Sample k uses its own stream Rng::stream(seed, k), so the output does not
/// depend on the number of worker threads.
TrainingSet generate_training_set(const Network& network, const ScenarioDistributions& dists,
                                  const MeasurementSpec& spec, const NoiseModel& noise,
                                  std::size_t count, std::uint64_t seed,
                                  const GenerationOptions& options = {});

struct CorruptedMeasurement {
  MeasurementVector z;
  std::vector<bool> bad;  ///< ground truth: channel carries bad data
};

/// With probability `cfg.probability` a channel's noise is replaced by a draw
/// from N(0, (cfg.ratio * sigma0_i)^2) added to the clean value.
CorruptedMeasurement inject_bad_data(const MeasurementVector& z, const Eigen::VectorXd& clean,
                                     const Eigen::VectorXd& sigma0, const BadDataConfig& cfg,
                                     Rng& rng);

/// Clears the validity flag of each channel independently with probability `rate`.
MeasurementVector inject_missing(const MeasurementVector& z, double rate, Rng& rng);

/// Block sums of `aggregation` consecutive fast values per meter.
std::vector<MeterSeries> synthesize_meter_series(
    const std::map<std::string, std::vector<double>>& fast_series, int aggregation);

/// CSV + JSON manifest persistence (states.csv, measurements.csv, manifest.json).
void write_training_set(const std::filesystem::path& dir, const TrainingSet& set,
                        const Network& network, const std::string& config_hash);
TrainingSet read_training_set(const std::filesystem::path& dir, const Network& network);

/// Current-magnitude meters on ceil(fraction * branches) branches chosen
/// uniformly without replacement (seeded), plus slack P and Q on every slack phase.
MeasurementSpec default_placement(const Network& network, double branch_fraction,
                                  std::uint64_t seed);

}  // namespace bse
