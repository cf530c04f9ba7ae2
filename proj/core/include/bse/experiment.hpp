#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "bse/bad_data.hpp"
#include "bse/grid.hpp"
#include "bse/nn.hpp"
#include "bse/powerflow.hpp"
#include "bse/pruning.hpp"
#include "bse/sampling.hpp"
#include "bse/wls.hpp"

namespace bse {

/// Scaling of the base injection law for one time-of-day scenario.
struct HourScenario {
  std::string name;
  double load_scale = 1.0;
  double generation_scale = 1.0;
};

/// Distribution learning from a meter file (one meter per non-slack node).
struct MeterLearningConfig {
  std::filesystem::path path;
  int aggregation = 4;
  int components = 3;
  /// Optional single-column fast-timescale trace for the shared AR model; IID when absent.
  std::optional<std::filesystem::path> ar_trace;
  int ar_order = 1;
  double power_factor = 0.95;
};

struct PruningConfig {
  bool enabled = true;
  double threshold = 0.1;
  int max_rounds = 5;
};

struct BaselineConfig {
  bool enabled = true;
  int window = 4;
  int aggregation = 4;
  double pseudo_sigma_factor = 10.0;  ///< pseudo std = factor * sigma_0
  double power_factor = 0.95;
  Eigen::Index regressor_hidden = 32;
  std::size_t regressor_samples = 1000;
  WlsOptions wls{};
};

struct ExperimentConfig {
  std::filesystem::path network;
  /// Inline array, or the path of a distributions file (see distributions_from_json).
  nlohmann::json distributions;
  std::optional<MeterLearningConfig> meter_data;
  std::vector<HourScenario> hours{{"base", 1.0, 1.0}};

  std::optional<MeasurementSpec> measurements;  ///< explicit sensor list; else the placement rule
  double current_fraction = 0.2;
  std::uint64_t placement_seed = 0;

  std::optional<double> noise_sigma;  ///< absolute; else noise_fraction of the mean net injection
  double noise_fraction = 0.01;

  std::size_t train_count = 2000;
  std::size_t validation_count = 1000;
  std::size_t test_count = 1000;

  BadDataConfig bad_data{0.3, 10.0, 0.3};
  WaldConfig wald{};

  std::vector<Eigen::Index> hidden{64, 64};
  nn::TrainConfig training{};
  PruningConfig pruning{};
  BaselineConfig baselines{};
  int benchmark_trials = 200;

  std::uint64_t seed = 1;
  unsigned threads = 1;

  /// Relative paths in `j` resolve against `base_dir`.
  static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  static ExperimentConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  std::string hash() const;
};

/// Everything shared by all hours: grid, base law, sensors, noise.
struct Scenario {
  Network network;
  ScenarioDistributions base;
  MeasurementSpec spec;
  double sigma0 = 0.0;
  NoiseModel noise;

  ScenarioDistributions hour(const HourScenario& h) const {
    return base.scaled(h.load_scale, h.generation_scale);
  }
};

Scenario prepare_scenario(const ExperimentConfig& config);

/// Slow-timescale GMM per meter, converted to the fast timescale.
ScenarioDistributions learn_distributions(const MeterLearningConfig& meter, const Network& network,
                                          std::uint64_t seed);

struct HourData {
  TrainingSet train;
  TrainingSet validation;
  TrainingSet test;
};

HourData generate_hour_data(const ExperimentConfig& config, const Scenario& scenario, std::size_t hour);

/// Inputs = measurement values, targets = state_to_target().
nn::Dataset to_dataset(const TrainingSet& set, const Network& network);

nn::TrainResult train_estimator(const ExperimentConfig& config, const Scenario& scenario,
                                const HourData& data, std::size_t hour);

/// (1 / (M N)) sum_k ||xhat_k - x_k||^2 with N = number of (bus, phase)
/// nodes and the norm taken over all magnitudes and angles.
double compute_ase(std::span<const StateVector> estimates, std::span<const StateVector> truths);

/// Sum of squared errors and counts, so that hours aggregate exactly.
struct AseAccumulator {
  double sse = 0.0;
  std::size_t samples = 0;
  std::size_t nodes = 0;
  void add(const StateVector& estimate, const StateVector& truth);
  void merge(const AseAccumulator& other);
  double ase() const;
};

inline const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names{"BSEdnn", "WLSp", "WLSnnp"};
  return names;
}
inline const std::vector<std::string>& case_names() {
  static const std::vector<std::string> names{"clean", "corrupted", "filtered", "missing"};
  return names;
}

struct DetectionStats {
  std::size_t bad_channels = 0;
  std::size_t good_channels = 0;
  std::size_t detected = 0;
  std::size_t false_alarms = 0;
  double detection_rate() const { return bad_channels ? double(detected) / double(bad_channels) : 0.0; }
  double false_alarm_rate() const { return good_channels ? double(false_alarms) / double(good_channels) : 0.0; }
};

struct HourEvaluation {
  std::string name;
  /// method -> case -> accumulator
  std::map<std::string, std::map<std::string, AseAccumulator>> ase;
  std::map<std::string, std::map<std::string, std::size_t>> wls_failures;
  /// WLS ASE over converged solves only; `ase` also counts the last iterate of
  /// solves that hit max_iter and the flat state for rank-deficient ones.
  std::map<std::string, std::map<std::string, AseAccumulator>> ase_converged;
  DetectionStats detection;
  std::size_t jx_clean_rejections = 0;
  std::size_t jx_corrupted_rejections = 0;
  std::size_t jx_trials = 0;
  int jx_dof = 0;
  std::string detection_rows;  ///< body rows of detection.csv for this hour
};

/// Pseudo-measurement sources for one hour.
struct BaselineContext {
  ScenarioDistributions dists;
  PseudoRegressor regressor;
};

BaselineContext prepare_baselines(const ExperimentConfig& config, const Scenario& scenario,
                                  std::size_t hour);

/// History drawn for test sample `index`: `window` past readings of the same hour.
ConsumptionHistory draw_history(const ScenarioDistributions& dists, int window, int aggregation, Rng& rng);

HourEvaluation evaluate_hour(const ExperimentConfig& config, const Scenario& scenario, std::size_t hour,
                             const HourData& data, const nn::StateEstimator& estimator);

struct PruningSummary {
  std::vector<Eigen::Index> widths_before;
  std::vector<Eigen::Index> widths_after;
  Eigen::Index neurons_before = 0;
  Eigen::Index neurons_after = 0;
  double validation_ase_before = 0.0;
  double validation_ase_after = 0.0;
  double test_ase_before = 0.0;
  double test_ase_after = 0.0;
  pruning::LoopResult loop;
};

PruningSummary run_pruning(const ExperimentConfig& config, const Scenario& scenario, const HourData& data,
                           const nn::TrainResult& trained, std::size_t hour);

struct LatencyReport {
  std::size_t trials = 0;
  double nn_median_seconds = 0.0;
  double wls_median_seconds = 0.0;
  double ratio() const { return nn_median_seconds > 0.0 ? wls_median_seconds / nn_median_seconds : 0.0; }
};

/// Median wall-clock latency of one NN estimate and one WLS solve over the
/// first `trials` inputs (cycled). Throws InvalidArgument for trials == 0.
LatencyReport benchmark_latency(const nn::StateEstimator& estimator, const WlsSolver& wls,
                                std::span<const MeasurementVector> nn_inputs,
                                std::span<const Eigen::VectorXd> wls_inputs, const Eigen::VectorXd& wls_weights,
                                const StateVector& x0, std::size_t trials);

/// Latency of BSEdnn against WLSp on the test set of `hour`.
LatencyReport benchmark_hour(const ExperimentConfig& config, const Scenario& scenario, const HourData& data,
                             const nn::StateEstimator& estimator, std::size_t hour, std::size_t trials);

struct EvaluationReport {
  nlohmann::json report;      ///< deterministic content of report.json
  std::string ase_csv;
  std::string detection_csv;
  std::string timing_csv;     ///< wall-clock figures; not part of report.json
  std::vector<HourEvaluation> hours;
  std::optional<PruningSummary> pruning;
  LatencyReport latency;                        ///< trained model of the first hour
  std::optional<LatencyReport> latency_pruned;  ///< pruned model, when pruning ran
};

/// Full pipeline; writes report.json, ase.csv, detection.csv, timing.csv and
/// model / training-set artifacts under `out_dir` (skipped when empty).
/// Stage failures are rethrown as Error("<stage>: ...").
EvaluationReport run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir);

}  // namespace bse
