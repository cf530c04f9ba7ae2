#pragma once

#include <vector>

#include <Eigen/Dense>

#include "bse/grid.hpp"
#include "bse/nn.hpp"
#include "bse/powerflow.hpp"

namespace bse {

struct ObservabilityReport {
  Eigen::Index rank = 0;
  Eigen::Index state_dimension = 0;
  bool observable = false;
  Eigen::VectorXd singular_values;
};

/// Numerical rank of the non-slack columns of the measurement Jacobian at
/// `at` (flat start when null); singular values below rel_tol * max are zero.
/// Current-magnitude rows vanish at a flat, zero-flow state.
ObservabilityReport check_observability(const Network& network, const MeasurementSpec& spec,
                                        const StateVector* at = nullptr, double rel_tol = 1e-8);

struct WlsOptions {
  double tol = 1e-8;  ///< on the infinity norm of the state update
  int max_iter = 50;
  int max_halvings = 10;
  double rank_tol = 1e-8;
  /// Also stop when an accepted step lowers the objective by less than this
  /// fraction (current-magnitude rows are not differentiable at zero current).
  double stall_rtol = 1e-12;
  /// When false, exhausting max_iter returns the last iterate with converged = false.
  bool throw_on_max_iter = true;
};

struct WlsResult {
  StateVector state;
  Eigen::VectorXd residual;  ///< z - h(x) at the returned state
  Eigen::VectorXd weights;
  double objective = 0.0;    ///< sum_i w_i r_i^2
  int iterations = 0;
  bool converged = true;
  std::vector<double> objective_trace;
};

/// Damped Gauss-Newton on the weighted residual over the non-slack (theta, V).
class WlsSolver {
 public:
  WlsSolver(const Network& network, MeasurementSpec spec);

  const MeasurementModel& model() const noexcept { return model_; }

  /// Throws SingularMatrixError when the weighted Jacobian loses column rank
  /// and ConvergenceError when max_iter is exhausted.
  WlsResult solve(const Eigen::VectorXd& z, const Eigen::VectorXd& weights, const StateVector& x0,
                  const WlsOptions& options = {}) const;

 private:
  MeasurementModel model_;
  std::vector<Eigen::Index> free_cols_;
};

WlsResult wls_solve(const Network& network, const MeasurementVector& z, const MeasurementSpec& spec,
                    const Eigen::VectorXd& weights, const StateVector& x0, const WlsOptions& options = {});

/// Injection pseudo-measurements (P then Q per non-slack node) and their weights.
struct PseudoMeasurementSet {
  MeasurementSpec spec;
  Eigen::VectorXd values;
  Eigen::VectorXd weights;
};

/// Past slow-timescale net energy per non-slack node (generation positive),
/// oldest first; each reading covers `aggregation` fast intervals.
struct ConsumptionHistory {
  std::vector<std::vector<double>> energy;
  int aggregation = 1;
};

struct PseudoOptions {
  int window = 4;
  double power_factor = 0.95;
  double sigma = 1.0;  ///< pseudo-measurement std; weight = 1 / sigma^2
};

/// Windowed mean of the most recent readings, converted to per-interval power.
PseudoMeasurementSet pseudo_avg(const ConsumptionHistory& history, const Network& network,
                                const PseudoOptions& options);

/// Regressor from the last `window` readings of every node to the next
/// per-interval active injection of every node.
struct PseudoRegressor {
  nn::MLP model;
  nn::Scaler scaler;
  int window = 1;
};

/// Flattened regressor input: node-major, oldest first, energies divided by aggregation.
Eigen::VectorXd pseudo_features(const ConsumptionHistory& history, int window);

PseudoRegressor train_pseudo_regressor(const std::vector<ConsumptionHistory>& histories,
                                       const std::vector<Eigen::VectorXd>& next_injection, int window,
                                       Eigen::Index hidden_width, const nn::TrainConfig& config);

PseudoMeasurementSet pseudo_nn(const ConsumptionHistory& history, const PseudoRegressor& regressor,
                               const Network& network, const PseudoOptions& options);

/// Real channels (minus dropped ones) followed by the pseudo channels.
struct AugmentedProblem {
  MeasurementSpec spec;
  Eigen::VectorXd z;
  Eigen::VectorXd weights;
};

AugmentedProblem augment(const MeasurementSpec& spec, const MeasurementVector& z,
                         const Eigen::VectorXd& weights, const PseudoMeasurementSet& pseudo,
                         const std::vector<bool>* drop = nullptr);

}  // namespace bse
