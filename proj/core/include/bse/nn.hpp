#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bse/grid.hpp"
#include "bse/powerflow.hpp"

namespace bse::nn {

enum class Activation { ReLU, Linear };

struct Layer {
  Eigen::MatrixXd weights;  ///< rows = neurons, cols = width of the previous layer
  Eigen::VectorXd bias;
  Activation activation = Activation::ReLU;

  Eigen::Index inputs() const noexcept { return weights.cols(); }
  Eigen::Index outputs() const noexcept { return weights.rows(); }
};

/// Fully connected network; hidden layers ReLU, output layer linear.
/// Batched calls take one sample per column.
class MLP {
 public:
  MLP() = default;
  explicit MLP(std::vector<Layer> layers);

  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::vector<Layer>& layers() noexcept { return layers_; }

  Eigen::Index input_size() const { return layers_.front().inputs(); }
  Eigen::Index output_size() const { return layers_.back().outputs(); }
  std::vector<Eigen::Index> hidden_widths() const;
  Eigen::Index hidden_neurons() const;

  Eigen::MatrixXd forward(const Eigen::MatrixXd& inputs) const;
  Eigen::VectorXd forward(const Eigen::VectorXd& input) const;
  /// Post-activation outputs of every layer (index 0 is the first hidden layer).
  std::vector<Eigen::MatrixXd> activations(const Eigen::MatrixXd& inputs) const;

  /// Throws DimensionError if adjacent layers do not chain.
  void validate() const;

 private:
  std::vector<Layer> layers_;
};

/// He-normal weights N(0, 2/fan_in), zero biases. `dims` = [input, hidden..., output].
MLP init_he(std::span<const Eigen::Index> dims, std::uint64_t seed);

struct Gradient {
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> bias;
};

/// Mean over samples (columns) of the squared 2-norm of the residual.
double loss(const MLP& mlp, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets);

/// Reverse-mode gradient of loss(); ReLU'(0) = 0.
Gradient backward(const MLP& mlp, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets,
                  double* loss_out = nullptr);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment estimates and step counter of Adam.
struct AdamState {
  Gradient m;
  Gradient v;
  long long step = 0;

  static AdamState zeros_like(const MLP& mlp);
};

void adam_step(MLP& mlp, const Gradient& grad, AdamState& state, const AdamConfig& cfg);

/// Per-feature standardisation of inputs (z) and targets (x).
struct Scaler {
  Eigen::VectorXd input_mean, input_std, target_mean, target_std;

  static Scaler fit(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets,
                    double std_floor = 1e-12);
  static Scaler identity(Eigen::Index inputs, Eigen::Index targets);

  Eigen::MatrixXd scale_inputs(const Eigen::MatrixXd& z) const;
  Eigen::MatrixXd scale_targets(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd unscale_targets(const Eigen::MatrixXd& x) const;
};

/// Samples are columns.
struct Dataset {
  Eigen::MatrixXd inputs;
  Eigen::MatrixXd targets;

  Eigen::Index size() const noexcept { return inputs.cols(); }
};

struct TrainConfig {
  Eigen::Index batch_size = 32;
  AdamConfig adam{};
  int max_epochs = 200;
  int patience = 20;
  std::uint64_t seed = 0;
};

struct TrainReport {
  std::vector<double> train_loss;       ///< per epoch, scaled space
  std::vector<double> validation_loss;  ///< per epoch, scaled space
  int best_epoch = -1;                  ///< zero-based
  int stopped_epoch = -1;
  double seconds = 0.0;
};

struct TrainResult {
  MLP model;
  Scaler scaler;
  TrainReport report;
};

/// Fits the scaler on `train`, He-initialises [inputs, hidden..., outputs] and
/// runs seeded mini-batch Adam with early stopping on validation loss.
TrainResult train(const Dataset& train_set, const Dataset& validation_set,
                  std::span<const Eigen::Index> hidden, const TrainConfig& config);

/// Continues training `model` (already in the scaler's space) from its current weights.
TrainResult train_from(MLP model, const Scaler& scaler, const Dataset& train_set,
                       const Dataset& validation_set, const TrainConfig& config);

/// Regression targets: (V, theta) of the non-slack nodes, magnitudes first.
Eigen::VectorXd state_to_target(const StateVector& state, const Network& network);
/// Inverse of state_to_target; slack entries come from flat_state().
StateVector target_to_state(const Eigen::VectorXd& target, const Network& network);

/// MLP + Scaler + network layout: z in, StateVector out.
class StateEstimator {
 public:
  StateEstimator(const Network& network, MLP model, Scaler scaler);

  const MLP& model() const noexcept { return model_; }
  const Scaler& scaler() const noexcept { return scaler_; }

  /// Throws if z has the wrong length or carries invalid (unimputed) channels.
  StateVector estimate(const MeasurementVector& z) const;

 private:
  const Network* network_;
  MLP model_;
  Scaler scaler_;
  StateVector slack_template_;
};

/// <stem>.json manifest plus <stem>.bin little-endian float64 weights
/// (layer-major, each layer row-major weights followed by bias).
void save_model(const std::filesystem::path& stem, const MLP& mlp, const Scaler& scaler,
                std::uint64_t seed, const std::string& config_hash);
void load_model(const std::filesystem::path& stem, MLP& mlp, Scaler& scaler);

}  // namespace bse::nn
