#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bse/nn.hpp"

namespace bse::pruning {

/// 1 - E[xy] / sqrt(E[x^2] E[y^2]); 1 when either vector is all zero.
double similarity(std::span<const double> x, std::span<const double> y);
double similarity(const Eigen::VectorXd& x, const Eigen::VectorXd& y);

/// Partition of one layer's neurons.
struct ClusterAssignment {
  std::vector<std::vector<std::size_t>> clusters;  ///< members, ascending
  std::vector<std::size_t> representatives;        ///< one per cluster

  std::size_t neuron_count() const;
};

/// Average-linkage agglomerative clustering of the columns of `activations`
/// (rows = samples, cols = neurons) under similarity(). Merging stops once
/// the closest pair of clusters is farther apart than `threshold`; a zero
/// threshold merges nothing. Each cluster is represented by its medoid; ties
/// go to the lowest index.
ClusterAssignment cluster_layer(const Eigen::MatrixXd& activations, double threshold);

/// Collapses every cluster of hidden layer `layer` into its representative:
/// incoming weights/bias are kept, outgoing weights of the members are summed.
nn::MLP prune(const nn::MLP& mlp, std::size_t layer, const ClusterAssignment& clusters);

struct RoundReport {
  int round = 0;  ///< 0 is the unpruned model
  std::vector<Eigen::Index> widths;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double test_loss = 0.0;
};

struct LoopData {
  nn::Dataset train;
  nn::Dataset validation;
  nn::Dataset test;
};

/// Overridable pieces of the loop; defaults retrain with nn::train_from and
/// score with nn::loss in the scaler's space.
struct LoopHooks {
  std::function<nn::MLP(const nn::MLP&, int round)> retrain;
  std::function<double(const nn::MLP&, const nn::Dataset&)> evaluate;
};

struct LoopResult {
  nn::MLP model;
  int best_round = 0;
  std::vector<RoundReport> rounds;
};

/// Rounds of {activations on validation inputs -> cluster every hidden layer
/// -> prune -> retrain}. Stops at the first round that is worse than the best
/// so far, or that removes no neuron, and returns the best round's model.
LoopResult prune_retrain_loop(const nn::MLP& mlp, const nn::Scaler& scaler, const LoopData& data,
                              double threshold, const nn::TrainConfig& config, int max_rounds = 10,
                              LoopHooks hooks = {});

/// round,width_1..width_L,train,validation,test
std::string rounds_csv(const std::vector<RoundReport>& rounds);

}  // namespace bse::pruning
