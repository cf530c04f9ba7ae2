#include "bse/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "bse/error.hpp"
#include "bse/io.hpp"

namespace bse::pruning {

double similarity(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.empty()) throw DimensionError("similarity needs equal-length samples");
  double xy = 0.0, xx = 0.0, yy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xy += x[i] * y[i];
    xx += x[i] * x[i];
    yy += y[i] * y[i];
  }
  if (xx == 0.0 || yy == 0.0) return 1.0;
  // Sample means share the 1/n factor, which cancels.
  const double rho = 1.0 - xy / std::sqrt(xx * yy);
  return std::clamp(rho, 0.0, 2.0);
}

double similarity(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  return similarity(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())),
                    std::span<const double>(y.data(), static_cast<std::size_t>(y.size())));
}

std::size_t ClusterAssignment::neuron_count() const {
  std::size_t n = 0;
  for (const auto& c : clusters) n += c.size();
  return n;
}

ClusterAssignment cluster_layer(const Eigen::MatrixXd& activations, double threshold) {
  if (threshold < 0.0) throw InvalidArgument("clustering threshold must be non-negative");
  const auto n = static_cast<std::size_t>(activations.cols());

  // Pairwise distances from the Gram matrix of the neuron columns.
  const Eigen::MatrixXd gram = activations.transpose() * activations;
  Eigen::MatrixXd dist(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < dist.rows(); ++i)
    for (Eigen::Index j = 0; j < dist.cols(); ++j) {
      if (i == j) {
        dist(i, j) = gram(i, i) == 0.0 ? 1.0 : 0.0;
        continue;
      }
      const double norm = gram(i, i) * gram(j, j);
      dist(i, j) = norm == 0.0 ? 1.0 : std::clamp(1.0 - gram(i, j) / std::sqrt(norm), 0.0, 2.0);
    }

  std::vector<std::vector<std::size_t>> clusters(n);
  for (std::size_t i = 0; i < n; ++i) clusters[i] = {i};
  Eigen::MatrixXd link = dist;  // average linkage between live clusters
  std::vector<bool> alive(n, true);

  while (true) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!alive[i]) continue;
      for (std::size_t j = i + 1; j < n; ++j) {
        if (!alive[j]) continue;
        const double d = link(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        if (d < best) {
          best = d;
          bi = i;
          bj = j;
        }
      }
    }
    // A zero threshold disables merging, even for exact duplicates.
    if (threshold == 0.0 || !(best <= threshold)) break;
    const double ni = static_cast<double>(clusters[bi].size());
    const double nj = static_cast<double>(clusters[bj].size());
    for (std::size_t k = 0; k < n; ++k) {
      if (!alive[k] || k == bi || k == bj) continue;
      const auto ki = static_cast<Eigen::Index>(k);
      const double merged = (ni * link(ki, static_cast<Eigen::Index>(bi)) +
                             nj * link(ki, static_cast<Eigen::Index>(bj))) / (ni + nj);
      link(ki, static_cast<Eigen::Index>(bi)) = link(static_cast<Eigen::Index>(bi), ki) = merged;
    }
    clusters[bi].insert(clusters[bi].end(), clusters[bj].begin(), clusters[bj].end());
    std::sort(clusters[bi].begin(), clusters[bi].end());
    clusters[bj].clear();
    alive[bj] = false;
  }

  ClusterAssignment out;
  for (std::size_t i = 0; i < n; ++i) {
    if (!alive[i]) continue;
    const auto& members = clusters[i];
    std::size_t medoid = members.front();
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t a : members) {
      double sum = 0.0;
      for (std::size_t b : members) sum += dist(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
      if (sum < best) {
        best = sum;
        medoid = a;
      }
    }
    out.clusters.push_back(members);
    out.representatives.push_back(medoid);
  }
  return out;
}

nn::MLP prune(const nn::MLP& mlp, std::size_t layer, const ClusterAssignment& clusters) {
  const auto& layers = mlp.layers();
  if (layer + 1 >= layers.size()) throw InvalidArgument("prune: layer index is not a hidden layer");
  const auto width = static_cast<std::size_t>(layers[layer].outputs());
  std::vector<int> seen(width, 0);
  for (const auto& c : clusters.clusters)
    for (std::size_t m : c) {
      if (m >= width) throw InvalidArgument("prune: cluster member out of range");
      ++seen[m];
    }
  if (clusters.representatives.size() != clusters.clusters.size() ||
      std::any_of(seen.begin(), seen.end(), [](int s) { return s != 1; }))
    throw InvalidArgument("prune: clusters must partition the layer");

  std::vector<nn::Layer> out = layers;
  const auto k = static_cast<Eigen::Index>(clusters.clusters.size());
  nn::Layer& cur = out[layer];
  nn::Layer& next = out[layer + 1];
  Eigen::MatrixXd w_in(k, cur.inputs());
  Eigen::VectorXd b_in(k);
  Eigen::MatrixXd w_out = Eigen::MatrixXd::Zero(next.outputs(), k);
  for (Eigen::Index c = 0; c < k; ++c) {
    const auto rep = static_cast<Eigen::Index>(clusters.representatives[static_cast<std::size_t>(c)]);
    w_in.row(c) = layers[layer].weights.row(rep);
    b_in[c] = layers[layer].bias[rep];
    for (std::size_t m : clusters.clusters[static_cast<std::size_t>(c)])
      w_out.col(c) += layers[layer + 1].weights.col(static_cast<Eigen::Index>(m));
  }
  cur.weights = std::move(w_in);
  cur.bias = std::move(b_in);
  next.weights = std::move(w_out);
  return nn::MLP(std::move(out));
}

LoopResult prune_retrain_loop(const nn::MLP& mlp, const nn::Scaler& scaler, const LoopData& data,
                              double threshold, const nn::TrainConfig& config, int max_rounds,
                              LoopHooks hooks) {
  const nn::Dataset train{scaler.scale_inputs(data.train.inputs), scaler.scale_targets(data.train.targets)};
  const nn::Dataset val{scaler.scale_inputs(data.validation.inputs),
                        scaler.scale_targets(data.validation.targets)};
  const nn::Dataset test{scaler.scale_inputs(data.test.inputs), scaler.scale_targets(data.test.targets)};

  if (!hooks.evaluate)
    hooks.evaluate = [](const nn::MLP& m, const nn::Dataset& d) { return nn::loss(m, d.inputs, d.targets); };
  if (!hooks.retrain)
    hooks.retrain = [&](const nn::MLP& m, int round) {
      nn::TrainConfig cfg = config;
      cfg.seed = config.seed + static_cast<std::uint64_t>(round);
      // train_from works in the scaler's space; feed it raw data and the same scaler.
      return nn::train_from(m, scaler, data.train, data.validation, cfg).model;
    };

  auto report = [&](const nn::MLP& m, int round) {
    return RoundReport{round, m.hidden_widths(), hooks.evaluate(m, train), hooks.evaluate(m, val),
                       hooks.evaluate(m, test)};
  };

  LoopResult result{mlp, 0, {report(mlp, 0)}};
  double best = result.rounds.front().validation_loss;
  nn::MLP current = mlp;
  for (int round = 1; round <= max_rounds; ++round) {
    nn::MLP pruned = current;
    for (std::size_t l = 0; l + 1 < pruned.layers().size(); ++l) {
      const Eigen::MatrixXd acts = pruned.activations(val.inputs)[l];
      pruned = prune(pruned, l, cluster_layer(acts.transpose(), threshold));
    }
    if (pruned.hidden_neurons() == current.hidden_neurons()) break;
    nn::MLP retrained = hooks.retrain(pruned, round);
    result.rounds.push_back(report(retrained, round));
    const double v = result.rounds.back().validation_loss;
    if (v > best) break;
    best = v;
    result.model = retrained;
    result.best_round = round;
    current = std::move(retrained);
  }
  return result;
}

std::string rounds_csv(const std::vector<RoundReport>& rounds) {
  std::size_t depth = 0;
  for (const auto& r : rounds) depth = std::max(depth, r.widths.size());
  std::string out = "round";
  for (std::size_t l = 0; l < depth; ++l) out += ",width_" + std::to_string(l + 1);
  out += ",train_loss,validation_loss,test_loss\n";
  for (const auto& r : rounds) {
    out += std::to_string(r.round);
    for (std::size_t l = 0; l < depth; ++l)
      out += "," + (l < r.widths.size() ? std::to_string(r.widths[l]) : std::string());
    out += "," + format_double(r.train_loss) + "," + format_double(r.validation_loss) + "," +
           format_double(r.test_loss) + "\n";
  }
  return out;
}

}  // namespace bse::pruning
