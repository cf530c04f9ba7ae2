#include "bse/nn.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "bse/error.hpp"
#include "bse/io.hpp"
#include "bse/rng.hpp"

namespace bse::nn {
namespace {

void apply(Activation act, Eigen::MatrixXd& m) {
  if (act == Activation::ReLU) m = m.cwiseMax(0.0);
}

Eigen::MatrixXd affine(const Layer& layer, const Eigen::MatrixXd& in) {
  Eigen::MatrixXd out = layer.weights * in;
  out.colwise() += layer.bias;
  return out;
}

}  // namespace

MLP::MLP(std::vector<Layer> layers) : layers_(std::move(layers)) { validate(); }

void MLP::validate() const {
  if (layers_.empty()) throw DimensionError("MLP has no layers");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    if (layer.bias.size() != layer.outputs())
      throw DimensionError("layer " + std::to_string(l) + ": bias length does not match width");
    if (l > 0 && layer.inputs() != layers_[l - 1].outputs())
      throw DimensionError("layer " + std::to_string(l) + " does not chain with its predecessor");
  }
}

std::vector<Eigen::Index> MLP::hidden_widths() const {
  std::vector<Eigen::Index> w;
  for (std::size_t l = 0; l + 1 < layers_.size(); ++l) w.push_back(layers_[l].outputs());
  return w;
}

Eigen::Index MLP::hidden_neurons() const {
  const auto w = hidden_widths();
  return std::accumulate(w.begin(), w.end(), Eigen::Index{0});
}

Eigen::MatrixXd MLP::forward(const Eigen::MatrixXd& inputs) const {
  if (inputs.rows() != input_size())
    throw DimensionError("input has " + std::to_string(inputs.rows()) + " features, network expects " +
                         std::to_string(input_size()));
  Eigen::MatrixXd a = inputs;
  for (const Layer& layer : layers_) {
    a = affine(layer, a);
    apply(layer.activation, a);
  }
  return a;
}

Eigen::VectorXd MLP::forward(const Eigen::VectorXd& input) const {
  if (input.size() != input_size()) throw DimensionError("input length does not match the network");
  Eigen::VectorXd a = input;
  for (const Layer& layer : layers_) {
    Eigen::VectorXd next = layer.bias;
    next.noalias() += layer.weights * a;
    if (layer.activation == Activation::ReLU) next = next.cwiseMax(0.0);
    a.swap(next);
  }
  return a;
}

std::vector<Eigen::MatrixXd> MLP::activations(const Eigen::MatrixXd& inputs) const {
  std::vector<Eigen::MatrixXd> out;
  Eigen::MatrixXd a = inputs;
  for (const Layer& layer : layers_) {
    a = affine(layer, a);
    apply(layer.activation, a);
    out.push_back(a);
  }
  return out;
}

MLP init_he(std::span<const Eigen::Index> dims, std::uint64_t seed) {
  if (dims.size() < 2) throw DimensionError("need at least input and output widths");
  Rng rng(seed);
  std::vector<Layer> layers;
  for (std::size_t l = 1; l < dims.size(); ++l) {
    if (dims[l] < 1 || dims[l - 1] < 1) throw DimensionError("layer widths must be positive");
    Layer layer;
    const double stddev = std::sqrt(2.0 / static_cast<double>(dims[l - 1]));
    layer.weights.resize(dims[l], dims[l - 1]);
    for (Eigen::Index c = 0; c < layer.weights.cols(); ++c)
      for (Eigen::Index r = 0; r < layer.weights.rows(); ++r) layer.weights(r, c) = stddev * rng.normal();
    layer.bias = Eigen::VectorXd::Zero(dims[l]);
    layer.activation = l + 1 == dims.size() ? Activation::Linear : Activation::ReLU;
    layers.push_back(std::move(layer));
  }
  return MLP(std::move(layers));
}

double loss(const MLP& mlp, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets) {
  if (inputs.cols() != targets.cols() || inputs.cols() == 0)
    throw DimensionError("loss needs a non-empty batch with matching inputs and targets");
  return (mlp.forward(inputs) - targets).squaredNorm() / static_cast<double>(inputs.cols());
}

Gradient backward(const MLP& mlp, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets,
                  double* loss_out) {
  if (inputs.cols() != targets.cols() || inputs.cols() == 0)
    throw DimensionError("backward needs a non-empty batch with matching inputs and targets");
  const auto& layers = mlp.layers();
  const std::size_t depth = layers.size();
  std::vector<Eigen::MatrixXd> pre(depth), post(depth);
  const Eigen::MatrixXd* in = &inputs;
  for (std::size_t l = 0; l < depth; ++l) {
    pre[l] = affine(layers[l], *in);
    post[l] = pre[l];
    apply(layers[l].activation, post[l]);
    in = &post[l];
  }
  const double batch = static_cast<double>(inputs.cols());
  Eigen::MatrixXd delta = post.back() - targets;
  if (loss_out) *loss_out = delta.squaredNorm() / batch;
  delta *= 2.0 / batch;

  Gradient g;
  g.weights.resize(depth);
  g.bias.resize(depth);
  for (std::size_t l = depth; l-- > 0;) {
    if (layers[l].activation == Activation::ReLU)
      delta = (pre[l].array() > 0.0).select(delta, 0.0);
    const Eigen::MatrixXd& below = l == 0 ? inputs : post[l - 1];
    g.weights[l].noalias() = delta * below.transpose();
    g.bias[l] = delta.rowwise().sum();
    if (l > 0) delta = layers[l].weights.transpose() * delta;
  }
  return g;
}

AdamState AdamState::zeros_like(const MLP& mlp) {
  AdamState s;
  for (const Layer& layer : mlp.layers()) {
    s.m.weights.push_back(Eigen::MatrixXd::Zero(layer.outputs(), layer.inputs()));
    s.m.bias.push_back(Eigen::VectorXd::Zero(layer.outputs()));
  }
  s.v = s.m;
  return s;
}

void adam_step(MLP& mlp, const Gradient& grad, AdamState& state, const AdamConfig& cfg) {
  auto& layers = mlp.layers();
  if (grad.weights.size() != layers.size() || state.m.weights.size() != layers.size())
    throw DimensionError("gradient / optimizer state do not match the network");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    param.array() -= cfg.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon);
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    update(layers[l].weights, grad.weights[l], state.m.weights[l], state.v.weights[l]);
    update(layers[l].bias, grad.bias[l], state.m.bias[l], state.v.bias[l]);
  }
}

// ---------------------------------------------------------------------------

namespace {

void row_moments(const Eigen::MatrixXd& m, double floor, Eigen::VectorXd& mean, Eigen::VectorXd& sd) {
  const double n = static_cast<double>(m.cols());
  mean = m.rowwise().sum() / n;
  sd = ((m.colwise() - mean).array().square().rowwise().sum() / n).sqrt().matrix();
  sd = sd.cwiseMax(floor);
}

}  // namespace

Scaler Scaler::fit(const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets, double std_floor) {
  if (inputs.cols() == 0) throw InvalidArgument("cannot fit a scaler on an empty set");
  Scaler s;
  row_moments(inputs, std_floor, s.input_mean, s.input_std);
  row_moments(targets, std_floor, s.target_mean, s.target_std);
  return s;
}

Scaler Scaler::identity(Eigen::Index inputs, Eigen::Index targets) {
  return Scaler{Eigen::VectorXd::Zero(inputs), Eigen::VectorXd::Ones(inputs),
                Eigen::VectorXd::Zero(targets), Eigen::VectorXd::Ones(targets)};
}

Eigen::MatrixXd Scaler::scale_inputs(const Eigen::MatrixXd& z) const {
  return (z.colwise() - input_mean).array().colwise() / input_std.array();
}

Eigen::MatrixXd Scaler::scale_targets(const Eigen::MatrixXd& x) const {
  return (x.colwise() - target_mean).array().colwise() / target_std.array();
}

Eigen::MatrixXd Scaler::unscale_targets(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd out = x.array().colwise() * target_std.array();
  out.colwise() += target_mean;
  return out;
}

TrainResult train_from(MLP model, const Scaler& scaler, const Dataset& train_set,
                       const Dataset& validation_set, const TrainConfig& config) {
  if (train_set.size() == 0 || validation_set.size() == 0)
    throw InvalidArgument("training and validation sets must be non-empty");
  if (config.batch_size < 1 || !(config.adam.learning_rate > 0.0))
    throw InvalidArgument("batch size and learning rate must be positive");
  const auto start = std::chrono::steady_clock::now();

  const Eigen::MatrixXd xin = scaler.scale_inputs(train_set.inputs);
  const Eigen::MatrixXd xout = scaler.scale_targets(train_set.targets);
  const Eigen::MatrixXd vin = scaler.scale_inputs(validation_set.inputs);
  const Eigen::MatrixXd vout = scaler.scale_targets(validation_set.targets);

  TrainResult result{model, scaler, {}};
  AdamState adam = AdamState::zeros_like(model);
  Rng rng(config.seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(train_set.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  Eigen::MatrixXd bin, bout;
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double epoch_loss = 0.0;
    for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t last = std::min(order.size(), first + static_cast<std::size_t>(config.batch_size));
      const auto width = static_cast<Eigen::Index>(last - first);
      bin.resize(xin.rows(), width);
      bout.resize(xout.rows(), width);
      for (Eigen::Index c = 0; c < width; ++c) {
        bin.col(c) = xin.col(order[first + static_cast<std::size_t>(c)]);
        bout.col(c) = xout.col(order[first + static_cast<std::size_t>(c)]);
      }
      double batch_loss = 0.0;
      const Gradient g = backward(model, bin, bout, &batch_loss);
      adam_step(model, g, adam, config.adam);
      epoch_loss += batch_loss * static_cast<double>(width);
    }
    epoch_loss /= static_cast<double>(order.size());
    const double val = loss(model, vin, vout);
    if (!std::isfinite(epoch_loss) || !std::isfinite(val))
      throw Error("training diverged (non-finite loss) at epoch " + std::to_string(epoch));
    result.report.train_loss.push_back(epoch_loss);
    result.report.validation_loss.push_back(val);
    result.report.stopped_epoch = epoch;
    if (val < best) {
      best = val;
      stale = 0;
      result.model = model;
      result.report.best_epoch = epoch;
    } else if (++stale >= config.patience) {
      break;
    }
  }
  result.report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

TrainResult train(const Dataset& train_set, const Dataset& validation_set,
                  std::span<const Eigen::Index> hidden, const TrainConfig& config) {
  if (train_set.size() == 0) throw InvalidArgument("training set must be non-empty");
  std::vector<Eigen::Index> dims{train_set.inputs.rows()};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(train_set.targets.rows());
  const Scaler scaler = Scaler::fit(train_set.inputs, train_set.targets);
  return train_from(init_he(dims, config.seed), scaler, train_set, validation_set, config);
}

// ---------------------------------------------------------------------------

Eigen::VectorXd state_to_target(const StateVector& state, const Network& network) {
  const auto& free = network.free_nodes();
  const auto nf = static_cast<Eigen::Index>(free.size());
  Eigen::VectorXd t(2 * nf);
  for (Eigen::Index k = 0; k < nf; ++k) {
    const auto i = static_cast<Eigen::Index>(free[static_cast<std::size_t>(k)]);
    t[k] = state.magnitude[i];
    t[nf + k] = state.angle[i];
  }
  return t;
}

StateVector target_to_state(const Eigen::VectorXd& target, const Network& network) {
  const auto& free = network.free_nodes();
  const auto nf = static_cast<Eigen::Index>(free.size());
  if (target.size() != 2 * nf) throw DimensionError("target vector does not match the network");
  StateVector s = flat_state(network);
  for (Eigen::Index k = 0; k < nf; ++k) {
    const auto i = static_cast<Eigen::Index>(free[static_cast<std::size_t>(k)]);
    s.magnitude[i] = target[k];
    s.angle[i] = target[nf + k];
  }
  return s;
}

StateEstimator::StateEstimator(const Network& network, MLP model, Scaler scaler)
    : network_(&network),
      model_(std::move(model)),
      scaler_(std::move(scaler)),
      slack_template_(flat_state(network)) {
  if (model_.output_size() != 2 * static_cast<Eigen::Index>(network.free_nodes().size()))
    throw DimensionError("estimator output width does not match the network");
}

StateVector StateEstimator::estimate(const MeasurementVector& z) const {
  if (z.values.size() != model_.input_size())
    throw DimensionError("measurement vector length does not match the estimator");
  if (!z.all_valid()) throw InvalidArgument("measurement vector has missing channels; impute first");
  const Eigen::VectorXd scaled = (z.values - scaler_.input_mean).cwiseQuotient(scaler_.input_std);
  const Eigen::VectorXd out =
      model_.forward(scaled).cwiseProduct(scaler_.target_std) + scaler_.target_mean;

  StateVector s = slack_template_;
  const auto& free = network_->free_nodes();
  const auto nf = static_cast<Eigen::Index>(free.size());
  for (Eigen::Index k = 0; k < nf; ++k) {
    const auto i = static_cast<Eigen::Index>(free[static_cast<std::size_t>(k)]);
    s.magnitude[i] = out[k];
    s.angle[i] = out[nf + k];
  }
  return s;
}

// ---------------------------------------------------------------------------

namespace {

void put(std::ofstream& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
}

double get(std::ifstream& in) {
  std::uint64_t bits = 0;
  if (!in.read(reinterpret_cast<char*>(&bits), sizeof bits)) throw Error("model weight file is truncated");
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  return std::bit_cast<double>(bits);
}

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd from_vec(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

void save_model(const std::filesystem::path& stem, const MLP& mlp, const Scaler& scaler,
                std::uint64_t seed, const std::string& config_hash) {
  std::filesystem::path bin = stem;
  bin += ".bin";
  std::filesystem::path manifest = stem;
  manifest += ".json";
  if (bin.has_parent_path()) std::filesystem::create_directories(bin.parent_path());

  nlohmann::json dims = nlohmann::json::array({mlp.input_size()});
  nlohmann::json acts = nlohmann::json::array();
  std::ofstream out(bin, std::ios::binary);
  if (!out) throw Error("cannot write " + bin.string());
  for (const Layer& layer : mlp.layers()) {
    dims.push_back(layer.outputs());
    acts.push_back(layer.activation == Activation::ReLU ? "relu" : "linear");
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) put(out, layer.weights(r, c));
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) put(out, layer.bias[r]);
  }
  nlohmann::json doc{{"dims", dims},
                     {"activations", acts},
                     {"weights_file", bin.filename().string()},
                     {"scaler",
                      {{"input_mean", to_vec(scaler.input_mean)},
                       {"input_std", to_vec(scaler.input_std)},
                       {"target_mean", to_vec(scaler.target_mean)},
                       {"target_std", to_vec(scaler.target_std)}}},
                     {"seed", seed},
                     {"config_hash", config_hash}};
  write_text(manifest, doc.dump(2) + "\n");
}

void load_model(const std::filesystem::path& stem, MLP& mlp, Scaler& scaler) {
  std::filesystem::path manifest = stem;
  manifest += ".json";
  const auto doc = nlohmann::json::parse(read_text(manifest));
  const auto dims = doc.at("dims").get<std::vector<Eigen::Index>>();
  const auto acts = doc.at("activations").get<std::vector<std::string>>();
  if (dims.size() != acts.size() + 1) throw Error("model manifest: dims/activations mismatch");
  std::ifstream in(manifest.parent_path() / doc.at("weights_file").get<std::string>(), std::ios::binary);
  if (!in) throw Error("cannot open model weight file");
  std::vector<Layer> layers;
  for (std::size_t l = 0; l < acts.size(); ++l) {
    Layer layer;
    layer.activation = acts[l] == "relu" ? Activation::ReLU : Activation::Linear;
    layer.weights.resize(dims[l + 1], dims[l]);
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = get(in);
    layer.bias.resize(dims[l + 1]);
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias[r] = get(in);
    layers.push_back(std::move(layer));
  }
  mlp = MLP(std::move(layers));
  const auto& s = doc.at("scaler");
  scaler.input_mean = from_vec(s.at("input_mean").get<std::vector<double>>());
  scaler.input_std = from_vec(s.at("input_std").get<std::vector<double>>());
  scaler.target_mean = from_vec(s.at("target_mean").get<std::vector<double>>());
  scaler.target_std = from_vec(s.at("target_std").get<std::vector<double>>());
}

}  // namespace bse::nn
