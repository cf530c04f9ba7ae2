#include "bse/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "bse/error.hpp"
#include "bse/injection.hpp"
#include "bse/io.hpp"

namespace bse {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Stream tags under the master seed; each hour owns a block of 16.
enum : std::uint64_t {
  kTrainSet = 1,
  kValidationSet,
  kTestSet,
  kTraining,
  kCorruption,
  kHistory,
  kRegressorData,
  kRegressorTraining,
  kPruning,
  kLearning,
};

std::uint64_t hour_seed(const ExperimentConfig& c, std::size_t hour, std::uint64_t tag) {
  return stream_seed(c.seed, 16 * hour + tag);
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

template <class F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw Error(std::string(name) + ": " + e.what());
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

ExperimentConfig ExperimentConfig::from_json(const json& j, const fs::path& base_dir) {
  ExperimentConfig c;
  if (!j.is_object()) throw InvalidArgument("config must be a JSON object");
  if (!j.contains("network")) throw InvalidArgument("config: 'network' is required");
  if (!j.contains("seed")) throw InvalidArgument("config: 'seed' is required");
  c.network = resolve(base_dir, j.at("network").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  c.threads = j.value("threads", 1u);

  if (j.contains("distributions")) {
    const auto& d = j.at("distributions");
    c.distributions = d.is_string() ? json(resolve(base_dir, d.get<std::string>()).string()) : d;
  }
  if (j.contains("meter_data")) {
    const auto& m = j.at("meter_data");
    MeterLearningConfig ml;
    ml.path = resolve(base_dir, m.at("path").get<std::string>());
    ml.aggregation = m.value("aggregation", ml.aggregation);
    ml.components = m.value("components", ml.components);
    if (m.contains("ar_trace")) ml.ar_trace = resolve(base_dir, m.at("ar_trace").get<std::string>());
    ml.ar_order = m.value("ar_order", ml.ar_order);
    ml.power_factor = m.value("power_factor", ml.power_factor);
    c.meter_data = ml;
  }
  if (c.distributions.is_null() && !c.meter_data)
    throw InvalidArgument("config: one of 'distributions' or 'meter_data' is required");

  if (j.contains("hours")) {
    c.hours.clear();
    for (const auto& h : j.at("hours"))
      c.hours.push_back({h.at("name").get<std::string>(), h.value("load_scale", 1.0),
                         h.value("generation_scale", 1.0)});
    if (c.hours.empty()) throw InvalidArgument("config: 'hours' must not be empty");
  }

  if (j.contains("measurements")) c.measurements = j.at("measurements").get<MeasurementSpec>();
  if (j.contains("placement")) {
    const auto& p = j.at("placement");
    c.current_fraction = p.value("current_fraction", c.current_fraction);
    c.placement_seed = p.value("seed", c.placement_seed);
  }
  if (j.contains("noise")) {
    const auto& n = j.at("noise");
    if (n.contains("sigma")) c.noise_sigma = n.at("sigma").get<double>();
    c.noise_fraction = n.value("fraction", c.noise_fraction);
  }
  if (j.contains("samples")) {
    const auto& s = j.at("samples");
    c.train_count = s.value("train", c.train_count);
    c.validation_count = s.value("validation", c.validation_count);
    c.test_count = s.value("test", c.test_count);
  }
  if (j.contains("bad_data")) {
    const auto& b = j.at("bad_data");
    c.bad_data.probability = b.value("probability", c.bad_data.probability);
    c.bad_data.ratio = b.value("ratio", c.bad_data.ratio);
    c.bad_data.missing_rate = b.value("missing_rate", c.bad_data.missing_rate);
    c.wald.alpha = b.value("alpha", c.wald.alpha);
  }
  if (j.contains("architecture")) c.hidden = j.at("architecture").at("hidden").get<std::vector<Eigen::Index>>();
  if (j.contains("training")) {
    const auto& t = j.at("training");
    c.training.batch_size = t.value("batch_size", c.training.batch_size);
    c.training.adam.learning_rate = t.value("learning_rate", c.training.adam.learning_rate);
    c.training.max_epochs = t.value("max_epochs", c.training.max_epochs);
    c.training.patience = t.value("patience", c.training.patience);
  }
  if (j.contains("pruning")) {
    const auto& p = j.at("pruning");
    c.pruning.enabled = p.value("enabled", c.pruning.enabled);
    c.pruning.threshold = p.value("threshold", c.pruning.threshold);
    c.pruning.max_rounds = p.value("max_rounds", c.pruning.max_rounds);
  }
  if (j.contains("baselines")) {
    const auto& b = j.at("baselines");
    auto& o = c.baselines;
    o.enabled = b.value("enabled", o.enabled);
    o.window = b.value("window", o.window);
    o.aggregation = b.value("aggregation", o.aggregation);
    o.pseudo_sigma_factor = b.value("pseudo_sigma_factor", o.pseudo_sigma_factor);
    o.power_factor = b.value("power_factor", o.power_factor);
    o.regressor_hidden = b.value("regressor_hidden", o.regressor_hidden);
    o.regressor_samples = b.value("regressor_samples", o.regressor_samples);
    o.wls.max_iter = b.value("max_iter", o.wls.max_iter);
  }
  if (j.contains("benchmark")) c.benchmark_trials = j.at("benchmark").value("trials", c.benchmark_trials);

  if (c.train_count < 1 || c.validation_count < 1 || c.test_count < 1)
    throw InvalidArgument("config: sample counts must be positive");
  if (c.hidden.empty()) throw InvalidArgument("config: at least one hidden layer is required");
  if (!fs::exists(c.network)) throw InvalidArgument("config: network file not found: " + c.network.string());
  if (c.distributions.is_string() && !fs::exists(c.distributions.get<std::string>()))
    throw InvalidArgument("config: distributions file not found: " + c.distributions.get<std::string>());
  if (c.meter_data && !fs::exists(c.meter_data->path))
    throw InvalidArgument("config: meter file not found: " + c.meter_data->path.string());
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw InvalidArgument("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw InvalidArgument("config " + path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

json ExperimentConfig::to_json() const {
  json j;
  j["network"] = network.string();
  if (!distributions.is_null()) j["distributions"] = distributions;
  if (meter_data) {
    json m{{"path", meter_data->path.string()},
           {"aggregation", meter_data->aggregation},
           {"components", meter_data->components},
           {"ar_order", meter_data->ar_order},
           {"power_factor", meter_data->power_factor}};
    if (meter_data->ar_trace) m["ar_trace"] = meter_data->ar_trace->string();
    j["meter_data"] = m;
  }
  j["hours"] = json::array();
  for (const auto& h : hours)
    j["hours"].push_back({{"name", h.name}, {"load_scale", h.load_scale}, {"generation_scale", h.generation_scale}});
  if (measurements) j["measurements"] = *measurements;
  j["placement"] = {{"current_fraction", current_fraction}, {"seed", placement_seed}};
  j["noise"] = {{"fraction", noise_fraction}};
  if (noise_sigma) j["noise"]["sigma"] = *noise_sigma;
  j["samples"] = {{"train", train_count}, {"validation", validation_count}, {"test", test_count}};
  j["bad_data"] = {{"probability", bad_data.probability},
                   {"ratio", bad_data.ratio},
                   {"missing_rate", bad_data.missing_rate},
                   {"alpha", wald.alpha}};
  j["architecture"] = {{"hidden", hidden}};
  j["training"] = {{"batch_size", training.batch_size},
                   {"learning_rate", training.adam.learning_rate},
                   {"max_epochs", training.max_epochs},
                   {"patience", training.patience}};
  j["pruning"] = {{"enabled", pruning.enabled}, {"threshold", pruning.threshold}, {"max_rounds", pruning.max_rounds}};
  j["baselines"] = {{"enabled", baselines.enabled},
                    {"window", baselines.window},
                    {"aggregation", baselines.aggregation},
                    {"pseudo_sigma_factor", baselines.pseudo_sigma_factor},
                    {"power_factor", baselines.power_factor},
                    {"regressor_hidden", baselines.regressor_hidden},
                    {"regressor_samples", baselines.regressor_samples},
                    {"max_iter", baselines.wls.max_iter}};
  j["benchmark"] = {{"trials", benchmark_trials}};
  j["seed"] = seed;
  return j;
}

std::string ExperimentConfig::hash() const { return fnv1a_hex(to_json().dump()); }

// ---------------------------------------------------------------------------
// Scenario

ScenarioDistributions learn_distributions(const MeterLearningConfig& meter, const Network& network,
                                          std::uint64_t seed) {
  const auto series = read_meter_csv(meter.path);
  std::vector<ARModel> shared(1);
  if (meter.ar_trace) {
    const auto rows = read_matrix_csv(*meter.ar_trace);
    std::vector<double> trace;
    trace.reserve(rows.size());
    for (const auto& r : rows) trace.push_back(r[0]);
    shared[0] = fit_ar_ls(trace, meter.ar_order);
  } else {
    shared[0].innovation_variance = 1.0;  // IID: only the coefficients matter
  }

  ScenarioDistributions d;
  const auto& free = network.free_nodes();
  for (std::size_t k = 0; k < free.size(); ++k) {
    const Node& node = network.nodes()[free[k]];
    const int bus = network.buses()[node.bus].id;
    const std::string id = network.phase_count() == 1 ? std::to_string(bus)
                                                      : std::to_string(bus) + "." + std::to_string(node.phase);
    const auto it = series.find(id);
    if (it == series.end()) throw InvalidArgument("meter file has no series for node " + id);
    EmOptions em;
    em.seed = stream_seed(seed, k);
    const GmmFit fit = fit_gmm_em(it->second, meter.components, em);
    NodeDistribution nd;
    nd.load = downscale_mixture(fit.mixture, shared, meter.aggregation);
    nd.power_factor = meter.power_factor;
    d.nodes.push_back(std::move(nd));
  }
  return d;
}

Scenario prepare_scenario(const ExperimentConfig& config) {
  Network network = load_network_file(config.network);
  ScenarioDistributions base;
  if (config.meter_data) {
    base = learn_distributions(*config.meter_data, network, stream_seed(config.seed, kLearning));
  } else {
    const json d = config.distributions.is_string() ? json::parse(read_text(config.distributions.get<std::string>()))
                                                    : config.distributions;
    base = distributions_from_json(d, network);
  }
  base.validate(network);
  MeasurementSpec spec = config.measurements ? *config.measurements
                                             : default_placement(network, config.current_fraction, config.placement_seed);
  validate_spec(spec, network);
  const double sigma0 = config.noise_sigma ? *config.noise_sigma : default_noise_sigma(base, config.noise_fraction);
  if (!(sigma0 > 0.0)) throw InvalidArgument("noise standard deviation must be positive");
  NoiseModel noise = NoiseModel::uniform(spec.size(), sigma0);
  return Scenario{std::move(network), std::move(base), std::move(spec), sigma0, std::move(noise)};
}

HourData generate_hour_data(const ExperimentConfig& config, const Scenario& scenario, std::size_t hour) {
  const ScenarioDistributions dists = scenario.hour(config.hours.at(hour));
  GenerationOptions opts;
  opts.threads = config.threads;
  auto gen = [&](std::size_t count, std::uint64_t tag) {
    return generate_training_set(scenario.network, dists, scenario.spec, scenario.noise, count,
                                 hour_seed(config, hour, tag), opts);
  };
  return HourData{gen(config.train_count, kTrainSet), gen(config.validation_count, kValidationSet),
                  gen(config.test_count, kTestSet)};
}

nn::Dataset to_dataset(const TrainingSet& set, const Network& network) {
  if (set.size() == 0) throw InvalidArgument("empty training set");
  const auto n = static_cast<Eigen::Index>(set.size());
  const Eigen::Index nf = static_cast<Eigen::Index>(network.free_nodes().size());
  nn::Dataset d{Eigen::MatrixXd(set.measurements.front().values.size(), n), Eigen::MatrixXd(2 * nf, n)};
  for (Eigen::Index k = 0; k < n; ++k) {
    d.inputs.col(k) = set.measurements[static_cast<std::size_t>(k)].values;
    d.targets.col(k) = nn::state_to_target(set.states[static_cast<std::size_t>(k)], network);
  }
  return d;
}

nn::TrainResult train_estimator(const ExperimentConfig& config, const Scenario& scenario, const HourData& data,
                                std::size_t hour) {
  nn::TrainConfig tc = config.training;
  tc.seed = hour_seed(config, hour, kTraining);
  return nn::train(to_dataset(data.train, scenario.network), to_dataset(data.validation, scenario.network),
                   config.hidden, tc);
}

// ---------------------------------------------------------------------------
// Metrics

void AseAccumulator::add(const StateVector& estimate, const StateVector& truth) {
  if (estimate.size() != truth.size()) throw DimensionError("ASE: state layouts differ");
  if (nodes == 0) nodes = truth.size();
  if (nodes != truth.size()) throw DimensionError("ASE: state layouts differ between samples");
  sse += (estimate.magnitude - truth.magnitude).squaredNorm() + (estimate.angle - truth.angle).squaredNorm();
  ++samples;
}

void AseAccumulator::merge(const AseAccumulator& other) {
  if (other.samples == 0) return;
  if (nodes != 0 && nodes != other.nodes) throw DimensionError("ASE: state layouts differ between hours");
  nodes = other.nodes;
  sse += other.sse;
  samples += other.samples;
}

double AseAccumulator::ase() const {
  if (samples == 0) throw InvalidArgument("ASE of an empty set");
  return sse / (static_cast<double>(samples) * static_cast<double>(nodes));
}

double compute_ase(std::span<const StateVector> estimates, std::span<const StateVector> truths) {
  if (estimates.size() != truths.size()) throw DimensionError("ASE: estimate and truth counts differ");
  AseAccumulator acc;
  for (std::size_t k = 0; k < truths.size(); ++k) acc.add(estimates[k], truths[k]);
  return acc.ase();
}

// ---------------------------------------------------------------------------
// Baselines

ConsumptionHistory draw_history(const ScenarioDistributions& dists, int window, int aggregation, Rng& rng) {
  ConsumptionHistory h;
  h.aggregation = aggregation;
  h.energy.assign(dists.nodes.size(), std::vector<double>(static_cast<std::size_t>(window), 0.0));
  for (int w = 0; w < window; ++w)
    for (int t = 0; t < aggregation; ++t) {
      const InjectionVector s = sample_injections(dists, rng);
      for (std::size_t k = 0; k < dists.nodes.size(); ++k)
        h.energy[k][static_cast<std::size_t>(w)] += s.p[static_cast<Eigen::Index>(k)];
    }
  return h;
}

BaselineContext prepare_baselines(const ExperimentConfig& config, const Scenario& scenario, std::size_t hour) {
  const auto& b = config.baselines;
  BaselineContext ctx{scenario.hour(config.hours.at(hour)), {}};
  std::vector<ConsumptionHistory> histories;
  std::vector<Eigen::VectorXd> next;
  const std::uint64_t seed = hour_seed(config, hour, kRegressorData);
  for (std::size_t i = 0; i < b.regressor_samples; ++i) {
    Rng rng = Rng::stream(seed, i);
    histories.push_back(draw_history(ctx.dists, b.window, b.aggregation, rng));
    next.push_back(sample_injections(ctx.dists, rng).p);
  }
  nn::TrainConfig tc = config.training;
  tc.seed = hour_seed(config, hour, kRegressorTraining);
  ctx.regressor = train_pseudo_regressor(histories, next, b.window, b.regressor_hidden, tc);
  return ctx;
}

namespace {

/// WLS solvers keyed by the set of dropped real channels.
class SolverCache {
 public:
  SolverCache(const Network& network, const MeasurementSpec& spec, const PseudoMeasurementSet& pseudo_shape)
      : network_(&network), spec_(&spec), pseudo_shape_(pseudo_shape) {}

  const WlsSolver& get(const std::vector<bool>& drop) {
    auto it = solvers_.find(drop);
    if (it == solvers_.end()) {
      MeasurementVector dummy{Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec_->size())), {}};
      const Eigen::VectorXd w = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(spec_->size()));
      AugmentedProblem p = augment(*spec_, dummy, w, pseudo_shape_, &drop);
      it = solvers_.emplace(drop, WlsSolver(*network_, std::move(p.spec))).first;
    }
    return it->second;
  }

 private:
  const Network* network_;
  const MeasurementSpec* spec_;
  PseudoMeasurementSet pseudo_shape_;
  std::map<std::vector<bool>, WlsSolver> solvers_;
};

struct WlsOutcome {
  StateVector state;
  bool failed = false;
  bool jx_reject = false;
};

WlsOutcome run_wls(SolverCache& cache, const Scenario& scenario, const MeasurementVector& z,
                   const Eigen::VectorXd& weights, const PseudoMeasurementSet& pseudo, const std::vector<bool>& drop,
                   const ExperimentConfig& config, bool with_jx) {
  MeasurementVector zz{z.values, {}};  // validity is expressed through `drop`
  const AugmentedProblem p = augment(scenario.spec, zz, weights, pseudo, &drop);
  const WlsSolver& solver = cache.get(drop);
  const StateVector x0 = flat_state(scenario.network);
  WlsOutcome out;
  try {
    WlsOptions opts = config.baselines.wls;
    opts.throw_on_max_iter = false;
    const WlsResult r = solver.solve(p.z, p.weights, x0, opts);
    out.state = r.state;
    out.failed = !r.converged;
    if (with_jx) {
      const int dof = static_cast<int>(p.z.size()) - 2 * static_cast<int>(scenario.network.free_nodes().size());
      if (dof > 0) out.jx_reject = jx_test(r.residual, r.weights, dof, config.wald.alpha);
    }
  } catch (const Error&) {
    out.state = x0;
    out.failed = true;
  }
  return out;
}

}  // namespace

HourEvaluation evaluate_hour(const ExperimentConfig& config, const Scenario& scenario, std::size_t hour,
                             const HourData& data, const nn::StateEstimator& estimator) {
  const Network& net = scenario.network;
  const MeasurementModel model(net, scenario.spec);
  const H0Stats h0 = estimate_h0_stats(data.train);
  const auto m = static_cast<Eigen::Index>(scenario.spec.size());
  const Eigen::VectorXd weights = Eigen::VectorXd::Constant(m, 1.0 / (scenario.sigma0 * scenario.sigma0));

  HourEvaluation ev;
  ev.name = config.hours.at(hour).name;
  const bool baselines = config.baselines.enabled;
  std::optional<BaselineContext> bctx;
  PseudoOptions popts;
  popts.window = config.baselines.window;
  popts.power_factor = config.baselines.power_factor;
  popts.sigma = config.baselines.pseudo_sigma_factor * scenario.sigma0;
  std::optional<SolverCache> cache;
  if (baselines) {
    bctx = prepare_baselines(config, scenario, hour);
    ConsumptionHistory shape;
    shape.energy.assign(net.free_nodes().size(), std::vector<double>(static_cast<std::size_t>(popts.window), 0.0));
    cache.emplace(net, scenario.spec, pseudo_avg(shape, net, popts));
    ev.jx_dof = static_cast<int>(m + 2 * static_cast<Eigen::Index>(net.free_nodes().size())) -
                2 * static_cast<int>(net.free_nodes().size());
  }

  const std::vector<bool> none(static_cast<std::size_t>(m), false);
  std::ostringstream rows;
  for (std::size_t k = 0; k < data.test.size(); ++k) {
    const StateVector& truth = data.test.states[k];
    const MeasurementVector& z = data.test.measurements[k];
    Rng rng = Rng::stream(hour_seed(config, hour, kCorruption), k);
    const Eigen::VectorXd clean = model.evaluate(truth);
    const CorruptedMeasurement bad = inject_bad_data(z, clean, h0.stddev, config.bad_data, rng);
    const std::vector<bool> flags = wald_detect(bad.z, h0, config.wald);
    const MeasurementVector filtered = filter_bad(bad.z, flags, h0);
    const MeasurementVector missing = inject_missing(z, config.bad_data.missing_rate, rng);
    const std::vector<bool> missing_flags = wald_detect(missing, h0, config.wald);
    const MeasurementVector imputed = filter_bad(missing, missing_flags, h0);

    for (std::size_t c = 0; c < flags.size(); ++c) {
      if (bad.bad[c]) {
        ++ev.detection.bad_channels;
        if (flags[c]) ++ev.detection.detected;
      } else {
        ++ev.detection.good_channels;
        if (flags[c]) ++ev.detection.false_alarms;
      }
    }
    std::string block = detection_csv(scenario.spec, bad.z, h0, flags, &bad.bad);
    std::istringstream lines(block);
    std::string line;
    std::getline(lines, line);  // header
    while (std::getline(lines, line)) rows << ev.name << ',' << k << ',' << line << '\n';

    auto& dnn = ev.ase["BSEdnn"];
    dnn["clean"].add(estimator.estimate(z), truth);
    dnn["corrupted"].add(estimator.estimate(bad.z), truth);
    dnn["filtered"].add(estimator.estimate(filtered), truth);
    dnn["missing"].add(estimator.estimate(imputed), truth);

    if (!baselines) continue;
    Rng hrng = Rng::stream(hour_seed(config, hour, kHistory), k);
    const ConsumptionHistory hist =
        draw_history(bctx->dists, config.baselines.window, config.baselines.aggregation, hrng);
    const PseudoMeasurementSet p_avg = pseudo_avg(hist, net, popts);
    const PseudoMeasurementSet p_nn = pseudo_nn(hist, bctx->regressor, net, popts);
    struct CaseInput {
      const char* name;
      const MeasurementVector* z;
      const std::vector<bool>* drop;
    };
    const CaseInput cases[] = {{"clean", &z, &none},
                               {"corrupted", &bad.z, &none},
                               {"filtered", &bad.z, &flags},
                               {"missing", &missing, &missing_flags}};
    for (const auto& [method, pseudo] : {std::pair{"WLSp", &p_avg}, std::pair{"WLSnnp", &p_nn}}) {
      for (const auto& c : cases) {
        const bool jx = std::string(method) == "WLSp" &&
                        (std::string(c.name) == "clean" || std::string(c.name) == "corrupted");
        const WlsOutcome o = run_wls(*cache, scenario, *c.z, weights, *pseudo, *c.drop, config, jx);
        ev.ase[method][c.name].add(o.state, truth);
        ev.wls_failures[method][c.name] += o.failed ? 1 : 0;
        if (!o.failed) ev.ase_converged[method][c.name].add(o.state, truth);
        if (jx && o.jx_reject) ++(std::string(c.name) == "clean" ? ev.jx_clean_rejections : ev.jx_corrupted_rejections);
      }
    }
    ++ev.jx_trials;
  }
  ev.detection_rows = rows.str();
  return ev;
}

// ---------------------------------------------------------------------------
// Pruning

namespace {

double estimator_ase(const Network& network, const nn::MLP& mlp, const nn::Scaler& scaler, const TrainingSet& set) {
  const nn::StateEstimator est(network, mlp, scaler);
  AseAccumulator acc;
  for (std::size_t k = 0; k < set.size(); ++k) acc.add(est.estimate(set.measurements[k]), set.states[k]);
  return acc.ase();
}

}  // namespace

PruningSummary run_pruning(const ExperimentConfig& config, const Scenario& scenario, const HourData& data,
                           const nn::TrainResult& trained, std::size_t hour) {
  const Network& net = scenario.network;
  pruning::LoopData loop_data{to_dataset(data.train, net), to_dataset(data.validation, net),
                              to_dataset(data.test, net)};
  nn::TrainConfig tc = config.training;
  tc.seed = hour_seed(config, hour, kPruning);
  PruningSummary s;
  s.loop = pruning::prune_retrain_loop(trained.model, trained.scaler, loop_data, config.pruning.threshold, tc,
                                       config.pruning.max_rounds);
  s.widths_before = trained.model.hidden_widths();
  s.widths_after = s.loop.model.hidden_widths();
  s.neurons_before = trained.model.hidden_neurons();
  s.neurons_after = s.loop.model.hidden_neurons();
  s.validation_ase_before = estimator_ase(net, trained.model, trained.scaler, data.validation);
  s.validation_ase_after = estimator_ase(net, s.loop.model, trained.scaler, data.validation);
  s.test_ase_before = estimator_ase(net, trained.model, trained.scaler, data.test);
  s.test_ase_after = estimator_ase(net, s.loop.model, trained.scaler, data.test);
  return s;
}

// ---------------------------------------------------------------------------
// Latency

LatencyReport benchmark_latency(const nn::StateEstimator& estimator, const WlsSolver& wls,
                                std::span<const MeasurementVector> nn_inputs,
                                std::span<const Eigen::VectorXd> wls_inputs, const Eigen::VectorXd& wls_weights,
                                const StateVector& x0, std::size_t trials) {
  if (trials == 0) throw InvalidArgument("latency benchmark needs at least one trial");
  if (nn_inputs.empty() || wls_inputs.empty()) throw InvalidArgument("latency benchmark needs inputs");
  using clock = std::chrono::steady_clock;
  std::vector<double> nn_t, wls_t;
  nn_t.reserve(trials);
  wls_t.reserve(trials);
  double sink = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto t0 = clock::now();
    const StateVector x = estimator.estimate(nn_inputs[t % nn_inputs.size()]);
    nn_t.push_back(seconds_since(t0));
    sink += x.magnitude[0];
    const auto t1 = clock::now();
    try {
      sink += wls.solve(wls_inputs[t % wls_inputs.size()], wls_weights, x0).objective;
    } catch (const Error&) {
    }
    wls_t.push_back(seconds_since(t1));
  }
  LatencyReport r;
  r.trials = trials;
  r.nn_median_seconds = median(std::move(nn_t));
  r.wls_median_seconds = median(std::move(wls_t));
  if (std::isnan(sink)) r.trials = trials;  // keeps the work observable
  return r;
}

LatencyReport benchmark_hour(const ExperimentConfig& config, const Scenario& scenario, const HourData& data,
                             const nn::StateEstimator& estimator, std::size_t hour, std::size_t trials) {
  const Network& net = scenario.network;
  const auto m = static_cast<Eigen::Index>(scenario.spec.size());
  const Eigen::VectorXd weights = Eigen::VectorXd::Constant(m, 1.0 / (scenario.sigma0 * scenario.sigma0));
  PseudoOptions popts;
  popts.window = config.baselines.window;
  popts.power_factor = config.baselines.power_factor;
  popts.sigma = config.baselines.pseudo_sigma_factor * scenario.sigma0;
  const ScenarioDistributions dists = scenario.hour(config.hours.at(hour));

  std::vector<Eigen::VectorXd> wls_inputs;
  Eigen::VectorXd aug_weights;
  MeasurementSpec aug_spec;
  const std::size_t n = std::min(trials, data.test.size());
  for (std::size_t k = 0; k < n; ++k) {
    Rng rng = Rng::stream(hour_seed(config, hour, kHistory), k);
    const auto hist = draw_history(dists, config.baselines.window, config.baselines.aggregation, rng);
    AugmentedProblem p = augment(scenario.spec, data.test.measurements[k], weights, pseudo_avg(hist, net, popts));
    wls_inputs.push_back(std::move(p.z));
    aug_weights = std::move(p.weights);
    aug_spec = std::move(p.spec);
  }
  const WlsSolver solver(net, aug_spec);
  return benchmark_latency(estimator, solver, data.test.measurements, wls_inputs, aug_weights, flat_state(net),
                           trials);
}

// ---------------------------------------------------------------------------
// Pipeline

EvaluationReport run_experiment(const ExperimentConfig& config, const fs::path& out_dir) {
  using clock = std::chrono::steady_clock;
  EvaluationReport out;
  std::ostringstream timing;
  timing << "stage,hour,seconds\n";
  auto record = [&](const std::string& name, const std::string& hour, double s) {
    timing << name << ',' << hour << ',' << format_double(s) << '\n';
  };

  const std::string config_hash = config.hash();
  auto t0 = clock::now();
  const Scenario scenario = stage("scenario", [&] { return prepare_scenario(config); });
  record("scenario", "", seconds_since(t0));
  const Network& net = scenario.network;
  const bool write = !out_dir.empty();
  if (write) fs::create_directories(out_dir);

  const ObservabilityReport obs = check_observability(net, scenario.spec);
  json report;
  report["config_hash"] = config_hash;
  report["seed"] = config.seed;
  report["network"] = {{"buses", net.buses().size()},
                       {"nodes", net.node_count()},
                       {"state_dimension", 2 * net.free_nodes().size()}};
  report["measurements"] = {{"channels", scenario.spec.size()},
                            {"jacobian_rank", obs.rank},
                            {"observable", obs.observable}};
  report["sigma0"] = scenario.sigma0;
  report["bad_data"] = {{"probability", config.bad_data.probability},
                        {"ratio", config.bad_data.ratio},
                        {"missing_rate", config.bad_data.missing_rate},
                        {"alpha", config.wald.alpha},
                        {"theoretical_detection", detection_probability(config.wald.alpha, config.bad_data.ratio)}};
  report["hours"] = json::array();

  std::ostringstream ase_csv;
  ase_csv << "hour,method,case,M,N,ase\n";
  std::ostringstream det_csv;
  det_csv << "hour,sample,channel,value,mean,stddev,flagged,truth\n";
  std::map<std::string, std::map<std::string, AseAccumulator>> overall, overall_converged;

  for (std::size_t h = 0; h < config.hours.size(); ++h) {
    const std::string& name = config.hours[h].name;
    t0 = clock::now();
    const HourData data = stage("sampling", [&] { return generate_hour_data(config, scenario, h); });
    record("sampling", name, seconds_since(t0));
    if (write)
      stage("artifacts", [&] {
        const fs::path dir = out_dir / "data" / name;
        write_training_set(dir / "train", data.train, net, config_hash);
        write_training_set(dir / "validation", data.validation, net, config_hash);
        write_training_set(dir / "test", data.test, net, config_hash);
        return 0;
      });

    t0 = clock::now();
    const nn::TrainResult trained = stage("training", [&] { return train_estimator(config, scenario, data, h); });
    record("training", name, seconds_since(t0));
    if (write)
      stage("artifacts", [&] {
        fs::create_directories(out_dir / "models");
        nn::save_model(out_dir / "models" / name, trained.model, trained.scaler, hour_seed(config, h, kTraining),
                       config_hash);
        return 0;
      });
    const nn::StateEstimator estimator(net, trained.model, trained.scaler);

    t0 = clock::now();
    HourEvaluation ev = stage("evaluation", [&] { return evaluate_hour(config, scenario, h, data, estimator); });
    record("evaluation", name, seconds_since(t0));

    json hj;
    hj["name"] = name;
    hj["M"] = data.test.size();
    hj["N"] = net.node_count();
    hj["sampling"] = {{"train_attempted", data.train.attempted},
                      {"train_failures", data.train.failures},
                      {"test_attempted", data.test.attempted},
                      {"test_failures", data.test.failures}};
    hj["training"] = {{"epochs", trained.report.stopped_epoch + 1},
                      {"best_epoch", trained.report.best_epoch},
                      {"best_validation_loss", trained.report.validation_loss.at(static_cast<std::size_t>(
                                                   trained.report.best_epoch))}};
    for (const auto& [method, cases] : ev.ase)
      for (const auto& [c, acc] : cases) {
        hj["ase"][method][c] = acc.ase();
        ase_csv << name << ',' << method << ',' << c << ',' << acc.samples << ',' << acc.nodes << ','
                << format_double(acc.ase()) << '\n';
        overall[method][c].merge(acc);
      }
    if (!ev.wls_failures.empty()) hj["wls_failures"] = ev.wls_failures;
    for (const auto& [method, cases] : ev.ase_converged)
      for (const auto& [c, acc] : cases) {
        hj["ase_converged"][method][c] = acc.ase();
        overall_converged[method][c].merge(acc);
      }
    hj["detection"] = {{"bad_channels", ev.detection.bad_channels},
                       {"good_channels", ev.detection.good_channels},
                       {"detection_rate", ev.detection.detection_rate()},
                       {"false_alarm_rate", ev.detection.false_alarm_rate()}};
    if (ev.jx_trials > 0)
      hj["jx_test"] = {{"dof", ev.jx_dof},
                       {"trials", ev.jx_trials},
                       {"clean_rejection_rate", double(ev.jx_clean_rejections) / double(ev.jx_trials)},
                       {"corrupted_rejection_rate", double(ev.jx_corrupted_rejections) / double(ev.jx_trials)}};
    report["hours"].push_back(hj);
    det_csv << ev.detection_rows;

    if (h == 0 && config.pruning.enabled) {
      t0 = clock::now();
      PruningSummary ps = stage("pruning", [&] { return run_pruning(config, scenario, data, trained, h); });
      record("pruning", name, seconds_since(t0));
      if (write)
        stage("artifacts", [&] {
          nn::save_model(out_dir / "models" / (name + "_pruned"), ps.loop.model, trained.scaler,
                         hour_seed(config, h, kPruning), config_hash);
          write_text(out_dir / "pruning_rounds.csv", pruning::rounds_csv(ps.loop.rounds));
          return 0;
        });
      report["pruning"] = {{"hour", name},
                           {"threshold", config.pruning.threshold},
                           {"widths_before", ps.widths_before},
                           {"widths_after", ps.widths_after},
                           {"neurons_before", ps.neurons_before},
                           {"neurons_after", ps.neurons_after},
                           {"best_round", ps.loop.best_round},
                           {"rounds", ps.loop.rounds.size()},
                           {"validation_ase_before", ps.validation_ase_before},
                           {"validation_ase_after", ps.validation_ase_after},
                           {"test_ase_before", ps.test_ase_before},
                           {"test_ase_after", ps.test_ase_after}};
      out.pruning = std::move(ps);
    }
    if (h == 0 && config.benchmark_trials > 0 && config.baselines.enabled) {
      out.latency = stage("benchmark", [&] {
        return benchmark_hour(config, scenario, data, estimator, h, static_cast<std::size_t>(config.benchmark_trials));
      });
      record("latency_nn_median", name, out.latency.nn_median_seconds);
      record("latency_wls_median", name, out.latency.wls_median_seconds);
      timing << "latency_ratio," << name << ',' << format_double(out.latency.ratio()) << '\n';
      if (out.pruning) {
        const nn::StateEstimator pruned(net, out.pruning->loop.model, trained.scaler);
        out.latency_pruned = stage("benchmark", [&] {
          return benchmark_hour(config, scenario, data, pruned, h, static_cast<std::size_t>(config.benchmark_trials));
        });
        record("latency_pruned_nn_median", name, out.latency_pruned->nn_median_seconds);
        record("latency_pruned_wls_median", name, out.latency_pruned->wls_median_seconds);
        timing << "latency_pruned_ratio," << name << ',' << format_double(out.latency_pruned->ratio()) << '\n';
      }
    }
    out.hours.push_back(std::move(ev));
  }

  for (const auto& [method, cases] : overall)
    for (const auto& [c, acc] : cases) {
      report["overall"]["ase"][method][c] = acc.ase();
      ase_csv << "all," << method << ',' << c << ',' << acc.samples << ',' << acc.nodes << ','
              << format_double(acc.ase()) << '\n';
    }
  for (const auto& [method, cases] : overall_converged)
    for (const auto& [c, acc] : cases) report["overall"]["ase_converged"][method][c] = acc.ase();
  report["overall"]["M"] = overall.empty() ? 0 : overall.begin()->second.begin()->second.samples;
  report["overall"]["N"] = net.node_count();

  out.report = std::move(report);
  out.ase_csv = ase_csv.str();
  out.detection_csv = det_csv.str();
  out.timing_csv = timing.str();
  if (write)
    stage("artifacts", [&] {
      write_text(out_dir / "report.json", out.report.dump(2) + "\n");
      write_text(out_dir / "ase.csv", out.ase_csv);
      write_text(out_dir / "detection.csv", out.detection_csv);
      write_text(out_dir / "timing.csv", out.timing_csv);
      return 0;
    });
  return out;
}

}  // namespace bse
