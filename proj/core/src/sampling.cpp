#include "bse/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <thread>

#include "bse/error.hpp"
#include "bse/io.hpp"

namespace bse {

void ScenarioDistributions::validate(const Network& network) const {
  if (nodes.size() != network.free_nodes().size())
    throw InvalidArgument("scenario must cover every non-slack bus phase");
  for (const auto& nd : nodes) {
    nd.load.validate();
    if (nd.generation) nd.generation->validate();
    if (!(nd.power_factor > 0.0 && nd.power_factor <= 1.0))
      throw InvalidArgument("power factor must lie in (0, 1]");
  }
}

ScenarioDistributions ScenarioDistributions::scaled(double load_scale, double gen_scale) const {
  ScenarioDistributions out = *this;
  for (auto& nd : out.nodes) {
    nd.load = nd.load.scaled(load_scale);
    if (nd.generation) nd.generation = nd.generation->scaled(gen_scale);
  }
  return out;
}

Eigen::VectorXd ScenarioDistributions::mean_injection() const {
  Eigen::VectorXd m(static_cast<Eigen::Index>(nodes.size()));
  for (std::size_t k = 0; k < nodes.size(); ++k)
    m[static_cast<Eigen::Index>(k)] =
        (nodes[k].generation ? nodes[k].generation->mean() : 0.0) - nodes[k].load.mean();
  return m;
}

double default_noise_sigma(const ScenarioDistributions& dists, double fraction) {
  const Eigen::VectorXd m = dists.mean_injection();
  if (m.size() == 0) return fraction;
  return fraction * m.cwiseAbs().mean();
}

InjectionVector sample_injections(const ScenarioDistributions& dists, Rng& rng) {
  const auto n = static_cast<Eigen::Index>(dists.nodes.size());
  InjectionVector s{Eigen::VectorXd(n), Eigen::VectorXd(n)};
  for (Eigen::Index k = 0; k < n; ++k) {
    const NodeDistribution& nd = dists.nodes[static_cast<std::size_t>(k)];
    const double load = sample_mixture(nd.load, rng);
    const double gen = nd.generation ? sample_mixture(*nd.generation, rng) : 0.0;
    const double p_load = -load;
    s.p[k] = gen + p_load;
    s.q[k] = p_load * std::tan(std::acos(nd.power_factor));
  }
  return s;
}

TrainingSet generate_training_set(const Network& network, const ScenarioDistributions& dists,
                                  const MeasurementSpec& spec, const NoiseModel& noise,
                                  std::size_t count, std::uint64_t seed,
                                  const GenerationOptions& options) {
  if (count < 1) throw InvalidArgument("training set needs at least one sample");
  dists.validate(network);
  if (noise.sigma.size() != static_cast<Eigen::Index>(spec.size()))
    throw DimensionError("noise model does not match the measurement spec");

  const PowerFlowSolver solver(network);
  const MeasurementModel model(network, spec);

  struct Sample {
    StateVector x;
    Eigen::VectorXd z;
  };
  auto draw = [&](std::size_t index) -> std::optional<Sample> {
    Rng rng = Rng::stream(seed, index);
    const InjectionVector s = sample_injections(dists, rng);
    try {
      Sample out{solver.solve(s, options.powerflow).state, {}};
      out.z = model.evaluate(out.x);
      for (Eigen::Index c = 0; c < out.z.size(); ++c)
        if (noise.sigma[c] > 0.0) out.z[c] += noise.sigma[c] * rng.normal();
      return out;
    } catch (const ConvergenceError&) {
      return std::nullopt;
    } catch (const SingularMatrixError&) {
      return std::nullopt;
    }
  };

  TrainingSet set;
  set.seed = seed;
  set.spec = spec;
  const unsigned workers = std::max(1U, options.threads);

  std::size_t next = 0;
  while (set.size() < count) {
    const std::size_t batch = count - set.size();
    std::vector<std::optional<Sample>> results(batch);
    auto work = [&](unsigned w) {
      for (std::size_t i = w; i < batch; i += workers) results[i] = draw(next + i);
    };
    if (workers == 1) {
      work(0);
    } else {
      std::vector<std::jthread> pool;
      for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work, w);
    }
    next += batch;
    set.attempted += batch;
    for (auto& r : results) {
      if (!r) {
        ++set.failures;
        continue;
      }
      set.states.push_back(std::move(r->x));
      set.measurements.push_back(MeasurementVector{std::move(r->z), {}});
    }
    if (static_cast<double>(set.failures) >
        options.max_failure_fraction * static_cast<double>(set.attempted))
      throw Error("sampling aborted: " + std::to_string(set.failures) + " of " +
                  std::to_string(set.attempted) +
                  " power-flow solves failed; injection distribution is too aggressive for the network");
  }
  return set;
}

CorruptedMeasurement inject_bad_data(const MeasurementVector& z, const Eigen::VectorXd& clean,
                                     const Eigen::VectorXd& sigma0, const BadDataConfig& cfg,
                                     Rng& rng) {
  if (clean.size() != z.values.size() || sigma0.size() != z.values.size())
    throw DimensionError("bad-data injection: clean values / sigma do not match z");
  if (!(cfg.probability >= 0.0 && cfg.probability <= 1.0))
    throw InvalidArgument("bad-data probability must lie in [0, 1]");
  CorruptedMeasurement out{z, std::vector<bool>(z.size(), false)};
  for (Eigen::Index c = 0; c < z.values.size(); ++c) {
    if (!rng.bernoulli(cfg.probability)) continue;
    out.bad[static_cast<std::size_t>(c)] = true;
    out.z.values[c] = clean[c] + cfg.ratio * sigma0[c] * rng.normal();
  }
  return out;
}

MeasurementVector inject_missing(const MeasurementVector& z, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw InvalidArgument("missing rate must lie in [0, 1]");
  MeasurementVector out = z;
  if (out.valid.empty()) out.valid.assign(z.size(), true);
  for (std::size_t c = 0; c < z.size(); ++c)
    if (rng.bernoulli(rate)) out.valid[c] = false;
  return out;
}

std::vector<MeterSeries> synthesize_meter_series(
    const std::map<std::string, std::vector<double>>& fast_series, int aggregation) {
  if (aggregation < 1) throw InvalidArgument("aggregation factor must be at least 1");
  const auto t = static_cast<std::size_t>(aggregation);
  std::vector<MeterSeries> out;
  for (const auto& [id, fast] : fast_series) {
    if (fast.size() % t != 0)
      throw InvalidArgument("series '" + id + "' length is not a multiple of the aggregation factor");
    MeterSeries m{id, aggregation, {}};
    for (std::size_t start = 0; start < fast.size(); start += t) {
      double sum = 0.0;
      for (std::size_t n = 0; n < t; ++n) sum += fast[start + n];
      m.readings.push_back(sum);
    }
    out.push_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> state_header(const Network& network) {
  std::vector<std::string> h;
  for (const Node& n : network.nodes())
    h.push_back("V_" + std::to_string(network.buses()[n.bus].id) + "_" + std::to_string(n.phase));
  for (const Node& n : network.nodes())
    h.push_back("theta_" + std::to_string(network.buses()[n.bus].id) + "_" + std::to_string(n.phase));
  return h;
}

std::vector<std::string> measurement_header(const MeasurementSpec& spec) {
  std::vector<std::string> h;
  for (const Channel& c : spec.channels)
    h.push_back(std::string(to_string(c.kind)) + "_" + std::to_string(c.element) + "_" +
                std::to_string(c.phase));
  return h;
}

}  // namespace

void write_training_set(const std::filesystem::path& dir, const TrainingSet& set,
                        const Network& network, const std::string& config_hash) {
  std::filesystem::create_directories(dir);
  std::vector<Eigen::VectorXd> states, meas;
  for (const auto& x : set.states) {
    Eigen::VectorXd row(2 * x.magnitude.size());
    row << x.magnitude, x.angle;
    states.push_back(std::move(row));
  }
  for (const auto& z : set.measurements) meas.push_back(z.values);
  write_matrix_csv(dir / "states.csv", state_header(network), states);
  write_matrix_csv(dir / "measurements.csv", measurement_header(set.spec), meas);

  nlohmann::json manifest{{"seed", set.seed},
                          {"count", set.size()},
                          {"attempted", set.attempted},
                          {"failures", set.failures},
                          {"spec", set.spec},
                          {"network_hash", fnv1a_hex(serialize_network(network))},
                          {"config_hash", config_hash}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

TrainingSet read_training_set(const std::filesystem::path& dir, const Network& network) {
  const auto manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
  TrainingSet set;
  set.seed = manifest.at("seed").get<std::uint64_t>();
  set.attempted = manifest.value("attempted", std::size_t{0});
  set.failures = manifest.value("failures", std::size_t{0});
  set.spec = manifest.at("spec").get<MeasurementSpec>();
  validate_spec(set.spec, network);

  const auto n = static_cast<Eigen::Index>(network.node_count());
  for (auto& row : read_matrix_csv(dir / "states.csv")) {
    if (row.size() != 2 * n) throw DimensionError("states.csv does not match the network");
    set.states.push_back(StateVector{row.head(n), row.tail(n)});
  }
  for (auto& row : read_matrix_csv(dir / "measurements.csv")) {
    if (row.size() != static_cast<Eigen::Index>(set.spec.size()))
      throw DimensionError("measurements.csv does not match the measurement spec");
    set.measurements.push_back(MeasurementVector{std::move(row), {}});
  }
  if (set.states.size() != set.measurements.size())
    throw DimensionError("states.csv and measurements.csv differ in length");
  return set;
}

MeasurementSpec default_placement(const Network& network, double branch_fraction,
                                  std::uint64_t seed) {
  const std::size_t nb = network.branches().size();
  const auto metered = std::min(
      nb, static_cast<std::size_t>(std::ceil(branch_fraction * static_cast<double>(nb) - 1e-12)));
  std::vector<std::size_t> idx(nb);
  for (std::size_t i = 0; i < nb; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < metered; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.uniform() * static_cast<double>(nb - i));
    std::swap(idx[i], idx[std::min(j, nb - 1)]);
  }
  std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(metered));

  MeasurementSpec spec;
  for (std::size_t i = 0; i < metered; ++i) {
    const Branch& br = network.branches()[idx[i]];
    for (int ph : network.buses()[*network.bus_position(br.from)].phases)
      spec.channels.push_back({ChannelKind::Imag, static_cast<int>(idx[i]), ph});
  }
  const Bus& slack = network.buses()[network.slack_bus()];
  for (int ph : slack.phases) spec.channels.push_back({ChannelKind::Pinj, slack.id, ph});
  for (int ph : slack.phases) spec.channels.push_back({ChannelKind::Qinj, slack.id, ph});
  return spec;
}

}  // namespace bse
