#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "bse/bad_data.hpp"
#include "bse/error.hpp"
#include "bse/experiment.hpp"
#include "bse/io.hpp"
#include "bse/nn.hpp"
#include "bse/pruning.hpp"
#include "bse/sampling.hpp"

namespace fs = std::filesystem;
using namespace bse;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<unsigned> threads;
};

ExperimentConfig load_config(const Globals& g) {
  if (g.config.empty()) throw InvalidArgument("--config is required for this command");
  ExperimentConfig c = ExperimentConfig::load(g.config);
  if (g.seed) c.seed = *g.seed;
  if (g.threads) c.threads = *g.threads;
  return c;
}

std::size_t hour_index(const ExperimentConfig& c, const std::string& name) {
  if (name.empty()) return 0;
  for (std::size_t h = 0; h < c.hours.size(); ++h)
    if (c.hours[h].name == name) return h;
  throw InvalidArgument("no hour named '" + name + "' in the config");
}

/// Rows of a measurement CSV; NaN cells mark missing channels.
std::vector<MeasurementVector> read_measurements(const fs::path& path, std::size_t channels) {
  std::vector<MeasurementVector> out;
  for (auto& row : read_matrix_csv(path)) {
    if (row.size() != static_cast<Eigen::Index>(channels))
      throw DimensionError("measurement row has " + std::to_string(row.size()) + " values, expected " +
                           std::to_string(channels));
    MeasurementVector z{row, {}};
    if (row.hasNaN()) {
      z.valid.resize(channels);
      for (std::size_t c = 0; c < channels; ++c) z.valid[c] = !std::isnan(row[static_cast<Eigen::Index>(c)]);
    }
    out.push_back(std::move(z));
  }
  return out;
}

void print_latency(const LatencyReport& r) {
  std::cout << "trials," << r.trials << "\n"
            << "nn_median_seconds," << format_double(r.nn_median_seconds) << "\n"
            << "wls_median_seconds," << format_double(r.wls_median_seconds) << "\n"
            << "ratio," << format_double(r.ratio()) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian state estimation for distribution grids"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Experiment config (JSON)");
  app.add_option("--seed", g.seed, "Override the master seed");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.add_option("--threads", g.threads, "Sampling worker threads");

  auto* gen = app.add_subcommand("gen-data", "Generate training/validation/test sets for every hour");

  auto* learn = app.add_subcommand("learn-dist", "Learn fast-timescale injection mixtures from meter data");
  MeterLearningConfig ml;
  std::string learn_network, learn_output = "distributions.json", ar_trace;
  learn->add_option("--meters", ml.path, "Meter CSV (meter_id,interval_index,energy)")->required();
  learn->add_option("--network", learn_network, "Grid file (defaults to the config's)");
  learn->add_option("--aggregation", ml.aggregation, "Fast intervals per meter reading")->capture_default_str();
  learn->add_option("--components", ml.components, "Mixture components")->capture_default_str();
  learn->add_option("--ar-trace", ar_trace, "Fast-timescale trace for the shared AR model");
  learn->add_option("--ar-order", ml.ar_order, "AR order")->capture_default_str();
  learn->add_option("--power-factor", ml.power_factor)->capture_default_str();
  learn->add_option("--output", learn_output, "Distributions file to write")->capture_default_str();

  auto* train = app.add_subcommand("train", "Train the estimator for every hour");

  auto* prune = app.add_subcommand("prune", "Cluster-and-merge pruning with retraining");
  std::string prune_hour;
  std::optional<double> prune_threshold;
  prune->add_option("--hour", prune_hour, "Hour name (default: first)");
  prune->add_option("--threshold", prune_threshold, "Similarity threshold");

  auto* estimate = app.add_subcommand("estimate", "Estimate states for rows of a measurement CSV");
  std::string est_model, est_input, est_output = "estimates.csv";
  estimate->add_option("--model", est_model, "Model stem (without .json/.bin)")->required();
  estimate->add_option("--input", est_input, "Measurement CSV")->required();
  estimate->add_option("--output", est_output)->capture_default_str();
  std::string est_hour;
  estimate->add_option("--hour", est_hour, "Hour whose H0 statistics impute missing channels");

  auto* detect = app.add_subcommand("detect", "Wald bad-data test on rows of a measurement CSV");
  std::string det_input, det_output = "detection.csv", det_hour;
  detect->add_option("--input", det_input, "Measurement CSV")->required();
  detect->add_option("--output", det_output)->capture_default_str();
  detect->add_option("--hour", det_hour, "Hour whose training set defines H0");

  auto* evaluate = app.add_subcommand("evaluate", "ASE and detection tables without pruning or benchmarks");

  auto* bench = app.add_subcommand("benchmark", "Median latency of the estimator against WLS");
  std::size_t bench_trials = 200;
  std::string bench_hour;
  bench->add_option("--trials", bench_trials)->capture_default_str();
  bench->add_option("--hour", bench_hour);

  auto* run = app.add_subcommand("run", "Full pipeline");

  CLI11_PARSE(app, argc, argv);

  try {
    const fs::path out(g.out);
    if (*gen) {
      const ExperimentConfig c = load_config(g);
      const Scenario s = prepare_scenario(c);
      for (std::size_t h = 0; h < c.hours.size(); ++h) {
        const HourData d = generate_hour_data(c, s, h);
        const fs::path dir = out / "data" / c.hours[h].name;
        write_training_set(dir / "train", d.train, s.network, c.hash());
        write_training_set(dir / "validation", d.validation, s.network, c.hash());
        write_training_set(dir / "test", d.test, s.network, c.hash());
        std::cout << c.hours[h].name << ": " << d.train.size() << "/" << d.validation.size() << "/"
                  << d.test.size() << " samples, " << d.train.failures << " solver failures\n";
      }
    } else if (*learn) {
      std::string network_path = learn_network;
      std::uint64_t seed = g.seed.value_or(0);
      if (network_path.empty()) {
        const ExperimentConfig c = load_config(g);
        network_path = c.network.string();
        seed = c.seed;
      }
      if (!ar_trace.empty()) ml.ar_trace = ar_trace;
      const Network net = load_network_file(network_path);
      const ScenarioDistributions d = learn_distributions(ml, net, seed);
      write_text(learn_output, distributions_to_json(d, net).dump(2) + "\n");
      std::cout << "wrote " << d.nodes.size() << " node distributions to " << learn_output << "\n";
    } else if (*train) {
      const ExperimentConfig c = load_config(g);
      const Scenario s = prepare_scenario(c);
      fs::create_directories(out / "models");
      for (std::size_t h = 0; h < c.hours.size(); ++h) {
        const HourData d = generate_hour_data(c, s, h);
        const nn::TrainResult r = train_estimator(c, s, d, h);
        nn::save_model(out / "models" / c.hours[h].name, r.model, r.scaler, c.seed, c.hash());
        std::cout << c.hours[h].name << ": best epoch " << r.report.best_epoch << ", validation loss "
                  << format_double(r.report.validation_loss.at(static_cast<std::size_t>(r.report.best_epoch)))
                  << "\n";
      }
    } else if (*prune) {
      ExperimentConfig c = load_config(g);
      if (prune_threshold) c.pruning.threshold = *prune_threshold;
      const std::size_t h = hour_index(c, prune_hour);
      const Scenario s = prepare_scenario(c);
      const HourData d = generate_hour_data(c, s, h);
      nn::TrainResult r;
      const fs::path stem = out / "models" / c.hours[h].name;
      if (fs::exists(fs::path(stem).concat(".json"))) {
        nn::load_model(stem, r.model, r.scaler);
      } else {
        r = train_estimator(c, s, d, h);
      }
      const PruningSummary p = run_pruning(c, s, d, r, h);
      fs::create_directories(out / "models");
      nn::save_model(fs::path(stem).concat("_pruned"), p.loop.model, r.scaler, c.seed, c.hash());
      std::cout << pruning::rounds_csv(p.loop.rounds);
      std::cout << "neurons " << p.neurons_before << " -> " << p.neurons_after << ", validation ASE "
                << format_double(p.validation_ase_before) << " -> " << format_double(p.validation_ase_after)
                << "\n";
    } else if (*estimate) {
      const ExperimentConfig c = load_config(g);
      const Scenario s = prepare_scenario(c);
      nn::MLP mlp;
      nn::Scaler scaler;
      nn::load_model(est_model, mlp, scaler);
      const nn::StateEstimator est(s.network, mlp, scaler);
      auto zs = read_measurements(est_input, s.spec.size());
      std::optional<H0Stats> h0;
      std::vector<Eigen::VectorXd> rows;
      for (auto& z : zs) {
        if (!z.all_valid()) {
          if (!h0) h0 = estimate_h0_stats(generate_hour_data(c, s, hour_index(c, est_hour)).train);
          z = filter_bad(z, wald_detect(z, *h0, c.wald), *h0);
        }
        const StateVector x = est.estimate(z);
        Eigen::VectorXd row(2 * x.magnitude.size());
        row << x.magnitude, x.angle;
        rows.push_back(std::move(row));
      }
      std::vector<std::string> header;
      for (const char* q : {"V", "theta"})
        for (const Node& n : s.network.nodes())
          header.push_back(std::string(q) + "_" + std::to_string(s.network.buses()[n.bus].id) + "_" +
                           std::to_string(n.phase));
      write_matrix_csv(est_output, header, rows);
      std::cout << "wrote " << rows.size() << " estimates to " << est_output << "\n";
    } else if (*detect) {
      const ExperimentConfig c = load_config(g);
      const Scenario s = prepare_scenario(c);
      const H0Stats h0 = estimate_h0_stats(generate_hour_data(c, s, hour_index(c, det_hour)).train);
      std::string text = "sample,channel,value,mean,stddev,flagged,truth\n";
      std::size_t flagged = 0, k = 0;
      for (const auto& z : read_measurements(det_input, s.spec.size())) {
        const auto flags = wald_detect(z, h0, c.wald);
        for (bool f : flags) flagged += f ? 1 : 0;
        std::istringstream lines(detection_csv(s.spec, z, h0, flags));
        std::string line;
        std::getline(lines, line);
        while (std::getline(lines, line)) text += std::to_string(k) + "," + line + "\n";
        ++k;
      }
      write_text(det_output, text);
      std::cout << flagged << " channels flagged in " << k << " samples\n";
    } else if (*evaluate || *run) {
      ExperimentConfig c = load_config(g);
      if (*evaluate) {
        c.pruning.enabled = false;
        c.benchmark_trials = 0;
      }
      const EvaluationReport r = run_experiment(c, out);
      std::cout << r.ase_csv;
      if (r.latency.trials > 0) {
        std::cout << "\n";
        print_latency(r.latency);
      }
      if (r.latency_pruned) {
        std::cout << "\npruned model\n";
        print_latency(*r.latency_pruned);
      }
    } else if (*bench) {
      const ExperimentConfig c = load_config(g);
      const std::size_t h = hour_index(c, bench_hour);
      const Scenario s = prepare_scenario(c);
      const HourData d = generate_hour_data(c, s, h);
      nn::TrainResult r;
      const fs::path stem = out / "models" / c.hours[h].name;
      if (fs::exists(fs::path(stem).concat(".json")))
        nn::load_model(stem, r.model, r.scaler);
      else
        r = train_estimator(c, s, d, h);
      const nn::StateEstimator est(s.network, r.model, r.scaler);
      const LatencyReport lr = benchmark_hour(c, s, d, est, h, bench_trials);
      print_latency(lr);
      fs::create_directories(out);
      write_text(out / "timing.csv", "stage,hour,seconds\nlatency_nn_median," + c.hours[h].name + "," +
                                         format_double(lr.nn_median_seconds) + "\nlatency_wls_median," +
                                         c.hours[h].name + "," + format_double(lr.wls_median_seconds) + "\n");
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
