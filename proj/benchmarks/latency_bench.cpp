#include <benchmark/benchmark.h>

#include <array>

#include "bse/experiment.hpp"
#include "bse/nn.hpp"
#include "bse/wls.hpp"

#ifndef BSE_DATA_DIR
#define BSE_DATA_DIR "data"
#endif

namespace {

using namespace bse;

ExperimentConfig bench_config() {
  ExperimentConfig c = ExperimentConfig::load(BSE_DATA_DIR "/configs/desk12.json");
  c.train_count = 200;
  c.validation_count = 100;
  c.test_count = 100;
  return c;
}

struct Fixture {
  ExperimentConfig config = bench_config();
  Scenario scenario = prepare_scenario(config);
  HourData data = generate_hour_data(config, scenario, 0);
  nn::MLP mlp;
  nn::Scaler scaler;

  Fixture() {
    const nn::Dataset train = to_dataset(data.train, scenario.network);
    const std::array<Eigen::Index, 4> dims{train.inputs.rows(), 64, 64, train.targets.rows()};
    mlp = nn::init_he(dims, 1);
    scaler = nn::Scaler::fit(train.inputs, train.targets);
  }

  static const Fixture& get() {
    static const Fixture f;
    return f;
  }
};

void BM_NnEstimate(benchmark::State& state) {
  const Fixture& f = Fixture::get();
  const nn::StateEstimator est(f.scenario.network, f.mlp, f.scaler);
  std::size_t k = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(est.estimate(f.data.test.measurements[k++ % f.data.test.size()]));
  }
}
BENCHMARK(BM_NnEstimate);

void BM_WlsPseudoSolve(benchmark::State& state) {
  const Fixture& f = Fixture::get();
  const Network& net = f.scenario.network;
  const auto m = static_cast<Eigen::Index>(f.scenario.spec.size());
  const Eigen::VectorXd w = Eigen::VectorXd::Constant(m, 1.0 / (f.scenario.sigma0 * f.scenario.sigma0));
  PseudoOptions po;
  po.sigma = 10.0 * f.scenario.sigma0;
  Rng rng(7);
  const auto hist = draw_history(f.scenario.base, po.window, 4, rng);
  const auto pseudo = pseudo_avg(hist, net, po);
  std::vector<AugmentedProblem> problems;
  for (std::size_t k = 0; k < f.data.test.size(); ++k)
    problems.push_back(augment(f.scenario.spec, f.data.test.measurements[k], w, pseudo));
  const WlsSolver solver(net, problems.front().spec);
  const StateVector x0 = flat_state(net);
  std::size_t k = 0;
  for (auto _ : state) {
    const auto& p = problems[k++ % problems.size()];
    benchmark::DoNotOptimize(solver.solve(p.z, p.weights, x0));
  }
}
BENCHMARK(BM_WlsPseudoSolve);

// Inference cost against hidden width (two equal hidden layers).
void BM_ForwardWidth(benchmark::State& state) {
  const Eigen::Index width = state.range(0);
  const std::array<Eigen::Index, 4> dims{5, width, width, 22};
  const nn::MLP mlp = nn::init_he(dims, 3);
  const Eigen::VectorXd z = Eigen::VectorXd::Random(5);
  for (auto _ : state) benchmark::DoNotOptimize(mlp.forward(z));
  state.SetComplexityN(width);
}
BENCHMARK(BM_ForwardWidth)->RangeMultiplier(2)->Range(32, 512)->Complexity();

}  // namespace

BENCHMARK_MAIN();
