#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "bse/error.hpp"
#include "bse/io.hpp"
#include "bse/sampling.hpp"
#include "support.hpp"

using namespace bse;
using bse::testing::data_path;
using bse::testing::fixture;

namespace {

ScenarioDistributions feeder_dists(const Network& net) {
  return distributions_from_json(nlohmann::json::parse(read_text(data_path("configs/feeder12_distributions.json"))),
                                 net);
}

MeasurementSpec feeder_spec() {
  return {{{ChannelKind::Pinj, 1, 1}, {ChannelKind::Qinj, 1, 1}, {ChannelKind::Imag, 0, 1},
           {ChannelKind::Imag, 1, 1}, {ChannelKind::Pflow, 5, 1}}};
}

MeasurementVector ones(std::size_t n) { return {Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n)), {}}; }

}  // namespace

TEST(SampleInjections, DegenerateDraws) {
  Rng rng(1);
  ScenarioDistributions d{{{GaussianMixture::point(0.5), GaussianMixture::point(0.2), 1.0},
                           {GaussianMixture::point(1.0), std::nullopt, 0.95}}};
  const InjectionVector s = sample_injections(d, rng);
  EXPECT_NEAR(s.p(0), -0.3, 1e-3);
  EXPECT_EQ(s.q(0), 0.0);
  EXPECT_NEAR(s.p(1), -1.0, 1e-3);
  EXPECT_NEAR(s.q(1), -std::sqrt(1.0 / (0.95 * 0.95) - 1.0), 1e-3);
  EXPECT_NEAR(s.q(1), -0.3287, 1e-3);
}

TEST(SampleInjections, MeansMatchMixtures) {
  const Network net = fixture("feeder12.json");
  const ScenarioDistributions d = feeder_dists(net);
  Rng rng(2);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d.nodes.size()));
  const int n = 100000;
  for (int k = 0; k < n; ++k) acc += sample_injections(d, rng).p;
  acc /= n;
  const Eigen::VectorXd expect = d.mean_injection();
  for (Eigen::Index i = 0; i < acc.size(); ++i) EXPECT_NEAR(acc(i), expect(i), 0.01 * std::abs(expect(i))) << i;
}

TEST(Distributions, DefaultNoiseAndScaling) {
  ScenarioDistributions d{{{GaussianMixture::point(0.5), std::nullopt, 0.95},
                           {GaussianMixture::point(0.2), GaussianMixture::point(0.6), 0.95}}};
  // mean |P| = (0.5 + 0.4) / 2
  EXPECT_NEAR(default_noise_sigma(d), 0.0045, 1e-12);
  EXPECT_NEAR(default_noise_sigma(d, 0.02), 0.009, 1e-12);
  const ScenarioDistributions s = d.scaled(2.0, 0.5);
  EXPECT_NEAR(s.mean_injection()(1), 0.3 - 0.4, 1e-12);
}

TEST(TrainingSet, ZeroNoiseIsExact) {
  const Network net = fixture("feeder12.json");
  const MeasurementSpec spec = feeder_spec();
  const TrainingSet set =
      generate_training_set(net, feeder_dists(net), spec, NoiseModel::uniform(spec.size(), 0.0), 50, 3);
  ASSERT_EQ(set.size(), 50u);
  for (std::size_t k = 0; k < set.size(); ++k)
    EXPECT_EQ(set.measurements[k].values, evaluate_h(set.states[k], net, spec).values);
}

TEST(TrainingSet, IndependentOfThreadCount) {
  const Network net = fixture("feeder12.json");
  const MeasurementSpec spec = feeder_spec();
  const auto noise = NoiseModel::uniform(spec.size(), 1e-3);
  GenerationOptions one, four;
  four.threads = 4;
  const TrainingSet a = generate_training_set(net, feeder_dists(net), spec, noise, 200, 9, one);
  const TrainingSet b = generate_training_set(net, feeder_dists(net), spec, noise, 200, 9, four);
  const TrainingSet c = generate_training_set(net, feeder_dists(net), spec, noise, 200, 9, one);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a.states[k].magnitude, b.states[k].magnitude);
    EXPECT_EQ(a.states[k].angle, b.states[k].angle);
    EXPECT_EQ(a.measurements[k].values, b.measurements[k].values);
    EXPECT_EQ(a.measurements[k].values, c.measurements[k].values);
  }
}

TEST(TrainingSet, NoiseStdRecovered) {
  const Network net = fixture("feeder12.json");
  const MeasurementSpec spec = feeder_spec();
  const double sigma = 2e-3;
  const TrainingSet set =
      generate_training_set(net, feeder_dists(net), spec, NoiseModel::uniform(spec.size(), sigma), 10000, 4);
  const MeasurementModel model(net, spec);
  Eigen::VectorXd ss = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec.size()));
  for (std::size_t k = 0; k < set.size(); ++k)
    ss += (set.measurements[k].values - model.evaluate(set.states[k])).array().square().matrix();
  for (Eigen::Index c = 0; c < ss.size(); ++c)
    EXPECT_NEAR(std::sqrt(ss(c) / double(set.size())), sigma, 0.03 * sigma) << "channel " << c;
}

TEST(TrainingSet, AggressiveLawAborts) {
  const Network net = fixture("two_bus.json");
  ScenarioDistributions d{{{GaussianMixture::point(50.0), std::nullopt, 0.95}}};
  const MeasurementSpec spec{{{ChannelKind::Pinj, 1, 1}}};
  EXPECT_THROW(generate_training_set(net, d, spec, NoiseModel::uniform(1, 0.01), 20, 1), Error);
}

TEST(TrainingSet, PersistenceRoundTrip) {
  const Network net = fixture("feeder12.json");
  const MeasurementSpec spec = feeder_spec();
  const TrainingSet set =
      generate_training_set(net, feeder_dists(net), spec, NoiseModel::uniform(spec.size(), 1e-3), 30, 5);
  const auto dir = std::filesystem::temp_directory_path() / "bse_training_set_rt";
  std::filesystem::remove_all(dir);
  write_training_set(dir, set, net, "abc");
  const TrainingSet back = read_training_set(dir, net);
  ASSERT_EQ(back.size(), set.size());
  EXPECT_EQ(back.spec, set.spec);
  EXPECT_EQ(back.seed, set.seed);
  for (std::size_t k = 0; k < set.size(); ++k) {
    EXPECT_EQ(back.states[k].magnitude, set.states[k].magnitude);
    EXPECT_EQ(back.states[k].angle, set.states[k].angle);
    EXPECT_EQ(back.measurements[k].values, set.measurements[k].values);
  }
  std::filesystem::remove_all(dir);
}

TEST(BadData, EtaExtremes) {
  Rng rng(1);
  const MeasurementVector z = ones(20);
  const Eigen::VectorXd clean = Eigen::VectorXd::Ones(20), sigma = Eigen::VectorXd::Constant(20, 0.1);
  const CorruptedMeasurement none = inject_bad_data(z, clean, sigma, {0.0, 10.0, 0.0}, rng);
  EXPECT_EQ(none.z.values, z.values);
  EXPECT_EQ(std::count(none.bad.begin(), none.bad.end(), true), 0);
  const CorruptedMeasurement all = inject_bad_data(z, clean, sigma, {1.0, 10.0, 0.0}, rng);
  EXPECT_EQ(std::count(all.bad.begin(), all.bad.end(), true), 20);
}

TEST(BadData, RateAndSpread) {
  Rng rng(2);
  const std::size_t n = 100000;
  const MeasurementVector z = ones(n);
  const Eigen::VectorXd clean = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n));
  const Eigen::VectorXd sigma = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), 0.01);
  const CorruptedMeasurement out = inject_bad_data(z, clean, sigma, {0.3, 10.0, 0.0}, rng);
  const auto bad = std::count(out.bad.begin(), out.bad.end(), true);
  EXPECT_NEAR(double(bad) / double(n), 0.3, 0.01);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = out.z.values(static_cast<Eigen::Index>(i)) - 1.0;
    if (out.bad[i]) ss += d * d;
    else EXPECT_EQ(d, 0.0);
  }
  EXPECT_NEAR(std::sqrt(ss / double(bad)), 0.1, 0.003);
}

TEST(Missing, Rates) {
  Rng rng(3);
  const MeasurementVector z = ones(100000);
  EXPECT_TRUE(inject_missing(z, 0.0, rng).all_valid());
  const MeasurementVector all = inject_missing(z, 1.0, rng);
  EXPECT_EQ(std::count(all.valid.begin(), all.valid.end(), true), 0);
  const MeasurementVector some = inject_missing(z, 0.3, rng);
  EXPECT_NEAR(double(std::count(some.valid.begin(), some.valid.end(), false)) / 1e5, 0.3, 0.01);
  EXPECT_EQ(some.values, z.values);
}

TEST(MeterSeries, BlockSums) {
  const std::map<std::string, std::vector<double>> fast{{"a", {1, 2, 3, 4, 5, 6, 7, 8}},
                                                         {"b", std::vector<double>(8, 0.25)}};
  const auto id = synthesize_meter_series(fast, 1);
  EXPECT_EQ(id[0].readings, fast.at("a"));
  const auto four = synthesize_meter_series(fast, 4);
  ASSERT_EQ(four.size(), 2u);
  EXPECT_EQ(four[0].meter_id, "a");
  EXPECT_EQ(four[0].aggregation, 4);
  EXPECT_EQ(four[0].readings, (std::vector<double>{10, 26}));
  EXPECT_EQ(four[1].readings, (std::vector<double>{1.0, 1.0}));
  EXPECT_THROW(synthesize_meter_series(fast, 3), InvalidArgument);
}

TEST(MeterSeries, EnergyConserved) {
  Rng rng(4);
  std::vector<double> x(240);
  for (double& v : x) v = rng.normal(1.0, 0.3);
  const auto s = synthesize_meter_series({{"m", x}}, 24);
  const double fast = std::accumulate(x.begin(), x.end(), 0.0);
  const double slow = std::accumulate(s[0].readings.begin(), s[0].readings.end(), 0.0);
  EXPECT_NEAR(slow, fast, 1e-12 * std::abs(fast));
}

TEST(Placement, CurrentMetersPlusSlack) {
  const Network net = fixture("feeder12.json");
  const MeasurementSpec spec = default_placement(net, 0.2, 1);
  ASSERT_EQ(spec.size(), 5u);
  std::set<int> branches;
  for (const Channel& c : spec.channels)
    if (c.kind == ChannelKind::Imag) branches.insert(c.element);
    else EXPECT_EQ(c.element, 1);
  EXPECT_EQ(branches.size(), 3u);
  EXPECT_EQ(default_placement(net, 0.2, 1), spec);
  const Network tri = fixture("radial4_3ph.json");
  EXPECT_NO_THROW(validate_spec(default_placement(tri, 0.2, 1), tri));
}
