#include <gtest/gtest.h>

#include "bse/error.hpp"
#include "bse/grid.hpp"
#include "support.hpp"

using namespace bse;
using bse::testing::fixture;
using bse::testing::random_network;

namespace {

Eigen::VectorXcd gather(const Eigen::VectorXcd& v, const std::vector<std::size_t>& idx) {
  Eigen::VectorXcd out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out(static_cast<Eigen::Index>(k)) = v(static_cast<Eigen::Index>(idx[k]));
  return out;
}

// Nodal currents summed branch by branch; independent of the Y assembly.
Eigen::VectorXcd node_currents(const Network& net, const Eigen::VectorXcd& v) {
  Eigen::VectorXcd i = Eigen::VectorXcd::Zero(v.size());
  for (const Branch& b : net.branches()) {
    const auto f = net.bus_nodes(*net.bus_position(b.from));
    const auto t = net.bus_nodes(*net.bus_position(b.to));
    const Eigen::VectorXcd vf = gather(v, f), vt = gather(v, t);
    Eigen::VectorXcd i_f = b.series * (vf - vt);
    Eigen::VectorXcd i_t = b.series * (vt - vf);
    if (b.shunt_from) i_f += *b.shunt_from * vf;
    if (b.shunt_to) i_t += *b.shunt_to * vt;
    for (std::size_t k = 0; k < f.size(); ++k) i(static_cast<Eigen::Index>(f[k])) += i_f(static_cast<Eigen::Index>(k));
    for (std::size_t k = 0; k < t.size(); ++k) i(static_cast<Eigen::Index>(t[k])) += i_t(static_cast<Eigen::Index>(k));
  }
  return i;
}

const char* kTwoBus = R"({"phase_count":1,"base_power_mva":1.0,
  "buses":[{"id":1,"kind":"Slack","phases":[1]},{"id":2,"kind":"PQ","phases":[1]}],
  "branches":[{"from":1,"to":2,"series":[[{"re":0.0,"im":-10.0}]]}]})";

GridError::Code load_error(const std::string& text) {
  try {
    load_network(text);
  } catch (const GridError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no GridError for: " << text;
  return GridError::Code::Schema;
}

}  // namespace

TEST(Ybus, TwoBusLine) {
  const AdmittanceMatrix y = build_ybus(load_network(kTwoBus));
  ASSERT_EQ(y.rows(), 2);
  EXPECT_EQ(y(0, 0), Complex(0.0, -10.0));
  EXPECT_EQ(y(1, 1), Complex(0.0, -10.0));
  EXPECT_EQ(y(0, 1), Complex(0.0, 10.0));
  EXPECT_EQ(y(1, 0), Complex(0.0, 10.0));
}

TEST(Ybus, ParallelBranchesAdd) {
  const Network single = load_network(kTwoBus);
  std::vector<Branch> br = single.branches();
  br.push_back(br.front());
  const Network twin(single.buses(), br, 1.0, 1);
  const AdmittanceMatrix y = build_ybus(twin);
  EXPECT_NEAR(std::abs(y(0, 1) - Complex(0.0, 20.0)), 0.0, 1e-12);

  Eigen::VectorXcd v(2);
  v << Complex(1.0, 0.0), std::polar(0.97, -0.05);
  EXPECT_LT((y * v - node_currents(twin, v)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Ybus, MatchesNodeEquationsOnRandomNetworks) {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const int phases = trial % 2 ? 3 : 1;
    const Network net = random_network(rng, 3 + trial % 7, phases, trial % 3, trial % 4 == 0);
    const AdmittanceMatrix y = build_ybus(net);
    Eigen::VectorXcd v(static_cast<Eigen::Index>(net.node_count()));
    for (Eigen::Index k = 0; k < v.size(); ++k) v(k) = std::polar(0.9 + 0.2 * rng.uniform(), rng.uniform() - 0.5);
    EXPECT_LT((y * v - node_currents(net, v)).cwiseAbs().maxCoeff(), 1e-10) << "trial " << trial;
  }
}

TEST(Ybus, SymmetricForReciprocalNetworks) {
  Rng rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    const Network net = random_network(rng, 2 + trial % 9, trial % 2 ? 3 : 1, trial % 4, trial % 3 == 0);
    const AdmittanceMatrix y = build_ybus(net);
    EXPECT_LT((y - y.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Ybus, ZeroShuntRowsSumToZero) {
  Rng rng(6);
  for (int trial = 0; trial < 40; ++trial) {
    const Network net = random_network(rng, 2 + trial % 9, trial % 2 ? 3 : 1, trial % 4, false);
    const AdmittanceMatrix y = build_ybus(net);
    EXPECT_LT(y.rowwise().sum().cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_LT(build_ybus(fixture("feeder12.json")).rowwise().sum().cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LoadNetwork, MinimalTwoBus) {
  const Network net = load_network(kTwoBus);
  EXPECT_EQ(net.node_count(), 2u);
  EXPECT_EQ(net.phase_count(), 1);
  EXPECT_EQ(net.slack_bus(), 0u);
  EXPECT_EQ(net.free_nodes(), std::vector<std::size_t>{1});
}

TEST(LoadNetwork, ThreePhaseFixtureHasTwelveNodes) {
  const Network net = fixture("radial4_3ph.json");
  EXPECT_EQ(net.buses().size(), 4u);
  EXPECT_EQ(net.node_count(), 12u);
  EXPECT_EQ(net.free_nodes().size(), 9u);
  EXPECT_EQ(net.node_index(3, 2), 7u);
}

TEST(LoadNetwork, ErrorCodes) {
  using C = GridError::Code;
  EXPECT_EQ(load_error(R"({"phase_count":1,"base_power_mva":1.0,
    "buses":[{"id":1,"kind":"Slack","phases":[1]},{"id":2,"kind":"Slack","phases":[1]}],
    "branches":[{"from":1,"to":2,"series":[[{"re":0.0,"im":-10.0}]]}]})"),
            C::MultipleSlack);
  EXPECT_EQ(load_error(R"({"phase_count":1,"base_power_mva":1.0,
    "buses":[{"id":1,"kind":"PQ","phases":[1]},{"id":2,"kind":"PQ","phases":[1]}],
    "branches":[{"from":1,"to":2,"series":[[{"re":0.0,"im":-10.0}]]}]})"),
            C::MissingSlack);
  EXPECT_EQ(load_error(R"({"phase_count":1,"base_power_mva":1.0,
    "buses":[{"id":1,"kind":"Slack","phases":[1]},{"id":1,"kind":"PQ","phases":[1]}],
    "branches":[]})"),
            C::DuplicateBus);
  EXPECT_EQ(load_error(R"({"phase_count":1,"base_power_mva":1.0,
    "buses":[{"id":1,"kind":"Slack","phases":[1]},{"id":2,"kind":"PQ","phases":[1]},
             {"id":3,"kind":"PQ","phases":[1]}],
    "branches":[{"from":1,"to":2,"series":[[{"re":0.0,"im":-10.0}]]}]})"),
            C::Disconnected);
  EXPECT_EQ(load_error(R"({"phase_count":1,"base_power_mva":1.0,
    "buses":[{"id":1,"kind":"Slack","phases":[1]},{"id":2,"kind":"PQ","phases":[1]}],
    "branches":[{"from":1,"to":5,"series":[[{"re":0.0,"im":-10.0}]]}]})"),
            C::UnknownBus);
  EXPECT_EQ(load_error(R"({"phase_count":1,"buses":[]})"), C::Schema);
  EXPECT_EQ(load_error("not json"), C::Schema);
}

TEST(LoadNetwork, SerializeRoundTrip) {
  for (const char* name : {"feeder12.json", "radial4_3ph.json", "two_bus.json"}) {
    const Network net = fixture(name);
    const std::string text = serialize_network(net);
    const Network back = load_network(text);
    EXPECT_TRUE(back == net) << name;
    EXPECT_EQ(serialize_network(back), text) << name;
  }
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Network net = random_network(rng, 2 + trial % 6, trial % 2 ? 3 : 1, trial % 3, true);
    EXPECT_TRUE(load_network(serialize_network(net)) == net) << "trial " << trial;
  }
}

TEST(Grid, SlackReferenceAngles) {
  EXPECT_EQ(reference_angle(1), 0.0);
  EXPECT_NEAR(reference_angle(2), -2.0 * M_PI / 3.0, 1e-15);
  EXPECT_NEAR(reference_angle(3), 2.0 * M_PI / 3.0, 1e-15);
}
