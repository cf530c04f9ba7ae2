#pragma once

#include <cmath>
#include <filesystem>
#include <vector>

#include "bse/grid.hpp"
#include "bse/powerflow.hpp"
#include "bse/rng.hpp"

namespace bse::testing {

inline std::filesystem::path data_path(const std::string& rel) {
  return std::filesystem::path(BSE_DATA_DIR) / rel;
}

inline Network fixture(const std::string& name) { return load_network_file(data_path("grids/" + name)); }

inline ComplexBlock symmetric_block(int phases, Rng& rng, double scale = 1.0) {
  ComplexBlock b(phases, phases);
  for (int r = 0; r < phases; ++r)
    for (int c = r; c < phases; ++c) {
      const double g = (r == c ? 2.0 + rng.uniform() : 0.3 * rng.uniform()) * scale;
      const double bb = (r == c ? -(5.0 + 5.0 * rng.uniform()) : -rng.uniform()) * scale;
      b(r, c) = b(c, r) = Complex(g, bb);
    }
  return b;
}

/// Random connected reciprocal network: a random tree plus `loops` extra branches.
inline Network random_network(Rng& rng, int buses, int phases, int loops, bool shunts) {
  std::vector<Bus> bs;
  std::vector<int> all(static_cast<std::size_t>(phases));
  for (int p = 0; p < phases; ++p) all[static_cast<std::size_t>(p)] = p + 1;
  for (int i = 0; i < buses; ++i) bs.push_back({i + 1, i == 0 ? BusKind::Slack : BusKind::PQ, all, 1.0});
  std::vector<Branch> br;
  auto add = [&](int f, int t) {
    Branch b{f, t, symmetric_block(phases, rng), std::nullopt, std::nullopt};
    if (shunts) {
      b.shunt_from = ComplexBlock::Identity(phases, phases) * Complex(0.0, 0.001 * rng.uniform());
      b.shunt_to = ComplexBlock::Identity(phases, phases) * Complex(0.0, 0.001 * rng.uniform());
    }
    br.push_back(std::move(b));
  };
  for (int i = 2; i <= buses; ++i)
    add(1 + static_cast<int>(rng.uniform() * (i - 1)), i);
  for (int k = 0; k < loops; ++k) {
    const int a = 1 + static_cast<int>(rng.uniform() * buses);
    int b = 1 + static_cast<int>(rng.uniform() * buses);
    if (b == a) b = a % buses + 1;
    add(a, b);
  }
  return Network(std::move(bs), std::move(br), 1.0, phases);
}

/// Interior state near the flat profile.
inline StateVector random_state(const Network& net, Rng& rng, double spread = 0.05) {
  StateVector s = flat_state(net);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (net.is_slack_node(i)) continue;
    const auto k = static_cast<Eigen::Index>(i);
    s.magnitude(k) += spread * (2.0 * rng.uniform() - 1.0);
    s.angle(k) += spread * (2.0 * rng.uniform() - 1.0);
  }
  return s;
}

/// Pinj and Qinj on every non-slack node.
inline MeasurementSpec injection_spec(const Network& net, bool include_q = true) {
  MeasurementSpec spec;
  for (std::size_t n : net.free_nodes()) {
    const Node& node = net.nodes()[n];
    const int id = net.buses()[node.bus].id;
    spec.channels.push_back({ChannelKind::Pinj, id, node.phase});
    if (include_q) spec.channels.push_back({ChannelKind::Qinj, id, node.phase});
  }
  return spec;
}

}  // namespace bse::testing
