#pragma once

#include <complex>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace bse {

using Complex = std::complex<double>;
/// Dense phase-coupling block; entry (k, l) couples the k-th phase of one end
/// to the l-th phase of the other, in the order of the bus phase list.
using ComplexBlock = Eigen::MatrixXcd;
using AdmittanceMatrix = Eigen::MatrixXcd;

enum class BusKind { Slack, PQ };

struct Bus {
  int id = 0;
  BusKind kind = BusKind::PQ;
  std::vector<int> phases;   ///< ascending subset of {1, .., phase_count}
  double voltage_set = 1.0;  ///< magnitude the slack is pinned at; ignored for PQ buses

  bool operator==(const Bus&) const = default;
};

struct Branch {
  int from = 0;
  int to = 0;
  ComplexBlock series;
  std::optional<ComplexBlock> shunt_from;
  std::optional<ComplexBlock> shunt_to;

  /// Exact (bitwise-value) equality, including block shapes.
  bool operator==(const Branch& other) const;
};

/// One (bus, phase) pair; the unit every state and injection coordinate is indexed by.
struct Node {
  std::size_t bus = 0;  ///< position in Network::buses()
  int phase = 1;
};

/// Validated multi-phase network. Immutable after construction.
class Network {
 public:
  /// Throws GridError when any structural invariant is violated.
  Network(std::vector<Bus> buses, std::vector<Branch> branches, double base_power_mva,
          int phase_count);

  const std::vector<Bus>& buses() const noexcept { return buses_; }
  const std::vector<Branch>& branches() const noexcept { return branches_; }
  double base_power_mva() const noexcept { return base_power_mva_; }
  int phase_count() const noexcept { return phase_count_; }

  /// Nodes in canonical order: buses in file order, phases ascending within a bus.
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  std::size_t node_count() const noexcept { return nodes_.size(); }

  std::size_t slack_bus() const noexcept { return slack_; }
  bool is_slack_node(std::size_t node) const { return nodes_[node].bus == slack_; }
  /// Non-slack nodes in canonical order.
  const std::vector<std::size_t>& free_nodes() const noexcept { return free_nodes_; }

  std::optional<std::size_t> bus_position(int id) const;
  /// Throws GridError(UnknownBus / PhaseMismatch) when the pair does not exist.
  std::size_t node_index(int bus_id, int phase) const;
  /// Node indices of one end of a branch, one per phase of that end.
  std::vector<std::size_t> bus_nodes(std::size_t bus_pos) const;

  bool operator==(const Network& other) const {
    return buses_ == other.buses_ && branches_ == other.branches_ &&
           base_power_mva_ == other.base_power_mva_ && phase_count_ == other.phase_count_;
  }

 private:
  std::vector<Bus> buses_;
  std::vector<Branch> branches_;
  double base_power_mva_;
  int phase_count_;
  std::vector<Node> nodes_;
  std::vector<std::size_t> first_node_;
  std::vector<std::size_t> free_nodes_;
  std::size_t slack_ = 0;
};

/// Slack reference angle of a phase: 0, -2pi/3, +2pi/3 for phases 1, 2, 3.
double reference_angle(int phase);

/// Nodal admittance matrix over Network::nodes().
AdmittanceMatrix build_ybus(const Network& network);

Network load_network(std::string_view text);
Network load_network_file(const std::filesystem::path& path);
std::string serialize_network(const Network& network);

}  // namespace bse
