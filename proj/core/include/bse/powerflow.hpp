#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bse/grid.hpp"

namespace bse {

/// Voltage magnitude and angle for every node of a Network (canonical node order).
struct StateVector {
  Eigen::VectorXd magnitude;
  Eigen::VectorXd angle;

  std::size_t size() const noexcept { return static_cast<std::size_t>(magnitude.size()); }
  Eigen::VectorXcd phasors() const;
};

/// All magnitudes at the slack set point, all angles at the phase reference.
StateVector flat_state(const Network& network);

/// Net complex power injection at the non-slack nodes (Network::free_nodes() order).
/// Generation positive, consumption negative.
struct InjectionVector {
  Eigen::VectorXd p;
  Eigen::VectorXd q;
};

enum class ChannelKind { Pinj, Qinj, Pflow, Qflow, Imag };

const char* to_string(ChannelKind kind);
ChannelKind channel_kind_from_string(const std::string& name);

/// One sensor. `element` is a bus id for Pinj/Qinj and a zero-based branch
/// index for Pflow/Qflow/Imag; flows and currents are metered at the
/// branch's `from` end.
struct Channel {
  ChannelKind kind = ChannelKind::Pinj;
  int element = 0;
  int phase = 1;

  bool operator==(const Channel&) const = default;
};

struct MeasurementSpec {
  std::vector<Channel> channels;

  std::size_t size() const noexcept { return channels.size(); }
  bool operator==(const MeasurementSpec&) const = default;
};

/// Readings aligned with a MeasurementSpec. An empty `valid` means every
/// channel is present.
struct MeasurementVector {
  Eigen::VectorXd values;
  std::vector<bool> valid;

  std::size_t size() const noexcept { return static_cast<std::size_t>(values.size()); }
  bool is_valid(std::size_t i) const { return valid.empty() || valid[i]; }
  bool all_valid() const;
};

/// Throws InvalidArgument if a channel references a missing bus, branch or phase.
void validate_spec(const MeasurementSpec& spec, const Network& network);

/// Complex power leaving each end of one branch, with the matching phase currents.
struct BranchFlow {
  Eigen::VectorXcd power_from;
  Eigen::VectorXcd power_to;
  Eigen::VectorXcd current_from;
  Eigen::VectorXcd current_to;
};

/// Caches the admittance matrix and the resolved channel topology so repeated
/// evaluations of h(x) and its Jacobian do not rebuild them.
///
/// Jacobian columns are ordered [theta_0 .. theta_{n-1}, V_0 .. V_{n-1}] over
/// all nodes, slack included; free_columns() selects the estimable ones.
class MeasurementModel {
 public:
  MeasurementModel(const Network& network, MeasurementSpec spec);

  const Network& network() const noexcept { return *network_; }
  const MeasurementSpec& spec() const noexcept { return spec_; }
  const AdmittanceMatrix& ybus() const noexcept { return ybus_; }

  Eigen::VectorXd evaluate(const StateVector& state) const;
  Eigen::MatrixXd jacobian(const StateVector& state) const;

  /// Column indices of the Jacobian belonging to non-slack angles, then non-slack magnitudes.
  std::vector<Eigen::Index> free_columns() const;

 private:
  struct ResolvedChannel {
    ChannelKind kind;
    std::size_t node = 0;     // injection node, or from-end node of the metered phase
    std::size_t branch = 0;
    Eigen::Index local = 0;   // phase position within the branch block
  };
  struct BranchEnds {
    std::vector<std::size_t> from;
    std::vector<std::size_t> to;
  };

  const Network* network_;
  MeasurementSpec spec_;
  AdmittanceMatrix ybus_;
  std::vector<ResolvedChannel> resolved_;
  std::vector<BranchEnds> ends_;

  Eigen::VectorXcd branch_current(const Eigen::VectorXcd& v, std::size_t branch) const;
};

MeasurementVector evaluate_h(const StateVector& state, const Network& network,
                             const MeasurementSpec& spec);
Eigen::MatrixXd measurement_jacobian(const StateVector& state, const Network& network,
                                     const MeasurementSpec& spec);

/// S_i = v_i conj(sum_j Y_ij v_j) for every node.
Eigen::VectorXcd complex_injections(const StateVector& state, const AdmittanceMatrix& ybus);
BranchFlow branch_flow(const StateVector& state, const Network& network, std::size_t branch);

struct PowerFlowOptions {
  double tol = 1e-8;
  int max_iter = 50;
  bool flat_start = true;
};

struct PowerFlowSolution {
  StateVector state;
  int iterations = 0;
  double mismatch = 0.0;  ///< max-abs P/Q mismatch at the returned state
};

/// Polar Newton-Raphson on the P/Q mismatch of the non-slack nodes.
class PowerFlowSolver {
 public:
  explicit PowerFlowSolver(const Network& network);

  /// `initial` is used only when options.flat_start is false.
  PowerFlowSolution solve(const InjectionVector& injections, const PowerFlowOptions& options = {},
                          const StateVector* initial = nullptr) const;

  const AdmittanceMatrix& ybus() const noexcept { return ybus_; }

 private:
  const Network* network_;
  AdmittanceMatrix ybus_;
};

PowerFlowSolution solve_powerflow(const Network& network, const InjectionVector& injections,
                                  const PowerFlowOptions& options = {});

}  // namespace bse
