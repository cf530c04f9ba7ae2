#include "bse/powerflow.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "bse/error.hpp"

namespace bse {
namespace {

constexpr Complex kJ{0.0, 1.0};

Eigen::VectorXcd unit_phasors(const StateVector& s) {
  Eigen::VectorXcd e(s.angle.size());
  for (Eigen::Index i = 0; i < e.size(); ++i) e[i] = std::polar(1.0, s.angle[i]);
  return e;
}

void check_state(const StateVector& state, const Network& network) {
  if (state.magnitude.size() != static_cast<Eigen::Index>(network.node_count()) ||
      state.angle.size() != state.magnitude.size())
    throw DimensionError("state vector does not match the network node count");
}

}  // namespace

Eigen::VectorXcd StateVector::phasors() const {
  Eigen::VectorXcd v(magnitude.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = std::polar(magnitude[i], angle[i]);
  return v;
}

StateVector flat_state(const Network& network) {
  const auto n = static_cast<Eigen::Index>(network.node_count());
  StateVector s{Eigen::VectorXd::Ones(n), Eigen::VectorXd::Zero(n)};
  const double vset = network.buses()[network.slack_bus()].voltage_set;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Node& node = network.nodes()[static_cast<std::size_t>(i)];
    s.angle[i] = reference_angle(node.phase);
    s.magnitude[i] = vset;
  }
  return s;
}

bool MeasurementVector::all_valid() const {
  for (bool v : valid)
    if (!v) return false;
  return true;
}

const char* to_string(ChannelKind kind) {
  switch (kind) {
    case ChannelKind::Pinj: return "Pinj";
    case ChannelKind::Qinj: return "Qinj";
    case ChannelKind::Pflow: return "Pflow";
    case ChannelKind::Qflow: return "Qflow";
    case ChannelKind::Imag: return "Imag";
  }
  return "?";
}

ChannelKind channel_kind_from_string(const std::string& name) {
  for (auto k : {ChannelKind::Pinj, ChannelKind::Qinj, ChannelKind::Pflow, ChannelKind::Qflow,
                 ChannelKind::Imag})
    if (name == to_string(k)) return k;
  throw InvalidArgument("unknown channel kind '" + name + "'");
}

void validate_spec(const MeasurementSpec& spec, const Network& network) {
  MeasurementModel model(network, spec);
  (void)model;
}

// ---------------------------------------------------------------------------

MeasurementModel::MeasurementModel(const Network& network, MeasurementSpec spec)
    : network_(&network), spec_(std::move(spec)), ybus_(build_ybus(network)) {
  for (const Branch& br : network.branches())
    ends_.push_back({network.bus_nodes(*network.bus_position(br.from)),
                     network.bus_nodes(*network.bus_position(br.to))});

  for (const Channel& ch : spec_.channels) {
    ResolvedChannel rc{ch.kind};
    if (ch.kind == ChannelKind::Pinj || ch.kind == ChannelKind::Qinj) {
      try {
        rc.node = network.node_index(ch.element, ch.phase);
      } catch (const GridError& e) {
        throw InvalidArgument(std::string("measurement channel: ") + e.what());
      }
    } else {
      if (ch.element < 0 || static_cast<std::size_t>(ch.element) >= network.branches().size())
        throw InvalidArgument("measurement channel references unknown branch " +
                              std::to_string(ch.element));
      rc.branch = static_cast<std::size_t>(ch.element);
      const Branch& br = network.branches()[rc.branch];
      const auto& phases = network.buses()[*network.bus_position(br.from)].phases;
      Eigen::Index local = -1;
      for (std::size_t k = 0; k < phases.size(); ++k)
        if (phases[k] == ch.phase) local = static_cast<Eigen::Index>(k);
      if (local < 0)
        throw InvalidArgument("measurement channel references missing phase " +
                              std::to_string(ch.phase) + " of branch " + std::to_string(ch.element));
      rc.local = local;
      rc.node = ends_[rc.branch].from[static_cast<std::size_t>(local)];
    }
    resolved_.push_back(rc);
  }
}

Eigen::VectorXcd MeasurementModel::branch_current(const Eigen::VectorXcd& v,
                                                  std::size_t branch) const {
  const Branch& br = network_->branches()[branch];
  const auto& e = ends_[branch];
  const auto p = static_cast<Eigen::Index>(e.from.size());
  Eigen::VectorXcd vf(p), vt(p);
  for (Eigen::Index k = 0; k < p; ++k) {
    vf[k] = v[static_cast<Eigen::Index>(e.from[static_cast<std::size_t>(k)])];
    vt[k] = v[static_cast<Eigen::Index>(e.to[static_cast<std::size_t>(k)])];
  }
  Eigen::VectorXcd current = br.series * (vf - vt);
  if (br.shunt_from) current += *br.shunt_from * vf;
  return current;
}

Eigen::VectorXd MeasurementModel::evaluate(const StateVector& state) const {
  check_state(state, *network_);
  const Eigen::VectorXcd v = state.phasors();
  Eigen::VectorXcd injected_current;
  Eigen::VectorXd z(static_cast<Eigen::Index>(resolved_.size()));
  for (std::size_t c = 0; c < resolved_.size(); ++c) {
    const ResolvedChannel& rc = resolved_[c];
    const auto row = static_cast<Eigen::Index>(c);
    const auto node = static_cast<Eigen::Index>(rc.node);
    switch (rc.kind) {
      case ChannelKind::Pinj:
      case ChannelKind::Qinj: {
        if (injected_current.size() == 0) injected_current = ybus_ * v;
        const Complex s = v[node] * std::conj(injected_current[node]);
        z[row] = rc.kind == ChannelKind::Pinj ? s.real() : s.imag();
        break;
      }
      case ChannelKind::Pflow:
      case ChannelKind::Qflow:
      case ChannelKind::Imag: {
        const Complex i = branch_current(v, rc.branch)[rc.local];
        if (rc.kind == ChannelKind::Imag) {
          z[row] = std::abs(i);
        } else {
          const Complex s = v[node] * std::conj(i);
          z[row] = rc.kind == ChannelKind::Pflow ? s.real() : s.imag();
        }
        break;
      }
    }
  }
  return z;
}

Eigen::MatrixXd MeasurementModel::jacobian(const StateVector& state) const {
  check_state(state, *network_);
  const auto n = static_cast<Eigen::Index>(network_->node_count());
  const Eigen::VectorXcd v = state.phasors();
  const Eigen::VectorXcd e = unit_phasors(state);
  const Eigen::VectorXcd injected_current = ybus_ * v;

  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(resolved_.size()), 2 * n);
  // Complex partials of the channel's underlying phasor quantity with respect
  // to theta_m (first n) and V_m (last n).
  Eigen::VectorXcd ds(2 * n);

  for (std::size_t c = 0; c < resolved_.size(); ++c) {
    const ResolvedChannel& rc = resolved_[c];
    const auto row = static_cast<Eigen::Index>(c);
    const auto i = static_cast<Eigen::Index>(rc.node);
    ds.setZero();

    if (rc.kind == ChannelKind::Pinj || rc.kind == ChannelKind::Qinj) {
      // dS_i/dtheta_m = delta_im j v_i conj(I_i) - j v_i conj(Y_im v_m)
      // dS_i/dV_m     = delta_im e_i conj(I_i) + v_i conj(Y_im e_m)
      for (Eigen::Index m = 0; m < n; ++m) {
        const Complex y = ybus_(i, m);
        if (y == Complex{}) continue;
        ds[m] = -kJ * v[i] * std::conj(y * v[m]);
        ds[n + m] = v[i] * std::conj(y * e[m]);
      }
      ds[i] += kJ * v[i] * std::conj(injected_current[i]);
      ds[n + i] += e[i] * std::conj(injected_current[i]);
      for (Eigen::Index m = 0; m < 2 * n; ++m)
        jac(row, m) = rc.kind == ChannelKind::Pinj ? ds[m].real() : ds[m].imag();
      continue;
    }

    // Branch quantities: dI_k for every endpoint variable, then chain into S or |I|.
    const Branch& br = network_->branches()[rc.branch];
    const auto& ends = ends_[rc.branch];
    const Eigen::Index k = rc.local;
    const Complex current = branch_current(v, rc.branch)[k];
    Eigen::VectorXcd di = Eigen::VectorXcd::Zero(2 * n);
    for (std::size_t l = 0; l < ends.from.size(); ++l) {
      const auto li = static_cast<Eigen::Index>(l);
      const auto f = static_cast<Eigen::Index>(ends.from[l]);
      const auto t = static_cast<Eigen::Index>(ends.to[l]);
      Complex yf = br.series(k, li);
      if (br.shunt_from) yf += (*br.shunt_from)(k, li);
      const Complex ys = br.series(k, li);
      di[f] += yf * kJ * v[f];
      di[n + f] += yf * e[f];
      di[t] -= ys * kJ * v[t];
      di[n + t] -= ys * e[t];
    }

    if (rc.kind == ChannelKind::Imag) {
      const double mag = std::abs(current);
      if (mag == 0.0) continue;
      for (Eigen::Index m = 0; m < 2 * n; ++m)
        jac(row, m) = (std::conj(current) * di[m]).real() / mag;
      continue;
    }

    for (Eigen::Index m = 0; m < 2 * n; ++m) ds[m] = v[i] * std::conj(di[m]);
    ds[i] += kJ * v[i] * std::conj(current);
    ds[n + i] += e[i] * std::conj(current);
    for (Eigen::Index m = 0; m < 2 * n; ++m)
      jac(row, m) = rc.kind == ChannelKind::Pflow ? ds[m].real() : ds[m].imag();
  }
  return jac;
}

std::vector<Eigen::Index> MeasurementModel::free_columns() const {
  const auto n = static_cast<Eigen::Index>(network_->node_count());
  std::vector<Eigen::Index> cols;
  for (std::size_t node : network_->free_nodes()) cols.push_back(static_cast<Eigen::Index>(node));
  for (std::size_t node : network_->free_nodes()) cols.push_back(n + static_cast<Eigen::Index>(node));
  return cols;
}

MeasurementVector evaluate_h(const StateVector& state, const Network& network,
                             const MeasurementSpec& spec) {
  return MeasurementVector{MeasurementModel(network, spec).evaluate(state), {}};
}

Eigen::MatrixXd measurement_jacobian(const StateVector& state, const Network& network,
                                     const MeasurementSpec& spec) {
  return MeasurementModel(network, spec).jacobian(state);
}

Eigen::VectorXcd complex_injections(const StateVector& state, const AdmittanceMatrix& ybus) {
  const Eigen::VectorXcd v = state.phasors();
  return v.cwiseProduct((ybus * v).conjugate());
}

BranchFlow branch_flow(const StateVector& state, const Network& network, std::size_t branch) {
  check_state(state, network);
  if (branch >= network.branches().size()) throw InvalidArgument("unknown branch index");
  const Branch& br = network.branches()[branch];
  const auto f = network.bus_nodes(*network.bus_position(br.from));
  const auto t = network.bus_nodes(*network.bus_position(br.to));
  const Eigen::VectorXcd v = state.phasors();
  const auto p = static_cast<Eigen::Index>(f.size());
  Eigen::VectorXcd vf(p), vt(p);
  for (Eigen::Index k = 0; k < p; ++k) {
    vf[k] = v[static_cast<Eigen::Index>(f[static_cast<std::size_t>(k)])];
    vt[k] = v[static_cast<Eigen::Index>(t[static_cast<std::size_t>(k)])];
  }
  BranchFlow out;
  out.current_from = br.series * (vf - vt);
  out.current_to = br.series * (vt - vf);
  if (br.shunt_from) out.current_from += *br.shunt_from * vf;
  if (br.shunt_to) out.current_to += *br.shunt_to * vt;
  out.power_from = vf.cwiseProduct(out.current_from.conjugate());
  out.power_to = vt.cwiseProduct(out.current_to.conjugate());
  return out;
}

// ---------------------------------------------------------------------------

PowerFlowSolver::PowerFlowSolver(const Network& network)
    : network_(&network), ybus_(build_ybus(network)) {}

PowerFlowSolution PowerFlowSolver::solve(const InjectionVector& injections,
                                         const PowerFlowOptions& options,
                                         const StateVector* initial) const {
  const Network& net = *network_;
  const auto& free = net.free_nodes();
  const auto nf = static_cast<Eigen::Index>(free.size());
  if (injections.p.size() != nf || injections.q.size() != nf)
    throw DimensionError("injection vector does not match the number of non-slack nodes");
  if (!(options.tol > 0.0)) throw InvalidArgument("power-flow tolerance must be positive");

  StateVector state = flat_state(net);
  if (!options.flat_start && initial != nullptr) {
    check_state(*initial, net);
    for (std::size_t node : free) {
      const auto i = static_cast<Eigen::Index>(node);
      state.magnitude[i] = initial->magnitude[i];
      state.angle[i] = initial->angle[i];
    }
  }

  Eigen::VectorXd mismatch(2 * nf);
  auto compute_mismatch = [&]() {
    const Eigen::VectorXcd s = complex_injections(state, ybus_);
    for (Eigen::Index k = 0; k < nf; ++k) {
      const Complex sk = s[static_cast<Eigen::Index>(free[static_cast<std::size_t>(k)])];
      mismatch[k] = injections.p[k] - sk.real();
      mismatch[nf + k] = injections.q[k] - sk.imag();
    }
    return mismatch.size() == 0 ? 0.0 : mismatch.cwiseAbs().maxCoeff();
  };

  double worst = compute_mismatch();
  int iter = 0;
  Eigen::MatrixXd jac(2 * nf, 2 * nf);
  while (!(worst < options.tol)) {
    if (!std::isfinite(worst) || iter >= options.max_iter) {
      std::ostringstream msg;
      msg << "power flow did not converge after " << iter << " iterations (max mismatch "
          << worst << " pu)";
      throw ConvergenceError(msg.str(), worst, iter);
    }
    const Eigen::VectorXcd v = state.phasors();
    const Eigen::VectorXcd e = unit_phasors(state);
    const Eigen::VectorXcd current = ybus_ * v;
    // dS/dtheta = j diag(v) conj(diag(I) - Y diag(v)),
    // dS/dV     = diag(v) conj(Y diag(e)) + diag(conj(I) e)
    for (Eigen::Index r = 0; r < nf; ++r) {
      const auto i = static_cast<Eigen::Index>(free[static_cast<std::size_t>(r)]);
      for (Eigen::Index c = 0; c < nf; ++c) {
        const auto m = static_cast<Eigen::Index>(free[static_cast<std::size_t>(c)]);
        const Complex y = ybus_(i, m);
        Complex d_theta = -kJ * v[i] * std::conj(y * v[m]);
        Complex d_mag = v[i] * std::conj(y * e[m]);
        if (i == m) {
          d_theta += kJ * v[i] * std::conj(current[i]);
          d_mag += e[i] * std::conj(current[i]);
        }
        jac(r, c) = d_theta.real();
        jac(r, nf + c) = d_mag.real();
        jac(nf + r, c) = d_theta.imag();
        jac(nf + r, nf + c) = d_mag.imag();
      }
    }
    Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
    if (!(lu.rcond() > 1e-14))
      throw SingularMatrixError("power-flow Jacobian is singular at iteration " +
                                std::to_string(iter));
    const Eigen::VectorXd step = lu.solve(mismatch);
    for (Eigen::Index k = 0; k < nf; ++k) {
      const auto i = static_cast<Eigen::Index>(free[static_cast<std::size_t>(k)]);
      state.angle[i] += step[k];
      state.magnitude[i] += step[nf + k];
    }
    ++iter;
    if ((state.magnitude.array() <= 0.0).any()) {
      worst = std::numeric_limits<double>::infinity();
      continue;
    }
    worst = compute_mismatch();
  }
  return PowerFlowSolution{std::move(state), iter, worst};
}

PowerFlowSolution solve_powerflow(const Network& network, const InjectionVector& injections,
                                  const PowerFlowOptions& options) {
  return PowerFlowSolver(network).solve(injections, options);
}

}  // namespace bse
