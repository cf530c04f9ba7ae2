#include "bse/wls.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "bse/error.hpp"

namespace bse {

ObservabilityReport check_observability(const Network& network, const MeasurementSpec& spec,
                                        const StateVector* at, double rel_tol) {
  const MeasurementModel model(network, spec);
  const StateVector state = at ? *at : flat_state(network);
  const Eigen::MatrixXd full = model.jacobian(state);
  const auto cols = model.free_columns();
  Eigen::MatrixXd h(full.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) h.col(static_cast<Eigen::Index>(c)) = full.col(cols[c]);

  ObservabilityReport r;
  r.state_dimension = h.cols();
  if (h.rows() == 0 || h.cols() == 0) return r;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(h);
  r.singular_values = svd.singularValues();
  const double cutoff = rel_tol * r.singular_values.maxCoeff();
  for (Eigen::Index i = 0; i < r.singular_values.size(); ++i)
    if (r.singular_values[i] > cutoff) ++r.rank;
  r.observable = r.rank == r.state_dimension;
  return r;
}

WlsSolver::WlsSolver(const Network& network, MeasurementSpec spec)
    : model_(network, std::move(spec)), free_cols_(model_.free_columns()) {}

WlsResult WlsSolver::solve(const Eigen::VectorXd& z, const Eigen::VectorXd& weights,
                           const StateVector& x0, const WlsOptions& options) const {
  const auto m = static_cast<Eigen::Index>(model_.spec().size());
  if (z.size() != m || weights.size() != m) throw DimensionError("WLS: z / weights do not match the measurement spec");
  const Network& net = model_.network();
  const auto& free = net.free_nodes();
  const auto nf = static_cast<Eigen::Index>(free.size());
  const Eigen::VectorXd sqrt_w = weights.cwiseSqrt();

  StateVector x = flat_state(net);
  for (std::size_t node : free) {
    x.magnitude[static_cast<Eigen::Index>(node)] = x0.magnitude[static_cast<Eigen::Index>(node)];
    x.angle[static_cast<Eigen::Index>(node)] = x0.angle[static_cast<Eigen::Index>(node)];
  }

  auto objective = [&](const StateVector& s, Eigen::VectorXd& r) {
    r = z - model_.evaluate(s);
    return weights.dot(r.cwiseAbs2());
  };
  auto shifted = [&](const StateVector& s, const Eigen::VectorXd& dx, double t) {
    StateVector out = s;
    for (Eigen::Index k = 0; k < nf; ++k) {
      const auto i = static_cast<Eigen::Index>(free[static_cast<std::size_t>(k)]);
      out.angle[i] += t * dx[k];
      out.magnitude[i] += t * dx[nf + k];
    }
    return out;
  };

  WlsResult res;
  Eigen::VectorXd r;
  double j = objective(x, r);
  res.objective_trace.push_back(j);
  Eigen::MatrixXd h(m, 2 * nf);
  bool converged = false;
  for (int it = 0; it < options.max_iter; ++it) {
    const Eigen::MatrixXd full = model_.jacobian(x);
    for (Eigen::Index c = 0; c < 2 * nf; ++c)
      h.col(c) = full.col(free_cols_[static_cast<std::size_t>(c)]).cwiseProduct(sqrt_w);
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(h);
    qr.setThreshold(options.rank_tol);
    if (qr.rank() < 2 * nf)
      throw SingularMatrixError("WLS gain matrix is rank deficient (rank " + std::to_string(qr.rank()) +
                                " of " + std::to_string(2 * nf) + "); measurement set is unobservable");
    const Eigen::VectorXd dx = qr.solve(Eigen::VectorXd(r.cwiseProduct(sqrt_w)));

    if (dx.cwiseAbs().maxCoeff() < options.tol) {
      converged = true;
      break;
    }
    double t = 1.0;
    bool accepted = false;
    const double j_before = j;
    for (int halving = 0; halving <= options.max_halvings; ++halving, t *= 0.5) {
      Eigen::VectorXd r_trial;
      StateVector trial = shifted(x, dx, t);
      if ((trial.magnitude.array() <= 0.0).any()) continue;
      const double j_trial = objective(trial, r_trial);
      if (j_trial <= j) {
        x = std::move(trial);
        r = std::move(r_trial);
        j = j_trial;
        accepted = true;
        break;
      }
    }
    res.objective_trace.push_back(j);
    ++res.iterations;
    if (!accepted || t * dx.cwiseAbs().maxCoeff() < options.tol ||
        j_before - j <= options.stall_rtol * j_before) {
      // No descent along the Gauss-Newton direction: stationary to working precision.
      converged = true;
      break;
    }
  }
  if (!converged && options.throw_on_max_iter) {
    std::ostringstream msg;
    msg << "WLS did not converge in " << options.max_iter << " iterations (objective " << j << ")";
    throw ConvergenceError(msg.str(), j, res.iterations);
  }
  res.state = std::move(x);
  res.residual = std::move(r);
  res.weights = weights;
  res.objective = j;
  res.converged = converged;
  return res;
}

WlsResult wls_solve(const Network& network, const MeasurementVector& z, const MeasurementSpec& spec,
                    const Eigen::VectorXd& weights, const StateVector& x0, const WlsOptions& options) {
  return WlsSolver(network, spec).solve(z.values, weights, x0, options);
}

// ---------------------------------------------------------------------------

namespace {

void check_history(const ConsumptionHistory& history, int window) {
  if (history.energy.empty()) throw InvalidArgument("consumption history is empty");
  if (window < 1) throw InvalidArgument("pseudo-measurement window must be at least 1");
  if (history.aggregation < 1) throw InvalidArgument("aggregation factor must be at least 1");
  for (const auto& series : history.energy)
    if (series.size() < static_cast<std::size_t>(window))
      throw InvalidArgument("consumption history is shorter than the window");
}

PseudoMeasurementSet make_pseudo(const Eigen::VectorXd& p, const Network& network,
                                 const PseudoOptions& options) {
  const auto& free = network.free_nodes();
  const auto nf = static_cast<Eigen::Index>(free.size());
  if (p.size() != nf) throw DimensionError("pseudo injections do not match the non-slack nodes");
  PseudoMeasurementSet out;
  out.values.resize(2 * nf);
  const double tan_phi = std::tan(std::acos(options.power_factor));
  for (int pass = 0; pass < 2; ++pass) {
    for (Eigen::Index k = 0; k < nf; ++k) {
      const Node& node = network.nodes()[free[static_cast<std::size_t>(k)]];
      out.spec.channels.push_back(
          {pass == 0 ? ChannelKind::Pinj : ChannelKind::Qinj, network.buses()[node.bus].id, node.phase});
      out.values[pass * nf + k] = pass == 0 ? p[k] : p[k] * tan_phi;
    }
  }
  out.weights = Eigen::VectorXd::Constant(2 * nf, 1.0 / (options.sigma * options.sigma));
  return out;
}

}  // namespace

PseudoMeasurementSet pseudo_avg(const ConsumptionHistory& history, const Network& network,
                                const PseudoOptions& options) {
  check_history(history, options.window);
  Eigen::VectorXd p(static_cast<Eigen::Index>(history.energy.size()));
  for (std::size_t k = 0; k < history.energy.size(); ++k) {
    const auto& e = history.energy[k];
    double sum = 0.0;
    for (std::size_t t = e.size() - static_cast<std::size_t>(options.window); t < e.size(); ++t) sum += e[t];
    p[static_cast<Eigen::Index>(k)] = sum / options.window / history.aggregation;
  }
  return make_pseudo(p, network, options);
}

Eigen::VectorXd pseudo_features(const ConsumptionHistory& history, int window) {
  check_history(history, window);
  const auto w = static_cast<std::size_t>(window);
  Eigen::VectorXd f(static_cast<Eigen::Index>(history.energy.size() * w));
  Eigen::Index i = 0;
  for (const auto& e : history.energy)
    for (std::size_t t = e.size() - w; t < e.size(); ++t) f[i++] = e[t] / history.aggregation;
  return f;
}

PseudoRegressor train_pseudo_regressor(const std::vector<ConsumptionHistory>& histories,
                                       const std::vector<Eigen::VectorXd>& next_injection, int window,
                                       Eigen::Index hidden_width, const nn::TrainConfig& config) {
  if (histories.size() != next_injection.size() || histories.size() < 2)
    throw InvalidArgument("regressor needs matching histories and targets (at least two)");
  const auto n = static_cast<Eigen::Index>(histories.size());
  const Eigen::VectorXd first = pseudo_features(histories.front(), window);
  nn::Dataset all{Eigen::MatrixXd(first.size(), n), Eigen::MatrixXd(next_injection.front().size(), n)};
  for (Eigen::Index k = 0; k < n; ++k) {
    all.inputs.col(k) = pseudo_features(histories[static_cast<std::size_t>(k)], window);
    all.targets.col(k) = next_injection[static_cast<std::size_t>(k)];
  }
  // Hold out the last 20% for early stopping.
  const Eigen::Index n_val = std::max<Eigen::Index>(1, n / 5);
  const Eigen::Index n_train = n - n_val;
  const nn::Dataset train{all.inputs.leftCols(n_train), all.targets.leftCols(n_train)};
  const nn::Dataset val{all.inputs.rightCols(n_val), all.targets.rightCols(n_val)};
  const std::vector<Eigen::Index> hidden{hidden_width};
  auto result = nn::train(train, val, hidden, config);
  return PseudoRegressor{std::move(result.model), std::move(result.scaler), window};
}

PseudoMeasurementSet pseudo_nn(const ConsumptionHistory& history, const PseudoRegressor& regressor,
                               const Network& network, const PseudoOptions& options) {
  const Eigen::VectorXd f = pseudo_features(history, regressor.window);
  if (f.size() != regressor.model.input_size()) throw DimensionError("history does not match the regressor");
  const Eigen::VectorXd scaled = (f - regressor.scaler.input_mean).cwiseQuotient(regressor.scaler.input_std);
  const Eigen::VectorXd p =
      regressor.model.forward(scaled).cwiseProduct(regressor.scaler.target_std) + regressor.scaler.target_mean;
  return make_pseudo(p, network, options);
}

AugmentedProblem augment(const MeasurementSpec& spec, const MeasurementVector& z,
                         const Eigen::VectorXd& weights, const PseudoMeasurementSet& pseudo,
                         const std::vector<bool>* drop) {
  if (z.size() != spec.size() || weights.size() != z.values.size())
    throw DimensionError("augment: z / weights do not match the measurement spec");
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < spec.size(); ++c)
    if (z.is_valid(c) && !(drop && (*drop)[c])) keep.push_back(c);
  AugmentedProblem out;
  const auto total = static_cast<Eigen::Index>(keep.size() + pseudo.spec.size());
  out.z.resize(total);
  out.weights.resize(total);
  Eigen::Index i = 0;
  for (std::size_t c : keep) {
    out.spec.channels.push_back(spec.channels[c]);
    out.z[i] = z.values[static_cast<Eigen::Index>(c)];
    out.weights[i++] = weights[static_cast<Eigen::Index>(c)];
  }
  for (std::size_t c = 0; c < pseudo.spec.size(); ++c) {
    out.spec.channels.push_back(pseudo.spec.channels[c]);
    out.z[i] = pseudo.values[static_cast<Eigen::Index>(c)];
    out.weights[i++] = pseudo.weights[static_cast<Eigen::Index>(c)];
  }
  return out;
}

}  // namespace bse
