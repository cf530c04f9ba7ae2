// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "bse/bad_data.hpp"
#include "bse/experiment.hpp"
#include "bse/injection.hpp"
#include "bse/io.hpp"
#include "bse/nn.hpp"
#include "bse/powerflow.hpp"
#include "bse/pruning.hpp"
#include "support.hpp"

using namespace bse;
using bse::testing::data_path;
using bse::testing::fixture;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Check {
  bool ok = true;
  std::ostringstream msg;
  void expect(bool cond, const std::string& what) {
    if (!msg.str().empty()) msg << "; ";
    msg << what << (cond ? "" : " [violated]");
    ok = ok && cond;
  }
  Outcome done() const { return {ok, msg.str()}; }
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

int failures = 0;

void report(int id, const std::string& name, double limit_seconds, const std::function<Outcome()>& fn,
            double extra_seconds = 0.0) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() + extra_seconds;
  if (secs > limit_seconds) {
    o.pass = false;
    o.detail += "; runtime " + fmt(secs, 3) + " s over " + fmt(limit_seconds, 3) + " s";
  }
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << "  " << name << "  (" << o.detail << ", "
            << fmt(secs, 3) << " s)" << std::endl;
}

// ---------------------------------------------------------------------------

Outcome detection_table() {
  Check c;
  const double expected[] = {0.695, 0.845, 0.921};
  const double ratios[] = {5.0, 10.0, 20.0};
  for (int k = 0; k < 3; ++k) {
    const double p = detection_probability(0.05, ratios[k]);
    c.expect(std::abs(p - expected[k]) <= 5e-4, "r=" + fmt(ratios[k]) + ": " + fmt(p, 6) + " vs " + fmt(expected[k]));
  }
  return c.done();
}

Outcome wald_calibration() {
  Rng rng(20240611);
  const int channels = 5, n = 10000;
  Eigen::VectorXd mu(channels), sd(channels);
  for (int i = 0; i < channels; ++i) {
    mu(i) = rng.normal(0.0, 1.0);
    sd(i) = 0.1 + rng.uniform();
  }
  auto draw = [&](double scale) {
    Eigen::VectorXd z(channels);
    for (int i = 0; i < channels; ++i) z(i) = mu(i) + scale * sd(i) * rng.normal();
    return MeasurementVector{z, {}};
  };
  std::vector<MeasurementVector> h0;
  for (int k = 0; k < n; ++k) h0.push_back(draw(1.0));
  const H0Stats stats = estimate_h0_stats(h0);
  long alarms = 0, hits = 0;
  for (int k = 0; k < n; ++k) {
    for (bool f : wald_detect(draw(1.0), stats, {0.05})) alarms += f;
    for (bool f : wald_detect(draw(10.0), stats, {0.05})) hits += f;
  }
  const double fa = double(alarms) / (double(n) * channels), dr = double(hits) / (double(n) * channels);
  Check c;
  c.expect(std::abs(fa - 0.05) <= 0.015, "false alarm " + fmt(100 * fa, 4) + "%");
  c.expect(std::abs(dr - 0.845) <= 0.02, "detection r=10 " + fmt(100 * dr, 4) + "%");
  return c.done();
}

// Fast process: each slow interval picks a component, then T steps of its
// mean plus a stationary AR(1) deviation.
Outcome downscaling() {
  Check c;
  double worst_iid = 0.0;
  for (int t = 1; t <= 100; ++t)
    for (double v2 : {1.0, 8.0, 0.37})
      worst_iid = std::max(worst_iid, std::abs(downscale_variance({{}, 1.0, 0.0}, t, v2) - v2 / t) / (v2 / t));
  c.expect(worst_iid <= 1e-12, "IID max rel err " + fmt(worst_iid, 3));

  double worst_ar = 0.0;
  for (double a : {-0.6, 0.2, 0.5, 0.9})
    for (int t = 2; t <= 100; ++t) {
      double ratio = t;
      for (int k = 1; k < t; ++k) ratio += 2.0 * (t - k) * std::pow(a, k);
      const double expect = 3.0 / ratio;
      worst_ar = std::max(worst_ar, std::abs(downscale_variance({{a}, 1.0, 0.0}, t, 3.0) - expect) / expect);
    }
  c.expect(worst_ar <= 1e-12, "AR(1) max rel err " + fmt(worst_ar, 3));

  const int t = 24, steps = 100000;
  const double alpha = 0.5;
  const GaussianMixture fast{{0.6, 0.4}, {1.0, 3.0}, {0.04, 0.09}};
  Rng rng(7);
  std::vector<double> slow;
  for (int b = 0; b < steps / t; ++b) {
    const std::size_t comp = rng.uniform() < fast.weights[0] ? 0 : 1;
    const double sd = std::sqrt(fast.variances[comp]);
    double e = rng.normal(0.0, sd), sum = 0.0;
    for (int n = 0; n < t; ++n) {
      if (n > 0) e = alpha * e + rng.normal(0.0, sd * std::sqrt(1.0 - alpha * alpha));
      sum += fast.means[comp] + e;
    }
    slow.push_back(sum);
  }
  // Auxiliary fast trace for the shared AR model.
  std::vector<double> aux(steps);
  double e = 0.0;
  for (double& x : aux) x = e = alpha * e + rng.normal();
  const ARModel ar = fit_ar_ls(aux, 1);
  EmOptions em;
  em.seed = 3;
  const GaussianMixture got = downscale_mixture(fit_gmm_em(slow, 2, em).mixture, std::span(&ar, 1), t);
  const std::size_t lo = got.means[0] < got.means[1] ? 0 : 1;
  for (std::size_t k = 0; k < 2; ++k) {
    const std::size_t g = k == 0 ? lo : 1 - lo;
    const double em_ = std::abs(got.means[g] - fast.means[k]) / fast.means[k];
    const double ev = std::abs(got.variances[g] - fast.variances[k]) / fast.variances[k];
    c.expect(em_ <= 0.05, "component " + std::to_string(k) + " mean err " + fmt(100 * em_, 3) + "%");
    c.expect(ev <= 0.10, "var err " + fmt(100 * ev, 3) + "%");
  }
  return c.done();
}

Outcome numerical_core() {
  Check c;
  Rng rng(99);
  // Gradient check.
  double worst_grad = 0.0;
  for (int net = 0; net < 20; ++net) {
    std::vector<Eigen::Index> dims{2 + net % 4, 3 + net % 5, 2 + net % 3, 1 + net % 2};
    nn::MLP m = nn::init_he(dims, static_cast<std::uint64_t>(net));
    for (auto& l : m.layers())
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = 0.1 * rng.normal();
    Eigen::MatrixXd z(dims.front(), 6), x(dims.back(), 6);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    const nn::Gradient g = nn::backward(m, z, x);
    const double h = 1e-6;
    auto probe = [&](double& p, double analytic) {
      const double saved = p;
      p = saved + h;
      const double up = nn::loss(m, z, x);
      p = saved - h;
      const double dn = nn::loss(m, z, x);
      p = saved;
      const double fd = (up - dn) / (2 * h);
      const double scale = std::max({std::abs(fd), std::abs(analytic), 1e-7});
      worst_grad = std::max(worst_grad, std::abs(fd - analytic) / scale);
    };
    for (std::size_t l = 0; l < m.layers().size(); ++l) {
      for (Eigen::Index i = 0; i < m.layers()[l].weights.size(); ++i)
        probe(m.layers()[l].weights.data()[i], g.weights[l].data()[i]);
      for (Eigen::Index i = 0; i < m.layers()[l].bias.size(); ++i) probe(m.layers()[l].bias(i), g.bias[l](i));
    }
  }
  c.expect(worst_grad < 1e-4, "20 nets, gradient max rel err " + fmt(worst_grad, 3));

  // Jacobian check on every channel kind.
  const Network net = fixture("feeder12.json");
  MeasurementSpec spec = bse::testing::injection_spec(net);
  spec.channels.push_back({ChannelKind::Pinj, 1, 1});
  for (int b = 0; b < static_cast<int>(net.branches().size()); ++b)
    for (ChannelKind k : {ChannelKind::Pflow, ChannelKind::Qflow, ChannelKind::Imag}) spec.channels.push_back({k, b, 1});
  const MeasurementModel model(net, spec);
  double worst_jac = 0.0;
  for (int s = 0; s < 100; ++s) {
    const StateVector x = bse::testing::random_state(net, rng);
    const Eigen::MatrixXd j = model.jacobian(x);
    const auto n = static_cast<Eigen::Index>(x.size());
    for (Eigen::Index col = 0; col < 2 * n; ++col) {
      StateVector up = x, dn = x;
      double& pu = col < n ? up.angle(col) : up.magnitude(col - n);
      double& pd = col < n ? dn.angle(col) : dn.magnitude(col - n);
      pu += 1e-6;
      pd -= 1e-6;
      const Eigen::VectorXd fd = (model.evaluate(up) - model.evaluate(dn)) / 2e-6;
      worst_jac = std::max(worst_jac, ((j.col(col) - fd).array().abs() / fd.array().abs().max(1.0)).maxCoeff());
    }
  }
  c.expect(worst_jac < 1e-6, "100 states, Jacobian max rel err " + fmt(worst_jac, 3));

  // Power-flow round trip.
  double worst_pf = 0.0;
  int draws = 0;
  for (const char* name : {"feeder12.json", "radial4_3ph.json"}) {
    const Network g = fixture(name);
    const PowerFlowSolver solver(g);
    const MeasurementModel inj(g, bse::testing::injection_spec(g));
    const auto nf = static_cast<Eigen::Index>(g.free_nodes().size());
    for (int k = 0; k < 250; ++k, ++draws) {
      InjectionVector s{Eigen::VectorXd(nf), Eigen::VectorXd(nf)};
      for (Eigen::Index i = 0; i < nf; ++i) {
        s.p(i) = -0.08 * rng.uniform() + (rng.uniform() < 0.2 ? 0.1 * rng.uniform() : 0.0);
        s.q(i) = -0.03 * rng.uniform();
      }
      const Eigen::VectorXd z = inj.evaluate(solver.solve(s).state);
      for (Eigen::Index i = 0; i < nf; ++i)
        worst_pf = std::max({worst_pf, std::abs(z(2 * i) - s.p(i)), std::abs(z(2 * i + 1) - s.q(i))});
    }
  }
  c.expect(worst_pf < 10 * PowerFlowOptions{}.tol, std::to_string(draws) + " draws, round trip max err " + fmt(worst_pf, 3));
  return c.done();
}

Outcome em_properties() {
  Check c;
  const std::vector<GaussianMixture> gens{
      {{0.5, 0.5}, {0.0, 10.0}, {1.0, 1.0}},
      {{0.2, 0.3, 0.5}, {-2.0, 0.0, 3.0}, {0.3, 1.0, 0.5}},
      {{0.7, 0.3}, {0.044, 0.059}, {2e-6, 9e-6}},
      {{1.0}, {5.0}, {4.0}},
  };
  int fits = 0, violations = 0;
  for (std::size_t gi = 0; gi < gens.size(); ++gi) {
    Rng rng(100 + gi);
    std::vector<double> x(5000);
    for (double& v : x) v = sample_mixture(gens[gi], rng);
    for (int k = 1; k <= 3; ++k) {
      EmOptions opt;
      opt.seed = gi * 7 + static_cast<std::uint64_t>(k);
      const GmmFit fit = fit_gmm_em(x, k, opt);
      ++fits;
      for (std::size_t i = 1; i < fit.trace.size(); ++i)
        violations += fit.trace[i] < fit.trace[i - 1] - 1e-9 * std::abs(fit.trace[i - 1]);
    }
  }
  c.expect(violations == 0, std::to_string(fits) + " fits, " + std::to_string(violations) + " likelihood decreases");

  Rng rng(2024);
  std::vector<double> x(10000);
  for (double& v : x) v = sample_mixture(gens[0], rng);
  EmOptions opt;
  opt.seed = 1;
  const GaussianMixture g = fit_gmm_em(x, 2, opt).mixture;
  const std::size_t lo = g.means[0] < g.means[1] ? 0 : 1, hi = 1 - lo;
  const double mean_err = std::max(std::abs(g.means[lo]), std::abs(g.means[hi] - 10.0));
  const double w_err = std::max(std::abs(g.weights[lo] - 0.5), std::abs(g.weights[hi] - 0.5));
  c.expect(mean_err <= 0.1, "two-component mean err " + fmt(mean_err, 3));
  c.expect(w_err <= 0.02, "weight err " + fmt(w_err, 3));
  return c.done();
}

Outcome duplicate_merge() {
  Rng rng(5);
  nn::MLP m = nn::init_he(std::vector<Eigen::Index>{6, 16, 16, 4}, 3);
  for (std::size_t l = 0; l < 2; ++l) {
    auto& layer = m.layers()[l];
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias(i) = 0.2 + 0.1 * rng.uniform();
    layer.weights.row(5) = layer.weights.row(2);
    layer.bias(5) = layer.bias(2);
    layer.weights.row(9) = layer.weights.row(2);
    layer.bias(9) = layer.bias(2);
  }
  Eigen::MatrixXd z(6, 1000);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng.normal();
  nn::MLP p = m;
  for (std::size_t l = 0; l < 2; ++l) p = pruning::prune(p, l, pruning::cluster_layer(p.activations(z)[l].transpose(), 1e-9));
  const double dev = (p.forward(z) - m.forward(z)).cwiseAbs().maxCoeff();
  return {dev <= 1e-12 && p.hidden_neurons() == m.hidden_neurons() - 4,
          "duplicate merge " + std::to_string(m.hidden_neurons()) + "->" + std::to_string(p.hidden_neurons()) +
              " neurons, max deviation " + fmt(dev, 3)};
}

double ase_of(const nlohmann::json& report, const std::string& method, const std::string& cs) {
  return report["overall"]["ase"][method][cs].get<double>();
}

bool same_bytes(const std::filesystem::path& a, const std::filesystem::path& b) {
  return std::filesystem::exists(a) && std::filesystem::exists(b) && read_text(a) == read_text(b);
}

}  // namespace

int main() {
  std::cout.setf(std::ios::unitbuf);
  const auto config_path = data_path("configs/desk12.json");

  report(1, "detection-probability table", 1.0, detection_table);
  report(2, "Wald calibration", 30.0, wald_calibration);

  // Criteria 3, 4, 7 and 8 share one desk run.
  std::optional<EvaluationReport> desk;
  std::string desk_error;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    desk = run_experiment(ExperimentConfig::load(config_path), {});
  } catch (const std::exception& e) {
    desk_error = e.what();
  }
  const double desk_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  auto need_desk = [&]() {
    if (!desk) throw std::runtime_error("desk run failed: " + desk_error);
    return desk->report;
  };

  report(3, "estimator ordering (clean)", 300.0, [&] {
    const auto r = need_desk();
    const double bse = ase_of(r, "BSEdnn", "clean"), wp = ase_of(r, "WLSp", "clean"), wn = ase_of(r, "WLSnnp", "clean");
    Check c;
    c.expect(bse < wp && bse < wn, "BSEdnn " + fmt(bse) + ", WLSp " + fmt(wp) + ", WLSnnp " + fmt(wn));
    c.expect(std::min(wp, wn) / bse >= 5.0, "factor " + fmt(std::min(wp, wn) / bse, 3) + "x");
    return c.done();
  }, desk_seconds);

  report(4, "bad-data filtering recovery", 300.0, [&] {
    const auto r = need_desk();
    const double clean = ase_of(r, "BSEdnn", "clean"), bad = ase_of(r, "BSEdnn", "corrupted"),
                 filt = ase_of(r, "BSEdnn", "filtered");
    Check c;
    c.expect(filt <= 1.5 * clean, "filtered/clean " + fmt(filt / clean, 4));
    c.expect(bad > filt, "corrupted " + fmt(bad) + " > filtered " + fmt(filt));
    return c.done();
  }, desk_seconds);

  report(5, "slow-to-fast conversion", 60.0, downscaling);
  report(6, "numerical core", 120.0, numerical_core);

  report(7, "pruning", 600.0, [&] {
    need_desk();
    Outcome dup = duplicate_merge();
    Check c;
    c.expect(dup.pass, dup.detail);
    if (!desk->pruning) {
      c.expect(false, "no pruning summary");
      return c.done();
    }
    const PruningSummary& p = *desk->pruning;
    c.expect(p.neurons_after < p.neurons_before,
             "neurons " + std::to_string(p.neurons_before) + "->" + std::to_string(p.neurons_after));
    c.expect(p.validation_ase_after <= 1.1 * p.validation_ase_before,
             "validation ASE " + fmt(p.validation_ase_before) + "->" + fmt(p.validation_ase_after));
    return c.done();
  }, desk_seconds);

  report(8, "latency ordering", 60.0, [&] {
    need_desk();
    Check c;
    const LatencyReport& t = desk->latency;
    if (!desk->latency_pruned) {
      c.expect(false, "no pruned-model latency");
      return c.done();
    }
    const LatencyReport& p = *desk->latency_pruned;
    c.expect(p.ratio() >= 100.0, "pruned model: NN " + fmt(p.nn_median_seconds * 1e6, 3) + " us vs WLS " +
                                     fmt(p.wls_median_seconds * 1e6, 3) + " us, " + fmt(p.ratio(), 3) + "x");
    std::ostringstream trained;
    trained << "trained model: " << fmt(t.ratio(), 3) << "x";
    c.msg << "; " << trained.str();
    return c.done();
  });

  report(9, "determinism", 2.0 * desk_seconds, [&] {
    const auto base = std::filesystem::temp_directory_path() / "bse_acceptance_determinism";
    std::filesystem::remove_all(base);
    const std::uint64_t seed = 20240611;
#ifdef BSE_CLI
    for (const char* run : {"a", "b"}) {
      const std::string cmd = std::string("\"") + BSE_CLI + "\" --config \"" + config_path.string() + "\" --seed " +
                              std::to_string(seed) + " --out \"" + (base / run).string() + "\" run > /dev/null";
      if (std::system(cmd.c_str()) != 0) return Outcome{false, "CLI run failed: " + cmd};
    }
    const bool same = same_bytes(base / "a" / "report.json", base / "b" / "report.json");
    const std::string how = "bse run twice";
#else
    ExperimentConfig cfg = ExperimentConfig::load(config_path);
    cfg.seed = seed;
    run_experiment(cfg, base / "a");
    run_experiment(cfg, base / "b");
    const bool same = same_bytes(base / "a" / "report.json", base / "b" / "report.json");
    const std::string how = "run_experiment twice";
#endif
    const std::string hash = same ? fnv1a_hex(read_text(base / "a" / "report.json")) : std::string("-");
    std::filesystem::remove_all(base);
    return Outcome{same, how + ", report.json " + (same ? "identical (fnv1a " + hash + ")" : "differs")};
  });

  report(10, "EM properties", 60.0, em_properties);

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
