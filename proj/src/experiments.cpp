#include "looplab/experiments.hpp"

#include <cmath>
#include <sstream>

#include "looplab/errors.hpp"
#include "looplab/format.hpp"
#include "looplab/rng.hpp"

namespace looplab {

LoopedNet randomized_net(const NetConfig& config, Rng& rng, double bias_scale) {
  NetParams p = LoopedNet::random(config, rng).params();
  for (auto& [name, m] : p.named_tensors(false)) {
    if (name.find("gain") != std::string::npos) {
      for (auto& v : m->data()) v = rng.uniform(0.5, 1.5);
    } else if (name.rfind("b", 0) == 0 || name.find(".b_") != std::string::npos) {
      for (auto& v : m->data()) v = bias_scale * rng.normal();
    }
  }
  return LoopedNet(config, std::move(p));
}

LoopedNet damped_net(const NetConfig& config, Rng& rng, double damping) {
  NetParams p = randomized_net(config, rng).params();
  for (auto& m : p.proj) m *= damping;
  p.w2 *= damping;
  if (config.recall != RecallMode::external) {
    const std::size_t r = config.mix_radius();
    p.mix *= damping;
    p.mix(0, r) = 1.0;
    p.proj[0] -= Matrix::identity(config.d) * 0.5;
    if (config.has_recall()) p.w_x = Matrix::identity(config.d) + p.w_x * 0.2;
  }
  return LoopedNet(config, std::move(p));
}

std::optional<StableNet> find_stable_net(const NetConfig& config, std::uint64_t seed, double rho_max,
                                         double damping, std::size_t attempts) {
  for (std::size_t i = 0; i < attempts; ++i) {
    Rng rng = Rng::substream(seed, i, 0);
    LoopedNet net = damped_net(config, rng, damping);
    StateMatrix x0 = config.has_recall() ? Matrix::gaussian(config.d, config.L, rng) : StateMatrix{};
    const StateMatrix e(config.d, config.L);
    const Trajectory traj = run_trajectory(net, x0, e, 5000);
    if (traj.status != TrajectoryStatus::converged) continue;
    const double rho = spectral_radius(step_jacobians(net, traj.last(), x0).j_state);
    if (rho <= rho_max && rho > 0.05) return StableNet{std::move(net), std::move(x0), traj.last(), rho, i};
  }
  return std::nullopt;
}

// ---- jacobian-check -----------------------------------------------------------

StepJacobians finite_difference_step_jacobians(const LoopedNet& net, const StateMatrix& x_t, const StateMatrix& x0,
                                               double h) {
  const std::size_t d = x_t.rows(), L = x_t.cols(), n = x_t.size();
  auto column_fd = [&](bool wrt_state) {
    Matrix jac(n, n);
    const Matrix base = flatten(wrt_state ? x_t : x0);
    for (std::size_t k = 0; k < n; ++k) {
      Matrix plus = base, minus = base;
      plus[k] += h;
      minus[k] -= h;
      const Matrix fp = flatten(wrt_state ? step(net, unflatten(plus, d, L), x0) : step(net, x_t, unflatten(plus, d, L)));
      const Matrix fm =
          flatten(wrt_state ? step(net, unflatten(minus, d, L), x0) : step(net, x_t, unflatten(minus, d, L)));
      for (std::size_t i = 0; i < n; ++i) jac(i, k) = (fp[i] - fm[i]) / (2.0 * h);
    }
    return jac;
  };
  StepJacobians out;
  out.j_state = column_fd(true);
  out.j_input = net.config().has_recall() ? column_fd(false) : Matrix(n, n);
  return out;
}

namespace {

double relative_error(const Matrix& analytic, const Matrix& fd) {
  double worst = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i) worst = std::max(worst, std::abs(analytic[i] - fd[i]));
  return worst / std::max(max_abs(fd), 1e-12);
}

std::string csv_bool(bool b) { return b ? "1" : "0"; }

}  // namespace

std::vector<JacobianCheckRow> jacobian_check(const std::vector<NetConfig>& configs, std::size_t trials,
                                             std::uint64_t seed) {
  std::vector<JacobianCheckRow> rows(configs.size() * trials);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t idx = 0; idx < rows.size(); ++idx) {
    const std::size_t p = idx / trials, t = idx % trials;
    const NetConfig& c = configs[p];
    Rng rng = Rng::substream(seed, p, t);
    const LoopedNet net = randomized_net(c, rng);
    const StateMatrix x = Matrix::gaussian(c.d, c.L, rng);
    const StateMatrix x0 = c.has_recall() ? Matrix::gaussian(c.d, c.L, rng) : StateMatrix{};
    const StepJacobians analytic = step_jacobians(net, x, x0);
    const StepJacobians fd = finite_difference_step_jacobians(net, x, x0);
    JacobianCheckRow& row = rows[idx];
    row.recall = c.recall;
    row.norm = c.norm;
    row.trial = t;
    row.state_error = relative_error(analytic.j_state, fd.j_state);
    row.input_error = c.has_recall() ? relative_error(analytic.j_input, fd.j_input) : 0.0;
  }
  return rows;
}

std::string jacobian_check_csv(const std::vector<JacobianCheckRow>& rows) {
  std::ostringstream out;
  out << "recall,norm,trial,state_error,input_error\n";
  for (const auto& r : rows)
    out << to_string(r.recall) << ',' << to_string(r.norm) << ',' << r.trial << ',' << fmt17(r.state_error) << ','
        << fmt17(r.input_error) << '\n';
  return out.str();
}

// ---- fixed-point ----------------------------------------------------------------

FixedPointRun fixed_point_run(const LoopedNet& net, const StateMatrix& x0, const StateMatrix& e,
                              std::size_t max_iters, const TrajectoryTolerances& tols) {
  FixedPointRun run;
  run.trajectory = run_trajectory(net, x0, e, max_iters, tols);
  if (run.trajectory.status == TrajectoryStatus::converged)
    run.report = classify_fixed_point(net, run.trajectory.last(), x0);
  return run;
}

std::string fixed_point_csv(const LoopedNet& net, const FixedPointRun& run) {
  const Trajectory& t = run.trajectory;
  std::ostringstream out;
  out << "recall,norm,status,iterations,t_converged,final_residual,period,residual,rho,classification,m_rho,"
         "m_consistent\n";
  out << to_string(net.config().recall) << ',' << to_string(net.config().norm) << ',' << to_string(t.status) << ','
      << t.iterations << ',' << (t.t_converged ? std::to_string(*t.t_converged) : "") << ','
      << (t.residuals.empty() ? "" : fmt17(t.residuals.back())) << ',' << t.period << ',';
  if (run.report) {
    const FixedPointReport& r = *run.report;
    out << fmt17(r.residual) << ',' << fmt17(r.rho) << ',' << to_string(r.classification) << ','
        << (r.m_rho ? fmt17(*r.m_rho) : "") << ',' << csv_bool(r.m_consistent()) << '\n';
  } else {
    out << ",,,,\n";
  }
  return out.str();
}

// ---- grad-limit --------------------------------------------------------------------

GradLimitRow grad_limit_check(const LoopedNet& net, const StateMatrix& x0, const StateMatrix& x_star, std::size_t T,
                              double rel_tol) {
  GradLimitRow row;
  row.rho = spectral_radius(step_jacobians(net, x_star, x0).j_state);
  const Matrix limit = input_gradient_limit(net, x_star, x0);
  const StateMatrix e(net.d(), x_star.cols());
  const Matrix unrolled = input_gradient_unrolled(net, x0, e, T);
  row.limit_norm = frobenius_norm(limit);
  row.difference = frobenius_norm(unrolled - limit);
  row.bound = rel_tol * (1.0 + row.limit_norm);
  return row;
}

std::vector<GradLimitRow> grad_limit_experiment(const NetConfig& config, std::size_t nets, std::size_t T,
                                                std::uint64_t seed, double rho_max, double rel_tol) {
  if (!config.has_recall()) throw PreconditionError("grad_limit_experiment: needs a recall net");
  std::vector<GradLimitRow> rows;
  for (std::size_t i = 0; i < nets; ++i) {
    const auto found = find_stable_net(config, Rng::substream(seed, 7, i).next_u64(), rho_max);
    if (!found) throw RegimeError("grad_limit_experiment: no stable net found for index " + std::to_string(i));
    GradLimitRow row = grad_limit_check(found->net, found->x0, found->x_star, T, rel_tol);
    row.net = i;
    row.attempt = found->attempt;
    rows.push_back(row);
  }
  return rows;
}

std::string grad_limit_csv(const std::vector<GradLimitRow>& rows) {
  std::ostringstream out;
  out << "net,attempt,rho,limit_norm,difference,bound,pass\n";
  for (const auto& r : rows)
    out << r.net << ',' << r.attempt << ',' << fmt17(r.rho) << ',' << fmt17(r.limit_norm) << ','
        << fmt17(r.difference) << ',' << fmt17(r.bound) << ',' << csv_bool(r.passed()) << '\n';
  return out.str();
}

// ---- autonomous-regimes ---------------------------------------------------------------

std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::contracting: return "contracting";
    case Regime::expanding: return "expanding";
    case Regime::near_unit: return "near-unit";
  }
  return "?";
}

Regime parse_regime(std::string_view text) {
  for (Regime r : {Regime::contracting, Regime::expanding, Regime::near_unit})
    if (to_string(r) == text) return r;
  throw PreconditionError("unknown regime: " + std::string(text));
}

Matrix random_matrix_with_radius(std::size_t d, double rho, Rng& rng) {
  for (;;) {
    const Matrix a = Matrix::gaussian(d, d, rng);
    const double r = spectral_radius(a);
    if (r > 1e-3) return a * (rho / r);
  }
}

std::vector<RegimeRow> regime_experiment(const std::vector<Regime>& regimes, std::size_t nets, std::size_t d,
                                         std::uint64_t seed) {
  if (d < 2) throw PreconditionError("regime_experiment: d must be >= 2");
  std::vector<RegimeRow> rows;
  for (Regime regime : regimes) {
    for (std::size_t i = 0; i < nets; ++i) {
      Rng rng = Rng::substream(seed, static_cast<std::uint64_t>(regime), i);
      const Matrix b = Matrix::gaussian(d, 1, rng);
      RegimeRow row;
      row.regime = regime;
      row.net = i;
      switch (regime) {
        case Regime::contracting: {
          const Matrix a = random_matrix_with_radius(d, rng.uniform(0.3, 0.9), rng);
          const RegimeReport rep = autonomous_regime_probe(a, b, regime, rng.next_u64());
          row.rho = rep.rho;
          row.value = rep.decay->slope;
          row.reference = rep.decay->log_rho;
          row.passed = rep.decay->relative_error() <= 0.05;
          rows.push_back(row);
          break;
        }
        case Regime::expanding: {
          const Matrix a = random_matrix_with_radius(d, rng.uniform(1.1, 2.0), rng);
          const RegimeReport rep = autonomous_regime_probe(a, b, regime, rng.next_u64());
          row.rho = rep.rho;
          row.value = *rep.escape;
          row.reference = 1.0;
          row.passed = *rep.escape >= 0.999;
          rows.push_back(row);
          break;
        }
        case Regime::near_unit: {
          std::vector<double> diag(d);
          diag[0] = 0.95;  // resolvent_growth rescales toward 1
          for (std::size_t k = 1; k < d; ++k) diag[k] = rng.uniform(-0.9, 0.9);
          const Matrix q = Matrix::orthogonal(d, d, rng);
          const Matrix a = q * Matrix::diagonal(diag) * q.transpose();
          const RegimeReport rep = autonomous_regime_probe(a, b, regime, rng.next_u64());
          const ResolventGrowth& g = *rep.growth;
          for (std::size_t j = 0; j < g.k.size(); ++j) {
            RegimeRow r = row;
            r.k = g.k[j];
            r.rho = g.rho[j];
            r.value = g.normalized[j];
            r.reference = 1.0;
            r.passed = g.normalized[j] >= 0.5 && g.normalized[j] <= 2.0;
            rows.push_back(r);
          }
          break;
        }
      }
    }
  }
  return rows;
}

std::string regime_csv(const std::vector<RegimeRow>& rows) {
  std::ostringstream out;
  out << "regime,net,k,rho,value,reference,pass\n";
  for (const auto& r : rows)
    out << to_string(r.regime) << ',' << r.net << ',' << r.k << ',' << fmt17(r.rho) << ',' << fmt17(r.value) << ','
        << fmt17(r.reference) << ',' << csv_bool(r.passed) << '\n';
  return out.str();
}

}  // namespace looplab
