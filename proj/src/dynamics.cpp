#include "looplab/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <optional>

#include "looplab/linalg.hpp"
#include "looplab/rng.hpp"

namespace looplab {

std::string_view to_string(TrajectoryStatus status) {
  switch (status) {
    case TrajectoryStatus::converged: return "converged";
    case TrajectoryStatus::cycling: return "cycling";
    case TrajectoryStatus::diverged: return "diverged";
    case TrajectoryStatus::max_iters: return "max_iters";
  }
  return "?";
}

std::string_view to_string(FixedPointClass c) {
  switch (c) {
    case FixedPointClass::attracting: return "attracting";
    case FixedPointClass::repelling: return "repelling";
    case FixedPointClass::marginal: return "marginal";
  }
  return "?";
}

namespace {

// A revisit only counts as a cycle while the state is still moving; an
// oscillating but converging sequence also returns close to x_{t-2}.
constexpr double kCycleMotionFactor = 1e3;

bool try_step(const LoopedNet& net, const StateMatrix& x, const StateMatrix& x0, StateMatrix& out) {
  try {
    out = step(net, x, x0);
    return true;
  } catch (const NumericOverflowError&) {
    return false;
  }
}

std::optional<StepJacobians> try_jacobians(const LoopedNet& net, const StateMatrix& x, const StateMatrix& x0) {
  try {
    StepJacobians j = step_jacobians(net, x, x0);
    if (!j.j_state.all_finite() || !j.j_input.all_finite()) return std::nullopt;
    return j;
  } catch (const NumericOverflowError&) {
    return std::nullopt;
  }
}

}  // namespace

Trajectory run_trajectory(const LoopedNet& net, const StateMatrix& x0, const StateMatrix& e,
                          std::size_t max_iters, const TrajectoryTolerances& tols) {
  if (max_iters < 1) throw PreconditionError("run_trajectory: max_iters must be >= 1");
  if (tols.cycle_buffer < 1) throw PreconditionError("run_trajectory: cycle_buffer must be >= 1");
  Trajectory traj;
  StateMatrix x;
  traj.iterations = 1;
  if (!try_step(net, e, x0, x)) {
    traj.status = TrajectoryStatus::diverged;
    traj.iterates_kept.push_back(e);
    return traj;
  }
  traj.divergence_threshold = tols.divergence_factor * std::max(frobenius_norm(x), 1.0);
  traj.iterates_kept.push_back(x);
  std::size_t streak = 0;

  for (std::size_t t = 1; t < max_iters; ++t) {
    StateMatrix next;
    ++traj.iterations;
    if (!try_step(net, x, x0, next)) {
      traj.status = TrajectoryStatus::diverged;
      return traj;
    }
    const double residual = frobenius_norm(next - x);
    traj.residuals.push_back(residual);
    if (frobenius_norm(next) > traj.divergence_threshold) {
      traj.status = TrajectoryStatus::diverged;
      traj.iterates_kept.push_back(std::move(next));
      return traj;
    }
    streak = residual < tols.tol_converge ? streak + 1 : 0;
    if (streak >= tols.converge_streak) {
      traj.status = TrajectoryStatus::converged;
      traj.t_converged = t + 1;
      traj.iterates_kept.push_back(std::move(next));
      return traj;
    }
    if (residual > kCycleMotionFactor * tols.tol_cycle) {
      // iterates_kept.back() is x_t, so x_{t+1-p} is at index kept - p.
      const std::size_t kept = traj.iterates_kept.size();
      for (std::size_t p = 2; p <= kept; ++p) {
        if (frobenius_norm(next - traj.iterates_kept[kept - p]) <= tols.tol_cycle) {
          traj.status = TrajectoryStatus::cycling;
          traj.period = p;
          traj.iterates_kept.push_back(std::move(next));
          return traj;
        }
      }
    }
    traj.iterates_kept.push_back(next);
    if (traj.iterates_kept.size() > tols.cycle_buffer) traj.iterates_kept.pop_front();
    x = std::move(next);
  }
  traj.status = TrajectoryStatus::max_iters;
  return traj;
}

Matrix stability_matrix(const LoopedNet& net, const StateMatrix& x_star, const StateMatrix& x0) {
  if (net.config().norm != NormMode::none)
    throw PreconditionError("stability_matrix: only defined for norm_mode none");
  const SublayerJacobians s = sublayer_jacobians(net, x_star, x0);
  const Matrix eye = Matrix::identity(x_star.size());
  switch (net.config().recall) {
    case RecallMode::external: return (eye + s.h2) * (eye + s.h1) * s.recall_state;
    case RecallMode::internal: return (eye + s.h2 * s.recall_state) * (eye + s.h1 * s.recall_state);
    case RecallMode::autonomous: return (eye + s.h2) * (eye + s.h1);
  }
  return {};
}

FixedPointReport classify_fixed_point(const LoopedNet& net, const StateMatrix& x_star, const StateMatrix& x0,
                                      double class_margin, double fp_residual_tol) {
  FixedPointReport report;
  report.x_star = x_star;
  report.residual = frobenius_norm(step(net, x_star, x0) - x_star);
  if (!(report.residual <= fp_residual_tol))
    throw PreconditionError("classify_fixed_point: residual " + std::to_string(report.residual) +
                            " exceeds tolerance");
  report.rho = spectral_radius(step_jacobians(net, x_star, x0).j_state);
  if (report.rho < 1.0 - class_margin)
    report.classification = FixedPointClass::attracting;
  else if (report.rho > 1.0 + class_margin)
    report.classification = FixedPointClass::repelling;
  else
    report.classification = FixedPointClass::marginal;
  if (net.config().norm == NormMode::none) report.m_rho = spectral_radius(stability_matrix(net, x_star, x0));
  return report;
}

Matrix input_gradient_unrolled(const LoopedNet& net, const StateMatrix& x0, const StateMatrix& e, std::size_t T) {
  if (T < 1) throw PreconditionError("input_gradient_unrolled: T must be >= 1");
  const bool autonomous = !net.config().has_recall();
  StateMatrix x;
  Matrix v;
  std::size_t start;
  if (autonomous) {
    x = x0;
    v = Matrix::identity(x0.size());
    start = 0;
  } else {
    const auto j = try_jacobians(net, e, x0);
    if (!j || !try_step(net, e, x0, x))
      throw TrajectoryDivergedError("input_gradient_unrolled: overflow at t = 1", Matrix(x0.size(), x0.size()), 0);
    v = j->j_input;
    start = 1;
  }
  for (std::size_t t = start; t < T; ++t) {
    const auto j = try_jacobians(net, x, x0);
    StateMatrix xn;
    Matrix next;
    bool ok = j.has_value();
    if (ok) {
      next = autonomous ? j->j_state * v : j->j_state * v + j->j_input;
      ok = next.all_finite() && try_step(net, x, x0, xn);
    }
    if (!ok) throw TrajectoryDivergedError("input_gradient_unrolled: overflow at t = " + std::to_string(t + 1), v, t);
    v = std::move(next);
    x = std::move(xn);
  }
  return v;
}

Matrix input_gradient_limit(const LoopedNet& net, const StateMatrix& x_star, const StateMatrix& x0) {
  const StepJacobians j = step_jacobians(net, x_star, x0);
  const double rho = spectral_radius(j.j_state);
  if (rho >= 1.0)
    throw RegimeError("input_gradient_limit: rho(J_state) = " + std::to_string(rho) + " >= 1");
  return resolvent_apply(j.j_state, j.j_input);
}

double e_sensitivity(const LoopedNet& net, const StateMatrix& x0, const StateMatrix& e, std::size_t T) {
  if (T < 1) throw PreconditionError("e_sensitivity: T must be >= 1");
  const double inf = std::numeric_limits<double>::infinity();
  const auto j1 = try_jacobians(net, e, x0);
  StateMatrix x;
  if (!j1 || !try_step(net, e, x0, x)) return inf;
  Matrix product = j1->j_state;
  for (std::size_t t = 1; t < T; ++t) {
    const auto j = try_jacobians(net, x, x0);
    if (!j) return inf;
    product = j->j_state * product;
    if (!product.all_finite()) return inf;
    if (max_abs(product) == 0.0) return 0.0;
    StateMatrix xn;
    if (!try_step(net, x, x0, xn)) return inf;
    x = std::move(xn);
  }
  return spectral_norm(product);
}

PerturbationOutcome perturbation_probe(const LoopedNet& net, const StateMatrix& x_star, const StateMatrix& x0,
                                       std::size_t trials, std::uint64_t seed, double delta_norm,
                                       double escape_radius, double reconverge_tol, std::size_t max_iters) {
  std::vector<char> reconverged(trials, 0), escaped(trials, 0);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < trials; ++i) {
    Rng rng = Rng::substream(seed, i, 0);
    StateMatrix delta = Matrix::gaussian(x_star.rows(), x_star.cols(), rng);
    delta *= delta_norm / frobenius_norm(delta);
    StateMatrix x = x_star + delta;
    for (std::size_t t = 0; t < max_iters; ++t) {
      StateMatrix next;
      if (!try_step(net, x, x0, next)) {
        escaped[i] = 1;
        break;
      }
      const double dist = frobenius_norm(next - x_star);
      if (dist > escape_radius) {
        escaped[i] = 1;
        break;
      }
      const double residual = frobenius_norm(next - x);
      x = std::move(next);
      if (residual < 1e-14 * std::max(1.0, frobenius_norm(x))) {
        reconverged[i] = dist <= reconverge_tol;
        break;
      }
      if (t + 1 == max_iters) reconverged[i] = dist <= reconverge_tol;
    }
  }
  PerturbationOutcome out;
  out.trials = trials;
  for (std::size_t i = 0; i < trials; ++i) {
    out.reconverged += reconverged[i];
    out.escaped += escaped[i];
  }
  return out;
}

// ---- linear model ----------------------------------------------------------

Matrix linear_fixed_point(const Matrix& a, const Matrix& b) {
  try {
    return resolvent_apply(a, b);
  } catch (const SingularMatrixError&) {
    throw DegenerateModelError("linear model: I - A is singular, no unique fixed point");
  }
}

DecayFit fit_decay_rate(const Matrix& a, std::size_t t_begin, std::size_t t_end) {
  if (t_end <= t_begin) throw PreconditionError("fit_decay_rate: empty range");
  DecayFit fit;
  fit.log_rho = std::log(spectral_radius(a));
  // Track log ||A^t|| with renormalization so the power never underflows.
  Matrix p = Matrix::identity(a.rows());
  double log_scale = 0.0;
  double st = 0, sy = 0, stt = 0, sty = 0;
  std::size_t n = 0;
  for (std::size_t t = 1; t <= t_end; ++t) {
    p = a * p;
    const double norm = frobenius_norm(p);
    if (norm == 0.0) throw DegenerateModelError("fit_decay_rate: A is nilpotent");
    p *= 1.0 / norm;
    log_scale += std::log(norm);
    if (t >= t_begin) {
      const double tt = static_cast<double>(t);
      st += tt;
      sy += log_scale;
      stt += tt * tt;
      sty += tt * log_scale;
      ++n;
    }
  }
  const double dn = static_cast<double>(n);
  fit.slope = (dn * sty - st * sy) / (dn * stt - st * st);
  return fit;
}

double escape_fraction(const Matrix& a, const Matrix& b, std::size_t n, std::uint64_t seed, double delta,
                       double escape_radius, std::size_t max_iters) {
  const Matrix x_star = linear_fixed_point(a, b);
  std::vector<char> escaped(n, 0);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng::substream(seed, i, 1);
    // Iterate the deviation directly: (A x + b) - x* = A (x - x*).
    Matrix dev = Matrix::gaussian(x_star.rows(), x_star.cols(), rng, delta);
    for (std::size_t t = 0; t < max_iters; ++t) {
      dev = a * dev;
      const double dist = frobenius_norm(dev);
      if (!(dist <= escape_radius)) {
        escaped[i] = 1;
        break;
      }
      if (dist <= 1e-12 * delta) break;  // contracted back onto x*
    }
  }
  std::size_t count = 0;
  for (char c : escaped) count += c;
  return static_cast<double>(count) / static_cast<double>(n);
}

ResolventGrowth resolvent_growth(const Matrix& a, const std::vector<int>& ks) {
  const double rho0 = spectral_radius(a);
  if (rho0 == 0.0) throw DegenerateModelError("resolvent_growth: A has zero spectral radius");
  ResolventGrowth g;
  const Matrix eye = Matrix::identity(a.rows());
  for (int k : ks) {
    const double target = 1.0 - std::pow(10.0, -k);
    const Matrix ak = a * (target / rho0);
    Matrix sens;
    try {
      sens = inverse(ak - eye);  // times df/db = I
    } catch (const SingularMatrixError&) {
      throw DegenerateModelError("resolvent_growth: A_k - I singular at k = " + std::to_string(k));
    }
    g.k.push_back(k);
    g.rho.push_back(target);
    g.sensitivity.push_back(spectral_norm(sens));
    g.normalized.push_back(g.sensitivity.back() * std::pow(10.0, -k));
  }
  return g;
}

RegimeReport autonomous_regime_probe(const Matrix& a, const Matrix& b, Regime target, std::uint64_t seed) {
  linear_fixed_point(a, b);  // raises on degenerate models
  RegimeReport report;
  report.regime = target;
  report.rho = spectral_radius(a);
  switch (target) {
    case Regime::contracting:
      if (report.rho >= 1.0) throw RegimeError("autonomous_regime_probe: contracting case needs rho < 1");
      report.decay = fit_decay_rate(a);
      break;
    case Regime::expanding:
      if (report.rho <= 1.0) throw RegimeError("autonomous_regime_probe: expanding case needs rho > 1");
      report.escape = escape_fraction(a, b, 1000, seed);
      break;
    case Regime::near_unit:
      report.growth = resolvent_growth(a, {1, 2, 3, 4, 5, 6});
      break;
  }
  return report;
}

double unit_eigenvalue_probe(const std::function<Matrix(std::size_t, Rng&)>& sampler, std::size_t n_samples,
                             double tol, std::uint64_t seed) {
  if (n_samples == 0) throw PreconditionError("unit_eigenvalue_probe: n_samples must be >= 1");
  std::vector<char> hit(n_samples, 0);
  // The sampler is user code; draws stay serial so it need not be thread-safe.
  std::vector<Matrix> samples;
  samples.reserve(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    Rng rng = Rng::substream(seed, i, 0);
    samples.push_back(sampler(i, rng));
  }
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n_samples; ++i) {
    for (const auto& ev : eigenvalues(samples[i]))
      if (std::abs(ev - std::complex<double>(1.0, 0.0)) <= tol) {
        hit[i] = 1;
        break;
      }
  }
  std::size_t count = 0;
  for (char c : hit) count += c;
  return static_cast<double>(count) / static_cast<double>(n_samples);
}

Matrix transversality_matrix(const Matrix& x) {
  const std::size_t d = x.rows(), L = x.cols();
  // d(TX)[i, c] / dT[j, k] = delta_ij X[k, c]
  Matrix m(d * L, d * d);
  for (std::size_t c = 0; c < L; ++c)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t k = 0; k < d; ++k) m(c * d + i, i * d + k) = x(k, c);
  return m;
}

bool transversality_rank_check(const Matrix& x, double tol) {
  if (x.cols() > x.rows()) throw PreconditionError("transversality_rank_check: needs L <= d");
  return rank(transversality_matrix(x), tol) == x.size();
}

}  // namespace looplab
