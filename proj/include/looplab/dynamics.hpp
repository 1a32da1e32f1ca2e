#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "looplab/errors.hpp"
#include "looplab/netcore.hpp"

namespace looplab {

struct TrajectoryTolerances {
  double tol_converge = 1e-10;        // absolute, Frobenius
  std::size_t converge_streak = 3;    // consecutive steps below tol_converge
  double tol_cycle = 1e-8;
  std::size_t cycle_buffer = 64;
  double divergence_factor = 1e6;     // threshold = factor * max(||x_1||, 1)
};

enum class TrajectoryStatus { converged, cycling, diverged, max_iters };
std::string_view to_string(TrajectoryStatus status);

struct Trajectory {
  TrajectoryStatus status = TrajectoryStatus::max_iters;
  std::deque<StateMatrix> iterates_kept;  // newest at the back
  std::optional<std::size_t> t_converged;
  std::vector<double> residuals;          // residuals[t - 1] = ||x_{t+1} - x_t||
  std::size_t period = 0;                 // set when cycling
  std::size_t iterations = 0;             // number of step() calls made
  double divergence_threshold = 0.0;

  /// Last finite iterate.
  const StateMatrix& last() const { return iterates_kept.back(); }
};

/// x_1 = step(e, x0), x_{t+1} = step(x_t, x0) until converged, cycling,
/// diverged or max_iters. A non-finite step counts as diverged.
Trajectory run_trajectory(const LoopedNet& net, const StateMatrix& x0, const StateMatrix& e,
                          std::size_t max_iters, const TrajectoryTolerances& tols = {});

enum class FixedPointClass { attracting, repelling, marginal };
std::string_view to_string(FixedPointClass c);

inline constexpr double kClassMargin = 1e-3;
inline constexpr double kFixedPointResidualTol = 1e-8;
inline constexpr double kStabilityMatrixTol = 1e-8;

struct FixedPointReport {
  StateMatrix x_star;
  double residual = 0.0;
  double rho = 0.0;
  FixedPointClass classification = FixedPointClass::marginal;
  /// rho of the stability matrix rebuilt from sublayer Jacobians (norm none only).
  std::optional<double> m_rho;
  bool m_consistent() const { return !m_rho || std::abs(*m_rho - rho) <= kStabilityMatrixTol; }
};

/// Stability matrix from sublayer Jacobians when norm_mode = none:
/// external (I + Jh2)(I + Jh1) Jgx, internal (I + Jh2 Jgx)(I + Jh1 Jgx),
/// autonomous (I + Jh2)(I + Jh1).
Matrix stability_matrix(const LoopedNet& net, const StateMatrix& x_star, const StateMatrix& x0);

/// Throws PreconditionError if x_star is not a fixed point within fp_residual_tol.
FixedPointReport classify_fixed_point(const LoopedNet& net, const StateMatrix& x_star, const StateMatrix& x0,
                                      double class_margin = kClassMargin,
                                      double fp_residual_tol = kFixedPointResidualTol);

/// Raised when a trajectory leaves the finite range mid-propagation.
class TrajectoryDivergedError : public Error {
 public:
  TrajectoryDivergedError(const std::string& what, Matrix last_finite, std::size_t t)
      : Error(what), last_finite_(std::move(last_finite)), t_(t) {}
  const Matrix& last_finite() const noexcept { return last_finite_; }
  std::size_t iteration() const noexcept { return t_; }

 private:
  Matrix last_finite_;
  std::size_t t_;
};

/// dx_T/dx0 by forward propagation V_t = J_state V_{t-1} + J_input.
/// For autonomous nets x0 is the starting state (x_0 = x0, V_0 = I) and the
/// result is the product of the T state Jacobians.
Matrix input_gradient_unrolled(const LoopedNet& net, const StateMatrix& x0, const StateMatrix& e, std::size_t T);

/// (I - J_state)^-1 J_input at x*. Throws RegimeError when rho(J_state) >= 1.
Matrix input_gradient_limit(const LoopedNet& net, const StateMatrix& x_star, const StateMatrix& x0);

/// || J_state(x_{T-1}) ... J_state(x_1) * dx_1/de ||_2. Returns +inf if the
/// trajectory overflows.
double e_sensitivity(const LoopedNet& net, const StateMatrix& x0, const StateMatrix& e, std::size_t T);

struct PerturbationOutcome {
  std::size_t trials = 0;
  std::size_t reconverged = 0;  // converged back to within reconverge_tol of x*
  std::size_t escaped = 0;      // left the escape_radius ball
};

/// Starts `trials` trajectories at x* + delta with ||delta|| = delta_norm.
/// Trial i draws from Rng::substream(seed, i, 0).
PerturbationOutcome perturbation_probe(const LoopedNet& net, const StateMatrix& x_star, const StateMatrix& x0,
                                       std::size_t trials, std::uint64_t seed, double delta_norm = 1e-3,
                                       double escape_radius = 1e-2, double reconverge_tol = 1e-6,
                                       std::size_t max_iters = 5000);

// ---- linear autonomous model f(x) = A x + b ---------------------------------

/// (I - A)^-1 b. Throws DegenerateModelError when I - A is singular.
Matrix linear_fixed_point(const Matrix& a, const Matrix& b);

struct DecayFit {
  double slope = 0.0;      // fitted d/dT log ||A^T||
  double log_rho = 0.0;
  double relative_error() const { return std::abs(slope - log_rho) / std::abs(log_rho); }
};
/// Least-squares slope of log ||A^T||_F over T in [t_begin, t_end].
DecayFit fit_decay_rate(const Matrix& a, std::size_t t_begin = 200, std::size_t t_end = 1000);

/// Fraction of n Gaussian perturbations of x* (scale delta) that leave the
/// escape_radius ball within max_iters steps of x -> A x + b.
double escape_fraction(const Matrix& a, const Matrix& b, std::size_t n, std::uint64_t seed, double delta = 1e-6,
                       double escape_radius = 1e-2, std::size_t max_iters = 100000);

struct ResolventGrowth {
  std::vector<int> k;
  std::vector<double> rho;
  std::vector<double> sensitivity;  // ||(A_k - I)^-1 df/db||_2, df/db = I
  /// sensitivity_k * 10^-k
  std::vector<double> normalized;
};
/// Rescales `a` to rho = 1 - 10^-k for each k and measures ||dx*/db||.
ResolventGrowth resolvent_growth(const Matrix& a, const std::vector<int>& ks);

enum class Regime { contracting, expanding, near_unit };

struct RegimeReport {
  Regime regime = Regime::contracting;
  double rho = 0.0;
  std::optional<DecayFit> decay;             // contracting
  std::optional<double> escape;              // expanding
  std::optional<ResolventGrowth> growth;     // near_unit
};

/// Dispatches on rho(A): < 1 decay fit, > 1 escape fraction, near_unit the
/// resolvent path k = 1..6. Throws DegenerateModelError if I - A is singular.
RegimeReport autonomous_regime_probe(const Matrix& a, const Matrix& b, Regime target, std::uint64_t seed);

/// Fraction of sampled matrices with an eigenvalue within tol of 1.
/// Sample i is drawn with Rng::substream(seed, i, 0).
double unit_eigenvalue_probe(const std::function<Matrix(std::size_t, Rng&)>& sampler, std::size_t n_samples,
                             double tol, std::uint64_t seed);

/// (dL x d^2) derivative of T -> T X, rows token-major, columns T row-major.
Matrix transversality_matrix(const Matrix& x);
/// rank(transversality_matrix(x)) == dL. Throws PreconditionError if L > d.
bool transversality_rank_check(const Matrix& x, double tol = kRankTol);

}  // namespace looplab
