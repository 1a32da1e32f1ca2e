#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "looplab/dynamics.hpp"
#include "looplab/netcore.hpp"

namespace looplab {

class Rng;

// ---- net generators -----------------------------------------------------------

/// Default initialization with gains drawn from U(0.5, 1.5) and biases from
/// N(0, bias_scale^2), so every parameter path is exercised.
LoopedNet randomized_net(const NetConfig& config, Rng& rng, double bias_scale = 0.3);

/// randomized_net with the sublayer outputs scaled by `damping`. Internal and
/// autonomous nets additionally get a first mixing head pulling toward -x/2,
/// since their residual paths otherwise sit near the identity.
LoopedNet damped_net(const NetConfig& config, Rng& rng, double damping);

struct StableNet {
  LoopedNet net;
  StateMatrix x0;      // empty for autonomous nets
  StateMatrix x_star;
  double rho = 0.0;
  std::size_t attempt = 0;
};

/// First damped_net (attempt i uses Rng::substream(seed, i, 0)) whose
/// trajectory from e = 0 converges to a fixed point with rho in (0.05, rho_max].
std::optional<StableNet> find_stable_net(const NetConfig& config, std::uint64_t seed, double rho_max = 0.9,
                                         double damping = 0.4, std::size_t attempts = 200);

// ---- jacobian-check -------------------------------------------------------------

/// Central-difference step Jacobians, one column per flattened input entry.
StepJacobians finite_difference_step_jacobians(const LoopedNet& net, const StateMatrix& x_t, const StateMatrix& x0,
                                               double h = 1e-5);

struct JacobianCheckRow {
  RecallMode recall = RecallMode::external;
  NormMode norm = NormMode::none;
  std::size_t trial = 0;
  double state_error = 0.0;  // max |analytic - fd| / max(max |fd|, 1e-12)
  double input_error = 0.0;  // 0 for autonomous nets
};

/// `trials` randomized nets per (recall, norm) pair at Gaussian states.
/// Trial t of pair p draws from Rng::substream(seed, p, t); runs in parallel.
std::vector<JacobianCheckRow> jacobian_check(const std::vector<NetConfig>& configs, std::size_t trials,
                                             std::uint64_t seed);
std::string jacobian_check_csv(const std::vector<JacobianCheckRow>& rows);

// ---- fixed-point ------------------------------------------------------------------

struct FixedPointRun {
  Trajectory trajectory;
  std::optional<FixedPointReport> report;  // when converged
};
FixedPointRun fixed_point_run(const LoopedNet& net, const StateMatrix& x0, const StateMatrix& e,
                              std::size_t max_iters, const TrajectoryTolerances& tols = {});
std::string fixed_point_csv(const LoopedNet& net, const FixedPointRun& run);

// ---- grad-limit -------------------------------------------------------------------

struct GradLimitRow {
  std::size_t net = 0;
  std::size_t attempt = 0;
  double rho = 0.0;
  double limit_norm = 0.0;  // Frobenius
  double difference = 0.0;  // || unrolled(T) - limit ||_F
  double bound = 0.0;       // rel_tol * (1 + limit_norm)
  bool passed() const { return difference <= bound; }
};

/// Compares the unrolled input gradient at T with the resolvent limit.
GradLimitRow grad_limit_check(const LoopedNet& net, const StateMatrix& x0, const StateMatrix& x_star, std::size_t T,
                              double rel_tol = 1e-7);
/// `nets` stable nets from find_stable_net with seeds derived from `seed`.
/// Throws RegimeError when no stable net is found for some index.
std::vector<GradLimitRow> grad_limit_experiment(const NetConfig& config, std::size_t nets, std::size_t T,
                                                std::uint64_t seed, double rho_max = 0.9, double rel_tol = 1e-7);
std::string grad_limit_csv(const std::vector<GradLimitRow>& rows);

// ---- autonomous-regimes -------------------------------------------------------------

std::string_view to_string(Regime r);
Regime parse_regime(std::string_view text);

struct RegimeRow {
  Regime regime = Regime::contracting;
  std::size_t net = 0;
  int k = 0;               // near_unit: rho = 1 - 10^-k
  double rho = 0.0;
  double value = 0.0;      // fitted slope, escape fraction, or sensitivity * 10^-k
  double reference = 0.0;  // log rho, 1, or 1
  bool passed = false;
};

/// contracting: Gaussian A rescaled to rho ~ U(0.3, 0.9), slope within 5% of log rho.
/// expanding: rho ~ U(1.1, 2), escape fraction >= 0.999 over 1000 perturbations.
/// near_unit: symmetric A with a positive top eigenvalue; ||(A - I)^-1|| 10^-k in [0.5, 2], k = 1..6.
/// Net i of each regime draws from Rng::substream(seed, regime, i).
std::vector<RegimeRow> regime_experiment(const std::vector<Regime>& regimes, std::size_t nets, std::size_t d,
                                         std::uint64_t seed);
std::string regime_csv(const std::vector<RegimeRow>& rows);

/// Gaussian d x d matrix rescaled to the given spectral radius.
Matrix random_matrix_with_radius(std::size_t d, double rho, Rng& rng);

}  // namespace looplab
