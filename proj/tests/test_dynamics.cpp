#include <cmath>
#include <vector>

#include "doctest.h"
#include "looplab/dynamics.hpp"
#include "looplab/rng.hpp"
#include "net_fixtures.hpp"
#include "oracles.hpp"

using namespace looplab;
using looplab::testing::find_stable_run;
using looplab::testing::gram_determinant;
using looplab::testing::random_with_radius;
using looplab::testing::scalar_autonomous_net;
using looplab::testing::scalar_recall_net;
using looplab::testing::zero_fixed_point_net;

namespace {

const Matrix kOne = Matrix::from_rows({{1.0}});
const Matrix kZero = Matrix::from_rows({{0.0}});

std::vector<NetConfig> small_configs(bool recall_only) {
  std::vector<NetConfig> out;
  for (RecallMode recall : kAllRecallModes) {
    if (recall_only && recall == RecallMode::autonomous) continue;
    for (NormMode norm : kAllNormModes) {
      NetConfig c;
      c.d = 4;
      c.L = 3;
      c.recall = recall;
      c.norm = norm;
      out.push_back(c);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("run_trajectory: scalar recall converges to b x0 / (1 - a)") {
  TrajectoryTolerances tols;
  tols.tol_converge = 1e-12;
  const Trajectory t = run_trajectory(scalar_recall_net(0.5, 0.25), kOne, kZero, 60, tols);
  CHECK(t.status == TrajectoryStatus::converged);
  CHECK(t.last()[0] == doctest::Approx(0.5).epsilon(1e-11));
  CHECK(t.residuals.back() < tols.tol_converge);
  REQUIRE(t.t_converged.has_value());
  CHECK(*t.t_converged <= 60);
}

TEST_CASE("run_trajectory: expansion diverges and sign flip cycles") {
  const Trajectory up = run_trajectory(scalar_autonomous_net(1.5), StateMatrix{}, kOne, 1000);
  CHECK(up.status == TrajectoryStatus::diverged);
  CHECK(std::abs(up.last()[0]) > up.divergence_threshold);

  const Trajectory flip = run_trajectory(scalar_autonomous_net(-1.0), StateMatrix{}, kOne, 1000);
  CHECK(flip.status == TrajectoryStatus::cycling);
  CHECK(flip.period == 2);
}

TEST_CASE("run_trajectory: oscillating convergence is not mistaken for a cycle") {
  const Trajectory t = run_trajectory(scalar_recall_net(-0.97, 1.0), kOne, kZero, 5000);
  CHECK(t.status == TrajectoryStatus::converged);
  CHECK(t.last()[0] == doctest::Approx(1.0 / 1.97).epsilon(1e-9));
}

TEST_CASE("run_trajectory: max_iters, overflow and preconditions") {
  CHECK(run_trajectory(scalar_recall_net(0.99, 1.0), kOne, kZero, 5).status == TrajectoryStatus::max_iters);
  CHECK_THROWS_AS(run_trajectory(scalar_recall_net(0.5, 1.0), kOne, kZero, 0), PreconditionError);
  // 1e300 * 1e10 is inf: the overflow is a status, not an exception.
  const Trajectory t = run_trajectory(scalar_autonomous_net(1e10), StateMatrix{}, Matrix::from_rows({{1e300}}), 10);
  CHECK(t.status == TrajectoryStatus::diverged);
}

TEST_CASE("classify_fixed_point on scalar nets") {
  const FixedPointReport a = classify_fixed_point(scalar_recall_net(0.5, 0.25), Matrix::from_rows({{0.5}}), kOne);
  CHECK(a.rho == doctest::Approx(0.5));
  CHECK(a.classification == FixedPointClass::attracting);
  const FixedPointReport r = classify_fixed_point(scalar_autonomous_net(1.5), kZero, StateMatrix{});
  CHECK(r.rho == doctest::Approx(1.5));
  CHECK(r.classification == FixedPointClass::repelling);
  const FixedPointReport m = classify_fixed_point(scalar_autonomous_net(1.0005), kZero, StateMatrix{});
  CHECK(m.classification == FixedPointClass::marginal);
  CHECK_THROWS_AS(classify_fixed_point(scalar_recall_net(0.5, 0.25), kOne, kOne), PreconditionError);
}

TEST_CASE("stability matrix from sublayers matches the step Jacobian radius") {
  for (RecallMode recall : kAllRecallModes) {
    NetConfig c;
    c.d = 4;
    c.L = 3;
    c.recall = recall;
    CAPTURE(to_string(recall));
    for (int trial = 0; trial < 5; ++trial) {
      Rng rng = Rng::substream(300, static_cast<int>(recall), trial);
      const auto run = find_stable_run(c, rng);
      REQUIRE(run.has_value());
      const FixedPointReport rep = classify_fixed_point(run->net, run->x_star, run->x0);
      REQUIRE(rep.m_rho.has_value());
      CHECK(std::abs(*rep.m_rho - rep.rho) <= 1e-8);
      CHECK(rep.m_consistent());
      CHECK(rep.classification == FixedPointClass::attracting);
    }
  }
}

TEST_CASE("input_gradient_unrolled closed forms") {
  const Matrix v = input_gradient_unrolled(scalar_recall_net(0.5, 0.25), kOne, kZero, 60);
  CHECK(std::abs(v[0] - 0.5) <= 1e-12);
  const Matrix aut = input_gradient_unrolled(scalar_autonomous_net(0.5), kOne, StateMatrix{}, 40);
  CHECK(aut[0] == doctest::Approx(std::pow(0.5, 40)).epsilon(1e-12));
  CHECK(input_gradient_unrolled(scalar_recall_net(0.5, 0.25), kOne, kZero, 1)[0] == 0.25);
  CHECK_THROWS_AS(input_gradient_unrolled(scalar_recall_net(0.5, 0.25), kOne, kZero, 0), PreconditionError);
}

TEST_CASE("input_gradient_unrolled reports the last finite V on divergence") {
  const LoopedNet net = scalar_recall_net(1e100, 1.0);
  try {
    input_gradient_unrolled(net, kOne, kOne, 20);
    FAIL("expected divergence");
  } catch (const TrajectoryDivergedError& e) {
    CHECK(e.last_finite().all_finite());
    CHECK(e.iteration() >= 1);
  }
}

TEST_CASE("input_gradient_limit closed forms and regime check") {
  CHECK(input_gradient_limit(scalar_recall_net(0.5, 0.25), Matrix::from_rows({{0.5}}), kOne)[0] ==
        doctest::Approx(0.5).epsilon(1e-15));
  const Matrix zero = input_gradient_limit(scalar_autonomous_net(0.5), kZero, StateMatrix{});
  CHECK(max_abs(zero) == 0.0);
  CHECK_THROWS_AS(input_gradient_limit(scalar_autonomous_net(1.5), kZero, StateMatrix{}), RegimeError);
}

TEST_CASE("unrolled input gradient converges to the resolvent limit") {
  for (const NetConfig& c : small_configs(true)) {
    CAPTURE(to_string(c.recall));
    CAPTURE(to_string(c.norm));
    Rng rng = Rng::substream(400, static_cast<int>(c.recall), static_cast<int>(c.norm));
    const auto run = find_stable_run(c, rng);
    REQUIRE(run.has_value());
    const Matrix e(c.d, c.L);
    const Matrix limit = input_gradient_limit(run->net, run->x_star, run->x0);
    const Matrix v200 = input_gradient_unrolled(run->net, run->x0, e, 200);
    const Matrix v400 = input_gradient_unrolled(run->net, run->x0, e, 400);
    const Matrix v500 = input_gradient_unrolled(run->net, run->x0, e, 500);
    CHECK(max_abs(v200 - v400) <= 1e-9 * (1.0 + max_abs(v400)));
    CHECK(frobenius_norm(v500 - limit) <= 1e-7 * (1.0 + frobenius_norm(limit)));
  }
}

TEST_CASE("e_sensitivity closed forms") {
  const LoopedNet net = scalar_recall_net(0.5, 0.25);
  CHECK(e_sensitivity(net, kOne, kZero, 1) == doctest::Approx(0.5));
  CHECK(e_sensitivity(net, kOne, kZero, 30) == doctest::Approx(std::pow(0.5, 30)).epsilon(1e-12));
  CHECK(std::isinf(e_sensitivity(scalar_recall_net(1e200, 1.0), kOne, kOne, 5)));
}

TEST_CASE("e_sensitivity decays at the contraction rate and x* ignores e") {
  NetConfig c;
  c.d = 4;
  c.L = 3;
  c.recall = RecallMode::external;
  for (NormMode norm : kAllNormModes) {
    c.norm = norm;
    CAPTURE(to_string(norm));
    Rng rng = Rng::substream(500, static_cast<int>(norm));
    const auto run = find_stable_run(c, rng, 0.8);
    REQUIRE(run.has_value());
    const Matrix e(c.d, c.L);
    std::vector<double> ts, ls;
    for (std::size_t T = 10; T <= 200; T += 10) {
      ts.push_back(static_cast<double>(T));
      ls.push_back(std::log(e_sensitivity(run->net, run->x0, e, T)));
    }
    double mt = 0, ml = 0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
      mt += ts[i] / ts.size();
      ml += ls[i] / ls.size();
    }
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
      sxy += (ts[i] - mt) * (ls[i] - ml);
      sxx += (ts[i] - mt) * (ts[i] - mt);
    }
    CHECK(sxy / sxx <= std::log(run->rho) + 0.05);

    CHECK(e_sensitivity(run->net, run->x0, e, 300) <= 1e-8 * e_sensitivity(run->net, run->x0, e, 1));
    for (int k = 0; k < 5; ++k) {
      const Matrix e2 = Matrix::gaussian(c.d, c.L, rng);
      const Trajectory t = run_trajectory(run->net, run->x0, e2, 5000);
      REQUIRE(t.status == TrajectoryStatus::converged);
      CHECK(frobenius_norm(t.last() - run->x_star) <= 1e-8);
    }
  }
}

TEST_CASE("perturbations reconverge at attracting and escape repelling fixed points") {
  NetConfig c;
  c.d = 4;
  c.L = 3;
  for (RecallMode recall : {RecallMode::external, RecallMode::internal}) {
    c.recall = recall;
    Rng rng = Rng::substream(600, static_cast<int>(recall));
    const auto run = find_stable_run(c, rng);
    REQUIRE(run.has_value());
    const PerturbationOutcome o = perturbation_probe(run->net, run->x_star, run->x0, 100, 1);
    CHECK(o.reconverged >= 99);
  }
  Rng rng(601);
  const LoopedNet rep = zero_fixed_point_net(4, 3, rng, 1.3);
  const Matrix zero(4, 3);
  const FixedPointReport report = classify_fixed_point(rep, zero, zero);
  CHECK(report.rho == doctest::Approx(1.3).epsilon(1e-9));
  CHECK(report.classification == FixedPointClass::repelling);
  CHECK(perturbation_probe(rep, zero, zero, 100, 2).escaped >= 99);
}

TEST_CASE("linear model regimes") {
  const Matrix b(4, 1, 1.0);
  const DecayFit fit = fit_decay_rate(Matrix::identity(4) * 0.5);
  CHECK(fit.relative_error() <= 0.02);

  Rng rng(700);
  for (int i = 0; i < 20; ++i) {
    const Matrix a = random_with_radius(5, rng.uniform(0.3, 0.95), rng);
    CHECK(fit_decay_rate(a).relative_error() <= 0.05);
  }

  const Matrix unstable = Matrix::diagonal({0.5, 1.5});
  CHECK(escape_fraction(unstable, Matrix(2, 1, 1.0), 1000, 3) >= 0.999);
  CHECK(escape_fraction(Matrix::diagonal({0.5, 0.9}), Matrix(2, 1, 1.0), 200, 3) == 0.0);

  const ResolventGrowth g = resolvent_growth(Matrix::diagonal({1.0, 0.5, 0.2}), {1, 2, 3, 4, 5, 6});
  for (double n : g.normalized) {
    CHECK(n >= 0.5);
    CHECK(n <= 2.0);
  }

  CHECK_THROWS_AS(linear_fixed_point(Matrix::identity(3), Matrix(3, 1, 1.0)), DegenerateModelError);
  CHECK_THROWS_AS(autonomous_regime_probe(Matrix::identity(2), Matrix(2, 1), Regime::contracting, 1),
                  DegenerateModelError);
  const RegimeReport rr = autonomous_regime_probe(unstable, Matrix(2, 1, 1.0), Regime::expanding, 4);
  REQUIRE(rr.escape.has_value());
  CHECK(*rr.escape >= 0.999);
}

TEST_CASE("unit_eigenvalue_probe") {
  auto contractive = [](std::size_t, Rng& rng) { return random_with_radius(5, rng.uniform(0.1, 0.99), rng); };
  CHECK(unit_eigenvalue_probe(contractive, 1000, 1e-6, 11) == 0.0);
  CHECK(unit_eigenvalue_probe(contractive, 200, 2.0, 11) == 1.0);
  auto adversarial = [&](std::size_t i, Rng& rng) {
    if (i == 0) return Matrix::diagonal({1.0, 0.3, -0.2});
    return random_with_radius(3, 0.5, rng);
  };
  CHECK(unit_eigenvalue_probe(adversarial, 100, 1e-6, 12) == doctest::Approx(0.01));
}

TEST_CASE("transversality rank") {
  Matrix e(4, 2);
  e(0, 0) = 1;
  e(1, 1) = 1;
  CHECK(transversality_rank_check(e));
  Matrix dup = Matrix::from_rows({{1, 1}, {2, 2}, {3, 3}, {0, 0}});
  CHECK_FALSE(transversality_rank_check(dup));
  CHECK_THROWS_AS(transversality_rank_check(Matrix(2, 3)), PreconditionError);

  Rng rng(800);
  for (int seed = 0; seed < 100; ++seed) {
    const Matrix x = Matrix::gaussian(6, 4, rng);
    REQUIRE(gram_determinant(x) > 1e-10);
    CHECK(transversality_rank_check(x));
  }
  // The derivative is I_d (x) X^T, so its rank is d * rank(X).
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix x = Matrix::gaussian(5, 2, rng) * Matrix::gaussian(2, 4, rng);
    CHECK(rank(transversality_matrix(x)) == 5 * rank(x));
  }
}
