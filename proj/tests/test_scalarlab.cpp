#include <omp.h>

#include <algorithm>
#include <cmath>
#include <string>

#include "doctest.h"
#include "looplab/rng.hpp"
#include "looplab/scalarlab.hpp"
#include "oracles.hpp"

using namespace looplab;
using looplab::testing::sampled_projection;

namespace {

double dist(ScalarPoint a, ScalarPoint b) { return std::hypot(a.jg - b.jg, a.jh - b.jh); }

}  // namespace

TEST_CASE("region membership examples") {
  CHECK(region_member(Variant::external, {0.5, 0.0}));
  CHECK_FALSE(region_member(Variant::internal, {0.5, 0.0}));
  CHECK(region_member(Variant::internal, {1.0, -1.0}));
  CHECK_FALSE(region_member(Variant::external, {2.0, 0.0}));
  CHECK(region_closure_member(Variant::internal, {0.0, 0.0}));
}

TEST_CASE("projection examples") {
  CHECK(project_to_region(Variant::external, {0.5, 0.0}) == ScalarPoint{0.5, 0.0});
  CHECK(project_to_region(Variant::internal, {0.0, 0.0}) == ScalarPoint{0.0, 0.0});
  const ScalarPoint p{3.0, 0.0};
  const ScalarPoint ours = project_to_region(Variant::external, p);
  const ScalarPoint oracle = sampled_projection(Variant::external, p, 1000000);
  CHECK(dist(ours, oracle) <= 1e-4);
  CHECK(region_expression(Variant::external, ours) == doctest::Approx(1.0).epsilon(1e-12));
  // Quadrant I points go to the nearer axis for internal recall.
  CHECK(project_to_region(Variant::internal, {2.0, 0.5}) == ScalarPoint{2.0, 0.0});
  CHECK_THROWS_AS(project_to_region(Variant::internal, {NAN, 0.0}), PreconditionError);
}

TEST_CASE("projection agrees with the dense-sampling oracle at 1e6 samples") {
  Rng rng(41);
  for (int i = 0; i < 12; ++i) {
    const ScalarPoint p{rng.normal(0, 3), rng.normal(0, 3)};
    for (Variant v : kAllVariants) {
      const ScalarPoint ours = project_to_region(v, p);
      const ScalarPoint oracle = sampled_projection(v, p, 1000000);
      CHECK(dist(ours, p) <= dist(oracle, p) + 1e-9);
      CHECK(dist(ours, oracle) <= 1e-4);
    }
  }
}

TEST_CASE("projection properties over many points") {
  Rng rng(43);
  for (double sigma : {0.5, 1.0, 2.0, 4.0, 20.0}) {
    for (int i = 0; i < 200; ++i) {
      const ScalarPoint p{rng.normal(0, sigma), rng.normal(0, sigma)};
      for (Variant v : kAllVariants) {
        const ScalarPoint q = project_to_region(v, p);
        CHECK(region_expression(v, q) <= 1.0 + 1e-6);
        const ScalarPoint qq = project_to_region(v, q);
        CHECK(dist(q, qq) <= 1e-9);
        const ScalarPoint oracle = sampled_projection(v, p, 20000);
        CHECK(dist(q, p) <= dist(oracle, p) + 1e-9);
        if (region_member(v, p)) CHECK(q == p);
      }
    }
  }
}

TEST_CASE("nearest_on_hyperbola handles points on the curve and far away") {
  const ScalarPoint on = nearest_on_hyperbola(2.0, 0.5, 1.0);
  CHECK(on.jg == doctest::Approx(2.0));
  CHECK(on.jh == doctest::Approx(0.5));
  const ScalarPoint far = nearest_on_hyperbola(1e4, 1e4, -2.0);
  CHECK(far.jg * far.jh == doctest::Approx(-2.0));
  CHECK_THROWS_AS(nearest_on_hyperbola(1, 1, 0), PreconditionError);
}

TEST_CASE("anisotropy metric examples") {
  for (double c : {0.0, 1.0, -3.5, 1e6}) {
    const AnisotropyMetrics m = anisotropy_metrics({c, c});
    CHECK(m.log_range == 0.0);
    CHECK(m.balance == 1.0);
  }
  const AnisotropyMetrics m = anisotropy_metrics({1.0, 0.0}, 1e-8);
  CHECK(m.log_range == doctest::Approx(std::log((1 + 1e-8) / 1e-8)));
  CHECK(m.log_range == doctest::Approx(18.42).epsilon(1e-3));
  CHECK(m.balance == doctest::Approx(1e-8).epsilon(1e-6));
  const AnisotropyMetrics s = anisotropy_metrics({-2.0, 2.0});
  CHECK(s.log_range == 0.0);
  CHECK(s.balance == 1.0);
  CHECK_THROWS_AS(anisotropy_metrics({1, 2}, 0.0), PreconditionError);
}

TEST_CASE("metric bounds hold on random points") {
  Rng rng(44);
  for (int i = 0; i < 1000; ++i) {
    const AnisotropyMetrics m = anisotropy_metrics({rng.normal(0, 5), rng.normal(0, 5)});
    CHECK(m.log_range >= 0.0);
    CHECK(m.balance >= 0.0);
    CHECK(m.balance <= 1.0);
  }
}

TEST_CASE("summarize") {
  const SummaryStats one = summarize({3.0});
  CHECK(one.se == 0.0);
  CHECK(one.median == 3.0);
  const SummaryStats s = summarize({4.0, 1.0, 3.0, 2.0});
  CHECK(s.mean == 2.5);
  CHECK(s.median == 2.5);
  CHECK(s.se == doctest::Approx(std::sqrt(5.0 / 3.0) / 2.0));
}

TEST_CASE("anisotropy sampler matches N(0, sigma^2)") {
  for (double sigma : {0.5, 4.0}) {
    const auto pts = anisotropy_samples(sigma, 0, 10000, 7);
    for (int axis = 0; axis < 2; ++axis) {
      double sum = 0, sq = 0;
      for (const auto& p : pts) {
        const double x = axis == 0 ? p.jg : p.jh;
        sum += x;
        sq += x * x;
      }
      const double n = 10000, mean = sum / n, var = sq / n - mean * mean;
      CHECK(std::abs(mean) <= 3 * sigma / std::sqrt(n));
      // Var of the sample variance is 2 sigma^4 / n.
      CHECK(std::abs(var - sigma * sigma) <= 3 * sigma * sigma * std::sqrt(2.0 / n));
    }
  }
}

TEST_CASE("parallel and serial anisotropy runs agree bit for bit") {
  const std::vector<double> sigmas{0.5, 2.0};
  const int saved = omp_get_max_threads();
  omp_set_num_threads(4);
  const auto par = run_anisotropy(sigmas, 500, 1e-8, 9);
  omp_set_num_threads(saved);
  const auto ser = run_anisotropy_serial(sigmas, 500, 1e-8, 9);
  CHECK(anisotropy_csv(par) == anisotropy_csv(ser));
  CHECK(anisotropy_csv(run_anisotropy(sigmas, 500, 1e-8, 10)) != anisotropy_csv(ser));
  const auto single = run_anisotropy({1.0}, 1, 1e-8, 3);
  CHECK(single[0].internal.log_range.se == 0.0);
  CHECK(single[0].external.balance.se == 0.0);
  CHECK_THROWS_AS(run_anisotropy({1.0}, 0, 1e-8, 3), PreconditionError);
}

TEST_CASE("internal recall projections are more anisotropic") {
  const auto stats = run_anisotropy({0.5, 1.0, 2.0, 4.0}, 2000, 1e-8, 7);
  for (const auto& st : stats) {
    CAPTURE(st.sigma);
    CHECK(st.internal.log_range.median >= 3.0 * st.external.log_range.median);
    CHECK(st.internal.balance.median <= st.external.balance.median / 4.0);
  }
  const std::string csv = anisotropy_csv(stats);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);
}

TEST_CASE("stability map reproduces the closed-form inequalities") {
  const StabilityMap m = stability_map(101, 10.0, 6.0);
  REQUIRE(m.jg.size() == 101);
  CHECK(m.jg.front() == -10.0);
  CHECK(m.jg.back() == 10.0);
  for (std::size_t ih = 0; ih < 101; ++ih)
    for (std::size_t ig = 0; ig < 101; ++ig) {
      const double g = m.jg[ig], h = m.jh[ih];
      CHECK(bool(m.internal[ih * 101 + ig]) == (-2.0 < g * h && g * h < 0.0));
      CHECK(bool(m.external[ih * 101 + ig]) == (std::abs(g + g * h) < 1.0));
    }
  const std::string csv = stability_map_csv(m, true, true);
  CHECK(csv.rfind("jg,jh,internal,external\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 101 * 101 + 1);
  const std::string svg = stability_map_svg(m, true, false);
  CHECK(svg.find("<svg") == 0);
  CHECK(svg.find("red") != std::string::npos);
  CHECK(svg.find("blue") == std::string::npos);
  CHECK_THROWS_AS(stability_map(1, 1, 1), PreconditionError);
}
