#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "looplab/errors.hpp"

namespace looplab {

/// Eigenvalues of the recall Jacobian (jg) and the sublayer Jacobian (jh)
/// in the single-layer, shared-eigenvector model.
struct ScalarPoint {
  double jg = 0.0;
  double jh = 0.0;
  bool operator==(const ScalarPoint&) const = default;
};

enum class Variant { internal, external };
inline constexpr Variant kAllVariants[] = {Variant::internal, Variant::external};
std::string_view to_string(Variant v);
Variant parse_variant(std::string_view text);

/// internal: |1 + jg jh|, external: |(1 + jh) jg|. The region is where this is < 1.
double region_expression(Variant v, ScalarPoint p);
/// Strict membership in the open stability region.
bool region_member(Variant v, ScalarPoint p);
/// Membership in the closed region, with a relative slack for rounding.
bool region_closure_member(Variant v, ScalarPoint p, double slack = 1e-12);

/// Projection failed to produce a finite candidate.
class ProjectionError : public Error {
 public:
  ProjectionError(const std::string& what, ScalarPoint best) : Error(what), best_(best) {}
  ScalarPoint best_candidate() const noexcept { return best_; }

 private:
  ScalarPoint best_;
};

/// Nearest point of the closed region. Points already in the closure are
/// returned unchanged.
ScalarPoint project_to_region(Variant v, ScalarPoint p);

/// Nearest point to (p, q) on the hyperbola u * w = c (c != 0).
ScalarPoint nearest_on_hyperbola(double p, double q, double c);

struct AnisotropyMetrics {
  double log_range = 0.0;
  double balance = 1.0;
};
inline constexpr double kAnisotropyEps = 1e-8;
AnisotropyMetrics anisotropy_metrics(ScalarPoint p, double eps = kAnisotropyEps);

struct SummaryStats {
  double mean = 0.0;
  double se = 0.0;  // sample std / sqrt(n); 0 when n = 1
  double median = 0.0;
};
SummaryStats summarize(std::vector<double> values);

struct VariantStats {
  SummaryStats log_range;
  SummaryStats balance;
};

struct AnisotropyStats {
  double sigma = 0.0;
  std::size_t n = 0;
  VariantStats internal;
  VariantStats external;
  const VariantStats& of(Variant v) const { return v == Variant::internal ? internal : external; }
};

/// For each sigma, n Gaussian draws N(0, sigma^2 I_2), projected onto both
/// regions. Draw i of sigma index s uses Rng::substream(seed, s, i), so the
/// result does not depend on the thread count.
std::vector<AnisotropyStats> run_anisotropy(const std::vector<double>& sigmas, std::size_t n, double eps,
                                            std::uint64_t seed);
/// Single-threaded reference with the same sampling; must agree bit for bit.
std::vector<AnisotropyStats> run_anisotropy_serial(const std::vector<double>& sigmas, std::size_t n, double eps,
                                                   std::uint64_t seed);
/// Raw draws for sigma index s (before projection).
std::vector<ScalarPoint> anisotropy_samples(double sigma, std::size_t sigma_index, std::size_t n,
                                            std::uint64_t seed);

/// CSV with one row per (sigma, variant).
std::string anisotropy_csv(const std::vector<AnisotropyStats>& stats);

struct StabilityMap {
  std::size_t grid = 0;      // samples per axis
  double jg_range = 0.0;     // jg in [-jg_range, jg_range]
  double jh_range = 0.0;     // jh in [-jh_range, jh_range]
  std::vector<double> jg, jh;                // axis coordinates
  std::vector<char> internal, external;      // row-major [ih * grid + ig]
};

/// Regular grid classification; grid >= 2.
StabilityMap stability_map(std::size_t grid, double jg_range, double jh_range);
/// Columns jg, jh and one 0/1 column per requested variant.
std::string stability_map_csv(const StabilityMap& map, bool internal, bool external);
/// Shaded rendering: red internal, blue external, dashed region boundaries.
std::string stability_map_svg(const StabilityMap& map, bool internal, bool external);

}  // namespace looplab
