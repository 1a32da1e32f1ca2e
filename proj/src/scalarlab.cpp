#include "looplab/scalarlab.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <sstream>

#include "looplab/format.hpp"
#include "looplab/linalg.hpp"
#include "looplab/rng.hpp"

namespace looplab {

std::string_view to_string(Variant v) { return v == Variant::internal ? "internal" : "external"; }

Variant parse_variant(std::string_view text) {
  if (text == "internal") return Variant::internal;
  if (text == "external") return Variant::external;
  throw PreconditionError("unknown variant '" + std::string(text) + "'");
}

double region_expression(Variant v, ScalarPoint p) {
  return v == Variant::internal ? std::abs(1.0 + p.jg * p.jh) : std::abs((1.0 + p.jh) * p.jg);
}

bool region_member(Variant v, ScalarPoint p) { return region_expression(v, p) < 1.0; }

bool region_closure_member(Variant v, ScalarPoint p, double slack) {
  return region_expression(v, p) <= 1.0 + slack;
}

namespace {

// Stationarity of (u - p)^2 + (c/u - q)^2 times u^3.
double stationarity(double u, double p, double q, double c) { return (u - p) - (c / u - q) * c / (u * u); }
double stationarity_slope(double u, double q, double c) {
  const double u3 = u * u * u;
  return 1.0 + 3.0 * c * c / (u3 * u) - 2.0 * q * c / u3;
}

}  // namespace

ScalarPoint nearest_on_hyperbola(double p, double q, double c) {
  if (c == 0.0) throw PreconditionError("nearest_on_hyperbola: c must be nonzero");
  // Critical points solve u^4 - p u^3 + q c u - c^2 = 0; take the roots as
  // eigenvalues of the companion matrix.
  Matrix comp(4, 4);
  comp(1, 0) = comp(2, 1) = comp(3, 2) = 1.0;
  comp(0, 3) = c * c;
  comp(1, 3) = -q * c;
  comp(2, 3) = 0.0;
  comp(3, 3) = p;
  std::vector<std::complex<double>> roots;
  try {
    roots = eigenvalues(comp);
  } catch (const NoConvergenceError&) {
    roots.clear();
  }
  ScalarPoint best{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double best_d2 = std::numeric_limits<double>::infinity();
  const double scale = 1.0 + std::abs(p) + std::abs(q) + std::sqrt(std::abs(c));
  for (const auto& z : roots) {
    // Near-double roots can come back as a pair with a tiny imaginary part.
    if (std::abs(z.imag()) > 1e-6 * scale) continue;
    double u = z.real();
    if (u == 0.0) continue;
    for (int it = 0; it < 8; ++it) {
      const double f = stationarity(u, p, q, c);
      const double fp = stationarity_slope(u, q, c);
      if (fp == 0.0 || !std::isfinite(fp)) break;
      const double next = u - f / fp;
      if (!std::isfinite(next) || next == 0.0 || (next > 0) != (u > 0)) break;
      if (std::abs(stationarity(next, p, q, c)) >= std::abs(f)) break;
      u = next;
    }
    const ScalarPoint cand{u, c / u};
    const double d2 = (cand.jg - p) * (cand.jg - p) + (cand.jh - q) * (cand.jh - q);
    if (std::isfinite(d2) && d2 < best_d2) {
      best_d2 = d2;
      best = cand;
    }
  }
  if (!std::isfinite(best_d2))
    throw ProjectionError("nearest_on_hyperbola: no real critical point found", best);
  return best;
}

ScalarPoint project_to_region(Variant v, ScalarPoint p) {
  if (!std::isfinite(p.jg) || !std::isfinite(p.jh)) throw PreconditionError("project_to_region: non-finite point");
  if (region_closure_member(v, p)) return p;
  std::vector<ScalarPoint> candidates;
  if (v == Variant::internal) {
    // Boundary of -2 <= jg jh <= 0: both axes and jg jh = -2.
    candidates.push_back({p.jg, 0.0});
    candidates.push_back({0.0, p.jh});
    candidates.push_back(nearest_on_hyperbola(p.jg, p.jh, -2.0));
  } else {
    // Boundary of |jg (1 + jh)| <= 1 in coordinates (jg, w = 1 + jh).
    for (double c : {1.0, -1.0}) {
      const ScalarPoint h = nearest_on_hyperbola(p.jg, 1.0 + p.jh, c);
      candidates.push_back({h.jg, h.jh - 1.0});
    }
  }
  ScalarPoint best = candidates.front();
  double best_d2 = std::numeric_limits<double>::infinity();
  for (const auto& q : candidates) {
    const double d2 = (q.jg - p.jg) * (q.jg - p.jg) + (q.jh - p.jh) * (q.jh - p.jh);
    if (d2 < best_d2) {
      best_d2 = d2;
      best = q;
    }
  }
  if (!region_closure_member(v, best, 1e-9))
    throw ProjectionError("project_to_region: candidate left the closed region", best);
  return best;
}

AnisotropyMetrics anisotropy_metrics(ScalarPoint p, double eps) {
  if (!(eps > 0.0)) throw PreconditionError("anisotropy_metrics: eps must be > 0");
  const double a = std::abs(p.jg), b = std::abs(p.jh);
  AnisotropyMetrics m;
  if (a == b) return m;  // exact symmetric tie
  m.log_range = std::abs(std::log((a + eps) / (b + eps)));
  m.balance = (std::min(a, b) + eps) / (std::max(a, b) + eps);
  return m;
}

SummaryStats summarize(std::vector<double> values) {
  if (values.empty()) throw PreconditionError("summarize: no values");
  const std::size_t n = values.size();
  SummaryStats s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(n);
  if (n > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.se = std::sqrt(sq / static_cast<double>(n - 1)) / std::sqrt(static_cast<double>(n));
  }
  std::sort(values.begin(), values.end());
  s.median = n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  return s;
}

namespace {

ScalarPoint draw_point(double sigma, std::size_t s, std::size_t i, std::uint64_t seed) {
  Rng rng = Rng::substream(seed, s, i);
  const double x = rng.normal(0.0, sigma);
  const double y = rng.normal(0.0, sigma);
  return {x, y};
}

}  // namespace

std::vector<ScalarPoint> anisotropy_samples(double sigma, std::size_t sigma_index, std::size_t n,
                                            std::uint64_t seed) {
  std::vector<ScalarPoint> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = draw_point(sigma, sigma_index, i, seed);
  return out;
}

namespace {

struct SampleMetrics {
  AnisotropyMetrics internal, external;
};

SampleMetrics sample_metrics(double sigma, std::size_t s, std::size_t i, double eps, std::uint64_t seed) {
  const ScalarPoint p = draw_point(sigma, s, i, seed);
  return {anisotropy_metrics(project_to_region(Variant::internal, p), eps),
          anisotropy_metrics(project_to_region(Variant::external, p), eps)};
}

AnisotropyStats reduce(double sigma, const std::vector<SampleMetrics>& m) {
  std::vector<double> ilr, ibal, elr, ebal;
  for (const auto& s : m) {
    ilr.push_back(s.internal.log_range);
    ibal.push_back(s.internal.balance);
    elr.push_back(s.external.log_range);
    ebal.push_back(s.external.balance);
  }
  AnisotropyStats st;
  st.sigma = sigma;
  st.n = m.size();
  st.internal = {summarize(std::move(ilr)), summarize(std::move(ibal))};
  st.external = {summarize(std::move(elr)), summarize(std::move(ebal))};
  return st;
}

void check_inputs(const std::vector<double>& sigmas, std::size_t n, double eps) {
  if (n < 1) throw PreconditionError("run_anisotropy: n must be >= 1");
  if (!(eps > 0.0)) throw PreconditionError("run_anisotropy: eps must be > 0");
  for (double s : sigmas)
    if (!(s > 0.0) || !std::isfinite(s)) throw PreconditionError("run_anisotropy: sigma must be positive");
}

}  // namespace

std::vector<AnisotropyStats> run_anisotropy(const std::vector<double>& sigmas, std::size_t n, double eps,
                                            std::uint64_t seed) {
  check_inputs(sigmas, n, eps);
  std::vector<AnisotropyStats> out;
  for (std::size_t s = 0; s < sigmas.size(); ++s) {
    std::vector<SampleMetrics> m(n);
    const double sigma = sigmas[s];
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) m[i] = sample_metrics(sigma, s, i, eps, seed);
    out.push_back(reduce(sigma, m));
  }
  return out;
}

std::vector<AnisotropyStats> run_anisotropy_serial(const std::vector<double>& sigmas, std::size_t n, double eps,
                                                   std::uint64_t seed) {
  check_inputs(sigmas, n, eps);
  std::vector<AnisotropyStats> out;
  for (std::size_t s = 0; s < sigmas.size(); ++s) {
    std::vector<SampleMetrics> m(n);
    for (std::size_t i = 0; i < n; ++i) m[i] = sample_metrics(sigmas[s], s, i, eps, seed);
    out.push_back(reduce(sigmas[s], m));
  }
  return out;
}

std::string anisotropy_csv(const std::vector<AnisotropyStats>& stats) {
  std::ostringstream out;
  out << "sigma,variant,n,mean_log_ratio,se_log_ratio,median_log_ratio,mean_balance,se_balance,median_balance\n";
  for (const auto& st : stats)
    for (Variant v : kAllVariants) {
      const VariantStats& vs = st.of(v);
      out << fmt17(st.sigma) << ',' << to_string(v) << ',' << st.n << ',' << fmt17(vs.log_range.mean) << ','
          << fmt17(vs.log_range.se) << ',' << fmt17(vs.log_range.median) << ',' << fmt17(vs.balance.mean) << ','
          << fmt17(vs.balance.se) << ',' << fmt17(vs.balance.median) << '\n';
    }
  return out.str();
}

StabilityMap stability_map(std::size_t grid, double jg_range, double jh_range) {
  if (grid < 2) throw PreconditionError("stability_map: grid must be >= 2");
  if (!(jg_range > 0.0) || !(jh_range > 0.0)) throw PreconditionError("stability_map: ranges must be positive");
  StabilityMap m;
  m.grid = grid;
  m.jg_range = jg_range;
  m.jh_range = jh_range;
  for (std::size_t i = 0; i < grid; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(grid - 1);
    m.jg.push_back(-jg_range + 2.0 * jg_range * t);
    m.jh.push_back(-jh_range + 2.0 * jh_range * t);
  }
  m.internal.resize(grid * grid);
  m.external.resize(grid * grid);
  for (std::size_t ih = 0; ih < grid; ++ih)
    for (std::size_t ig = 0; ig < grid; ++ig) {
      const ScalarPoint p{m.jg[ig], m.jh[ih]};
      m.internal[ih * grid + ig] = region_member(Variant::internal, p);
      m.external[ih * grid + ig] = region_member(Variant::external, p);
    }
  return m;
}

std::string stability_map_csv(const StabilityMap& map, bool internal, bool external) {
  std::ostringstream out;
  out << "jg,jh";
  if (internal) out << ",internal";
  if (external) out << ",external";
  out << '\n';
  for (std::size_t ih = 0; ih < map.grid; ++ih)
    for (std::size_t ig = 0; ig < map.grid; ++ig) {
      out << fmt17(map.jg[ig]) << ',' << fmt17(map.jh[ih]);
      if (internal) out << ',' << int(map.internal[ih * map.grid + ig]);
      if (external) out << ',' << int(map.external[ih * map.grid + ig]);
      out << '\n';
    }
  return out.str();
}

std::string stability_map_svg(const StabilityMap& map, bool internal, bool external) {
  const double width = 600.0, height = 360.0, pad = 40.0;
  const double cw = width / static_cast<double>(map.grid), ch = height / static_cast<double>(map.grid);
  auto sx = [&](double jg) { return pad + (jg + map.jg_range) / (2.0 * map.jg_range) * width; };
  auto sy = [&](double jh) { return pad + (map.jh_range - jh) / (2.0 * map.jh_range) * height; };
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width + 2 * pad << "\" height=\""
      << height + 2 * pad << "\">\n<rect x=\"0\" y=\"0\" width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  auto shade = [&](const std::vector<char>& cells, const char* color) {
    out << "<g fill=\"" << color << "\" fill-opacity=\"0.35\">\n";
    for (std::size_t ih = 0; ih < map.grid; ++ih) {
      const double y = pad + static_cast<double>(map.grid - 1 - ih) * ch;
      std::size_t ig = 0;
      while (ig < map.grid) {
        if (!cells[ih * map.grid + ig]) {
          ++ig;
          continue;
        }
        const std::size_t start = ig;
        while (ig < map.grid && cells[ih * map.grid + ig]) ++ig;
        out << "<rect x=\"" << pad + static_cast<double>(start) * cw << "\" y=\"" << y << "\" width=\""
            << static_cast<double>(ig - start) * cw << "\" height=\"" << ch << "\"/>\n";
      }
    }
    out << "</g>\n";
  };
  if (internal) shade(map.internal, "red");
  if (external) shade(map.external, "blue");

  auto curve = [&](const char* color, auto f) {
    for (int sign : {-1, 1}) {
      out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" stroke-dasharray=\"5,3\" points=\"";
      for (int k = 0; k <= 400; ++k) {
        const double jg = sign * (0.08 + (map.jg_range - 0.08) * k / 400.0);
        const double jh = std::clamp(f(jg), -map.jh_range, map.jh_range);
        out << sx(jg) << ',' << sy(jh) << ' ';
      }
      out << "\"/>\n";
    }
  };
  if (internal) curve("red", [](double g) { return -2.0 / g; });
  if (external) {
    curve("blue", [](double g) { return 1.0 / g - 1.0; });
    curve("blue", [](double g) { return -1.0 / g - 1.0; });
  }
  out << "<line x1=\"" << pad << "\" y1=\"" << sy(0) << "\" x2=\"" << pad + width << "\" y2=\"" << sy(0)
      << "\" stroke=\"black\"/>\n<line x1=\"" << sx(0) << "\" y1=\"" << pad << "\" x2=\"" << sx(0) << "\" y2=\""
      << pad + height << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << pad + width - 30 << "\" y=\"" << sy(0) - 6 << "\" font-size=\"12\">jg</text>\n";
  out << "<text x=\"" << sx(0) + 6 << "\" y=\"" << pad + 12 << "\" font-size=\"12\">jh</text>\n</svg>\n";
  return out.str();
}

}  // namespace looplab
