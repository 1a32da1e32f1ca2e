// Dense nonsymmetric eigenvalues: balance, reduce to upper Hessenberg form by
// stabilized elimination, then run Francis double-shift QR on the Hessenberg
// matrix. Complex conjugate pairs come out of converged 2x2 blocks.

#include <algorithm>
#include <cmath>
#include <limits>

#include "looplab/linalg.hpp"

namespace looplab {

namespace {

constexpr int kMaxQrIterationsPerEigenvalue = 60;

struct QrStalled {};

double sign_of(double a, double b) { return b >= 0.0 ? std::abs(a) : -std::abs(a); }

// Parlett-Reinsch balancing with powers of two; leaves eigenvalues unchanged.
void balance(Matrix& a) {
  constexpr double radix = 2.0;
  constexpr double sqrdx = radix * radix;
  const std::size_t n = a.rows();
  bool done = false;
  while (!done) {
    done = true;
    for (std::size_t i = 0; i < n; ++i) {
      double r = 0.0, c = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        c += std::abs(a(j, i));
        r += std::abs(a(i, j));
      }
      if (c == 0.0 || r == 0.0) continue;
      double g = r / radix;
      double f = 1.0;
      const double s = c + r;
      while (c < g) {
        f *= radix;
        c *= sqrdx;
      }
      g = r * radix;
      while (c > g) {
        f /= radix;
        c /= sqrdx;
      }
      if ((c + r) / f < 0.95 * s) {
        done = false;
        g = 1.0 / f;
        for (std::size_t j = 0; j < n; ++j) a(i, j) *= g;
        for (std::size_t j = 0; j < n; ++j) a(j, i) *= f;
      }
    }
  }
}

// Reduction to upper Hessenberg form by elimination with partial pivoting.
void to_hessenberg(Matrix& a) {
  const std::size_t n = a.rows();
  for (std::size_t m = 1; m + 1 < n; ++m) {
    double x = 0.0;
    std::size_t piv = m;
    for (std::size_t j = m; j < n; ++j) {
      if (std::abs(a(j, m - 1)) > std::abs(x)) {
        x = a(j, m - 1);
        piv = j;
      }
    }
    if (piv != m) {
      for (std::size_t j = m - 1; j < n; ++j) std::swap(a(piv, j), a(m, j));
      for (std::size_t j = 0; j < n; ++j) std::swap(a(j, piv), a(j, m));
    }
    if (x == 0.0) continue;
    for (std::size_t i = m + 1; i < n; ++i) {
      double y = a(i, m - 1);
      if (y == 0.0) continue;
      y /= x;
      a(i, m - 1) = y;
      for (std::size_t j = m; j < n; ++j) a(i, j) -= y * a(m, j);
      for (std::size_t j = 0; j < n; ++j) a(j, m) += y * a(j, i);
    }
  }
  for (std::size_t i = 2; i < n; ++i)
    for (std::size_t j = 0; j + 1 < i; ++j) a(i, j) = 0.0;
}

// Francis double-shift QR on an upper Hessenberg matrix (destroys `a`).
void hessenberg_qr(Matrix& a, std::vector<std::complex<double>>& out) {
  const int n = static_cast<int>(a.rows());
  std::vector<double> wr(n, 0.0), wi(n, 0.0);
  double anorm = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = std::max(i - 1, 0); j < n; ++j) anorm += std::abs(a(i, j));

  int nn = n - 1;
  double t = 0.0;
  double p = 0, q = 0, r = 0, s = 0, w = 0, x = 0, y = 0, z = 0;
  while (nn >= 0) {
    int its = 0;
    int l = 0;
    do {
      for (l = nn; l >= 1; --l) {
        s = std::abs(a(l - 1, l - 1)) + std::abs(a(l, l));
        if (s == 0.0) s = anorm;
        if (std::abs(a(l, l - 1)) + s == s) {
          a(l, l - 1) = 0.0;
          break;
        }
      }
      x = a(nn, nn);
      if (l == nn) {
        wr[nn] = x + t;
        wi[nn] = 0.0;
        --nn;
      } else {
        y = a(nn - 1, nn - 1);
        w = a(nn, nn - 1) * a(nn - 1, nn);
        if (l == nn - 1) {
          p = 0.5 * (y - x);
          q = p * p + w;
          z = std::sqrt(std::abs(q));
          x += t;
          if (q >= 0.0) {
            z = p + sign_of(z, p);
            wr[nn - 1] = wr[nn] = x + z;
            if (z != 0.0) wr[nn] = x - w / z;
            wi[nn - 1] = wi[nn] = 0.0;
          } else {
            wr[nn - 1] = wr[nn] = x + p;
            wi[nn - 1] = -z;
            wi[nn] = z;
          }
          nn -= 2;
        } else {
          if (its == kMaxQrIterationsPerEigenvalue) throw QrStalled{};
          if (its == 10 || its == 20 || its == 40) {
            // Exceptional shift to break cycles.
            t += x;
            for (int i = 0; i <= nn; ++i) a(i, i) -= x;
            s = std::abs(a(nn, nn - 1)) + std::abs(a(nn - 1, nn - 2));
            y = x = 0.75 * s;
            w = -0.4375 * s * s;
          }
          ++its;
          int m = nn - 2;
          for (; m >= l; --m) {
            z = a(m, m);
            r = x - z;
            s = y - z;
            p = (r * s - w) / a(m + 1, m) + a(m, m + 1);
            q = a(m + 1, m + 1) - z - r - s;
            r = a(m + 2, m + 1);
            s = std::abs(p) + std::abs(q) + std::abs(r);
            p /= s;
            q /= s;
            r /= s;
            if (m == l) break;
            const double u = std::abs(a(m, m - 1)) * (std::abs(q) + std::abs(r));
            const double v =
                std::abs(p) * (std::abs(a(m - 1, m - 1)) + std::abs(z) + std::abs(a(m + 1, m + 1)));
            if (u + v == v) break;
          }
          for (int i = m + 2; i <= nn; ++i) {
            a(i, i - 2) = 0.0;
            if (i != m + 2) a(i, i - 3) = 0.0;
          }
          for (int k = m; k <= nn - 1; ++k) {
            if (k != m) {
              p = a(k, k - 1);
              q = a(k + 1, k - 1);
              r = 0.0;
              if (k != nn - 1) r = a(k + 2, k - 1);
              x = std::abs(p) + std::abs(q) + std::abs(r);
              if (x != 0.0) {
                p /= x;
                q /= x;
                r /= x;
              }
            }
            s = sign_of(std::sqrt(p * p + q * q + r * r), p);
            if (s == 0.0) continue;
            if (k == m) {
              if (l != m) a(k, k - 1) = -a(k, k - 1);
            } else {
              a(k, k - 1) = -s * x;
            }
            p += s;
            x = p / s;
            y = q / s;
            z = r / s;
            q /= p;
            r /= p;
            for (int j = k; j <= nn; ++j) {
              p = a(k, j) + q * a(k + 1, j);
              if (k != nn - 1) {
                p += r * a(k + 2, j);
                a(k + 2, j) -= p * z;
              }
              a(k + 1, j) -= p * y;
              a(k, j) -= p * x;
            }
            const int mmin = nn < k + 3 ? nn : k + 3;
            for (int i = l; i <= mmin; ++i) {
              p = x * a(i, k) + y * a(i, k + 1);
              if (k != nn - 1) {
                p += z * a(i, k + 2);
                a(i, k + 2) -= p * r;
              }
              a(i, k + 1) -= p * q;
              a(i, k) -= p;
            }
          }
        }
      }
    } while (l < nn - 1);
  }
  out.resize(n);
  for (int i = 0; i < n; ++i) out[i] = {wr[i], wi[i]};
}

std::vector<std::complex<double>> eigenvalues_or_stall(const Matrix& m) {
  if (!m.is_square() || m.empty()) throw DimensionError("eigenvalues: expected a non-empty square matrix");
  if (!m.all_finite()) throw PreconditionError("eigenvalues: non-finite entry");
  Matrix a = m;
  balance(a);
  to_hessenberg(a);
  std::vector<std::complex<double>> out;
  hessenberg_qr(a, out);
  return out;
}

}  // namespace

std::vector<std::complex<double>> eigenvalues(const Matrix& m) {
  try {
    return eigenvalues_or_stall(m);
  } catch (const QrStalled&) {
    throw NoConvergenceError("eigenvalues: QR iteration did not converge",
                             std::numeric_limits<double>::quiet_NaN());
  }
}

double spectral_radius_gelfand(const Matrix& m, double tol, int max_doublings) {
  if (!m.is_square() || m.empty()) throw DimensionError("spectral_radius: expected a non-empty square matrix");
  const double n0 = frobenius_norm(m);
  if (n0 == 0.0) return 0.0;
  // log_norm tracks log ||M^(2^k)||; `power` holds M^(2^k) scaled to unit norm.
  Matrix power = m * (1.0 / n0);
  double log_norm = std::log(n0);
  double estimate = n0;
  double exponent = 1.0;
  for (int k = 1; k <= max_doublings; ++k) {
    Matrix sq = power * power;
    const double ns = frobenius_norm(sq);
    if (ns == 0.0) return 0.0;  // nilpotent
    log_norm = 2.0 * log_norm + std::log(ns);
    exponent *= 2.0;
    power = sq * (1.0 / ns);
    const double next = std::exp(log_norm / exponent);
    if (std::abs(next - estimate) <= tol * next) return next;
    estimate = next;
  }
  throw NoConvergenceError("spectral_radius: Gelfand iteration did not converge", estimate);
}

double spectral_radius(const Matrix& m, double tol) {
  if (!m.is_square() || m.empty()) {
    throw DimensionError("spectral_radius: expected a non-empty square matrix, got " +
                         std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
  try {
    double rho = 0.0;
    for (const auto& ev : eigenvalues_or_stall(m)) rho = std::max(rho, std::abs(ev));
    return rho;
  } catch (const QrStalled&) {
    return spectral_radius_gelfand(m, tol);
  }
}

}  // namespace looplab
