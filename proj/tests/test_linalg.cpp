#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "looplab/linalg.hpp"
#include "looplab/rng.hpp"
#include "oracles.hpp"

using namespace looplab;
using looplab::testing::gram_determinant;
using looplab::testing::naive_product;
using looplab::testing::neumann_series;
using looplab::testing::random_with_radius;

namespace {

double eigen_oracle_radius(const Matrix& m) {
  Eigen::MatrixXd e(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
  return e.eigenvalues().cwiseAbs().maxCoeff();
}

Matrix matrix_power(const Matrix& m, int k) {
  Matrix out = Matrix::identity(m.rows());
  for (int i = 0; i < k; ++i) out = out * m;
  return out;
}

}  // namespace

TEST_CASE("Matrix construction rejects bad data") {
  CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>{1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Matrix(1, 2, std::vector<double>{1, NAN}), PreconditionError);
  CHECK_THROWS_AS(Matrix(1, 1, std::vector<double>{INFINITY}), PreconditionError);
  CHECK_THROWS_AS(Matrix::from_rows({{1, 2}, {3}}), DimensionError);
}

TEST_CASE("spectral_radius on closed-form cases") {
  CHECK(spectral_radius(Matrix::identity(3)) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(spectral_radius(Matrix::from_rows({{0.5, 0}, {0, -0.8}})) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(spectral_radius(Matrix::from_rows({{0, -0.7}, {0.7, 0}})) == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(spectral_radius(Matrix(4, 4)) == 0.0);
  CHECK(spectral_radius(Matrix::from_rows({{0, 1}, {0, 0}})) == doctest::Approx(0.0));
}

TEST_CASE("spectral_radius rejects non-square input") {
  CHECK_THROWS_AS(spectral_radius(Matrix(2, 3)), DimensionError);
  CHECK_THROWS_AS(spectral_radius(Matrix()), DimensionError);
}

TEST_CASE("spectral_radius agrees with an independent eigensolver") {
  Rng rng(11);
  for (std::size_t n : {2u, 3u, 5u, 8u, 17u, 40u}) {
    for (int trial = 0; trial < 10; ++trial) {
      const Matrix m = Matrix::gaussian(n, n, rng);
      const double ours = spectral_radius(m);
      const double ref = eigen_oracle_radius(m);
      CHECK(std::abs(ours - ref) <= 1e-9 * ref);
    }
  }
}

TEST_CASE("spectral_radius scales with |c| and with matrix powers") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix m = Matrix::gaussian(8, 8, rng);
    const double c = rng.uniform(-3.0, 3.0);
    const double rho = spectral_radius(m);
    CHECK(std::abs(spectral_radius(m * c) - std::abs(c) * rho) <= 1e-8 * std::abs(c) * rho);
    for (int k : {2, 3}) {
      const double expected = std::pow(rho, k);
      CHECK(std::abs(spectral_radius(matrix_power(m, k)) - expected) <= 1e-6 * expected);
    }
  }
}

TEST_CASE("Gelfand fallback converges to the same radius") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix m = Matrix::gaussian(6, 6, rng);
    const double ref = eigen_oracle_radius(m);
    CHECK(spectral_radius_gelfand(m, 1e-12) == doctest::Approx(ref).epsilon(1e-6));
  }
  CHECK(spectral_radius_gelfand(Matrix::from_rows({{0, -0.7}, {0.7, 0}})) == doctest::Approx(0.7));
  CHECK(spectral_radius_gelfand(Matrix::from_rows({{0, 1}, {0, 0}})) == 0.0);
}

TEST_CASE("eigenvalues returns conjugate pairs of a rotation") {
  const auto ev = eigenvalues(Matrix::from_rows({{0, -2}, {2, 0}}));
  REQUIRE(ev.size() == 2);
  CHECK(std::abs(ev[0].real()) < 1e-12);
  CHECK(std::abs(std::abs(ev[0].imag()) - 2.0) < 1e-12);
  CHECK(ev[0].imag() == doctest::Approx(-ev[1].imag()));
}

TEST_CASE("resolvent_apply closed-form cases") {
  const Matrix b = Matrix::from_rows({{1, 2}, {3, 4}});
  CHECK(resolvent_apply(Matrix(2, 2), b) == b);
  const Matrix x = resolvent_apply(Matrix::from_rows({{0.5}}), Matrix::from_rows({{1.0}}));
  CHECK(x[0] == doctest::Approx(2.0).epsilon(1e-14));
}

TEST_CASE("resolvent_apply matches the Neumann series oracle") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_with_radius(4, 0.6, rng);
    const Matrix b = Matrix::gaussian(4, 3, rng);
    const Matrix x = resolvent_apply(a, b);
    const Matrix oracle = neumann_series(a, b, 200);
    // Non-normal draws can have a slowly decaying transient; only check
    // the series when it has visibly converged.
    const Matrix tail = neumann_series(a, b, 400) - oracle;
    if (max_abs(tail) < 1e-12) CHECK(max_abs(x - oracle) <= 1e-9);
    const Matrix residual = (Matrix::identity(4) - a) * x - b;
    CHECK(frobenius_norm(residual) <= 1e-10 * frobenius_norm(b));
  }
}

TEST_CASE("resolvent_apply detects singular I - a") {
  CHECK_THROWS_AS(resolvent_apply(Matrix::identity(3), Matrix(3, 1, 1.0)), SingularMatrixError);
  CHECK_THROWS_AS(resolvent_apply(Matrix(2, 3), Matrix(2, 1)), DimensionError);
}

TEST_CASE("rank on closed-form cases") {
  CHECK(rank(Matrix::identity(4)) == 4);
  const Matrix u = Matrix::from_rows({{1}, {2}, {-3}});
  const Matrix v = Matrix::from_rows({{4, 0.5, -1, 2}});
  CHECK(rank(u * v) == 1);
  CHECK(rank(Matrix(3, 3)) == 0);
}

TEST_CASE("rank of random tall matrices matches the Gram determinant oracle") {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix m = Matrix::gaussian(6, 3, rng);
    REQUIRE(gram_determinant(m) > 1e-8);
    CHECK(rank(m) == 3);
  }
}

TEST_CASE("rank is invariant under row permutation and nonzero scaling") {
  Rng rng(29);
  for (int trial = 0; trial < 30; ++trial) {
    // Rank-2 matrix of shape 5x4.
    const Matrix m = Matrix::gaussian(5, 2, rng) * Matrix::gaussian(2, 4, rng);
    Matrix shuffled(5, 4);
    const std::size_t perm[5] = {3, 0, 4, 1, 2};
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 4; ++j) shuffled(i, j) = m(perm[i], j) * (i + 1.5);
    CHECK(rank(m) == 2);
    CHECK(rank(shuffled) == rank(m));
    CHECK(rank(m * -7.0) == rank(m));
  }
}

TEST_CASE("parallel and reference matmul agree bit for bit") {
  Rng rng(31);
  const Matrix a = Matrix::gaussian(150, 130, rng);
  const Matrix b = Matrix::gaussian(130, 140, rng);
  const Matrix fast = matmul(a, b);
  CHECK(fast == matmul_reference(a, b));
  CHECK(max_abs(fast - naive_product(a, b)) < 1e-10);
  CHECK_THROWS_AS(matmul(a, a), DimensionError);
}

TEST_CASE("spectral_norm of a diagonal matrix") {
  CHECK(spectral_norm(Matrix::from_rows({{3, 0}, {0, -5}})) == doctest::Approx(5.0));
  CHECK(spectral_norm(Matrix::from_rows({{1, 1}})) == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("flatten is token-major") {
  const Matrix s = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}});
  const Matrix f = flatten(s);
  CHECK(f[0] == 1);
  CHECK(f[1] == 4);
  CHECK(f[2] == 2);
  CHECK(f[5] == 6);
  CHECK(unflatten(f, 2, 3) == s);
}

TEST_CASE("Rng streams are reproducible") {
  std::uint64_t state = 0;
  CHECK(splitmix64(state) == 0xe220a8397b1dcdafULL);
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  CHECK(Rng(42).next_u64() != c.next_u64());
  Rng s1 = Rng::substream(7, 1, 2), s2 = Rng::substream(7, 1, 2), s3 = Rng::substream(7, 2, 1);
  CHECK(s1.next_u64() == s2.next_u64());
  CHECK(Rng::substream(7, 1, 2).next_u64() != s3.next_u64());
}

TEST_CASE("Rng distributions have the right moments") {
  Rng rng(99);
  const int n = 100000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  CHECK(std::abs(mean) < 3.0 / std::sqrt(double(n)));
  CHECK(std::abs(sq / n - 1.0) < 0.02);
  for (int i = 0; i < 1000; ++i) {
    const auto k = rng.uniform_int(-2, 3);
    CHECK(k >= -2);
    CHECK(k <= 3);
  }
}

TEST_CASE("orthogonal matrices have orthonormal columns") {
  Rng rng(2);
  const Matrix q = Matrix::orthogonal(6, 6, rng);
  CHECK(max_abs(q.transpose() * q - Matrix::identity(6)) < 1e-12);
}
