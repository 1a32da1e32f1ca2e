#pragma once

#include <complex>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "looplab/errors.hpp"

namespace looplab {

class Rng;

/// Dense row-major matrix of doubles.
///
/// A default-constructed matrix is empty (0x0) and marks an absent tensor;
/// every constructor that takes explicit data rejects NaN and Inf.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> diag);
  static Matrix diagonal(std::initializer_list<double> diag) { return diagonal(std::span<const double>(diag.begin(), diag.size())); }
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix column(std::span<const double> values);
  static Matrix gaussian(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0);
  /// Random matrix with orthonormal columns (rows >= cols), via Gram-Schmidt on
  /// a Gaussian draw.
  static Matrix orthogonal(std::size_t rows, std::size_t cols, Rng& rng);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool is_square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Matrix transpose() const;
  Matrix col(std::size_t c) const;
  void set_col(std::size_t c, const Matrix& column);
  void fill(double value);
  bool all_finite() const noexcept;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix operator*(double s, Matrix a);
/// Matrix product. Parallel over output rows with OpenMP for large operands;
/// bit-identical to `matmul_reference`.
Matrix operator*(const Matrix& a, const Matrix& b);
Matrix matmul(const Matrix& a, const Matrix& b);
/// Serial reference product kept for testing and benchmarking.
Matrix matmul_reference(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& m);
double max_abs(const Matrix& m);
/// Largest singular value.
double spectral_norm(const Matrix& m);

/// Spectral-radius defaults.
inline constexpr double kSpectralTol = 1e-9;
inline constexpr double kRankTol = 1e-10;

/// All eigenvalues of a square matrix (balancing, Hessenberg reduction, then
/// Francis double-shift QR). Throws NoConvergenceError if QR stalls.
std::vector<std::complex<double>> eigenvalues(const Matrix& m);

/// Largest eigenvalue modulus. Falls back to the Gelfand estimate
/// ||M^(2^k)||^(1/2^k) when QR stalls.
double spectral_radius(const Matrix& m, double tol = kSpectralTol);

/// Gelfand-formula estimate on its own; exposed for testing the fallback.
double spectral_radius_gelfand(const Matrix& m, double tol = kSpectralTol, int max_doublings = 64);

/// Solves (I - a) x = b.
Matrix resolvent_apply(const Matrix& a, const Matrix& b);

/// Solves m x = b with partial-pivot LU and one round of iterative refinement.
Matrix solve(const Matrix& m, const Matrix& b);
Matrix inverse(const Matrix& m);

/// Numerical rank by complete-pivot elimination; pivots below
/// tol * |first pivot| count as zero.
std::size_t rank(const Matrix& m, double tol = kRankTol);

/// Token-major flattening of a d x L state: column c occupies [c*d, (c+1)*d).
Matrix flatten(const Matrix& state);
Matrix unflatten(const Matrix& flat, std::size_t d, std::size_t L);

/// Block-diagonal (dL x dL) matrix with `block` repeated L times.
Matrix block_diag_repeat(const Matrix& block, std::size_t L);

}  // namespace looplab
