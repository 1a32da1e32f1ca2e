#include "looplab/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "looplab/rng.hpp"

namespace looplab {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
  }
}

void require_square(const Matrix& m, const char* op) {
  if (!m.is_square() || m.empty()) {
    throw DimensionError(std::string(op) + ": expected a non-empty square matrix, got " +
                         std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

// Row i of a*b, accumulated in a fixed order so serial and parallel products agree.
inline void matmul_row(const Matrix& a, const Matrix& b, Matrix& out, std::size_t i) {
  const std::size_t inner = a.cols();
  const std::size_t n = b.cols();
  double* orow = out.row(i).data();
  const double* arow = a.row(i).data();
  for (std::size_t k = 0; k < inner; ++k) {
    const double aik = arow[k];
    if (aik == 0.0) continue;
    const double* brow = b.row(k).data();
    for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
  }
}

void check_matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.rows()) + ")");
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }
  if (!all_finite()) throw PreconditionError("Matrix: non-finite entry");
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
  Matrix m(diag.size(), diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  if (!m.all_finite()) throw PreconditionError("Matrix: non-finite entry");
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("Matrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::column(std::span<const double> values) {
  return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::gaussian(std::size_t rows, std::size_t cols, Rng& rng, double stddev) {
  Matrix m(rows, cols);
  for (auto& v : m.data_) v = stddev * rng.normal();
  return m;
}

Matrix Matrix::orthogonal(std::size_t rows, std::size_t cols, Rng& rng) {
  if (cols > rows) throw DimensionError("Matrix::orthogonal: need rows >= cols");
  Matrix q = gaussian(rows, cols, rng);
  // Modified Gram-Schmidt, applied twice for orthogonality to working precision.
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t j = 0; j < cols; ++j) {
      for (std::size_t k = 0; k < j; ++k) {
        double dot = 0.0;
        for (std::size_t i = 0; i < rows; ++i) dot += q(i, k) * q(i, j);
        for (std::size_t i = 0; i < rows; ++i) q(i, j) -= dot * q(i, k);
      }
      double norm = 0.0;
      for (std::size_t i = 0; i < rows; ++i) norm += q(i, j) * q(i, j);
      norm = std::sqrt(norm);
      for (std::size_t i = 0; i < rows; ++i) q(i, j) /= norm;
    }
  }
  return q;
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

Matrix Matrix::col(std::size_t c) const {
  Matrix out(rows_, 1);
  for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, c);
  return out;
}

void Matrix::set_col(std::size_t c, const Matrix& column) {
  if (column.size() != rows_) throw DimensionError("Matrix::set_col: length mismatch");
  for (std::size_t i = 0; i < rows_; ++i) (*this)(i, c) = column[i];
}

void Matrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix& Matrix::operator+=(const Matrix& other) {
  require_same_shape(*this, other, "operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  require_same_shape(*this, other, "operator-=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (auto& v : data_) v *= s;
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }
Matrix operator*(double s, Matrix a) { return a *= s; }
Matrix operator*(const Matrix& a, const Matrix& b) { return matmul(a, b); }

Matrix matmul_reference(const Matrix& a, const Matrix& b) {
  check_matmul(a, b);
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) matmul_row(a, b, out, i);
  return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  check_matmul(a, b);
  Matrix out(a.rows(), b.cols());
  const long rows = static_cast<long>(a.rows());
  const double work = static_cast<double>(a.rows()) * a.cols() * b.cols();
#pragma omp parallel for schedule(static) if (work > 2.0e6)
  for (long i = 0; i < rows; ++i) matmul_row(a, b, out, static_cast<std::size_t>(i));
  return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "hadamard");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

double frobenius_norm(const Matrix& m) {
  // Scaled accumulation avoids overflow for large entries.
  double scale = max_abs(m);
  if (scale == 0.0 || !std::isfinite(scale)) return scale;
  double sum = 0.0;
  for (double v : m.data()) {
    const double r = v / scale;
    sum += r * r;
  }
  return scale * std::sqrt(sum);
}

double max_abs(const Matrix& m) {
  double best = 0.0;
  for (double v : m.data()) best = std::max(best, std::abs(v));
  return best;
}

double spectral_norm(const Matrix& m) {
  if (m.empty()) return 0.0;
  const double scale = max_abs(m);
  if (scale == 0.0) return 0.0;
  const Matrix s = m * (1.0 / scale);
  const Matrix gram = s.rows() >= s.cols() ? s.transpose() * s : s * s.transpose();
  return scale * std::sqrt(spectral_radius(gram));
}

Matrix solve(const Matrix& m, const Matrix& b) {
  require_square(m, "solve");
  if (b.rows() != m.rows()) throw DimensionError("solve: right-hand side has wrong row count");
  const std::size_t n = m.rows();
  Matrix lu = m;
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  const double scale = std::max(max_abs(m), 1e-300);
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(lu(i, k)) > std::abs(lu(piv, k))) piv = i;
    if (std::abs(lu(piv, k)) <= 1e-14 * scale) {
      throw SingularMatrixError("solve: matrix is singular to working precision (pivot " +
                                std::to_string(k) + ")");
    }
    if (piv != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(lu(k, j), lu(piv, j));
      std::swap(perm[k], perm[piv]);
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = lu(i, k) / lu(k, k);
      lu(i, k) = f;
      if (f == 0.0) continue;
      for (std::size_t j = k + 1; j < n; ++j) lu(i, j) -= f * lu(k, j);
    }
  }

  auto substitute = [&](const Matrix& rhs) {
    Matrix x(n, rhs.cols());
    for (std::size_t c = 0; c < rhs.cols(); ++c) {
      for (std::size_t i = 0; i < n; ++i) {
        double s = rhs(perm[i], c);
        for (std::size_t j = 0; j < i; ++j) s -= lu(i, j) * x(j, c);
        x(i, c) = s;
      }
      for (std::size_t ii = n; ii-- > 0;) {
        double s = x(ii, c);
        for (std::size_t j = ii + 1; j < n; ++j) s -= lu(ii, j) * x(j, c);
        x(ii, c) = s / lu(ii, ii);
      }
    }
    return x;
  };

  Matrix x = substitute(b);
  for (int round = 0; round < 2; ++round) {
    const Matrix residual = b - m * x;
    x += substitute(residual);
  }
  return x;
}

Matrix inverse(const Matrix& m) {
  require_square(m, "inverse");
  return solve(m, Matrix::identity(m.rows()));
}

Matrix resolvent_apply(const Matrix& a, const Matrix& b) {
  require_square(a, "resolvent_apply");
  Matrix i_minus_a = Matrix::identity(a.rows()) - a;
  try {
    return solve(i_minus_a, b);
  } catch (const SingularMatrixError&) {
    throw SingularMatrixError("resolvent_apply: (I - a) is singular");
  }
}

std::size_t rank(const Matrix& m, double tol) {
  Matrix w = m;
  const std::size_t rows = w.rows();
  const std::size_t cols = w.cols();
  const std::size_t steps = std::min(rows, cols);
  double first_pivot = 0.0;
  std::size_t r = 0;
  for (std::size_t k = 0; k < steps; ++k) {
    std::size_t pr = k, pc = k;
    double best = 0.0;
    for (std::size_t i = k; i < rows; ++i)
      for (std::size_t j = k; j < cols; ++j)
        if (std::abs(w(i, j)) > best) {
          best = std::abs(w(i, j));
          pr = i;
          pc = j;
        }
    if (k == 0) first_pivot = best;
    if (best == 0.0 || best <= tol * first_pivot) break;
    if (pr != k)
      for (std::size_t j = 0; j < cols; ++j) std::swap(w(k, j), w(pr, j));
    if (pc != k)
      for (std::size_t i = 0; i < rows; ++i) std::swap(w(i, k), w(i, pc));
    for (std::size_t i = k + 1; i < rows; ++i) {
      const double f = w(i, k) / w(k, k);
      if (f == 0.0) continue;
      for (std::size_t j = k; j < cols; ++j) w(i, j) -= f * w(k, j);
    }
    ++r;
  }
  return r;
}

Matrix flatten(const Matrix& state) {
  const std::size_t d = state.rows();
  const std::size_t L = state.cols();
  Matrix flat(d * L, 1);
  for (std::size_t c = 0; c < L; ++c)
    for (std::size_t i = 0; i < d; ++i) flat[c * d + i] = state(i, c);
  return flat;
}

Matrix unflatten(const Matrix& flat, std::size_t d, std::size_t L) {
  if (flat.size() != d * L) throw DimensionError("unflatten: length does not match d*L");
  Matrix state(d, L);
  for (std::size_t c = 0; c < L; ++c)
    for (std::size_t i = 0; i < d; ++i) state(i, c) = flat[c * d + i];
  return state;
}

Matrix block_diag_repeat(const Matrix& block, std::size_t L) {
  const std::size_t r = block.rows();
  const std::size_t c = block.cols();
  Matrix out(r * L, c * L);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out(t * r + i, t * c + j) = block(i, j);
  return out;
}

}  // namespace looplab
