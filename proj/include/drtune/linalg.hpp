#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "drtune/error.hpp"

namespace drtune {

using Vector = std::vector<double>;

inline bool all_finite(std::span<const double> xs) {
  for (double x : xs) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

/// Dense row-major matrix of 64-bit reals. Shapes are (samples x dim)
/// unless noted otherwise.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, ErrorKind::dimension_mismatch,
            "matrix: data length " + std::to_string(data_.size()) +
                " does not match shape " + std::to_string(rows_) + "x" +
                std::to_string(cols_));
    require(all_finite(data_), ErrorKind::invalid_argument,
            "matrix: non-finite entry");
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix from_rows(const std::vector<Vector>& rows) {
    require(!rows.empty(), ErrorKind::invalid_argument, "matrix: no rows");
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i].size() == m.cols(), ErrorKind::dimension_mismatch,
              "matrix: ragged rows");
      std::copy(rows[i].begin(), rows[i].end(), m.row(i).begin());
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) {
    assert(r < rows_);
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const {
    assert(r < rows_);
    return {data_.data() + r * cols_, cols_};
  }

  Vector row_vector(std::size_t r) const {
    auto s = row(r);
    return Vector(s.begin(), s.end());
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  assert(a.size() == b.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

inline double norm(std::span<const double> a) { return std::sqrt(squared_norm(a)); }

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  assert(a.size() == b.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline Vector add(const Vector& a, const Vector& b) {
  require(a.size() == b.size(), ErrorKind::dimension_mismatch, "add: size mismatch");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline Vector sub(const Vector& a, const Vector& b) {
  require(a.size() == b.size(), ErrorKind::dimension_mismatch, "sub: size mismatch");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

inline Vector scaled(const Vector& a, double s) {
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), ErrorKind::dimension_mismatch,
          "matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
              " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto brow = b.row(k);
      auto orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

/// m * v with v treated as a column vector.
inline Vector matvec(const Matrix& m, const Vector& v) {
  require(m.cols() == v.size(), ErrorKind::dimension_mismatch,
          "matvec: matrix cols " + std::to_string(m.cols()) + " vs vector dim " +
              std::to_string(v.size()));
  Vector out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out[i] = dot(m.row(i), v);
  return out;
}

/// m^T * v without forming the transpose.
inline Vector matvec_transposed(const Matrix& m, const Vector& v) {
  require(m.rows() == v.size(), ErrorKind::dimension_mismatch,
          "matvec_transposed: matrix rows " + std::to_string(m.rows()) +
              " vs vector dim " + std::to_string(v.size()));
  Vector out(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double vi = v[i];
    if (vi == 0.0) continue;
    const auto mrow = m.row(i);
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += vi * mrow[j];
  }
  return out;
}

inline double frobenius_norm(const Matrix& m) { return norm(m.data()); }

inline double frobenius_distance(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), ErrorKind::dimension_mismatch,
          "frobenius_distance: shape mismatch");
  return std::sqrt(squared_distance(a.data(), b.data()));
}

/// ||m m^T - I||_F; zero for orthogonal matrices.
inline double orthogonality_error(const Matrix& m) {
  require(m.rows() == m.cols(), ErrorKind::invalid_argument,
          "orthogonality_error: matrix is not square");
  const Matrix mmt = matmul(m, transpose(m));
  double s = 0.0;
  for (std::size_t i = 0; i < mmt.rows(); ++i) {
    for (std::size_t j = 0; j < mmt.cols(); ++j) {
      const double d = mmt(i, j) - (i == j ? 1.0 : 0.0);
      s += d * d;
    }
  }
  return std::sqrt(s);
}

struct SvdResult {
  Matrix u;   // rows x r, orthonormal columns
  Vector s;   // r singular values, non-negative, non-increasing
  Matrix vt;  // r x cols, orthonormal rows
};

namespace detail {

inline double col_dot(const Matrix& m, std::size_t p, std::size_t q) {
  double s = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) s += m(i, p) * m(i, q);
  return s;
}

inline void rotate_cols(Matrix& m, std::size_t p, std::size_t q, double c, double s) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double xp = m(i, p);
    const double xq = m(i, q);
    m(i, p) = c * xp - s * xq;
    m(i, q) = s * xp + c * xq;
  }
}

// Writes into column `col` a unit vector orthogonal to columns [0, col):
// the standard basis vector with the largest residual after Gram-Schmidt
// (that residual is at least 1/sqrt(n) when the prefix is orthonormal).
inline void complete_orthonormal_column(Matrix& u, std::size_t col) {
  const std::size_t n = u.rows();
  Vector best;
  double best_norm = 0.0;
  for (std::size_t cand = 0; cand < n; ++cand) {
    Vector v(n, 0.0);
    v[cand] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < col; ++j) {
        double proj = 0.0;
        for (std::size_t i = 0; i < n; ++i) proj += u(i, j) * v[i];
        for (std::size_t i = 0; i < n; ++i) v[i] -= proj * u(i, j);
      }
    }
    const double nv = norm(v);
    if (nv > best_norm) {
      best_norm = nv;
      best = std::move(v);
    }
  }
  require(best_norm > 1e-6, ErrorKind::non_convergence,
          "svd: failed to complete orthonormal basis");
  for (std::size_t i = 0; i < n; ++i) u(i, col) = best[i] / best_norm;
}

}  // namespace detail

/// Thin SVD via one-sided Jacobi: m = u * diag(s) * vt with r = min(rows, cols).
/// Singular values come back sorted non-increasing.
inline SvdResult svd(const Matrix& m) {
  require(m.rows() >= 1 && m.cols() >= 1, ErrorKind::invalid_argument,
          "svd: empty matrix");
  if (m.rows() < m.cols()) {
    SvdResult t = svd(transpose(m));
    return SvdResult{transpose(t.vt), std::move(t.s), transpose(t.u)};
  }

  const std::size_t n = m.cols();
  Matrix b = m;                      // columns get orthogonalized in place
  Matrix v = Matrix::identity(n);    // accumulates right rotations

  constexpr double kRelTol = 1e-14;
  constexpr int kMaxSweeps = 64;

  double residual = 0.0;
  bool converged = false;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    converged = true;
    residual = 0.0;
    // Columns this far below the dominant scale are numerically zero; their
    // residual coupling is rounding noise and rotating them can stall.
    double max_norm2 = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      max_norm2 = std::max(max_norm2, detail::col_dot(b, j, j));
    const double dead_cutoff =
        max_norm2 * std::numeric_limits<double>::epsilon() *
        std::numeric_limits<double>::epsilon();
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double app = detail::col_dot(b, p, p);
        const double aqq = detail::col_dot(b, q, q);
        const double apq = detail::col_dot(b, p, q);
        if (app <= dead_cutoff || aqq <= dead_cutoff) continue;
        const double rel = std::abs(apq) / std::sqrt(app * aqq);
        residual = std::max(residual, rel);
        if (rel <= kRelTol) continue;
        converged = false;
        const double zeta = (aqq - app) / (2.0 * apq);
        const double t =
            (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        detail::rotate_cols(b, p, q, c, s);
        detail::rotate_cols(v, p, q, c, s);
      }
    }
  }
  require(converged, ErrorKind::non_convergence,
          "svd: Jacobi sweeps did not converge, residual " + std::to_string(residual));

  // Singular values = column norms, sorted non-increasing.
  Vector raw(n);
  for (std::size_t j = 0; j < n; ++j) raw[j] = std::sqrt(detail::col_dot(b, j, j));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t c) { return raw[a] > raw[c]; });

  SvdResult out;
  out.s.resize(n);
  out.u = Matrix(m.rows(), n);
  out.vt = Matrix(n, n);
  // Anything at rounding-noise scale is a true zero: its column was never
  // orthogonalized against the rest, so U gets a completed basis vector.
  const double smax = raw[order[0]];
  const double null_tol = smax * 8.0 * std::numeric_limits<double>::epsilon();
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    out.s[j] = raw[src];
    for (std::size_t k = 0; k < n; ++k) out.vt(j, k) = v(k, src);
    if (raw[src] > null_tol && raw[src] > 0.0) {
      for (std::size_t i = 0; i < m.rows(); ++i) out.u(i, j) = b(i, src) / raw[src];
    } else {
      out.s[j] = 0.0;
      detail::complete_orthonormal_column(out.u, j);
    }
  }
  return out;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over (seed, stream)
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Random orthogonal matrix: Gram-Schmidt over a Gaussian draw, with one
/// re-orthogonalization pass.
inline Matrix random_orthogonal(std::size_t d, std::mt19937_64& rng) {
  require(d >= 1, ErrorKind::invalid_argument, "random_orthogonal: d must be >= 1");
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix q(d, d);
  for (std::size_t col = 0; col < d; ++col) {
    Vector v(d);
    for (std::size_t i = 0; i < d; ++i) v[i] = gauss(rng);
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < col; ++j) {
        double proj = 0.0;
        for (std::size_t i = 0; i < d; ++i) proj += q(i, j) * v[i];
        for (std::size_t i = 0; i < d; ++i) v[i] -= proj * q(i, j);
      }
    }
    double nv = norm(v);
    if (nv < 1e-8) {  // astronomically unlikely; redraw this column
      --col;
      continue;
    }
    for (std::size_t i = 0; i < d; ++i) q(i, col) = v[i] / nv;
  }
  return q;
}

inline Matrix random_orthogonal(std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0x0f0f));
  return random_orthogonal(d, rng);
}

}  // namespace drtune
