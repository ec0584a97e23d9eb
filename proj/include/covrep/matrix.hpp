#pragma once

// Small dense row-major matrix type plus the handful of kernels the rest of
// the library leans on: GEMM in the loop order that vectorizes well, and a
// Cholesky factor/solve/invert for SPD systems.

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <vector>

namespace covrep {

struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), a(std::size_t(r) * c, 0.0) {}

  double& operator()(int i, int j) { return a[std::size_t(i) * cols + j]; }
  double operator()(int i, int j) const { return a[std::size_t(i) * cols + j]; }

  double* row(int i) { return a.data() + std::size_t(i) * cols; }
  const double* row(int i) const { return a.data() + std::size_t(i) * cols; }

  static Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
};

inline void check_mul(int an, int bn) {
  if (an != bn) throw std::invalid_argument("matmul: inner dims disagree");
}

// C += A * B, i-k-j order so the inner loop runs down contiguous rows.
inline void matmul_acc(const Matrix& A, const Matrix& B, Matrix& C) {
  check_mul(A.cols, B.rows);
  for (int i = 0; i < A.rows; ++i) {
    const double* ai = A.row(i);
    double* ci = C.row(i);
    for (int k = 0; k < A.cols; ++k) {
      const double aik = ai[k];
      const double* bk = B.row(k);
      for (int j = 0; j < B.cols; ++j) ci[j] += aik * bk[j];
    }
  }
}

inline Matrix matmul(const Matrix& A, const Matrix& B) {
  Matrix C(A.rows, B.cols);
  matmul_acc(A, B, C);
  return C;
}

// C += A^T * B without forming the transpose.
inline void matmul_tn_acc(const Matrix& A, const Matrix& B, Matrix& C) {
  check_mul(A.rows, B.rows);
  for (int k = 0; k < A.rows; ++k) {
    const double* ak = A.row(k);
    const double* bk = B.row(k);
    for (int i = 0; i < A.cols; ++i) {
      const double aki = ak[i];
      double* ci = C.row(i);
      for (int j = 0; j < B.cols; ++j) ci[j] += aki * bk[j];
    }
  }
}

inline Matrix matmul_tn(const Matrix& A, const Matrix& B) {
  Matrix C(A.cols, B.cols);
  matmul_tn_acc(A, B, C);
  return C;
}

// C += A * B^T; inner loop is a dot product of two contiguous rows.
inline void matmul_nt_acc(const Matrix& A, const Matrix& B, Matrix& C) {
  check_mul(A.cols, B.cols);
  for (int i = 0; i < A.rows; ++i) {
    const double* ai = A.row(i);
    double* ci = C.row(i);
    for (int j = 0; j < B.rows; ++j) {
      const double* bj = B.row(j);
      double acc = 0.0;
      for (int k = 0; k < A.cols; ++k) acc += ai[k] * bj[k];
      ci[j] += acc;
    }
  }
}

inline Matrix matmul_nt(const Matrix& A, const Matrix& B) {
  Matrix C(A.rows, B.rows);
  matmul_nt_acc(A, B, C);
  return C;
}

// Lower-triangular Cholesky factor of an SPD matrix; nullopt if a pivot
// is not strictly positive.
inline std::optional<Matrix> cholesky(const Matrix& S) {
  if (S.rows != S.cols) throw std::invalid_argument("cholesky: square only");
  const int n = S.rows;
  Matrix L(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double sum = S(i, j);
      for (int k = 0; k < j; ++k) sum -= L(i, k) * L(j, k);
      if (i == j) {
        if (sum <= 0.0) return std::nullopt;
        L(i, i) = std::sqrt(sum);
      } else {
        L(i, j) = sum / L(j, j);
      }
    }
  }
  return L;
}

// Solves (L L^T) x = b given the Cholesky factor L.
inline std::vector<double> chol_solve(const Matrix& L,
                                      const std::vector<double>& b) {
  const int n = L.rows;
  std::vector<double> y(n);
  for (int i = 0; i < n; ++i) {
    double sum = b[i];
    for (int k = 0; k < i; ++k) sum -= L(i, k) * y[k];
    y[i] = sum / L(i, i);
  }
  std::vector<double> x(n);
  for (int i = n - 1; i >= 0; --i) {
    double sum = y[i];
    for (int k = i + 1; k < n; ++k) sum -= L(k, i) * x[k];
    x[i] = sum / L(i, i);
  }
  return x;
}

// Inverse of (L L^T) from the Cholesky factor: columns solved one at a time.
inline Matrix chol_inverse(const Matrix& L) {
  const int n = L.rows;
  Matrix inv(n, n);
  std::vector<double> e(n, 0.0);
  for (int j = 0; j < n; ++j) {
    e[j] = 1.0;
    std::vector<double> col = chol_solve(L, e);
    e[j] = 0.0;
    for (int i = 0; i < n; ++i) inv(i, j) = col[i];
  }
  return inv;
}

}  // namespace covrep
