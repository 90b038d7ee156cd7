#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <vector>

#include "pbt/errors.hpp"

namespace pbt {

// Dense row-major matrix of doubles. Vectors are 1xN rows throughout the
// library so bias broadcasting works the same for single rows and token
// matrices.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

  static Mat zeros(int r, int c) { return Mat(r, c); }

  static Mat row(std::vector<double> v) {
    Mat m;
    m.rows = 1;
    m.cols = static_cast<int>(v.size());
    m.a = std::move(v);
    return m;
  }

  double& operator()(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }

  size_t size() const { return a.size(); }
  bool empty() const { return a.empty(); }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

  void fill(double v) { std::fill(a.begin(), a.end(), v); }

  bool all_finite() const {
    for (double v : a)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline Mat matmul_nn(const Mat& A, const Mat& B) {
  assert(A.cols == B.rows);
  Mat C(A.rows, B.cols);
  for (int i = 0; i < A.rows; ++i) {
    for (int k = 0; k < A.cols; ++k) {
      const double av = A(i, k);
      if (av == 0.0) continue;
      const double* brow = &B.a[static_cast<size_t>(k) * B.cols];
      double* crow = &C.a[static_cast<size_t>(i) * C.cols];
      for (int j = 0; j < B.cols; ++j) crow[j] += av * brow[j];
    }
  }
  return C;
}

// A * B^T
inline Mat matmul_nt(const Mat& A, const Mat& B) {
  assert(A.cols == B.cols);
  Mat C(A.rows, B.rows);
  for (int i = 0; i < A.rows; ++i) {
    const double* arow = &A.a[static_cast<size_t>(i) * A.cols];
    for (int j = 0; j < B.rows; ++j) {
      const double* brow = &B.a[static_cast<size_t>(j) * B.cols];
      double s = 0.0;
      for (int k = 0; k < A.cols; ++k) s += arow[k] * brow[k];
      C(i, j) = s;
    }
  }
  return C;
}

// A^T * B
inline Mat matmul_tn(const Mat& A, const Mat& B) {
  assert(A.rows == B.rows);
  Mat C(A.cols, B.cols);
  for (int k = 0; k < A.rows; ++k) {
    const double* arow = &A.a[static_cast<size_t>(k) * A.cols];
    const double* brow = &B.a[static_cast<size_t>(k) * B.cols];
    for (int i = 0; i < A.cols; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = &C.a[static_cast<size_t>(i) * C.cols];
      for (int j = 0; j < B.cols; ++j) crow[j] += av * brow[j];
    }
  }
  return C;
}

inline void add_inplace(Mat& dst, const Mat& src) {
  assert(dst.same_shape(src));
  for (size_t i = 0; i < dst.a.size(); ++i) dst.a[i] += src.a[i];
}

}  // namespace pbt
