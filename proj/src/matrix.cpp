// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#include "smoe/matrix.hpp"

#include <cmath>
#include <utility>

#include "smoe/errors.hpp"
#include "smoe/kernels.hpp"

namespace smoe {

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> d)
    : rows(r), cols(c), data(std::move(d)) {
  if (data.size() != rows * cols)
    throw ShapeError("Matrix: data length does not match rows*cols");
}

bool Matrix::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

Matrix identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
  return m;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw ShapeError("matmul: inner dimensions disagree");
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* ci = c.row(i);
    const double* ai = a.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      kernels::axpy(ai[k], b.row(k), ci, b.cols);
    }
  }
  return c;
}

void matvec(const Matrix& a, std::span<const double> x, std::span<double> y) {
  if (x.size() != a.cols || y.size() != a.rows)
    throw ShapeError("matvec: vector length does not match matrix shape");
  for (std::size_t i = 0; i < a.rows; ++i)
    y[i] = kernels::dot(a.row(i), x.data(), a.cols);
}

std::vector<double> matvec(const Matrix& a, std::span<const double> x) {
  std::vector<double> y(a.rows);
  matvec(a, x, y);
  return y;
}

Matrix hconcat(const std::vector<Matrix>& mats) {
  if (mats.empty()) throw ShapeError("hconcat: empty input");
  const std::size_t rows = mats.front().rows;
  std::size_t cols = 0;
  for (const Matrix& m : mats) {
    if (m.rows != rows) throw ShapeError("hconcat: row counts disagree");
    cols += m.cols;
  }
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    double* dst = out.row(i);
    for (const Matrix& m : mats) {
      const double* src = m.row(i);
      for (std::size_t j = 0; j < m.cols; ++j) dst[j] = src[j];
      dst += m.cols;
    }
  }
  return out;
}

Matrix col_block(const Matrix& a, std::size_t c0, std::size_t ncols) {
  if (c0 + ncols > a.cols) throw ShapeError("col_block: range out of bounds");
  Matrix out(a.rows, ncols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* src = a.row(i) + c0;
    double* dst = out.row(i);
    for (std::size_t j = 0; j < ncols; ++j) dst[j] = src[j];
  }
  return out;
}

Matrix top_rows(const Matrix& a, std::size_t nrows) {
  if (nrows > a.rows) throw ShapeError("top_rows: range out of bounds");
  Matrix out(nrows, a.cols);
  for (std::size_t i = 0; i < nrows; ++i) {
    const double* src = a.row(i);
    double* dst = out.row(i);
    for (std::size_t j = 0; j < a.cols; ++j) dst[j] = src[j];
  }
  return out;
}

Matrix gram_from_rows(const Matrix& a) {
  Matrix g(a.cols, a.cols);
  for (std::size_t t = 0; t < a.rows; ++t) {
    const double* x = a.row(t);
    for (std::size_t i = 0; i < a.cols; ++i) {
      kernels::axpy(x[i], x, g.row(i), a.cols);
    }
  }
  return g;
}

double frob_norm(const Matrix& a) {
  return std::sqrt(kernels::sumsq(a.data.data(), a.data.size()));
}

double frob_dist(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("frob_dist: shapes disagree");
  return std::sqrt(kernels::dist_sq(a.data.data(), b.data.data(), a.data.size()));
}

void add_scaled(Matrix& acc, const Matrix& x, double alpha) {
  if (!acc.same_shape(x)) throw ShapeError("add_scaled: shapes disagree");
  kernels::axpy(alpha, x.data.data(), acc.data.data(), x.data.size());
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine: lengths disagree");
  const double na = kernels::sumsq(a.data(), a.size());
  const double nb = kernels::sumsq(b.data(), b.size());
  if (na == 0.0 || nb == 0.0) return 0.0;
  return kernels::dot(a.data(), b.data(), a.size()) / std::sqrt(na * nb);
}

double l2_norm(std::span<const double> a) {
  return std::sqrt(kernels::sumsq(a.data(), a.size()));
}

}  // namespace smoe
