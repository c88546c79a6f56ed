// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace smoe {

/// Dense row-major matrix of doubles. Orientation convention is y = W x:
/// rows = output dimension O, cols = input dimension I.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> d);

  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  double* row(std::size_t i) { return data.data() + i * cols; }
  const double* row(std::size_t i) const { return data.data() + i * cols; }
  std::span<const double> row_span(std::size_t i) const { return {row(i), cols}; }
  std::span<double> row_span(std::size_t i) { return {row(i), cols}; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  bool all_finite() const;

  bool operator==(const Matrix& o) const = default;
};

Matrix identity(std::size_t n);
Matrix transpose(const Matrix& a);

/// C = A B. Throws ShapeError on inner-dimension mismatch.
Matrix matmul(const Matrix& a, const Matrix& b);

/// y = A x.
void matvec(const Matrix& a, std::span<const double> x, std::span<double> y);
std::vector<double> matvec(const Matrix& a, std::span<const double> x);

/// Concatenation along the input (column) axis; all inputs share rows.
Matrix hconcat(const std::vector<Matrix>& mats);

/// Copy of columns [c0, c0+ncols).
Matrix col_block(const Matrix& a, std::size_t c0, std::size_t ncols);

/// Copy of rows [0, nrows).
Matrix top_rows(const Matrix& a, std::size_t nrows);

/// G = sum over rows r of a: outer(r, r). For token-per-row activation
/// matrices this is X^T X, the (I x I) Gram of the column-vector convention.
Matrix gram_from_rows(const Matrix& a);

double frob_norm(const Matrix& a);
double frob_dist(const Matrix& a, const Matrix& b);

/// acc += alpha * x (same shape).
void add_scaled(Matrix& acc, const Matrix& x, double alpha);

/// Cosine of two vectors; 0 if either has zero norm.
double cosine(std::span<const double> a, std::span<const double> b);

double l2_norm(std::span<const double> a);

}  // namespace smoe
