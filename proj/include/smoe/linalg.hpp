// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "smoe/matrix.hpp"

namespace smoe {

/// Thin SVD a = u * diag(sigma) * vt with r = min(rows, cols).
/// sigma is non-negative and sorted non-increasing; u is rows x r with
/// orthonormal columns (zero columns only where sigma is exactly 0), vt is
/// r x cols with orthonormal rows.
struct SvdResult {
  Matrix u;
  std::vector<double> sigma;
  Matrix vt;
};

/// One-sided (Hestenes) Jacobi SVD. Accurate to a few ulps of ||a||, which is
/// what the decomposition-exactness invariants in this codebase lean on.
/// Throws NumericError on non-finite input.
SvdResult svd_thin(const Matrix& a);

/// u[:, :rank] * diag(sigma[:rank]) * vt[:rank, :]
Matrix svd_reconstruct(const SvdResult& s, std::size_t rank);

/// Lower-triangular Cholesky factor of an SPD matrix. Throws NumericError if
/// a pivot is not strictly positive.
Matrix cholesky_lower(const Matrix& gram);

/// Returns b * lower^{-1} via row-wise back substitution against the
/// transposed factor; the inverse is never formed.
Matrix solve_right_lower(const Matrix& b, const Matrix& lower);

}  // namespace smoe
