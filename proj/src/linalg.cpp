// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#include "smoe/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "smoe/errors.hpp"
#include "smoe/kernels.hpp"

namespace smoe {

namespace {

constexpr int kMaxSweeps = 60;
constexpr double kOrthTol = 1e-14;  // relative off-diagonal Gram tolerance

}  // namespace

SvdResult svd_thin(const Matrix& a) {
  if (a.rows == 0 || a.cols == 0) throw ShapeError("svd_thin: empty matrix");
  if (!a.all_finite()) throw NumericError("svd_thin: non-finite input");

  // Work on bt, whose rows are the columns of the tall orientation of a.
  // Rotating row pairs of bt (and of vt) is the Hestenes column sweep with
  // contiguous memory access.
  const bool tall = a.rows >= a.cols;
  const std::size_t k = std::min(a.rows, a.cols);
  Matrix bt = tall ? transpose(a) : a;  // k x M
  const std::size_t m = bt.cols;
  Matrix vt = identity(k);

  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p < k; ++p) {
      for (std::size_t q = p + 1; q < k; ++q) {
        const double app = kernels::sumsq(bt.row(p), m);
        const double aqq = kernels::sumsq(bt.row(q), m);
        if (app == 0.0 || aqq == 0.0) continue;
        const double apq = kernels::dot(bt.row(p), bt.row(q), m);
        if (apq * apq <= kOrthTol * kOrthTol * app * aqq) continue;

        const double zeta = (aqq - app) / (2.0 * apq);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        kernels::rot(bt.row(p), bt.row(q), c, s, m);
        kernels::rot(vt.row(p), vt.row(q), c, s, k);
        rotated = true;
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sigma(k);
  for (std::size_t j = 0; j < k; ++j)
    sigma[j] = std::sqrt(kernels::sumsq(bt.row(j), m));

  // Stable sort by descending singular value.
  std::vector<std::size_t> perm(k);
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(),
                   [&](std::size_t i, std::size_t j) { return sigma[i] > sigma[j]; });

  Matrix ut(k, m);   // normalized rows of bt, permuted
  Matrix vtp(k, k);  // permuted vt
  std::vector<double> sig(k);
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t src = perm[j];
    sig[j] = sigma[src];
    const double inv = sig[j] > 0.0 ? 1.0 / sig[j] : 0.0;
    const double* brow = bt.row(src);
    double* urow = ut.row(j);
    for (std::size_t i = 0; i < m; ++i) urow[i] = brow[i] * inv;
    const double* vrow = vt.row(src);
    double* vdst = vtp.row(j);
    for (std::size_t i = 0; i < k; ++i) vdst[i] = vrow[i];
  }

  SvdResult out;
  out.sigma = std::move(sig);
  if (tall) {
    out.u = transpose(ut);  // rows x k
    out.vt = std::move(vtp);
  } else {
    out.u = transpose(vtp);  // rows x k (k == rows here)
    out.vt = std::move(ut);
  }
  return out;
}

Matrix svd_reconstruct(const SvdResult& s, std::size_t rank) {
  const std::size_t r = std::min(rank, s.sigma.size());
  Matrix out(s.u.rows, s.vt.cols);
  for (std::size_t i = 0; i < out.rows; ++i) {
    double* oi = out.row(i);
    for (std::size_t j = 0; j < r; ++j) {
      kernels::axpy(s.u.at(i, j) * s.sigma[j], s.vt.row(j), oi, out.cols);
    }
  }
  return out;
}

Matrix cholesky_lower(const Matrix& gram) {
  if (gram.rows != gram.cols) throw ShapeError("cholesky_lower: matrix not square");
  const std::size_t n = gram.rows;
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = gram.at(j, j) - kernels::sumsq(l.row(j), j);
    if (!(d > 0.0)) throw NumericError("cholesky_lower: matrix not positive definite");
    const double ljj = std::sqrt(d);
    l.at(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      l.at(i, j) = (gram.at(i, j) - kernels::dot(l.row(i), l.row(j), j)) / ljj;
    }
  }
  return l;
}

Matrix solve_right_lower(const Matrix& b, const Matrix& lower) {
  if (lower.rows != lower.cols) throw ShapeError("solve_right_lower: factor not square");
  if (b.cols != lower.rows) throw ShapeError("solve_right_lower: shapes disagree");
  const std::size_t n = lower.rows;
  Matrix x(b.rows, b.cols);
  // Row-wise: x_row * L = b_row, i.e. back substitution on L^T.
  for (std::size_t r = 0; r < b.rows; ++r) {
    const double* brow = b.row(r);
    double* xrow = x.row(r);
    for (std::size_t jj = n; jj-- > 0;) {
      double acc = brow[jj];
      for (std::size_t kk = jj + 1; kk < n; ++kk) acc -= xrow[kk] * lower.at(kk, jj);
      const double diag = lower.at(jj, jj);
      if (diag == 0.0) throw NumericError("solve_right_lower: singular factor");
      xrow[jj] = acc / diag;
    }
  }
  return x;
}

}  // namespace smoe
