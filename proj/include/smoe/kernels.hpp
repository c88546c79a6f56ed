// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0
//
// Double-precision inner loops shared by every numeric path: matrix products,
// Jacobi SVD sweeps, Gram accumulation, similarity scans. Each kernel has a
// scalar reference implementation plus SIMD variants (AVX2 on x86-64, NEON on
// aarch64) selected once at startup from CPU features. force_backend() pins a
// specific variant; the equivalence tests compare every variant against the
// scalar reference.

#pragma once

#include <cstddef>

namespace smoe::kernels {

enum class Backend { Scalar, Avx2, Neon };

const char* backend_name(Backend b);
bool backend_supported(Backend b);

/// Backend currently used by all kernel calls.
Backend active_backend();

/// Pins the dispatch table to one backend. Throws ConfigError if the backend
/// was not compiled in or the CPU lacks the feature.
void force_backend(Backend b);

/// Dot product sum a[i]*b[i].
double dot(const double* a, const double* b, std::size_t n);

/// Sum of squares.
double sumsq(const double* x, std::size_t n);

/// Squared Euclidean distance sum (a[i]-b[i])^2.
double dist_sq(const double* a, const double* b, std::size_t n);

/// y += alpha * x
void axpy(double alpha, const double* x, double* y, std::size_t n);

/// x *= alpha
void scal(double alpha, double* x, std::size_t n);

/// Plane rotation: (x, y) <- (c*x - s*y, s*x + c*y). Core of the one-sided
/// Jacobi SVD sweeps.
void rot(double* x, double* y, double c, double s, std::size_t n);

/// out[i] = silu(g[i]) * u[i] with silu(z) = z / (1 + exp(-z)). Scalar on all
/// backends: the transcendental dominates and has no packed form here.
void silu_mul(const double* g, const double* u, double* out, std::size_t n);

}  // namespace smoe::kernels
