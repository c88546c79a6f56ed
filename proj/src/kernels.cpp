// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#include "smoe/kernels.hpp"

#include <cmath>
#include <cstdlib>
#include <string>

#include "smoe/errors.hpp"

namespace smoe::kernels {

namespace scalar {

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

double sumsq(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * x[i];
  return s;
}

double dist_sq(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scal(double alpha, double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void rot(double* x, double* y, double c, double s, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double xi = x[i];
    x[i] = c * xi - s * y[i];
    y[i] = s * xi + c * y[i];
  }
}

}  // namespace scalar

#ifdef SMOE_HAVE_AVX2_TU
namespace avx2 {
double dot(const double* a, const double* b, std::size_t n);
double sumsq(const double* x, std::size_t n);
double dist_sq(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void scal(double alpha, double* x, std::size_t n);
void rot(double* x, double* y, double c, double s, std::size_t n);
}  // namespace avx2
#endif

#ifdef SMOE_HAVE_NEON_TU
namespace neon {
double dot(const double* a, const double* b, std::size_t n);
double sumsq(const double* x, std::size_t n);
double dist_sq(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void scal(double alpha, double* x, std::size_t n);
void rot(double* x, double* y, double c, double s, std::size_t n);
}  // namespace neon
#endif

namespace {

struct Vtable {
  double (*dot)(const double*, const double*, std::size_t);
  double (*sumsq)(const double*, std::size_t);
  double (*dist_sq)(const double*, const double*, std::size_t);
  void (*axpy)(double, const double*, double*, std::size_t);
  void (*scal)(double, double*, std::size_t);
  void (*rot)(double*, double*, double, double, std::size_t);
};

constexpr Vtable kScalar{scalar::dot, scalar::sumsq, scalar::dist_sq,
                         scalar::axpy, scalar::scal, scalar::rot};

#ifdef SMOE_HAVE_AVX2_TU
constexpr Vtable kAvx2{avx2::dot, avx2::sumsq, avx2::dist_sq,
                       avx2::axpy, avx2::scal, avx2::rot};
#endif

#ifdef SMOE_HAVE_NEON_TU
constexpr Vtable kNeon{neon::dot, neon::sumsq, neon::dist_sq,
                       neon::axpy, neon::scal, neon::rot};
#endif

bool cpu_supports(Backend b) {
  switch (b) {
    case Backend::Scalar:
      return true;
    case Backend::Avx2:
#if defined(SMOE_HAVE_AVX2_TU) && defined(__GNUC__)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Backend::Neon:
#ifdef SMOE_HAVE_NEON_TU
      return true;  // baseline on aarch64
#else
      return false;
#endif
  }
  return false;
}

const Vtable* table_for(Backend b) {
  switch (b) {
    case Backend::Scalar:
      return &kScalar;
#ifdef SMOE_HAVE_AVX2_TU
    case Backend::Avx2:
      return &kAvx2;
#endif
#ifdef SMOE_HAVE_NEON_TU
    case Backend::Neon:
      return &kNeon;
#endif
    default:
      return nullptr;
  }
}

Backend detect_backend() {
  // SMOE_KERNEL_BACKEND=scalar|avx2|neon pins the choice; the acceptance
  // suite reruns under the scalar reference this way.
  if (const char* env = std::getenv("SMOE_KERNEL_BACKEND")) {
    const std::string want = env;
    for (Backend b : {Backend::Scalar, Backend::Avx2, Backend::Neon}) {
      if (want == backend_name(b) && cpu_supports(b)) return b;
    }
  }
  if (cpu_supports(Backend::Avx2)) return Backend::Avx2;
  if (cpu_supports(Backend::Neon)) return Backend::Neon;
  return Backend::Scalar;
}

Backend g_backend = detect_backend();
const Vtable* g_vt = table_for(g_backend);

}  // namespace

const char* backend_name(Backend b) {
  switch (b) {
    case Backend::Scalar:
      return "scalar";
    case Backend::Avx2:
      return "avx2";
    case Backend::Neon:
      return "neon";
  }
  return "?";
}

bool backend_supported(Backend b) { return cpu_supports(b); }

Backend active_backend() { return g_backend; }

void force_backend(Backend b) {
  if (!cpu_supports(b))
    throw ConfigError(std::string("kernel backend unavailable: ") + backend_name(b));
  g_backend = b;
  g_vt = table_for(b);
}

double dot(const double* a, const double* b, std::size_t n) { return g_vt->dot(a, b, n); }

double sumsq(const double* x, std::size_t n) { return g_vt->sumsq(x, n); }

double dist_sq(const double* a, const double* b, std::size_t n) {
  return g_vt->dist_sq(a, b, n);
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  g_vt->axpy(alpha, x, y, n);
}

void scal(double alpha, double* x, std::size_t n) { g_vt->scal(alpha, x, n); }

void rot(double* x, double* y, double c, double s, std::size_t n) {
  g_vt->rot(x, y, c, s, n);
}

void silu_mul(const double* g, const double* u, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double z = g[i];
    // silu(z) = z / (1 + exp(-z)), computed on the stable side of the exp.
    const double sz = z >= 0.0 ? z / (1.0 + std::exp(-z))
                               : z * std::exp(z) / (1.0 + std::exp(z));
    out[i] = sz * u[i];
  }
}

}  // namespace smoe::kernels
