// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0
//
// Scalar reference vs SIMD variant equivalence. FMA and lane-order summation
// change the rounding, so comparisons are tolerance-based.

#include <doctest.h>

#include <cmath>
#include <vector>

#include "smoe/kernels.hpp"
#include "smoe/rng.hpp"

using namespace smoe;
namespace k = smoe::kernels;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

struct BackendGuard {
  k::Backend saved = k::active_backend();
  ~BackendGuard() { k::force_backend(saved); }
};

const std::size_t kSizes[] = {0, 1, 3, 4, 7, 8, 9, 31, 64, 1000};

}  // namespace

TEST_SUITE_BEGIN("kernels");

TEST_CASE("scalar backend always available") {
  CHECK(k::backend_supported(k::Backend::Scalar));
  CHECK(k::backend_name(k::active_backend()) != nullptr);
}

TEST_CASE("simd variants match the scalar reference") {
  BackendGuard guard;
  Rng rng(2026);
  for (k::Backend b : {k::Backend::Avx2, k::Backend::Neon}) {
    if (!k::backend_supported(b)) continue;
    INFO("backend ", k::backend_name(b));
    for (std::size_t n : kSizes) {
      std::vector<double> a = random_vec(rng, n);
      std::vector<double> bb = random_vec(rng, n);

      k::force_backend(k::Backend::Scalar);
      const double dot_ref = k::dot(a.data(), bb.data(), n);
      const double ssq_ref = k::sumsq(a.data(), n);
      const double dsq_ref = k::dist_sq(a.data(), bb.data(), n);
      std::vector<double> axpy_ref = bb;
      k::axpy(0.37, a.data(), axpy_ref.data(), n);
      std::vector<double> scal_ref = a;
      k::scal(-1.75, scal_ref.data(), n);
      std::vector<double> rx_ref = a, ry_ref = bb;
      k::rot(rx_ref.data(), ry_ref.data(), 0.8, 0.6, n);

      k::force_backend(b);
      const double tol = 1e-12 * (static_cast<double>(n) + 1.0);
      CHECK(k::dot(a.data(), bb.data(), n) == doctest::Approx(dot_ref).epsilon(tol));
      CHECK(k::sumsq(a.data(), n) == doctest::Approx(ssq_ref).epsilon(tol));
      CHECK(k::dist_sq(a.data(), bb.data(), n) == doctest::Approx(dsq_ref).epsilon(tol));

      std::vector<double> axpy_got = bb;
      k::axpy(0.37, a.data(), axpy_got.data(), n);
      std::vector<double> scal_got = a;
      k::scal(-1.75, scal_got.data(), n);
      std::vector<double> rx_got = a, ry_got = bb;
      k::rot(rx_got.data(), ry_got.data(), 0.8, 0.6, n);
      for (std::size_t i = 0; i < n; ++i) {
        CHECK(axpy_got[i] == doctest::Approx(axpy_ref[i]).epsilon(1e-13));
        CHECK(scal_got[i] == doctest::Approx(scal_ref[i]).epsilon(1e-13));
        CHECK(rx_got[i] == doctest::Approx(rx_ref[i]).epsilon(1e-13));
        CHECK(ry_got[i] == doctest::Approx(ry_ref[i]).epsilon(1e-13));
      }
    }
  }
}

TEST_CASE("rot applies a proper plane rotation") {
  double x[2] = {1.0, 0.0};
  double y[2] = {0.0, 1.0};
  const double c = std::cos(0.3), s = std::sin(0.3);
  k::rot(x, y, c, s, 2);
  CHECK(x[0] == doctest::Approx(c));
  CHECK(y[0] == doctest::Approx(s));
  CHECK(x[1] == doctest::Approx(-s));
  CHECK(y[1] == doctest::Approx(c));
  // Norms are preserved.
  CHECK(x[0] * x[0] + y[0] * y[0] == doctest::Approx(1.0));
}

TEST_CASE("silu_mul matches the closed form") {
  const double g[4] = {0.0, 1.0, -2.0, 50.0};
  const double u[4] = {3.0, 1.0, 2.0, 1.0};
  double out[4];
  k::silu_mul(g, u, out, 4);
  CHECK(out[0] == 0.0);
  CHECK(out[1] == doctest::Approx(0.7310585786300049).epsilon(1e-15));
  CHECK(out[2] == doctest::Approx(-2.0 / (1.0 + std::exp(2.0)) * 2.0).epsilon(1e-15));
  CHECK(out[3] == doctest::Approx(50.0).epsilon(1e-10));  // saturated sigmoid
}

TEST_CASE("forcing an unavailable backend throws") {
  if (!k::backend_supported(k::Backend::Neon)) {
    CHECK_THROWS_AS(k::force_backend(k::Backend::Neon), ConfigError);
  }
  if (!k::backend_supported(k::Backend::Avx2)) {
    CHECK_THROWS_AS(k::force_backend(k::Backend::Avx2), ConfigError);
  }
}

TEST_SUITE_END();
