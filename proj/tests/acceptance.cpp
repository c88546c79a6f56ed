// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: ten pinned criteria, one pass/fail line each. Exits
// nonzero if any criterion fails.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "smoe/calib.hpp"
#include "smoe/checkpoint.hpp"
#include "smoe/cluster.hpp"
#include "smoe/eval.hpp"
#include "smoe/merge.hpp"
#include "smoe/model.hpp"
#include "smoe/rng.hpp"

using namespace smoe;

namespace {

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define REQUIRE_TRUE(cond)                                                       \
  do {                                                                           \
    if (!(cond)) throw Failure("check failed at line " + std::to_string(__LINE__) + \
                               ": " #cond);                                      \
  } while (0)

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (double& v : m.data) v = rng.uniform(-1.0, 1.0);
  return m;
}

double rel_frob(const Matrix& got, const Matrix& want) {
  const double denom = frob_norm(want);
  return denom > 0.0 ? frob_dist(got, want) / denom : frob_dist(got, want);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---- C1: lossless duplicate merge -----------------------------------------

void c1_lossless_duplicate_merge() {
  const auto t0 = std::chrono::steady_clock::now();

  ModelConfig cfg{32, 64, 4, 8, 2, 2026};
  MoEStack model = gen_synthetic(cfg, {4, 0.0});  // 4 duplicate pairs per layer
  CalibSet calib = make_calib_synthetic(1024, 32, 1);
  ActivationTrace trace = capture(model, calib);
  ClusterPlan plan =
      multilayer_plan(model, trace, 0.5, 2, Metric::ExpertOutput, Algo::KMeans, 7);
  auto [comp, report] = compress_model(model, plan, trace, MergeConfig{});
  DivergenceReport rep = output_divergence(model, comp, calib);

  REQUIRE_TRUE(rep.end_to_end_rel_err <= 1e-5);
  REQUIRE_TRUE(report.expert_params_after * 2 == report.expert_params_before);
  REQUIRE_TRUE(expert_param_count(comp) * 2 == expert_param_count(model));

  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (secs >= 60.0)
    throw Failure("pipeline took " + std::to_string(secs) + " s, budget is 60 s");
}

// ---- C2: union-SVD exactness & orthonormality ------------------------------

void c2_union_svd_exactness() {
  Rng rng(202);
  const std::size_t group_sizes[] = {2, 4, 8};
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = group_sizes[trial % 3];
    const std::size_t o = 1 + rng.below(32);
    const std::size_t i = 1 + rng.below(64);
    std::vector<Matrix> mats;
    for (std::size_t e = 0; e < n; ++e) mats.push_back(random_matrix(rng, o, i));
    UnionDecomposition d = union_svd(mats);

    REQUIRE_TRUE(std::is_sorted(d.sigma.begin(), d.sigma.end(), std::greater<double>()));
    for (double s : d.sigma) REQUIRE_TRUE(s >= 0.0);
    for (std::size_t e = 0; e < n; ++e)
      REQUIRE_TRUE(rel_frob(matmul(d.u_sigma, d.blocks[e]), mats[e]) <= 1e-8);

    Matrix u = d.u_sigma;
    for (std::size_t j = 0; j < d.rank; ++j) {
      if (d.sigma[j] <= 0.0) continue;
      for (std::size_t row = 0; row < u.rows; ++row) u.at(row, j) /= d.sigma[j];
    }
    Matrix g = matmul(transpose(u), u);
    for (std::size_t a = 0; a < g.rows; ++a) g.at(a, a) -= 1.0;
    REQUIRE_TRUE(frob_norm(g) <= 1e-8);
  }
}

// ---- C3: linearity identity ------------------------------------------------

void c3_linearity_identity() {
  Rng rng(303);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(7);
    const std::size_t o = 2 + rng.below(24);
    const std::size_t i = 2 + rng.below(32);
    std::vector<Matrix> mats;
    std::vector<double> freqs;
    for (std::size_t e = 0; e < n; ++e) {
      mats.push_back(random_matrix(rng, o, i));
      freqs.push_back(rng.uniform());
    }
    UnionDecomposition d = union_svd(mats);
    Matrix subspace = reconstruct(d, merge_v(d, freqs, VMergeMode::Frequency));
    Matrix direct = direct_weighted_merge(mats, freqs);
    REQUIRE_TRUE(rel_frob(subspace, direct) <= 1e-8);
  }
}

// ---- C4: truncation identity -----------------------------------------------

void c4_truncation_identity() {
  Rng rng(404);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(3);
    const std::size_t o = 4 + rng.below(20);
    const std::size_t i = 4 + rng.below(24);
    std::vector<Matrix> mats;
    for (std::size_t e = 0; e < n; ++e) mats.push_back(random_matrix(rng, o, i));
    Matrix joined = hconcat(mats);
    SvdResult s = svd_thin(joined);
    const std::size_t full = s.sigma.size();

    for (std::size_t r : {std::size_t{1}, full / 2, full - 1}) {
      if (r == 0 || r > full) continue;
      double tail = 0.0;
      for (std::size_t j = r; j < full; ++j) tail += s.sigma[j] * s.sigma[j];
      const double lhs = frob_dist(svd_reconstruct(s, r), joined);
      const double rhs = std::sqrt(tail);
      REQUIRE_TRUE(std::abs(lhs - rhs) <= 1e-8 * (1.0 + frob_norm(joined)));
    }
  }
}

// ---- C5: frequency counting ------------------------------------------------

void c5_frequency_counting() {
  Rng rng(505);
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig cfg;
    cfg.d_model = 4 + rng.below(12);
    cfg.d_expert = 4 + rng.below(12);
    cfg.n_layers = 1 + rng.below(3);
    cfg.n_experts = 2 + rng.below(7);
    cfg.top_k = 1 + rng.below(cfg.n_experts);
    cfg.seed = rng.next();
    MoEStack model = gen_synthetic(cfg, {cfg.n_experts, 0.0});
    const std::size_t m = 16 + rng.below(100);  // deliberately not a power of two
    ActivationTrace trace = capture(model, make_calib_synthetic(m, cfg.d_model, trial));
    FrequencyTable f = expert_frequencies(trace);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      std::uint64_t total = 0;
      for (std::uint64_t c : f.counts[l]) total += c;
      REQUIRE_TRUE(total == m * cfg.top_k);  // exact integer identity
      for (std::size_t i = 0; i < cfg.n_experts; ++i)
        REQUIRE_TRUE(f.freq(l, i) >= 0.0 && f.freq(l, i) <= 1.0);
    }
  }
}

// ---- C6: k-means contracts -------------------------------------------------

void c6_kmeans_contracts() {
  Rng rng(606);

  // Lloyd monotonicity over random instances.
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = 4 + rng.below(16);
    const std::size_t dim = 2 + rng.below(8);
    const std::size_t k = 1 + rng.below(n);
    std::vector<ExpertSignature> sigs(n);
    for (std::size_t i = 0; i < n; ++i) {
      sigs[i].expert = i;
      sigs[i].vec.resize(dim);
      for (double& v : sigs[i].vec) v = rng.uniform(-1.0, 1.0);
    }
    KMeansResult r = kmeans(sigs, k, 100, 0.0, inst);
    for (std::size_t t = 1; t < r.objective_history.size(); ++t)
      REQUIRE_TRUE(r.objective_history[t] <= r.objective_history[t - 1] + 1e-12);
  }

  // Separable duplicate instances reach J <= 1e-12 with the right groups.
  for (int inst = 0; inst < 20; ++inst) {
    const std::size_t k = 2 + rng.below(4);
    const std::size_t copies = 2 + rng.below(3);
    std::vector<ExpertSignature> sigs;
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<double> v(6);
      for (double& x : v) x = rng.uniform(-1.0, 1.0);
      for (std::size_t rcopy = 0; rcopy < copies; ++rcopy) {
        ExpertSignature s;
        s.expert = sigs.size();
        s.vec = v;
        sigs.push_back(std::move(s));
      }
    }
    KMeansResult r = kmeans(sigs, k, 100, 1e-6, inst);
    REQUIRE_TRUE(r.objective <= 1e-12);
    for (std::size_t i = 0; i < sigs.size(); ++i)
      REQUIRE_TRUE(r.assign[i] == r.assign[(i / copies) * copies]);
  }

  // k-means++ never seeds a duplicate while a distinct point exists.
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    std::vector<ExpertSignature> sigs(4);
    sigs[0].vec = {1.0, 0.0};
    sigs[1].vec = {1.0, 0.0};
    sigs[2].vec = {1.0, 0.0};
    sigs[3].vec = {0.0, 1.0};
    auto seeds = kmeans_pp_init(sigs, 2, seed);
    std::set<std::vector<double>> unique;
    for (std::size_t s : seeds) unique.insert(sigs[s].vec);
    REQUIRE_TRUE(unique.size() == 2);
  }
}

// ---- C7: whitening contracts -----------------------------------------------

void c7_whitening_contracts() {
  Rng rng(707);

  auto check_factor = [&](const Matrix& rows) {
    double eps = 0.0;
    Matrix s = whitening_matrix(rows, 1e-6, &eps);
    for (std::size_t a = 0; a < s.rows; ++a) {
      REQUIRE_TRUE(s.at(a, a) > 0.0);
      for (std::size_t b = a + 1; b < s.cols; ++b) REQUIRE_TRUE(s.at(a, b) == 0.0);
    }
    Matrix g = gram_from_rows(rows);
    for (std::size_t a = 0; a < g.rows; ++a) g.at(a, a) += eps;
    REQUIRE_TRUE(frob_dist(matmul(s, transpose(s)), g) <= 1e-8 * (1.0 + frob_norm(g)));
  };

  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t dim = 2 + rng.below(24);
    const std::size_t m = 1 + rng.below(64);
    Matrix rows(m, dim);
    for (double& v : rows.data) v = rng.normal();
    check_factor(rows);

    // Rank-deficient: every token is a copy of the first.
    Matrix flat(m, dim);
    for (std::size_t t = 0; t < m; ++t)
      std::copy(rows.row(0), rows.row(0) + dim, flat.row(t));
    check_factor(flat);
  }
  check_factor(Matrix(8, 6));  // all-zero activations

  // Truncated path with a single expert at full rank recovers W.
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t o = 2 + rng.below(16);
    const std::size_t i = 2 + rng.below(16);
    Matrix w = random_matrix(rng, o, i);
    Matrix act(32, i);
    for (double& v : act.data) v = rng.normal();
    Matrix s = whitening_matrix(act, 1e-6);
    FactoredWeight f = whiten_truncate_role({w}, {&s}, std::vector<double>{1.0},
                                            VMergeMode::Frequency, std::min(o, i));
    REQUIRE_TRUE(rel_frob(matmul(f.left, f.right), w) <= 1e-6);
  }
}

// ---- C8: factored storage and FLOP accounting -------------------------------

void c8_factored_storage() {
  const std::pair<std::size_t, std::size_t> role_shapes[] = {{64, 32}, {32, 64}, {48, 16}};
  for (double ratio : {0.1, 0.2, 0.3}) {
    for (auto [o, i] : role_shapes) {
      const std::size_t r = keep_rank(ratio, o, i);
      const double budget = (1.0 - ratio) * static_cast<double>(o * i);
      const double stored = static_cast<double>(r * (o + i));
      REQUIRE_TRUE(stored <= budget);
      REQUIRE_TRUE(stored >= budget - static_cast<double>(o + i));
      // Factored mult-adds beat dense exactly below the break-even rank.
      const std::size_t fac_madds = r * (o + i);
      const std::size_t dense_madds = o * i;
      const bool below_breakeven =
          static_cast<double>(r) <
          static_cast<double>(o * i) / static_cast<double>(o + i);
      REQUIRE_TRUE(below_breakeven);
      REQUIRE_TRUE(fac_madds < dense_madds);
    }
  }

  // An actual factored merge lands on those shapes.
  Rng rng(808);
  ExpertWeights a{random_matrix(rng, 64, 32), random_matrix(rng, 64, 32),
                  random_matrix(rng, 32, 64)};
  ExpertWeights b = a;
  MergeConfig mc;
  mc.rank_ratio = 0.2;
  mc.store_factored = true;
  FactoredExpert fe = merge_group_factored(
      {&a, &b}, {{nullptr, nullptr, nullptr}, {nullptr, nullptr, nullptr}},
      std::vector<double>{0.5, 0.5}, mc);
  const std::size_t r = keep_rank(0.2, 64, 32);
  REQUIRE_TRUE(fe.gate.rank() == r);
  REQUIRE_TRUE(fe.down.rank() == r);
  REQUIRE_TRUE(param_count(Expert{fe}) == 3 * r * (64 + 32));
}

// ---- C9: degradation monotone in generator noise ----------------------------

void c9_degradation_monotone() {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    std::vector<double> divergences;
    for (double noise : {0.0, 0.01, 0.1}) {
      ModelConfig cfg{16, 32, 2, 8, 2, seed};
      MoEStack model = gen_synthetic(cfg, {4, noise});
      CalibSet calib = make_calib_synthetic(256, 16, seed + 100);
      ActivationTrace trace = capture(model, calib);
      ClusterPlan plan =
          multilayer_plan(model, trace, 0.5, 2, Metric::ExpertOutput, Algo::KMeans, 7);
      auto [comp, report] = compress_model(model, plan, trace, MergeConfig{});
      divergences.push_back(output_divergence(model, comp, calib).end_to_end_rel_err);
    }
    REQUIRE_TRUE(divergences[0] <= divergences[1]);
    REQUIRE_TRUE(divergences[1] <= divergences[2]);
  }
}

// ---- C10: determinism & lossless round trips --------------------------------

void c10_determinism_roundtrip() {
  namespace fs = std::filesystem;
  const fs::path dir =
      fs::temp_directory_path() / ("smoe_accept_" + std::to_string(::getpid()));
  fs::create_directories(dir);

  ModelConfig cfg{16, 24, 2, 8, 2, 99};
  CalibSet calib = make_calib_synthetic(128, 16, 5);

  auto run_once = [&](const std::string& tag) {
    MoEStack model = gen_synthetic(cfg, {4, 0.02});
    save_checkpoint(model, dir / ("model_" + tag + ".smoe"));
    ActivationTrace trace = capture(model, calib);
    ClusterPlan plan =
        multilayer_plan(model, trace, 0.5, 2, Metric::ExpertOutput, Algo::KMeans, 3);
    save_plan(plan, dir / ("plan_" + tag + ".json"));
    auto [comp, report] = compress_model(model, plan, trace, MergeConfig{});
    save_checkpoint(comp, dir / ("merged_" + tag + ".smoe"));
    std::ofstream rep(dir / ("report_" + tag + ".json"));
    rep << report_to_json(report).dump(2);
    std::ofstream ev(dir / ("eval_" + tag + ".json"));
    ev << divergence_to_json(output_divergence(model, comp, calib)).dump(2);
  };
  run_once("a");
  run_once("b");
  for (const char* stem : {"model", "plan", "merged", "report", "eval"}) {
    const std::string ext =
        (std::string(stem) == "plan" || std::string(stem) == "report" ||
         std::string(stem) == "eval")
            ? ".json"
            : ".smoe";
    REQUIRE_TRUE(slurp(dir / (std::string(stem) + "_a" + ext)) ==
                 slurp(dir / (std::string(stem) + "_b" + ext)));
  }

  // Checkpoint save/load is bitwise lossless.
  MoEStack loaded = load_checkpoint(dir / "model_a.smoe");
  save_checkpoint(loaded, dir / "model_c.smoe");
  REQUIRE_TRUE(slurp(dir / "model_a.smoe") == slurp(dir / "model_c.smoe"));

  fs::remove_all(dir);
}

struct Criterion {
  const char* name;
  std::function<void()> fn;
};

}  // namespace

int main() {
  const Criterion criteria[] = {
      {"C1 lossless duplicate merge (<= 1e-5, 50% experts, < 60 s)",
       c1_lossless_duplicate_merge},
      {"C2 union-SVD exactness & orthonormality (200 random groups)",
       c2_union_svd_exactness},
      {"C3 linearity identity: subspace merge == direct average (100 groups)",
       c3_linearity_identity},
      {"C4 truncation identity: residual == sigma tail (50 matrices)",
       c4_truncation_identity},
      {"C5 frequency counting: sum f_i == top_k exactly (20 models)",
       c5_frequency_counting},
      {"C6 k-means contracts: monotone J, separable recovery, seeding",
       c6_kmeans_contracts},
      {"C7 whitening contracts: Cholesky factor, n=1 full-rank recovery",
       c7_whitening_contracts},
      {"C8 factored storage within (1-ratio)*O*I and cheaper forward",
       c8_factored_storage},
      {"C9 divergence non-decreasing in generator noise (3 seeds)",
       c9_degradation_monotone},
      {"C10 byte-deterministic outputs and lossless round trip",
       c10_determinism_roundtrip},
  };

  int failures = 0;
  for (const Criterion& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.fn();
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("[PASS] %s (%.2f s)\n", c.name, secs);
    } catch (const std::exception& e) {
      ++failures;
      std::printf("[FAIL] %s: %s\n", c.name, e.what());
    }
    std::fflush(stdout);
  }
  if (failures > 0) std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
