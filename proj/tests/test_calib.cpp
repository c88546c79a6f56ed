// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "smoe/calib.hpp"
#include "smoe/errors.hpp"
#include "smoe/model.hpp"
#include "smoe/rng.hpp"

using namespace smoe;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("smoe_calib_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

MoEStack small_model(std::uint64_t seed = 9) {
  ModelConfig cfg{4, 6, 2, 4, 2, seed};
  return gen_synthetic(cfg, {4, 0.0});
}

}  // namespace

TEST_SUITE_BEGIN("calib");

TEST_CASE("synthetic calibration is deterministic under its seed") {
  CalibSet a = make_calib_synthetic(32, 4, 7);
  CalibSet b = make_calib_synthetic(32, 4, 7);
  CalibSet c = make_calib_synthetic(32, 4, 8);
  CHECK(a.tokens == b.tokens);
  CHECK(a.tokens != c.tokens);
}

TEST_CASE("calibration file round trip reproduces the tokens bitwise") {
  TempDir dir;
  CalibSet calib = make_calib_synthetic(16, 4, 3);
  save_calib(calib, dir.path / "c.smoe");
  CalibSet loaded = load_calib(dir.path / "c.smoe");
  CHECK(loaded.tokens == calib.tokens);  // synthetic tokens sit on the f32 grid
}

TEST_CASE("capture records dense outputs, logits and top-k sets") {
  MoEStack model = small_model();
  CalibSet calib = make_calib_synthetic(3, 4, 1);
  ActivationTrace trace = capture(model, calib);

  REQUIRE(trace.layers.size() == 2);
  REQUIRE(trace.layers[0].expert_outputs.size() == 4);
  CHECK(trace.layers[0].expert_outputs[0].rows == 3);
  CHECK(trace.layers[0].expert_outputs[0].cols == 4);
  CHECK(trace.layers[0].router_logits.rows == 3);
  CHECK(trace.layers[0].router_logits.cols == 4);
  for (const auto& sel : trace.layers[0].topk) CHECK(sel.size() == 2);
  CHECK(trace.layers[0].inputs == calib.tokens);
}

TEST_CASE("capture on an all-zero model routes to the lowest indices") {
  MoEStack model = small_model();
  for (auto& layer : model.layers) {
    layer.router = Matrix(layer.router.rows, layer.router.cols);
    for (auto& e : layer.experts) {
      auto& w = std::get<ExpertWeights>(e);
      w.gate = Matrix(w.gate.rows, w.gate.cols);
      w.up = Matrix(w.up.rows, w.up.cols);
      w.down = Matrix(w.down.rows, w.down.cols);
    }
  }
  CalibSet calib = make_calib_synthetic(4, 4, 2);
  ActivationTrace trace = capture(model, calib);
  for (const auto& lt : trace.layers) {
    for (const auto& out : lt.expert_outputs)
      for (double v : out.data) CHECK(v == 0.0);
    for (double v : lt.router_logits.data) CHECK(v == 0.0);
    for (const auto& sel : lt.topk) CHECK(sel == std::vector<std::size_t>{0, 1});
  }
}

TEST_CASE("captured expert outputs match independent recomputation") {
  MoEStack model = small_model();
  CalibSet calib = make_calib_synthetic(5, 4, 11);
  ActivationTrace trace = capture(model, calib);
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const LayerTrace& lt = trace.layers[l];
    for (std::size_t i = 0; i < lt.expert_outputs.size(); ++i) {
      for (std::size_t t = 0; t < 5; ++t) {
        std::vector<double> y =
            expert_forward(model.layers[l].experts[i], lt.inputs.row_span(t));
        for (std::size_t c = 0; c < y.size(); ++c)
          CHECK(lt.expert_outputs[i].at(t, c) == y[c]);
      }
    }
  }
}

TEST_CASE("capture leaves the model untouched") {
  MoEStack model = small_model();
  MoEStack before = model;
  CalibSet calib = make_calib_synthetic(8, 4, 1);
  (void)capture(model, calib);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    CHECK(model.layers[l].router == before.layers[l].router);
    for (std::size_t j = 0; j < model.layers[l].experts.size(); ++j)
      CHECK(std::get<ExpertWeights>(model.layers[l].experts[j]) ==
            std::get<ExpertWeights>(before.layers[l].experts[j]));
  }
}

TEST_CASE("trace file round trip") {
  TempDir dir;
  MoEStack model = small_model();
  CalibSet calib = make_calib_synthetic(6, 4, 5);
  ActivationTrace trace = capture(model, calib);
  save_trace(trace, dir.path / "t.smoe");
  ActivationTrace loaded = load_trace(dir.path / "t.smoe");
  REQUIRE(loaded.layers.size() == trace.layers.size());
  CHECK(loaded.tokens == trace.tokens);
  CHECK(loaded.top_k == trace.top_k);
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    CHECK(loaded.layers[l].topk == trace.layers[l].topk);
    CHECK(loaded.layers[l].expert_outputs.size() ==
          trace.layers[l].expert_outputs.size());
    // f32 storage: values match after one float round trip.
    for (std::size_t i = 0; i < trace.layers[l].inputs.size(); ++i)
      CHECK(loaded.layers[l].inputs.data[i] ==
            static_cast<double>(static_cast<float>(trace.layers[l].inputs.data[i])));
  }
}

TEST_CASE("expert frequencies count top-k membership") {
  SUBCASE("single expert is always selected") {
    ModelConfig cfg{4, 6, 1, 1, 1, 3};
    MoEStack model = gen_synthetic(cfg, {1, 0.0});
    ActivationTrace trace = capture(model, make_calib_synthetic(8, 4, 0));
    FrequencyTable f = expert_frequencies(trace);
    CHECK(f.freq(0, 0) == 1.0);
  }

  SUBCASE("hand-built counts") {
    ActivationTrace trace;
    trace.tokens = 4;
    trace.top_k = 1;
    LayerTrace lt;
    lt.router_logits = Matrix(4, 3);
    lt.topk = {{2}, {0}, {2}, {1}};
    trace.layers.push_back(lt);
    FrequencyTable f = expert_frequencies(trace);
    CHECK(f.freq(0, 2) == 0.5);
    CHECK(f.freq(0, 0) == 0.25);
    CHECK(f.freq(0, 1) == 0.25);
  }

  SUBCASE("counting identity: counts sum to tokens * top_k") {
    ModelConfig cfg{8, 4, 2, 8, 2, 77};
    MoEStack model = gen_synthetic(cfg, {8, 0.0});
    ActivationTrace trace = capture(model, make_calib_synthetic(33, 8, 4));
    FrequencyTable f = expert_frequencies(trace);
    for (std::size_t l = 0; l < 2; ++l) {
      std::uint64_t total = 0;
      for (std::uint64_t c : f.counts[l]) total += c;
      CHECK(total == 33 * 2);
      for (std::size_t i = 0; i < 8; ++i) {
        CHECK(f.freq(l, i) >= 0.0);
        CHECK(f.freq(l, i) <= 1.0);
      }
    }
  }
}

TEST_CASE("whitening_matrix contracts") {
  SUBCASE("identity activations") {
    // Rows = I identity tokens: X X^T = I, so S = sqrt(1 + eps) * I.
    Matrix rows = identity(4);
    double eps = 0.0;
    Matrix s = whitening_matrix(rows, 1e-6, &eps);
    CHECK(eps == doctest::Approx(1e-6).epsilon(1e-12));
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(s.at(i, i) == doctest::Approx(std::sqrt(1.0 + eps)).epsilon(1e-12));
  }

  SUBCASE("rank-deficient input still factors") {
    Matrix rows(3, 4);  // one repeated token direction
    for (std::size_t t = 0; t < 3; ++t) rows.at(t, 1) = 2.0;
    double eps = 0.0;
    Matrix s = whitening_matrix(rows, 1e-6, &eps);
    Matrix g = gram_from_rows(rows);
    for (std::size_t i = 0; i < 4; ++i) g.at(i, i) += eps;
    CHECK(frob_dist(matmul(s, transpose(s)), g) < 1e-8 * (1.0 + frob_norm(g)));
  }

  SUBCASE("all-zero input falls back to sqrt(eps_scale) * I") {
    Matrix rows(5, 3);
    Matrix s = whitening_matrix(rows, 1e-6);
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(s.at(i, i) == doctest::Approx(std::sqrt(1e-6)).epsilon(1e-12));
  }

  SUBCASE("non-finite input throws") {
    Matrix rows(1, 2, {1.0, std::nan("")});
    CHECK_THROWS_AS(whitening_matrix(rows, 1e-6), NumericError);
  }
}

TEST_CASE("whiten cache has lower-triangular SPD factors per role") {
  MoEStack model = small_model();
  ActivationTrace trace = capture(model, make_calib_synthetic(32, 4, 13));
  WhitenCache cache = build_whiten_cache(model, trace);
  for (std::size_t l = 0; l < cache.s.size(); ++l) {
    for (std::size_t i = 0; i < cache.s[l].size(); ++i) {
      for (std::size_t r = 0; r < 3; ++r) {
        const Matrix& s = cache.s[l][i][r];
        const std::size_t expect = r == 2 ? model.config.d_expert : model.config.d_model;
        REQUIRE(s.rows == expect);
        for (std::size_t a = 0; a < s.rows; ++a) {
          CHECK(s.at(a, a) > 0.0);
          for (std::size_t b = a + 1; b < s.cols; ++b) CHECK(s.at(a, b) == 0.0);
        }
      }
    }
  }
}

TEST_SUITE_END();
