// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "smoe/checkpoint.hpp"
#include "smoe/errors.hpp"
#include "smoe/model.hpp"

using namespace smoe;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("smoe_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path operator/(const std::string& name) const { return path / name; }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

MoEStack small_model(std::uint64_t seed = 5) {
  ModelConfig cfg{4, 6, 2, 3, 2, seed};
  return gen_synthetic(cfg, {3, 0.0});
}

LoadErrc load_errc(const fs::path& p) {
  try {
    (void)load_checkpoint(p);
  } catch (const LoadError& e) {
    return e.code();
  }
  FAIL("expected a LoadError");
  return LoadErrc::BadHeader;
}

}  // namespace

TEST_SUITE_BEGIN("checkpoint");

TEST_CASE("save-load-save round trip is byte identical") {
  TempDir dir;
  MoEStack model = small_model();
  save_checkpoint(model, dir / "a.smoe");
  MoEStack loaded = load_checkpoint(dir / "a.smoe");
  save_checkpoint(loaded, dir / "b.smoe");
  CHECK(slurp(dir / "a.smoe") == slurp(dir / "b.smoe"));

  // The reload preserves every tensor of the already-f32 model exactly.
  MoEStack again = load_checkpoint(dir / "b.smoe");
  for (std::size_t l = 0; l < loaded.layers.size(); ++l) {
    CHECK(again.layers[l].router == loaded.layers[l].router);
    CHECK(again.layers[l].expert_map == loaded.layers[l].expert_map);
    for (std::size_t j = 0; j < loaded.layers[l].experts.size(); ++j)
      CHECK(std::get<ExpertWeights>(again.layers[l].experts[j]) ==
            std::get<ExpertWeights>(loaded.layers[l].experts[j]));
  }
}

TEST_CASE("factored experts survive the round trip") {
  TempDir dir;
  MoEStack model = small_model();
  FactoredExpert fe{{Matrix(6, 2, std::vector<double>(12, 0.5)),
                     Matrix(2, 4, std::vector<double>(8, 0.25))},
                    {Matrix(6, 2, std::vector<double>(12, -0.5)),
                     Matrix(2, 4, std::vector<double>(8, 1.0))},
                    {Matrix(4, 2, std::vector<double>(8, 2.0)),
                     Matrix(2, 6, std::vector<double>(12, -1.0))}};
  model.layers[0].experts[1] = fe;
  save_checkpoint(model, dir / "f.smoe");
  MoEStack loaded = load_checkpoint(dir / "f.smoe");
  CHECK(std::get<FactoredExpert>(loaded.layers[0].experts[1]) == fe);
  CHECK(std::holds_alternative<ExpertWeights>(loaded.layers[0].experts[0]));
}

TEST_CASE("load failures are distinct") {
  TempDir dir;
  save_checkpoint(small_model(), dir / "ok.smoe");
  const std::string good = slurp(dir / "ok.smoe");

  SUBCASE("bad magic") {
    std::string bytes = good;
    bytes[0] = 'X';
    spit(dir / "bad.smoe", bytes);
    CHECK(load_errc(dir / "bad.smoe") == LoadErrc::BadMagic);
  }

  SUBCASE("version mismatch") {
    std::string bytes = good;
    bytes[4] = 9;
    spit(dir / "bad.smoe", bytes);
    CHECK(load_errc(dir / "bad.smoe") == LoadErrc::BadVersion);
  }

  SUBCASE("truncation inside the header") {
    spit(dir / "bad.smoe", good.substr(0, 40));
    CHECK(load_errc(dir / "bad.smoe") == LoadErrc::Truncated);
  }

  SUBCASE("truncation before the fixed header ends") {
    spit(dir / "bad.smoe", good.substr(0, 10));
    CHECK(load_errc(dir / "bad.smoe") == LoadErrc::Truncated);
  }

  SUBCASE("header shape edited without touching the payload") {
    std::string bytes = good;
    const std::string needle = "\"shape\":[4,6]";  // down role of some expert
    const auto pos = bytes.find(needle);
    REQUIRE(pos != std::string::npos);
    bytes.replace(pos, needle.size(), "\"shape\":[4,9]");
    spit(dir / "bad.smoe", bytes);
    CHECK(load_errc(dir / "bad.smoe") == LoadErrc::LengthMismatch);
  }

  SUBCASE("chopped payload") {
    spit(dir / "bad.smoe", good.substr(0, good.size() - 8));
    CHECK(load_errc(dir / "bad.smoe") == LoadErrc::LengthMismatch);
  }

  SUBCASE("garbage JSON header") {
    // Keep length fields consistent but corrupt the JSON text.
    std::string bytes = good;
    bytes[16] = '?';
    spit(dir / "bad.smoe", bytes);
    CHECK(load_errc(dir / "bad.smoe") == LoadErrc::BadHeader);
  }
}

TEST_CASE("container rejects mismatched tensor data") {
  TempDir dir;
  Container c;
  c.tensors.push_back({"t", {2, 2}, std::vector<float>(3, 0.0f)});
  CHECK_THROWS_AS(write_container(dir / "x.smoe", c), ShapeError);
}

TEST_SUITE_END();
