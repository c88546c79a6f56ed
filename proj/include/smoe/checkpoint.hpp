// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary tensor container and model checkpoints.
//
// Layout (little-endian):
//   magic "SMOE" | u32 version = 1 | u64 header_len | JSON header of exactly
//   header_len bytes | zero padding to the next 8-byte boundary | concatenated
//   row-major IEEE-754 f32 tensor payloads.
// The JSON header carries {"tensors": [{"name", "dtype": "f32", "shape",
// "offset"}], ...}; offsets are relative to the payload start. Checkpoints add
// "config" and "expert_maps" fields.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "smoe/model.hpp"

namespace smoe {

inline constexpr char kMagic[4] = {'S', 'M', 'O', 'E'};
inline constexpr std::uint32_t kFormatVersion = 1;

struct TensorEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

struct Container {
  nlohmann::json meta;  // header fields other than "tensors"
  std::vector<TensorEntry> tensors;

  const TensorEntry* find(const std::string& name) const;
  const TensorEntry& require(const std::string& name) const;  // throws LoadError
};

/// Writes atomically (temp file in the same directory, then rename).
void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

/// Tensor naming: "layer.<l>.router", "layer.<l>.expert.<j>.<role>" for dense
/// experts, "...<role>.left" / "...<role>.right" for factored ones.
void save_checkpoint(const MoEStack& model, const std::filesystem::path& path);
MoEStack load_checkpoint(const std::filesystem::path& path);

/// Matrix <-> f32 tensor conversion (storage is f32, arithmetic is f64).
TensorEntry to_tensor(const std::string& name, const Matrix& m);
Matrix to_matrix(const TensorEntry& t);

}  // namespace smoe
