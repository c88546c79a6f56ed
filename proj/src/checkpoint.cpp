// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#include "smoe/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>

#include "smoe/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "container format assumes a little-endian host");

namespace smoe {

namespace {

std::size_t numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t s : shape) {
    if (s != 0 && n > SIZE_MAX / s)
      throw LoadError(LoadErrc::BadHeader, "tensor shape overflows");
    n *= s;
  }
  return n;
}

void append_u32(std::string& buf, std::uint32_t v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof v);
}

void append_u64(std::string& buf, std::uint64_t v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof v);
}

}  // namespace

const TensorEntry* Container::find(const std::string& name) const {
  for (const TensorEntry& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

const TensorEntry& Container::require(const std::string& name) const {
  const TensorEntry* t = find(name);
  if (!t) throw LoadError(LoadErrc::BadHeader, "missing tensor: " + name);
  return *t;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  nlohmann::json header = c.meta;
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const TensorEntry& t : c.tensors) {
    if (t.data.size() != numel(t.shape))
      throw ShapeError("write_container: tensor data does not match shape: " + t.name);
    tensors.push_back({{"name", t.name},
                       {"dtype", "f32"},
                       {"shape", t.shape},
                       {"offset", offset}});
    offset += t.data.size() * sizeof(float);
  }
  header["tensors"] = std::move(tensors);
  const std::string header_str = header.dump();

  std::string buf;
  buf.append(kMagic, 4);
  append_u32(buf, kFormatVersion);
  append_u64(buf, header_str.size());
  buf.append(header_str);
  while (buf.size() % 8 != 0) buf.push_back('\0');
  for (const TensorEntry& t : c.tensors) {
    buf.append(reinterpret_cast<const char*>(t.data.data()),
               t.data.size() * sizeof(float));
  }

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());

  if (bytes.size() < 16) throw LoadError(LoadErrc::Truncated, "file shorter than fixed header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw LoadError(LoadErrc::BadMagic, "bad magic");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kFormatVersion)
    throw LoadError(LoadErrc::BadVersion,
                    "unsupported container version " + std::to_string(version));
  std::uint64_t header_len;
  std::memcpy(&header_len, bytes.data() + 8, 8);
  if (bytes.size() < 16 + header_len)
    throw LoadError(LoadErrc::Truncated, "file ends inside the JSON header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(LoadErrc::BadHeader, std::string("header parse error: ") + e.what());
  }
  if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_array())
    throw LoadError(LoadErrc::BadHeader, "header missing tensors array");

  std::size_t payload_start = 16 + header_len;
  payload_start += (8 - payload_start % 8) % 8;
  if (bytes.size() < payload_start)
    throw LoadError(LoadErrc::Truncated, "file ends inside header padding");
  const std::size_t payload_size = bytes.size() - payload_start;

  Container c;
  // Payloads are packed back to back: every offset must be the running sum
  // and the total must equal the payload size, so any header/payload
  // disagreement (edited shape, chopped payload) is caught here.
  std::uint64_t expected_offset = 0;
  try {
    for (const auto& jt : header["tensors"]) {
      TensorEntry t;
      t.name = jt.at("name").get<std::string>();
      if (jt.at("dtype").get<std::string>() != "f32")
        throw LoadError(LoadErrc::BadHeader, "unsupported dtype for " + t.name);
      t.shape = jt.at("shape").get<std::vector<std::size_t>>();
      const std::uint64_t offset = jt.at("offset").get<std::uint64_t>();
      const std::uint64_t count = numel(t.shape);
      if (count > payload_size / sizeof(float))
        throw LoadError(LoadErrc::LengthMismatch,
                        "tensor larger than payload: " + t.name);
      const std::uint64_t bytes_needed = count * sizeof(float);
      if (offset != expected_offset || offset + bytes_needed > payload_size)
        throw LoadError(LoadErrc::LengthMismatch,
                        "tensor extents disagree with payload: " + t.name);
      expected_offset = offset + bytes_needed;
      t.data.resize(numel(t.shape));
      std::memcpy(t.data.data(), bytes.data() + payload_start + offset, bytes_needed);
      c.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(LoadErrc::BadHeader, std::string("malformed tensor entry: ") + e.what());
  }
  if (expected_offset != payload_size)
    throw LoadError(LoadErrc::LengthMismatch,
                    "payload length disagrees with header extents");

  header.erase("tensors");
  c.meta = std::move(header);
  return c;
}

TensorEntry to_tensor(const std::string& name, const Matrix& m) {
  if (!m.all_finite()) throw NumericError("to_tensor: non-finite entries in " + name);
  TensorEntry t;
  t.name = name;
  t.shape = {m.rows, m.cols};
  t.data.reserve(m.size());
  for (double v : m.data) t.data.push_back(static_cast<float>(v));
  return t;
}

Matrix to_matrix(const TensorEntry& t) {
  if (t.shape.size() != 2)
    throw LoadError(LoadErrc::BadHeader, "tensor is not 2-D: " + t.name);
  Matrix m(t.shape[0], t.shape[1]);
  for (std::size_t i = 0; i < t.data.size(); ++i) m.data[i] = t.data[i];
  if (!m.all_finite()) throw NumericError("to_matrix: non-finite entries in " + t.name);
  return m;
}

namespace {

std::string layer_prefix(std::size_t l) { return "layer." + std::to_string(l) + "."; }

std::string expert_prefix(std::size_t l, std::size_t j) {
  return layer_prefix(l) + "expert." + std::to_string(j) + ".";
}

}  // namespace

void save_checkpoint(const MoEStack& model, const std::filesystem::path& path) {
  Container c;
  c.meta["config"] = {{"d_model", model.config.d_model},
                      {"d_expert", model.config.d_expert},
                      {"n_layers", model.config.n_layers},
                      {"n_experts", model.config.n_experts},
                      {"top_k", model.config.top_k},
                      {"seed", model.config.seed}};
  nlohmann::json maps = nlohmann::json::array();
  for (const MoELayer& layer : model.layers) maps.push_back(layer.expert_map);
  c.meta["expert_maps"] = std::move(maps);

  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const MoELayer& layer = model.layers[l];
    c.tensors.push_back(to_tensor(layer_prefix(l) + "router", layer.router));
    for (std::size_t j = 0; j < layer.experts.size(); ++j) {
      const std::string pre = expert_prefix(l, j);
      if (const auto* d = std::get_if<ExpertWeights>(&layer.experts[j])) {
        c.tensors.push_back(to_tensor(pre + "gate", d->gate));
        c.tensors.push_back(to_tensor(pre + "up", d->up));
        c.tensors.push_back(to_tensor(pre + "down", d->down));
      } else {
        const auto& f = std::get<FactoredExpert>(layer.experts[j]);
        c.tensors.push_back(to_tensor(pre + "gate.left", f.gate.left));
        c.tensors.push_back(to_tensor(pre + "gate.right", f.gate.right));
        c.tensors.push_back(to_tensor(pre + "up.left", f.up.left));
        c.tensors.push_back(to_tensor(pre + "up.right", f.up.right));
        c.tensors.push_back(to_tensor(pre + "down.left", f.down.left));
        c.tensors.push_back(to_tensor(pre + "down.right", f.down.right));
      }
    }
  }
  write_container(path, c);
}

MoEStack load_checkpoint(const std::filesystem::path& path) {
  Container c = read_container(path);
  MoEStack model;
  try {
    const nlohmann::json& cfg = c.meta.at("config");
    model.config.d_model = cfg.at("d_model").get<std::size_t>();
    model.config.d_expert = cfg.at("d_expert").get<std::size_t>();
    model.config.n_layers = cfg.at("n_layers").get<std::size_t>();
    model.config.n_experts = cfg.at("n_experts").get<std::size_t>();
    model.config.top_k = cfg.at("top_k").get<std::size_t>();
    model.config.seed = cfg.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(LoadErrc::BadHeader, std::string("malformed config: ") + e.what());
  }
  model.config.validate();

  std::vector<std::vector<std::size_t>> maps;
  try {
    maps = c.meta.at("expert_maps").get<std::vector<std::vector<std::size_t>>>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(LoadErrc::BadHeader, std::string("malformed expert_maps: ") + e.what());
  }
  if (maps.size() != model.config.n_layers)
    throw LoadError(LoadErrc::BadHeader, "expert_maps length disagrees with n_layers");

  for (std::size_t l = 0; l < model.config.n_layers; ++l) {
    MoELayer layer;
    layer.router = to_matrix(c.require(layer_prefix(l) + "router"));
    layer.expert_map = maps[l];
    for (std::size_t j = 0;; ++j) {
      const std::string pre = expert_prefix(l, j);
      if (const TensorEntry* g = c.find(pre + "gate")) {
        ExpertWeights e;
        e.gate = to_matrix(*g);
        e.up = to_matrix(c.require(pre + "up"));
        e.down = to_matrix(c.require(pre + "down"));
        layer.experts.emplace_back(std::move(e));
      } else if (const TensorEntry* gl = c.find(pre + "gate.left")) {
        FactoredExpert f;
        f.gate = {to_matrix(*gl), to_matrix(c.require(pre + "gate.right"))};
        f.up = {to_matrix(c.require(pre + "up.left")),
                to_matrix(c.require(pre + "up.right"))};
        f.down = {to_matrix(c.require(pre + "down.left")),
                  to_matrix(c.require(pre + "down.right"))};
        layer.experts.emplace_back(std::move(f));
      } else {
        break;
      }
    }
    if (layer.experts.empty())
      throw LoadError(LoadErrc::BadHeader, "layer has no experts: " + std::to_string(l));
    model.layers.push_back(std::move(layer));
  }
  try {
    validate_stack(model);
  } catch (const ConfigError& e) {
    throw LoadError(LoadErrc::BadHeader, e.what());
  }
  return model;
}

}  // namespace smoe
