// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "smoe/matrix.hpp"

namespace smoe {

struct ModelConfig {
  std::size_t d_model = 0;
  std::size_t d_expert = 0;
  std::size_t n_layers = 0;
  std::size_t n_experts = 0;
  std::size_t top_k = 0;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

/// Dense expert: y = down * (silu(gate*x) ⊙ (up*x)).
/// gate/up are d_expert x d_model, down is d_model x d_expert.
struct ExpertWeights {
  Matrix gate;
  Matrix up;
  Matrix down;

  bool operator==(const ExpertWeights&) const = default;
};

/// One low-rank role factor: effective weight = left * right, with the
/// singular values folded into left.
struct FactoredWeight {
  Matrix left;   // O x r
  Matrix right;  // r x I

  std::size_t rank() const { return left.cols; }
  bool operator==(const FactoredWeight&) const = default;
};

struct FactoredExpert {
  FactoredWeight gate, up, down;

  bool operator==(const FactoredExpert&) const = default;
};

using Expert = std::variant<ExpertWeights, FactoredExpert>;

enum class Role { Gate = 0, Up = 1, Down = 2 };
inline constexpr std::array<Role, 3> kRoles{Role::Gate, Role::Up, Role::Down};
const char* role_name(Role r);

struct MoELayer {
  Matrix router;                        // n_original x d_model; never shrunk by merging
  std::vector<Expert> experts;          // current expert slots
  std::vector<std::size_t> expert_map;  // original index -> slot
};

struct MoEStack {
  ModelConfig config;
  std::vector<MoELayer> layers;
};

std::vector<double> expert_forward(const ExpertWeights& e, std::span<const double> x);
std::vector<double> expert_forward(const FactoredExpert& e, std::span<const double> x);
std::vector<double> expert_forward(const Expert& e, std::span<const double> x);

/// silu(gate*x) ⊙ (up*x); the input the down projection sees.
std::vector<double> expert_hidden(const Expert& e, std::span<const double> x);

/// Applies a single role's effective weight (factored experts apply
/// right then left, which is where the low-rank FLOP saving comes from).
std::vector<double> role_apply(const Expert& e, Role role, std::span<const double> x);

struct RouteResult {
  std::vector<double> y;
  std::vector<std::size_t> selected;  // original indices, ascending
  std::vector<double> gates;          // softmax weights parallel to selected
};

/// Top-k routing over original expert indices (logits from the unshrunk
/// router; ties break to the lowest index), softmax over the selected logits
/// only, gates of originals sharing a slot summed before the expert runs.
RouteResult layer_forward(const MoELayer& layer, std::span<const double> x,
                          std::size_t top_k);

/// Residual stack: x <- x + layer_forward(layer, x).y per layer.
std::vector<double> stack_forward(const MoEStack& model, std::span<const double> x);

struct RedundancySpec {
  std::size_t n_distinct = 0;  // base experts per layer, 1..n_experts
  double noise = 0.0;          // amplitude of the per-expert perturbation
};

/// Deterministic synthetic model: per layer, n_distinct base experts with
/// entries ~ U(-1/sqrt(d), 1/sqrt(d)); expert i is base[i % n_distinct] plus
/// noise * U(-1,1) perturbation. Router entries are drawn the same way as the
/// base weights. Fully determined by (config, redundancy, config.seed).
MoEStack gen_synthetic(const ModelConfig& config, const RedundancySpec& redundancy);

std::size_t param_count(const Expert& e);
std::size_t param_count(const MoEStack& model);
std::size_t expert_param_count(const MoEStack& model);  // routers excluded

/// Checks every layer against the config: router shape, expert_map a
/// surjection onto the expert slots, all role weights dimensionally
/// consistent. Throws ConfigError.
void validate_stack(const MoEStack& model);

}  // namespace smoe
