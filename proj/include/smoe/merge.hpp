// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "smoe/calib.hpp"
#include "smoe/cluster.hpp"
#include "smoe/linalg.hpp"
#include "smoe/model.hpp"

namespace smoe {

/// Joint thin SVD of the column-wise concatenation [W1 | W2 | ... | Wn].
/// The shared left factor is kept as u_sigma = U * diag(sigma); blocks[i] is
/// the (r x I) slice of V^T belonging to expert i, so that
/// W_i ~= u_sigma * blocks[i] exactly at full rank.
struct UnionDecomposition {
  Matrix u_sigma;              // O x r
  std::vector<double> sigma;   // r, non-increasing
  std::vector<Matrix> blocks;  // n entries, each r x I
  std::size_t rank = 0;        // r = min(O, n*I)
};

UnionDecomposition union_svd(const std::vector<Matrix>& mats);

enum class VMergeMode { Frequency, Average, Drop };
const char* vmerge_name(VMergeMode m);

/// Combines the per-expert V blocks: Frequency = sum f_i*B_i / sum f_i
/// (uniform average when all frequencies are zero), Average = unweighted mean,
/// Drop = the block of the most-activated expert (lowest index on ties).
Matrix merge_v(const UnionDecomposition& d, std::span<const double> freqs,
               VMergeMode mode);

/// u_sigma * v_merged.
Matrix reconstruct(const UnionDecomposition& d, const Matrix& v_merged);

/// Baseline: sum_i (w_i / sum w) * W_i. Uniform when all weights are zero.
Matrix direct_weighted_merge(const std::vector<Matrix>& mats,
                             std::span<const double> weights);

struct MergeConfig {
  VMergeMode v_merge = VMergeMode::Frequency;
  double rank_ratio = 0.0;  // 0 keeps merged experts dense; (0,1) truncates
  bool whiten = false;
  bool store_factored = false;
  double eps_scale = 1e-6;

  void validate() const;
};

/// Kept rank for a truncated role: the storage break-even point scaled by the
/// requested ratio, r = max(1, floor((1 - rank_ratio) * O*I / (O+I))), clamped
/// to min(O, I). Factored storage r*(O+I) then stays within
/// (1 - rank_ratio) * O*I.
std::size_t keep_rank(double rank_ratio, std::size_t out_dim, std::size_t in_dim);

/// Dense merge of one group, role by role: union SVD, V-merge, reconstruct.
/// A singleton group is returned unchanged (bitwise).
ExpertWeights merge_group_dense(const std::vector<const ExpertWeights*>& experts,
                                std::span<const double> freqs, VMergeMode mode);

/// One role of the activation-aware truncated path: W'_i = W_i * S_i, joint
/// decomposition of the W', de-whitening of each block by a triangular solve
/// against S_i^T, frequency merge, truncation to r_keep. Pass nullptr
/// whiteners to skip whitening (S_i = I).
FactoredWeight whiten_truncate_role(const std::vector<Matrix>& mats,
                                    const std::vector<const Matrix*>& whiteners,
                                    std::span<const double> freqs, VMergeMode mode,
                                    std::size_t r_keep);

FactoredExpert merge_group_factored(
    const std::vector<const ExpertWeights*>& experts,
    const std::vector<std::array<const Matrix*, 3>>& whiteners,
    std::span<const double> freqs, const MergeConfig& config);

/// Replaces the expert list with one merged expert per group and points
/// expert_map at the group slots; the router matrix is left untouched.
MoELayer remap_router(const MoELayer& layer,
                      const std::vector<std::vector<std::size_t>>& groups,
                      std::vector<Expert> merged);

struct RoleReport {
  std::size_t rank = 0;
  double member_recon_rel_err = 0.0;  // mean ||W_i - u_sigma[:, :r] B_i[:r]|| / ||W_i||
  double dropped_energy = 0.0;        // sqrt(sum of discarded sigma^2)
};

struct GroupReport {
  std::size_t slot = 0;
  std::vector<std::size_t> members;
  std::vector<double> freqs;
  std::array<RoleReport, 3> roles;
  std::size_t params_before = 0;
  std::size_t params_after = 0;
};

struct LayerReport {
  std::size_t layer = 0;
  std::vector<GroupReport> groups;
};

struct MergeReport {
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  std::size_t expert_params_before = 0;
  std::size_t expert_params_after = 0;
  std::vector<LayerReport> layers;
};

nlohmann::json report_to_json(const MergeReport& r);

/// Full pipeline over one model: per layer, group frequencies from the trace,
/// per-group merge (dense or factored per config), router remap. The input
/// model is untouched.
std::pair<MoEStack, MergeReport> compress_model(const MoEStack& model,
                                                const ClusterPlan& plan,
                                                const ActivationTrace& trace,
                                                const MergeConfig& config);

}  // namespace smoe
