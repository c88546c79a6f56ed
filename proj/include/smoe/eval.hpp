// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <vector>

#include <json.hpp>

#include "smoe/calib.hpp"
#include "smoe/model.hpp"

namespace smoe {

/// Per-group output residuals, by role, between the gate-weighted original
/// experts and the (slot-gate-weighted) merged expert, averaged over the
/// tokens where the group was routed. Gate/up compare W x on the shared layer
/// input; down compares against each expert's own hidden state.
struct GroupResidual {
  std::size_t slot = 0;
  std::size_t active_tokens = 0;
  double gate = 0.0;
  double up = 0.0;
  double down = 0.0;
};

struct LayerDivergence {
  std::size_t layer = 0;
  double mean_rel_err = 0.0;  // mean over tokens of ||y_o - y_c|| / ||y_o||
  double mean_cosine = 0.0;
  std::vector<GroupResidual> groups;
};

struct DivergenceReport {
  std::vector<LayerDivergence> per_layer;
  double end_to_end_rel_err = 0.0;
  double end_to_end_cosine = 0.0;
};

/// Runs both models over the calibration tokens. Per-layer statistics feed
/// both layers the original model's residual stream; end-to-end statistics
/// let each model run its own stream. Groups are read off comp's expert_map.
DivergenceReport output_divergence(const MoEStack& orig, const MoEStack& comp,
                                   const CalibSet& calib);

nlohmann::json divergence_to_json(const DivergenceReport& r);

/// Pre/post alignment matrices for one layer: pre is the mean output-cosine
/// similarity; post is the cosine between flattened per-expert V blocks of a
/// layer-wide union decomposition, averaged over the three roles.
struct AlignmentReport {
  std::size_t layer = 0;
  Matrix pre;
  Matrix post;
};

AlignmentReport alignment_heatmaps(const MoEStack& model, const ActivationTrace& trace,
                                   std::size_t layer);

/// Plain numeric CSV, one matrix row per line.
void write_csv(const Matrix& m, const std::filesystem::path& path);

}  // namespace smoe
