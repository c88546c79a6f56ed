// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "smoe/matrix.hpp"
#include "smoe/model.hpp"

namespace smoe {

/// Calibration inputs, one token per row.
struct CalibSet {
  Matrix tokens;       // m x d_model
  std::string source;  // "synth:<seed>" or "file:<path>"
};

/// i.i.d. standard normal tokens, deterministic under (m, d_model, seed).
CalibSet make_calib_synthetic(std::size_t m, std::size_t d_model, std::uint64_t seed);

/// Same binary container as checkpoints, single tensor "calib" of shape
/// [m, d_model].
void save_calib(const CalibSet& calib, const std::filesystem::path& path);
CalibSet load_calib(const std::filesystem::path& path);

/// Per-layer capture over the calibration sweep. Expert outputs are recorded
/// densely (every expert on every token) while the residual stream advances
/// with the true routed output. All per-token records are row t of the
/// respective matrix.
struct LayerTrace {
  Matrix inputs;                               // m x d_model, layer input
  std::vector<Matrix> expert_outputs;          // per slot, m x d_model
  Matrix router_logits;                        // m x n_original
  std::vector<std::vector<std::size_t>> topk;  // per token, ascending originals
};

struct ActivationTrace {
  std::size_t tokens = 0;
  std::size_t top_k = 0;
  std::vector<LayerTrace> layers;
};

ActivationTrace capture(const MoEStack& model, const CalibSet& calib);

void save_trace(const ActivationTrace& trace, const std::filesystem::path& path);
ActivationTrace load_trace(const std::filesystem::path& path);

/// Activation frequencies f_i = (#tokens with i in the top-k set) / m.
/// Raw counts are kept so the counting identity sum_i f_i = top_k can be
/// checked exactly in integers.
struct FrequencyTable {
  std::size_t tokens = 0;
  std::size_t top_k = 0;
  std::vector<std::vector<std::uint64_t>> counts;  // [layer][original expert]

  double freq(std::size_t layer, std::size_t i) const;
  std::vector<double> layer_freqs(std::size_t layer) const;
};

FrequencyTable expert_frequencies(const ActivationTrace& trace);

/// Lower Cholesky factor S of X X^T + eps*I where X has the given rows as
/// columns, eps = eps_scale * trace(X X^T) / I (or eps_scale when the trace is
/// zero). eps_used receives the jitter actually applied.
Matrix whitening_matrix(const Matrix& rows, double eps_scale, double* eps_used = nullptr);

/// Per layer / original expert / role whitening factors. Gate and up whiten
/// against the layer input restricted to the expert's routed tokens; down
/// whitens against that expert's own hidden activations on the same tokens.
/// Experts that were never routed fall back to all tokens.
struct WhitenCache {
  double eps_scale = 1e-6;
  std::vector<std::vector<std::array<Matrix, 3>>> s;        // [layer][expert][role]
  std::vector<std::vector<std::array<double, 3>>> eps_used;
};

WhitenCache build_whiten_cache(const MoEStack& model, const ActivationTrace& trace,
                               double eps_scale = 1e-6);

}  // namespace smoe
