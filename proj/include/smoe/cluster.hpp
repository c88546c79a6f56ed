// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "smoe/calib.hpp"
#include "smoe/model.hpp"

namespace smoe {

enum class Metric { ExpertOutput, RouterLogits, Weight };
enum class Algo { KMeans, Hierarchical, Random };

const char* metric_name(Metric m);
const char* algo_name(Algo a);

/// Mean per-token cosine between two experts' dense outputs; tokens where
/// either output is the zero vector contribute 0.
double output_similarity(const ActivationTrace& trace, std::size_t layer,
                         std::size_t i, std::size_t j);

/// Full n x n matrix of output similarities for one layer.
Matrix similarity_matrix(const ActivationTrace& trace, std::size_t layer);

/// Clustering feature vector for one expert, L2-normalized (exact zero when
/// the raw signature is zero). ExpertOutput signatures normalize each token's
/// output before the global normalization, which makes squared Euclidean
/// distance between two signatures an affine function of their mean output
/// cosine.
struct ExpertSignature {
  std::size_t layer = 0;
  std::size_t expert = 0;
  Metric metric = Metric::ExpertOutput;
  std::vector<double> vec;
};

ExpertSignature make_signature(const MoEStack& model, const ActivationTrace& trace,
                               std::size_t layer, std::size_t expert, Metric metric);

/// k-means++ seeding: first seed uniform, each next seed drawn with
/// probability proportional to squared distance from the chosen set. When all
/// remaining mass is zero (every leftover point duplicates a seed) the lowest
/// unchosen index is taken.
std::vector<std::size_t> kmeans_pp_init(const std::vector<ExpertSignature>& sigs,
                                        std::size_t k, std::uint64_t seed);

struct KMeansResult {
  std::vector<std::size_t> assign;
  double objective = 0.0;
  std::size_t iterations = 0;
  std::vector<double> objective_history;  // J after each means update
};

/// Lloyd iterations with k-means++ seeding. Assignment ties go to the lowest
/// centroid index; empty clusters are reseeded with the point farthest from
/// its current centroid.
KMeansResult kmeans(const std::vector<ExpertSignature>& sigs, std::size_t k,
                    std::size_t max_iter = 100, double tol = 1e-6,
                    std::uint64_t seed = 0);

/// Agglomerative average-linkage on Euclidean distance, cut at k clusters.
std::vector<std::size_t> hierarchical(const std::vector<ExpertSignature>& sigs,
                                      std::size_t k);

/// Uniform balanced partition (sizes differ by at most one), deterministic
/// under seed. Groups are sorted by smallest member.
std::vector<std::vector<std::size_t>> random_grouping(std::size_t n, std::size_t k,
                                                      std::uint64_t seed);

/// Per-layer partition of original expert indices into merge groups.
struct ClusterPlan {
  std::size_t window = 1;
  double keep_ratio = 1.0;
  std::size_t budget_total = 0;
  std::vector<std::vector<std::vector<std::size_t>>> groups;  // [layer][group][member]

  void validate(std::size_t n_layers, std::size_t n_experts) const;
};

/// Windowed multi-layer allocation: layers are pooled in consecutive windows,
/// clustered jointly with k = ceil(keep_ratio * experts-in-window) (capped by
/// a running global budget of ceil(keep_ratio * total experts)), cross-layer
/// clusters are split per layer, and same-layer groups with the most similar
/// centroids are re-merged until the window budget holds.
ClusterPlan multilayer_plan(const MoEStack& model, const ActivationTrace& trace,
                            double keep_ratio, std::size_t window, Metric metric,
                            Algo algo, std::uint64_t seed);

nlohmann::json plan_to_json(const ClusterPlan& plan);
ClusterPlan plan_from_json(const nlohmann::json& j);
void save_plan(const ClusterPlan& plan, const std::filesystem::path& path);
ClusterPlan load_plan(const std::filesystem::path& path);

}  // namespace smoe
