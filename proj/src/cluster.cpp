// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#include "smoe/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "smoe/errors.hpp"
#include "smoe/kernels.hpp"
#include "smoe/rng.hpp"

namespace smoe {

const char* metric_name(Metric m) {
  switch (m) {
    case Metric::ExpertOutput:
      return "output";
    case Metric::RouterLogits:
      return "router";
    case Metric::Weight:
      return "weight";
  }
  return "?";
}

const char* algo_name(Algo a) {
  switch (a) {
    case Algo::KMeans:
      return "kmeans";
    case Algo::Hierarchical:
      return "hier";
    case Algo::Random:
      return "random";
  }
  return "?";
}

double output_similarity(const ActivationTrace& trace, std::size_t layer,
                         std::size_t i, std::size_t j) {
  const LayerTrace& lt = trace.layers.at(layer);
  const Matrix& oi = lt.expert_outputs.at(i);
  const Matrix& oj = lt.expert_outputs.at(j);
  double acc = 0.0;
  for (std::size_t t = 0; t < oi.rows; ++t)
    acc += cosine(oi.row_span(t), oj.row_span(t));
  return acc / static_cast<double>(oi.rows);
}

Matrix similarity_matrix(const ActivationTrace& trace, std::size_t layer) {
  const std::size_t n = trace.layers.at(layer).expert_outputs.size();
  Matrix sim(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const double s = output_similarity(trace, layer, i, j);
      sim.at(i, j) = s;
      sim.at(j, i) = s;
    }
  }
  return sim;
}

namespace {

void normalize_or_zero(std::vector<double>& v) {
  const double n2 = kernels::sumsq(v.data(), v.size());
  if (n2 > 0.0) kernels::scal(1.0 / std::sqrt(n2), v.data(), v.size());
}

}  // namespace

ExpertSignature make_signature(const MoEStack& model, const ActivationTrace& trace,
                               std::size_t layer, std::size_t expert, Metric metric) {
  ExpertSignature sig;
  sig.layer = layer;
  sig.expert = expert;
  sig.metric = metric;

  const LayerTrace& lt = trace.layers.at(layer);
  switch (metric) {
    case Metric::ExpertOutput: {
      const Matrix& out = lt.expert_outputs.at(expert);
      sig.vec.resize(out.size());
      for (std::size_t t = 0; t < out.rows; ++t) {
        const double* src = out.row(t);
        double* dst = sig.vec.data() + t * out.cols;
        const double n2 = kernels::sumsq(src, out.cols);
        const double inv = n2 > 0.0 ? 1.0 / std::sqrt(n2) : 0.0;
        for (std::size_t c = 0; c < out.cols; ++c) dst[c] = src[c] * inv;
      }
      break;
    }
    case Metric::RouterLogits: {
      sig.vec.resize(lt.router_logits.rows);
      for (std::size_t t = 0; t < lt.router_logits.rows; ++t)
        sig.vec[t] = lt.router_logits.at(t, expert);
      break;
    }
    case Metric::Weight: {
      const MoELayer& ml = model.layers.at(layer);
      const Expert& e = ml.experts.at(ml.expert_map.at(expert));
      std::vector<const Matrix*> parts;
      if (const auto* d = std::get_if<ExpertWeights>(&e)) {
        parts = {&d->gate, &d->up, &d->down};
      } else {
        const auto& f = std::get<FactoredExpert>(e);
        parts = {&f.gate.left, &f.gate.right, &f.up.left,
                 &f.up.right,  &f.down.left,  &f.down.right};
      }
      for (const Matrix* p : parts)
        sig.vec.insert(sig.vec.end(), p->data.begin(), p->data.end());
      break;
    }
  }
  normalize_or_zero(sig.vec);
  return sig;
}

namespace {

void check_same_length(const std::vector<ExpertSignature>& sigs) {
  for (const ExpertSignature& s : sigs)
    if (s.vec.size() != sigs.front().vec.size())
      throw ShapeError("signatures have differing lengths");
}

}  // namespace

std::vector<std::size_t> kmeans_pp_init(const std::vector<ExpertSignature>& sigs,
                                        std::size_t k, std::uint64_t seed) {
  const std::size_t n = sigs.size();
  if (k == 0 || k > n) throw ConfigError("kmeans_pp_init: k out of range");
  check_same_length(sigs);
  Rng rng(mix_seed(seed, 0x6b6d7070 /* 'kmpp' */));

  std::vector<std::size_t> chosen;
  chosen.reserve(k);
  std::vector<bool> is_chosen(n, false);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());

  const std::size_t first = rng.below(n);
  chosen.push_back(first);
  is_chosen[first] = true;

  while (chosen.size() < k) {
    const ExpertSignature& last = sigs[chosen.back()];
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (is_chosen[i]) {
        d2[i] = 0.0;
        continue;
      }
      d2[i] = std::min(d2[i], kernels::dist_sq(sigs[i].vec.data(), last.vec.data(),
                                               last.vec.size()));
      total += d2[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double cum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        cum += d2[i];
        if (cum >= r) {
          pick = i;
          break;
        }
      }
      if (pick == n) {  // guard against accumulated rounding at r ~ total
        for (std::size_t i = n; i-- > 0;)
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
      }
    } else {
      // Only duplicates of chosen seeds remain.
      for (std::size_t i = 0; i < n; ++i)
        if (!is_chosen[i]) {
          pick = i;
          break;
        }
    }
    chosen.push_back(pick);
    is_chosen[pick] = true;
  }
  return chosen;
}

KMeansResult kmeans(const std::vector<ExpertSignature>& sigs, std::size_t k,
                    std::size_t max_iter, double tol, std::uint64_t seed) {
  const std::size_t n = sigs.size();
  if (k == 0 || k > n) throw ConfigError("kmeans: k out of range");
  if (max_iter == 0) throw ConfigError("kmeans: max_iter must be >= 1");
  check_same_length(sigs);
  const std::size_t dim = sigs.front().vec.size();

  KMeansResult res;
  if (k == n) {
    res.assign.resize(n);
    std::iota(res.assign.begin(), res.assign.end(), 0);
    res.objective = 0.0;
    res.objective_history = {0.0};
    return res;
  }

  std::vector<std::size_t> seeds = kmeans_pp_init(sigs, k, seed);
  Matrix centroids(k, dim);
  for (std::size_t c = 0; c < k; ++c)
    std::copy(sigs[seeds[c]].vec.begin(), sigs[seeds[c]].vec.end(), centroids.row(c));

  std::vector<std::size_t> assign(n, 0), prev_assign;
  double prev_j = std::numeric_limits<double>::infinity();

  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    // Assignment, ties to the lowest centroid index.
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_c = 0;
      for (std::size_t c = 0; c < k; ++c) {
        const double d = kernels::dist_sq(sigs[i].vec.data(), centroids.row(c), dim);
        if (d < best) {
          best = d;
          best_c = c;
        }
      }
      assign[i] = best_c;
    }

    // Reseed empty clusters with the point farthest from its centroid.
    std::vector<std::size_t> sizes(k, 0);
    for (std::size_t a : assign) ++sizes[a];
    for (std::size_t c = 0; c < k; ++c) {
      while (sizes[c] == 0) {
        double worst = -1.0;
        std::size_t worst_i = n;
        for (std::size_t i = 0; i < n; ++i) {
          if (sizes[assign[i]] <= 1) continue;
          const double d =
              kernels::dist_sq(sigs[i].vec.data(), centroids.row(assign[i]), dim);
          if (d > worst) {
            worst = d;
            worst_i = i;
          }
        }
        if (worst_i == n) break;  // nothing movable
        --sizes[assign[worst_i]];
        assign[worst_i] = c;
        ++sizes[c];
      }
    }

    // Means update.
    centroids = Matrix(k, dim);
    for (std::size_t i = 0; i < n; ++i)
      kernels::axpy(1.0, sigs[i].vec.data(), centroids.row(assign[i]), dim);
    for (std::size_t c = 0; c < k; ++c)
      if (sizes[c] > 0)
        kernels::scal(1.0 / static_cast<double>(sizes[c]), centroids.row(c), dim);

    double j = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      j += kernels::dist_sq(sigs[i].vec.data(), centroids.row(assign[i]), dim);
    res.objective_history.push_back(j);
    res.iterations = iter + 1;

    const bool stable = (assign == prev_assign);
    const bool small_delta = prev_j < std::numeric_limits<double>::infinity() &&
                             std::abs(prev_j - j) < tol * prev_j;
    prev_assign = assign;
    prev_j = j;
    if (stable || small_delta) break;
  }

  res.assign = std::move(prev_assign);
  res.objective = prev_j;
  return res;
}

std::vector<std::size_t> hierarchical(const std::vector<ExpertSignature>& sigs,
                                      std::size_t k) {
  const std::size_t n = sigs.size();
  if (k == 0 || k > n) throw ConfigError("hierarchical: k out of range");
  check_same_length(sigs);

  // Pairwise Euclidean distances once; average linkage is maintained with
  // Lance-Williams updates on cluster-level distances.
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  std::vector<std::size_t> csize(n, 1);
  std::vector<bool> alive(n, true);
  Matrix link(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = std::sqrt(
          kernels::dist_sq(sigs[i].vec.data(), sigs[j].vec.data(), sigs[i].vec.size()));
      link.at(i, j) = d;
      link.at(j, i) = d;
    }

  std::size_t clusters = n;
  while (clusters > k) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t ba = 0, bb = 0;
    for (std::size_t a = 0; a < n; ++a) {
      if (!alive[a]) continue;
      for (std::size_t b = a + 1; b < n; ++b) {
        if (!alive[b]) continue;
        if (link.at(a, b) < best) {
          best = link.at(a, b);
          ba = a;
          bb = b;
        }
      }
    }
    // Merge bb into ba.
    for (std::size_t c = 0; c < n; ++c) {
      if (!alive[c] || c == ba || c == bb) continue;
      const double w = (static_cast<double>(csize[ba]) * link.at(ba, c) +
                        static_cast<double>(csize[bb]) * link.at(bb, c)) /
                       static_cast<double>(csize[ba] + csize[bb]);
      link.at(ba, c) = w;
      link.at(c, ba) = w;
    }
    csize[ba] += csize[bb];
    alive[bb] = false;
    for (std::size_t i = 0; i < n; ++i)
      if (parent[i] == bb) parent[i] = ba;
    --clusters;
  }

  // Compact labels in first-appearance order.
  std::vector<std::size_t> label(n, n);
  std::vector<std::size_t> out(n);
  std::size_t next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (label[parent[i]] == n) label[parent[i]] = next++;
    out[i] = label[parent[i]];
  }
  return out;
}

std::vector<std::vector<std::size_t>> random_grouping(std::size_t n, std::size_t k,
                                                      std::uint64_t seed) {
  if (k == 0 || k > n) throw ConfigError("random_grouping: k out of range");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(mix_seed(seed, 0x72616e64 /* 'rand' */));
  for (std::size_t i = n; i-- > 1;) {
    const std::size_t j = rng.below(i + 1);
    std::swap(idx[i], idx[j]);
  }
  std::vector<std::vector<std::size_t>> groups(k);
  std::size_t pos = 0;
  for (std::size_t g = 0; g < k; ++g) {
    const std::size_t sz = n / k + (g < n % k ? 1 : 0);
    groups[g].assign(idx.begin() + pos, idx.begin() + pos + sz);
    std::sort(groups[g].begin(), groups[g].end());
    pos += sz;
  }
  std::sort(groups.begin(), groups.end(),
            [](const auto& a, const auto& b) { return a.front() < b.front(); });
  return groups;
}

void ClusterPlan::validate(std::size_t n_layers, std::size_t n_experts) const {
  if (groups.size() != n_layers) throw ConfigError("ClusterPlan: layer count mismatch");
  std::size_t total = 0;
  for (const auto& layer_groups : groups) {
    if (layer_groups.empty()) throw ConfigError("ClusterPlan: layer with no groups");
    std::vector<bool> seen(n_experts, false);
    for (const auto& g : layer_groups) {
      if (g.empty()) throw ConfigError("ClusterPlan: empty group");
      for (std::size_t i : g) {
        if (i >= n_experts || seen[i])
          throw ConfigError("ClusterPlan: groups are not a partition");
        seen[i] = true;
      }
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end())
      throw ConfigError("ClusterPlan: groups do not cover all experts");
    total += layer_groups.size();
  }
  if (budget_total != 0 && total > budget_total)
    throw ConfigError("ClusterPlan: group count exceeds budget");
}

namespace {

struct WorkGroup {
  std::size_t layer;
  std::vector<std::size_t> members;     // original indices within the layer
  std::vector<double> centroid;
  std::size_t pool_rank;                // for deterministic tie-breaks
};

std::vector<double> mean_signature(const std::vector<ExpertSignature>& sigs,
                                   const std::vector<std::size_t>& pool_indices) {
  std::vector<double> c(sigs.front().vec.size(), 0.0);
  for (std::size_t p : pool_indices)
    kernels::axpy(1.0, sigs[p].vec.data(), c.data(), c.size());
  kernels::scal(1.0 / static_cast<double>(pool_indices.size()), c.data(), c.size());
  return c;
}

}  // namespace

ClusterPlan multilayer_plan(const MoEStack& model, const ActivationTrace& trace,
                            double keep_ratio, std::size_t window, Metric metric,
                            Algo algo, std::uint64_t seed) {
  if (!(keep_ratio > 0.0) || keep_ratio > 1.0)
    throw ConfigError("multilayer_plan: keep_ratio must be in (0, 1]");
  if (window == 0) throw ConfigError("multilayer_plan: window must be >= 1");
  if (trace.layers.size() != model.layers.size())
    throw ShapeError("multilayer_plan: trace does not match model");

  const std::size_t n = model.config.n_experts;
  const std::size_t n_layers = model.config.n_layers;
  const std::size_t budget_total = static_cast<std::size_t>(
      std::ceil(keep_ratio * static_cast<double>(n * n_layers)));
  if (budget_total < n_layers)
    throw ConfigError("multilayer_plan: budget below one group per layer");

  ClusterPlan plan;
  plan.window = window;
  plan.keep_ratio = keep_ratio;
  plan.budget_total = budget_total;
  plan.groups.resize(n_layers);

  std::size_t remaining_budget = budget_total;
  std::size_t window_index = 0;
  for (std::size_t w0 = 0; w0 < n_layers; w0 += window, ++window_index) {
    const std::size_t w1 = std::min(w0 + window, n_layers);
    const std::size_t lw = w1 - w0;
    const std::size_t nw = n * lw;

    std::size_t k_w = static_cast<std::size_t>(
        std::ceil(keep_ratio * static_cast<double>(nw)));
    if (k_w < lw) throw ConfigError("multilayer_plan: infeasible budget for window");
    const std::size_t layers_after = n_layers - w1;
    if (remaining_budget < layers_after + lw)
      throw ConfigError("multilayer_plan: infeasible budget for window");
    k_w = std::min(k_w, remaining_budget - layers_after);
    k_w = std::min(k_w, nw);

    // Pool signatures layer-major: pool index p = (layer - w0) * n + expert.
    std::vector<ExpertSignature> pool;
    pool.reserve(nw);
    for (std::size_t l = w0; l < w1; ++l)
      for (std::size_t i = 0; i < n; ++i)
        pool.push_back(make_signature(model, trace, l, i, metric));

    std::vector<std::size_t> assign(nw);
    switch (algo) {
      case Algo::KMeans:
        assign = kmeans(pool, k_w, 100, 1e-6, mix_seed(seed, window_index)).assign;
        break;
      case Algo::Hierarchical:
        assign = hierarchical(pool, k_w);
        break;
      case Algo::Random: {
        const auto groups = random_grouping(nw, k_w, mix_seed(seed, window_index));
        for (std::size_t g = 0; g < groups.size(); ++g)
          for (std::size_t p : groups[g]) assign[p] = g;
        break;
      }
    }

    // Split each cluster per layer: merging never crosses layers.
    std::vector<WorkGroup> work;
    for (std::size_t c = 0; c < k_w; ++c) {
      for (std::size_t l = w0; l < w1; ++l) {
        WorkGroup g;
        g.layer = l;
        std::vector<std::size_t> pool_indices;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t p = (l - w0) * n + i;
          if (assign[p] == c) {
            g.members.push_back(i);
            pool_indices.push_back(p);
          }
        }
        if (g.members.empty()) continue;
        g.centroid = mean_signature(pool, pool_indices);
        g.pool_rank = pool_indices.front();
        work.push_back(std::move(g));
      }
    }

    // Re-merge nearest same-layer centroids until the window budget holds.
    while (work.size() > k_w) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t ba = work.size(), bb = work.size();
      for (std::size_t a = 0; a < work.size(); ++a) {
        for (std::size_t b = a + 1; b < work.size(); ++b) {
          if (work[a].layer != work[b].layer) continue;
          const double d = kernels::dist_sq(work[a].centroid.data(),
                                            work[b].centroid.data(),
                                            work[a].centroid.size());
          if (d < best) {
            best = d;
            ba = a;
            bb = b;
          }
        }
      }
      if (ba == work.size()) break;  // no same-layer pair left (cannot happen when k_w >= lw)
      const double wa = static_cast<double>(work[ba].members.size());
      const double wb = static_cast<double>(work[bb].members.size());
      for (std::size_t d = 0; d < work[ba].centroid.size(); ++d)
        work[ba].centroid[d] =
            (wa * work[ba].centroid[d] + wb * work[bb].centroid[d]) / (wa + wb);
      work[ba].members.insert(work[ba].members.end(), work[bb].members.begin(),
                              work[bb].members.end());
      std::sort(work[ba].members.begin(), work[ba].members.end());
      work.erase(work.begin() + static_cast<std::ptrdiff_t>(bb));
    }

    for (std::size_t l = w0; l < w1; ++l) {
      auto& layer_groups = plan.groups[l];
      for (const WorkGroup& g : work)
        if (g.layer == l) layer_groups.push_back(g.members);
      std::sort(layer_groups.begin(), layer_groups.end(),
                [](const auto& a, const auto& b) { return a.front() < b.front(); });
      if (layer_groups.empty())
        throw ConfigError("multilayer_plan: layer lost all groups");
    }
    remaining_budget -= work.size();
  }

  plan.validate(n_layers, n);
  return plan;
}

nlohmann::json plan_to_json(const ClusterPlan& plan) {
  nlohmann::json j;
  j["window"] = plan.window;
  j["keep_ratio"] = plan.keep_ratio;
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < plan.groups.size(); ++l)
    layers.push_back({{"layer", l}, {"groups", plan.groups[l]}});
  j["layers"] = std::move(layers);
  return j;
}

ClusterPlan plan_from_json(const nlohmann::json& j) {
  ClusterPlan plan;
  try {
    plan.window = j.at("window").get<std::size_t>();
    plan.keep_ratio = j.at("keep_ratio").get<double>();
    const auto& layers = j.at("layers");
    plan.groups.resize(layers.size());
    for (const auto& jl : layers) {
      const std::size_t l = jl.at("layer").get<std::size_t>();
      if (l >= plan.groups.size()) throw ConfigError("plan: layer index out of range");
      plan.groups[l] = jl.at("groups").get<std::vector<std::vector<std::size_t>>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("plan: malformed JSON: ") + e.what());
  }
  for (const auto& lg : plan.groups) plan.budget_total += lg.size();
  return plan;
}

void save_plan(const ClusterPlan& plan, const std::filesystem::path& path) {
  const std::string body = plan_to_json(plan).dump(2) + "\n";
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
    out << body;
  }
  std::filesystem::rename(tmp, path);
}

ClusterPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("plan: malformed JSON: ") + e.what());
  }
  return plan_from_json(j);
}

}  // namespace smoe
