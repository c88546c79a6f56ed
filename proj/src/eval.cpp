// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#include "smoe/eval.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "smoe/cluster.hpp"
#include "smoe/errors.hpp"
#include "smoe/kernels.hpp"
#include "smoe/merge.hpp"

namespace smoe {

namespace {

double rel_err(std::span<const double> ref, std::span<const double> got) {
  const double denom = l2_norm(ref);
  if (denom == 0.0) return l2_norm(got) == 0.0 ? 0.0 : 1.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = ref[i] - got[i];
    acc += d * d;
  }
  return std::sqrt(acc) / denom;
}

double cosine_or_one(std::span<const double> a, std::span<const double> b) {
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 && nb == 0.0) return 1.0;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return kernels::dot(a.data(), b.data(), a.size()) / (na * nb);
}

}  // namespace

DivergenceReport output_divergence(const MoEStack& orig, const MoEStack& comp,
                                   const CalibSet& calib) {
  if (orig.config.d_model != comp.config.d_model ||
      orig.config.n_layers != comp.config.n_layers ||
      orig.config.top_k != comp.config.top_k)
    throw ShapeError("output_divergence: models disagree on shape");
  if (calib.tokens.cols != orig.config.d_model)
    throw ShapeError("output_divergence: calibration dimension mismatch");

  const std::size_t m = calib.tokens.rows;
  const std::size_t n_layers = orig.config.n_layers;
  const std::size_t top_k = orig.config.top_k;

  DivergenceReport rep;
  rep.per_layer.resize(n_layers);

  // Group structure per layer from comp's expert map.
  std::vector<std::vector<std::vector<std::size_t>>> members(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    rep.per_layer[l].layer = l;
    members[l].resize(comp.layers[l].experts.size());
    for (std::size_t i = 0; i < comp.layers[l].expert_map.size(); ++i)
      members[l][comp.layers[l].expert_map[i]].push_back(i);
    rep.per_layer[l].groups.resize(comp.layers[l].experts.size());
    for (std::size_t g = 0; g < comp.layers[l].experts.size(); ++g)
      rep.per_layer[l].groups[g].slot = g;
  }

  std::vector<std::vector<std::array<double, 3>>> residual_acc(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l)
    residual_acc[l].assign(comp.layers[l].experts.size(), {0.0, 0.0, 0.0});

  double e2e_err = 0.0, e2e_cos = 0.0;
  for (std::size_t t = 0; t < m; ++t) {
    std::vector<double> x_orig(calib.tokens.row(t), calib.tokens.row(t) + calib.tokens.cols);
    std::vector<double> x_comp = x_orig;

    for (std::size_t l = 0; l < n_layers; ++l) {
      const MoELayer& lo = orig.layers[l];
      const MoELayer& lc = comp.layers[l];

      RouteResult ro = layer_forward(lo, x_orig, top_k);
      RouteResult rc_matched = layer_forward(lc, x_orig, top_k);
      LayerDivergence& ld = rep.per_layer[l];
      ld.mean_rel_err += rel_err(ro.y, rc_matched.y);
      ld.mean_cosine += cosine_or_one(ro.y, rc_matched.y);

      // Per-group role residuals on the original stream.
      for (std::size_t g = 0; g < lc.experts.size(); ++g) {
        double slot_gate = 0.0;
        std::vector<std::pair<std::size_t, double>> active;  // (original, gate)
        for (std::size_t j = 0; j < ro.selected.size(); ++j) {
          const std::size_t i = ro.selected[j];
          if (lc.expert_map[i] == g) {
            slot_gate += ro.gates[j];
            active.emplace_back(i, ro.gates[j]);
          }
        }
        if (active.empty()) continue;
        GroupResidual& gr = rep.per_layer[l].groups[g];
        ++gr.active_tokens;

        const Expert& ce = lc.experts[g];
        // gate / up: shared layer input.
        for (Role role : {Role::Gate, Role::Up}) {
          std::vector<double> lhs;
          for (const auto& [i, gate] : active) {
            std::vector<double> v = role_apply(lo.experts[lo.expert_map[i]], role, x_orig);
            if (lhs.empty()) lhs.assign(v.size(), 0.0);
            kernels::axpy(gate, v.data(), lhs.data(), v.size());
          }
          std::vector<double> rhs = role_apply(ce, role, x_orig);
          kernels::scal(slot_gate, rhs.data(), rhs.size());
          kernels::axpy(-1.0, rhs.data(), lhs.data(), lhs.size());
          residual_acc[l][g][static_cast<std::size_t>(role)] += l2_norm(lhs);
        }
        // down: each expert feeds its own hidden state.
        {
          std::vector<double> lhs;
          for (const auto& [i, gate] : active) {
            const Expert& oe = lo.experts[lo.expert_map[i]];
            std::vector<double> h = expert_hidden(oe, x_orig);
            std::vector<double> v = role_apply(oe, Role::Down, h);
            if (lhs.empty()) lhs.assign(v.size(), 0.0);
            kernels::axpy(gate, v.data(), lhs.data(), v.size());
          }
          std::vector<double> hc = expert_hidden(ce, x_orig);
          std::vector<double> rhs = role_apply(ce, Role::Down, hc);
          kernels::scal(slot_gate, rhs.data(), rhs.size());
          kernels::axpy(-1.0, rhs.data(), lhs.data(), lhs.size());
          residual_acc[l][g][static_cast<std::size_t>(Role::Down)] += l2_norm(lhs);
        }
      }

      kernels::axpy(1.0, ro.y.data(), x_orig.data(), x_orig.size());
      RouteResult rc = layer_forward(lc, x_comp, top_k);
      kernels::axpy(1.0, rc.y.data(), x_comp.data(), x_comp.size());
    }
    e2e_err += rel_err(x_orig, x_comp);
    e2e_cos += cosine_or_one(x_orig, x_comp);
  }

  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t l = 0; l < n_layers; ++l) {
    rep.per_layer[l].mean_rel_err *= inv_m;
    rep.per_layer[l].mean_cosine *= inv_m;
    for (std::size_t g = 0; g < rep.per_layer[l].groups.size(); ++g) {
      GroupResidual& gr = rep.per_layer[l].groups[g];
      if (gr.active_tokens > 0) {
        const double inv = 1.0 / static_cast<double>(gr.active_tokens);
        gr.gate = residual_acc[l][g][0] * inv;
        gr.up = residual_acc[l][g][1] * inv;
        gr.down = residual_acc[l][g][2] * inv;
      }
    }
  }
  rep.end_to_end_rel_err = e2e_err * inv_m;
  rep.end_to_end_cosine = e2e_cos * inv_m;
  return rep;
}

nlohmann::json divergence_to_json(const DivergenceReport& r) {
  nlohmann::json j;
  j["end_to_end"] = {{"mean_rel_err", r.end_to_end_rel_err},
                     {"mean_cosine", r.end_to_end_cosine}};
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerDivergence& ld : r.per_layer) {
    nlohmann::json groups = nlohmann::json::array();
    for (const GroupResidual& g : ld.groups)
      groups.push_back({{"slot", g.slot},
                        {"active_tokens", g.active_tokens},
                        {"gate", g.gate},
                        {"up", g.up},
                        {"down", g.down}});
    layers.push_back({{"layer", ld.layer},
                      {"mean_rel_err", ld.mean_rel_err},
                      {"mean_cosine", ld.mean_cosine},
                      {"group_residuals", groups}});
  }
  j["per_layer"] = std::move(layers);
  return j;
}

AlignmentReport alignment_heatmaps(const MoEStack& model, const ActivationTrace& trace,
                                   std::size_t layer) {
  if (layer >= model.layers.size())
    throw ConfigError("alignment_heatmaps: layer index out of range");
  const MoELayer& ml = model.layers[layer];
  const std::size_t n = ml.experts.size();

  AlignmentReport rep;
  rep.layer = layer;
  rep.pre = similarity_matrix(trace, layer);

  for (const Expert& e : ml.experts)
    if (!std::holds_alternative<ExpertWeights>(e))
      throw ConfigError("alignment_heatmaps: needs dense experts");

  rep.post = Matrix(n, n);
  for (Role role : kRoles) {
    std::vector<Matrix> mats;
    mats.reserve(n);
    for (const Expert& e : ml.experts) {
      const auto& d = std::get<ExpertWeights>(e);
      switch (role) {
        case Role::Gate:
          mats.push_back(d.gate);
          break;
        case Role::Up:
          mats.push_back(d.up);
          break;
        case Role::Down:
          mats.push_back(d.down);
          break;
      }
    }
    UnionDecomposition d = union_svd(mats);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        rep.post.at(i, j) += cosine({d.blocks[i].data.data(), d.blocks[i].size()},
                                    {d.blocks[j].data.data(), d.blocks[j].size()});
  }
  kernels::scal(1.0 / 3.0, rep.post.data.data(), rep.post.size());
  return rep;
}

void write_csv(const Matrix& m, const std::filesystem::path& path) {
  std::string body;
  char buf[32];
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", m.at(i, j));
      body += buf;
      body += (j + 1 == m.cols) ? '\n' : ',';
    }
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
    out << body;
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace smoe
