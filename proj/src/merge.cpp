// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#include "smoe/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "smoe/errors.hpp"
#include "smoe/kernels.hpp"

namespace smoe {

const char* vmerge_name(VMergeMode m) {
  switch (m) {
    case VMergeMode::Frequency:
      return "frequency";
    case VMergeMode::Average:
      return "average";
    case VMergeMode::Drop:
      return "drop";
  }
  return "?";
}

UnionDecomposition union_svd(const std::vector<Matrix>& mats) {
  if (mats.empty()) throw ShapeError("union_svd: empty group");
  const std::size_t out_dim = mats.front().rows;
  const std::size_t in_dim = mats.front().cols;
  for (const Matrix& m : mats) {
    if (m.rows != out_dim || m.cols != in_dim)
      throw ShapeError("union_svd: member shapes disagree");
    if (!m.all_finite()) throw NumericError("union_svd: non-finite entries");
  }

  const Matrix joined = hconcat(mats);
  SvdResult svd = svd_thin(joined);
  const std::size_t r = svd.sigma.size();

  UnionDecomposition d;
  d.rank = r;
  d.sigma = svd.sigma;
  d.u_sigma = Matrix(out_dim, r);
  for (std::size_t i = 0; i < out_dim; ++i)
    for (std::size_t j = 0; j < r; ++j)
      d.u_sigma.at(i, j) = svd.u.at(i, j) * svd.sigma[j];
  d.blocks.reserve(mats.size());
  for (std::size_t i = 0; i < mats.size(); ++i)
    d.blocks.push_back(col_block(svd.vt, i * in_dim, in_dim));
  return d;
}

namespace {

void check_freqs(std::span<const double> freqs, std::size_t n) {
  if (freqs.size() != n) throw ShapeError("frequency count does not match group size");
  for (double f : freqs)
    if (f < 0.0 || !std::isfinite(f)) throw ConfigError("negative or non-finite frequency");
}

Matrix weighted_block_sum(const std::vector<Matrix>& blocks,
                          std::span<const double> weights) {
  Matrix acc(blocks.front().rows, blocks.front().cols);
  for (std::size_t i = 0; i < blocks.size(); ++i)
    if (weights[i] != 0.0) add_scaled(acc, blocks[i], weights[i]);
  return acc;
}

std::vector<double> normalized_weights(std::span<const double> freqs, VMergeMode mode) {
  const std::size_t n = freqs.size();
  std::vector<double> w(n);
  switch (mode) {
    case VMergeMode::Frequency: {
      double total = 0.0;
      for (double f : freqs) total += f;
      if (total == 0.0) {
        // Dead group: nothing was ever routed here, fall back to the mean.
        std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(n));
      } else {
        for (std::size_t i = 0; i < n; ++i) w[i] = freqs[i] / total;
      }
      break;
    }
    case VMergeMode::Average:
      std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(n));
      break;
    case VMergeMode::Drop: {
      std::size_t best = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (freqs[i] > freqs[best]) best = i;
      w[best] = 1.0;
      break;
    }
  }
  return w;
}

}  // namespace

Matrix merge_v(const UnionDecomposition& d, std::span<const double> freqs,
               VMergeMode mode) {
  check_freqs(freqs, d.blocks.size());
  return weighted_block_sum(d.blocks, normalized_weights(freqs, mode));
}

Matrix reconstruct(const UnionDecomposition& d, const Matrix& v_merged) {
  return matmul(d.u_sigma, v_merged);
}

Matrix direct_weighted_merge(const std::vector<Matrix>& mats,
                             std::span<const double> weights) {
  if (mats.empty()) throw ShapeError("direct_weighted_merge: empty group");
  check_freqs(weights, mats.size());
  return weighted_block_sum(mats, normalized_weights(weights, VMergeMode::Frequency));
}

void MergeConfig::validate() const {
  if (rank_ratio < 0.0 || rank_ratio >= 1.0)
    throw ConfigError("MergeConfig: rank_ratio must be in [0, 1)");
  if (store_factored && rank_ratio == 0.0)
    throw ConfigError("MergeConfig: store_factored requires rank_ratio > 0");
  if (eps_scale <= 0.0) throw ConfigError("MergeConfig: eps_scale must be > 0");
}

std::size_t keep_rank(double rank_ratio, std::size_t out_dim, std::size_t in_dim) {
  const double budget = (1.0 - rank_ratio) * static_cast<double>(out_dim * in_dim) /
                        static_cast<double>(out_dim + in_dim);
  std::size_t r = static_cast<std::size_t>(std::floor(budget));
  r = std::max<std::size_t>(r, 1);
  return std::min(r, std::min(out_dim, in_dim));
}

namespace {

Matrix role_matrix(const ExpertWeights& e, Role role) {
  switch (role) {
    case Role::Gate:
      return e.gate;
    case Role::Up:
      return e.up;
    case Role::Down:
      return e.down;
  }
  throw ConfigError("role_matrix: unknown role");
}

Matrix& role_matrix_ref(ExpertWeights& e, Role role) {
  switch (role) {
    case Role::Gate:
      return e.gate;
    case Role::Up:
      return e.up;
    default:
      return e.down;
  }
}

FactoredWeight& role_factor_ref(FactoredExpert& e, Role role) {
  switch (role) {
    case Role::Gate:
      return e.gate;
    case Role::Up:
      return e.up;
    default:
      return e.down;
  }
}

}  // namespace

ExpertWeights merge_group_dense(const std::vector<const ExpertWeights*>& experts,
                                std::span<const double> freqs, VMergeMode mode) {
  if (experts.empty()) throw ShapeError("merge_group_dense: empty group");
  if (experts.size() == 1) return *experts.front();
  check_freqs(freqs, experts.size());

  ExpertWeights merged;
  for (Role role : kRoles) {
    std::vector<Matrix> mats;
    mats.reserve(experts.size());
    for (const ExpertWeights* e : experts) mats.push_back(role_matrix(*e, role));
    UnionDecomposition d = union_svd(mats);
    role_matrix_ref(merged, role) = reconstruct(d, merge_v(d, freqs, mode));
  }
  return merged;
}

FactoredWeight whiten_truncate_role(const std::vector<Matrix>& mats,
                                    const std::vector<const Matrix*>& whiteners,
                                    std::span<const double> freqs, VMergeMode mode,
                                    std::size_t r_keep) {
  if (mats.empty()) throw ShapeError("whiten_truncate_role: empty group");
  if (whiteners.size() != mats.size())
    throw ShapeError("whiten_truncate_role: whitener count does not match group");
  check_freqs(freqs, mats.size());

  std::vector<Matrix> reweighted;
  reweighted.reserve(mats.size());
  for (std::size_t i = 0; i < mats.size(); ++i) {
    if (whiteners[i]) {
      if (whiteners[i]->rows != mats[i].cols || whiteners[i]->cols != mats[i].cols)
        throw ShapeError("whiten_truncate_role: whitener shape does not match role");
      reweighted.push_back(matmul(mats[i], *whiteners[i]));
    } else {
      reweighted.push_back(mats[i]);
    }
  }

  UnionDecomposition d = union_svd(reweighted);
  const std::size_t r = std::min(r_keep, d.rank);

  // De-whiten each block by solving against the Cholesky factor, then merge.
  const std::vector<double> w = normalized_weights(freqs, mode);
  Matrix v_merged(d.rank, mats.front().cols);
  for (std::size_t i = 0; i < mats.size(); ++i) {
    if (w[i] == 0.0) continue;
    if (whiteners[i]) {
      add_scaled(v_merged, solve_right_lower(d.blocks[i], *whiteners[i]), w[i]);
    } else {
      add_scaled(v_merged, d.blocks[i], w[i]);
    }
  }

  FactoredWeight out;
  out.left = col_block(d.u_sigma, 0, r);
  out.right = top_rows(v_merged, r);
  return out;
}

FactoredExpert merge_group_factored(
    const std::vector<const ExpertWeights*>& experts,
    const std::vector<std::array<const Matrix*, 3>>& whiteners,
    std::span<const double> freqs, const MergeConfig& config) {
  if (experts.empty()) throw ShapeError("merge_group_factored: empty group");
  if (whiteners.size() != experts.size())
    throw ShapeError("merge_group_factored: whitener count does not match group");

  FactoredExpert merged;
  for (Role role : kRoles) {
    const std::size_t ri = static_cast<std::size_t>(role);
    std::vector<Matrix> mats;
    std::vector<const Matrix*> s;
    mats.reserve(experts.size());
    for (std::size_t i = 0; i < experts.size(); ++i) {
      mats.push_back(role_matrix(*experts[i], role));
      s.push_back(config.whiten ? whiteners[i][ri] : nullptr);
    }
    const std::size_t r =
        keep_rank(config.rank_ratio, mats.front().rows, mats.front().cols);
    role_factor_ref(merged, role) =
        whiten_truncate_role(mats, s, freqs, config.v_merge, r);
  }
  return merged;
}

MoELayer remap_router(const MoELayer& layer,
                      const std::vector<std::vector<std::size_t>>& groups,
                      std::vector<Expert> merged) {
  if (groups.size() != merged.size())
    throw ShapeError("remap_router: group/expert count mismatch");
  MoELayer out;
  out.router = layer.router;
  out.experts = std::move(merged);
  out.expert_map.assign(layer.router.rows, groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t orig : groups[g]) {
      if (orig >= out.expert_map.size() || out.expert_map[orig] != groups.size())
        throw ConfigError("remap_router: groups are not a partition");
      out.expert_map[orig] = g;
    }
  }
  for (std::size_t slot : out.expert_map)
    if (slot == groups.size())
      throw ConfigError("remap_router: groups do not cover all originals");
  return out;
}

namespace {

RoleReport role_report(const std::vector<Matrix>& mats, const UnionDecomposition& d,
                       std::size_t r) {
  RoleReport rep;
  rep.rank = r;
  double tail = 0.0;
  for (std::size_t j = r; j < d.sigma.size(); ++j) tail += d.sigma[j] * d.sigma[j];
  rep.dropped_energy = std::sqrt(tail);
  double acc = 0.0;
  for (std::size_t i = 0; i < mats.size(); ++i) {
    Matrix rec = matmul(col_block(d.u_sigma, 0, r), top_rows(d.blocks[i], r));
    const double denom = frob_norm(mats[i]);
    acc += denom > 0.0 ? frob_dist(rec, mats[i]) / denom : 0.0;
  }
  rep.member_recon_rel_err = acc / static_cast<double>(mats.size());
  return rep;
}

}  // namespace

nlohmann::json report_to_json(const MergeReport& r) {
  nlohmann::json j;
  j["params_before"] = r.params_before;
  j["params_after"] = r.params_after;
  j["expert_params_before"] = r.expert_params_before;
  j["expert_params_after"] = r.expert_params_after;
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerReport& lr : r.layers) {
    nlohmann::json groups = nlohmann::json::array();
    for (const GroupReport& g : lr.groups) {
      nlohmann::json roles;
      for (Role role : kRoles) {
        const RoleReport& rr = g.roles[static_cast<std::size_t>(role)];
        roles[role_name(role)] = {{"rank", rr.rank},
                                  {"member_recon_rel_err", rr.member_recon_rel_err},
                                  {"dropped_energy", rr.dropped_energy}};
      }
      groups.push_back({{"slot", g.slot},
                        {"members", g.members},
                        {"freqs", g.freqs},
                        {"roles", roles},
                        {"params_before", g.params_before},
                        {"params_after", g.params_after}});
    }
    layers.push_back({{"layer", lr.layer}, {"groups", groups}});
  }
  j["layers"] = std::move(layers);
  return j;
}

std::pair<MoEStack, MergeReport> compress_model(const MoEStack& model,
                                                const ClusterPlan& plan,
                                                const ActivationTrace& trace,
                                                const MergeConfig& config) {
  config.validate();
  plan.validate(model.config.n_layers, model.config.n_experts);
  if (trace.layers.size() != model.layers.size())
    throw ShapeError("compress_model: trace does not match model");
  for (const MoELayer& layer : model.layers) {
    if (layer.experts.size() != model.config.n_experts)
      throw ConfigError("compress_model: model is already compressed");
    for (const Expert& e : layer.experts)
      if (!std::holds_alternative<ExpertWeights>(e))
        throw ConfigError("compress_model: input experts must be dense");
  }

  const FrequencyTable freqs = expert_frequencies(trace);
  WhitenCache whiten;
  if (config.rank_ratio > 0.0 && config.whiten)
    whiten = build_whiten_cache(model, trace, config.eps_scale);

  MoEStack out;
  out.config = model.config;
  MergeReport report;
  report.params_before = param_count(model);
  report.expert_params_before = expert_param_count(model);

  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const MoELayer& layer = model.layers[l];
    const auto& groups = plan.groups[l];
    LayerReport lrep;
    lrep.layer = l;

    std::vector<Expert> merged;
    merged.reserve(groups.size());
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto& members = groups[g];
      std::vector<const ExpertWeights*> members_w;
      std::vector<double> f;
      std::size_t params_before = 0;
      for (std::size_t i : members) {
        members_w.push_back(&std::get<ExpertWeights>(layer.experts[i]));
        f.push_back(freqs.freq(l, i));
        params_before += param_count(layer.experts[i]);
      }

      GroupReport grep;
      grep.slot = g;
      grep.members = members;
      grep.freqs = f;
      grep.params_before = params_before;

      Expert result;
      if (config.rank_ratio == 0.0) {
        result = merge_group_dense(members_w, f, config.v_merge);
      } else {
        std::vector<std::array<const Matrix*, 3>> s(members.size(),
                                                    {nullptr, nullptr, nullptr});
        if (config.whiten) {
          for (std::size_t mi = 0; mi < members.size(); ++mi)
            for (std::size_t ri = 0; ri < 3; ++ri)
              s[mi][ri] = &whiten.s[l][members[mi]][ri];
        }
        FactoredExpert fe = merge_group_factored(members_w, s, f, config);
        if (config.store_factored) {
          result = std::move(fe);
        } else {
          ExpertWeights dense;
          dense.gate = matmul(fe.gate.left, fe.gate.right);
          dense.up = matmul(fe.up.left, fe.up.right);
          dense.down = matmul(fe.down.left, fe.down.right);
          result = std::move(dense);
        }
      }
      grep.params_after = param_count(result);

      // Per-role decomposition diagnostics at the kept rank.
      for (Role role : kRoles) {
        std::vector<Matrix> mats;
        for (const ExpertWeights* e : members_w) mats.push_back(role_matrix(*e, role));
        UnionDecomposition d = union_svd(mats);
        const std::size_t r =
            config.rank_ratio == 0.0
                ? d.rank
                : keep_rank(config.rank_ratio, mats.front().rows, mats.front().cols);
        grep.roles[static_cast<std::size_t>(role)] = role_report(mats, d, r);
      }

      lrep.groups.push_back(std::move(grep));
      merged.push_back(std::move(result));
    }
    out.layers.push_back(remap_router(layer, groups, std::move(merged)));
    report.layers.push_back(std::move(lrep));
  }

  report.params_after = param_count(out);
  report.expert_params_after = expert_param_count(out);
  return {std::move(out), std::move(report)};
}

}  // namespace smoe
