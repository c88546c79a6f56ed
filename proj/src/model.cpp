// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#include "smoe/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "smoe/errors.hpp"
#include "smoe/kernels.hpp"
#include "smoe/rng.hpp"

namespace smoe {

void ModelConfig::validate() const {
  if (d_model == 0 || d_expert == 0 || n_layers == 0 || n_experts == 0 || top_k == 0)
    throw ConfigError("ModelConfig: all dimensions must be >= 1");
  if (top_k > n_experts) throw ConfigError("ModelConfig: top_k exceeds n_experts");
}

const char* role_name(Role r) {
  switch (r) {
    case Role::Gate:
      return "gate";
    case Role::Up:
      return "up";
    case Role::Down:
      return "down";
  }
  return "?";
}

namespace {

std::vector<double> apply_factored(const FactoredWeight& w, std::span<const double> x) {
  std::vector<double> mid = matvec(w.right, x);
  return matvec(w.left, mid);
}

}  // namespace

std::vector<double> role_apply(const Expert& e, Role role, std::span<const double> x) {
  if (const auto* d = std::get_if<ExpertWeights>(&e)) {
    switch (role) {
      case Role::Gate:
        return matvec(d->gate, x);
      case Role::Up:
        return matvec(d->up, x);
      case Role::Down:
        return matvec(d->down, x);
    }
  }
  const auto& f = std::get<FactoredExpert>(e);
  switch (role) {
    case Role::Gate:
      return apply_factored(f.gate, x);
    case Role::Up:
      return apply_factored(f.up, x);
    case Role::Down:
      return apply_factored(f.down, x);
  }
  throw ConfigError("role_apply: unknown role");
}

std::vector<double> expert_hidden(const Expert& e, std::span<const double> x) {
  std::vector<double> g = role_apply(e, Role::Gate, x);
  std::vector<double> u = role_apply(e, Role::Up, x);
  if (g.size() != u.size()) throw ShapeError("expert_hidden: gate/up dimensions disagree");
  std::vector<double> h(g.size());
  kernels::silu_mul(g.data(), u.data(), h.data(), g.size());
  return h;
}

std::vector<double> expert_forward(const Expert& e, std::span<const double> x) {
  std::vector<double> h = expert_hidden(e, x);
  return role_apply(e, Role::Down, h);
}

std::vector<double> expert_forward(const ExpertWeights& e, std::span<const double> x) {
  return expert_forward(Expert{e}, x);
}

std::vector<double> expert_forward(const FactoredExpert& e, std::span<const double> x) {
  return expert_forward(Expert{e}, x);
}

RouteResult layer_forward(const MoELayer& layer, std::span<const double> x,
                          std::size_t top_k) {
  const std::size_t n = layer.router.rows;
  if (top_k == 0 || top_k > n) throw ConfigError("layer_forward: top_k out of range");
  if (layer.expert_map.size() != n)
    throw ShapeError("layer_forward: expert_map length does not match router");

  std::vector<double> logits = matvec(layer.router, x);

  // Top-k original indices by logit, ties to the lowest index.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return logits[a] > logits[b];
  });
  RouteResult out;
  out.selected.assign(order.begin(), order.begin() + top_k);
  std::sort(out.selected.begin(), out.selected.end());

  // Softmax over the selected logits only.
  double max_logit = logits[out.selected.front()];
  for (std::size_t i : out.selected) max_logit = std::max(max_logit, logits[i]);
  out.gates.resize(top_k);
  double z = 0.0;
  for (std::size_t j = 0; j < top_k; ++j) {
    out.gates[j] = std::exp(logits[out.selected[j]] - max_logit);
    z += out.gates[j];
  }
  for (double& g : out.gates) g /= z;

  // Originals that map to the same slot pool their gates; each slot runs once.
  std::vector<double> slot_gate(layer.experts.size(), 0.0);
  for (std::size_t j = 0; j < top_k; ++j) {
    const std::size_t slot = layer.expert_map[out.selected[j]];
    if (slot >= layer.experts.size())
      throw ShapeError("layer_forward: expert_map slot out of range");
    slot_gate[slot] += out.gates[j];
  }

  out.y.assign(x.size(), 0.0);
  for (std::size_t slot = 0; slot < layer.experts.size(); ++slot) {
    if (slot_gate[slot] == 0.0) continue;
    std::vector<double> ey = expert_forward(layer.experts[slot], x);
    kernels::axpy(slot_gate[slot], ey.data(), out.y.data(), out.y.size());
  }
  return out;
}

std::vector<double> stack_forward(const MoEStack& model, std::span<const double> x) {
  if (x.size() != model.config.d_model)
    throw ShapeError("stack_forward: input length does not match d_model");
  std::vector<double> state(x.begin(), x.end());
  for (const MoELayer& layer : model.layers) {
    RouteResult r = layer_forward(layer, state, model.config.top_k);
    kernels::axpy(1.0, r.y.data(), state.data(), state.size());
  }
  return state;
}

namespace {

Matrix draw_matrix(Rng& rng, std::size_t rows, std::size_t cols, double lo, double hi) {
  Matrix m(rows, cols);
  for (double& v : m.data) v = rng.uniform(lo, hi);
  return m;
}

}  // namespace

MoEStack gen_synthetic(const ModelConfig& config, const RedundancySpec& redundancy) {
  config.validate();
  if (redundancy.n_distinct == 0 || redundancy.n_distinct > config.n_experts)
    throw ConfigError("gen_synthetic: n_distinct must be in [1, n_experts]");
  if (redundancy.noise < 0.0) throw ConfigError("gen_synthetic: noise must be >= 0");

  const double lim = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  const std::size_t d = config.d_model;
  const std::size_t h = config.d_expert;

  MoEStack model;
  model.config = config;
  model.layers.reserve(config.n_layers);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    Rng rng(mix_seed(config.seed, l));
    std::vector<ExpertWeights> base(redundancy.n_distinct);
    for (ExpertWeights& e : base) {
      e.gate = draw_matrix(rng, h, d, -lim, lim);
      e.up = draw_matrix(rng, h, d, -lim, lim);
      e.down = draw_matrix(rng, d, h, -lim, lim);
    }

    MoELayer layer;
    layer.experts.reserve(config.n_experts);
    for (std::size_t i = 0; i < config.n_experts; ++i) {
      ExpertWeights e = base[i % redundancy.n_distinct];
      // Noise is always drawn so the stream layout does not depend on eps.
      Matrix ng = draw_matrix(rng, h, d, -1.0, 1.0);
      Matrix nu = draw_matrix(rng, h, d, -1.0, 1.0);
      Matrix nd = draw_matrix(rng, d, h, -1.0, 1.0);
      if (redundancy.noise != 0.0) {
        add_scaled(e.gate, ng, redundancy.noise);
        add_scaled(e.up, nu, redundancy.noise);
        add_scaled(e.down, nd, redundancy.noise);
      }
      layer.experts.emplace_back(std::move(e));
    }
    layer.router = draw_matrix(rng, config.n_experts, d, -lim, lim);
    layer.expert_map.resize(config.n_experts);
    std::iota(layer.expert_map.begin(), layer.expert_map.end(), 0);
    model.layers.push_back(std::move(layer));
  }
  return model;
}

std::size_t param_count(const Expert& e) {
  if (const auto* d = std::get_if<ExpertWeights>(&e))
    return d->gate.size() + d->up.size() + d->down.size();
  const auto& f = std::get<FactoredExpert>(e);
  std::size_t total = 0;
  for (const FactoredWeight* w : {&f.gate, &f.up, &f.down})
    total += w->left.size() + w->right.size();
  return total;
}

std::size_t expert_param_count(const MoEStack& model) {
  std::size_t total = 0;
  for (const MoELayer& layer : model.layers)
    for (const Expert& e : layer.experts) total += param_count(e);
  return total;
}

std::size_t param_count(const MoEStack& model) {
  std::size_t total = expert_param_count(model);
  for (const MoELayer& layer : model.layers) total += layer.router.size();
  return total;
}

namespace {

void check_role_dims(const Matrix& left, const Matrix& right, std::size_t out_dim,
                     std::size_t in_dim, const char* what) {
  if (left.rows != out_dim || right.cols != in_dim || left.cols != right.rows)
    throw ConfigError(std::string("validate_stack: bad factored shape for ") + what);
}

}  // namespace

void validate_stack(const MoEStack& model) {
  model.config.validate();
  const std::size_t d = model.config.d_model;
  const std::size_t h = model.config.d_expert;
  const std::size_t n = model.config.n_experts;
  if (model.layers.size() != model.config.n_layers)
    throw ConfigError("validate_stack: layer count disagrees with config");
  for (const MoELayer& layer : model.layers) {
    if (layer.router.rows != n || layer.router.cols != d)
      throw ConfigError("validate_stack: router shape disagrees with config");
    if (layer.expert_map.size() != n)
      throw ConfigError("validate_stack: expert_map length disagrees with config");
    std::vector<bool> referenced(layer.experts.size(), false);
    for (std::size_t slot : layer.expert_map) {
      if (slot >= layer.experts.size())
        throw ConfigError("validate_stack: expert_map slot out of range");
      referenced[slot] = true;
    }
    for (bool r : referenced)
      if (!r) throw ConfigError("validate_stack: unreferenced expert slot");
    for (const Expert& e : layer.experts) {
      if (const auto* dense = std::get_if<ExpertWeights>(&e)) {
        if (dense->gate.rows != h || dense->gate.cols != d ||
            !dense->up.same_shape(dense->gate) || dense->down.rows != d ||
            dense->down.cols != h)
          throw ConfigError("validate_stack: expert weight shapes disagree with config");
      } else {
        const auto& f = std::get<FactoredExpert>(e);
        check_role_dims(f.gate.left, f.gate.right, h, d, "gate");
        check_role_dims(f.up.left, f.up.right, h, d, "up");
        check_role_dims(f.down.left, f.down.right, d, h, "down");
      }
    }
  }
}

}  // namespace smoe
