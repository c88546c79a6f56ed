// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0

#include "smoe/calib.hpp"

#include <algorithm>

#include "smoe/checkpoint.hpp"
#include "smoe/errors.hpp"
#include "smoe/kernels.hpp"
#include "smoe/linalg.hpp"
#include "smoe/rng.hpp"

namespace smoe {

CalibSet make_calib_synthetic(std::size_t m, std::size_t d_model, std::uint64_t seed) {
  if (m == 0 || d_model == 0) throw ConfigError("make_calib_synthetic: m and d_model must be >= 1");
  CalibSet calib;
  calib.tokens = Matrix(m, d_model);
  Rng rng(mix_seed(seed, 0x43414c49 /* 'CALI' */));
  // Tokens sit on the f32 grid that files store, so a set that went through
  // disk and a freshly drawn one drive bit-identical pipelines.
  for (double& v : calib.tokens.data) v = static_cast<float>(rng.normal());
  calib.source = "synth:" + std::to_string(seed);
  return calib;
}

void save_calib(const CalibSet& calib, const std::filesystem::path& path) {
  Container c;
  c.tensors.push_back(to_tensor("calib", calib.tokens));
  write_container(path, c);
}

CalibSet load_calib(const std::filesystem::path& path) {
  Container c = read_container(path);
  CalibSet calib;
  calib.tokens = to_matrix(c.require("calib"));
  calib.source = "file:" + path.string();
  return calib;
}

ActivationTrace capture(const MoEStack& model, const CalibSet& calib) {
  if (calib.tokens.cols != model.config.d_model)
    throw ShapeError("capture: calibration dimension does not match d_model");
  const std::size_t m = calib.tokens.rows;
  const std::size_t d = model.config.d_model;

  ActivationTrace trace;
  trace.tokens = m;
  trace.top_k = model.config.top_k;
  trace.layers.resize(model.layers.size());

  // One residual stream per token, advanced layer by layer.
  Matrix state = calib.tokens;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const MoELayer& layer = model.layers[l];
    LayerTrace& lt = trace.layers[l];
    lt.inputs = state;
    lt.router_logits = Matrix(m, layer.router.rows);
    lt.expert_outputs.assign(layer.experts.size(), Matrix(m, d));

    for (std::size_t t = 0; t < m; ++t) {
      const std::span<const double> x{state.row(t), d};
      for (std::size_t slot = 0; slot < layer.experts.size(); ++slot) {
        std::vector<double> y = expert_forward(layer.experts[slot], x);
        std::copy(y.begin(), y.end(), lt.expert_outputs[slot].row(t));
      }
      RouteResult r = layer_forward(layer, x, model.config.top_k);
      matvec(layer.router, x, {lt.router_logits.row(t), layer.router.rows});
      lt.topk.push_back(r.selected);
      kernels::axpy(1.0, r.y.data(), state.row(t), d);
    }
  }
  return trace;
}

void save_trace(const ActivationTrace& trace, const std::filesystem::path& path) {
  Container c;
  c.meta["tokens"] = trace.tokens;
  c.meta["top_k"] = trace.top_k;
  c.meta["layers"] = trace.layers.size();
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const LayerTrace& lt = trace.layers[l];
    const std::string pre = "layer." + std::to_string(l) + ".";
    c.tensors.push_back(to_tensor(pre + "input", lt.inputs));
    c.tensors.push_back(to_tensor(pre + "router_logits", lt.router_logits));
    Matrix topk(trace.tokens, trace.top_k);
    for (std::size_t t = 0; t < lt.topk.size(); ++t)
      for (std::size_t j = 0; j < trace.top_k; ++j)
        topk.at(t, j) = static_cast<double>(lt.topk[t][j]);
    c.tensors.push_back(to_tensor(pre + "topk", topk));
    for (std::size_t i = 0; i < lt.expert_outputs.size(); ++i) {
      c.tensors.push_back(to_tensor(pre + "expert." + std::to_string(i) + ".output",
                                    lt.expert_outputs[i]));
    }
  }
  write_container(path, c);
}

ActivationTrace load_trace(const std::filesystem::path& path) {
  Container c = read_container(path);
  ActivationTrace trace;
  try {
    trace.tokens = c.meta.at("tokens").get<std::size_t>();
    trace.top_k = c.meta.at("top_k").get<std::size_t>();
    trace.layers.resize(c.meta.at("layers").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(LoadErrc::BadHeader, std::string("malformed trace meta: ") + e.what());
  }
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    LayerTrace& lt = trace.layers[l];
    const std::string pre = "layer." + std::to_string(l) + ".";
    lt.inputs = to_matrix(c.require(pre + "input"));
    lt.router_logits = to_matrix(c.require(pre + "router_logits"));
    Matrix topk = to_matrix(c.require(pre + "topk"));
    lt.topk.resize(topk.rows);
    for (std::size_t t = 0; t < topk.rows; ++t) {
      lt.topk[t].resize(topk.cols);
      for (std::size_t j = 0; j < topk.cols; ++j)
        lt.topk[t][j] = static_cast<std::size_t>(topk.at(t, j));
    }
    for (std::size_t i = 0;; ++i) {
      const TensorEntry* t = c.find(pre + "expert." + std::to_string(i) + ".output");
      if (!t) break;
      lt.expert_outputs.push_back(to_matrix(*t));
    }
    if (lt.expert_outputs.empty())
      throw LoadError(LoadErrc::BadHeader, "trace layer has no expert outputs");
  }
  return trace;
}

double FrequencyTable::freq(std::size_t layer, std::size_t i) const {
  return static_cast<double>(counts[layer][i]) / static_cast<double>(tokens);
}

std::vector<double> FrequencyTable::layer_freqs(std::size_t layer) const {
  std::vector<double> f(counts[layer].size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = freq(layer, i);
  return f;
}

FrequencyTable expert_frequencies(const ActivationTrace& trace) {
  FrequencyTable table;
  table.tokens = trace.tokens;
  table.top_k = trace.top_k;
  table.counts.resize(trace.layers.size());
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const LayerTrace& lt = trace.layers[l];
    table.counts[l].assign(lt.router_logits.cols, 0);
    for (const auto& sel : lt.topk)
      for (std::size_t i : sel) table.counts[l][i] += 1;
  }
  return table;
}

Matrix whitening_matrix(const Matrix& rows, double eps_scale, double* eps_used) {
  if (!rows.all_finite()) throw NumericError("whitening_matrix: non-finite input");
  if (rows.rows == 0) throw ShapeError("whitening_matrix: needs at least one sample");
  Matrix g = gram_from_rows(rows);
  double tr = 0.0;
  for (std::size_t i = 0; i < g.rows; ++i) tr += g.at(i, i);
  const double eps = tr > 0.0 ? eps_scale * tr / static_cast<double>(g.rows) : eps_scale;
  for (std::size_t i = 0; i < g.rows; ++i) g.at(i, i) += eps;
  if (eps_used) *eps_used = eps;
  return cholesky_lower(g);
}

namespace {

Matrix gather_rows(const Matrix& src, const std::vector<std::size_t>& which) {
  Matrix out(which.size(), src.cols);
  for (std::size_t r = 0; r < which.size(); ++r)
    std::copy(src.row(which[r]), src.row(which[r]) + src.cols, out.row(r));
  return out;
}

}  // namespace

WhitenCache build_whiten_cache(const MoEStack& model, const ActivationTrace& trace,
                               double eps_scale) {
  if (trace.layers.size() != model.layers.size())
    throw ShapeError("build_whiten_cache: trace does not match model");
  WhitenCache cache;
  cache.eps_scale = eps_scale;
  cache.s.resize(model.layers.size());
  cache.eps_used.resize(model.layers.size());

  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const MoELayer& layer = model.layers[l];
    const LayerTrace& lt = trace.layers[l];
    const std::size_t n = layer.router.rows;
    cache.s[l].resize(n);
    cache.eps_used[l].resize(n);

    // Token sets routed to each original expert.
    std::vector<std::vector<std::size_t>> routed(n);
    for (std::size_t t = 0; t < lt.topk.size(); ++t)
      for (std::size_t i : lt.topk[t]) routed[i].push_back(t);
    std::vector<std::size_t> all_tokens(lt.topk.size());
    for (std::size_t t = 0; t < all_tokens.size(); ++t) all_tokens[t] = t;

    for (std::size_t i = 0; i < n; ++i) {
      const std::vector<std::size_t>& toks = routed[i].empty() ? all_tokens : routed[i];
      const std::size_t slot = layer.expert_map[i];
      const Expert& expert = layer.experts[slot];

      Matrix x_in = gather_rows(lt.inputs, toks);
      Matrix s_in = whitening_matrix(x_in, eps_scale, &cache.eps_used[l][i][0]);
      cache.eps_used[l][i][1] = cache.eps_used[l][i][0];
      cache.s[l][i][static_cast<std::size_t>(Role::Gate)] = s_in;
      cache.s[l][i][static_cast<std::size_t>(Role::Up)] = std::move(s_in);

      Matrix hidden(toks.size(), model.config.d_expert);
      for (std::size_t r = 0; r < toks.size(); ++r) {
        std::vector<double> h =
            expert_hidden(expert, {lt.inputs.row(toks[r]), lt.inputs.cols});
        std::copy(h.begin(), h.end(), hidden.row(r));
      }
      cache.s[l][i][static_cast<std::size_t>(Role::Down)] =
          whitening_matrix(hidden, eps_scale, &cache.eps_used[l][i][2]);
    }
  }
  return cache;
}

}  // namespace smoe
