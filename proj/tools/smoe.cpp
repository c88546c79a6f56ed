// Copyright 2026 the smoe authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line pipeline driver:
//   smoe gen      synthesize a model checkpoint
//   smoe stats    capture activation statistics over a calibration set
//   smoe plan     cluster experts into merge groups
//   smoe merge    merge experts per plan, write checkpoint + report
//   smoe eval     divergence report between two checkpoints
//   smoe inspect  pre/post alignment heatmaps as CSV
//
// Every option can come from --config (TOML or JSON) with flag overrides;
// all randomness is seeded from the flags, so a config file pins a run.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "smoe/calib.hpp"
#include "smoe/checkpoint.hpp"
#include "smoe/cluster.hpp"
#include "smoe/errors.hpp"
#include "smoe/eval.hpp"
#include "smoe/merge.hpp"
#include "smoe/model.hpp"

namespace {

using nlohmann::json;

// Accepts JSON configs alongside the TOML/INI files CLI11 already parses; the
// format is sniffed from the first non-space character. Subcommand options
// live under a section: [gen] in TOML, {"gen": {...}} in JSON.
class ConfigJsonOrToml : public CLI::ConfigBase {
 public:
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    std::istream::int_type c = input.peek();
    while (c != std::istream::traits_type::eof() &&
           std::isspace(static_cast<unsigned char>(c))) {
      input.get();
      c = input.peek();
    }
    if (c != '{') return CLI::ConfigBase::from_config(input);

    std::vector<CLI::ConfigItem> items;
    std::vector<std::string> parents;
    flatten(json::parse(input), parents, items);
    return items;
  }

 private:
  static void flatten(const json& j, std::vector<std::string>& parents,
                      std::vector<CLI::ConfigItem>& items) {
    for (const auto& [key, value] : j.items()) {
      if (value.is_object()) {
        parents.push_back(key);
        flatten(value, parents, items);
        parents.pop_back();
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (value.is_boolean()) {
        item.inputs = {value.get<bool>() ? "true" : "false"};
      } else if (value.is_string()) {
        item.inputs = {value.get<std::string>()};
      } else if (value.is_array()) {
        for (const auto& v : value)
          item.inputs.push_back(v.is_string() ? v.get<std::string>() : v.dump());
      } else {
        item.inputs = {value.dump()};
      }
      items.push_back(std::move(item));
    }
  }
};

smoe::CalibSet resolve_calib(const std::string& spec, std::size_t d_model,
                             std::uint64_t seed) {
  if (spec.rfind("synth:", 0) == 0) {
    const std::size_t m = std::stoull(spec.substr(6));
    return smoe::make_calib_synthetic(m, d_model, seed);
  }
  if (spec.rfind("file:", 0) == 0) {
    smoe::CalibSet calib = smoe::load_calib(spec.substr(5));
    if (calib.tokens.cols != d_model)
      throw smoe::ShapeError("calibration file dimension does not match model");
    return calib;
  }
  throw smoe::ConfigError("calib spec must be synth:<m> or file:<path>");
}

void write_json_atomic(const json& j, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp);
    out << j.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

const std::map<std::string, smoe::Metric> kMetricNames{
    {"output", smoe::Metric::ExpertOutput},
    {"router", smoe::Metric::RouterLogits},
    {"weight", smoe::Metric::Weight}};

const std::map<std::string, smoe::Algo> kAlgoNames{
    {"kmeans", smoe::Algo::KMeans},
    {"hier", smoe::Algo::Hierarchical},
    {"random", smoe::Algo::Random}};

const std::map<std::string, smoe::VMergeMode> kVMergeNames{
    {"frequency", smoe::VMergeMode::Frequency},
    {"average", smoe::VMergeMode::Average},
    {"drop", smoe::VMergeMode::Drop}};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MoE expert-merging toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "",
                 "Config file (TOML or JSON); subcommand options live in a "
                 "[<subcommand>] section");
  app.config_formatter(std::make_shared<ConfigJsonOrToml>());

  // --- gen ---
  auto* gen = app.add_subcommand("gen", "Generate a synthetic model checkpoint");
  smoe::ModelConfig gen_cfg{32, 64, 4, 8, 2, 0};
  smoe::RedundancySpec gen_red{0, 0.0};
  std::string gen_out;
  gen->add_option("--d-model", gen_cfg.d_model, "Token dimension");
  gen->add_option("--d-expert", gen_cfg.d_expert, "Expert inner dimension");
  gen->add_option("--layers", gen_cfg.n_layers, "Number of MoE layers");
  gen->add_option("--experts", gen_cfg.n_experts, "Experts per layer");
  gen->add_option("--top-k", gen_cfg.top_k, "Experts routed per token");
  gen->add_option("--seed", gen_cfg.seed, "Generator seed");
  gen->add_option("--distinct", gen_red.n_distinct,
                  "Distinct base experts per layer (default: all)");
  gen->add_option("--noise", gen_red.noise, "Perturbation amplitude per expert");
  gen->add_option("--out", gen_out, "Output checkpoint path")->required();

  // --- stats ---
  auto* stats = app.add_subcommand("stats", "Capture activation statistics");
  std::string stats_model, stats_calib = "synth:4096", stats_out, stats_dump;
  std::uint64_t stats_seed = 0;
  stats->add_option("--model", stats_model, "Model checkpoint")->required();
  stats->add_option("--calib", stats_calib, "Calibration spec: synth:<m> or file:<path>");
  stats->add_option("--seed", stats_seed, "Seed for synthetic calibration");
  stats->add_option("--dump-calib", stats_dump,
                    "Also write the calibration set used (for file: reuse)");
  stats->add_option("--out", stats_out, "Output trace path")->required();

  // --- plan ---
  auto* plan = app.add_subcommand("plan", "Cluster experts into merge groups");
  std::string plan_model, plan_trace, plan_out, plan_metric = "output",
                                                plan_algo = "kmeans";
  double plan_keep = 1.0;
  std::size_t plan_window = 2;
  std::uint64_t plan_seed = 0;
  plan->add_option("--model", plan_model, "Model checkpoint")->required();
  plan->add_option("--trace", plan_trace, "Activation trace")->required();
  plan->add_option("--keep-ratio", plan_keep, "Fraction of experts to keep")->required();
  plan->add_option("--window", plan_window, "Layers clustered jointly");
  plan->add_option("--metric", plan_metric, "Similarity metric")
      ->check(CLI::IsMember({"output", "router", "weight"}));
  plan->add_option("--algo", plan_algo, "Clustering algorithm")
      ->check(CLI::IsMember({"kmeans", "hier", "random"}));
  plan->add_option("--seed", plan_seed, "Clustering seed");
  plan->add_option("--out", plan_out, "Output plan JSON")->required();

  // --- merge ---
  auto* merge = app.add_subcommand("merge", "Merge experts per plan");
  std::string merge_model, merge_plan, merge_trace, merge_out, merge_report,
      merge_vmode = "frequency";
  smoe::MergeConfig merge_cfg;
  merge->add_option("--model", merge_model, "Model checkpoint")->required();
  merge->add_option("--plan", merge_plan, "Cluster plan JSON")->required();
  merge->add_option("--trace", merge_trace, "Activation trace")->required();
  merge->add_option("--v-merge", merge_vmode, "V block combination rule")
      ->check(CLI::IsMember({"frequency", "average", "drop"}));
  merge->add_option("--rank-ratio", merge_cfg.rank_ratio,
                    "Intra-expert compression ratio in [0,1)");
  merge->add_flag("--whiten", merge_cfg.whiten, "Activation-aware whitening");
  merge->add_flag("--store-factored", merge_cfg.store_factored,
                  "Store truncated experts as low-rank factors");
  merge->add_option("--eps-scale", merge_cfg.eps_scale, "Whitening jitter scale");
  merge->add_option("--out", merge_out, "Output checkpoint path")->required();
  merge->add_option("--report", merge_report, "Merge report JSON path");

  // --- eval ---
  auto* eval = app.add_subcommand("eval", "Output divergence between two checkpoints");
  std::string eval_orig, eval_comp, eval_calib = "synth:4096", eval_out;
  std::uint64_t eval_seed = 0;
  eval->add_option("--orig", eval_orig, "Original checkpoint")->required();
  eval->add_option("--comp", eval_comp, "Compressed checkpoint")->required();
  eval->add_option("--calib", eval_calib, "Calibration spec: synth:<m> or file:<path>");
  eval->add_option("--seed", eval_seed, "Seed for synthetic calibration");
  eval->add_option("--out", eval_out, "Output report JSON")->required();

  // --- inspect ---
  auto* inspect = app.add_subcommand("inspect", "Alignment heatmaps for one layer");
  std::string ins_model, ins_trace, ins_prefix;
  std::size_t ins_layer = 0;
  inspect->add_option("--model", ins_model, "Model checkpoint")->required();
  inspect->add_option("--trace", ins_trace, "Activation trace")->required();
  inspect->add_option("--layer", ins_layer, "Layer index")->required();
  inspect->add_option("--out-prefix", ins_prefix, "Prefix for <prefix>pre.csv / post.csv")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      if (gen_red.n_distinct == 0) gen_red.n_distinct = gen_cfg.n_experts;
      smoe::MoEStack model = smoe::gen_synthetic(gen_cfg, gen_red);
      smoe::save_checkpoint(model, gen_out);
      std::cout << "wrote " << gen_out << " (" << smoe::param_count(model)
                << " parameters)\n";
    } else if (*stats) {
      smoe::MoEStack model = smoe::load_checkpoint(stats_model);
      smoe::CalibSet calib = resolve_calib(stats_calib, model.config.d_model, stats_seed);
      if (!stats_dump.empty()) smoe::save_calib(calib, stats_dump);
      smoe::ActivationTrace trace = smoe::capture(model, calib);
      smoe::save_trace(trace, stats_out);
      std::cout << "wrote " << stats_out << " (" << trace.tokens << " tokens, "
                << trace.layers.size() << " layers)\n";
    } else if (*plan) {
      smoe::MoEStack model = smoe::load_checkpoint(plan_model);
      smoe::ActivationTrace trace = smoe::load_trace(plan_trace);
      smoe::ClusterPlan p =
          smoe::multilayer_plan(model, trace, plan_keep, plan_window,
                                kMetricNames.at(plan_metric), kAlgoNames.at(plan_algo),
                                plan_seed);
      smoe::save_plan(p, plan_out);
      std::size_t total = 0;
      for (const auto& lg : p.groups) total += lg.size();
      std::cout << "wrote " << plan_out << " (" << total << " groups, budget "
                << p.budget_total << ")\n";
    } else if (*merge) {
      merge_cfg.v_merge = kVMergeNames.at(merge_vmode);
      merge_cfg.validate();
      if (merge_cfg.whiten && merge_cfg.rank_ratio == 0.0)
        std::cerr << "note: --whiten has no effect without --rank-ratio > 0\n";
      smoe::MoEStack model = smoe::load_checkpoint(merge_model);
      smoe::ClusterPlan p = smoe::load_plan(merge_plan);
      smoe::ActivationTrace trace = smoe::load_trace(merge_trace);
      auto [compressed, report] = smoe::compress_model(model, p, trace, merge_cfg);
      smoe::save_checkpoint(compressed, merge_out);
      if (!merge_report.empty()) write_json_atomic(smoe::report_to_json(report), merge_report);
      std::cout << "wrote " << merge_out << " (" << report.params_before << " -> "
                << report.params_after << " parameters)\n";
    } else if (*eval) {
      smoe::MoEStack orig = smoe::load_checkpoint(eval_orig);
      smoe::MoEStack comp = smoe::load_checkpoint(eval_comp);
      smoe::CalibSet calib = resolve_calib(eval_calib, orig.config.d_model, eval_seed);
      smoe::DivergenceReport rep = smoe::output_divergence(orig, comp, calib);
      write_json_atomic(smoe::divergence_to_json(rep), eval_out);
      std::cout << "wrote " << eval_out << " (end-to-end rel err "
                << rep.end_to_end_rel_err << ")\n";
    } else if (*inspect) {
      smoe::MoEStack model = smoe::load_checkpoint(ins_model);
      smoe::ActivationTrace trace = smoe::load_trace(ins_trace);
      smoe::AlignmentReport rep = smoe::alignment_heatmaps(model, trace, ins_layer);
      smoe::write_csv(rep.pre, ins_prefix + "pre.csv");
      smoe::write_csv(rep.post, ins_prefix + "post.csv");
      std::cout << "wrote " << ins_prefix << "pre.csv and " << ins_prefix << "post.csv\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
