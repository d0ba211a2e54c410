// Command-line front end: training, evaluation, gate analysis, FLOP
// accounting, and sparse inference over one shared key=value config.
//
// Exit codes: 0 success, 1 runtime fault, 2 config error, 3 artifact
// (checkpoint) mismatch.

#include <Eigen/Core>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dcs/checkpoint.hpp"
#include "dcs/config.hpp"
#include "dcs/eval.hpp"
#include "dcs/model.hpp"
#include "dcs/sparse_infer.hpp"
#include "dcs/trainer.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string data_dir;
  std::string checkpoint;
  std::string out = "out";
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 1;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool checkpoint_required) {
  cmd->add_option("--config", a.config_path, "key=value config file");
  cmd->add_option("--set", a.sets, "override, e.g. --set budget.t_d=0.3")
      ->type_name("KEY=VALUE");
  cmd->add_option("--data-dir", a.data_dir, "directory holding the CIFAR binary files");
  auto* ck = cmd->add_option("--checkpoint", a.checkpoint, "model checkpoint file");
  if (checkpoint_required) ck->required();
  cmd->add_option("--out", a.out, "output directory")->capture_default_str();
  auto* seed_opt =
      cmd->add_option("--seed", a.seed, "master RNG seed (overrides train.seed)");
  cmd->add_option("--threads", a.threads,
                  "internal parallelism bound; 1 is exactly reproducible")
      ->capture_default_str();
  cmd->parse_complete_callback([&a, seed_opt] { a.seed_given = seed_opt->count() > 0; });
}

// Config file -> --set overrides -> --seed, then validated. One resolved
// config drives every subcommand.
dcs::RunConfig resolve_config(const CommonArgs& a) {
  dcs::RunConfig cfg;
  if (!a.config_path.empty()) cfg = dcs::parse_config_file(a.config_path);
  for (const auto& s : a.sets) dcs::apply_override(cfg, s);
  if (a.seed_given) cfg.train.seed = a.seed;
  if (a.threads < 1) throw dcs::ConfigError("--threads must be >= 1");
  cfg.validate();
  Eigen::setNbThreads(a.threads);
  return cfg;
}

// Every subcommand leaves the fully resolved config next to its outputs so
// a run can be reproduced from the artifacts alone.
void echo_config(const dcs::RunConfig& cfg, const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  const auto path = fs::path(out_dir) / "resolved.cfg";
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw dcs::IoError("cannot write '" + path.string() + "'");
  f << dcs::render_config(cfg);
  if (!f.flush()) throw dcs::IoError("failed writing '" + path.string() + "'");
}

dcs::HeadsConfig resolved_heads(const dcs::RunConfig& cfg) {
  dcs::HeadsConfig h = cfg.heads;
  h.d_enc = cfg.backbone.d_enc();
  return h;
}

struct DataBundle {
  std::vector<dcs::LabeledImage> train;
  std::vector<dcs::LabeledImage> val;
  std::string describe;
};

std::vector<dcs::LabeledImage> take(std::vector<dcs::LabeledImage> v, int limit) {
  if (limit > 0 && static_cast<int>(v.size()) > limit)
    v.resize(static_cast<std::size_t>(limit));
  return v;
}

DataBundle load_data(const dcs::RunConfig& cfg, const std::string& data_dir) {
  const auto& d = cfg.data;
  DataBundle out;
  if (d.source == "synthetic") {
    const std::uint64_t s_tr = dcs::derive_rng(cfg.train.seed, {0xDA7A, 1}).next_u64();
    const std::uint64_t s_va = dcs::derive_rng(cfg.train.seed, {0xDA7A, 2}).next_u64();
    out.train = take(dcs::make_synthetic(d.synthetic_classes, d.synthetic_per_class,
                                         cfg.backbone.side, s_tr),
                     d.train_limit);
    const int per_val = d.val_limit > 0
                            ? (d.val_limit + d.synthetic_classes - 1) / d.synthetic_classes
                            : d.synthetic_per_class;
    out.val = take(dcs::make_synthetic(d.synthetic_classes, per_val, cfg.backbone.side, s_va),
                   d.val_limit);
    out.describe = "synthetic";
  } else {
    if (data_dir.empty())
      throw dcs::ConfigError("data.source '" + d.source +
                             "' needs --data-dir pointing at the CIFAR binaries");
    if (!fs::exists(data_dir))
      throw dcs::ConfigError("--data-dir '" + data_dir + "' does not exist");
    if (cfg.backbone.side != 32)
      throw dcs::ConfigError("backbone.side must be 32 for data.source '" + d.source + "'");
    const auto variant = d.source == "cifar10" ? dcs::CifarVariant::Cifar10
                                               : dcs::CifarVariant::Cifar100;
    out.train = take(dcs::load_cifar(data_dir, variant, dcs::Split::Train), d.train_limit);
    out.val = take(dcs::load_cifar(data_dir, variant, dcs::Split::Val), d.val_limit);
    out.describe = d.source + " from " + data_dir;
  }
  return out;
}

// Checkpoint-consuming subcommands insist the resolved architecture matches
// the stored one exactly; drift is an artifact mismatch, not a silent rebuild.
dcs::Model<float> model_from_checkpoint(const std::string& path, const dcs::RunConfig& cfg) {
  auto ck = dcs::load_checkpoint(path);
  dcs::check_config_meta(ck, cfg.backbone, resolved_heads(cfg));
  auto m = dcs::make_model<float>(cfg.backbone, resolved_heads(cfg), 0);
  dcs::load_model(ck, m);
  return m;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw dcs::IoError("cannot write '" + path.string() + "'");
  f << text;
  if (!f.flush()) throw dcs::IoError("failed writing '" + path.string() + "'");
}

// Shared post-run reporting: channel usage, measured budget, and 1-NN
// accuracy over the val split, persisted via emit_reports.
double report_suite(dcs::Model<float>& m, const DataBundle& data, const dcs::RunConfig& cfg,
                    const std::string& out_dir, dcs::BudgetReport& budget_out) {
  auto usage = dcs::channel_usage(m.backbone, data.val, cfg.eval.batch_size);
  budget_out = dcs::measure_budget(m.backbone, data.val, cfg.eval.batch_size);
  auto e_train = dcs::extract_embeddings(m.backbone, data.train, cfg.eval.batch_size);
  auto e_val = dcs::extract_embeddings(m.backbone, data.val, cfg.eval.batch_size);
  const double knn = dcs::knn_accuracy(e_train, e_val);
  dcs::emit_reports(out_dir, usage, budget_out, knn);
  return knn;
}

int cmd_train(const CommonArgs& a) {
  auto cfg = resolve_config(a);
  echo_config(cfg, a.out);
  auto data = load_data(cfg, a.data_dir);
  std::cout << "data: " << data.describe << " (" << data.train.size() << " train / "
            << data.val.size() << " val)\n";

  dcs::TrainConfig tc = cfg.train;
  tc.checkpoint_path = (fs::path(a.out) / "model.ckpt").string();
  tc.metrics_path = (fs::path(a.out) / "metrics.csv").string();

  auto m = dcs::make_model<float>(cfg.backbone, resolved_heads(cfg), tc.seed);
  dcs::SgdState<float> opt;
  const auto steps = static_cast<std::int64_t>(data.train.size()) / tc.batch_size;
  std::cout << "training " << tc.epochs << " epochs x " << steps
            << " steps (metrics: " << tc.metrics_path << ")\n"
            << std::flush;
  auto res = dcs::fit(data.train, m, opt, tc, cfg.augment);
  const auto& last = res.history.back();
  std::printf("trained: loss_ssl=%.4f loss_gate=%.4f train_flop_ratio=%.4f\n",
              last.loss_ssl, last.loss_gate, last.flop_ratio);

  dcs::BudgetReport budget;
  const double knn = report_suite(m, data, cfg, a.out, budget);
  std::printf("knn@1=%.4f flop_ratio=%.4f\n", knn, budget.mean_ratio);
  return 0;
}

int cmd_eval_knn(const CommonArgs& a) {
  auto cfg = resolve_config(a);
  echo_config(cfg, a.out);
  auto data = load_data(cfg, a.data_dir);
  auto m = model_from_checkpoint(a.checkpoint, cfg);
  dcs::BudgetReport budget;
  const double knn = report_suite(m, data, cfg, a.out, budget);
  std::printf("knn@1=%.4f flop_ratio=%.4f\n", knn, budget.mean_ratio);
  return 0;
}

int cmd_analyze_gates(const CommonArgs& a) {
  auto cfg = resolve_config(a);
  echo_config(cfg, a.out);
  auto data = load_data(cfg, a.data_dir);
  auto m = model_from_checkpoint(a.checkpoint, cfg);

  auto usage = dcs::channel_usage(m.backbone, data.val, cfg.eval.batch_size);
  auto budget = dcs::measure_budget(m.backbone, data.val, cfg.eval.batch_size);
  std::printf("%-8s %9s %11s %10s %7s %11s %12s\n", "block", "channels", "always_off",
              "always_on", "mixed", "flop_ratio", "active_mean");
  for (std::size_t l = 0; l < usage.on_counts.size(); ++l) {
    int off = 0, on = 0, mixed = 0;
    for (const auto cnt : usage.on_counts[l]) {
      switch (dcs::categorize(cnt, usage.samples)) {
        case dcs::UsageCategory::AlwaysOff: ++off; break;
        case dcs::UsageCategory::AlwaysOn: ++on; break;
        case dcs::UsageCategory::Mixed: ++mixed; break;
      }
    }
    std::printf("block%-3zu %9zu %11d %10d %7d %11.4f %12.2f\n", l,
                usage.on_counts[l].size(), off, on, mixed, budget.block_ratio[l],
                budget.block_active_mean[l]);
  }

  auto e_train = dcs::extract_embeddings(m.backbone, data.train, cfg.eval.batch_size);
  auto e_val = dcs::extract_embeddings(m.backbone, data.val, cfg.eval.batch_size);
  const double knn = dcs::knn_accuracy(e_train, e_val);
  dcs::emit_reports(a.out, usage, budget, knn);
  std::printf("knn@1=%.4f flop_ratio=%.4f\n", knn, budget.mean_ratio);
  return 0;
}

int cmd_count_flops(const CommonArgs& a) {
  auto cfg = resolve_config(a);
  echo_config(cfg, a.out);
  const auto geoms = dcs::block_geometries(cfg.backbone);

  nlohmann::ordered_json j;
  j["blocks"] = nlohmann::ordered_json::array();
  std::int64_t dense_total = 0, overhead_total = 0;
  std::printf("%-8s %5s %6s %12s %15s %12s\n", "block", "c_in", "c_out", "dense_macs",
              "gate_overhead", "all_on_macs");
  for (std::size_t l = 0; l < geoms.size(); ++l) {
    const auto& g = geoms[l];
    const std::int64_t dense = dcs::dense_flops(g);
    const std::int64_t overhead = dcs::gate_overhead(g);
    const std::int64_t all_on = dcs::hard_dynamic_flops(g, g.c_out);
    dense_total += dense;
    overhead_total += overhead;
    std::printf("block%-3zu %5d %6d %12lld %15lld %12lld\n", l, g.c_in, g.c_out,
                static_cast<long long>(dense), static_cast<long long>(overhead),
                static_cast<long long>(all_on));
    nlohmann::ordered_json b;
    b["name"] = "block" + std::to_string(l);
    b["c_in"] = g.c_in;
    b["c_out"] = g.c_out;
    b["dense_macs"] = dense;
    b["gate_overhead_macs"] = overhead;
    b["all_on_macs"] = all_on;
    j["blocks"].push_back(std::move(b));
  }
  const double all_on_ratio =
      static_cast<double>(dense_total + overhead_total) / static_cast<double>(dense_total);
  j["total"] = {{"dense_macs", dense_total},
                {"gate_overhead_macs", overhead_total},
                {"all_on_macs", dense_total + overhead_total},
                {"all_on_ratio", all_on_ratio}};
  write_text(fs::path(a.out) / "flops.json", j.dump(2) + "\n");
  std::printf("total_dense_macs=%lld all_on_ratio=%.4f\n",
              static_cast<long long>(dense_total), all_on_ratio);
  return 0;
}

int cmd_infer(const CommonArgs& a) {
  auto cfg = resolve_config(a);
  echo_config(cfg, a.out);
  auto data = load_data(cfg, a.data_dir);
  auto m = model_from_checkpoint(a.checkpoint, cfg);
  const auto rep = dcs::measure_budget(m.backbone, data.val, cfg.eval.batch_size);

  nlohmann::ordered_json j;
  j["samples"] = rep.samples;
  j["dense_macs"] = rep.dense_macs;
  j["mean_macs"] = rep.mean_macs;
  j["mean_ratio"] = rep.mean_ratio;
  j["blocks"] = nlohmann::ordered_json::array();
  for (std::size_t l = 0; l < rep.block_ratio.size(); ++l)
    j["blocks"].push_back({{"name", "block" + std::to_string(l)},
                           {"flop_ratio", rep.block_ratio[l]},
                           {"active_mean", rep.block_active_mean[l]}});
  j["ratio_histogram"] = rep.histogram;
  write_text(fs::path(a.out) / "stats.json", j.dump(2) + "\n");
  std::printf("samples=%lld mean_macs=%.1f mean_ratio=%.4f\n",
              static_cast<long long>(rep.samples), rep.mean_macs, rep.mean_ratio);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gated-convnet SimSiam workbench: train, evaluate, analyze, count"};
  app.require_subcommand(1);

  CommonArgs a_train, a_eval, a_gates, a_flops, a_infer;
  auto* c_train = app.add_subcommand("train", "train a model and write its artifacts");
  add_common(c_train, a_train, false);
  auto* c_eval = app.add_subcommand("eval-knn", "1-NN accuracy and measured FLOP budget");
  add_common(c_eval, a_eval, true);
  auto* c_gates =
      app.add_subcommand("analyze-gates", "per-block channel usage breakdown");
  add_common(c_gates, a_gates, true);
  auto* c_flops = app.add_subcommand("count-flops", "static per-block MAC ledger");
  add_common(c_flops, a_flops, false);
  auto* c_infer = app.add_subcommand("infer", "sparse inference statistics over a split");
  add_common(c_infer, a_infer, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // bad usage is a config error; --help is not
  }

  try {
    if (c_train->parsed()) return cmd_train(a_train);
    if (c_eval->parsed()) return cmd_eval_knn(a_eval);
    if (c_gates->parsed()) return cmd_analyze_gates(a_gates);
    if (c_flops->parsed()) return cmd_count_flops(a_flops);
    if (c_infer->parsed()) return cmd_infer(a_infer);
  } catch (const dcs::CheckpointMismatch& e) {
    std::cerr << "checkpoint mismatch: " << e.what() << "\n";
    return 3;
  } catch (const dcs::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;  // no subcommand parsed
}
