#pragma once

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "cstp/bench.hpp"
#include "cstp/datagen.hpp"
#include "cstp/pipeline.hpp"

namespace cstp {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

/// CSTP_THREADS, default 1. Malformed values are a usage error.
inline std::size_t thread_cap_from_env() {
  const char* raw = std::getenv("CSTP_THREADS");
  if (raw == nullptr || *raw == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(raw, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("CSTP_THREADS must be a positive integer, got '" + std::string(raw) + "'");
  return static_cast<std::size_t>(v);
}

namespace cli {

inline std::string metrics_line(const std::string& label, const Metrics& m) {
  char buf[160];
  if (m.mape_defined()) {
    std::snprintf(buf, sizeof buf, "%s MAE=%.6g RMSE=%.6g MAPE=%.4g%%", label.c_str(), m.mae, m.rmse, m.mape);
  } else {
    std::snprintf(buf, sizeof buf, "%s MAE=%.6g RMSE=%.6g MAPE=n/a", label.c_str(), m.mae, m.rmse);
  }
  std::string line = buf;
  if (m.mape_excluded > 0) line += " (" + std::to_string(m.mape_excluded) + " near-zero targets excluded from MAPE)";
  return line;
}

/// Evaluates one split, or explains why it cannot be evaluated.
inline void report_split(std::ostream& out, const std::string& label, const TrainState& st, const PreparedData& p,
                         const StepRange& range) {
  const auto windows = split_windows(range, st.model.config);
  if (windows.empty()) {
    out << label << " n/a (split of " << range.size() << " steps has no complete window)\n";
    return;
  }
  out << metrics_line(label, evaluate(st, p, windows).metrics) << '\n';
}

inline int cmd_gen(const std::string& config, const std::string& dir, std::ostream& out) {
  const ScmConfig cfg = ScmConfig::from_kv(KvConfig::load(config));
  const MultiModalDataset ds = gen_scm(cfg);
  write_dataset(ds, dir);
  out << "wrote " << dir << ": " << cfg.nodes << " nodes, " << cfg.steps << " steps, " << ds.text.size()
      << " text, " << ds.images.size() << " images\n";
  return kExitOk;
}

inline int cmd_train(const std::string& data, const std::string& config, const std::string& ckpt, std::ostream& out) {
  const KvConfig kv = KvConfig::load(config);
  const ModelConfig mc = ModelConfig::from_kv(kv);
  TrainConfig tc = TrainConfig::from_kv(kv);
  kv.reject_unknown();
  tc.threads = thread_cap_from_env();
  const MultiModalDataset ds = read_dataset(data);
  const TrainResult r = train(ds, mc, tc, [&out](const HistoryRow& row, const TrainState&) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %zu L_pred=%.6g val_L_pred=%.6g lr=%.3g%s", row.epoch, row.l_pred,
                  row.val_l_pred, row.lr, row.graph_refreshed ? " (graph refreshed)" : "");
    out << buf << '\n';
  });
  write_checkpoint(r.state, ckpt);
  const std::string history = ckpt + ".history.csv";
  write_history_csv(r.history, history);
  out << "epochs run " << r.state.epochs_run << ", best epoch " << r.state.best_epoch << '\n';
  const PreparedData p = prepare_data(ds, r.state.model.config, r.state.stats);
  report_split(out, "val", r.state, p, p.splits.val);
  report_split(out, "test", r.state, p, p.splits.test);
  out << "wrote " << ckpt << " and " << history << '\n';
  return kExitOk;
}

inline int cmd_eval(const std::string& data, const std::string& ckpt, std::ostream& out) {
  TrainState st = read_checkpoint(ckpt);
  st.train_config.threads = thread_cap_from_env();
  const MultiModalDataset ds = read_dataset(data);
  const PreparedData p = prepare_data(ds, st.model.config, st.stats);
  if (p.nodes != st.model.nodes || p.channels != st.model.channels) {
    throw DataError("dataset has " + std::to_string(p.nodes) + " nodes x " + std::to_string(p.channels) +
                    " channels but the checkpoint expects " + std::to_string(st.model.nodes) + " x " +
                    std::to_string(st.model.channels));
  }
  report_split(out, "val", st, p, p.splits.val);
  report_split(out, "test", st, p, p.splits.test);
  return kExitOk;
}

inline int cmd_bench(const std::string& plan_path, const std::string& csv, std::ostream& out) {
  const BenchPlan plan = BenchPlan::from_kv(KvConfig::load(plan_path));
  const BenchTable table = run_bench(plan, [&out](const BenchCell& c) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s B=%zu T=%zu N=%zu d=%zu median %.3f ms p90 %.3f ms", encoder_name(c.encoder).c_str(),
                  c.batch, c.steps, c.nodes, c.width, c.median_ms, c.p90_ms);
    out << buf << '\n';
  });
  for (const auto& [enc, slope] : table.slope_t) out << encoder_name(enc) << " log-log slope in T: " << slope << '\n';
  write_bench_csv(table, csv);
  return kExitOk;
}

/// Row-major N x N matrix under a header of node ids; entry (i, j) is the
/// influence of node i on node j.
inline void write_node_matrix_csv(const Tensor& m, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  const std::size_t n = m.dim(0);
  for (std::size_t j = 0; j < n; ++j) f << (j ? "," : "") << j;
  f << '\n';
  char buf[32];
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      std::snprintf(buf, sizeof buf, "%s%.17g", j ? "," : "", m.at(i, j));
      f << buf;
    }
    f << '\n';
  }
}

/// A^SHAP goes to `csv`, the adjacency A stored in the checkpoint to `<csv>.adjacency.csv`.
inline int cmd_attrib(const std::string& data, const std::string& ckpt, const std::string& csv, std::ostream& out) {
  TrainState st = read_checkpoint(ckpt);
  st.train_config.threads = thread_cap_from_env();
  const MultiModalDataset ds = read_dataset(data);
  const PreparedData p = prepare_data(ds, st.model.config, st.stats);
  if (p.nodes != st.model.nodes) throw DataError("dataset node count does not match the checkpoint");
  const auto windows = split_windows(p.splits.train, st.model.config);
  if (windows.empty()) throw DataError("training split has no complete windows to explain");
  const AttributionMatrix a = detail::attribution(st, p, windows, derive_seed(st.train_config.seed, 500));
  const std::string adjacency = csv + ".adjacency.csv";
  write_node_matrix_csv(a.values, csv);
  write_node_matrix_csv(st.graph.current, adjacency);
  out << "wrote " << p.nodes << "x" << p.nodes << " attribution to " << csv << " and the adjacency to " << adjacency
      << '\n';
  return kExitOk;
}

inline int cmd_inspect(const std::string& data, std::ostream& out) {
  const MultiModalDataset ds = read_dataset(data);
  const std::size_t steps = ds.series.steps();
  out << "nodes: " << ds.series.nodes() << '\n' << "steps: " << steps << '\n' << "channels: " << ds.series.channels()
      << '\n';
  out << "text: " << ds.text.size() << '\n' << "images: " << ds.images.size() << '\n';
  out << "image shape: " << ds.image_height << "x" << ds.image_width << "x" << ds.image_channels << '\n';
  out << "confounder trace: " << (ds.has_s_true() ? "yes" : "no") << '\n';
  const ModelConfig defaults;
  const log::ScopedSilence quiet;  // short splits are reported inline below
  const std::size_t span = defaults.in_steps + defaults.out_steps;
  try {
    const Splits sp = chronological_split(steps, span);
    out << "splits (steps): train " << sp.train.size() << ", val " << sp.val.size() << ", test " << sp.test.size()
        << '\n';
    out << "windows (" << defaults.in_steps << " in, " << defaults.out_steps << " out): train "
        << split_windows(sp.train, defaults).size() << ", val " << split_windows(sp.val, defaults).size()
        << ", test " << split_windows(sp.test, defaults).size() << '\n';
  } catch (const DataError& e) {
    out << "splits: n/a (" << e.what() << ")\n";
  }
  return kExitOk;
}

}  // namespace cli

/// Entry point for the cstp tool. Exit 0 on success, 1 on usage or config
/// errors, 2 on data or validation errors.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Confounder-aware multi-modal spatio-temporal prediction"};
  app.require_subcommand(1);
  std::string config, dir, data, ckpt, csv, plan;

  auto* gen = app.add_subcommand("gen", "generate a synthetic confounded dataset");
  gen->add_option("--config", config, "generator config (key = value)")->required();
  gen->add_option("--out", dir, "output dataset directory")->required();

  auto* tr = app.add_subcommand("train", "train a model and write a checkpoint");
  tr->add_option("--data", data, "dataset directory")->required();
  tr->add_option("--config", config, "model and training config (key = value)")->required();
  tr->add_option("--out", ckpt, "checkpoint path; history goes to <path>.history.csv")->required();

  auto* ev = app.add_subcommand("eval", "report validation and test metrics of a checkpoint");
  ev->add_option("--data", data, "dataset directory")->required();
  ev->add_option("--ckpt", ckpt, "checkpoint path")->required();

  auto* be = app.add_subcommand("bench", "time encoder forward passes over a (T, N) sweep");
  be->add_option("--plan", plan, "bench plan (key = value)")->required();
  be->add_option("--out", csv, "output CSV")->required();

  auto* at = app.add_subcommand("attrib", "dump a fresh Shapley attribution matrix and the adjacency");
  at->add_option("--data", data, "dataset directory")->required();
  at->add_option("--ckpt", ckpt, "checkpoint path")->required();
  at->add_option("--out", csv, "attribution CSV; the adjacency goes to <path>.adjacency.csv")->required();

  auto* in = app.add_subcommand("inspect", "print dataset shapes, split sizes and observation counts");
  in->add_option("--data", data, "dataset directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    thread_cap_from_env();
    if (gen->parsed()) return cli::cmd_gen(config, dir, out);
    if (tr->parsed()) return cli::cmd_train(data, config, ckpt, out);
    if (ev->parsed()) return cli::cmd_eval(data, ckpt, out);
    if (be->parsed()) return cli::cmd_bench(plan, csv, out);
    if (at->parsed()) return cli::cmd_attrib(data, ckpt, csv, out);
    if (in->parsed()) return cli::cmd_inspect(data, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::invalid_argument& e) {
    // ShapeError and ValueError: the inputs violate a model or data constraint.
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace cstp
