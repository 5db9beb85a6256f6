#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cstp/datagen.hpp"
#include "cstp/kv_config.hpp"
#include "cstp/model.hpp"
#include "cstp/sted.hpp"

namespace cstp {

inline std::string encoder_name(TemporalEncoder e) {
  return e == TemporalEncoder::kMamba ? "sted-mamba" : "sted-attention";
}

struct BenchPlan {
  std::vector<TemporalEncoder> encoders{TemporalEncoder::kMamba, TemporalEncoder::kAttention};
  std::vector<std::size_t> steps{64, 128, 256, 512};
  std::vector<std::size_t> nodes{16, 32, 64};
  std::size_t runs = 5;
  std::size_t warmup = 2;
  std::size_t batch = 4;
  std::size_t width = 32;
  std::size_t layers = 1;
  std::size_t state = 16;
  std::size_t conv = 4;
  std::uint64_t seed = 7;

  void validate() const {
    if (runs < 3) throw ConfigError("bench: runs must be >= 3 so a median exists, got " + std::to_string(runs));
    if (encoders.empty() || steps.empty() || nodes.empty()) throw ConfigError("bench: empty sweep");
    if (batch == 0 || width == 0 || layers == 0 || state == 0 || conv == 0) {
      throw ConfigError("bench: batch, width, layers, state and conv must be positive");
    }
  }

  static BenchPlan from_kv(const KvConfig& kv) {
    BenchPlan p;
    if (kv.has("encoders")) {
      p.encoders.clear();
      for (const auto& e : kv.get_list("encoders")) p.encoders.push_back(parse_temporal(e));
    }
    p.steps = kv.get_size_list("steps", p.steps);
    p.nodes = kv.get_size_list("nodes", p.nodes);
    p.runs = kv.get_size("runs", p.runs);
    p.warmup = kv.get_size("warmup", p.warmup);
    p.batch = kv.get_size("batch", p.batch);
    p.width = kv.get_size("width", p.width);
    p.layers = kv.get_size("layers", p.layers);
    p.state = kv.get_size("state", p.state);
    p.conv = kv.get_size("conv", p.conv);
    p.seed = static_cast<std::uint64_t>(kv.get_size("seed", p.seed));
    kv.reject_unknown();
    p.validate();
    return p;
  }
};

struct BenchCell {
  TemporalEncoder encoder = TemporalEncoder::kMamba;
  std::size_t batch = 0, steps = 0, nodes = 0, width = 0;
  double median_ms = 0.0;
  double p90_ms = 0.0;
  std::size_t runs = 0;
};

struct BenchTable {
  std::vector<BenchCell> cells;
  std::map<TemporalEncoder, double> slope_t;

  const BenchCell& find(TemporalEncoder e, std::size_t steps, std::size_t nodes) const {
    for (const auto& c : cells) {
      if (c.encoder == e && c.steps == steps && c.nodes == nodes) return c;
    }
    throw ValueError("bench: no cell for " + encoder_name(e) + " T=" + std::to_string(steps) +
                     " N=" + std::to_string(nodes));
  }
};

/// Random [B, T, N, d] input for one cell; depends only on the plan seed and the cell extents.
inline Tensor bench_input(const BenchPlan& plan, std::size_t steps, std::size_t nodes) {
  Rng rng(derive_seed(plan.seed, steps * 1009 + nodes));
  Tensor x({plan.batch, steps, nodes, plan.width});
  for (double& v : x.data()) v = rng.normal();
  return x;
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw ValueError("median of empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Nearest-rank percentile, q in (0, 1].
inline double percentile_of(std::vector<double> v, double q) {
  if (v.empty()) throw ValueError("percentile of empty sample");
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

/// Least-squares slope of log(y) on log(x) with a separate intercept per group.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y,
                           const std::vector<std::size_t>& group) {
  if (x.size() != y.size() || x.size() != group.size() || x.empty()) {
    throw ValueError("loglog_slope: mismatched or empty inputs");
  }
  std::map<std::size_t, std::pair<double, double>> sums;
  std::map<std::size_t, std::size_t> counts;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sums[group[i]].first += std::log(x[i]);
    sums[group[i]].second += std::log(y[i]);
    ++counts[group[i]];
  }
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(counts[group[i]]);
    const double dx = std::log(x[i]) - sums[group[i]].first / n;
    const double dy = std::log(y[i]) - sums[group[i]].second / n;
    sxy += dx * dy;
    sxx += dx * dx;
  }
  if (sxx == 0.0) throw ValueError("loglog_slope: need at least two distinct x per group");
  return sxy / sxx;
}

/// Times forward passes of the STED encoder stack (no decoder, no tape) for
/// every (encoder, T, N) cell, strictly sequentially.
inline BenchTable run_bench(const BenchPlan& plan, const std::function<void(const BenchCell&)>& on_cell = {}) {
  plan.validate();
  ad::NoGradGuard no_grad;
  BenchTable table;
  for (TemporalEncoder enc : plan.encoders) {
    std::vector<double> xs, ys;
    std::vector<std::size_t> groups;
    for (std::size_t nodes : plan.nodes) {
      const Tensor a_hat = normalized_adjacency(gen_graph(nodes, GraphKind::kGrid, 0.0, plan.seed).adjacency);
      StedConfig cfg;
      cfg.layers = plan.layers;
      cfg.width = plan.width;
      cfg.state = plan.state;
      cfg.conv = plan.conv;
      cfg.temporal = enc;
      ad::ParamStore store;
      Rng rng(derive_seed(plan.seed, 400));
      std::vector<StedLayer> layers;
      for (std::size_t l = 0; l < plan.layers; ++l) {
        layers.push_back(StedLayer::create(store, "bench.layer" + std::to_string(l), cfg, rng));
      }
      for (std::size_t steps : plan.steps) {
        const ad::Var x = ad::constant(bench_input(plan, steps, nodes));
        std::vector<double> times;
        for (std::size_t r = 0; r < plan.warmup + plan.runs; ++r) {
          const auto t0 = std::chrono::steady_clock::now();
          const ad::Var out = sted_forward(x, a_hat, layers);
          const auto t1 = std::chrono::steady_clock::now();
          if (!out.value().all_finite()) throw ValueError("bench: non-finite encoder output");
          if (r >= plan.warmup) times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        BenchCell cell{enc, plan.batch, steps, nodes, plan.width, median_of(times), percentile_of(times, 0.9),
                       plan.runs};
        if (on_cell) on_cell(cell);
        table.cells.push_back(cell);
        xs.push_back(static_cast<double>(steps));
        ys.push_back(cell.median_ms);
        groups.push_back(nodes);
      }
    }
    table.slope_t[enc] = plan.steps.size() > 1 ? loglog_slope(xs, ys, groups) : std::nan("");
  }
  return table;
}

inline const char* kBenchCsvHeader = "encoder,B,T,N,d,median_ms,p90_ms,runs";

/// One row per cell; slopes are reported separately.
inline std::string bench_csv(const BenchTable& table) {
  std::ostringstream out;
  out << kBenchCsvHeader << '\n';
  char buf[64];
  for (const auto& c : table.cells) {
    out << encoder_name(c.encoder) << ',' << c.batch << ',' << c.steps << ',' << c.nodes << ',' << c.width;
    std::snprintf(buf, sizeof buf, ",%.4f,%.4f,", c.median_ms, c.p90_ms);
    out << buf << c.runs << '\n';
  }
  return out.str();
}

inline void write_bench_csv(const BenchTable& table, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << bench_csv(table);
}

}  // namespace cstp
