#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "cstp/datagen.hpp"
#include "cstp/log.hpp"
#include "cstp/model.hpp"

namespace cstp {

/// Raised when the training loss stops being finite.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Splits and windows

struct StepRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

struct Splits {
  StepRange train, val, test;
};

inline constexpr std::size_t kMinSplitSlack = 30;

/// 80/10/10 by time index: val and test get floor(len / 10), train the rest.
inline Splits chronological_split(std::size_t length, std::size_t window_span) {
  if (length < kMinSplitSlack + window_span) {
    throw DataError("series has " + std::to_string(length) + " steps; at least " +
                    std::to_string(kMinSplitSlack + window_span) + " are needed for a " +
                    std::to_string(window_span) + "-step window");
  }
  const std::size_t tenth = length / 10, train = length - 2 * tenth;
  return {{0, train}, {train, train + tenth}, {train + tenth, length}};
}

struct WindowedSample {
  std::size_t start = 0;  // absolute index of the first input step
  std::size_t in_steps = 0;
  std::size_t out_steps = 0;
  std::size_t target_start() const { return start + in_steps; }
};

/// Sliding windows lying entirely inside `range`. A range shorter than
/// in_steps + out_steps yields no windows and a warning.
inline std::vector<WindowedSample> make_windows(StepRange range, std::size_t in_steps, std::size_t out_steps,
                                                std::size_t stride = 1) {
  if (stride == 0) throw ValueError("make_windows: stride must be positive");
  const std::size_t span = in_steps + out_steps;
  std::vector<WindowedSample> out;
  if (range.size() < span) {
    log::warn("split of " + std::to_string(range.size()) + " steps is shorter than the " + std::to_string(span) +
              "-step window; no samples");
    return out;
  }
  for (std::size_t s = range.begin; s + span <= range.end; s += stride) out.push_back({s, in_steps, out_steps});
  return out;
}

// ---------------------------------------------------------------------------
// Prepared data

/// Dataset in model-ready form: normalized series and per-slot aligned
/// observation summaries.
struct PreparedData {
  std::size_t nodes = 0;
  std::size_t channels = 0;
  std::size_t buckets = 0;
  Tensor raw;                       // [T, N, c]
  Tensor normalized;                // [T, N, c]
  NormStats stats;
  Tensor text_counts;               // [T, buckets]
  std::vector<double> text_obs;     // [T]
  std::vector<std::vector<std::size_t>> images_at;  // slot -> image ids
  std::vector<std::size_t> image_node;
  const MultiModalDataset* dataset = nullptr;
  Splits splits;

  std::size_t steps() const { return raw.dim(0); }
};

inline PreparedData prepare_data(const MultiModalDataset& ds, const ModelConfig& cfg,
                                 const std::optional<NormStats>& stats = std::nullopt) {
  ds.validate();
  PreparedData p;
  p.dataset = &ds;
  p.nodes = ds.series.nodes();
  p.channels = ds.series.channels();
  p.buckets = cfg.text_buckets;
  p.raw = ds.series.values;
  p.splits = chronological_split(ds.series.steps(), cfg.in_steps + cfg.out_steps);
  p.stats = stats ? *stats : compute_norm_stats(p.raw, p.splits.train.begin, p.splits.train.end);
  if (p.stats.mean.shape() != Shape{p.nodes, p.channels}) {
    throw DataError("normalization statistics " + to_string(p.stats.mean.shape()) + " do not match the dataset's " +
                    std::to_string(p.nodes) + " nodes x " + std::to_string(p.channels) + " channels");
  }
  p.normalized = normalize_st(p.raw, p.stats);

  const std::size_t steps = ds.series.steps();
  p.text_counts = Tensor({steps, p.buckets});
  p.text_obs.assign(steps, 0.0);
  {
    std::vector<double> times;
    for (const auto& o : ds.text) times.push_back(o.timestamp);
    const OneHotRows mt = build_temporal_alignment(times, ds.series.timestamps);
    for (std::size_t i = 0; i < ds.text.size(); ++i) {
      const auto counts = bag_of_tokens(ds.text[i].tokens, p.buckets);
      for (std::size_t k = 0; k < p.buckets; ++k) p.text_counts.at(mt.cols[i], k) += counts[k];
      p.text_obs[mt.cols[i]] += 1.0;
    }
  }
  p.images_at.assign(steps, {});
  {
    std::vector<double> times;
    std::vector<Point> coords;
    for (const auto& img : ds.images) {
      times.push_back(img.timestamp);
      coords.push_back(img.coords);
    }
    const OneHotRows mt = build_temporal_alignment(times, ds.series.timestamps);
    const OneHotRows ms = build_spatial_alignment(coords, ds.series.node_coords);
    p.image_node = ms.cols;
    for (std::size_t i = 0; i < ds.images.size(); ++i) p.images_at[mt.cols[i]].push_back(i);
  }
  return p;
}

struct Batch {
  ModelInputs inputs;
  Tensor target;      // [B, S, N, c], normalized
  Tensor target_raw;  // [B, S, N, c], original units
};

inline Batch make_batch(const PreparedData& p, const std::vector<WindowedSample>& windows, std::size_t first,
                        std::size_t count, bool with_modalities) {
  if (count == 0 || first + count > windows.size()) throw ValueError("make_batch: empty or out-of-range batch");
  const std::size_t t_in = windows[first].in_steps, s_out = windows[first].out_steps;
  const std::size_t n = p.nodes, c = p.channels, slab = n * c;
  Batch b;
  b.inputs.x = Tensor({count, t_in, n, c});
  b.target = Tensor({count, s_out, n, c});
  b.target_raw = Tensor({count, s_out, n, c});
  for (std::size_t k = 0; k < count; ++k) {
    const WindowedSample& w = windows[first + k];
    std::copy_n(p.normalized.raw() + w.start * slab, t_in * slab, b.inputs.x.raw() + k * t_in * slab);
    std::copy_n(p.normalized.raw() + w.target_start() * slab, s_out * slab, b.target.raw() + k * s_out * slab);
    std::copy_n(p.raw.raw() + w.target_start() * slab, s_out * slab, b.target_raw.raw() + k * s_out * slab);
  }
  if (!with_modalities) return b;

  b.inputs.text_counts = Tensor({count, t_in, p.buckets});
  b.inputs.text_obs = Tensor({count, t_in, 1});
  b.inputs.image_obs = Tensor({count * t_in * n, 1});
  std::vector<std::size_t> image_ids;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t start = windows[first + k].start;
    std::copy_n(p.text_counts.raw() + start * p.buckets, t_in * p.buckets,
                b.inputs.text_counts.raw() + k * t_in * p.buckets);
    for (std::size_t t = 0; t < t_in; ++t) {
      b.inputs.text_obs.at(k, t, 0) = p.text_obs[start + t];
      for (std::size_t id : p.images_at[start + t]) {
        const std::size_t cell = (k * t_in + t) * n + p.image_node[id];
        b.inputs.image_cells.push_back(static_cast<long>(cell));
        b.inputs.image_obs[cell] += 1.0;
        image_ids.push_back(id);
      }
    }
  }
  const auto& ds = *p.dataset;
  const Shape px{ds.image_height, ds.image_width, ds.image_channels};
  const std::size_t px_size = numel(px);
  b.inputs.image_pixels = Tensor({image_ids.size(), px[0], px[1], px[2]});
  for (std::size_t i = 0; i < image_ids.size(); ++i) {
    std::copy_n(ds.images[image_ids[i]].pixels.raw(), px_size, b.inputs.image_pixels.raw() + i * px_size);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of `param` in place; t counts from 1.
inline void adam_step(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, std::size_t t, double lr,
                      const AdamConfig& c = {}) {
  if (t == 0) throw ValueError("adam_step: step counter starts at 1");
  const double c1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
    param[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + c.eps);
  }
}

/// Adam over a whole ParamStore.
class Adam {
 public:
  explicit Adam(const ad::ParamStore& store, AdamConfig cfg = {}) : cfg_(cfg) {
    for (const auto& [name, v] : store) {
      m_.emplace_back(v.shape());
      v_.emplace_back(v.shape());
    }
  }

  void step(const ad::ParamStore& store, const std::vector<Tensor>& grads, double lr) {
    ++t_;
    std::size_t i = 0;
    for (const auto& [name, v] : store) {
      if (grads[i].size() == v.size()) adam_step(v.node().value, grads[i], m_[i], v_[i], t_, lr, cfg_);
      ++i;
    }
  }

  std::size_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  static constexpr double kMapeFloor = 1e-3;
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;  // percent; NaN when every target is below the floor
  std::size_t count = 0;
  std::size_t mape_excluded = 0;

  bool mape_defined() const { return !std::isnan(mape); }
};

/// Accumulates MAE, RMSE and MAPE over any number of prediction blocks.
class MetricAccumulator {
 public:
  void add(const Tensor& target, const Tensor& pred) {
    if (target.shape() != pred.shape()) {
      throw ShapeError("metrics: target " + to_string(target.shape()) + " vs prediction " + to_string(pred.shape()));
    }
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double e = std::abs(target[i] - pred[i]);
      abs_ += e;
      sq_ += e * e;
      ++count_;
      if (std::abs(target[i]) < Metrics::kMapeFloor) {
        ++excluded_;
      } else {
        pct_ += e / std::abs(target[i]);
      }
    }
  }

  Metrics result() const {
    if (count_ == 0) throw DataError("metrics: no predictions to evaluate");
    Metrics m;
    const double n = static_cast<double>(count_);
    m.count = count_;
    m.mae = abs_ / n;
    m.rmse = std::sqrt(sq_ / n);
    m.mape_excluded = excluded_;
    m.mape = excluded_ == count_ ? std::numeric_limits<double>::quiet_NaN()
                                 : 100.0 * pct_ / static_cast<double>(count_ - excluded_);
    if (m.rmse < m.mae * (1.0 - 1e-12)) {
      throw std::logic_error("metrics: RMSE " + format_double(m.rmse) + " below MAE " + format_double(m.mae));
    }
    return m;
  }

 private:
  double abs_ = 0.0, sq_ = 0.0, pct_ = 0.0;
  std::size_t count_ = 0, excluded_ = 0;
};

inline Metrics compute_metrics(const Tensor& target, const Tensor& pred) {
  MetricAccumulator acc;
  acc.add(target, pred);
  return acc.result();
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double lr = 1e-3;
  double lr_decay = 0.5;
  std::size_t decay_every = 5;
  std::size_t patience = 10;
  std::size_t batch_size = 16;
  double lambda = 0.25;
  double beta = 0.5;
  double gamma = 0.1;
  std::size_t refresh_period = 5;  // P
  double ema_momentum = 0.9;
  std::size_t max_epochs = 100;
  std::uint64_t seed = 7;
  std::size_t shap_samples = 200;
  std::size_t shap_windows = 8;
  std::size_t threads = 1;
  LossNorm loss_norm = LossNorm::kMse;

  void validate() const {
    if (!(lr > 0.0) || !(lr_decay > 0.0) || decay_every == 0 || patience == 0 || batch_size == 0 ||
        refresh_period == 0 || shap_samples == 0 || shap_windows == 0 || threads == 0) {
      throw ConfigError("lr, lr_decay, decay_every, patience, batch_size, refresh_period, shap_samples, "
                        "shap_windows and threads must be positive");
    }
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
    if (!(gamma >= 0.0)) throw ConfigError("gamma must be non-negative");
    if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) throw ConfigError("ema_momentum must lie in [0, 1]");
  }

  double learning_rate(std::size_t epoch) const {
    return lr * std::pow(lr_decay, static_cast<double>(epoch / decay_every));
  }

  static TrainConfig from_kv(const KvConfig& kv) {
    TrainConfig c;
    c.lr = kv.get_double("lr", c.lr);
    c.lr_decay = kv.get_double("lr_decay", c.lr_decay);
    c.decay_every = kv.get_size("decay_every", c.decay_every);
    c.patience = kv.get_size("patience", c.patience);
    c.batch_size = kv.get_size("batch_size", c.batch_size);
    c.lambda = kv.get_double("lambda", c.lambda);
    c.beta = kv.get_double("beta", c.beta);
    c.gamma = kv.get_double("gamma", c.gamma);
    c.refresh_period = kv.get_size("refresh_period", c.refresh_period);
    c.ema_momentum = kv.get_double("ema_momentum", c.ema_momentum);
    c.max_epochs = kv.get_size("max_epochs", c.max_epochs);
    c.seed = static_cast<std::uint64_t>(kv.get_size("seed", c.seed));
    c.shap_samples = kv.get_size("shap_samples", c.shap_samples);
    c.shap_windows = kv.get_size("shap_windows", c.shap_windows);
    const std::string norm = kv.get_string("loss_norm", "mse");
    if (norm != "mse" && norm != "l2") throw ConfigError("loss_norm must be mse or l2, got '" + norm + "'");
    c.loss_norm = norm == "mse" ? LossNorm::kMse : LossNorm::kL2;
    c.validate();
    return c;
  }

  void write_kv(KvConfig& kv) const {
    kv.set("lr", format_double(lr));
    kv.set("lr_decay", format_double(lr_decay));
    kv.set("decay_every", std::to_string(decay_every));
    kv.set("patience", std::to_string(patience));
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("lambda", format_double(lambda));
    kv.set("beta", format_double(beta));
    kv.set("gamma", format_double(gamma));
    kv.set("refresh_period", std::to_string(refresh_period));
    kv.set("ema_momentum", format_double(ema_momentum));
    kv.set("max_epochs", std::to_string(max_epochs));
    kv.set("seed", std::to_string(seed));
    kv.set("shap_samples", std::to_string(shap_samples));
    kv.set("shap_windows", std::to_string(shap_windows));
    kv.set("loss_norm", loss_norm == LossNorm::kMse ? "mse" : "l2");
  }
};

struct HistoryRow {
  std::size_t epoch = 0;
  double l_pred = 0.0;
  double l_st = 0.0;
  double l_mm = 0.0;
  double penalty = 0.0;
  double lr = 0.0;
  double val_mae = 0.0;
  double val_rmse = 0.0;
  double val_mape = 0.0;
  double val_l_pred = 0.0;
  bool graph_refreshed = false;
};

/// Everything needed to predict: parameters, graph, normalization.
struct TrainState {
  DualBranchModel model;
  HybridGraph graph;
  NormStats stats;
  TrainConfig train_config;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;  // 1-based; 0 means the initialized model
  double best_val = std::numeric_limits<double>::infinity();

  Tensor a_hat() const { return normalized_adjacency(graph.current); }
};

struct TrainResult {
  TrainState state;
  std::vector<HistoryRow> history;
};

namespace detail {

inline std::vector<Tensor> snapshot(const ad::ParamStore& store) {
  std::vector<Tensor> out;
  for (const auto& [name, v] : store) out.push_back(v.value());
  return out;
}

inline void restore(const ad::ParamStore& store, const std::vector<Tensor>& values) {
  std::size_t i = 0;
  for (const auto& [name, v] : store) v.node().value = values[i++];
}

/// Stacks the inputs of the given windows into one [B, T, N, c] tensor.
inline Tensor stack_inputs(const PreparedData& p, const std::vector<WindowedSample>& windows,
                           const std::vector<std::size_t>& ids) {
  const std::size_t t_in = windows.front().in_steps, slab = p.nodes * p.channels;
  Tensor x({ids.size(), t_in, p.nodes, p.channels});
  for (std::size_t k = 0; k < ids.size(); ++k) {
    std::copy_n(p.normalized.raw() + windows[ids[k]].start * slab, t_in * slab, x.raw() + k * t_in * slab);
  }
  return x;
}

/// Fresh Shapley attribution of the main branch on evenly spaced training windows.
inline AttributionMatrix attribution(const TrainState& st, const PreparedData& p,
                                     const std::vector<WindowedSample>& train, std::uint64_t seed) {
  const TrainConfig& tc = st.train_config;
  const std::size_t k = std::min(tc.shap_windows, train.size());
  std::vector<std::size_t> explain_ids, background_ids;
  for (std::size_t i = 0; i < k; ++i) explain_ids.push_back(i * train.size() / k);
  const std::size_t bg = std::min<std::size_t>(4 * k, train.size());
  for (std::size_t i = 0; i < bg; ++i) background_ids.push_back(i * train.size() / bg);
  ShapleyOptions opts;
  opts.num_samples = tc.shap_samples;
  opts.seed = seed;
  opts.threads = tc.threads;
  return estimate_shap(st.model.main_predictor(st.a_hat()), stack_inputs(p, train, explain_ids),
                       stack_inputs(p, train, background_ids), opts);
}

}  // namespace detail

struct EvalResult {
  Metrics metrics;
  double l_pred = 0.0;  // loss of the final prediction in normalized units
};

/// Metrics of the final prediction over every window, in original units.
inline EvalResult evaluate(const TrainState& st, const PreparedData& p, const std::vector<WindowedSample>& windows) {
  if (windows.empty()) throw DataError("evaluate: split has no windows");
  ad::NoGradGuard guard;
  const Tensor a_hat = st.a_hat();
  MetricAccumulator acc;
  double loss = 0.0;
  const std::size_t bs = st.train_config.batch_size;
  for (std::size_t first = 0; first < windows.size(); first += bs) {
    const std::size_t count = std::min(bs, windows.size() - first);
    const Batch b = make_batch(p, windows, first, count, st.model.multimodal());
    const Tensor pred = st.model.forward(b.inputs, a_hat).final_pred.value();
    const double l = prediction_loss(ad::constant(b.target), ad::constant(pred), st.train_config.loss_norm).value()[0];
    loss += l * static_cast<double>(count);
    acc.add(b.target_raw, denormalize_st(pred, p.stats));
  }
  return {acc.result(), loss / static_cast<double>(windows.size())};
}

inline std::vector<WindowedSample> split_windows(const StepRange& r, const ModelConfig& mc) {
  return make_windows(r, mc.in_steps, mc.out_steps);
}

using EpochCallback = std::function<void(const HistoryRow&, const TrainState&)>;

/// Dual-branch training with Adam, step decay, periodic graph refresh and
/// early stopping on validation L_pred. Returns the best checkpoint.
inline TrainResult train(const MultiModalDataset& ds, const ModelConfig& mc, const TrainConfig& tc,
                         const EpochCallback& on_epoch = {}) {
  tc.validate();
  const PreparedData p = prepare_data(ds, mc);
  const auto train_w = split_windows(p.splits.train, mc);
  const auto val_w = split_windows(p.splits.val, mc);
  if (train_w.empty()) throw DataError("training split has no complete windows");

  TrainResult result;
  TrainState& st = result.state;
  st.model = DualBranchModel::create(mc, p.nodes, p.channels, ds.image_channels, tc.seed);
  st.stats = p.stats;
  st.train_config = tc;
  st.graph = HybridGraph::create(ds.adjacency, Tensor(ds.adjacency.shape()), tc.lambda, tc.ema_momentum,
                                 tc.refresh_period);
  st.graph.shap = detail::attribution(st, p, train_w, derive_seed(tc.seed, 200)).values;
  st.graph.current = hybrid(st.graph.prior, st.graph.shap, tc.lambda);

  if (val_w.empty()) log::warn("validation split has no windows; early stopping uses the training loss");
  if (tc.max_epochs == 0) return result;

  const LossWeights weights{tc.beta, tc.gamma};
  Adam adam(st.model.store);
  Rng shuffle_rng(derive_seed(tc.seed, 300));
  std::vector<std::size_t> order(train_w.size());
  std::vector<Tensor> best_params = detail::snapshot(st.model.store);
  HybridGraph best_graph = st.graph;
  std::size_t bad_epochs = 0;

  for (std::size_t epoch = 0; epoch < tc.max_epochs; ++epoch) {
    HistoryRow row;
    row.epoch = epoch + 1;
    if (st.graph.is_refresh_epoch(epoch)) {
      const AttributionMatrix shap = detail::attribution(st, p, train_w, derive_seed(tc.seed, 200 + epoch));
      st.graph.shap = shap.values;
      st.graph = ema_refresh(std::move(st.graph), epoch, hybrid(st.graph.prior, shap.values, tc.lambda));
      row.graph_refreshed = true;
    }
    row.lr = tc.learning_rate(epoch);
    const Tensor a_hat = st.a_hat();

    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_rng.shuffle(order);
    std::vector<WindowedSample> shuffled;
    for (std::size_t i : order) shuffled.push_back(train_w[i]);

    for (std::size_t first = 0; first < shuffled.size(); first += tc.batch_size) {
      const std::size_t count = std::min(tc.batch_size, shuffled.size() - first);
      const Batch b = make_batch(p, shuffled, first, count, st.model.multimodal());
      const ModelOutputs out = st.model.forward(b.inputs, a_hat);
      const ad::Var target = ad::constant(b.target);
      ad::Var l_all, l_pred, l_st, l_mm;
      if (st.model.multimodal()) {
        const Losses l = compute_losses(target, out.final_pred, out.st_pred, out.mm_pred, weights, out.penalty,
                                        tc.loss_norm);
        l_all = l.all, l_pred = l.pred, l_st = l.st, l_mm = l.mm;
      } else {
        l_all = l_pred = l_st = prediction_loss(target, out.st_pred, tc.loss_norm);
        l_mm = ad::constant(Tensor::scalar(0.0));
      }
      const double total = l_all.value()[0];
      if (!std::isfinite(total)) {
        throw DivergenceError("training diverged: non-finite loss at epoch " + std::to_string(epoch + 1) +
                              "; lower the learning rate");
      }
      const ad::GradResult g = ad::grad(l_all, st.model.store);
      std::vector<Tensor> grads;
      for (const auto& [name, v] : st.model.store) {
        auto it = g.find(name);
        grads.push_back(it == g.end() ? Tensor() : it->second);
      }
      adam.step(st.model.store, grads, row.lr);
      const double w = static_cast<double>(count) / static_cast<double>(shuffled.size());
      row.l_pred += w * l_pred.value()[0];
      row.l_st += w * l_st.value()[0];
      row.l_mm += w * l_mm.value()[0];
      row.penalty += w * out.penalty.value()[0];
    }

    if (!val_w.empty()) {
      const EvalResult ev = evaluate(st, p, val_w);
      row.val_l_pred = ev.l_pred;
      row.val_mae = ev.metrics.mae;
      row.val_rmse = ev.metrics.rmse;
      row.val_mape = ev.metrics.mape;
    } else {
      row.val_l_pred = row.l_pred;
      row.val_mae = row.val_rmse = row.val_mape = std::numeric_limits<double>::quiet_NaN();
    }
    st.epochs_run = epoch + 1;
    result.history.push_back(row);

    if (row.val_l_pred < st.best_val) {
      st.best_val = row.val_l_pred;
      st.best_epoch = epoch + 1;
      best_params = detail::snapshot(st.model.store);
      best_graph = st.graph;
      bad_epochs = 0;
    } else {
      ++bad_epochs;
    }
    if (on_epoch) on_epoch(row, st);
    if (bad_epochs >= tc.patience) {
      log::info("early stop after epoch " + std::to_string(epoch + 1) + "; best epoch " +
                std::to_string(st.best_epoch));
      break;
    }
  }
  detail::restore(st.model.store, best_params);
  st.graph = best_graph;
  return result;
}

// ---------------------------------------------------------------------------
// History CSV

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::string out = "epoch,L_pred,L_st,L_mm,penalty,lr,val_MAE,val_RMSE,val_MAPE\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.l_pred,
                  r.l_st, r.l_mm, r.penalty, r.lr, r.val_mae, r.val_rmse, r.val_mape);
    out += buf;
  }
  return out;
}

inline void write_history_csv(const std::vector<HistoryRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write history '" + path + "'");
  out << history_csv(rows);
}

// ---------------------------------------------------------------------------
// Checkpoints: "CSTPCKPT", u32 version, config text, shapes, graph, params.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class BinWriter {
 public:
  explicit BinWriter(std::ostream& out) : out_(out) {}
  void u32(std::uint32_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
  void u64(std::uint64_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
  void str(const std::string& s) {
    u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void tensor(const Tensor& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) u64(d);
    out_.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }

 private:
  std::ostream& out_;
};

class BinReader {
 public:
  BinReader(std::istream& in, std::string origin) : in_(in), origin_(std::move(origin)) {}
  void raw(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw DataError(origin_ + ": truncated checkpoint");
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > (1u << 26)) throw DataError(origin_ + ": corrupt string length");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  Tensor tensor() {
    const std::uint32_t rank = u32();
    if (rank > 8) throw DataError(origin_ + ": corrupt tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = u64();
    if (numel(shape) > (std::size_t{1} << 30)) throw DataError(origin_ + ": corrupt tensor size");
    Tensor t(shape);
    raw(t.raw(), t.size() * sizeof(double));
    return t;
  }

 private:
  std::istream& in_;
  std::string origin_;
};

constexpr char kCheckpointMagic[8] = {'C', 'S', 'T', 'P', 'C', 'K', 'P', 'T'};

}  // namespace detail

inline void write_checkpoint(const TrainState& st, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  out.write(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
  detail::BinWriter w(out);
  w.u32(kCheckpointVersion);
  KvConfig kv;
  st.model.config.write_kv(kv);
  st.train_config.write_kv(kv);
  kv.set("nodes", std::to_string(st.model.nodes));
  kv.set("channels", std::to_string(st.model.channels));
  kv.set("image_channels", std::to_string(st.model.image_channels));
  kv.set("epochs_run", std::to_string(st.epochs_run));
  kv.set("best_epoch", std::to_string(st.best_epoch));
  w.str(kv.to_string());
  w.tensor(st.stats.mean);
  w.tensor(st.stats.stddev);
  w.tensor(st.graph.prior);
  w.tensor(st.graph.shap);
  w.tensor(st.graph.current);
  w.u64(st.model.store.size());
  for (const auto& [name, v] : st.model.store) {
    w.str(name);
    w.tensor(v.value());
  }
  if (!out) throw DataError("failed writing checkpoint '" + path + "'");
}

inline TrainState read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  char magic[8];
  detail::BinReader r(in, path);
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, detail::kCheckpointMagic, sizeof magic) != 0) throw DataError(path + ": not a checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  TrainState st;
  try {
    const KvConfig kv = KvConfig::parse_string(r.str(), path);
    const ModelConfig mc = ModelConfig::from_kv(kv);
    st.train_config = TrainConfig::from_kv(kv);
    const std::size_t nodes = kv.get_size("nodes", 0), channels = kv.get_size("channels", 0);
    const std::size_t image_channels = kv.get_size("image_channels", 1);
    st.epochs_run = kv.get_size("epochs_run", 0);
    st.best_epoch = kv.get_size("best_epoch", 0);
    kv.reject_unknown();
    st.model = DualBranchModel::create(mc, nodes, channels, image_channels, 0);
  } catch (const ConfigError& e) {
    throw DataError(path + ": bad embedded config: " + e.what());
  }
  st.stats.mean = r.tensor();
  st.stats.stddev = r.tensor();
  Tensor prior = r.tensor(), shap = r.tensor(), current = r.tensor();
  st.graph = HybridGraph::create(prior, shap, st.train_config.lambda, st.train_config.ema_momentum,
                                 st.train_config.refresh_period);
  st.graph.current = std::move(current);
  const std::uint64_t count = r.u64();
  if (count != st.model.store.size()) {
    throw DataError(path + ": checkpoint has " + std::to_string(count) + " parameters, model expects " +
                    std::to_string(st.model.store.size()));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    Tensor value = r.tensor();
    if (!st.model.store.contains(name)) throw DataError(path + ": unknown parameter '" + name + "'");
    try {
      st.model.store.set(name, std::move(value));
    } catch (const ShapeError& e) {
      throw DataError(path + ": " + e.what());
    }
  }
  return st;
}

}  // namespace cstp
