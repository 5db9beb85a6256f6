#pragma once

#include <algorithm>
#include <bit>
#include <limits>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <thread>
#include <vector>

#include "cstp/rng.hpp"
#include "cstp/tensor.hpp"

namespace cstp {

/// Maps an input batch [B, T, N, d] to predictions [B, S, N, d_out].
using Predictor = std::function<Tensor(const Tensor&)>;

struct ShapleyOptions {
  static constexpr std::size_t kExhaustiveMaxNodes = 10;

  std::size_t num_samples = 2000;  // sampled permutations
  bool exhaustive = false;         // enumerate all 2^N coalitions instead
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// values: |phi| min-max normalized to [0, 1]; raw: signed phi where entry
/// (i, j) is the influence of node i on node j.
struct AttributionMatrix {
  Tensor values;
  Tensor raw;
};

namespace detail {

/// Replaces every node outside `coalition` with the background mean.
inline void fill_masked(const Tensor& explain, const Tensor& bg_mean, const std::vector<char>& coalition,
                        double* dst) {
  const std::size_t b = explain.dim(0), t = explain.dim(1), n = explain.dim(2), d = explain.dim(3);
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t ti = 0; ti < t; ++ti)
      for (std::size_t ni = 0; ni < n; ++ni) {
        const double* src = coalition[ni] ? explain.raw() + ((s * t + ti) * n + ni) * d
                                           : bg_mean.raw() + (ti * n + ni) * d;
        std::copy(src, src + d, dst + ((s * t + ti) * n + ni) * d);
      }
}

/// Mean prediction per node over batch, horizon and channels, for each of
/// `groups` stacked copies of the explained batch.
inline std::vector<double> node_means(const Tensor& pred, std::size_t groups, std::size_t nodes) {
  if (pred.rank() != 4 || pred.dim(2) != nodes || pred.dim(0) % groups != 0) {
    throw ShapeError("predictor returned " + to_string(pred.shape()) + ", expected [B, S, N, d]");
  }
  const std::size_t per = pred.dim(0) / groups, s = pred.dim(1), d = pred.dim(3);
  std::vector<double> v(groups * nodes, 0.0);
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t b = 0; b < per; ++b)
      for (std::size_t si = 0; si < s; ++si)
        for (std::size_t n = 0; n < nodes; ++n)
          for (std::size_t c = 0; c < d; ++c)
            v[g * nodes + n] += pred[(((g * per + b) * s + si) * nodes + n) * d + c];
  const double denom = static_cast<double>(per * s * d);
  for (double& x : v) x /= denom;
  return v;
}

/// Evaluates the value function for a list of coalitions in one predictor call.
inline std::vector<double> coalition_values(const Predictor& model, const Tensor& explain,
                                            const Tensor& bg_mean,
                                            const std::vector<std::vector<char>>& coalitions) {
  const std::size_t per = explain.size();
  Shape shape = explain.shape();
  shape[0] *= coalitions.size();
  Tensor batch(shape);
  for (std::size_t k = 0; k < coalitions.size(); ++k)
    fill_masked(explain, bg_mean, coalitions[k], batch.raw() + k * per);
  return node_means(model(batch), coalitions.size(), explain.dim(2));
}

inline Tensor normalize_abs_minmax(const Tensor& raw) {
  Tensor out(raw.shape());
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (double v : raw.data()) {
    lo = std::min(lo, std::abs(v));
    hi = std::max(hi, std::abs(v));
  }
  const double span = hi - lo;
  if (!(span > 0.0)) return out;
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (std::abs(raw[i]) - lo) / span;
  return out;
}

}  // namespace detail

/// Shapley attribution of each node's input to each node's mean predicted
/// value. Masking node i substitutes its input slice with the background
/// batch mean. Sampled mode averages marginal contributions over
/// `num_samples` seeded random permutations; exhaustive mode enumerates
/// every coalition.
inline AttributionMatrix estimate_shap(const Predictor& model, const Tensor& explain,
                                       const Tensor& background, const ShapleyOptions& opts) {
  if (explain.rank() != 4 || background.rank() != 4 ||
      !std::equal(explain.shape().begin() + 1, explain.shape().end(), background.shape().begin() + 1)) {
    throw ShapeError("estimate_shap: explain " + to_string(explain.shape()) + " and background " +
                     to_string(background.shape()) + " must be [B, T, N, d] with matching T, N, d");
  }
  const std::size_t nodes = explain.dim(2);
  const std::size_t inner = explain.size() / explain.dim(0);
  Tensor bg_mean({explain.dim(1), nodes, explain.dim(3)});
  for (std::size_t b = 0; b < background.dim(0); ++b)
    for (std::size_t i = 0; i < inner; ++i) bg_mean[i] += background[b * inner + i];
  for (double& v : bg_mean.data()) v /= static_cast<double>(background.dim(0));

  Tensor raw({nodes, nodes});
  if (opts.exhaustive) {
    if (nodes > ShapleyOptions::kExhaustiveMaxNodes) {
      throw ValueError("exhaustive Shapley enumeration limited to " +
                       std::to_string(ShapleyOptions::kExhaustiveMaxNodes) + " nodes, got " +
                       std::to_string(nodes));
    }
    const std::size_t count = std::size_t{1} << nodes;
    std::vector<double> values(count * nodes);
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < count; start += kChunk) {
      std::vector<std::vector<char>> chunk;
      for (std::size_t mask = start; mask < std::min(count, start + kChunk); ++mask) {
        std::vector<char> c(nodes);
        for (std::size_t i = 0; i < nodes; ++i) c[i] = (mask >> i) & 1U;
        chunk.push_back(std::move(c));
      }
      auto v = detail::coalition_values(model, explain, bg_mean, chunk);
      std::copy(v.begin(), v.end(), values.begin() + static_cast<long>(start * nodes));
    }
    std::vector<double> fact(nodes + 1, 1.0);
    for (std::size_t k = 1; k <= nodes; ++k) fact[k] = fact[k - 1] * static_cast<double>(k);
    for (std::size_t mask = 0; mask < count; ++mask) {
      const std::size_t size = static_cast<std::size_t>(std::popcount(mask));
      for (std::size_t i = 0; i < nodes; ++i) {
        if ((mask >> i) & 1U) continue;
        const double w = fact[size] * fact[nodes - size - 1] / fact[nodes];
        const std::size_t with = mask | (std::size_t{1} << i);
        for (std::size_t j = 0; j < nodes; ++j)
          raw.at(i, j) += w * (values[with * nodes + j] - values[mask * nodes + j]);
      }
    }
  } else {
    if (opts.num_samples == 0) throw ValueError("estimate_shap: num_samples must be at least 1");
    Rng rng(opts.seed);
    std::vector<std::vector<std::size_t>> perms(opts.num_samples);
    for (auto& p : perms) {
      p.resize(nodes);
      std::iota(p.begin(), p.end(), 0);
      rng.shuffle(p);
    }
    // Permutation prefixes revisit the same coalitions, so each distinct
    // coalition is evaluated once and shared by every permutation using it.
    std::map<std::vector<char>, std::size_t> index;
    std::vector<std::vector<std::size_t>> chain_ids(perms.size(), std::vector<std::size_t>(nodes + 1));
    for (std::size_t m = 0; m < perms.size(); ++m) {
      std::vector<char> c(nodes, 0);
      for (std::size_t k = 0; k <= nodes; ++k) {
        if (k > 0) c[perms[m][k - 1]] = 1;
        chain_ids[m][k] = index.emplace(c, index.size()).first->second;
      }
    }
    std::vector<std::vector<char>> distinct(index.size());
    for (auto& [c, id] : index) distinct[id] = c;
    std::vector<double> values(distinct.size() * nodes);
    constexpr std::size_t kChunk = 32;
    const std::size_t chunks = (distinct.size() + kChunk - 1) / kChunk;
    auto work = [&](std::size_t begin, std::size_t end) {
      for (std::size_t ch = begin; ch < end; ++ch) {
        const std::size_t lo = ch * kChunk, hi = std::min(distinct.size(), lo + kChunk);
        std::vector<std::vector<char>> part(distinct.begin() + static_cast<long>(lo),
                                            distinct.begin() + static_cast<long>(hi));
        const auto v = detail::coalition_values(model, explain, bg_mean, part);
        std::copy(v.begin(), v.end(), values.begin() + static_cast<long>(lo * nodes));
      }
    };
    const std::size_t threads = std::clamp<std::size_t>(opts.threads, 1, chunks);
    if (threads == 1) {
      work(0, chunks);
    } else {
      std::vector<std::jthread> pool;
      const std::size_t per = (chunks + threads - 1) / threads;
      for (std::size_t t = 0; t < threads; ++t) {
        const std::size_t b = t * per, e = std::min(chunks, b + per);
        if (b < e) pool.emplace_back(work, b, e);
      }
    }
    // contrib[m] holds permutation m's N x N marginal contributions.
    std::vector<std::vector<double>> contrib(perms.size());
    for (std::size_t m = 0; m < perms.size(); ++m) {
      contrib[m].assign(nodes * nodes, 0.0);
      for (std::size_t k = 0; k < nodes; ++k) {
        const std::size_t i = perms[m][k];
        const double* before = values.data() + chain_ids[m][k] * nodes;
        const double* after = values.data() + chain_ids[m][k + 1] * nodes;
        for (std::size_t j = 0; j < nodes; ++j) contrib[m][i * nodes + j] = after[j] - before[j];
      }
    }
    for (const auto& c : contrib)
      for (std::size_t i = 0; i < c.size(); ++i) raw[i] += c[i];
    for (double& v : raw.data()) v /= static_cast<double>(perms.size());
  }
  return {detail::normalize_abs_minmax(raw), std::move(raw)};
}

/// lambda * A0 + (1 - lambda) * A_shap.
inline Tensor hybrid(const Tensor& prior, const Tensor& shap, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ValueError("hybrid: lambda must lie in [0, 1], got " + std::to_string(lambda));
  }
  if (prior.shape() != shap.shape() || prior.rank() != 2 || prior.dim(0) != prior.dim(1)) {
    throw ShapeError("hybrid: expected matching N x N matrices, got " + to_string(prior.shape()) +
                     " and " + to_string(shap.shape()));
  }
  Tensor out(prior.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = lambda * prior[i] + (1.0 - lambda) * shap[i];
  return out;
}

struct HybridGraph {
  Tensor prior;            // A0
  Tensor shap;             // latest attribution matrix
  double lambda = 0.25;
  Tensor current;          // A used by the encoders
  double momentum = 0.9;   // EMA coefficient mu
  std::size_t period = 5;  // refresh every P epochs

  static HybridGraph create(Tensor prior, Tensor shap, double lambda, double momentum, std::size_t period) {
    if (period == 0) throw ValueError("graph refresh period must be at least 1");
    if (!(momentum >= 0.0 && momentum <= 1.0)) throw ValueError("EMA momentum must lie in [0, 1]");
    HybridGraph g{std::move(prior), std::move(shap), lambda, Tensor(), momentum, period};
    g.current = hybrid(g.prior, g.shap, lambda);
    return g;
  }

  bool is_refresh_epoch(std::size_t epoch) const { return epoch > 0 && epoch % period == 0; }
};

/// On refresh epochs A <- mu A + (1 - mu) fresh; otherwise unchanged.
inline HybridGraph ema_refresh(HybridGraph graph, std::size_t epoch, const Tensor& fresh_hybrid) {
  if (!graph.is_refresh_epoch(epoch)) return graph;
  if (fresh_hybrid.shape() != graph.current.shape()) {
    throw ShapeError("ema_refresh: fresh matrix " + to_string(fresh_hybrid.shape()) + " does not match " +
                     to_string(graph.current.shape()));
  }
  for (std::size_t i = 0; i < graph.current.size(); ++i) {
    graph.current[i] = graph.momentum * graph.current[i] + (1.0 - graph.momentum) * fresh_hybrid[i];
  }
  return graph;
}

}  // namespace cstp
