#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cstp/autodiff.hpp"
#include "cstp/layers.hpp"
#include "cstp/ops.hpp"

namespace cstp {

/// D^{-1/2} (A + I) D^{-1/2} with D the degree matrix of A + I.
inline Tensor normalized_adjacency(const Tensor& adj) {
  if (adj.rank() != 2 || adj.dim(0) != adj.dim(1)) {
    throw ShapeError("adjacency must be square, got " + to_string(adj.shape()));
  }
  const std::size_t n = adj.dim(0);
  for (double v : adj.data()) {
    if (v < 0.0) throw ValueError("adjacency entries must be non-negative");
    if (!std::isfinite(v)) throw ValueError("adjacency entries must be finite");
  }
  Tensor a = adj;
  for (std::size_t i = 0; i < n; ++i) a.at(i, i) += 1.0;
  std::vector<double> inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j) deg += a.at(i, j);
    inv_sqrt[i] = 1.0 / std::sqrt(deg);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a.at(i, j) *= inv_sqrt[i] * inv_sqrt[j];
  return a;
}

enum class TemporalEncoder { kMamba, kAttention };

struct StedConfig {
  std::size_t layers = 3;
  std::size_t width = 32;     // d
  std::size_t state = 16;     // n
  std::size_t conv = 4;       // k
  std::size_t in_steps = 12;  // T
  std::size_t out_steps = 12; // S_out
  std::size_t out_channels = 1;
  bool residual_input = true;
  TemporalEncoder temporal = TemporalEncoder::kMamba;

  std::size_t inner() const { return 2 * width; }
};

// ---------------------------------------------------------------------------
// Spatial block

struct GcnLayer {
  Linear lin;  // [d, d]

  static GcnLayer create(ad::ParamStore& store, const std::string& name, std::size_t d, Rng& rng) {
    return {Linear::create(store, name, d, d, rng)};
  }
};

/// ReLU(Ahat X W + b) applied at every (batch, time); x is [B, T, N, d] and
/// a_hat the already-normalized adjacency.
inline ad::Var gcn_forward(const ad::Var& x, const Tensor& a_hat, const GcnLayer& layer) {
  return ad::relu(layer.lin(ad::mix_rows(a_hat, x)));
}

// ---------------------------------------------------------------------------
// Temporal blocks

struct MambaBlock {
  Linear in_proj;        // [d, 2 d_inner]
  ad::Var conv_kernel;   // [k, d_inner]
  ad::Var conv_bias;     // [d_inner]
  Linear delta;          // [d_inner, d_inner]
  ad::Var w_b;           // [d_inner, n]
  ad::Var w_c;           // [d_inner, n]
  ad::Var a_log;         // [d_inner, n]; A_diag = -exp(a_log)
  ad::Var skip;          // [d_inner]
  Linear out_proj;       // [d_inner, d]

  static MambaBlock create(ad::ParamStore& store, const std::string& name, std::size_t d,
                           std::size_t state, std::size_t conv, Rng& rng) {
    const std::size_t di = 2 * d;
    MambaBlock m;
    m.in_proj = Linear::create(store, name + ".in", d, 2 * di, rng);
    m.conv_kernel = store.add(name + ".conv.w", init_uniform({conv, di}, conv, rng));
    m.conv_bias = store.add(name + ".conv.b", init_uniform({di}, conv, rng));
    m.delta = Linear::create(store, name + ".dt", di, di, rng);
    // Step sizes start log-uniform in [1e-3, 1e-1].
    Tensor dt_bias({di});
    for (double& v : dt_bias.data()) {
      const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      v = dt + std::log(-std::expm1(-dt));
    }
    store.set(name + ".dt.b", std::move(dt_bias));
    m.w_b = store.add(name + ".B", init_uniform({di, state}, di, rng));
    m.w_c = store.add(name + ".C", init_uniform({di, state}, di, rng));
    Tensor a_log({di, state});
    for (std::size_t c = 0; c < di; ++c)
      for (std::size_t j = 0; j < state; ++j) a_log.at(c, j) = std::log(static_cast<double>(j + 1));
    m.a_log = store.add(name + ".A_log", std::move(a_log));
    m.skip = store.add(name + ".D", Tensor({di}, 1.0));
    m.out_proj = Linear::create(store, name + ".out", di, d, rng);
    return m;
  }

  std::size_t inner() const { return conv_kernel.shape()[1]; }
  std::size_t state() const { return a_log.shape()[1]; }

  /// A_diag = -exp(a_log), strictly negative.
  ad::Var a_diag() const { return ad::scale(ad::exp(a_log), -1.0); }
};

/// Runs the selective state-space block over each node's sequence
/// independently. x is [B, T, N, d] (or [S, T, d] already per-sequence).
inline ad::Var mamba_sequences(const ad::Var& seq, const MambaBlock& m) {
  const std::size_t di = m.inner();
  ad::Var xz = m.in_proj(seq);
  ad::Var u = ad::slice_last(xz, 0, di);
  ad::Var z = ad::slice_last(xz, di, 2 * di);
  u = ad::silu(ad::add_bcast(ad::depthwise_conv1d(u, m.conv_kernel), m.conv_bias));
  ad::Var dt = ad::softplus(m.delta(u));
  ad::Var b = ad::matmul(u, m.w_b);
  ad::Var c = ad::matmul(u, m.w_c);
  ad::Var y = ad::selective_scan(u, dt, m.a_diag(), b, c, m.skip);
  return m.out_proj(ad::mul(y, ad::silu(z)));
}

namespace detail {

/// [B, T, N, d] -> [B*N, T, d]
inline ad::Var to_sequences(const ad::Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("expected [B, T, N, d], got " + to_string(s));
  return ad::reshape(ad::permute(x, {0, 2, 1, 3}), {s[0] * s[2], s[1], s[3]});
}

/// [B*N, T, d] -> [B, T, N, d]
inline ad::Var from_sequences(const ad::Var& seq, const Shape& s) {
  return ad::permute(ad::reshape(seq, {s[0], s[2], s[1], seq.shape().back()}), {0, 2, 1, 3});
}

}  // namespace detail

inline ad::Var mamba_forward(const ad::Var& x, const MambaBlock& m) {
  return detail::from_sequences(mamba_sequences(detail::to_sequences(x), m), x.shape());
}

/// Single-head softmax self-attention over the time axis of each node.
struct AttentionBlock {
  Linear query;
  Linear key;  // bias-free, as in cross-modal attention
  Linear value;

  static AttentionBlock create(ad::ParamStore& store, const std::string& name, std::size_t d,
                               Rng& rng) {
    return {Linear::create(store, name + ".q", d, d, rng), Linear::create_unbiased(store, name + ".k", d, d, rng),
            Linear::create(store, name + ".v", d, d, rng)};
  }
};

inline ad::Var attention_baseline_forward(const ad::Var& x, const AttentionBlock& a) {
  ad::Var seq = detail::to_sequences(x);
  const double scale = 1.0 / std::sqrt(static_cast<double>(seq.shape().back()));
  ad::Var scores = ad::scale(ad::bmm(a.query(seq), a.key(seq), /*transpose_b=*/true), scale);
  ad::Var out = ad::bmm(ad::softmax_rows(scores), a.value(seq));
  return detail::from_sequences(out, x.shape());
}

// ---------------------------------------------------------------------------
// Layer, stack, decoder

struct StedLayer {
  GcnLayer gcn;
  TemporalEncoder temporal = TemporalEncoder::kMamba;
  MambaBlock mamba;
  AttentionBlock attention;
  ad::Var ln_gain;
  ad::Var ln_bias;
  bool residual_input = true;

  static StedLayer create(ad::ParamStore& store, const std::string& name, const StedConfig& cfg,
                          Rng& rng) {
    StedLayer l;
    l.gcn = GcnLayer::create(store, name + ".gcn", cfg.width, rng);
    l.temporal = cfg.temporal;
    if (cfg.temporal == TemporalEncoder::kMamba) {
      l.mamba = MambaBlock::create(store, name + ".mamba", cfg.width, cfg.state, cfg.conv, rng);
    } else {
      l.attention = AttentionBlock::create(store, name + ".attn", cfg.width, rng);
    }
    l.ln_gain = store.add(name + ".ln.g", Tensor({cfg.width}, 1.0));
    l.ln_bias = store.add(name + ".ln.b", Tensor({cfg.width}, 0.0));
    l.residual_input = cfg.residual_input;
    return l;
  }
};

/// LayerNorm(X + GCN(X, A) + Temporal(X)); the input skip is dropped when
/// residual_input is false.
inline ad::Var sted_layer(const ad::Var& x, const Tensor& a_hat, const StedLayer& layer) {
  ad::Var spatial = gcn_forward(x, a_hat, layer.gcn);
  ad::Var temporal = layer.temporal == TemporalEncoder::kMamba
                         ? mamba_forward(x, layer.mamba)
                         : attention_baseline_forward(x, layer.attention);
  ad::Var sum = ad::add(spatial, temporal);
  if (layer.residual_input) sum = ad::add(sum, x);
  return ad::layer_norm(sum, layer.ln_gain, layer.ln_bias);
}

inline ad::Var sted_forward(const ad::Var& x, const Tensor& a_hat, const std::vector<StedLayer>& layers) {
  ad::Var h = x;
  for (const StedLayer& l : layers) h = sted_layer(h, a_hat, l);
  return h;
}

/// Per-node map from the flattened [T * d] history to [S_out * d_out].
struct Decoder {
  Mlp2 mlp;
  std::size_t in_steps = 0;
  std::size_t out_steps = 0;
  std::size_t out_channels = 0;

  static Decoder create(ad::ParamStore& store, const std::string& name, std::size_t in_steps,
                        std::size_t width, std::size_t out_steps, std::size_t out_channels, Rng& rng) {
    return {Mlp2::create(store, name, in_steps * width, 2 * in_steps * width,
                         out_steps * out_channels, rng),
            in_steps, out_steps, out_channels};
  }
};

/// [B, T, N, d] -> [B, S_out, N, d_out]
inline ad::Var decode(const ad::Var& encoded, const Decoder& dec) {
  const Shape& s = encoded.shape();
  if (s.size() != 4 || s[1] != dec.in_steps) {
    throw ShapeError("decode: decoder built for " + std::to_string(dec.in_steps) +
                     " input steps, got " + to_string(s));
  }
  const std::size_t b = s[0], t = s[1], n = s[2], d = s[3];
  ad::Var flat = ad::reshape(ad::permute(encoded, {0, 2, 1, 3}), {b, n, t * d});
  ad::Var out = dec.mlp(flat);
  return ad::permute(ad::reshape(out, {b, n, dec.out_steps, dec.out_channels}), {0, 2, 1, 3});
}

/// Encoder stack plus decoder: the predictor f(X, A).
struct Sted {
  StedConfig config;
  std::vector<StedLayer> layers;
  Decoder decoder;

  static Sted create(ad::ParamStore& store, const std::string& name, const StedConfig& cfg, Rng& rng) {
    if (cfg.layers == 0) throw ValueError("STED needs at least one layer");
    Sted s;
    s.config = cfg;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      s.layers.push_back(StedLayer::create(store, name + ".layer" + std::to_string(l), cfg, rng));
    }
    s.decoder = Decoder::create(store, name + ".dec", cfg.in_steps, cfg.width, cfg.out_steps,
                                cfg.out_channels, rng);
    return s;
  }

  /// x [B, T, N, d] -> prediction [B, S_out, N, d_out]
  ad::Var forward(const ad::Var& x, const Tensor& a_hat) const {
    return decode(sted_forward(x, a_hat, layers), decoder);
  }
};

}  // namespace cstp
