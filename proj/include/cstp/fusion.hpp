#pragma once

#include <cmath>
#include <string>
#include <tuple>

#include "cstp/autodiff.hpp"
#include "cstp/layers.hpp"
#include "cstp/ops.hpp"

namespace cstp {

/// Three independent affine maps into the shared width d.
struct ModalityProjections {
  Linear st;
  Linear text;
  Linear img;

  static ModalityProjections create(ad::ParamStore& store, const std::string& name,
                                    std::size_t d_st, std::size_t d_text, std::size_t d_img,
                                    std::size_t d, Rng& rng) {
    return {Linear::create(store, name + ".st", d_st, d, rng),
            Linear::create(store, name + ".text", d_text, d, rng),
            Linear::create(store, name + ".img", d_img, d, rng)};
  }
};

struct Projected {
  ad::Var st;
  ad::Var text;
  ad::Var img;
};

inline Projected project(const ad::Var& f_st, const ad::Var& f_text, const ad::Var& f_img,
                         const ModalityProjections& proj) {
  return {proj.st(f_st), proj.text(f_text), proj.img(f_img)};
}

/// Which axis the cross-modal queries attend over.
enum class AttentionAxis { kNode, kTime };

struct CmaParams {
  Linear query;
  Linear key;  // no bias: a key offset shifts each score row uniformly and cancels in softmax
  Linear value;
  Linear output;
  std::size_t heads = 4;

  static CmaParams create(ad::ParamStore& store, const std::string& name, std::size_t d,
                          std::size_t heads, Rng& rng) {
    if (heads == 0 || d % heads != 0) {
      throw ValueError("cross-modal attention: head count " + std::to_string(heads) +
                       " must divide width " + std::to_string(d));
    }
    return {Linear::create(store, name + ".q", d, d, rng), Linear::create_unbiased(store, name + ".k", d, d, rng),
            Linear::create(store, name + ".v", d, d, rng), Linear::create(store, name + ".o", d, d, rng),
            heads};
  }

  std::size_t width() const { return query.in_features(); }
};

struct CmaResult {
  ad::Var out;     // same shape as the query features
  Tensor weights;  // [groups, heads, L, L]; each row sums to one
};

namespace detail {

/// Multi-head scaled dot-product attention where q and kv are [G, L, d] and
/// each group attends only within itself.
inline CmaResult grouped_attention(const ad::Var& q_feats, const ad::Var& kv_feats,
                                   const CmaParams& p) {
  const std::size_t g = q_feats.shape()[0], len = q_feats.shape()[1], d = q_feats.shape()[2];
  const std::size_t h = p.heads, dk = d / h;
  auto split = [&](const ad::Var& x) {
    return ad::reshape(ad::permute(ad::reshape(x, {g, len, h, dk}), {0, 2, 1, 3}), {g * h, len, dk});
  };
  ad::Var q = split(p.query(q_feats));
  ad::Var k = split(p.key(kv_feats));
  ad::Var v = split(p.value(kv_feats));
  ad::Var scores = ad::scale(ad::bmm(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(dk)));
  ad::Var attn = ad::softmax_rows(scores);
  ad::Var ctx = ad::bmm(attn, v);
  ad::Var merged = ad::reshape(ad::permute(ad::reshape(ctx, {g, h, len, dk}), {0, 2, 1, 3}), {g, len, d});
  return {p.output(merged), attn.value().reshaped({g, h, len, len})};
}

}  // namespace detail

/// Cross-modal attention from query features to key/value features, both
/// [..., T, N, d]. With kNode each time step attends over its N nodes; with
/// kTime each node attends over the T steps.
inline CmaResult cma(const ad::Var& query_feats, const ad::Var& kv_feats, const CmaParams& params,
                     AttentionAxis axis = AttentionAxis::kNode) {
  const Shape& s = query_feats.shape();
  if (s != kv_feats.shape()) {
    throw ShapeError("cma: query " + to_string(s) + " and key/value " + to_string(kv_feats.shape()) +
                     " shapes differ");
  }
  if (s.size() < 3 || s.back() != params.width()) {
    throw ShapeError("cma: expected [..., T, N, " + std::to_string(params.width()) + "], got " +
                     to_string(s));
  }
  const std::size_t d = s.back(), nodes = s[s.size() - 2], steps = s[s.size() - 3];
  const std::size_t batch = numel(s) / (steps * nodes * d);
  if (axis == AttentionAxis::kNode) {
    auto flat = [&](const ad::Var& x) { return ad::reshape(x, {batch * steps, nodes, d}); };
    CmaResult r = detail::grouped_attention(flat(query_feats), flat(kv_feats), params);
    r.out = ad::reshape(r.out, s);
    return r;
  }
  auto by_node = [&](const ad::Var& x) {
    return ad::reshape(ad::permute(ad::reshape(x, {batch, steps, nodes, d}), {0, 2, 1, 3}),
                       {batch * nodes, steps, d});
  };
  CmaResult r = detail::grouped_attention(by_node(query_feats), by_node(kv_feats), params);
  r.out = ad::reshape(ad::permute(ad::reshape(r.out, {batch, nodes, steps, d}), {0, 2, 1, 3}), s);
  return r;
}

/// Per-feature gate logistic(concat W + b), in (0, 1).
inline ad::Var fusion_gate(const ad::Var& concat, const Linear& gate) {
  if (concat.shape().back() != gate.in_features()) {
    throw ShapeError("fusion_gate: expected width " + std::to_string(gate.in_features()) + ", got " +
                     to_string(concat.shape()));
  }
  return ad::sigmoid(gate(concat));
}

/// [F_st, Attn_text, Attn_img] multiplied elementwise by its own gate.
inline ad::Var fuse(const ad::Var& f_st, const ad::Var& attn_text, const ad::Var& attn_img,
                    const Linear& gate) {
  if (f_st.shape() != attn_text.shape() || f_st.shape() != attn_img.shape()) {
    throw ShapeError("fuse: inputs must share shape, got " + to_string(f_st.shape()) + ", " +
                     to_string(attn_text.shape()) + ", " + to_string(attn_img.shape()));
  }
  ad::Var concat = ad::concat_last({f_st, attn_text, attn_img});
  return ad::mul(concat, fusion_gate(concat, gate));
}

}  // namespace cstp
