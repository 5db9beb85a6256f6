#pragma once

#include <cmath>
#include <string>

#include "cstp/autodiff.hpp"
#include "cstp/layers.hpp"
#include "cstp/ops.hpp"

namespace cstp {

/// Parameters of x_hat = x + x * W [a1 h(S) + a2 p(E) + a3 q(C)].
struct InterventionParams {
  ad::Var weight;   // W, [3d]
  ad::Var alpha_s;  // a1, [1]
  ad::Var alpha_e;  // a2, [1]
  ad::Var alpha_c;  // a3, [1]
  Mlp2 h;           // d_s -> 6d -> 3d (tanh)
  Mlp2 p;           // d   -> 6d -> 3d (tanh)
  Mlp2 q;           // d   -> 6d -> 3d (tanh)
  ad::Var latent;   // S_latent, [N, d_s]

  static InterventionParams create(ad::ParamStore& store, const std::string& name, std::size_t d,
                                   std::size_t nodes, std::size_t latent_width, Rng& rng,
                                   double alpha_init = 0.1) {
    const std::size_t fused = 3 * d, hidden = 2 * fused;
    InterventionParams ip;
    ip.weight = store.add(name + ".W", Tensor({fused}, 1.0));
    ip.alpha_s = store.add(name + ".alpha_s", Tensor::scalar(alpha_init));
    ip.alpha_e = store.add(name + ".alpha_e", Tensor::scalar(alpha_init));
    ip.alpha_c = store.add(name + ".alpha_c", Tensor::scalar(alpha_init));
    ip.h = Mlp2::create(store, name + ".h", latent_width, hidden, fused, rng, Activation::kTanh);
    ip.p = Mlp2::create(store, name + ".p", d, hidden, fused, rng, Activation::kTanh);
    ip.q = Mlp2::create(store, name + ".q", d, hidden, fused, rng, Activation::kTanh);
    Tensor s({nodes, latent_width});
    for (double& v : s.data()) v = rng.normal();
    ip.latent = store.add(name + ".S", std::move(s));
    return ip;
  }

  std::size_t fused_width() const { return weight.size(); }
  std::size_t latent_width() const { return latent.shape()[1]; }
};

/// Applies the intervention at every (batch, time, node) position.
/// fused [..., N, 3d]; e, c [..., N, d]; S_latent broadcasts over leading axes.
inline ad::Var intervene(const ad::Var& fused, const ad::Var& e, const ad::Var& c,
                         const InterventionParams& ip) {
  const Shape& s = fused.shape();
  if (s.back() != ip.fused_width()) {
    throw ShapeError("intervene: fused width " + std::to_string(s.back()) + " does not match W of width " +
                     std::to_string(ip.fused_width()));
  }
  if (e.shape() != c.shape() || e.shape().size() != s.size() ||
      !std::equal(s.begin(), s.end() - 1, e.shape().begin())) {
    throw ShapeError("intervene: E/C shapes " + to_string(e.shape()) + ", " + to_string(c.shape()) +
                     " do not match fused " + to_string(s));
  }
  ad::Var term_s = ad::mul_scalar(ip.h(ip.latent), ip.alpha_s);
  ad::Var term_e = ad::mul_scalar(ip.p(e), ip.alpha_e);
  ad::Var term_c = ad::mul_scalar(ip.q(c), ip.alpha_c);
  ad::Var mix = ad::add_bcast(ad::add(term_e, term_c), term_s);
  return ad::add(fused, ad::mul(fused, ad::mul_bcast(mix, ip.weight)));
}

namespace detail {

/// dh/dS per node as a differentiable [N, d_s, 3d] tensor.
inline ad::Var latent_jacobian(const InterventionParams& ip) {
  if (ip.h.activation != Activation::kTanh) {
    throw ValueError("confounder Jacobian assumes a tanh hidden layer in h");
  }
  const std::size_t nodes = ip.latent.shape()[0];
  const std::size_t ds = ip.latent_width();
  const std::size_t hid = ip.h.first.out_features();
  ad::Var act = ad::tanh(ip.h.first(ip.latent));                         // [N, hid]
  ad::Var slope = ad::add_scalar(ad::scale(ad::square(act), -1.0), 1.0);  // 1 - tanh^2
  std::vector<long> idx(nodes * ds * hid);
  for (std::size_t n = 0; n < nodes; ++n)
    for (std::size_t m = 0; m < ds; ++m)
      for (std::size_t j = 0; j < hid; ++j) idx[(n * ds + m) * hid + j] = static_cast<long>(m * hid + j);
  ad::Var w1 = ad::gather(ip.h.first.weight, std::move(idx), {nodes, ds, hid});
  ad::Var scaled = ad::mul(w1, ad::repeat_before_last(slope, ds));  // [N, d_s, hid]
  return ad::matmul(scaled, ip.h.second.weight);                    // [N, d_s, 3d]
}

}  // namespace detail

/// Mean of squared entries of d x_hat / d S over every (position, feature,
/// latent) triple. Since S enters only through h, each entry is
/// x_k W_k a1 dh_k/dS_m, evaluated exactly.
inline ad::Var confounder_penalty(const ad::Var& fused, const InterventionParams& ip) {
  const std::size_t ds = ip.latent_width();
  ad::Var jac = detail::latent_jacobian(ip);                                    // [N, d_s, 3d]
  ad::Var jac_sq = ad::sum_last(ad::square(ad::permute(jac, {0, 2, 1})));      // [N, 3d]
  ad::Var xw_sq = ad::square(ad::mul_bcast(fused, ip.weight));                  // [..., N, 3d]
  ad::Var per_entry = ad::scale(ad::mean(ad::mul_bcast(xw_sq, jac_sq)), 1.0 / static_cast<double>(ds));
  return ad::mul_scalar(per_entry, ad::square(ip.alpha_s));
}

/// Full d x_hat / d S as [..., N, 3d, d_s], without graph recording.
inline Tensor confounder_jacobian(const Tensor& fused, const InterventionParams& ip) {
  ad::NoGradGuard guard;
  const Tensor jac = detail::latent_jacobian(ip).value();  // [N, d_s, 3d]
  const std::size_t nodes = jac.dim(0), ds = jac.dim(1), width = jac.dim(2);
  const double a1 = ip.alpha_s.value()[0];
  Shape shape = fused.shape();
  shape.push_back(ds);
  Tensor out(shape);
  const std::size_t positions = fused.size() / (nodes * width);
  for (std::size_t p = 0; p < positions; ++p)
    for (std::size_t n = 0; n < nodes; ++n)
      for (std::size_t k = 0; k < width; ++k) {
        const double coef = fused[(p * nodes + n) * width + k] * ip.weight.value()[k] * a1;
        for (std::size_t m = 0; m < ds; ++m)
          out[((p * nodes + n) * width + k) * ds + m] = coef * jac[(n * ds + m) * width + k];
      }
  return out;
}

/// mean |d x_hat / d S| over all entries.
inline double mean_abs_confounder_gradient(const Tensor& fused, const InterventionParams& ip) {
  const Tensor j = confounder_jacobian(fused, ip);
  double acc = 0.0;
  for (double v : j.data()) acc += std::abs(v);
  return acc / static_cast<double>(j.size());
}

// ---------------------------------------------------------------------------
// Dual-branch combination and losses

/// Two-layer perceptron over the concatenated branch predictions.
struct BranchHeads {
  Mlp2 mlp;

  static BranchHeads create(ad::ParamStore& store, const std::string& name, std::size_t channels,
                            std::size_t hidden, Rng& rng) {
    return {Mlp2::create(store, name, 2 * channels, hidden, channels, rng)};
  }
};

inline ad::Var combine_branches(const ad::Var& feat_st, const ad::Var& feat_mm, const BranchHeads& heads) {
  if (feat_st.shape() != feat_mm.shape()) {
    throw ShapeError("combine_branches: branch shapes differ " + to_string(feat_st.shape()) + " vs " +
                     to_string(feat_mm.shape()));
  }
  return heads.mlp(ad::concat_last({feat_st, feat_mm}));
}

struct LossWeights {
  double beta = 0.5;
  double gamma = 0.1;

  void validate() const {
    if (!(beta >= 0.0 && beta <= 1.0)) throw ValueError("beta must lie in [0, 1]");
    if (!(gamma >= 0.0)) throw ValueError("gamma must be non-negative");
  }
};

enum class LossNorm { kMse, kL2 };

struct Losses {
  ad::Var pred;
  ad::Var st;
  ad::Var mm;
  ad::Var all;
};

inline ad::Var prediction_loss(const ad::Var& target, const ad::Var& pred, LossNorm norm) {
  if (target.shape() != pred.shape()) {
    throw ShapeError("loss: target " + to_string(target.shape()) + " and prediction " +
                     to_string(pred.shape()) + " differ");
  }
  ad::Var sq = ad::square(ad::sub(target, pred));
  return norm == LossNorm::kMse ? ad::mean(sq) : ad::sqrt(ad::sum(sq));
}

/// L_all = L_pred + beta L_st + (1 - beta) L_mm + gamma penalty.
inline Losses compute_losses(const ad::Var& target, const ad::Var& final_pred, const ad::Var& st_pred,
                             const ad::Var& mm_pred, const LossWeights& w, const ad::Var& penalty,
                             LossNorm norm = LossNorm::kMse) {
  w.validate();
  Losses l;
  l.pred = prediction_loss(target, final_pred, norm);
  l.st = prediction_loss(target, st_pred, norm);
  l.mm = prediction_loss(target, mm_pred, norm);
  l.all = ad::add(ad::add(l.pred, ad::scale(l.st, w.beta)), ad::scale(l.mm, 1.0 - w.beta));
  if (w.gamma != 0.0) l.all = ad::add(l.all, ad::scale(penalty, w.gamma));
  return l;
}

}  // namespace cstp
