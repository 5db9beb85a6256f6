#pragma once

// Independent reference computations shared by the unit and acceptance suites.

#include <cmath>
#include <vector>

#include "cstp/backdoor.hpp"
#include "cstp/causal_graph.hpp"

namespace cstp::oracle {

/// P(Y | do(X = x), E = e, C = c) by graph surgery: build the full joint of the
/// mutilated model (the S -> X edge removed, X clamped to x) over
/// (E, C, S, X, Y), then marginalize and condition on (e, c).
inline std::vector<double> surgery_interventional(const DiscreteScm& scm, std::size_t x_do, std::size_t e_obs,
                                                  std::size_t c_obs) {
  const auto& sup = scm.supports();
  std::vector<double> joint(sup.e * sup.c * sup.s * sup.x * sup.y, 0.0);
  auto at = [&](std::size_t e, std::size_t c, std::size_t s, std::size_t x, std::size_t y) -> double& {
    return joint[(((e * sup.c + c) * sup.s + s) * sup.x + x) * sup.y + y];
  };
  for (std::size_t e = 0; e < sup.e; ++e)
    for (std::size_t c = 0; c < sup.c; ++c)
      for (std::size_t s = 0; s < sup.s; ++s)
        for (std::size_t x = 0; x < sup.x; ++x)
          for (std::size_t y = 0; y < sup.y; ++y) {
            const double px = x == x_do ? 1.0 : 0.0;
            at(e, c, s, x, y) = scm.prior_e(e) * scm.prior_c(c) * scm.p_s(s, e, c) * px * scm.p_y(y, x, s, e, c);
          }
  std::vector<double> out(sup.y, 0.0);
  double evidence = 0.0;
  for (std::size_t s = 0; s < sup.s; ++s)
    for (std::size_t x = 0; x < sup.x; ++x)
      for (std::size_t y = 0; y < sup.y; ++y) {
        out[y] += at(e_obs, c_obs, s, x, y);
        evidence += at(e_obs, c_obs, s, x, y);
      }
  for (double& v : out) v /= evidence;
  return out;
}

// Dense literal products Mt^T X Ms with explicit loops.
inline Tensor naive_image_product(const Tensor& mt, const Tensor& ms, const Tensor& feats) {
  const std::size_t kt = mt.dim(0), ts = mt.dim(1), ks = ms.dim(0), ns = ms.dim(1), w = feats.dim(2);
  Tensor out({ts, ns, w});
  for (std::size_t c = 0; c < w; ++c)
    for (std::size_t t = 0; t < ts; ++t)
      for (std::size_t n = 0; n < ns; ++n) {
        double acc = 0.0;
        for (std::size_t i = 0; i < kt; ++i)
          for (std::size_t j = 0; j < ks; ++j) acc += mt.at(i, t) * feats.at(i, j, c) * ms.at(j, n);
        out.at(t, n, c) = acc;
      }
  return out;
}

/// Text analogue: Mt^T X replicated over every node.
inline Tensor naive_text_product(const Tensor& mt, const Tensor& feats, std::size_t nodes) {
  const std::size_t kt = mt.dim(0), ts = mt.dim(1), w = feats.dim(1);
  Tensor out({ts, nodes, w});
  for (std::size_t t = 0; t < ts; ++t)
    for (std::size_t n = 0; n < nodes; ++n)
      for (std::size_t c = 0; c < w; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < kt; ++i) acc += mt.at(i, t) * feats.at(i, c);
        out.at(t, n, c) = acc;
      }
  return out;
}

/// y[b, 0, j, 0] = sum_i c[i, j] * x[b, 0, i, 0]
inline Predictor additive_model(const Tensor& c) {
  return [c](const Tensor& x) {
    const std::size_t b = x.dim(0), n = x.dim(2);
    Tensor y({b, 1, n, 1});
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < n; ++i) y.at(s, 0, j, 0) += c.at(i, j) * x.at(s, 0, i, 0);
    return y;
  };
}

/// Nonlinear toy: y_j = tanh(sum_i c_ij x_i) * (1 + x_j x_{j+1}).
inline Predictor nonlinear_model(const Tensor& c) {
  return [c](const Tensor& x) {
    const std::size_t b = x.dim(0), t = x.dim(1), n = x.dim(2);
    Tensor y({b, 2, n, 1});
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t j = 0; j < n; ++j) {
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i) z += c.at(i, j) * x.at(s, t - 1, i, 0);
        const double inter = x.at(s, 0, j, 0) * x.at(s, 0, (j + 1) % n, 0);
        y.at(s, 0, j, 0) = std::tanh(z) * (1.0 + inter);
        y.at(s, 1, j, 0) = std::tanh(z);
      }
    return y;
  };
}

}  // namespace cstp::oracle
