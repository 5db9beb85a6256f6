#pragma once

#include <cmath>
#include <string>

#include "cstp/autodiff.hpp"
#include "cstp/ops.hpp"
#include "cstp/rng.hpp"

namespace cstp {

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
inline Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

/// Affine map x W + b, or x W when created without a bias.
struct Linear {
  ad::Var weight;  // [in, out]
  ad::Var bias;    // [out]; undefined for bias-free maps

  static Linear create(ad::ParamStore& store, const std::string& name, std::size_t in,
                       std::size_t out, Rng& rng) {
    return {store.add(name + ".w", init_uniform({in, out}, in, rng)),
            store.add(name + ".b", init_uniform({out}, in, rng))};
  }

  static Linear create_unbiased(ad::ParamStore& store, const std::string& name, std::size_t in,
                                std::size_t out, Rng& rng) {
    return {store.add(name + ".w", init_uniform({in, out}, in, rng)), ad::Var()};
  }

  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }

  ad::Var operator()(const ad::Var& x) const {
    return bias.defined() ? ad::linear(x, weight, bias) : ad::matmul(x, weight);
  }
};

enum class Activation { kRelu, kTanh };

inline ad::Var activate(const ad::Var& x, Activation act) {
  return act == Activation::kRelu ? ad::relu(x) : ad::tanh(x);
}

/// Two affine layers with a nonlinearity in between.
struct Mlp2 {
  Linear first;
  Linear second;
  Activation activation = Activation::kRelu;

  static Mlp2 create(ad::ParamStore& store, const std::string& name, std::size_t in,
                     std::size_t hidden, std::size_t out, Rng& rng,
                     Activation act = Activation::kRelu) {
    return {Linear::create(store, name + ".0", in, hidden, rng),
            Linear::create(store, name + ".1", hidden, out, rng), act};
  }

  ad::Var operator()(const ad::Var& x) const { return second(activate(first(x), activation)); }
};

}  // namespace cstp
