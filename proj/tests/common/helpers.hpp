#pragma once

// Random inputs and probe losses shared by the unit and acceptance suites.

#include "cstp/autodiff.hpp"
#include "cstp/gradcheck.hpp"
#include "cstp/ops.hpp"
#include "cstp/rng.hpp"
#include "cstp/tensor.hpp"

namespace cstp::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Redraws every parameter uniformly in [lo, hi]: a generic point for
/// gradient checks, away from initializations that make some gradients tiny.
inline void randomize_params(const ad::ParamStore& store, Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (const auto& [name, v] : store) v.node().value = random_tensor(v.shape(), rng, lo, hi);
}

/// Loss used for gradient checks: sum of output times fixed random weights,
/// so every output entry gets a distinct, O(1) upstream gradient.
inline ad::Var probe_loss(const ad::Var& out, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ad::sum(ad::mul(out, ad::constant(random_tensor(out.shape(), rng))));
}

}  // namespace cstp::testing
