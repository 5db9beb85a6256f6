#pragma once

// Every exported differentiable op with input shapes for the central-difference oracle.

#include <functional>
#include <vector>

#include "cstp/layers.hpp"
#include "helpers.hpp"

namespace cstp::testing {

using ad::Var;

struct OpCase {
  const char* name;
  std::vector<Shape> inputs;
  std::function<Var(const std::vector<Var>&)> fn;
  double lo = -1.0;
  double hi = 1.0;
};

// Values offset away from relu's kink and kept positive for sqrt.
inline const std::vector<OpCase>& op_cases() {
  static const std::vector<OpCase> cases = {
    {"add", {{2, 3}, {2, 3}}, [](const auto& v) { return ad::add(v[0], v[1]); }},
    {"sub", {{2, 3}, {2, 3}}, [](const auto& v) { return ad::sub(v[0], v[1]); }},
    {"mul", {{2, 3}, {2, 3}}, [](const auto& v) { return ad::mul(v[0], v[1]); }},
    {"add_bcast", {{2, 3, 4}, {3, 4}}, [](const auto& v) { return ad::add_bcast(v[0], v[1]); }},
    {"mul_bcast", {{2, 3, 4}, {4}}, [](const auto& v) { return ad::mul_bcast(v[0], v[1]); }},
    {"scale", {{3, 2}}, [](const auto& v) { return ad::scale(v[0], -2.5); }},
    {"add_scalar", {{3}}, [](const auto& v) { return ad::add_scalar(v[0], 0.7); }},
    {"mul_scalar", {{2, 3}, {1}}, [](const auto& v) { return ad::mul_scalar(v[0], v[1]); }},
    {"relu", {{4, 5}}, [](const auto& v) { return ad::relu(v[0]); }, 0.1, 1.0},
    {"relu_negative", {{4, 5}}, [](const auto& v) { return ad::relu(v[0]); }, -1.0, -0.1},
    {"sigmoid", {{4, 5}}, [](const auto& v) { return ad::sigmoid(v[0]); }, -4.0, 4.0},
    {"tanh", {{4, 5}}, [](const auto& v) { return ad::tanh(v[0]); }, -2.0, 2.0},
    {"silu", {{4, 5}}, [](const auto& v) { return ad::silu(v[0]); }, -3.0, 3.0},
    {"softplus", {{4, 5}}, [](const auto& v) { return ad::softplus(v[0]); }, -3.0, 3.0},
    {"exp", {{4, 5}}, [](const auto& v) { return ad::exp(v[0]); }},
    {"square", {{4, 5}}, [](const auto& v) { return ad::square(v[0]); }},
    {"sqrt", {{4, 5}}, [](const auto& v) { return ad::sqrt(v[0]); }, 0.5, 2.0},
    {"sum", {{3, 4}}, [](const auto& v) { return ad::sum(v[0]); }},
    {"mean", {{3, 4}}, [](const auto& v) { return ad::mean(v[0]); }},
    {"sum_last", {{3, 4}}, [](const auto& v) { return ad::sum_last(v[0]); }},
    {"mse", {{3, 4}, {3, 4}}, [](const auto& v) { return ad::mse(v[0], v[1]); }},
    {"reshape", {{2, 6}}, [](const auto& v) { return ad::reshape(v[0], {3, 4}); }},
    {"permute", {{2, 3, 4}}, [](const auto& v) { return ad::permute(v[0], {2, 0, 1}); }},
    {"gather", {{2, 3}},
     [](const auto& v) { return ad::gather(v[0], {5, 0, -1, 0, 3, 2}, {3, 2}); }},
    {"segment_sum_rows", {{4, 3}},
     [](const auto& v) { return ad::segment_sum_rows(v[0], {2, 0, 2, 1}, 3); }},
    {"repeat_before_last", {{2, 3}}, [](const auto& v) { return ad::repeat_before_last(v[0], 4); }},
    {"concat_last", {{2, 3}, {2, 1}, {2, 2}},
     [](const auto& v) { return ad::concat_last({v[0], v[1], v[2]}); }},
    {"slice_last", {{2, 5}}, [](const auto& v) { return ad::slice_last(v[0], 1, 4); }},
    {"matmul", {{2, 3, 4}, {4, 5}}, [](const auto& v) { return ad::matmul(v[0], v[1]); }},
    {"linear", {{3, 4}, {4, 2}, {2}}, [](const auto& v) { return ad::linear(v[0], v[1], v[2]); }},
    {"bmm", {{2, 3, 4}, {2, 4, 5}}, [](const auto& v) { return ad::bmm(v[0], v[1]); }},
    {"bmm_transposed", {{2, 3, 4}, {2, 5, 4}}, [](const auto& v) { return ad::bmm(v[0], v[1], true); }},
    {"mix_rows", {{2, 3, 4}},
     [](const auto& v) {
       return ad::mix_rows(Tensor::matrix({{0.5, 0.2, 0.0}, {0.1, 0.7, 0.3}, {0.0, 0.4, 0.9}}), v[0]);
     }},
    {"softmax_rows", {{3, 5}}, [](const auto& v) { return ad::softmax_rows(v[0]); }, -3.0, 3.0},
    {"layer_norm", {{3, 6}, {6}, {6}}, [](const auto& v) { return ad::layer_norm(v[0], v[1], v[2]); }},
    {"depthwise_conv1d", {{2, 6, 3}, {4, 3}}, [](const auto& v) { return ad::depthwise_conv1d(v[0], v[1]); }},
    {"selective_scan",
     {{2, 5, 3}, {2, 5, 3}, {3, 4}, {2, 5, 4}, {2, 5, 4}, {3}},
     [](const auto& v) {
       // delta kept positive and a_diag negative, as in the model.
       return ad::selective_scan(v[0], ad::softplus(v[1]), ad::scale(ad::exp(v[2]), -1.0), v[3], v[4], v[5]);
     }},
  };
  return cases;
}

/// Gradient check of one op at random inputs drawn from [lo, hi].
inline ad::GradCheckReport check_op(const OpCase& oc, std::uint64_t seed = 11) {
  ad::ParamStore store;
  Rng rng(seed);
  std::vector<Var> vars;
  for (std::size_t i = 0; i < oc.inputs.size(); ++i) {
    vars.push_back(store.add("in" + std::to_string(i), random_tensor(oc.inputs[i], rng, oc.lo, oc.hi)));
  }
  return ad::finite_diff_check([&](const ad::ParamStore&) { return probe_loss(oc.fn(vars)); }, store);
}

}  // namespace cstp::testing
