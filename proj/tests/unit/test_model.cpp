#include "cstp/model.hpp"
#include "cstp/pipeline.hpp"
#include "test_util.hpp"

namespace cstp {
namespace {

using testing::random_tensor;

ModelConfig tiny_config(ModelMode mode = ModelMode::kFull) {
  ModelConfig c;
  c.width = 4;
  c.heads = 2;
  c.layers = 1;
  c.state = 2;
  c.conv = 2;
  c.in_steps = 3;
  c.out_steps = 2;
  c.text_buckets = 8;
  c.text_width = 3;
  c.image_c1 = 2;
  c.image_c2 = 3;
  c.image_width = 3;
  c.latent_width = 2;
  c.head_hidden = 3;
  c.mode = mode;
  return c;
}

/// B=1, T=3, N=2, c=1 with one text slot and two 3x3 images.
ModelInputs tiny_inputs(Rng& rng) {
  ModelInputs in;
  in.x = random_tensor({1, 3, 2, 1}, rng);
  in.text_counts = Tensor({1, 3, 8});
  in.text_counts.at(0, 1, 3) = 2.0;
  in.text_counts.at(0, 1, 5) = 1.0;
  in.text_obs = Tensor({1, 3, 1});
  in.text_obs.at(0, 1, 0) = 1.0;
  in.image_pixels = random_tensor({2, 3, 3, 1}, rng, 0.0, 1.0);
  in.image_cells = {1, 4};
  in.image_obs = Tensor({6, 1});
  in.image_obs[1] = in.image_obs[4] = 1.0;
  return in;
}

Tensor ring_adjacency() { return normalized_adjacency(Tensor({2, 2}, {0.0, 1.0, 1.0, 0.0})); }

TEST(DualBranchModel, OutputShapes) {
  Rng rng(1);
  const auto m = DualBranchModel::create(tiny_config(), 2, 1, 1, 5);
  const ModelOutputs out = m.forward(tiny_inputs(rng), ring_adjacency());
  EXPECT_EQ(out.final_pred.shape(), (Shape{1, 2, 2, 1}));
  EXPECT_EQ(out.st_pred.shape(), (Shape{1, 2, 2, 1}));
  EXPECT_EQ(out.mm_pred.shape(), (Shape{1, 2, 2, 1}));
  EXPECT_EQ(out.fused.shape(), (Shape{1, 3, 2, 12}));
  EXPECT_EQ(out.penalty.size(), 1u);
}

TEST(DualBranchModel, SameSeedSameParameters) {
  const auto a = DualBranchModel::create(tiny_config(), 2, 1, 1, 5);
  const auto b = DualBranchModel::create(tiny_config(), 2, 1, 1, 5);
  const auto c = DualBranchModel::create(tiny_config(), 2, 1, 1, 6);
  auto ib = b.store.begin();
  bool any_diff = false;
  auto ic = c.store.begin();
  for (const auto& [name, v] : a.store) {
    EXPECT_EQ(name, ib->first);
    EXPECT_EQ(v.value(), ib->second.value()) << name;
    any_diff |= !(v.value() == ic->second.value());
    ++ib, ++ic;
  }
  EXPECT_TRUE(any_diff);
}

TEST(DualBranchModel, MainOnlyHasNoModalityParameters) {
  Rng rng(2);
  const auto m = DualBranchModel::create(tiny_config(ModelMode::kMainOnly), 2, 1, 1, 5);
  for (const auto& [name, v] : m.store) EXPECT_EQ(name.rfind("st.", 0), 0u) << name;
  const ModelOutputs out = m.forward(tiny_inputs(rng), ring_adjacency());
  EXPECT_EQ(out.final_pred.value(), out.st_pred.value());
  EXPECT_FALSE(out.mm_pred.defined());
}

TEST(DualBranchModel, MainBranchIgnoresModalities) {
  Rng rng(3);
  const auto m = DualBranchModel::create(tiny_config(), 2, 1, 1, 5);
  ModelInputs in = tiny_inputs(rng);
  const Tensor before = m.forward(in, ring_adjacency()).st_pred.value();
  in.text_counts.at(0, 2, 0) = 7.0;
  in.image_pixels = random_tensor({2, 3, 3, 1}, rng, 0.0, 1.0);
  EXPECT_EQ(m.forward(in, ring_adjacency()).st_pred.value(), before);
}

TEST(DualBranchModel, ZeroAlphasMatchNoIntervention) {
  Rng rng(4);
  auto m = DualBranchModel::create(tiny_config(), 2, 1, 1, 5);
  for (const char* name : {"iv.alpha_s", "iv.alpha_e", "iv.alpha_c"}) m.store.set(name, Tensor::scalar(0.0));
  const ModelInputs in = tiny_inputs(rng);
  const Tensor a_hat = ring_adjacency();
  const ModelOutputs out = m.forward(in, a_hat);
  ad::NoGradGuard guard;
  const Tensor direct = m.sted_mm.forward(m.entry_mm(m.fusion(in).fused), a_hat).value();
  EXPECT_EQ(out.mm_pred.value(), direct);
}

TEST(DualBranchModel, TextAlignmentEqualsPerObservationEncoding) {
  // Two observations sharing a slot: sum of encoder outputs, bias counted twice.
  Rng rng(5);
  const auto m = DualBranchModel::create(tiny_config(), 2, 1, 1, 5);
  ModelInputs in = tiny_inputs(rng);
  const std::vector<std::string> first{"road", "closure"}, second{"rain"};
  const auto c1 = bag_of_tokens(first, 8), c2 = bag_of_tokens(second, 8);
  in.text_counts = Tensor({1, 3, 8});
  for (std::size_t k = 0; k < 8; ++k) in.text_counts.at(0, 2, k) = c1[k] + c2[k];
  in.text_obs = Tensor({1, 3, 1});
  in.text_obs.at(0, 2, 0) = 2.0;
  const Tensor e1 = m.text_encoder.encode(first), e2 = m.text_encoder.encode(second);
  ad::NoGradGuard guard;
  const Linear& tp = m.text_encoder.proj;
  const ad::Var text = ad::add(ad::matmul(ad::constant(in.text_counts), tp.weight),
                               ad::matmul(ad::constant(in.text_obs), ad::reshape(tp.bias, {1, 3})));
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(text.value().at(0, 2, c), e1[c] + e2[c], 1e-14);
    EXPECT_EQ(text.value().at(0, 0, c), 0.0);
  }
}

TEST(DualBranchModel, SensitivityMatchesPenaltyStructure) {
  Rng rng(6);
  auto m = DualBranchModel::create(tiny_config(), 2, 1, 1, 5);
  const ModelInputs in = tiny_inputs(rng);
  EXPECT_GT(m.confounder_sensitivity(in), 0.0);
  m.store.set("iv.alpha_s", Tensor::scalar(0.0));
  EXPECT_EQ(m.confounder_sensitivity(in), 0.0);
  EXPECT_EQ(m.forward(in, ring_adjacency()).penalty.value()[0], 0.0);
  const auto plain = DualBranchModel::create(tiny_config(ModelMode::kNoIntervention), 2, 1, 1, 5);
  EXPECT_EQ(plain.confounder_sensitivity(in), 0.0);
}

class ModelGradient : public ::testing::TestWithParam<ModelMode> {};

TEST_P(ModelGradient, FullLossMatchesFiniteDifferences) {
  Rng rng(7);
  auto m = DualBranchModel::create(tiny_config(GetParam()), 2, 1, 1, 5);
  testing::randomize_params(m.store, rng, -0.8, 0.8);
  const ModelInputs in = tiny_inputs(rng);
  const Tensor target = random_tensor({1, 2, 2, 1}, rng);
  const Tensor a_hat = ring_adjacency();
  const LossWeights w{0.3, 0.7};
  auto f = [&](const ad::ParamStore&) {
    const ModelOutputs out = m.forward(in, a_hat);
    if (!m.multimodal()) return prediction_loss(ad::constant(target), out.final_pred, LossNorm::kMse);
    return compute_losses(ad::constant(target), out.final_pred, out.st_pred, out.mm_pred, w, out.penalty).all;
  };
  // Roundoff in the differenced loss is ~1e-10 here; entries below 1e-5 are noise-dominated.
  const auto report = ad::finite_diff_check(f, m.store, 1e-5, 1e-5);
  EXPECT_LT(report.max_rel_error, 1e-4) << report.worst_param << "[" << report.worst_index
                                        << "] analytic=" << report.analytic << " numeric=" << report.numeric;
  EXPECT_EQ(report.checked, m.store.scalar_count());
}

INSTANTIATE_TEST_SUITE_P(Modes, ModelGradient,
                         ::testing::Values(ModelMode::kFull, ModelMode::kMainOnly, ModelMode::kNoIntervention),
                         [](const auto& info) { return to_string(info.param); });

TEST(ModelConfig, KvRoundTrip) {
  ModelConfig c = tiny_config(ModelMode::kNoIntervention);
  c.temporal = TemporalEncoder::kAttention;
  c.axis = AttentionAxis::kTime;
  c.alpha_init = 0.0625;
  KvConfig kv;
  c.write_kv(kv);
  const ModelConfig back = ModelConfig::from_kv(KvConfig::parse_string(kv.to_string()));
  EXPECT_EQ(back.width, c.width);
  EXPECT_EQ(back.text_buckets, c.text_buckets);
  EXPECT_EQ(back.temporal, TemporalEncoder::kAttention);
  EXPECT_EQ(back.axis, AttentionAxis::kTime);
  EXPECT_EQ(back.mode, ModelMode::kNoIntervention);
  EXPECT_EQ(back.alpha_init, 0.0625);
  EXPECT_THROW(ModelConfig::from_kv(KvConfig::parse_string("width = 6\nheads = 4\n")), ConfigError);
  EXPECT_THROW(ModelConfig::from_kv(KvConfig::parse_string("mode = both\n")), ConfigError);
}

}  // namespace
}  // namespace cstp
