#pragma once

#include <string>
#include <vector>

#include "cstp/alignment.hpp"
#include "cstp/causal_graph.hpp"
#include "cstp/fusion.hpp"
#include "cstp/intervention.hpp"
#include "cstp/kv_config.hpp"
#include "cstp/sted.hpp"

namespace cstp {

/// full: both branches with intervention. main_only: the spatio-temporal
/// branch alone. no_intervention: both branches, auxiliary branch fed the
/// raw fused features.
enum class ModelMode { kFull, kMainOnly, kNoIntervention };

inline ModelMode parse_model_mode(const std::string& s) {
  if (s == "full") return ModelMode::kFull;
  if (s == "main_only") return ModelMode::kMainOnly;
  if (s == "no_intervention") return ModelMode::kNoIntervention;
  throw ConfigError("mode must be full, main_only or no_intervention, got '" + s + "'");
}

inline std::string to_string(ModelMode m) {
  switch (m) {
    case ModelMode::kFull: return "full";
    case ModelMode::kMainOnly: return "main_only";
    case ModelMode::kNoIntervention: return "no_intervention";
  }
  return "full";
}

inline TemporalEncoder parse_temporal(const std::string& s) {
  if (s == "mamba" || s == "sted-mamba") return TemporalEncoder::kMamba;
  if (s == "attention" || s == "sted-attention") return TemporalEncoder::kAttention;
  throw ConfigError("temporal encoder must be mamba or attention, got '" + s + "'");
}

inline AttentionAxis parse_axis(const std::string& s) {
  if (s == "node") return AttentionAxis::kNode;
  if (s == "time") return AttentionAxis::kTime;
  throw ConfigError("attention_axis must be node or time, got '" + s + "'");
}

struct ModelConfig {
  std::size_t width = 32;  // d
  std::size_t heads = 4;
  std::size_t layers = 3;
  std::size_t state = 16;  // n
  std::size_t conv = 4;    // k
  std::size_t in_steps = 12;
  std::size_t out_steps = 12;
  std::size_t text_buckets = 512;
  std::size_t text_width = 32;
  std::size_t image_c1 = 8;
  std::size_t image_c2 = 16;
  std::size_t image_width = 32;
  std::size_t latent_width = 8;  // d_s
  std::size_t head_hidden = 32;
  double alpha_init = 0.1;
  TemporalEncoder temporal = TemporalEncoder::kMamba;
  AttentionAxis axis = AttentionAxis::kNode;
  bool residual_input = true;
  ModelMode mode = ModelMode::kFull;

  void validate() const {
    if (width == 0 || heads == 0 || width % heads != 0) throw ConfigError("heads must divide width");
    if (layers == 0) throw ConfigError("layers must be at least 1");
    if (state == 0 || conv == 0) throw ConfigError("state and conv must be positive");
    if (in_steps == 0 || out_steps == 0) throw ConfigError("in_steps and out_steps must be positive");
    if (text_buckets == 0 || text_width == 0 || image_width == 0 || image_c1 == 0 || image_c2 == 0) {
      throw ConfigError("encoder widths must be positive");
    }
    if (latent_width == 0 || head_hidden == 0) throw ConfigError("latent_width and head_hidden must be positive");
  }

  /// Reads the model keys of a KvConfig; other keys are left for the caller.
  static ModelConfig from_kv(const KvConfig& kv) {
    ModelConfig c;
    c.width = kv.get_size("width", c.width);
    c.heads = kv.get_size("heads", c.heads);
    c.layers = kv.get_size("layers", c.layers);
    c.state = kv.get_size("state", c.state);
    c.conv = kv.get_size("conv", c.conv);
    c.in_steps = kv.get_size("in_steps", c.in_steps);
    c.out_steps = kv.get_size("out_steps", c.out_steps);
    c.text_buckets = kv.get_size("text_buckets", c.text_buckets);
    c.text_width = kv.get_size("text_width", c.text_width);
    c.image_c1 = kv.get_size("image_c1", c.image_c1);
    c.image_c2 = kv.get_size("image_c2", c.image_c2);
    c.image_width = kv.get_size("image_width", c.image_width);
    c.latent_width = kv.get_size("latent_width", c.latent_width);
    c.head_hidden = kv.get_size("head_hidden", c.head_hidden);
    c.alpha_init = kv.get_double("alpha_init", c.alpha_init);
    c.temporal = parse_temporal(kv.get_string("temporal", "mamba"));
    c.axis = parse_axis(kv.get_string("attention_axis", "node"));
    c.residual_input = kv.get_bool("residual_input", c.residual_input);
    c.mode = parse_model_mode(kv.get_string("mode", "full"));
    c.validate();
    return c;
  }

  void write_kv(KvConfig& kv) const {
    kv.set("width", std::to_string(width));
    kv.set("heads", std::to_string(heads));
    kv.set("layers", std::to_string(layers));
    kv.set("state", std::to_string(state));
    kv.set("conv", std::to_string(conv));
    kv.set("in_steps", std::to_string(in_steps));
    kv.set("out_steps", std::to_string(out_steps));
    kv.set("text_buckets", std::to_string(text_buckets));
    kv.set("text_width", std::to_string(text_width));
    kv.set("image_c1", std::to_string(image_c1));
    kv.set("image_c2", std::to_string(image_c2));
    kv.set("image_width", std::to_string(image_width));
    kv.set("latent_width", std::to_string(latent_width));
    kv.set("head_hidden", std::to_string(head_hidden));
    kv.set("alpha_init", format_double(alpha_init));
    kv.set("temporal", temporal == TemporalEncoder::kMamba ? "mamba" : "attention");
    kv.set("attention_axis", axis == AttentionAxis::kNode ? "node" : "time");
    kv.set("residual_input", residual_input ? "true" : "false");
    kv.set("mode", to_string(mode));
  }

  StedConfig sted(std::size_t channels) const {
    StedConfig s;
    s.layers = layers;
    s.width = width;
    s.state = state;
    s.conv = conv;
    s.in_steps = in_steps;
    s.out_steps = out_steps;
    s.out_channels = channels;
    s.residual_input = residual_input;
    s.temporal = temporal;
    return s;
  }
};

/// One batch of model inputs. Text and image features enter through their
/// alignment: per-cell sums of encoded observations plus the cell's
/// observation count (which carries the encoders' bias terms).
struct ModelInputs {
  Tensor x;                         // [B, T, N, c], normalized series
  Tensor text_counts;               // [B, T, buckets], token counts summed per slot
  Tensor text_obs;                  // [B, T, 1], observations per slot
  Tensor image_pixels;              // [M, H, W, ch]; M may be zero
  std::vector<long> image_cells;    // flat (b, t, n) cell of each image
  Tensor image_obs;                 // [B * T * N, 1], images per cell

  std::size_t batch() const { return x.dim(0); }
};

struct ModelOutputs {
  ad::Var final_pred;  // [B, S, N, c]
  ad::Var st_pred;
  ad::Var mm_pred;     // undefined in main_only mode
  ad::Var fused;       // [B, T, N, 3d], before intervention
  ad::Var penalty;     // scalar, zero unless full mode
};

/// The dual-branch predictor with every learnable piece in one ParamStore.
struct DualBranchModel {
  ModelConfig config;
  std::size_t nodes = 0;
  std::size_t channels = 0;
  std::size_t image_channels = 1;
  ad::ParamStore store;

  Linear entry_st;  // c -> d, main branch
  Sted sted_st;
  TextEncoder text_encoder;
  ImageEncoder image_encoder;
  ModalityProjections projections;
  CmaParams cma_text;
  CmaParams cma_image;
  Linear gate;      // 3d -> 3d
  InterventionParams intervention;
  Linear entry_mm;  // 3d -> d, auxiliary branch
  Sted sted_mm;
  BranchHeads heads;

  static DualBranchModel create(const ModelConfig& cfg, std::size_t nodes, std::size_t channels,
                                std::size_t image_channels, std::uint64_t seed) {
    cfg.validate();
    DualBranchModel m;
    m.config = cfg;
    m.nodes = nodes;
    m.channels = channels;
    m.image_channels = image_channels;
    Rng rng(derive_seed(seed, 100));
    const std::size_t d = cfg.width;
    m.entry_st = Linear::create(m.store, "st.entry", channels, d, rng);
    m.sted_st = Sted::create(m.store, "st.sted", cfg.sted(channels), rng);
    if (cfg.mode != ModelMode::kMainOnly) {
      m.text_encoder = TextEncoder::create(m.store, "text", cfg.text_buckets, cfg.text_width, rng);
      m.image_encoder = ImageEncoder::create(m.store, "image", image_channels, cfg.image_c1, cfg.image_c2,
                                             cfg.image_width, rng);
      m.projections = ModalityProjections::create(m.store, "proj", channels, cfg.text_width, cfg.image_width, d, rng);
      m.cma_text = CmaParams::create(m.store, "cma_text", d, cfg.heads, rng);
      m.cma_image = CmaParams::create(m.store, "cma_image", d, cfg.heads, rng);
      m.gate = Linear::create(m.store, "gate", 3 * d, 3 * d, rng);
      if (cfg.mode == ModelMode::kFull) {
        m.intervention = InterventionParams::create(m.store, "iv", d, nodes, cfg.latent_width, rng, cfg.alpha_init);
      }
      m.entry_mm = Linear::create(m.store, "mm.entry", 3 * d, d, rng);
      m.sted_mm = Sted::create(m.store, "mm.sted", cfg.sted(channels), rng);
      m.heads = BranchHeads::create(m.store, "heads", channels, cfg.head_hidden, rng);
    }
    return m;
  }

  DualBranchModel() = default;
  DualBranchModel(const DualBranchModel&) = delete;
  DualBranchModel& operator=(const DualBranchModel&) = delete;
  DualBranchModel(DualBranchModel&&) = default;
  DualBranchModel& operator=(DualBranchModel&&) = default;

  bool multimodal() const { return config.mode != ModelMode::kMainOnly; }

  /// Main-branch prediction from a normalized series batch [B, T, N, c].
  ad::Var main_branch(const ad::Var& x, const Tensor& a_hat) const {
    return sted_st.forward(entry_st(x), a_hat);
  }

  /// F_fused [B, T, N, 3d] plus the attention outputs used as E and C.
  struct Fusion {
    ad::Var fused;
    ad::Var attn_text;
    ad::Var attn_image;
  };

  Fusion fusion(const ModelInputs& in) const {
    const std::size_t b = in.x.dim(0), t = in.x.dim(1), n = in.x.dim(2);
    const ad::Var x = ad::constant(in.x);

    // Text: Mt^T (counts W + b), identical for every node of a slot.
    const Linear& tp = text_encoder.proj;
    ad::Var text = ad::add(ad::matmul(ad::constant(in.text_counts), tp.weight),
                           ad::matmul(ad::constant(in.text_obs), ad::reshape(tp.bias, {1, tp.out_features()})));
    text = ad::repeat_before_last(text, n);

    // Images: per-image CNN features summed into their (t, n) cell.
    const Linear& ip = image_encoder.proj;
    const std::size_t cells = b * t * n;
    ad::Var pooled = in.image_cells.empty()
                         ? ad::constant(Tensor({cells, ip.in_features()}))
                         : ad::segment_sum_rows(image_encoder.features(ad::constant(in.image_pixels)),
                                                in.image_cells, cells);
    ad::Var image = ad::add(ad::matmul(pooled, ip.weight),
                            ad::matmul(ad::constant(in.image_obs), ad::reshape(ip.bias, {1, ip.out_features()})));
    image = ad::reshape(image, {b, t, n, ip.out_features()});

    const Projected p = project(x, text, image, projections);
    Fusion f;
    f.attn_text = cma(p.st, p.text, cma_text, config.axis).out;
    f.attn_image = cma(p.st, p.img, cma_image, config.axis).out;
    f.fused = fuse(p.st, f.attn_text, f.attn_image, gate);
    return f;
  }

  ModelOutputs forward(const ModelInputs& in, const Tensor& a_hat) const {
    ModelOutputs out;
    out.st_pred = main_branch(ad::constant(in.x), a_hat);
    if (!multimodal()) {
      out.final_pred = out.st_pred;
      out.penalty = ad::constant(Tensor::scalar(0.0));
      return out;
    }
    const Fusion f = fusion(in);
    out.fused = f.fused;
    ad::Var aux = f.fused;
    if (config.mode == ModelMode::kFull) {
      aux = intervene(f.fused, f.attn_image, f.attn_text, intervention);
      out.penalty = confounder_penalty(f.fused, intervention);
    } else {
      out.penalty = ad::constant(Tensor::scalar(0.0));
    }
    out.mm_pred = sted_mm.forward(entry_mm(aux), a_hat);
    out.final_pred = combine_branches(out.st_pred, out.mm_pred, heads);
    return out;
  }

  /// Mean |d x_hat / d S| over the batch; zero when there is no intervention.
  double confounder_sensitivity(const ModelInputs& in) const {
    if (config.mode != ModelMode::kFull) return 0.0;
    ad::NoGradGuard guard;
    return mean_abs_confounder_gradient(fusion(in).fused.value(), intervention);
  }

  /// Main-branch predictor for Shapley attribution; safe to call concurrently.
  Predictor main_predictor(const Tensor& a_hat) const {
    return [this, a_hat](const Tensor& x) {
      ad::NoGradGuard guard;
      return main_branch(ad::constant(x), a_hat).value();
    };
  }
};

}  // namespace cstp
