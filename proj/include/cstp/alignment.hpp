#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cstp/autodiff.hpp"
#include "cstp/layers.hpp"
#include "cstp/log.hpp"
#include "cstp/ops.hpp"
#include "cstp/tensor.hpp"

namespace cstp {

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// Spatio-temporal series: timestamps [T], node coordinates [N], values [T, N, d].
struct StSeries {
  std::vector<double> timestamps;
  std::vector<Point> node_coords;
  Tensor values;

  std::size_t steps() const { return timestamps.size(); }
  std::size_t nodes() const { return node_coords.size(); }
  std::size_t channels() const { return values.rank() == 3 ? values.dim(2) : 0; }

  void validate() const {
    if (timestamps.empty() || node_coords.empty()) throw DataError("series has no steps or no nodes");
    for (std::size_t i = 1; i < timestamps.size(); ++i) {
      if (!(timestamps[i] > timestamps[i - 1])) {
        throw DataError("series timestamps must be strictly increasing (index " +
                        std::to_string(i) + ")");
      }
    }
    if (values.rank() != 3 || values.dim(0) != steps() || values.dim(1) != nodes()) {
      throw DataError("series values have shape " + to_string(values.shape()) + ", expected [" +
                      std::to_string(steps()) + "x" + std::to_string(nodes()) + "xd]");
    }
    if (!values.all_finite()) throw DataError("series contains non-finite values");
  }
};

struct TextObservation {
  double timestamp = 0.0;
  std::vector<std::string> tokens;
  friend bool operator==(const TextObservation&, const TextObservation&) = default;
};

struct ImageObservation {
  double timestamp = 0.0;
  Point coords;
  Tensor pixels;  // [H, W, c], values in [0, 1]
  friend bool operator==(const ImageObservation&, const ImageObservation&) = default;
};

/// A binary matrix whose rows are one-hot, stored as the hot column per row.
struct OneHotRows {
  std::vector<std::size_t> cols;
  std::size_t width = 0;

  std::size_t rows() const { return cols.size(); }

  Tensor dense() const {
    if (cols.empty()) throw ShapeError("one-hot matrix with zero rows has no dense form");
    Tensor m({cols.size(), width});
    for (std::size_t i = 0; i < cols.size(); ++i) m.at(i, cols[i]) = 1.0;
    return m;
  }
};

/// Temporal (K_t x T_st) and spatial (K_s x N_st) matchings.
struct AlignmentMatrices {
  OneHotRows temporal;
  OneHotRows spatial;
};

/// Row i is hot at argmin_k |obs_times[i] - st_times[k]|; ties go to the
/// smaller k. Observations outside the series range clamp to an endpoint.
inline OneHotRows build_temporal_alignment(std::span<const double> obs_times,
                                           std::span<const double> st_times) {
  if (st_times.empty()) throw ValueError("temporal alignment needs at least one series timestamp");
  OneHotRows m{{}, st_times.size()};
  m.cols.reserve(obs_times.size());
  std::size_t clamped = 0;
  for (double tau : obs_times) {
    if (tau < st_times.front() || tau > st_times.back()) ++clamped;
    // Binary search for the first timestamp >= tau, then compare neighbours.
    auto it = std::lower_bound(st_times.begin(), st_times.end(), tau);
    std::size_t k = static_cast<std::size_t>(it - st_times.begin());
    if (k == st_times.size()) {
      k = st_times.size() - 1;
    } else if (k > 0 && std::abs(tau - st_times[k - 1]) <= std::abs(st_times[k] - tau)) {
      k = k - 1;
    }
    m.cols.push_back(k);
  }
  if (clamped) {
    log::warn(std::to_string(clamped) +
              " observation(s) fall outside the series time range; aligned to the nearest endpoint");
  }
  return m;
}

/// Row i is hot at the L2-nearest node; ties go to the smaller index.
inline OneHotRows build_spatial_alignment(std::span<const Point> obs_coords,
                                          std::span<const Point> node_coords) {
  if (node_coords.empty()) throw ValueError("spatial alignment needs at least one node");
  OneHotRows m{{}, node_coords.size()};
  m.cols.reserve(obs_coords.size());
  for (const Point& p : obs_coords) {
    std::size_t best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < node_coords.size(); ++k) {
      const double dx = p.x - node_coords[k].x;
      const double dy = p.y - node_coords[k].y;
      const double d2 = dx * dx + dy * dy;
      if (d2 < best_d2) {
        best_d2 = d2;
        best = k;
      }
    }
    m.cols.push_back(best);
  }
  return m;
}

/// Mt^T feats for feats [K_t, width] (row-major); result [T_st, width].
inline Tensor align_text_slots(const OneHotRows& mt, std::span<const double> feats,
                               std::size_t width) {
  if (width == 0 || feats.size() != mt.rows() * width) {
    throw ShapeError("align_text: expected " + std::to_string(mt.rows()) + "x" +
                     std::to_string(width) + " features, got " + std::to_string(feats.size()) +
                     " values");
  }
  Tensor out({mt.width, width});
  for (std::size_t i = 0; i < mt.rows(); ++i)
    for (std::size_t c = 0; c < width; ++c) out.at(mt.cols[i], c) += feats[i * width + c];
  return out;
}

/// repeat(Mt^T feats, N_st): result [T_st, N_st, width]. Observations that
/// share a slot are summed.
inline Tensor align_text(const OneHotRows& mt, std::span<const double> feats, std::size_t width,
                         std::size_t nodes) {
  if (nodes == 0) throw ShapeError("align_text: node count must be positive");
  const Tensor slots = align_text_slots(mt, feats, width);
  Tensor out({mt.width, nodes, width});
  for (std::size_t t = 0; t < mt.width; ++t)
    for (std::size_t n = 0; n < nodes; ++n)
      for (std::size_t c = 0; c < width; ++c) out.at(t, n, c) = slots.at(t, c);
  return out;
}

/// Per channel, Mt^T X Ms for a grid of observations feats [K_t, K_s, width];
/// result [T_st, N_st, width].
inline Tensor align_image(const OneHotRows& mt, const OneHotRows& ms,
                          std::span<const double> feats, std::size_t width) {
  if (width == 0 || feats.size() != mt.rows() * ms.rows() * width) {
    throw ShapeError("align_image: expected " + std::to_string(mt.rows()) + "x" +
                     std::to_string(ms.rows()) + "x" + std::to_string(width) +
                     " features, got " + std::to_string(feats.size()) + " values");
  }
  Tensor out({mt.width, ms.width, width});
  for (std::size_t i = 0; i < mt.rows(); ++i)
    for (std::size_t j = 0; j < ms.rows(); ++j)
      for (std::size_t c = 0; c < width; ++c)
        out.at(mt.cols[i], ms.cols[j], c) += feats[(i * ms.rows() + j) * width + c];
  return out;
}

/// Observation-list form: observation i contributes only to cell
/// (mt.cols[i], ms.cols[i]), i.e. the grid product with a diagonal grid.
inline Tensor align_image_list(const OneHotRows& mt, const OneHotRows& ms,
                               std::span<const double> feats, std::size_t width) {
  if (mt.rows() != ms.rows()) throw ShapeError("align_image_list: Mt and Ms row counts differ");
  if (width == 0 || feats.size() != mt.rows() * width) {
    throw ShapeError("align_image_list: feature count does not match observation count");
  }
  Tensor out({mt.width, ms.width, width});
  for (std::size_t i = 0; i < mt.rows(); ++i)
    for (std::size_t c = 0; c < width; ++c)
      out.at(mt.cols[i], ms.cols[i], c) += feats[i * width + c];
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-(node, channel) z-score statistics, each stored as [N, d].
struct NormStats {
  static constexpr double kStdFloor = 1e-6;
  Tensor mean;
  Tensor stddev;
};

/// Statistics over steps [begin, end) of values [T, N, d].
inline NormStats compute_norm_stats(const Tensor& values, std::size_t begin, std::size_t end) {
  if (values.rank() != 3 || begin >= end || end > values.dim(0)) {
    throw ValueError("compute_norm_stats: invalid step range for " + to_string(values.shape()));
  }
  const std::size_t nodes = values.dim(1), ch = values.dim(2);
  NormStats s{Tensor({nodes, ch}), Tensor({nodes, ch})};
  const double count = static_cast<double>(end - begin);
  for (std::size_t n = 0; n < nodes; ++n)
    for (std::size_t c = 0; c < ch; ++c) {
      double mu = 0.0;
      for (std::size_t t = begin; t < end; ++t) mu += values.at(t, n, c);
      mu /= count;
      double var = 0.0;
      for (std::size_t t = begin; t < end; ++t) {
        const double dv = values.at(t, n, c) - mu;
        var += dv * dv;
      }
      s.mean.at(n, c) = mu;
      s.stddev.at(n, c) = std::max(std::sqrt(var / count), NormStats::kStdFloor);
    }
  return s;
}

/// (x - mean) / std per (node, channel) for values [..., N, d].
inline Tensor normalize_st(const Tensor& values, const NormStats& stats) {
  const std::size_t inner = stats.mean.size();
  if (values.size() % inner != 0 || values.rank() < 2 ||
      values.dim(values.rank() - 1) * values.dim(values.rank() - 2) != inner) {
    throw ShapeError("normalize_st: stats " + to_string(stats.mean.shape()) +
                     " do not match values " + to_string(values.shape()));
  }
  Tensor out(values.shape());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t k = i % inner;
    out[i] = (values[i] - stats.mean[k]) / stats.stddev[k];
  }
  return out;
}

inline Tensor denormalize_st(const Tensor& values, const NormStats& stats) {
  const std::size_t inner = stats.mean.size();
  if (values.size() % inner != 0) throw ShapeError("denormalize_st: shape mismatch");
  Tensor out(values.shape());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t k = i % inner;
    out[i] = values[i] * stats.stddev[k] + stats.mean[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Encoders

/// FNV-1a 64-bit hash of a token.
inline std::uint64_t fnv1a(std::string_view token) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char ch : token) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::size_t token_bucket(std::string_view token, std::size_t buckets) {
  return static_cast<std::size_t>(fnv1a(token) % buckets);
}

/// Hashed bag-of-tokens count vector of the given width.
inline std::vector<double> bag_of_tokens(const std::vector<std::string>& tokens,
                                         std::size_t buckets) {
  std::vector<double> counts(buckets, 0.0);
  for (const auto& tok : tokens) counts[token_bucket(tok, buckets)] += 1.0;
  return counts;
}

inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

/// Hashed bag-of-tokens followed by a learned affine map to `width`.
struct TextEncoder {
  std::size_t buckets = 512;
  Linear proj;

  static TextEncoder create(ad::ParamStore& store, const std::string& name, std::size_t buckets,
                            std::size_t width, Rng& rng) {
    return {buckets, Linear::create(store, name + ".proj", buckets, width, rng)};
  }

  /// counts [..., buckets] -> [..., width]
  ad::Var forward(const ad::Var& counts) const { return proj(counts); }

  Tensor encode(const std::vector<std::string>& tokens) const {
    ad::NoGradGuard guard;
    return forward(ad::constant(Tensor({buckets}, bag_of_tokens(tokens, buckets)))).value();
  }
};

/// im2col gather indices for a 3x3, stride-2, zero-padded convolution over
/// [M, H, W, c]. Output rows are [M, Ho, Wo] and columns (ky, kx, ch).
inline std::vector<long> im2col_3x3_s2(std::size_t m, std::size_t h, std::size_t w,
                                       std::size_t c, std::size_t& ho, std::size_t& wo) {
  ho = (h + 1) / 2;
  wo = (w + 1) / 2;
  std::vector<long> index;
  index.reserve(m * ho * wo * 9 * c);
  for (std::size_t s = 0; s < m; ++s)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox)
        for (std::size_t ky = 0; ky < 3; ++ky)
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const long iy = static_cast<long>(2 * oy + ky) - 1;
            const long ix = static_cast<long>(2 * ox + kx) - 1;
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(h) &&
                                ix < static_cast<long>(w);
            for (std::size_t ch = 0; ch < c; ++ch) {
              index.push_back(inside ? static_cast<long>(((s * h + static_cast<std::size_t>(iy)) * w +
                                                          static_cast<std::size_t>(ix)) * c + ch)
                                     : -1L);
            }
          }
  return index;
}

/// Mean over the spatial axes of [M, H, W, c] -> [M, c].
inline ad::Var global_average_pool(const ad::Var& maps) {
  const Shape& s = maps.shape();
  if (s.size() != 4) throw ShapeError("global_average_pool expects [M, H, W, c], got " + to_string(s));
  const std::size_t m = s[0], hw = s[1] * s[2], c = s[3];
  ad::Var grouped = ad::permute(ad::reshape(maps, {m, hw, c}), {0, 2, 1});
  return ad::scale(ad::sum_last(grouped), 1.0 / static_cast<double>(hw));
}

/// Two stride-2 3x3 convolutions with ReLU, global average pooling, and an
/// affine map to `width`.
struct ImageEncoder {
  Linear conv1;  // [9c, c1]
  Linear conv2;  // [9 c1, c2]
  Linear proj;   // [c2, width]
  std::size_t channels = 1;

  static ImageEncoder create(ad::ParamStore& store, const std::string& name, std::size_t channels,
                             std::size_t c1, std::size_t c2, std::size_t width, Rng& rng) {
    return {Linear::create(store, name + ".conv1", 9 * channels, c1, rng),
            Linear::create(store, name + ".conv2", 9 * c1, c2, rng),
            Linear::create(store, name + ".proj", c2, width, rng), channels};
  }

  static ad::Var conv(const ad::Var& x, const Linear& layer) {
    const Shape& s = x.shape();
    std::size_t ho = 0, wo = 0;
    auto index = im2col_3x3_s2(s[0], s[1], s[2], s[3], ho, wo);
    ad::Var cols = ad::gather(x, std::move(index), {s[0], ho, wo, 9 * s[3]});
    return ad::relu(layer(cols));
  }

  /// Pooled pre-projection features: [M, H, W, c] -> [M, c2].
  ad::Var features(const ad::Var& pixels) const {
    const Shape& s = pixels.shape();
    if (s.size() != 4 || s[3] != channels) {
      throw ShapeError("image encoder expects [M, H, W, " + std::to_string(channels) + "], got " +
                       to_string(s));
    }
    return global_average_pool(conv(conv(pixels, conv1), conv2));
  }

  ad::Var forward(const ad::Var& pixels) const { return proj(features(pixels)); }

  Tensor encode(const Tensor& pixels) const {
    if (pixels.rank() != 3) throw ShapeError("encode_image expects [H, W, c]");
    ad::NoGradGuard guard;
    Shape s{1, pixels.dim(0), pixels.dim(1), pixels.dim(2)};
    Tensor out = forward(ad::constant(pixels.reshaped(s))).value();
    return out.reshaped({out.size()});
  }
};

}  // namespace cstp
