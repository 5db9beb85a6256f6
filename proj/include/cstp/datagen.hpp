#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <queue>
#include <sstream>
#include <string>
#include <vector>

#include "cstp/alignment.hpp"
#include "cstp/kv_config.hpp"
#include "cstp/rng.hpp"
#include "cstp/sted.hpp"
#include "cstp/tensor.hpp"

namespace cstp {

// ---------------------------------------------------------------------------
// Spatial graphs

enum class GraphKind { kGrid, kRandomGeometric };

struct SpatialGraph {
  Tensor adjacency;  // [N, N], binary, symmetric, zero diagonal
  std::vector<Point> coords;
};

inline std::size_t grid_rows(std::size_t n) {
  std::size_t r = 1;
  for (std::size_t k = 1; k * k <= n; ++k)
    if (n % k == 0) r = k;
  return r;
}

inline bool is_connected(const Tensor& adj) {
  const std::size_t n = adj.dim(0);
  std::vector<char> seen(n, 0);
  std::queue<std::size_t> q;
  q.push(0);
  seen[0] = 1;
  std::size_t count = 1;
  while (!q.empty()) {
    const std::size_t i = q.front();
    q.pop();
    for (std::size_t j = 0; j < n; ++j)
      if (adj.at(i, j) > 0.0 && !seen[j]) {
        seen[j] = 1;
        ++count;
        q.push(j);
      }
  }
  return count == n;
}

/// Grid: 4-neighbour lattice on r x c with r the largest divisor of N not
/// above sqrt(N). Random-geometric: uniform points in the unit square, edge
/// iff distance < radius, regenerated until connected (at most 100 tries).
inline SpatialGraph gen_graph(std::size_t n, GraphKind kind, double radius, std::uint64_t seed) {
  if (n < 2) throw ValueError("gen_graph: need at least 2 nodes, got " + std::to_string(n));
  SpatialGraph g{Tensor({n, n}), {}};
  if (kind == GraphKind::kGrid) {
    const std::size_t rows = grid_rows(n), cols = n / rows;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) {
        g.coords.push_back({(static_cast<double>(j) + 0.5) / static_cast<double>(cols),
                            (static_cast<double>(i) + 0.5) / static_cast<double>(rows)});
        const std::size_t v = i * cols + j;
        if (j + 1 < cols) g.adjacency.at(v, v + 1) = g.adjacency.at(v + 1, v) = 1.0;
        if (i + 1 < rows) g.adjacency.at(v, v + cols) = g.adjacency.at(v + cols, v) = 1.0;
      }
    return g;
  }
  if (!(radius > 0.0)) throw ValueError("gen_graph: radius must be positive");
  Rng rng(derive_seed(seed, 11));
  for (int attempt = 0; attempt < 100; ++attempt) {
    g.coords.assign(n, Point{});
    for (Point& p : g.coords) p = {rng.uniform(), rng.uniform()};
    g.adjacency = Tensor({n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        if (std::hypot(g.coords[i].x - g.coords[j].x, g.coords[i].y - g.coords[j].y) < radius) {
          g.adjacency.at(i, j) = g.adjacency.at(j, i) = 1.0;
        }
      }
    if (is_connected(g.adjacency)) return g;
  }
  throw ValueError("gen_graph: no connected random-geometric graph with radius " + format_double(radius) +
                   " after 100 attempts; increase the radius");
}

inline GraphKind parse_graph_kind(const std::string& s) {
  if (s == "grid") return GraphKind::kGrid;
  if (s == "random-geometric") return GraphKind::kRandomGeometric;
  throw ConfigError("graph kind must be 'grid' or 'random-geometric', got '" + s + "'");
}

inline std::string to_string(GraphKind k) { return k == GraphKind::kGrid ? "grid" : "random-geometric"; }

// ---------------------------------------------------------------------------
// Dataset

/// Multi-modal dataset. s_true is [T, N] for synthetic data and empty otherwise.
struct MultiModalDataset {
  StSeries series;
  std::vector<TextObservation> text;
  std::vector<ImageObservation> images;
  Tensor adjacency;
  Tensor s_true;
  std::size_t image_height = 1;
  std::size_t image_width = 1;
  std::size_t image_channels = 1;

  bool has_s_true() const { return s_true.size() > 0; }

  void validate() const {
    series.validate();
    const std::size_t n = series.nodes();
    if (adjacency.rank() != 2 || adjacency.dim(0) != n || adjacency.dim(1) != n) {
      throw DataError("adjacency must be " + std::to_string(n) + "x" + std::to_string(n) + ", got " +
                      to_string(adjacency.shape()));
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (adjacency.at(i, i) != 0.0) throw DataError("adjacency diagonal must be zero (node " + std::to_string(i) + ")");
      for (std::size_t j = 0; j < n; ++j) {
        const double v = adjacency.at(i, j);
        if (!(v >= 0.0) || !std::isfinite(v)) throw DataError("adjacency entries must be finite and non-negative");
        if (v != adjacency.at(j, i)) throw DataError("adjacency must be symmetric");
      }
    }
    const double t0 = series.timestamps.front(), t1 = series.timestamps.back();
    for (const auto& obs : text) {
      if (obs.tokens.empty()) throw DataError("text observation at t=" + format_double(obs.timestamp) + " has no tokens");
      if (obs.timestamp < t0 || obs.timestamp > t1) {
        throw DataError("text timestamp " + format_double(obs.timestamp) + " outside the series range");
      }
    }
    const Shape px{image_height, image_width, image_channels};
    for (const auto& img : images) {
      if (img.timestamp < t0 || img.timestamp > t1) {
        throw DataError("image timestamp " + format_double(img.timestamp) + " outside the series range");
      }
      if (img.pixels.shape() != px) {
        throw DataError("image pixels have shape " + to_string(img.pixels.shape()) + ", expected " + to_string(px));
      }
      for (double v : img.pixels.data())
        if (!(v >= 0.0 && v <= 1.0)) throw DataError("image pixel outside [0, 1]");
    }
    if (has_s_true() && s_true.shape() != Shape{series.steps(), n}) {
      throw DataError("s_true must be [T, N], got " + to_string(s_true.shape()));
    }
  }
};

// ---------------------------------------------------------------------------
// Synthetic SCM generator

struct ScmConfig {
  std::size_t nodes = 16;
  std::size_t steps = 400;
  std::size_t channels = 1;
  GraphKind graph = GraphKind::kGrid;
  double radius = 0.4;
  double kappa = 0.8;             // confounding strength
  double noise = 0.05;            // sigma
  double event_rate = 0.05;       // expected text events per step
  std::size_t event_lead = 0;     // steps between an event's text and its pulse
  double field_amplitude = 1.0;   // 0 gives a flat field
  double theta = 0.9;             // graph recursion gain
  double w_field = 0.5;
  double w_pulse = 0.5;
  double ar_coefficient = 0.9;
  std::size_t image_height = 8;
  std::size_t image_width = 8;
  std::size_t image_stride = 1;   // emit images every k steps (0 disables)
  double dt = 300.0;              // seconds between steps
  double start_time = 0.0;
  std::uint64_t seed = 7;
  std::uint64_t confounder_seed = 7;

  void validate() const {
    if (nodes < 2) throw ConfigError("nodes must be at least 2");
    if (steps < 2) throw ConfigError("steps must be at least 2");
    if (channels == 0) throw ConfigError("channels must be positive");
    if (!(kappa >= 0.0 && kappa <= 1.0)) throw ConfigError("kappa must lie in [0, 1]");
    if (!(noise >= 0.0)) throw ConfigError("noise must be non-negative");
    if (!(event_rate >= 0.0)) throw ConfigError("event_rate must be non-negative");
    if (!(field_amplitude >= 0.0)) throw ConfigError("field_amplitude must be non-negative");
    if (image_height == 0 || image_width == 0) throw ConfigError("image size must be positive");
    if (!(dt > 0.0)) throw ConfigError("dt must be positive");
    if (!(std::abs(ar_coefficient) < 1.0)) throw ConfigError("ar_coefficient must lie in (-1, 1)");
  }

  static ScmConfig from_kv(const KvConfig& kv) {
    ScmConfig c;
    c.nodes = kv.get_size("nodes", c.nodes);
    c.steps = kv.get_size("steps", c.steps);
    c.channels = kv.get_size("channels", c.channels);
    c.graph = parse_graph_kind(kv.get_string("graph", "grid"));
    c.radius = kv.get_double("radius", c.radius);
    c.kappa = kv.get_double("kappa", c.kappa);
    c.noise = kv.get_double("noise", c.noise);
    c.event_rate = kv.get_double("event_rate", c.event_rate);
    c.event_lead = kv.get_size("event_lead", c.event_lead);
    c.field_amplitude = kv.get_double("field_amplitude", c.field_amplitude);
    c.theta = kv.get_double("theta", c.theta);
    c.w_field = kv.get_double("w_field", c.w_field);
    c.w_pulse = kv.get_double("w_pulse", c.w_pulse);
    c.ar_coefficient = kv.get_double("ar_coefficient", c.ar_coefficient);
    c.image_height = kv.get_size("image_height", c.image_height);
    c.image_width = kv.get_size("image_width", c.image_width);
    c.image_stride = kv.get_size("image_stride", c.image_stride);
    c.dt = kv.get_double("dt", c.dt);
    c.start_time = kv.get_double("start_time", c.start_time);
    c.seed = static_cast<std::uint64_t>(kv.get_size("seed", c.seed));
    c.confounder_seed = static_cast<std::uint64_t>(kv.get_size("confounder_seed", c.seed));
    kv.reject_unknown();
    c.validate();
    return c;
  }
};

namespace detail {

struct Bump {
  double x0, y0, vx, vy, width, weight;
};

/// Sum of drifting Gaussian bumps; centers wrap around the unit square.
inline double field_value(const std::vector<Bump>& bumps, double amplitude, double x, double y, double t) {
  if (amplitude == 0.0) return 0.0;
  double acc = 0.0;
  for (const Bump& b : bumps) {
    const double cx = b.x0 + b.vx * t, cy = b.y0 + b.vy * t;
    double dx = x - (cx - std::floor(cx)), dy = y - (cy - std::floor(cy));
    dx -= std::round(dx);
    dy -= std::round(dy);
    acc += b.weight * std::exp(-(dx * dx + dy * dy) / (2.0 * b.width * b.width));
  }
  return amplitude * acc;
}

inline std::size_t poisson(Rng& rng, double rate) {
  if (rate <= 0.0) return 0;
  const double limit = std::exp(-rate);
  std::size_t k = 0;
  double p = rng.uniform();
  while (p > limit) {
    ++k;
    p *= rng.uniform();
  }
  return k;
}

constexpr std::array<double, 4> kEventAmplitude{-1.0, -0.5, 0.5, 1.0};
constexpr std::size_t kPulseLength = 6;

inline std::vector<std::string> event_tokens(std::size_t code, Rng& rng) {
  static const std::array<std::array<const char*, 3>, 4> words{{
      {"closure", "road", "blocked"},
      {"rain", "light", "showers"},
      {"festival", "crowd", "downtown"},
      {"concert", "stadium", "surge"},
  }};
  std::vector<std::string> tokens{"event", "code" + std::to_string(code)};
  for (const char* w : words[code])
    if (rng.uniform() < 0.8) tokens.emplace_back(w);
  return tokens;
}

}  // namespace detail

/// Draws a confounded multi-modal dataset:
///   S_t = a S_{t-1} + e_t (per node, stationary start, own RNG stream)
///   X_{t+1} = tanh(theta Ahat X_t + kappa S_t + w_E field_t + w_C pulse_t) + sigma eps
inline MultiModalDataset gen_scm(const ScmConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.nodes, steps = cfg.steps, ch = cfg.channels;
  const SpatialGraph graph = gen_graph(n, cfg.graph, cfg.radius, cfg.seed);
  const Tensor a_hat = normalized_adjacency(graph.adjacency);

  MultiModalDataset ds;
  ds.adjacency = graph.adjacency;
  ds.image_height = cfg.image_height;
  ds.image_width = cfg.image_width;
  ds.image_channels = 1;
  ds.series.node_coords = graph.coords;
  ds.series.timestamps.resize(steps);
  for (std::size_t t = 0; t < steps; ++t) ds.series.timestamps[t] = cfg.start_time + cfg.dt * static_cast<double>(t);

  // Latent confounder on its own stream so the other draws never depend on it.
  ds.s_true = Tensor({steps, n});
  {
    Rng srng(derive_seed(cfg.confounder_seed, 1));
    const double a = cfg.ar_coefficient, stationary = 1.0 / std::sqrt(1.0 - a * a);
    for (std::size_t i = 0; i < n; ++i) ds.s_true.at(0, i) = stationary * srng.normal();
    for (std::size_t t = 1; t < steps; ++t)
      for (std::size_t i = 0; i < n; ++i) ds.s_true.at(t, i) = a * ds.s_true.at(t - 1, i) + srng.normal();
  }

  Rng field_rng(derive_seed(cfg.seed, 2));
  std::vector<detail::Bump> bumps(3);
  for (auto& b : bumps) {
    b = {field_rng.uniform(), field_rng.uniform(), field_rng.uniform(-0.01, 0.01), field_rng.uniform(-0.01, 0.01),
         field_rng.uniform(0.15, 0.3), field_rng.uniform(0.5, 1.0)};
  }
  auto field_at = [&](double x, double y, std::size_t t) {
    return detail::field_value(bumps, cfg.field_amplitude, x, y, static_cast<double>(t));
  };

  // Text events and the global pulse they drive.
  Rng event_rng(derive_seed(cfg.seed, 3));
  std::vector<double> pulse(steps, 0.0);
  const double t_last = ds.series.timestamps.back();
  for (std::size_t t = 0; t < steps; ++t) {
    const std::size_t count = detail::poisson(event_rng, cfg.event_rate);
    for (std::size_t e = 0; e < count; ++e) {
      const std::size_t code = event_rng.index(4);
      TextObservation obs;
      obs.timestamp = std::min(ds.series.timestamps[t] + event_rng.uniform(0.0, 0.5 * cfg.dt), t_last);
      obs.tokens = detail::event_tokens(code, event_rng);
      ds.text.push_back(std::move(obs));
      const std::size_t onset = t + 1 + cfg.event_lead;
      for (std::size_t k = onset; k < onset + detail::kPulseLength && k < steps; ++k) {
        pulse[k] += detail::kEventAmplitude[code];
      }
    }
  }

  // Images: an H x W patch of the field around each node.
  Rng image_rng(derive_seed(cfg.seed, 4));
  if (cfg.image_stride > 0 && cfg.field_amplitude >= 0.0) {
    const double patch = 0.25;
    for (std::size_t t = 0; t < steps; t += cfg.image_stride) {
      for (std::size_t i = 0; i < n; ++i) {
        ImageObservation img;
        img.timestamp = std::clamp(ds.series.timestamps[t] + image_rng.uniform(-0.25, 0.25) * cfg.dt,
                                   ds.series.timestamps.front(), t_last);
        img.coords = {graph.coords[i].x + image_rng.uniform(-0.02, 0.02),
                      graph.coords[i].y + image_rng.uniform(-0.02, 0.02)};
        img.pixels = Tensor({cfg.image_height, cfg.image_width, 1});
        for (std::size_t r = 0; r < cfg.image_height; ++r)
          for (std::size_t c = 0; c < cfg.image_width; ++c) {
            const double px = img.coords.x + patch * ((static_cast<double>(c) + 0.5) / static_cast<double>(cfg.image_width) - 0.5);
            const double py = img.coords.y + patch * ((static_cast<double>(r) + 0.5) / static_cast<double>(cfg.image_height) - 0.5);
            const double f = field_at(px, py, t);
            img.pixels.at(r, c, 0) = f / (1.0 + f);
          }
        ds.images.push_back(std::move(img));
      }
    }
  }

  // Series dynamics.
  Rng noise_rng(derive_seed(cfg.seed, 5));
  Tensor x({steps, n, ch});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < ch; ++c) x.at(0, i, c) = 0.1 * noise_rng.normal();
  for (std::size_t t = 0; t + 1 < steps; ++t)
    for (std::size_t i = 0; i < n; ++i) {
      const double drive = cfg.kappa * ds.s_true.at(t, i) +
                           cfg.w_field * field_at(graph.coords[i].x, graph.coords[i].y, t) + cfg.w_pulse * pulse[t];
      for (std::size_t c = 0; c < ch; ++c) {
        double mixed = 0.0;
        for (std::size_t j = 0; j < n; ++j) mixed += a_hat.at(i, j) * x.at(t, j, c);
        const double eps = cfg.noise > 0.0 ? noise_rng.normal() : 0.0;
        x.at(t + 1, i, c) = std::tanh(cfg.theta * mixed + drive) + cfg.noise * eps;
      }
    }
  ds.series.values = std::move(x);
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Directory format

inline constexpr int kDatasetFormatMajor = 1;

namespace detail {

inline std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
  return out;
}

inline std::vector<double> split_doubles(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::size_t start = 0;
  if (trim(text).empty()) return out;
  while (true) {
    const std::size_t comma = text.find(',', start);
    out.push_back(parse_double(text.substr(start, comma == std::string::npos ? std::string::npos : comma - start), what));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("missing dataset file '" + p.string() + "'");
  return in;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  return out;
}

inline Tensor read_matrix_csv(const std::filesystem::path& p, std::size_t rows, std::size_t cols) {
  auto in = open_in(p);
  Tensor m({rows, cols});
  std::string line;
  std::size_t r = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    if (r == rows) throw DataError(p.string() + ": more than " + std::to_string(rows) + " rows");
    const auto vals = split_doubles(line, p.string() + " row " + std::to_string(r + 1));
    if (vals.size() != cols) {
      throw DataError(p.string() + " row " + std::to_string(r + 1) + ": expected " + std::to_string(cols) +
                      " values, got " + std::to_string(vals.size()));
    }
    std::copy(vals.begin(), vals.end(), m.raw() + r * cols);
    ++r;
  }
  if (r != rows) throw DataError(p.string() + ": truncated, expected " + std::to_string(rows) + " rows, got " + std::to_string(r));
  return m;
}

inline void write_matrix_csv(const std::filesystem::path& p, const Tensor& m) {
  auto out = open_out(p);
  const std::size_t cols = m.dim(1);
  for (std::size_t r = 0; r < m.dim(0); ++r) {
    for (std::size_t c = 0; c < cols; ++c) out << (c ? "," : "") << format_double(m.at(r, c));
    out << '\n';
  }
}

}  // namespace detail

/// Writes `dir/{meta,series,graph,text,images[,s_true]}`.
inline void write_dataset(const MultiModalDataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  std::filesystem::create_directories(dir);
  const std::size_t steps = ds.series.steps(), n = ds.series.nodes(), ch = ds.series.channels();
  {
    auto out = detail::open_out(dir / "meta");
    std::vector<double> xs, ys;
    for (const Point& p : ds.series.node_coords) {
      xs.push_back(p.x);
      ys.push_back(p.y);
    }
    out << "# cstp multi-modal dataset\n"
        << "format_version = " << kDatasetFormatMajor << "\n"
        << "nodes = " << n << "\nsteps = " << steps << "\nchannels = " << ch << '\n'
        << "image_height = " << ds.image_height << "\nimage_width = " << ds.image_width
        << "\nimage_channels = " << ds.image_channels << '\n'
        << "text_count = " << ds.text.size() << "\nimage_count = " << ds.images.size() << '\n'
        << "has_s_true = " << (ds.has_s_true() ? "true" : "false") << '\n'
        << "node_x = " << detail::join_doubles(xs) << "\nnode_y = " << detail::join_doubles(ys) << '\n';
  }
  {
    auto out = detail::open_out(dir / "series");
    out << "time,node,channel,value\n";
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < ch; ++c)
          out << format_double(ds.series.timestamps[t]) << ',' << i << ',' << c << ','
              << format_double(ds.series.values.at(t, i, c)) << '\n';
  }
  detail::write_matrix_csv(dir / "graph", ds.adjacency);
  {
    auto out = detail::open_out(dir / "text");
    for (const auto& obs : ds.text) {
      out << format_double(obs.timestamp);
      for (const auto& tok : obs.tokens) out << ' ' << tok;
      out << '\n';
    }
  }
  {
    auto out = detail::open_out(dir / "images");
    for (const auto& img : ds.images) {
      out << format_double(img.timestamp) << ',' << format_double(img.coords.x) << ',' << format_double(img.coords.y);
      for (double v : img.pixels.data()) out << ',' << format_double(v);
      out << '\n';
    }
  }
  if (ds.has_s_true()) {
    detail::write_matrix_csv(dir / "s_true", ds.s_true);
  } else {
    std::filesystem::remove(dir / "s_true");
  }
}

inline MultiModalDataset read_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("dataset directory '" + dir.string() + "' does not exist");
  KvConfig meta;
  {
    auto in = detail::open_in(dir / "meta");
    try {
      meta = KvConfig::parse(in, (dir / "meta").string());
    } catch (const ConfigError& e) {
      throw DataError(e.what());
    }
  }
  MultiModalDataset ds;
  std::size_t n = 0, steps = 0, ch = 0, text_count = 0, image_count = 0;
  bool has_s = false;
  std::vector<double> xs, ys;
  try {
    const std::string version = meta.get_string("format_version", "");
    if (version.empty()) throw DataError("meta: missing format_version");
    const std::string major = version.substr(0, version.find('.'));
    if (major != std::to_string(kDatasetFormatMajor)) {
      throw DataError("meta: unsupported dataset format version " + version + " (this build reads " +
                      std::to_string(kDatasetFormatMajor) + ".x)");
    }
    n = meta.get_size("nodes", 0);
    steps = meta.get_size("steps", 0);
    ch = meta.get_size("channels", 0);
    ds.image_height = meta.get_size("image_height", 0);
    ds.image_width = meta.get_size("image_width", 0);
    ds.image_channels = meta.get_size("image_channels", 0);
    text_count = meta.get_size("text_count", 0);
    image_count = meta.get_size("image_count", 0);
    has_s = meta.get_bool("has_s_true", false);
    xs = detail::split_doubles(meta.get_string("node_x", ""), "meta node_x");
    ys = detail::split_doubles(meta.get_string("node_y", ""), "meta node_y");
    meta.reject_unknown();
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
  if (!n || !steps || !ch) throw DataError("meta: nodes, steps and channels must be positive");
  if (!ds.image_height || !ds.image_width || !ds.image_channels) throw DataError("meta: image dimensions must be positive");
  if (xs.size() != n || ys.size() != n) throw DataError("meta: node_x/node_y must list " + std::to_string(n) + " coordinates");
  for (std::size_t i = 0; i < n; ++i) ds.series.node_coords.push_back({xs[i], ys[i]});

  {
    auto in = detail::open_in(dir / "series");
    std::string line;
    if (!std::getline(in, line) || trim(line) != "time,node,channel,value") {
      throw DataError("series: expected header 'time,node,channel,value'");
    }
    ds.series.timestamps.assign(steps, 0.0);
    ds.series.values = Tensor({steps, n, ch});
    std::size_t rows = 0;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      const auto vals = detail::split_doubles(line, "series row " + std::to_string(rows + 2));
      if (vals.size() != 4) throw DataError("series row " + std::to_string(rows + 2) + ": expected 4 fields");
      if (rows >= steps * n * ch) throw DataError("series: more rows than steps x nodes x channels");
      const std::size_t t = rows / (n * ch), i = (rows / ch) % n, c = rows % ch;
      if (vals[1] != static_cast<double>(i) || vals[2] != static_cast<double>(c)) {
        throw DataError("series row " + std::to_string(rows + 2) + ": expected node " + std::to_string(i) +
                        " channel " + std::to_string(c) + " (rows must be time-major)");
      }
      if (i == 0 && c == 0) {
        ds.series.timestamps[t] = vals[0];
      } else if (vals[0] != ds.series.timestamps[t]) {
        throw DataError("series row " + std::to_string(rows + 2) + ": inconsistent timestamp within step " + std::to_string(t));
      }
      ds.series.values.at(t, i, c) = vals[3];
      ++rows;
    }
    if (rows != steps * n * ch) {
      throw DataError("series: truncated, expected " + std::to_string(steps * n * ch) + " rows, got " + std::to_string(rows));
    }
  }
  ds.adjacency = detail::read_matrix_csv(dir / "graph", n, n);
  {
    auto in = detail::open_in(dir / "text");
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      auto tokens = split_whitespace(line);
      TextObservation obs;
      obs.timestamp = parse_double(tokens.front(), "text record " + std::to_string(ds.text.size() + 1));
      obs.tokens.assign(tokens.begin() + 1, tokens.end());
      ds.text.push_back(std::move(obs));
    }
    if (ds.text.size() != text_count) {
      throw DataError("text: expected " + std::to_string(text_count) + " records, got " + std::to_string(ds.text.size()));
    }
  }
  {
    auto in = detail::open_in(dir / "images");
    const std::size_t pixels = ds.image_height * ds.image_width * ds.image_channels;
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      const auto vals = detail::split_doubles(line, "image record " + std::to_string(ds.images.size() + 1));
      if (vals.size() != 3 + pixels) {
        throw DataError("image record " + std::to_string(ds.images.size() + 1) + ": expected " +
                        std::to_string(3 + pixels) + " values, got " + std::to_string(vals.size()));
      }
      ImageObservation img;
      img.timestamp = vals[0];
      img.coords = {vals[1], vals[2]};
      img.pixels = Tensor({ds.image_height, ds.image_width, ds.image_channels},
                          std::vector<double>(vals.begin() + 3, vals.end()));
      ds.images.push_back(std::move(img));
    }
    if (ds.images.size() != image_count) {
      throw DataError("images: expected " + std::to_string(image_count) + " records, got " + std::to_string(ds.images.size()));
    }
  }
  if (has_s) ds.s_true = detail::read_matrix_csv(dir / "s_true", steps, n);
  ds.validate();
  return ds;
}

}  // namespace cstp
