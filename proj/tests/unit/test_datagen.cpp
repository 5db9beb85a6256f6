#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "cstp/datagen.hpp"
#include "test_util.hpp"

namespace cstp {
namespace {

namespace fs = std::filesystem;

std::vector<int> degrees(const Tensor& adj) {
  std::vector<int> deg;
  for (std::size_t i = 0; i < adj.dim(0); ++i) {
    int d = 0;
    for (std::size_t j = 0; j < adj.dim(1); ++j) d += adj.at(i, j) != 0.0;
    deg.push_back(d);
  }
  std::sort(deg.begin(), deg.end());
  return deg;
}

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("cstp_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

/// Pearson correlation between X[t+lag, i, 0] and S[t, i] pooled over nodes.
double pooled_corr(const MultiModalDataset& ds, std::size_t lag) {
  const std::size_t steps = ds.series.steps(), n = ds.series.nodes();
  double sx = 0, ss = 0, sxx = 0, sss = 0, sxs = 0, cnt = 0;
  for (std::size_t t = 0; t + lag < steps; ++t)
    for (std::size_t i = 0; i < n; ++i) {
      const double x = ds.series.values.at(t + lag, i, 0), s = ds.s_true.at(t, i);
      sx += x, ss += s, sxx += x * x, sss += s * s, sxs += x * s, cnt += 1;
    }
  const double cov = sxs / cnt - (sx / cnt) * (ss / cnt);
  return cov / std::sqrt((sxx / cnt - sx * sx / cnt / cnt) * (sss / cnt - ss * ss / cnt / cnt));
}

ScmConfig small_config() {
  ScmConfig c;
  c.nodes = 4;
  c.steps = 40;
  c.event_rate = 0.3;
  c.image_height = 3;
  c.image_width = 2;
  return c;
}

TEST(GenGraph, FourNodeGridCornersHaveDegreeTwo) {
  const SpatialGraph g = gen_graph(4, GraphKind::kGrid, 0.0, 1);
  EXPECT_EQ(degrees(g.adjacency), (std::vector<int>{2, 2, 2, 2}));
}

TEST(GenGraph, NineNodeGridDegreeSequence) {
  const SpatialGraph g = gen_graph(9, GraphKind::kGrid, 0.0, 1);
  EXPECT_EQ(degrees(g.adjacency), (std::vector<int>{2, 2, 2, 2, 3, 3, 3, 3, 4}));
}

TEST(GenGraph, GridCoordinatesAreCellCentres) {
  const SpatialGraph g = gen_graph(6, GraphKind::kGrid, 0.0, 1);  // 2 rows x 3 cols
  ASSERT_EQ(g.coords.size(), 6u);
  EXPECT_DOUBLE_EQ(g.coords[0].x, 1.0 / 6.0);
  EXPECT_DOUBLE_EQ(g.coords[0].y, 0.25);
  EXPECT_DOUBLE_EQ(g.coords[5].x, 2.5 / 3.0);
  EXPECT_DOUBLE_EQ(g.coords[5].y, 0.75);
}

TEST(GenGraph, LargeRadiusGivesCompleteGraph) {
  const SpatialGraph g = gen_graph(7, GraphKind::kRandomGeometric, std::sqrt(2.0), 3);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j) EXPECT_EQ(g.adjacency.at(i, j), i == j ? 0.0 : 1.0);
}

TEST(GenGraph, SymmetricZeroDiagonalAndConnected) {
  for (std::size_t n : {2u, 3u, 5u, 12u, 17u, 30u}) {
    for (GraphKind kind : {GraphKind::kGrid, GraphKind::kRandomGeometric}) {
      const SpatialGraph g = gen_graph(n, kind, 0.5, n);
      for (std::size_t i = 0; i < n; ++i) {
        EXPECT_EQ(g.adjacency.at(i, i), 0.0);
        for (std::size_t j = 0; j < n; ++j) EXPECT_EQ(g.adjacency.at(i, j), g.adjacency.at(j, i));
      }
      EXPECT_TRUE(is_connected(g.adjacency)) << "n=" << n << " kind=" << to_string(kind);
    }
  }
}

TEST(GenGraph, Guards) {
  EXPECT_THROW(gen_graph(1, GraphKind::kGrid, 0.0, 1), ValueError);
  EXPECT_THROW(gen_graph(30, GraphKind::kRandomGeometric, 0.01, 1), ValueError);
  EXPECT_THROW(parse_graph_kind("ring"), ConfigError);
}

TEST(GenGraph, SeedDeterminism) {
  const SpatialGraph a = gen_graph(10, GraphKind::kRandomGeometric, 0.5, 42);
  const SpatialGraph b = gen_graph(10, GraphKind::kRandomGeometric, 0.5, 42);
  EXPECT_EQ(a.adjacency, b.adjacency);
  EXPECT_EQ(a.coords, b.coords);
}

TEST(GenScm, SameSeedIsBitIdentical) {
  ScmConfig c = small_config();
  c.noise = 0.0;
  const auto a = gen_scm(c), b = gen_scm(c);
  EXPECT_EQ(a.series.values, b.series.values);
  EXPECT_EQ(a.series.timestamps, b.series.timestamps);
  EXPECT_EQ(a.text, b.text);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.s_true, b.s_true);
  c.noise = 0.1;
  EXPECT_EQ(gen_scm(c).series.values, gen_scm(c).series.values);
}

TEST(GenScm, ConfounderOffFollowsGraphRecursionAndIgnoresSSeed) {
  ScmConfig c = small_config();
  c.nodes = 6;
  c.kappa = 0.0;
  c.noise = 0.0;
  c.event_rate = 0.0;
  c.field_amplitude = 0.0;
  c.confounder_seed = 1;
  const auto a = gen_scm(c);
  c.confounder_seed = 2;
  const auto b = gen_scm(c);
  EXPECT_NE(a.s_true, b.s_true);
  EXPECT_EQ(a.series.values, b.series.values);
  EXPECT_TRUE(a.text.empty());

  // Independent oracle: Ahat = D^-1/2 (A + I) D^-1/2, X' = tanh(theta Ahat X).
  const std::size_t n = 6;
  std::vector<double> deg(n, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) deg[i] += a.adjacency.at(i, j);
  for (std::size_t t = 0; t + 1 < c.steps; ++t)
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double aij = a.adjacency.at(i, j) + (i == j ? 1.0 : 0.0);
        acc += aij / std::sqrt(deg[i] * deg[j]) * a.series.values.at(t, j, 0);
      }
      EXPECT_NEAR(a.series.values.at(t + 1, i, 0), std::tanh(c.theta * acc), 1e-14);
    }
}

TEST(GenScm, ObservationsInsideSeriesRange) {
  ScmConfig c = small_config();
  c.event_rate = 2.0;
  const auto ds = gen_scm(c);
  ASSERT_FALSE(ds.text.empty());
  ASSERT_EQ(ds.images.size(), c.steps * c.nodes);
  const double t0 = ds.series.timestamps.front(), t1 = ds.series.timestamps.back();
  for (const auto& o : ds.text) {
    EXPECT_GE(o.timestamp, t0);
    EXPECT_LE(o.timestamp, t1);
    EXPECT_EQ(o.tokens.front(), "event");
  }
  for (const auto& img : ds.images) {
    EXPECT_GE(img.timestamp, t0);
    EXPECT_LE(img.timestamp, t1);
    EXPECT_EQ(img.pixels.shape(), (Shape{3, 2, 1}));
    for (double v : img.pixels.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(GenScm, ConfounderIsAr1WithUnitInnovations) {
  ScmConfig c;
  c.nodes = 4;
  c.steps = 5000;
  c.image_stride = 0;
  const auto ds = gen_scm(c);
  double sxy = 0, sxx = 0;
  for (std::size_t t = 0; t + 1 < c.steps; ++t)
    for (std::size_t i = 0; i < c.nodes; ++i) {
      sxy += ds.s_true.at(t, i) * ds.s_true.at(t + 1, i);
      sxx += ds.s_true.at(t, i) * ds.s_true.at(t, i);
    }
  const double a = sxy / sxx;
  EXPECT_NEAR(a, 0.9, 0.02);
  double resid = 0;
  for (std::size_t t = 0; t + 1 < c.steps; ++t)
    for (std::size_t i = 0; i < c.nodes; ++i) {
      const double e = ds.s_true.at(t + 1, i) - 0.9 * ds.s_true.at(t, i);
      resid += e * e;
    }
  EXPECT_NEAR(resid / static_cast<double>((c.steps - 1) * c.nodes), 1.0, 0.05);
}

TEST(GenScm, IndependentOfConfounderWhenKappaZero) {
  ScmConfig c;
  c.nodes = 16;
  c.steps = 2000;
  c.kappa = 0.0;
  c.image_stride = 0;
  const auto ds = gen_scm(c);
  EXPECT_LT(std::abs(pooled_corr(ds, 0)), 0.05);
  EXPECT_LT(std::abs(pooled_corr(ds, 1)), 0.05);
}

// With theta, kappa, field and noise off, X_{t+1} = tanh(w_C pulse_t): the lead
// shifts the series and leaves the text untouched.
TEST(GenScm, EventLeadDelaysPulseOnly) {
  ScmConfig c;
  c.nodes = 4;
  c.steps = 300;
  c.kappa = 0.0;
  c.theta = 0.0;
  c.w_field = 0.0;
  c.noise = 0.0;
  c.event_rate = 0.2;
  c.image_stride = 0;
  const auto base = gen_scm(c);
  c.event_lead = 3;
  const auto led = gen_scm(c);
  ASSERT_FALSE(base.text.empty());
  ASSERT_EQ(base.text.size(), led.text.size());
  for (std::size_t k = 0; k < base.text.size(); ++k) EXPECT_EQ(base.text[k], led.text[k]);
  for (std::size_t t = 1; t <= 3; ++t) EXPECT_EQ(led.series.values.at(t, 0, 0), 0.0);
  std::size_t nonzero = 0;
  for (std::size_t t = 1; t + 3 < c.steps; ++t)
    for (std::size_t i = 0; i < c.nodes; ++i) {
      EXPECT_EQ(led.series.values.at(t + 3, i, 0), base.series.values.at(t, i, 0));
      nonzero += base.series.values.at(t, i, 0) != 0.0;
    }
  EXPECT_GT(nonzero, 0u);
  // No pulse before the first event's slot plus one plus the lead.
  const auto first = static_cast<std::size_t>(led.text.front().timestamp / c.dt);
  for (std::size_t t = 1; t < first + 5 && t < c.steps; ++t) EXPECT_EQ(led.series.values.at(t, 0, 0), 0.0);
}

TEST(GenScm, ConfoundingRaisesCorrelation) {
  ScmConfig c;
  c.nodes = 16;
  c.steps = 2000;
  c.image_stride = 0;
  c.kappa = 0.0;
  const double base = pooled_corr(gen_scm(c), 1);
  c.kappa = 0.8;
  const double confounded = pooled_corr(gen_scm(c), 1);
  // Seed-7 regression: base ~ 0.00, confounded ~ 0.86.
  EXPECT_GT(confounded - base, 0.6) << "base=" << base << " confounded=" << confounded;
}

TEST(GenScm, ConfigFromKv) {
  const auto kv = KvConfig::parse_string("nodes = 9\nsteps = 50\ngraph = random-geometric\nradius = 0.7\nkappa = 0.3\n");
  const ScmConfig c = ScmConfig::from_kv(kv);
  EXPECT_EQ(c.nodes, 9u);
  EXPECT_EQ(c.graph, GraphKind::kRandomGeometric);
  EXPECT_DOUBLE_EQ(c.kappa, 0.3);
  EXPECT_THROW(ScmConfig::from_kv(KvConfig::parse_string("nodez = 9\n")), ConfigError);
  EXPECT_THROW(ScmConfig::from_kv(KvConfig::parse_string("kappa = 1.5\n")), ConfigError);
}

void expect_datasets_equal(const MultiModalDataset& a, const MultiModalDataset& b) {
  EXPECT_EQ(a.series.timestamps, b.series.timestamps);
  EXPECT_EQ(a.series.node_coords, b.series.node_coords);
  EXPECT_EQ(a.series.values, b.series.values);
  EXPECT_EQ(a.text, b.text);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.adjacency, b.adjacency);
  EXPECT_EQ(a.s_true, b.s_true);
  EXPECT_EQ(a.image_height, b.image_height);
  EXPECT_EQ(a.image_width, b.image_width);
  EXPECT_EQ(a.image_channels, b.image_channels);
}

TEST(DatasetIo, RoundTripIsBitExact) {
  ScmConfig c = small_config();
  c.channels = 2;
  c.start_time = 1234.56789;
  const auto ds = gen_scm(c);
  const fs::path dir = scratch_dir("roundtrip");
  write_dataset(ds, dir);
  expect_datasets_equal(ds, read_dataset(dir));
  fs::remove_all(dir);
}

TEST(DatasetIo, EmptyObservationListsRoundTrip) {
  ScmConfig c = small_config();
  c.event_rate = 0.0;
  c.image_stride = 0;
  auto ds = gen_scm(c);
  ds.s_true = Tensor();
  ASSERT_TRUE(ds.text.empty());
  ASSERT_TRUE(ds.images.empty());
  const fs::path dir = scratch_dir("empty");
  write_dataset(ds, dir);
  const auto back = read_dataset(dir);
  expect_datasets_equal(ds, back);
  EXPECT_FALSE(back.has_s_true());
  fs::remove_all(dir);
}

TEST(DatasetIo, GoldenFixture) {
  const auto ds = read_dataset(fs::path(CSTP_FIXTURE_DIR) / "golden2x3");
  EXPECT_EQ(ds.series.nodes(), 2u);
  EXPECT_EQ(ds.series.steps(), 3u);
  EXPECT_EQ(ds.series.channels(), 1u);
  EXPECT_TRUE(ds.text.empty());
  EXPECT_TRUE(ds.images.empty());
  EXPECT_EQ(ds.series.timestamps, (std::vector<double>{0.0, 300.0, 600.0}));
  EXPECT_EQ(ds.series.node_coords, (std::vector<Point>{{0.25, 0.5}, {0.75, 0.5}}));
  EXPECT_EQ(ds.series.values, Tensor({3, 2, 1}, {1.5, -2.0, 0.125, 3.0, -0.5, 4.25}));
  EXPECT_EQ(ds.adjacency, Tensor({2, 2}, {0.0, 1.0, 1.0, 0.0}));
  EXPECT_EQ(ds.s_true, Tensor({3, 2}, {0.1, -0.2, 0.3, 0.4, -1.0, 2.5}));
  EXPECT_EQ(ds.image_height, 2u);
}

class DatasetIoErrors : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = scratch_dir("errors");
    fs::copy(fs::path(CSTP_FIXTURE_DIR) / "golden2x3", dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  void rewrite(const std::string& file, const std::string& from, const std::string& to) {
    std::ifstream in(dir_ / file);
    std::string text((std::istreambuf_iterator<char>(in)), {});
    const auto pos = text.find(from);
    ASSERT_NE(pos, std::string::npos);
    text.replace(pos, from.size(), to);
    std::ofstream(dir_ / file) << text;
  }

  void expect_error(const std::string& needle) {
    try {
      read_dataset(dir_);
      FAIL() << "expected DataError containing '" << needle << "'";
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  }

  fs::path dir_;
};

TEST_F(DatasetIoErrors, FixtureCopyReads) { EXPECT_NO_THROW(read_dataset(dir_)); }

TEST_F(DatasetIoErrors, UnknownMajorVersion) {
  rewrite("meta", "format_version = 1", "format_version = 2");
  expect_error("unsupported dataset format version 2");
}

TEST_F(DatasetIoErrors, MinorVersionAccepted) {
  rewrite("meta", "format_version = 1", "format_version = 1.3");
  EXPECT_NO_THROW(read_dataset(dir_));
}

TEST_F(DatasetIoErrors, TruncatedSeries) {
  rewrite("series", "600,1,0,4.25\n", "");
  expect_error("truncated");
}

TEST_F(DatasetIoErrors, MissingFile) {
  fs::remove(dir_ / "graph");
  expect_error("missing dataset file");
}

TEST_F(DatasetIoErrors, AsymmetricGraph) {
  rewrite("graph", "1,0", "0.5,0");
  expect_error("symmetric");
}

TEST_F(DatasetIoErrors, CountMismatch) {
  rewrite("meta", "text_count = 0", "text_count = 2");
  expect_error("text: expected 2 records");
}

TEST_F(DatasetIoErrors, TextOutsideRange) {
  rewrite("meta", "text_count = 0", "text_count = 1");
  std::ofstream(dir_ / "text") << "900 late event\n";
  expect_error("outside the series range");
}

TEST_F(DatasetIoErrors, BadNumber) {
  rewrite("series", "0.125", "0.12x");
  expect_error("cannot parse number");
}

TEST(DatasetIo, MissingDirectory) {
  EXPECT_THROW(read_dataset("/nonexistent/cstp/dataset"), DataError);
}

}  // namespace
}  // namespace cstp
