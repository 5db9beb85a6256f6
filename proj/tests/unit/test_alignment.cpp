#include <algorithm>
#include <cmath>
#include <numeric>

#include "cstp/alignment.hpp"
#include "cstp/log.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace cstp {
namespace {

using testing::expect_tensor_near;
using testing::random_tensor;

using oracle::naive_image_product;

TEST(TemporalAlignment, HandExamples) {
  const std::vector<double> st{0, 5, 10};
  EXPECT_EQ(build_temporal_alignment(std::vector<double>{0, 10}, st).cols, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(build_temporal_alignment(std::vector<double>{5}, std::vector<double>{4, 6}).cols,
            (std::vector<std::size_t>{0}));
  EXPECT_EQ(build_temporal_alignment(std::vector<double>{3.9}, st).cols, (std::vector<std::size_t>{1}));
  EXPECT_THROW(build_temporal_alignment(std::vector<double>{1}, std::vector<double>{}), ValueError);
}

TEST(TemporalAlignment, MatchesLinearScanAndClampsOutOfRange) {
  Rng rng(21);
  std::vector<double> st(40);
  double t = 0.0;
  for (double& v : st) v = (t += rng.uniform(0.5, 3.0));
  std::vector<double> obs(300);
  for (double& v : obs) v = rng.uniform(-10.0, t + 10.0);
  obs.push_back(st[7]);
  obs.push_back(0.5 * (st[3] + st[4]));
  log::ScopedSilence quiet;
  const OneHotRows m = build_temporal_alignment(obs, st);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < st.size(); ++k)
      if (std::abs(obs[i] - st[k]) < std::abs(obs[i] - st[best])) best = k;
    EXPECT_EQ(m.cols[i], best) << "observation " << obs[i];
  }
}

TEST(SpatialAlignment, HandExamples) {
  const std::vector<Point> nodes{{0, 0}, {1, 0}, {3, 0}, {5, 5}};
  EXPECT_EQ(build_spatial_alignment(std::vector<Point>{{5, 5}}, nodes).cols, (std::vector<std::size_t>{3}));
  EXPECT_EQ(build_spatial_alignment(std::vector<Point>{{2, 0}}, nodes).cols, (std::vector<std::size_t>{1}));
  EXPECT_THROW(build_spatial_alignment(std::vector<Point>{{0, 0}}, std::vector<Point>{}), ValueError);
}

TEST(SpatialAlignment, MatchesBruteForceOnGrid) {
  std::vector<Point> nodes;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 4; ++j) nodes.push_back({0.1 + 0.2 * j, 0.1 + 0.2 * i});
  Rng rng(22);
  std::vector<Point> obs(200);
  for (Point& p : obs) p = {rng.uniform(), rng.uniform()};
  const OneHotRows m = build_spatial_alignment(obs, nodes);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    std::size_t best = 0;
    double bd = 1e300;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      const double d = std::hypot(obs[i].x - nodes[k].x, obs[i].y - nodes[k].y);
      if (d < bd) {
        bd = d;
        best = k;
      }
    }
    EXPECT_EQ(m.cols[i], best);
  }
}

TEST(AlignmentMatrices, RowsAreOneHot) {
  Rng rng(23);
  std::vector<double> obs(20);
  for (double& v : obs) v = rng.uniform(0, 9);
  const Tensor dense = build_temporal_alignment(obs, std::vector<double>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}).dense();
  for (std::size_t i = 0; i < dense.dim(0); ++i) {
    int ones = 0;
    for (std::size_t k = 0; k < dense.dim(1); ++k) {
      EXPECT_TRUE(dense.at(i, k) == 0.0 || dense.at(i, k) == 1.0);
      ones += dense.at(i, k) == 1.0;
    }
    EXPECT_EQ(ones, 1);
  }
}

TEST(AlignText, HandExamples) {
  const OneHotRows one{{2}, 4};
  const Tensor a = align_text(one, std::vector<double>{1.5, -2.0}, 2, 3);
  ASSERT_EQ(a.shape(), (Shape{4, 3, 2}));
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t n = 0; n < 3; ++n) {
      EXPECT_EQ(a.at(t, n, 0), t == 2 ? 1.5 : 0.0);
      EXPECT_EQ(a.at(t, n, 1), t == 2 ? -2.0 : 0.0);
    }

  const Tensor none = align_text(OneHotRows{{}, 4}, std::vector<double>{}, 2, 3);
  for (double v : none.data()) EXPECT_EQ(v, 0.0);

  const Tensor two = align_text(OneHotRows{{1, 1}, 3}, std::vector<double>{1, 2, 10, 20}, 2, 2);
  EXPECT_EQ(two.at(1, 0, 0), 11.0);
  EXPECT_EQ(two.at(1, 1, 1), 22.0);
  EXPECT_THROW(align_text(one, std::vector<double>{1, 2, 3}, 2, 3), ShapeError);
}

TEST(AlignText, EqualsLiteralProduct) {
  Rng rng(24);
  const std::size_t kt = 7, ts = 5, w = 3, nodes = 4;
  OneHotRows mt{{}, ts};
  for (std::size_t i = 0; i < kt; ++i) mt.cols.push_back(rng.index(ts));
  const Tensor feats = random_tensor({kt, w}, rng);
  const Tensor got = align_text(mt, feats.data(), w, nodes);
  const Tensor dense = mt.dense();
  for (std::size_t t = 0; t < ts; ++t)
    for (std::size_t n = 0; n < nodes; ++n)
      for (std::size_t c = 0; c < w; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < kt; ++i) acc += dense.at(i, t) * feats.at(i, c);
        EXPECT_NEAR(got.at(t, n, c), acc, 1e-12);
      }
}

TEST(AlignImage, SingleObservationAndPermutation) {
  const Tensor one = align_image(OneHotRows{{0}, 3}, OneHotRows{{0}, 2}, std::vector<double>{4.0}, 1);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t n = 0; n < 2; ++n) EXPECT_EQ(one.at(t, n, 0), (t == 0 && n == 0) ? 4.0 : 0.0);

  Rng rng(25);
  const Tensor feats = random_tensor({3, 3, 2}, rng);
  const OneHotRows pt{{2, 0, 1}, 3}, ps{{1, 2, 0}, 3};
  const Tensor out = align_image(pt, ps, feats.data(), 2);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(out.at(pt.cols[i], ps.cols[j], c), feats.at(i, j, c));
}

TEST(AlignImage, EqualsTripleLoopOracle) {
  Rng rng(26);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t kt = 1 + rng.index(4), ks = 1 + rng.index(4), ts = 2 + rng.index(5),
                      ns = 2 + rng.index(5), w = 1 + rng.index(3);
    OneHotRows mt{{}, ts}, ms{{}, ns};
    for (std::size_t i = 0; i < kt; ++i) mt.cols.push_back(rng.index(ts));
    for (std::size_t j = 0; j < ks; ++j) ms.cols.push_back(rng.index(ns));
    const Tensor feats = random_tensor({kt, ks, w}, rng);
    expect_tensor_near(align_image(mt, ms, feats.data(), w), naive_image_product(mt.dense(), ms.dense(), feats),
                       1e-12);
  }
}

TEST(AlignImage, InvariantToObservationOrder) {
  Rng rng(27);
  const std::size_t k = 6, w = 2;
  OneHotRows mt{{}, 5}, ms{{}, 4};
  for (std::size_t i = 0; i < k; ++i) {
    mt.cols.push_back(rng.index(5));
    ms.cols.push_back(rng.index(4));
  }
  const Tensor feats = random_tensor({k, w}, rng);
  std::vector<std::size_t> perm(k);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  OneHotRows mt2{{}, 5}, ms2{{}, 4};
  Tensor feats2({k, w});
  for (std::size_t i = 0; i < k; ++i) {
    mt2.cols.push_back(mt.cols[perm[i]]);
    ms2.cols.push_back(ms.cols[perm[i]]);
    for (std::size_t c = 0; c < w; ++c) feats2.at(i, c) = feats.at(perm[i], c);
  }
  expect_tensor_near(align_image_list(mt, ms, feats.data(), w), align_image_list(mt2, ms2, feats2.data(), w),
                     1e-15);
  expect_tensor_near(align_text(mt, feats.data(), w, 3), align_text(mt2, feats2.data(), w, 3), 1e-15);
}

TEST(Normalize, HandExamplesAndRoundTrip) {
  NormStats s{Tensor({1, 1}, 2.0), Tensor({1, 1}, 4.0)};
  EXPECT_EQ(normalize_st(Tensor({1, 1, 1}, 10.0), s)[0], 2.0);
  EXPECT_EQ(normalize_st(Tensor({3, 1, 1}, 2.0), s).max_abs(), 0.0);

  Rng rng(28);
  const Tensor x = random_tensor({30, 4, 2}, rng, -50.0, 50.0);
  const NormStats st = compute_norm_stats(x, 0, 24);
  expect_tensor_near(denormalize_st(normalize_st(x, st), st), x, 1e-12);
}

TEST(Normalize, TrainingSplitMoments) {
  Rng rng(29);
  Tensor x = random_tensor({50, 3, 2}, rng, -3.0, 9.0);
  for (std::size_t t = 0; t < 50; ++t) x.at(t, 2, 1) = 7.0;  // flat channel
  const NormStats st = compute_norm_stats(x, 0, 40);
  EXPECT_EQ(st.stddev.at(2, 1), NormStats::kStdFloor);
  const Tensor z = normalize_st(x, st);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t c = 0; c < 2; ++c) {
      if (n == 2 && c == 1) continue;
      double m = 0.0, v = 0.0;
      for (std::size_t t = 0; t < 40; ++t) m += z.at(t, n, c);
      m /= 40;
      for (std::size_t t = 0; t < 40; ++t) v += (z.at(t, n, c) - m) * (z.at(t, n, c) - m);
      EXPECT_LT(std::abs(m), 1e-10);
      EXPECT_NEAR(v / 40, 1.0, 1e-6);
    }
}

TEST(TextEncoder, CountsAndDeterminism) {
  const auto counts = bag_of_tokens({"rain", "rain"}, 512);
  EXPECT_EQ(counts[token_bucket("rain", 512)], 2.0);
  EXPECT_EQ(std::accumulate(counts.begin(), counts.end(), 0.0), 2.0);

  const std::vector<std::string> corpus{"storm", "closure", "storm", "parade", "closure", "storm"};
  const std::size_t v = 16;
  std::vector<double> oracle(v, 0.0);
  for (const auto& tok : corpus) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char ch : tok) h = (h ^ ch) * 1099511628211ULL;
    oracle[h % v] += 1.0;
  }
  EXPECT_EQ(bag_of_tokens(corpus, v), oracle);

  ad::ParamStore store;
  Rng rng(30);
  const TextEncoder enc = TextEncoder::create(store, "text", 64, 5, rng);
  EXPECT_EQ(enc.encode(corpus), enc.encode(corpus));
  EXPECT_EQ(split_whitespace("  a bb\tc \n"), (std::vector<std::string>{"a", "bb", "c"}));
}

TEST(ImageEncoder, ZeroImageZeroBiasesGivesZero) {
  ad::ParamStore store;
  Rng rng(31);
  const ImageEncoder enc = ImageEncoder::create(store, "img", 3, 4, 5, 6, rng);
  for (const char* b : {"img.conv1.b", "img.conv2.b", "img.proj.b"}) {
    store.set(b, Tensor(store.get(b).shape()));
  }
  const Tensor out = enc.encode(Tensor({8, 8, 3}));
  EXPECT_EQ(out.shape(), (Shape{6}));
  EXPECT_EQ(out.max_abs(), 0.0);
  EXPECT_THROW(enc.encode(Tensor({8, 8, 2})), ShapeError);
}

TEST(ImageEncoder, PoolingKeepsConstantMaps) {
  const Tensor pooled = global_average_pool(ad::constant(Tensor({2, 3, 5, 4}, 0.75))).value();
  ASSERT_EQ(pooled.shape(), (Shape{2, 4}));
  for (double v : pooled.data()) EXPECT_NEAR(v, 0.75, 1e-15);
}

TEST(ImageEncoder, FirstStageMatchesDirectConvolution) {
  ad::ParamStore store;
  Rng rng(32);
  const ImageEncoder enc = ImageEncoder::create(store, "img", 1, 2, 2, 2, rng);
  Tensor kernel({9, 2});
  for (std::size_t i = 0; i < 9; ++i) {
    kernel.at(i, 0) = static_cast<double>(i) - 4.0;
    kernel.at(i, 1) = 0.5;
  }
  store.set("img.conv1.w", kernel);
  store.set("img.conv1.b", Tensor::vector({0.25, -1.0}));
  Tensor img({1, 4, 4, 1});
  for (std::size_t i = 0; i < 16; ++i) img[i] = 0.1 * static_cast<double>(i * i % 7);
  const Tensor got = ImageEncoder::conv(ad::constant(img), enc.conv1).value();
  ASSERT_EQ(got.shape(), (Shape{1, 2, 2, 2}));
  for (std::size_t oy = 0; oy < 2; ++oy)
    for (std::size_t ox = 0; ox < 2; ++ox)
      for (std::size_t f = 0; f < 2; ++f) {
        double acc = f == 0 ? 0.25 : -1.0;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int iy = 2 * static_cast<int>(oy) + ky - 1, ix = 2 * static_cast<int>(ox) + kx - 1;
            if (iy < 0 || ix < 0 || iy >= 4 || ix >= 4) continue;
            acc += img.at(0, iy, ix, 0) * kernel.at(ky * 3 + kx, f);
          }
        EXPECT_NEAR(got.at(0, oy, ox, f), std::max(acc, 0.0), 1e-14);
      }
}

TEST(ImageEncoder, GradientsMatchFiniteDifferences) {
  ad::ParamStore store;
  Rng rng(33);
  const ImageEncoder enc = ImageEncoder::create(store, "img", 2, 3, 3, 2, rng);
  const Tensor img = random_tensor({2, 5, 5, 2}, rng, 0.0, 1.0);
  const auto r = ad::finite_diff_check(
      [&](const ad::ParamStore&) { return testing::probe_loss(enc.forward(ad::constant(img))); }, store);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param;
}

}  // namespace
}  // namespace cstp
